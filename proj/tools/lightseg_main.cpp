#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lightseg/bench.hpp"
#include "lightseg/convert.hpp"
#include "lightseg/gate.hpp"
#include "lightseg/kernels.hpp"
#include "lightseg/train.hpp"

namespace fs = std::filesystem;
using namespace lightseg;

namespace {

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw data_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad config json: " + std::string(e.what()));
  }
  return j;
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

NetworkSpec spec_from_options(const std::string& spec_path, const std::string& variant,
                              int classes, bool convert,
                              const std::vector<int>& dilations) {
  NetworkSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw data_error("cannot open spec file: " + spec_path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    spec = spec_from_json(text);
  } else {
    spec = build_network(variant_from_string(variant), classes);
    if (convert) spec = convert_to_dilated(spec);
  }
  if (!dilations.empty()) spec = apply_dilations(spec, dilations);
  return spec;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out << text;
  if (text.empty() || text.back() != '\n') out << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"light dilated residual segmentation networks with a "
               "differentiable dilation-rate search"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  int threads = 1;
  app.add_option("--config", config_path, "JSON config file (flags override it)");
  app.add_option("--seed", seed, "global rng seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "kernel threads");

  // pre-scan for --config so file values act as defaults
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
  }
  const nlohmann::json cfgj = load_config(config_path);
  maybe(cfgj, "seed", seed);
  maybe(cfgj, "out", out_dir);
  maybe(cfgj, "threads", threads);

  // ---- gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_task = "blobs";
  int gen_classes = 2, gen_count = 256, gen_height = 96, gen_width = 96,
      gen_offset = 8, gen_cell = 8;
  maybe(cfgj, "task", gen_task);
  maybe(cfgj, "classes", gen_classes);
  maybe(cfgj, "count", gen_count);
  maybe(cfgj, "height", gen_height);
  maybe(cfgj, "width", gen_width);
  maybe(cfgj, "planted_offset", gen_offset);
  gen->add_option("--task", gen_task, "blobs | planted_dilation");
  gen->add_option("--classes", gen_classes);
  gen->add_option("--count", gen_count);
  gen->add_option("--height", gen_height);
  gen->add_option("--width", gen_width);
  gen->add_option("--planted-offset", gen_offset, "offset for the planted task");
  gen->add_option("--noise-cell", gen_cell, "value-noise cell size (planted task)");

  // ---- train
  auto* tr = app.add_subcommand("train", "train a network on a dataset directory");
  std::string tr_data, tr_variant = "light_v1", tr_spec;
  bool tr_no_convert = false;
  std::vector<int> tr_dilations;
  int tr_steps = 2000, tr_batch = 8, tr_crop = 0;
  float tr_lr = 1e-3f, tr_power = 0.9f;
  bool tr_allow_unaligned = false;
  maybe(cfgj, "variant", tr_variant);
  maybe(cfgj, "steps", tr_steps);
  maybe(cfgj, "batch", tr_batch);
  maybe(cfgj, "crop", tr_crop);
  maybe(cfgj, "lr", tr_lr);
  maybe(cfgj, "lr_power", tr_power);
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--variant", tr_variant, "standard | light_v1 | light_v2");
  tr->add_option("--spec", tr_spec, "network spec json (overrides --variant)");
  tr->add_flag("--no-convert", tr_no_convert, "skip the dilated conversion");
  tr->add_option("--dilations", tr_dilations,
                 "dilation override for the last four units");
  tr->add_option("--steps", tr_steps);
  tr->add_option("--batch", tr_batch);
  tr->add_option("--crop", tr_crop, "square crop size (0: full images)");
  tr->add_option("--lr", tr_lr);
  tr->add_option("--lr-power", tr_power);
  tr->add_flag("--allow-unaligned-crop", tr_allow_unaligned,
               "pad crops that are not stride-aligned (e.g. 799)");

  // ---- search
  auto* se = app.add_subcommand("search", "search dilation rates with gated units");
  std::string se_data, se_variant = "light_v2";
  int se_steps = 400, se_batch = 4;
  float se_lr = 2e-3f;
  std::vector<int> se_candidates = {1, 2, 4, 8, 16};
  double se_tau0 = 5.0, se_tau_min = 0.1;
  maybe(cfgj, "variant", se_variant);
  maybe(cfgj, "steps", se_steps);
  maybe(cfgj, "batch", se_batch);
  maybe(cfgj, "lr", se_lr);
  maybe(cfgj, "tau0", se_tau0);
  maybe(cfgj, "tau_min", se_tau_min);
  se->add_option("--data", se_data, "dataset directory")->required();
  se->add_option("--variant", se_variant);
  se->add_option("--steps", se_steps);
  se->add_option("--batch", se_batch);
  se->add_option("--lr", se_lr);
  se->add_option("--candidates", se_candidates, "candidate dilation set");
  se->add_option("--tau0", se_tau0);
  se->add_option("--tau-min", se_tau_min);

  // ---- convert
  auto* cv = app.add_subcommand("convert", "stride-32 spec -> output-stride-8 spec");
  std::string cv_variant = "light_v1", cv_spec;
  int cv_classes = 2;
  cv->add_option("--variant", cv_variant);
  cv->add_option("--classes", cv_classes);
  cv->add_option("--spec", cv_spec, "input spec json (overrides --variant)");

  // ---- eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_data, ev_spec, ev_ckpt;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--spec", ev_spec, "network spec json")->required();
  ev->add_option("--checkpoint", ev_ckpt)->required();

  // ---- bench
  auto* be = app.add_subcommand("bench", "latency/FLOP benchmark");
  std::string be_variant = "light_v1", be_spec;
  bool be_no_convert = false;
  std::vector<std::int64_t> be_shape = {1, 3, 256, 320};
  int be_warmup = 10, be_iters = 100, be_classes = 2;
  maybe(cfgj, "warmup", be_warmup);
  maybe(cfgj, "iters", be_iters);
  be->add_option("--variant", be_variant);
  be->add_option("--spec", be_spec);
  be->add_flag("--no-convert", be_no_convert);
  be->add_option("--shape", be_shape, "input shape N C H W")->expected(4);
  be->add_option("--warmup", be_warmup);
  be->add_option("--iters", be_iters);
  be->add_option("--classes", be_classes);

  // ---- overlay
  auto* ov = app.add_subcommand("overlay", "render a prediction overlay PNG");
  std::string ov_data, ov_spec, ov_ckpt;
  int ov_index = 0;
  ov->add_option("--data", ov_data)->required();
  ov->add_option("--spec", ov_spec)->required();
  ov->add_option("--checkpoint", ov_ckpt)->required();
  ov->add_option("--index", ov_index, "sample index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors exit 1
  }
  kern::set_num_threads(threads);
  const fs::path out(out_dir);
  fs::create_directories(out);

  if (gen->parsed()) {
    GenConfig cfg;
    cfg.task = gen_task == "planted_dilation" ? GenTask::planted_dilation
                                              : GenTask::blobs;
    if (gen_task != "blobs" && gen_task != "planted_dilation") {
      throw std::invalid_argument("unknown task '" + gen_task + "'");
    }
    cfg.num_classes = gen_classes;
    cfg.count = gen_count;
    cfg.height = gen_height;
    cfg.width = gen_width;
    cfg.seed = seed;
    cfg.planted_offset = gen_offset;
    cfg.noise_cell = gen_cell;
    const Dataset ds = cfg.task == GenTask::blobs ? gen_blobs(cfg)
                                                  : gen_planted_dilation(cfg);
    save_dataset(ds, out);
    std::cout << "wrote " << ds.samples.size() << " samples to " << out << "\n";
    return 0;
  }

  if (tr->parsed()) {
    const Dataset ds = load_dataset(tr_data);
    NetworkSpec spec = spec_from_options(tr_spec, tr_variant, ds.num_classes,
                                         !tr_no_convert, tr_dilations);
    TrainConfig cfg;
    cfg.base_lr = tr_lr;
    cfg.lr_power = tr_power;
    cfg.batch_size = tr_batch;
    cfg.crop_size = tr_crop;
    cfg.total_steps = tr_steps;
    cfg.num_classes = ds.num_classes;
    cfg.seed = seed;
    cfg.allow_unaligned_crop = tr_allow_unaligned;
    cfg.checkpoint_path = (out / "model.ckpt").string();
    const TrainResult result = train(spec, ds, cfg);
    write_loss_csv(out / "loss.csv", result.log);
    write_text(out / "spec.json", spec_to_json(spec));
    std::cout << "final loss " << result.log.back().loss << "; checkpoint at "
              << out / "model.ckpt" << "\n";
    return 0;
  }

  if (se->parsed()) {
    const Dataset ds = load_dataset(se_data);
    NetworkSpec base = convert_to_dilated(
        build_network(variant_from_string(se_variant), ds.num_classes));
    NetworkSpec gated = make_gated(base, se_candidates);
    SearchConfig cfg;
    cfg.candidates = se_candidates;
    cfg.tau0 = se_tau0;
    cfg.tau_min = se_tau_min;
    cfg.train.base_lr = se_lr;
    cfg.train.batch_size = se_batch;
    cfg.train.total_steps = se_steps;
    cfg.train.num_classes = ds.num_classes;
    cfg.train.seed = seed;
    const SearchResult result = run_search(gated, ds, cfg);
    write_search_csv(out / "search.csv", result);
    if (result.diverged) {
      throw numeric_error("search diverged at step " +
                          std::to_string(result.diverged_step) + "; trace at " +
                          (out / "search.csv").string());
    }
    write_text(out / "decoded_spec.json", spec_to_json(result.decoded_spec));
    std::cout << "decoded dilations:";
    for (const int d : result.decoded) std::cout << " " << d;
    std::cout << "\n";
    return 0;
  }

  if (cv->parsed()) {
    NetworkSpec spec = spec_from_options(cv_spec, cv_variant, cv_classes, false, {});
    spec = convert_to_dilated(spec);
    write_text(out / "spec.json", spec_to_json(spec));
    std::cout << "output stride " << output_stride(spec) << "; spec at "
              << out / "spec.json" << "\n";
    return 0;
  }

  if (ev->parsed()) {
    const Dataset ds = load_dataset(ev_data);
    NetworkSpec spec = spec_from_options(ev_spec, "", ds.num_classes, false, {});
    auto params = init_params<float>(spec, 0);
    load_params(ev_ckpt, params);
    const EvalReport rep = evaluate(spec, params, ds);
    write_text(out / "eval.json", rep.to_json());
    std::cout << format_results_table(
        {{to_string(spec.variant) + (spec.converted ? " (dilated)" : ""),
          rep.iou.mean, std::nan("")}});
    return 0;
  }

  if (be->parsed()) {
    NetworkSpec spec =
        spec_from_options(be_spec, be_variant, be_classes, !be_no_convert, {});
    auto params = init_params<float>(spec, seed);
    const Shape4 shape{be_shape[0], be_shape[1], be_shape[2], be_shape[3]};
    const LatencyReport rep = benchmark(spec, params, shape, be_warmup, be_iters);
    write_latency_report(out / "latency.json", rep);
    std::cout << format_results_table({{rep.variant, std::nan(""), rep.median_ms}});
    std::cout << "fps " << rep.fps() << ", analytic MACs " << rep.flops
              << ", threads " << rep.threads << "\n";
    return 0;
  }

  if (ov->parsed()) {
    const Dataset ds = load_dataset(ov_data);
    if (ov_index < 0 || ov_index >= static_cast<int>(ds.samples.size())) {
      throw data_error("sample index " + std::to_string(ov_index) +
                       " outside dataset of " + std::to_string(ds.samples.size()));
    }
    NetworkSpec spec = spec_from_options(ov_spec, "", ds.num_classes, false, {});
    auto params = init_params<float>(spec, 0);
    load_params(ov_ckpt, params);
    const auto& sample = ds.samples[ov_index];
    const IntMask pred = predict_mask(spec, params, sample.image);
    const ImageU8 img = render_overlay(sample.image, pred);
    const fs::path path = out / ("overlay_" + sample.id + ".png");
    write_png(path, img);
    std::cout << "wrote " << path << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
