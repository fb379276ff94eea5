// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit code = number of failures.

#include <sys/resource.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lightseg/bench.hpp"
#include "lightseg/convert.hpp"
#include "lightseg/gate.hpp"
#include "lightseg/kernels.hpp"
#include "lightseg/train.hpp"
#include "support/oracles.hpp"

using namespace lightseg;

namespace {

double cpu_seconds() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return ru.ru_utime.tv_sec + ru.ru_utime.tv_usec * 1e-6 + ru.ru_stime.tv_sec +
         ru.ru_stime.tv_usec * 1e-6;
}

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << (detail.str().empty() ? "" : "; ") << what;
    }
  }
  void note(const std::string& what) {
    detail << (detail.str().empty() ? "" : "; ") << what;
  }
};

// ---------------------------------------------------------------------------
// 1. gradient suite

void criterion_gradients(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1234);
  int shapes = 0;
  double worst_smooth = 0.0, worst_kinked = 0.0;

  const auto run_smooth = [&](double err) {
    worst_smooth = std::max(worst_smooth, err);
    ++shapes;
  };
  const auto run_kinked = [&](double err) {
    worst_kinked = std::max(worst_kinked, err);
    ++shapes;
  };

  // conv2d over stride/dilation/kernel mixes
  const struct {
    int n, cin, cout, hw, k, s, d;
  } conv_cases[] = {
      {1, 1, 1, 5, 3, 1, 1}, {2, 2, 3, 6, 3, 1, 1}, {1, 3, 2, 7, 3, 2, 1},
      {1, 2, 2, 9, 3, 1, 2}, {1, 1, 2, 6, 1, 1, 1}, {2, 2, 1, 8, 3, 2, 2},
      {1, 2, 2, 9, 7, 1, 1},
  };
  for (const auto& cc : conv_cases) {
    Tensor<double> x = oracles::random_tensor({cc.n, cc.cin, cc.hw, cc.hw}, rng);
    Tensor<double> w = oracles::random_tensor({cc.cout, cc.cin, cc.k, cc.k}, rng);
    Tensor<double> b = oracles::random_tensor({1, cc.cout, 1, 1}, rng);
    Conv2dOpts o;
    o.stride_h = o.stride_w = cc.s;
    o.dilation_h = o.dilation_w = cc.d;
    o.pad_h = o.pad_w = cc.d * (cc.k - 1) / 2;
    oracles::GradCheck gc;
    run_smooth(gc.run({&x, &w, &b},
                      [&](Tape<double>& t) { return conv2d(t, x, w, &b, o); }));
  }

  // batchnorm, both modes
  for (const BnMode mode : {BnMode::train, BnMode::infer}) {
    for (int rep = 0; rep < 2; ++rep) {
      Tensor<double> x = oracles::random_tensor({2, 3, 4, 3}, rng);
      Tensor<double> g = oracles::random_tensor({1, 3, 1, 1}, rng, 0.5, 1.5);
      Tensor<double> be = oracles::random_tensor({1, 3, 1, 1}, rng);
      Tensor<double> rm = oracles::random_tensor({1, 3, 1, 1}, rng);
      Tensor<double> rv = oracles::random_tensor({1, 3, 1, 1}, rng, 0.5, 2.0);
      oracles::GradCheck gc;
      run_smooth(gc.run({&x, &g, &be}, [&](Tape<double>& t) {
        return batchnorm2d(t, x, g, be, rm, rv, mode, 0.1, 1e-5);
      }));
    }
  }

  // relu, kink-avoided
  for (int rep = 0; rep < 2; ++rep) {
    Tensor<double> x = oracles::random_tensor({1, 2, 5, 5}, rng);
    for (auto& v : x.data()) {
      if (std::abs(v) < 1e-3) v = v < 0 ? -1e-3 : 1e-3;
    }
    oracles::GradCheck gc;
    run_kinked(gc.run({&x}, [&](Tape<double>& t) { return relu(t, x); }));
  }

  // add / scale / shift
  {
    Tensor<double> a = oracles::random_tensor({1, 2, 3, 3}, rng);
    Tensor<double> b = oracles::random_tensor({1, 2, 3, 3}, rng);
    oracles::GradCheck gc;
    run_smooth(gc.run({&a, &b}, [&](Tape<double>& t) { return add(t, a, b); }));
    run_smooth(gc.run({&a}, [&](Tape<double>& t) { return scale(t, a, 0.7); }));
    std::vector<double> offs(static_cast<std::size_t>(a.numel()), -0.2);
    run_smooth(gc.run({&a}, [&](Tape<double>& t) { return shift(t, a, offs); }));
  }

  // maxpool
  for (int rep = 0; rep < 2; ++rep) {
    Tensor<double> x = oracles::random_tensor({1, 2, 6, 6}, rng, -10.0, 10.0);
    oracles::GradCheck gc;
    run_kinked(gc.run({&x}, [&](Tape<double>& t) { return maxpool2d(t, x, 3, 2, 1); }));
  }

  // bilinear upsample
  for (const int f : {2, 4}) {
    Tensor<double> x = oracles::random_tensor({1, 2, 3, 4}, rng);
    oracles::GradCheck gc;
    run_smooth(gc.run({&x}, [&](Tape<double>& t) { return bilinear_upsample(t, x, f); }));
  }

  // channel softmax + gate combine
  {
    Tensor<double> la = oracles::random_tensor({1, 5, 1, 1}, rng, -1.0, 1.0);
    oracles::GradCheck gc;
    run_smooth(gc.run({&la}, [&](Tape<double>& t) { return channel_softmax(t, la); }));

    Tensor<double> w = oracles::random_tensor({1, 3, 1, 1}, rng, 0.1, 0.9);
    Tensor<double> b0 = oracles::random_tensor({1, 2, 3, 3}, rng);
    Tensor<double> b1 = oracles::random_tensor({1, 2, 3, 3}, rng);
    Tensor<double> b2 = oracles::random_tensor({1, 2, 3, 3}, rng);
    run_smooth(gc.run({&w, &b0, &b1, &b2}, [&](Tape<double>& t) {
      return gate_combine(t, w, {b0, b1, b2});
    }));
  }

  // softmax cross entropy
  for (int rep = 0; rep < 2; ++rep) {
    Tensor<double> logits = oracles::random_tensor({1, 3, 4, 4}, rng, -2.0, 2.0);
    IntMask tg;
    tg.n = 1;
    tg.h = 4;
    tg.w = 4;
    tg.values.resize(16);
    std::uniform_int_distribution<int> cls(0, 2);
    for (auto& v : tg.values) v = cls(rng);
    oracles::GradCheck gc;
    run_smooth(gc.run({&logits}, [&](Tape<double>& t) {
      return softmax_cross_entropy(t, logits, tg);
    }));
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.require(shapes >= 20, "only " + std::to_string(shapes) + " shapes");
  c.require(worst_smooth < 1e-4,
            "smooth-op rel err " + std::to_string(worst_smooth));
  c.require(worst_kinked < 1e-2,
            "piecewise-op rel err " + std::to_string(worst_kinked));
  c.require(secs < 60.0, "took " + std::to_string(secs) + "s");
  c.note(std::to_string(shapes) + " shapes, max rel err " +
         std::to_string(worst_smooth) + " (smooth) / " +
         std::to_string(worst_kinked) + " (piecewise), " + std::to_string(secs) + "s");
}

// ---------------------------------------------------------------------------
// 2. conv oracle

void criterion_conv_oracle(Check& c) {
  std::mt19937_64 rng(4321);
  std::uniform_int_distribution<int> pick_hw(3, 11), pick_c(1, 3), pick_n(1, 2);
  const int strides[] = {1, 2};
  const int dils[] = {1, 2, 4};
  const int kernels[] = {1, 3, 7};
  int cases = 0;
  std::int64_t mismatches = 0;
  for (int iter = 0; cases < 108; ++iter) {
    const int k = kernels[iter % 3];
    const int s = strides[(iter / 3) % 2];
    const int d = dils[(iter / 6) % 3];
    const int h = pick_hw(rng), w = pick_hw(rng);
    const int eff = d * (k - 1) + 1;
    const int pad = d * (k - 1) / 2;
    if (h + 2 * pad < eff || w + 2 * pad < eff) continue;
    Tape<double> tape(false);
    Tensor<double> x = oracles::random_tensor({pick_n(rng), pick_c(rng), h, w}, rng);
    Tensor<double> wt =
        oracles::random_tensor({pick_c(rng), x.shape().c, k, k}, rng);
    Tensor<double> b = oracles::random_tensor({1, wt.shape().n, 1, 1}, rng);
    Conv2dOpts o;
    o.stride_h = o.stride_w = s;
    o.dilation_h = o.dilation_w = d;
    o.pad_h = o.pad_w = pad;
    const Tensor<double> got = conv2d(tape, x, wt, &b, o);
    const Tensor<double> ref = oracles::conv2d_naive(x, wt, &b, o);
    for (std::int64_t i = 0; i < got.numel(); ++i) {
      if (got.data()[i] != ref.data()[i]) ++mismatches;
    }
    ++cases;
  }
  c.require(cases >= 100, "only " + std::to_string(cases) + " cases");
  c.require(mismatches == 0, std::to_string(mismatches) + " elements differ");
  c.note(std::to_string(cases) + " cases, exact match");
}

// ---------------------------------------------------------------------------
// 3. a-trous equivalence on the standard network

struct RfInfo {
  std::int64_t jump = 1;
  std::int64_t rf = 1;
  void conv(std::int64_t k, std::int64_t s, std::int64_t d) {
    const std::int64_t eff = d * (k - 1) + 1;
    rf += (eff - 1) * jump;
    jump *= s;
  }
};

void criterion_atrous(Check& c) {
  const NetworkSpec base = build_network(Variant::standard, 2);
  const NetworkSpec dil = convert_to_dilated(base);
  c.require(output_stride(base) == 32, "base output stride != 32");
  c.require(output_stride(dil) == 8, "converted output stride != 8");

  auto params = init_params<float>(base, 2025);
  std::mt19937_64 rng(77);
  const Tensor<float> img = oracles::random_tensor_f({1, 3, 512, 512}, rng, 0.0f, 1.0f);

  // receptive fields of the unconverted net after stages 3 and 4
  RfInfo rf3;
  rf3.conv(7, 2, 1);
  rf3.conv(3, 2, 1);  // max-pool
  for (int i = 0; i < 4; ++i) rf3.conv(3, 1, 1);        // stage 1
  rf3.conv(3, 2, 1);
  for (int i = 0; i < 3; ++i) rf3.conv(3, 1, 1);        // stage 2
  rf3.conv(3, 2, 1);
  for (int i = 0; i < 3; ++i) rf3.conv(3, 1, 1);        // stage 3
  RfInfo rf4 = rf3;
  rf4.conv(3, 2, 1);
  for (int i = 0; i < 3; ++i) rf4.conv(3, 1, 1);        // stage 4

  const auto compare_stage = [&](int stage, const RfInfo& rf, int ratio,
                                 double* max_diff) -> std::int64_t {
    Tape<float> t1(false), t2(false);
    auto base_spec = base;
    auto dil_spec = dil;
    Tensor<float> a = forward_features(t1, base_spec, params, img, BnMode::infer, stage);
    Tensor<float> b = forward_features(t2, dil_spec, params, img, BnMode::infer, stage);
    const auto sa = a.shape();
    const std::int64_t half = (rf.rf - 1) / 2;
    std::int64_t lo = (half + rf.jump - 1) / rf.jump;
    std::int64_t hi = (511 - half) / rf.jump;
    std::int64_t count = 0;
    for (std::int64_t ch = 0; ch < sa.c; ++ch) {
      for (std::int64_t i = lo; i <= hi && i < sa.h; ++i) {
        for (std::int64_t j = lo; j <= hi && j < sa.w; ++j) {
          const double va = a.at(0, ch, i, j);
          const double vb = b.at(0, ch, i * ratio, j * ratio);
          *max_diff = std::max(*max_diff, std::abs(va - vb));
          ++count;
        }
      }
    }
    return count;
  };

  double d3 = 0.0, d4 = 0.0;
  const std::int64_t n3 = compare_stage(3, rf3, 2, &d3);
  const std::int64_t n4 = compare_stage(4, rf4, 4, &d4);
  c.require(n3 > 0 && n4 > 0, "no interior positions");
  c.require(d3 < 1e-5, "stage-3 max diff " + std::to_string(d3));
  c.require(d4 < 1e-5, "stage-4 max diff " + std::to_string(d4));
  c.note("interior positions: stage3 " + std::to_string(n3) + " (max diff " +
         std::to_string(d3) + "), stage4 " + std::to_string(n4) + " (max diff " +
         std::to_string(d4) + ")");
}

// ---------------------------------------------------------------------------
// 4. gumbel-max law + entropy ordering

void criterion_gumbel(Check& c) {
  GateState st;
  st.log_alpha = {0.5, -0.2, 0.9, 0.0, -0.7};
  st.candidates = {1, 2, 4, 8, 16};

  std::vector<double> p(5);
  {
    double z = 0.0;
    for (int i = 0; i < 5; ++i) z += std::exp(st.log_alpha[i]);
    for (int i = 0; i < 5; ++i) p[i] = std::exp(st.log_alpha[i]) / z;
  }

  const int n = 10000;
  for (const double tau : {1.0, 0.1}) {
    st.tau = tau;
    std::mt19937_64 rng(909);
    std::vector<int> counts(5, 0);
    for (int s = 0; s < n; ++s) {
      const auto z = gumbel_softmax_sample(st, rng);
      int arg = 0;
      for (int i = 1; i < 5; ++i) {
        if (z[i] > z[arg]) arg = i;
      }
      ++counts[arg];
    }
    for (int i = 0; i < 5; ++i) {
      const double freq = static_cast<double>(counts[i]) / n;
      const double sigma = std::sqrt(p[i] * (1 - p[i]) / n);
      if (std::abs(freq - p[i]) > 3 * sigma) {
        c.require(false, "tau " + std::to_string(tau) + " class " + std::to_string(i) +
                             ": freq " + std::to_string(freq) + " vs p " +
                             std::to_string(p[i]));
      }
    }
  }

  double prev = 1e18;
  bool decreasing = true;
  for (const double tau : {1.0, 0.5, 0.1}) {
    st.tau = tau;
    std::mt19937_64 rng(910);
    double mean_entropy = 0.0;
    const int m = 2000;
    for (int s = 0; s < m; ++s) {
      const auto z = gumbel_softmax_sample(st, rng);
      double h = 0.0;
      for (const double v : z) {
        if (v > 0) h -= v * std::log(v);
      }
      mean_entropy += h;
    }
    mean_entropy /= m;
    decreasing = decreasing && mean_entropy < prev;
    prev = mean_entropy;
  }
  c.require(decreasing, "entropy not strictly decreasing in tau");
  c.note("argmax frequencies within 3 sigma at tau 1.0 and 0.1; entropy decreasing");
}

// ---------------------------------------------------------------------------
// 5 + 7b. planted search configuration shared by both criteria

struct SearchArm {
  int offset = 8;
  int height = 48, width = 128;
  int noise_cell = 8;
  int train_count = 48;
  int steps = 180;
  int batch = 2;
  float lr = 2e-3f;
};

struct PlantedSetup {
  // the gap-64 arm: one live tap per pixel, reachable only at dilation 8
  SearchArm planted{8, 48, 128, 8, 48, 180, 2, 2e-3f};
  // the gap-8 control: wide map so every candidate's taps see real content,
  // smooth field so the fine-scale comparison is resolvable at stride 8
  SearchArm control{1, 40, 224, 24, 64, 240, 2, 4e-3f};
  int eval_count = 16;
  int retrain_steps = 500;
  int retrain_batch = 4;
  float retrain_lr = 2e-3f;
};

Dataset planted_data(const SearchArm& arm, std::uint64_t seed, int count) {
  GenConfig cfg;
  cfg.task = GenTask::planted_dilation;
  cfg.height = arm.height;
  cfg.width = arm.width;
  cfg.num_classes = 2;
  cfg.count = count;
  cfg.seed = seed;
  cfg.planted_offset = arm.offset;
  cfg.noise_cell = arm.noise_cell;
  return gen_planted_dilation(cfg);
}

SearchResult planted_search(const SearchArm& arm, std::uint64_t seed) {
  const Dataset data = planted_data(arm, 1000 + seed, arm.train_count);
  NetworkSpec gated = make_gated(
      convert_to_dilated(build_network(Variant::light_v2, 2)), {1, 2, 4, 8, 16});
  SearchConfig cfg;
  cfg.train.total_steps = arm.steps;
  cfg.train.batch_size = arm.batch;
  cfg.train.base_lr = arm.lr;
  cfg.train.num_classes = 2;
  cfg.train.seed = seed;
  return run_search(gated, data, cfg);
}

void criterion_planted_recovery(Check& c, const PlantedSetup& setup,
                                std::vector<int>* first_decode) {
  const double cpu0 = cpu_seconds();
  int hits8 = 0, hits_control = 0;
  std::ostringstream log8, logc;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SearchResult r = planted_search(setup.planted, seed);
    if (first_decode && first_decode->empty() && !r.diverged) {
      *first_decode = r.decoded;
    }
    const int final_unit = r.decoded.back();
    hits8 += final_unit == 8;
    log8 << final_unit << " ";
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SearchResult r = planted_search(setup.control, seed);
    const int final_unit = r.decoded.back();
    hits_control += final_unit <= 2;
    logc << final_unit << " ";
  }
  const double cpu = cpu_seconds() - cpu0;
  c.require(hits8 >= 8, "dilation-8 recovered in " + std::to_string(hits8) + "/10");
  c.require(hits_control >= 8,
            "control decoded <=2 in " + std::to_string(hits_control) + "/10");
  c.require(cpu <= 1800.0, "cpu budget exceeded: " + std::to_string(cpu) + "s");
  c.note("planted-8 final-unit decodes: " + log8.str() + "(" + std::to_string(hits8) +
         "/10); control: " + logc.str() + "(" + std::to_string(hits_control) +
         "/10); cpu " + std::to_string(static_cast<int>(cpu)) + "s");
}

// ---------------------------------------------------------------------------
// 6. zero-overhead decode

void criterion_zero_overhead(Check& c) {
  const NetworkSpec baseline = convert_to_dilated(build_network(Variant::light_v2, 2));
  const NetworkSpec gated = make_gated(baseline, {1, 2, 4, 8, 16});
  const NetworkSpec decoded = apply_dilations(gated, {2, 8, 8, 16});
  c.require(parameter_count(decoded) == parameter_count(baseline),
            "parameter counts differ");
  const Shape4 shape{1, 3, 96, 96};
  c.require(flop_count(decoded, shape) == flop_count(baseline, shape),
            "flop counts differ");
  c.note("params " + std::to_string(parameter_count(decoded)) + ", MACs " +
         std::to_string(flop_count(decoded, shape)) + ", both equal to baseline");
}

// ---------------------------------------------------------------------------
// 7. end-to-end learning

void criterion_end_to_end(Check& c, const PlantedSetup& setup,
                          const std::vector<int>& searched) {
  // blobs: light_v1 converted, C=2, 96x96, 2000 steps, batch 8
  GenConfig gen;
  gen.task = GenTask::blobs;
  gen.height = 96;
  gen.width = 96;
  gen.num_classes = 2;
  gen.count = 256;
  gen.seed = 11;
  const Dataset train_set = gen_blobs(gen);
  gen.count = 64;
  gen.seed = 12;
  const Dataset eval_set = gen_blobs(gen);

  NetworkSpec spec = convert_to_dilated(build_network(Variant::light_v1, 2));
  TrainConfig cfg;
  cfg.total_steps = 2000;
  cfg.batch_size = 8;
  cfg.num_classes = 2;
  cfg.seed = 3;
  TrainResult result = train(spec, train_set, cfg);
  const EvalReport rep = evaluate(spec, result.params, eval_set);
  c.require(rep.iou.mean >= 0.90,
            "blobs mean IoU " + std::to_string(rep.iou.mean) + " < 0.90");

  // planted: searched dilations vs fixed dilation 1
  const Dataset ptrain = planted_data(setup.planted, 501, setup.planted.train_count);
  const Dataset peval = planted_data(setup.planted, 502, setup.eval_count);
  const NetworkSpec base = convert_to_dilated(build_network(Variant::light_v2, 2));
  std::vector<int> assignment = searched;
  if (assignment.empty()) assignment = {8, 8, 8, 8};
  const NetworkSpec net_searched = apply_dilations(base, assignment);
  const NetworkSpec net_baseline = apply_dilations(base, {1, 1, 1, 1});

  TrainConfig pcfg;
  pcfg.total_steps = setup.retrain_steps;
  pcfg.batch_size = setup.retrain_batch;
  pcfg.base_lr = setup.retrain_lr;
  pcfg.num_classes = 2;
  pcfg.seed = 9;
  TrainResult r_searched = train(net_searched, ptrain, pcfg);
  TrainResult r_baseline = train(net_baseline, ptrain, pcfg);
  const double iou_searched =
      evaluate(net_searched, r_searched.params, peval).iou.mean;
  const double iou_baseline =
      evaluate(net_baseline, r_baseline.params, peval).iou.mean;
  c.require(iou_searched - iou_baseline >= 0.05,
            "planted IoU gain " + std::to_string(iou_searched - iou_baseline));
  std::ostringstream assign_str;
  for (const int d : assignment) assign_str << d << " ";
  c.note("blobs IoU " + std::to_string(rep.iou.mean) + "; planted searched [" +
         assign_str.str() + "] IoU " + std::to_string(iou_searched) +
         " vs dilation-1 " + std::to_string(iou_baseline));
}

// ---------------------------------------------------------------------------
// 8. latency ordering

void criterion_latency(Check& c) {
  const Shape4 input{1, 3, 256, 320};
  std::vector<double> medians;
  std::vector<std::int64_t> flops;
  for (const Variant v : {Variant::light_v2, Variant::light_v1, Variant::standard}) {
    const NetworkSpec spec = convert_to_dilated(build_network(v, 2));
    auto params = init_params<float>(spec, 5);
    const LatencyReport rep = benchmark(spec, params, input, 10, 100);
    medians.push_back(rep.median_ms);
    flops.push_back(rep.flops);
  }
  c.require(medians[0] < medians[1], "v2 median !< v1 median");
  c.require(medians[1] < medians[2], "v1 median !< standard median");
  c.require(flops[0] < flops[1] && flops[1] < flops[2], "flop ordering broken");
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "medians ms: v2 %.2f < v1 %.2f < standard %.2f; MACs %lld < %lld < %lld",
                medians[0], medians[1], medians[2],
                static_cast<long long>(flops[0]), static_cast<long long>(flops[1]),
                static_cast<long long>(flops[2]));
  c.note(buf);
}

// ---------------------------------------------------------------------------
// 9. determinism

void criterion_determinism(Check& c, const PlantedSetup& setup) {
  GenConfig gen;
  gen.task = GenTask::blobs;
  gen.height = 32;
  gen.width = 32;
  gen.num_classes = 2;
  gen.count = 8;
  gen.seed = 40;
  gen.min_capsule_radius = 5.0f;
  gen.max_capsule_radius = 8.0f;
  const Dataset ds = gen_blobs(gen);
  const NetworkSpec spec = convert_to_dilated(build_network(Variant::light_v2, 2));
  TrainConfig cfg;
  cfg.total_steps = 10;
  cfg.batch_size = 2;
  cfg.num_classes = 2;
  cfg.seed = 77;
  cfg.recompute_bn_after = false;
  const TrainResult a = train(spec, ds, cfg);
  const TrainResult b = train(spec, ds, cfg);
  bool same_train = a.log.size() == b.log.size();
  for (std::size_t i = 0; same_train && i < a.log.size(); ++i) {
    same_train = a.log[i].loss == b.log[i].loss;
  }
  c.require(same_train, "train loss logs differ between identical runs");

  SearchArm small = setup.planted;
  small.steps = 40;
  small.train_count = 16;
  const SearchResult s1 = planted_search(small, 123);
  const SearchResult s2 = planted_search(small, 123);
  c.require(s1.decoded == s2.decoded, "decoded assignments differ");
  bool same_search = s1.trace.size() == s2.trace.size();
  for (std::size_t i = 0; same_search && i < s1.trace.size(); ++i) {
    same_search = s1.trace[i].loss == s2.trace[i].loss;
  }
  c.require(same_search, "search loss traces differ");
  c.note("train and search runs bit-identical under fixed seeds");
}

// ---------------------------------------------------------------------------
// 10. BN recompute

void criterion_bn_recompute(Check& c) {
  GenConfig gen;
  gen.task = GenTask::blobs;
  gen.height = 64;
  gen.width = 64;
  gen.num_classes = 2;
  gen.count = 16;
  gen.seed = 50;
  const Dataset ds = gen_blobs(gen);

  NetworkSpec spec = convert_to_dilated(build_network(Variant::light_v1, 2));
  auto params = init_params<float>(spec, 8);
  c.require(spec.bn_stats_stale, "conversion did not mark stats stale");
  recompute_bn_stats(spec, params, ds, 1, 16);
  c.require(!spec.bn_stats_stale, "recompute did not clear the stale flag");

  std::vector<std::size_t> idx(16);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(0);
  const Batch batch = assemble_batch(ds, idx, 0, false, 8, std::nullopt, rng);
  Tape<float> t1(false), t2(false);
  const Tensor<float> infer_out =
      forward_segmentation(t1, spec, params, batch.images, BnMode::infer);
  const Tensor<float> train_out =
      forward_segmentation(t2, spec, params, batch.images, BnMode::train);
  double diff = 0.0;
  for (std::int64_t i = 0; i < infer_out.numel(); ++i) {
    diff += std::abs(infer_out.data()[i] - train_out.data()[i]);
  }
  diff /= static_cast<double>(infer_out.numel());
  c.require(diff < 1e-3, "infer/train mean abs diff " + std::to_string(diff));
  c.note("infer vs train mean abs diff " + std::to_string(diff));
}

}  // namespace

int main() {
  kern::set_num_threads(2);
  PlantedSetup setup;
  std::vector<int> searched_assignment;

  struct Criterion {
    int id;
    const char* name;
    std::function<void(Check&)> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite (finite differences, 64-bit)", criterion_gradients},
      {2, "conv2d equals the naive loop oracle exactly", criterion_conv_oracle},
      {3, "a-trous conversion equivalence, output stride 32 -> 8", criterion_atrous},
      {4, "gumbel-max law and entropy ordering", criterion_gumbel},
      {5, "planted-dilation recovery across seeds",
       [&](Check& c) { criterion_planted_recovery(c, setup, &searched_assignment); }},
      {6, "decoded architecture adds no parameters or FLOPs", criterion_zero_overhead},
      {7, "end-to-end learning (blobs IoU, planted improvement)",
       [&](Check& c) { criterion_end_to_end(c, setup, searched_assignment); }},
      {8, "latency and FLOP ordering across variants", criterion_latency},
      {9, "bit-identical runs under fixed seeds",
       [&](Check& c) { criterion_determinism(c, setup); }},
      {10, "BN statistics recompute aligns infer and train modes",
       criterion_bn_recompute},
  };

  int failures = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(check);
    } catch (const std::exception& e) {
      check.ok = false;
      check.note(std::string("exception: ") + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s — criterion %d: %s [%.1fs] %s\n", check.ok ? "PASS" : "FAIL",
                cr.id, cr.name, secs, check.detail.str().c_str());
    std::fflush(stdout);
    failures += check.ok ? 0 : 1;
  }
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
  } else {
    std::printf("all %zu criteria passed\n", criteria.size());
  }
  return failures;
}
