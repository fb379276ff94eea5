#include "lightseg/gate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lightseg/convert.hpp"
#include "lightseg/optim.hpp"

namespace lightseg {

namespace {
constexpr std::uint64_t kGumbelSalt = 0x94D049BB133111EBULL;
}

void GateState::validate() const {
  if (log_alpha.empty() || log_alpha.size() != candidates.size()) {
    throw std::invalid_argument("GateState: log_alpha and candidates must have the "
                                "same nonzero length");
  }
  if (!(tau > 0.0)) {
    throw std::invalid_argument("GateState: tau must be > 0, got " +
                                std::to_string(tau));
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i] < 1 || (i > 0 && candidates[i] <= candidates[i - 1])) {
      throw std::invalid_argument(
          "GateState: candidates must be strictly increasing and >= 1");
    }
  }
}

double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

std::vector<double> gumbel_sample(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> g(n);
  for (auto& v : g) v = gumbel_from_uniform(uni(rng));
  return g;
}

std::vector<double> gumbel_softmax_from_noise(const GateState& state,
                                              std::span<const double> noise) {
  state.validate();
  if (noise.size() != state.log_alpha.size()) {
    throw std::invalid_argument("gumbel_softmax: noise length mismatch");
  }
  const std::size_t n = noise.size();
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = (state.log_alpha[i] + noise[i]) / state.tau;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : z) v /= total;
  return z;
}

std::vector<double> gumbel_softmax_sample(const GateState& state,
                                          std::mt19937_64& rng) {
  state.validate();
  const auto noise = gumbel_sample(state.log_alpha.size(), rng);
  return gumbel_softmax_from_noise(state, noise);
}

AnnealSchedule AnnealSchedule::over_steps(int total_steps, double tau0,
                                          double tau_min) {
  if (total_steps < 1) {
    throw std::invalid_argument("AnnealSchedule: total_steps must be >= 1");
  }
  AnnealSchedule s;
  s.tau0 = tau0;
  s.tau_min = tau_min;
  s.rate = std::log(tau0 / tau_min) / total_steps;
  return s;
}

double anneal_temperature(int step, const AnnealSchedule& schedule) {
  if (!(schedule.tau0 > 0.0) || !(schedule.tau_min > 0.0)) {
    throw std::invalid_argument("anneal_temperature: temperatures must be > 0");
  }
  if (step < 0) throw std::invalid_argument("anneal_temperature: step must be >= 0");
  return std::max(schedule.tau_min, schedule.tau0 * std::exp(-schedule.rate * step));
}

std::vector<int> decode_gates(const std::vector<GateState>& states) {
  std::vector<int> out;
  out.reserve(states.size());
  for (const auto& st : states) {
    st.validate();
    std::size_t best = 0;
    for (std::size_t i = 1; i < st.log_alpha.size(); ++i) {
      if (st.log_alpha[i] > st.log_alpha[best]) best = i;  // ties keep the smaller
    }
    out.push_back(st.candidates[best]);
  }
  return out;
}

NetworkSpec make_gated(const NetworkSpec& converted, std::vector<int> candidates) {
  if (!converted.converted) {
    throw std::invalid_argument("make_gated: spec must be converted to output stride 8");
  }
  if (candidates.empty()) {
    throw std::invalid_argument("make_gated: candidate set is empty");
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i] < 1 || (i > 0 && candidates[i] <= candidates[i - 1])) {
      throw std::invalid_argument(
          "make_gated: candidates must be strictly increasing and >= 1");
    }
  }
  NetworkSpec out = converted;
  for (int s = 2; s < 4; ++s) {
    for (int u = 0; u < 2; ++u) out.stages[s][u].kind = UnitKind::gated;
  }
  out.gate_candidates = std::move(candidates);
  return out;
}

NetworkSpec apply_dilations(const NetworkSpec& gated,
                            const std::vector<int>& dilations) {
  NetworkSpec out = gated;
  std::vector<UnitSpec*> targets;
  for (auto* u : out.units()) {
    if (u->kind == UnitKind::gated) targets.push_back(u);
  }
  if (targets.empty()) {
    // plain spec: the override applies to the last four units
    auto units = out.units();
    for (std::size_t i = units.size() - 4; i < units.size(); ++i) {
      targets.push_back(units[i]);
    }
  }
  if (dilations.size() != targets.size()) {
    throw std::invalid_argument("apply_dilations: got " +
                                std::to_string(dilations.size()) + " rates for " +
                                std::to_string(targets.size()) + " units");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (dilations[i] < 1) {
      throw std::invalid_argument("apply_dilations: dilation must be >= 1");
    }
    targets[i]->dilation = dilations[i];
    targets[i]->kind = UnitKind::plain;
  }
  out.gate_candidates.clear();
  return out;
}

SearchResult run_search(const NetworkSpec& gated, const Dataset& dataset,
                        const SearchConfig& cfg) {
  if (!gated.converted) {
    throw std::invalid_argument("run_search: spec must be converted to output stride 8");
  }
  const int n_gated = gated.gated_unit_count();
  if (n_gated == 0) {
    throw std::invalid_argument("run_search: spec has no gated units; call make_gated");
  }
  if (gated.gate_candidates != cfg.candidates) {
    throw std::invalid_argument("run_search: spec candidates differ from config");
  }
  if (dataset.samples.empty()) throw std::invalid_argument("run_search: empty dataset");
  if (dataset.num_classes != gated.num_classes) {
    throw std::invalid_argument("run_search: dataset classes do not match the network");
  }
  const TrainConfig& tc = cfg.train;
  const int align = output_stride(gated);
  const int n_cand = static_cast<int>(cfg.candidates.size());

  // gated unit parameter prefixes, in forward order
  std::vector<std::string> prefixes;
  for (int s = 0; s < 4; ++s) {
    for (int u = 0; u < 2; ++u) {
      if (gated.stages[s][u].kind == UnitKind::gated) {
        prefixes.push_back("stage" + std::to_string(s + 1) + ".unit" +
                           std::to_string(u));
      }
    }
  }

  ParamStore<float> params = init_params<float>(gated, tc.seed);
  std::vector<AdamState<float>> opt(params.entries.size());
  BatchSampler sampler(dataset.samples.size(), tc.batch_size,
                       tc.seed ^ detail::kSamplerSalt);
  std::mt19937_64 crop_rng(tc.seed ^ detail::kCropSalt);
  std::mt19937_64 gumbel_rng(tc.seed ^ kGumbelSalt);
  const AnnealSchedule anneal =
      AnnealSchedule::over_steps(tc.total_steps, cfg.tau0, cfg.tau_min);

  SearchResult result;
  result.trace.reserve(tc.total_steps);

  for (int step = 0; step < tc.total_steps; ++step) {
    const double tau = anneal_temperature(step, anneal);
    const float lr = poly_lr(step, tc);
    const Batch batch = assemble_batch(dataset, sampler.next(), tc.crop_size,
                                       tc.allow_unaligned_crop, align,
                                       tc.ignore_label, crop_rng);
    Tape<float> tape(true);
    GateForwardCtx<float> ctx;
    for (const auto& prefix : prefixes) {
      Tensor<float>& log_alpha = params.at(prefix + ".gate.log_alpha");
      const auto noise = gumbel_sample(n_cand, gumbel_rng);
      std::vector<float> noise_f(noise.begin(), noise.end());
      Tensor<float> z = shift(tape, log_alpha, std::move(noise_f));
      z = scale(tape, z, static_cast<float>(1.0 / tau));
      ctx.zbar.push_back(channel_softmax(tape, z));
    }
    Tensor<float> logits =
        forward_segmentation(tape, gated, params, batch.images, BnMode::train, &ctx);
    Tensor<float> loss =
        softmax_cross_entropy(tape, logits, batch.masks, batch.ignore_label);
    const float loss_value = loss.data()[0];
    if (!std::isfinite(loss_value)) {
      result.diverged = true;
      result.diverged_step = step;
      break;
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
      auto& e = params.entries[i];
      if (!e.trainable || !e.value.has_grad()) continue;
      adam_step<float>(e.value.data(), e.value.grad(), opt[i], lr, tc.adam_beta1,
                       tc.adam_beta2, tc.adam_eps);
    }

    SearchTraceRow row;
    row.step = step;
    row.lr = lr;
    row.tau = tau;
    row.loss = loss_value;
    for (const auto& prefix : prefixes) {
      const auto la = params.at(prefix + ".gate.log_alpha").data();
      GateState st;
      st.log_alpha.assign(la.begin(), la.end());
      st.tau = 1.0;  // trace records plain softmax(log_alpha)
      st.candidates = cfg.candidates;
      row.gate_probs.push_back(gumbel_softmax_from_noise(
          st, std::vector<double>(st.log_alpha.size(), 0.0)));
    }
    result.trace.push_back(std::move(row));
  }

  std::vector<GateState> states;
  for (const auto& prefix : prefixes) {
    const auto la = params.at(prefix + ".gate.log_alpha").data();
    GateState st;
    st.log_alpha.assign(la.begin(), la.end());
    st.tau = anneal.tau_min;
    st.candidates = cfg.candidates;
    st.rng_seed = tc.seed;
    states.push_back(std::move(st));
  }
  result.decoded = decode_gates(states);
  result.decoded_spec = apply_dilations(gated, result.decoded);
  result.params = std::move(params);
  return result;
}

void write_search_csv(const std::filesystem::path& path, const SearchResult& result) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open search log for writing: " + path.string());
  out << "step,loss,tau";
  if (!result.trace.empty()) {
    for (std::size_t g = 0; g < result.trace.front().gate_probs.size(); ++g) {
      for (std::size_t k = 0; k < result.trace.front().gate_probs[g].size(); ++k) {
        out << ",unit" << g << "_p" << k;
      }
    }
  }
  out << "\n";
  for (const auto& row : result.trace) {
    out << row.step << "," << row.loss << "," << row.tau;
    for (const auto& probs : row.gate_probs) {
      for (const auto p : probs) out << "," << p;
    }
    out << "\n";
  }
}

}  // namespace lightseg
