#pragma once

#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "lightseg/train.hpp"

namespace lightseg {

// Selection state of one gated unit: log-alpha scores over the candidate
// dilation set, softmax temperature and the rng stream seed.
struct GateState {
  std::vector<double> log_alpha;
  double tau = 1.0;
  std::vector<int> candidates;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// G = -log(-log U) with U clamped away from {0,1}.
double gumbel_from_uniform(double u);
std::vector<double> gumbel_sample(std::size_t n, std::mt19937_64& rng);

// softmax((log_alpha + G) / tau) with injected noise; rejects tau <= 0.
std::vector<double> gumbel_softmax_from_noise(const GateState& state,
                                              std::span<const double> noise);
std::vector<double> gumbel_softmax_sample(const GateState& state, std::mt19937_64& rng);

// tau(step) = max(tau_min, tau0 * exp(-rate * step)).
struct AnnealSchedule {
  double tau0 = 5.0;
  double tau_min = 0.1;
  double rate = 0.0;

  // rate chosen so tau(total_steps) == tau_min.
  static AnnealSchedule over_steps(int total_steps, double tau0 = 5.0,
                                   double tau_min = 0.1);
};

double anneal_temperature(int step, const AnnealSchedule& schedule);

// argmax(log_alpha) per unit; ties resolve to the smallest dilation.
std::vector<int> decode_gates(const std::vector<GateState>& states);

// Flags the last four residual units as gated over the candidate set.
// Requires a converted (output-stride-8) spec.
NetworkSpec make_gated(const NetworkSpec& converted, std::vector<int> candidates);

// Plain spec with the gated units' dilations overridden by `dilations`
// (one per gated unit, in network order). Adds no parameters or compute.
NetworkSpec apply_dilations(const NetworkSpec& gated, const std::vector<int>& dilations);

struct SearchConfig {
  TrainConfig train;
  std::vector<int> candidates{1, 2, 4, 8, 16};
  double tau0 = 5.0;
  double tau_min = 0.1;
};

struct SearchTraceRow {
  int step = 0;
  float lr = 0.0f;
  double tau = 0.0;
  float loss = 0.0f;
  std::vector<std::vector<double>> gate_probs;  // softmax(log_alpha) per unit
};

struct SearchResult {
  std::vector<int> decoded;  // chosen dilation per gated unit
  NetworkSpec decoded_spec;
  std::vector<SearchTraceRow> trace;
  ParamStore<float> params;  // parameters at the end of the search
  bool diverged = false;
  int diverged_step = -1;
};

// Jointly optimizes branch weights and gate log-alphas through Gumbel-Softmax
// samples (one fresh draw per gated unit per step), annealing tau, then
// decodes the dilation assignment. Aborts (diverged=true) on non-finite loss,
// keeping the trace collected so far.
SearchResult run_search(const NetworkSpec& gated, const Dataset& dataset,
                        const SearchConfig& cfg);

// CSV: step, loss, tau, then one softmax(log_alpha) column per candidate per
// gated unit.
void write_search_csv(const std::filesystem::path& path, const SearchResult& result);

}  // namespace lightseg
