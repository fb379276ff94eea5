#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "lightseg/bench.hpp"
#include "lightseg/convert.hpp"
#include "lightseg/gate.hpp"
#include "support/oracles.hpp"

using namespace lightseg;

namespace {
GateState make_state(std::vector<double> la, double tau) {
  GateState st;
  st.candidates.resize(la.size());
  for (std::size_t i = 0; i < la.size(); ++i) st.candidates[i] = 1 << i;
  st.log_alpha = std::move(la);
  st.tau = tau;
  return st;
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (const auto v : p) {
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}
}  // namespace

TEST_CASE("gumbel: fixed point at u = 1/e") {
  CHECK(gumbel_from_uniform(1.0 / std::exp(1.0)) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("gumbel: empirical mean approaches Euler-Mascheroni") {
  std::mt19937_64 rng(101);
  const std::size_t n = 1000000;
  double sum = 0.0;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) sum += gumbel_from_uniform(uni(rng));
  CHECK(sum / n == doctest::Approx(0.5772156649).epsilon(0.02));
  CHECK(std::abs(sum / n - 0.5772156649) < 0.01);
}

TEST_CASE("gumbel: identical seeds give identical streams") {
  std::mt19937_64 a(55), b(55);
  const auto ga = gumbel_sample(64, a);
  const auto gb = gumbel_sample(64, b);
  CHECK(ga == gb);
}

TEST_CASE("gumbel-softmax: zero noise and uniform alphas give the uniform gate") {
  for (const double tau : {5.0, 1.0, 0.1}) {
    const GateState st = make_state({0.3, 0.3, 0.3, 0.3, 0.3}, tau);
    const std::vector<double> zero(5, 0.0);
    const auto z = gumbel_softmax_from_noise(st, zero);
    for (const auto v : z) CHECK(v == doctest::Approx(0.2).epsilon(1e-9));
  }
}

TEST_CASE("gumbel-softmax: samples sum to one") {
  std::mt19937_64 rng(77);
  const GateState st = make_state({0.5, -1.0, 2.0, 0.0, 1.0}, 0.7);
  for (int i = 0; i < 200; ++i) {
    const auto z = gumbel_softmax_sample(st, rng);
    double total = 0.0;
    for (const auto v : z) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("gumbel-softmax rejects tau <= 0") {
  GateState st = make_state({0.0, 0.0}, 0.0);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(gumbel_softmax_sample(st, rng), std::invalid_argument);
}

TEST_CASE("gumbel-max law: argmax frequency follows softmax(log_alpha), any tau") {
  // N=2 with log_alpha = (ln 2, 0): P(argmax = 0) = 2/3
  for (const double tau : {1.0, 0.25}) {
    const GateState st = make_state({std::log(2.0), 0.0}, tau);
    std::mt19937_64 rng(202);
    int hits = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const auto z = gumbel_softmax_sample(st, rng);
      if (z[0] > z[1]) ++hits;
    }
    CHECK(static_cast<double>(hits) / n == doctest::Approx(2.0 / 3.0).epsilon(0.03));
    CHECK(std::abs(static_cast<double>(hits) / n - 2.0 / 3.0) < 0.02);
  }
}

TEST_CASE("sample entropy decreases as tau decreases") {
  const GateState base = make_state({0.4, -0.3, 0.8, 0.0, -0.5}, 1.0);
  double prev = 1e9;
  for (const double tau : {1.0, 0.5, 0.1}) {
    GateState st = base;
    st.tau = tau;
    std::mt19937_64 rng(303);
    double mean_h = 0.0;
    const int n = 2000;
    for (int i = 0; i < n; ++i) mean_h += entropy(gumbel_softmax_sample(st, rng));
    mean_h /= n;
    CHECK(mean_h < prev);
    prev = mean_h;
  }
}

TEST_CASE("temperature annealing schedule") {
  const AnnealSchedule sched = AnnealSchedule::over_steps(1000, 5.0, 0.1);
  CHECK(anneal_temperature(0, sched) == doctest::Approx(5.0));
  CHECK(anneal_temperature(1000, sched) == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(anneal_temperature(100000, sched) == doctest::Approx(0.1));
  CHECK(anneal_temperature(500, sched) ==
        doctest::Approx(std::sqrt(5.0 * 0.1)).epsilon(1e-9));
  double prev = 1e18;
  for (int s = 0; s <= 1000; s += 50) {
    const double t = anneal_temperature(s, sched);
    CHECK(t <= prev);
    prev = t;
  }
  CHECK_THROWS_AS(AnnealSchedule::over_steps(0), std::invalid_argument);
  AnnealSchedule bad = sched;
  bad.tau0 = -1.0;
  CHECK_THROWS_AS(anneal_temperature(1, bad), std::invalid_argument);
}

TEST_CASE("decode_gates: argmax with ties toward the smallest dilation") {
  GateState st = make_state({0.0, 5.0, 0.0, 0.0, 0.0}, 0.1);
  st.candidates = {1, 2, 4, 8, 16};
  CHECK(decode_gates({st}) == std::vector<int>{2});

  GateState tie = make_state({1.0, 1.0, 1.0, 1.0, 1.0}, 0.1);
  tie.candidates = {1, 2, 4, 8, 16};
  CHECK(decode_gates({tie}) == std::vector<int>{1});
}

TEST_CASE("make_gated and apply_dilations") {
  const NetworkSpec dil = convert_to_dilated(build_network(Variant::light_v2, 2));
  CHECK_THROWS_AS(make_gated(build_network(Variant::light_v2, 2), {1, 2, 4}),
                  std::invalid_argument);
  const NetworkSpec gated = make_gated(dil, {1, 2, 4, 8, 16});
  CHECK(gated.gated_unit_count() == 4);
  CHECK(gated.stages[0][0].kind == UnitKind::plain);
  CHECK(gated.stages[2][0].kind == UnitKind::gated);

  const NetworkSpec decoded = apply_dilations(gated, {2, 4, 8, 8});
  CHECK(decoded.gated_unit_count() == 0);
  CHECK(decoded.gate_candidates.empty());
  CHECK(decoded.stages[2][0].dilation == 2);
  CHECK(decoded.stages[2][1].dilation == 4);
  CHECK(decoded.stages[3][0].dilation == 8);
  CHECK(decoded.stages[3][1].dilation == 8);
  CHECK_THROWS_AS(apply_dilations(gated, {1, 2}), std::invalid_argument);
}

TEST_CASE("decoded network adds no parameters or compute") {
  const NetworkSpec dil = convert_to_dilated(build_network(Variant::light_v2, 2));
  const NetworkSpec gated = make_gated(dil, {1, 2, 4, 8, 16});
  const NetworkSpec decoded = apply_dilations(gated, {8, 16, 2, 8});
  CHECK(parameter_count(decoded) == parameter_count(dil));
  const Shape4 input{1, 3, 96, 96};
  CHECK(flop_count(decoded, input) == flop_count(dil, input));
}

TEST_CASE("one-hot gate reproduces the plain unit bit for bit") {
  const NetworkSpec dil = convert_to_dilated(build_network(Variant::light_v2, 2));
  const NetworkSpec gated = make_gated(dil, {1, 2, 4, 8, 16});
  auto params = init_params<float>(gated, 99);
  const std::string prefix = "stage4.unit1";
  const UnitSpec& gunit = gated.stages[3][1];

  std::mt19937_64 rng(41);
  Tensor<float> x = oracles::random_tensor_f({1, 32, 12, 12}, rng);

  const int pick = 3;  // dilation 8
  std::vector<float> onehot(5, 0.0f);
  onehot[pick] = 1.0f;
  Tape<float> tape(false);
  Tensor<float> zbar = Tensor<float>::vec(onehot);
  Tensor<float> got = gated_unit_forward(tape, gunit, gated.gate_candidates, params,
                                         prefix, zbar, x, BnMode::infer);

  // plain unit wired to the picked branch's weights
  NetworkSpec plain = apply_dilations(gated, {1, 1, 1, 8});
  auto pparams = init_params<float>(plain, 7);
  const auto copy_from_branch = [&](const std::string& dst, const std::string& src) {
    auto d = pparams.at(dst).data();
    const auto s = params.at(src).data();
    std::copy(s.begin(), s.end(), d.begin());
  };
  for (const char* leaf :
       {"conv1.weight", "bn1.gamma", "bn1.beta", "bn1.running_mean", "bn1.running_var",
        "conv2.weight", "bn2.gamma", "bn2.beta", "bn2.running_mean",
        "bn2.running_var"}) {
    copy_from_branch(prefix + "." + leaf,
                     prefix + ".branch" + std::to_string(pick) + "." + leaf);
  }
  Tensor<float> want = residual_unit_forward(tape, plain.stages[3][1], pparams, prefix,
                                             x, BnMode::infer);
  REQUIRE(got.shape() == want.shape());
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    REQUIRE(got.data()[i] == want.data()[i]);
  }
}

TEST_CASE("zero branch parameters leave only the skip path") {
  const NetworkSpec dil = convert_to_dilated(build_network(Variant::light_v2, 2));
  const NetworkSpec gated = make_gated(dil, {1, 2, 4});
  auto params = init_params<float>(gated, 3);
  const std::string prefix = "stage4.unit1";
  for (int b = 0; b < 3; ++b) {
    for (const char* leaf : {"conv1.weight", "conv2.weight"}) {
      auto d = params.at(prefix + ".branch" + std::to_string(b) + "." + leaf).data();
      std::fill(d.begin(), d.end(), 0.0f);
    }
  }
  // in-network inputs are post-relu, so x >= 0 and relu(x + 0) == x
  Tensor<float> x = Tensor<float>::full({1, 32, 8, 8}, 0.25f);
  Tape<float> tape(false);
  Tensor<float> zbar = Tensor<float>::vec({0.2f, 0.3f, 0.5f});
  Tensor<float> y = gated_unit_forward(tape, gated.stages[3][1], gated.gate_candidates,
                                       params, prefix, zbar, x, BnMode::infer);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(0.25f).epsilon(1e-6));
  }
}

TEST_CASE("gradient reaches log_alpha through the sampled gate") {
  const NetworkSpec dil = convert_to_dilated(build_network(Variant::light_v2, 2));
  const NetworkSpec gated = make_gated(dil, {1, 2, 4});
  auto params = init_params<double>(gated, 5);
  const std::string prefix = "stage4.unit1";
  std::mt19937_64 rng(61);
  Tensor<double> x = oracles::random_tensor({1, 32, 8, 8}, rng, 0.0, 1.0);
  Tensor<double>& log_alpha = params.at(prefix + ".gate.log_alpha");
  const std::vector<double> noise = {0.3, -0.2, 0.5};  // fixed injected G
  const double tau = 0.8;

  oracles::GradCheck gc;
  const double err = gc.run({&log_alpha}, [&](Tape<double>& tape) {
    Tensor<double> z = shift(tape, log_alpha, std::vector<double>(noise));
    z = scale(tape, z, 1.0 / tau);
    Tensor<double> zbar = channel_softmax(tape, z);
    return gated_unit_forward(tape, gated.stages[3][1], gated.gate_candidates, params,
                              prefix, zbar, x, BnMode::infer);
  });
  CHECK(err < 1e-3);
}
