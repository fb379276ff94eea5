#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "lightseg/checkpoint.hpp"
#include "lightseg/optim.hpp"
#include "lightseg/tensor.hpp"

using namespace lightseg;

TEST_CASE("adam: zero gradient leaves params unchanged") {
  std::vector<float> p{1.0f, -2.0f, 3.0f};
  std::vector<float> g{0.0f, 0.0f, 0.0f};
  AdamState<float> st;
  adam_step<float>(p, g, st, 0.1f, 0.9f, 0.999f, 1e-8f);
  CHECK(p[0] == 1.0f);
  CHECK(p[1] == -2.0f);
  CHECK(p[2] == 3.0f);
  CHECK(st.t == 1);
}

TEST_CASE("adam: first step is approximately -lr with unit gradient") {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState<double> st;
  adam_step<double>(p, g, st, 0.1, 0.9, 0.999, 1e-8);
  // bias correction makes mhat/sqrt(vhat) == 1 on step one
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam: identical tensors update identically") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> p1(32), g(32);
  for (auto& v : p1) v = d(rng);
  for (auto& v : g) v = d(rng);
  std::vector<float> p2 = p1;
  AdamState<float> s1, s2;
  for (int i = 0; i < 5; ++i) {
    adam_step<float>(p1, g, s1, 0.01f, 0.9f, 0.999f, 1e-8f);
    adam_step<float>(p2, g, s2, 0.01f, 0.9f, 0.999f, 1e-8f);
  }
  CHECK(p1 == p2);
}

TEST_CASE("adam rejects non-finite gradients with an index") {
  std::vector<float> p{0.0f, 0.0f};
  std::vector<float> g{1.0f, std::numeric_limits<float>::infinity()};
  AdamState<float> st;
  CHECK_THROWS_WITH_AS(adam_step<float>(p, g, st, 0.1f, 0.9f, 0.999f, 1e-8f),
                       doctest::Contains("index 1"), numeric_error);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "lightseg_ckpt_test.bin";
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<float> d(-100.0f, 100.0f);

  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::vector<float> v1(24), v2(7);
  for (auto& v : v1) v = d(rng);
  for (auto& v : v2) v = d(rng);
  v2[0] = -0.0f;
  v2[1] = 1e-38f;
  tensors.emplace_back("stage1.unit0.conv1.weight", Tensor<float>({2, 3, 2, 2}, v1));
  tensors.emplace_back("head.bias", Tensor<float>({1, 7, 1, 1}, v2));
  save_tensors(path, tensors);

  const auto loaded = load_tensors(path);
  REQUIRE(loaded.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(loaded[i].first == tensors[i].first);
    REQUIRE(loaded[i].second.shape() == tensors[i].second.shape());
    const auto a = loaded[i].second.data();
    const auto b = tensors[i].second.data();
    for (std::int64_t j = 0; j < loaded[i].second.numel(); ++j) {
      // compare representations, not values: -0.0f must survive
      CHECK(std::memcmp(&a[j], &b[j], sizeof(float)) == 0);
    }
  }
  fs::remove(path);
}

TEST_CASE("checkpoint loader rejects garbage") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "lightseg_ckpt_bad.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS(load_tensors(path), data_error);
  fs::remove(path);
}
