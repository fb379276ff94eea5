#include "lightseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "lightseg/image.hpp"

namespace lightseg {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64
  std::uint64_t z = seed + (index + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

// Bilinearly interpolated lattice noise in [0,1], two octaves.
std::vector<float> value_noise(int h, int w, int cell, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  std::vector<float> out(static_cast<std::size_t>(h) * w, 0.0f);
  float amp = 1.0f, total = 0.0f;
  int c = cell;
  for (int octave = 0; octave < 2; ++octave) {
    const int gh = h / c + 2;
    const int gw = w / c + 2;
    std::vector<float> grid(static_cast<std::size_t>(gh) * gw);
    for (auto& g : grid) g = uni(rng);
    for (int i = 0; i < h; ++i) {
      const float fy = static_cast<float>(i) / c;
      const int y0 = static_cast<int>(fy);
      const float ty = fy - y0;
      for (int j = 0; j < w; ++j) {
        const float fx = static_cast<float>(j) / c;
        const int x0 = static_cast<int>(fx);
        const float tx = fx - x0;
        const float a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
        const float cc = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
        const float top = a + tx * (b - a);
        const float bot = cc + tx * (d - cc);
        out[static_cast<std::size_t>(i) * w + j] += amp * (top + ty * (bot - top));
      }
    }
    total += amp;
    amp *= 0.5f;
    c = std::max(2, c / 2);
  }
  for (auto& v : out) v /= total;
  return out;
}

// Monotone per-image transform onto an exactly uniform marginal.
std::vector<float> rank_normalize(const std::vector<float>& field) {
  const std::size_t n = field.size();
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return field[a] < field[b];
  });
  std::vector<float> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    out[order[r]] = static_cast<float>(r) / static_cast<float>(n - 1);
  }
  return out;
}

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

}  // namespace

// ---------------------------------------------------------------------------
// blobs

namespace {

struct Capsule {
  float x0, y0, x1, y1, radius;

  float axis_t(float x, float y) const {
    const float dx = x1 - x0, dy = y1 - y0;
    const float len2 = dx * dx + dy * dy;
    return ((x - x0) * dx + (y - y0) * dy) / len2;
  }
  float dist(float x, float y) const {
    const float t = std::clamp(axis_t(x, y), 0.0f, 1.0f);
    const float px = x0 + t * (x1 - x0), py = y0 + t * (y1 - y0);
    return std::hypot(x - px, y - py);
  }
};

SegSample make_blob_sample(const GenConfig& cfg, std::uint64_t sample_seed,
                           const std::string& id) {
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  const int h = cfg.height, w = cfg.width;
  const float scale = std::min(h, w) / 96.0f;

  // background: muted base color + lattice noise per channel
  std::vector<float> image(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c) {
    const float base = 0.15f + 0.30f * uni(rng);
    auto noise = value_noise(h, w, 12, rng);
    for (int p = 0; p < h * w; ++p) {
      image[static_cast<std::size_t>(c) * h * w + p] =
          clamp01(base + cfg.background_noise * (noise[p] * 2.0f - 1.0f));
    }
  }

  // capsule placed fully inside the frame
  Capsule cap{};
  for (int attempt = 0;; ++attempt) {
    const float radius =
        (cfg.min_capsule_radius +
         (cfg.max_capsule_radius - cfg.min_capsule_radius) * uni(rng)) *
        scale;
    const float half_len = (0.30f + 0.12f * uni(rng)) * std::min(h, w) *
                           std::max(0.5f, 1.0f - 0.05f * attempt);
    const float cx = w * (0.35f + 0.30f * uni(rng));
    const float cy = h * (0.35f + 0.30f * uni(rng));
    const float angle = 2.0f * 3.14159265f * uni(rng);
    const float dx = std::cos(angle) * half_len, dy = std::sin(angle) * half_len;
    cap = {cx - dx, cy - dy, cx + dx, cy + dy, radius};
    const float margin = radius + 2.0f;
    const auto inside = [&](float x, float y) {
      return x >= margin && x <= w - 1 - margin && y >= margin && y <= h - 1 - margin;
    };
    if (inside(cap.x0, cap.y0) && inside(cap.x1, cap.y1)) break;
    if (attempt > 64) throw std::invalid_argument("gen_blobs: image too small for capsule");
  }

  // instrument color well separated from the background range
  float icolor[3];
  for (auto& c : icolor) c = 0.60f + 0.35f * uni(rng);
  auto itex = value_noise(h, w, 8, rng);

  IntMask mask;
  mask.n = 1;
  mask.h = h;
  mask.w = w;
  mask.values.assign(static_cast<std::size_t>(h) * w, 0);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const float x = static_cast<float>(j), y = static_cast<float>(i);
      if (cap.dist(x, y) > cap.radius) continue;
      const std::size_t p = static_cast<std::size_t>(i) * w + j;
      for (int c = 0; c < 3; ++c) {
        image[static_cast<std::size_t>(c) * h * w + p] =
            clamp01(icolor[c] + cfg.instrument_noise * (itex[p] * 2.0f - 1.0f));
      }
      if (cfg.num_classes == 2) {
        mask.values[p] = 1;
      } else {
        const float t = std::clamp(cap.axis_t(x, y), 0.0f, 0.999f);
        mask.values[p] = 1 + static_cast<int>(t * 3.0f);
      }
    }
  }

  SegSample s;
  s.image = Tensor<float>({1, 3, h, w}, std::move(image));
  s.mask = std::move(mask);
  s.id = id;
  return s;
}

bool all_classes_present(const IntMask& mask, int classes) {
  std::vector<bool> seen(classes, false);
  for (const auto v : mask.values) seen[v] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

}  // namespace

Dataset gen_blobs(const GenConfig& cfg) {
  if (cfg.num_classes != 2 && cfg.num_classes != 4) {
    throw std::invalid_argument("gen_blobs: num_classes must be 2 or 4, got " +
                                std::to_string(cfg.num_classes));
  }
  if (cfg.count < 1 || cfg.height < 32 || cfg.width < 32) {
    throw std::invalid_argument("gen_blobs: bad count or image extent");
  }
  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.task = "blobs";
  ds.seed = cfg.seed;
  ds.height = cfg.height;
  ds.width = cfg.width;
  for (int i = 0; i < cfg.count; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "%04d", i);
    // resample with a derived sub-seed until every class shows up
    for (std::uint64_t sub = 0;; ++sub) {
      SegSample s = make_blob_sample(cfg, derive_seed(cfg.seed, i * 131ULL + sub), id);
      if (all_classes_present(s.mask, cfg.num_classes)) {
        ds.samples.push_back(std::move(s));
        break;
      }
      if (sub > 16) throw std::invalid_argument("gen_blobs: cannot place all classes");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// planted dilation task

int planted_gap_px(const GenConfig& cfg) { return cfg.planted_offset * 8; }

namespace {

// Per-axis evidence in [0,1): compares the rank-uniform field at +/-gap along
// one axis and maps the result back to a uniform variate, so thresholds stay
// exactly balanced whatever is in range. Returns -1 for a fully dead axis.
float planted_axis_score(const std::vector<float>& field, int height, int width,
                         int gap, int i, int j, bool vertical) {
  const int lo = vertical ? i - gap : j - gap;
  const int hi = vertical ? i + gap : j + gap;
  const int extent = vertical ? height : width;
  const bool lo_live = lo >= 0;
  const bool hi_live = hi < extent;
  const auto at = [&](int k) {
    return vertical ? field[static_cast<std::size_t>(k) * width + j]
                    : field[static_cast<std::size_t>(i) * width + k];
  };
  if (lo_live && hi_live) {
    const float d = std::abs(at(lo) - at(hi));
    return 1.0f - (1.0f - d) * (1.0f - d);  // |U1-U2| -> uniform
  }
  if (lo_live || hi_live) {
    return 2.0f * std::abs(at(lo_live ? lo : hi) - 0.5f);  // |U-1/2| -> uniform
  }
  return -1.0f;
}

}  // namespace

int planted_label(const std::vector<float>& field, int height, int width, int gap,
                  int i, int j) {
  const float qh = planted_axis_score(field, height, width, gap, i, j, false);
  const float qv = planted_axis_score(field, height, width, gap, i, j, true);
  const int live_axes = (qh >= 0.0f) + (qv >= 0.0f);
  if (live_axes == 0) return 0;
  // max of k uniforms exceeds 0.5^(1/k) with probability 1/2
  const float threshold = live_axes == 2 ? 0.70710678f : 0.5f;
  return std::max(qh, qv) > threshold ? 1 : 0;
}

Dataset gen_planted_dilation(const GenConfig& cfg) {
  const bool valid_offset = cfg.planted_offset == 1 || cfg.planted_offset == 2 ||
                            cfg.planted_offset == 4 || cfg.planted_offset == 8 ||
                            cfg.planted_offset == 16;
  if (!valid_offset) {
    throw std::invalid_argument("gen_planted_dilation: planted_offset must be in "
                                "{1,2,4,8,16}, got " +
                                std::to_string(cfg.planted_offset));
  }
  const int gap = planted_gap_px(cfg);
  if (gap >= cfg.width) {
    throw std::invalid_argument("gen_planted_dilation: offset gap " +
                                std::to_string(gap) + "px exceeds image width " +
                                std::to_string(cfg.width));
  }
  if (cfg.num_classes != 2) {
    throw std::invalid_argument("gen_planted_dilation: task is binary (C=2)");
  }
  Dataset ds;
  ds.num_classes = 2;
  ds.task = "planted_dilation";
  ds.seed = cfg.seed;
  ds.height = cfg.height;
  ds.width = cfg.width;
  const int h = cfg.height, w = cfg.width;
  for (int idx = 0; idx < cfg.count; ++idx) {
    std::mt19937_64 rng(derive_seed(cfg.seed, idx));
    const int cell = std::max(2, cfg.noise_cell);
    auto v = rank_normalize(value_noise(h, w, cell, rng));
    auto n1 = value_noise(h, w, cell, rng);
    auto n2 = value_noise(h, w, cell, rng);

    std::vector<float> image(static_cast<std::size_t>(3) * h * w);
    std::copy(v.begin(), v.end(), image.begin());
    std::copy(n1.begin(), n1.end(), image.begin() + static_cast<std::size_t>(h) * w);
    std::copy(n2.begin(), n2.end(),
              image.begin() + static_cast<std::size_t>(2) * h * w);

    IntMask mask;
    mask.n = 1;
    mask.h = h;
    mask.w = w;
    mask.values.resize(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        mask.values[static_cast<std::size_t>(i) * w + j] =
            planted_label(v, h, w, gap, i, j);
      }
    }
    char id[32];
    std::snprintf(id, sizeof(id), "%04d", idx);
    SegSample s;
    s.image = Tensor<float>({1, 3, h, w}, std::move(image));
    s.mask = std::move(mask);
    s.id = id;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// on-disk layout

void save_dataset(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : ds.samples) {
    const auto& sh = s.image.shape();
    ImageU8 img;
    img.height = static_cast<int>(sh.h);
    img.width = static_cast<int>(sh.w);
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(sh.h) * sh.w * 3);
    const auto data = s.image.data();
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          const float v = data[(static_cast<std::size_t>(c) * sh.h + y) * sh.w + x];
          img.pixels[(static_cast<std::size_t>(y) * sh.w + x) * 3 + c] =
              static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0f));
        }
      }
    }
    write_png(root / "images" / (s.id + ".png"), img);

    ImageU8 m;
    m.height = static_cast<int>(s.mask.h);
    m.width = static_cast<int>(s.mask.w);
    m.channels = 1;
    m.pixels.resize(s.mask.values.size());
    for (std::size_t i = 0; i < s.mask.values.size(); ++i) {
      m.pixels[i] = static_cast<std::uint8_t>(s.mask.values[i]);
    }
    write_png(root / "masks" / (s.id + ".png"), m);
  }
  nlohmann::json manifest = {{"classes", ds.num_classes},
                             {"count", ds.samples.size()},
                             {"task", ds.task},
                             {"seed", ds.seed},
                             {"height", ds.height},
                             {"width", ds.width}};
  std::ofstream out(root / "dataset.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw data_error("failed writing manifest to " + root.string());
}

Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = root / "dataset.json";
  if (!fs::exists(manifest_path)) {
    throw data_error("missing dataset manifest: " + manifest_path.string());
  }
  nlohmann::json manifest;
  {
    std::ifstream in(manifest_path);
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw data_error("bad dataset manifest: " + std::string(e.what()));
    }
  }
  Dataset ds;
  ds.num_classes = manifest.at("classes");
  ds.task = manifest.value("task", std::string("unknown"));
  ds.seed = manifest.value("seed", std::uint64_t{0});

  std::vector<fs::path> image_files;
  for (const auto& entry : fs::directory_iterator(root / "images")) {
    if (entry.path().extension() == ".png") image_files.push_back(entry.path());
  }
  std::sort(image_files.begin(), image_files.end());
  if (image_files.empty()) {
    throw data_error("no images found under " + (root / "images").string());
  }

  for (const auto& img_path : image_files) {
    const fs::path mask_path = root / "masks" / img_path.filename();
    if (!fs::exists(mask_path)) {
      throw data_error("missing mask file: " + mask_path.string());
    }
    ImageU8 img = read_png(img_path);
    ImageU8 msk = read_png(mask_path);
    if (img.channels != 3) {
      throw data_error("expected RGB image: " + img_path.string());
    }
    if (msk.channels != 1) {
      throw data_error("expected single-channel mask: " + mask_path.string());
    }
    if (img.height != msk.height || img.width != msk.width) {
      throw data_error("image/mask size mismatch for " + img_path.string());
    }
    SegSample s;
    std::vector<float> data(static_cast<std::size_t>(3) * img.height * img.width);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          data[(static_cast<std::size_t>(c) * img.height + y) * img.width + x] =
              img.at(y, x, c) / 255.0f;
        }
      }
    }
    s.image = Tensor<float>({1, 3, img.height, img.width}, std::move(data));
    s.mask.n = 1;
    s.mask.h = img.height;
    s.mask.w = img.width;
    s.mask.values.resize(static_cast<std::size_t>(img.height) * img.width);
    for (std::size_t i = 0; i < s.mask.values.size(); ++i) {
      const int v = msk.pixels[i];
      if (v >= ds.num_classes) {
        throw data_error("mask value " + std::to_string(v) + " >= C=" +
                         std::to_string(ds.num_classes) + " in " + mask_path.string());
      }
      s.mask.values[i] = v;
    }
    s.id = img_path.stem().string();
    ds.samples.push_back(std::move(s));
  }
  ds.height = static_cast<int>(ds.samples.front().image.shape().h);
  ds.width = static_cast<int>(ds.samples.front().image.shape().w);
  return ds;
}

}  // namespace lightseg
