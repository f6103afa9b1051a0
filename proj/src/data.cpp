#include "mslae/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "mslae/error.hpp"
#include "mslae/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mslae {

namespace {

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

std::string path_string(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  if (!j.at(key).is_string()) throw ConfigError(where + ": '" + key + "' must be a string");
  return j.at(key).get<std::string>();
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

// Keyed on (seed, epoch, index) so a draw never depends on call order.
class DrawRng {
 public:
  DrawRng(uint64_t seed, uint64_t epoch, uint64_t index) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                      static_cast<uint32_t>(epoch >> 32), static_cast<uint32_t>(index),
                      static_cast<uint32_t>(index >> 32)};
    engine_.seed(seq);
  }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  int64_t integer(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(engine_() % span);
  }

 private:
  std::mt19937_64 engine_;
};

Tensor map_pixels(const Tensor& x, auto&& source) {
  const Shape& s = x.shape();
  auto in = x.data();
  std::vector<float> out(static_cast<size_t>(s.numel()), 0.0f);
  for (int64_t nc = 0; nc < s.n * s.c; ++nc)
    for (int64_t y = 0; y < s.h; ++y)
      for (int64_t xx = 0; xx < s.w; ++xx) {
        int64_t sy = 0, sx = 0;
        if (!source(y, xx, sy, sx)) continue;
        out[static_cast<size_t>((nc * s.h + y) * s.w + xx)] = in[static_cast<size_t>((nc * s.h + sy) * s.w + sx)];
      }
  return Tensor::from_data(s, std::move(out));
}

void check_same_size(const Tensor& a, const Tensor& b, const std::string& what_a, const std::string& what_b) {
  if (a.shape().h != b.shape().h || a.shape().w != b.shape().w) {
    std::ostringstream os;
    os << what_a << " is " << a.shape().w << "x" << a.shape().h << " but " << what_b << " is " << b.shape().w << "x"
       << b.shape().h << " (WxH)";
    throw ConfigError(os.str());
  }
}

}  // namespace

const char* to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw ConfigError("unknown split '" + text + "' (expected train or test)");
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  const std::string where = "manifest " + path.string();
  require_keys(j, {"name", "split", "entries"}, where);
  DatasetManifest m;
  m.base_dir = path.parent_path();
  m.name = j.value("name", path.stem().string());
  m.split = parse_split(j.value("split", std::string("train")));
  if (!j.contains("entries") || !j.at("entries").is_array()) throw ConfigError(where + ": 'entries' must be a list");
  size_t i = 0;
  for (const json& e : j.at("entries")) {
    const std::string ew = where + " entry " + std::to_string(i++);
    require_keys(e, {"image", "mask", "fov"}, ew);
    ManifestEntry entry{path_string(e, "image", ew), path_string(e, "mask", ew), std::nullopt};
    if (e.contains("fov") && !e.at("fov").is_null()) entry.fov = path_string(e, "fov", ew);
    m.entries.push_back(std::move(entry));
  }
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  json entries = json::array();
  for (const ManifestEntry& e : m.entries) {
    json je{{"image", e.image.generic_string()}, {"mask", e.mask.generic_string()}};
    if (e.fov) je["fov"] = e.fov->generic_string();
    entries.push_back(std::move(je));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << json{{"name", m.name}, {"split", to_string(m.split)}, {"entries", entries}}.dump(2) << "\n";
}

Tensor binarize_mask(const Tensor& gray) {
  std::vector<float> v(gray.data().begin(), gray.data().end());
  for (float& x : v) x = x >= 0.5f ? 1.0f : 0.0f;
  return Tensor::from_data(gray.shape(), std::move(v));
}

Sample load_sample(const ManifestEntry& entry, const fs::path& base_dir) {
  const fs::path image_path = resolve(base_dir, entry.image);
  const fs::path mask_path = resolve(base_dir, entry.mask);
  Sample s;
  s.id = entry.image.stem().string();
  s.image = read_image(image_path, 3);
  s.mask = binarize_mask(read_image(mask_path, 1));
  check_same_size(s.image, s.mask, "image " + image_path.string(), "mask " + mask_path.string());
  if (entry.fov) {
    const fs::path fov_path = resolve(base_dir, *entry.fov);
    s.fov = binarize_mask(read_image(fov_path, 1));
    check_same_size(s.image, *s.fov, "image " + image_path.string(), "fov " + fov_path.string());
  }
  return s;
}

std::vector<Sample> load_dataset(const DatasetManifest& manifest) {
  std::vector<Sample> samples;
  std::vector<std::string> failures;
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    try {
      samples.push_back(load_sample(manifest.entries[i], manifest.base_dir));
    } catch (const Error& e) {
      failures.push_back("entry " + std::to_string(i) + ": " + e.what());
    }
  }
  if (!failures.empty()) {
    std::string msg = "dataset '" + manifest.name + "' has " + std::to_string(failures.size()) + " bad entries:";
    for (const std::string& f : failures) msg += "\n  " + f;
    throw IoError(msg);
  }
  return samples;
}

void AugmentationConfig::validate() const {
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("augment: hflip_prob must be in [0, 1]");
  if (!(vflip_prob >= 0.0 && vflip_prob <= 1.0)) throw ConfigError("augment: vflip_prob must be in [0, 1]");
  if (!(shift_frac >= 0.0 && shift_frac < 0.5)) throw ConfigError("augment: shift_frac must be in [0, 0.5)");
}

AugmentDraw draw_augmentation(const AugmentationConfig& cfg, Hw size, uint64_t epoch, uint64_t index) {
  cfg.validate();
  DrawRng rng(cfg.seed, epoch, index);
  AugmentDraw d;
  d.hflip = rng.uniform() < cfg.hflip_prob;
  d.vflip = rng.uniform() < cfg.vflip_prob;
  const auto max_dy = static_cast<int64_t>(std::floor(cfg.shift_frac * static_cast<double>(size.h)));
  const auto max_dx = static_cast<int64_t>(std::floor(cfg.shift_frac * static_cast<double>(size.w)));
  d.dy = rng.integer(-max_dy, max_dy);
  d.dx = rng.integer(-max_dx, max_dx);
  return d;
}

Tensor hflip(const Tensor& x) {
  const int64_t w = x.shape().w;
  return map_pixels(x, [w](int64_t y, int64_t xx, int64_t& sy, int64_t& sx) {
    sy = y;
    sx = w - 1 - xx;
    return true;
  });
}

Tensor vflip(const Tensor& x) {
  const int64_t h = x.shape().h;
  return map_pixels(x, [h](int64_t y, int64_t xx, int64_t& sy, int64_t& sx) {
    sy = h - 1 - y;
    sx = xx;
    return true;
  });
}

Tensor shift(const Tensor& x, int64_t dy, int64_t dx) {
  const int64_t h = x.shape().h, w = x.shape().w;
  return map_pixels(x, [=](int64_t y, int64_t xx, int64_t& sy, int64_t& sx) {
    sy = y - dy;
    sx = xx - dx;
    return sy >= 0 && sy < h && sx >= 0 && sx < w;
  });
}

Sample augment(const Sample& sample, const AugmentDraw& draw) {
  auto apply = [&](const Tensor& t) {
    Tensor r = t;
    if (draw.hflip) r = hflip(r);
    if (draw.vflip) r = vflip(r);
    if (draw.dy != 0 || draw.dx != 0) r = shift(r, draw.dy, draw.dx);
    return r;
  };
  Sample out;
  out.id = sample.id;
  out.image = apply(sample.image);
  out.mask = apply(sample.mask);
  if (sample.fov) out.fov = apply(*sample.fov);
  return out;
}

std::vector<PatchRect> patch_grid(Hw image, Hw patch, Hw stride) {
  if (patch.h <= 0 || patch.w <= 0 || stride.h <= 0 || stride.w <= 0)
    throw ConfigError("patch size and stride must be positive");
  if (patch.h > image.h || patch.w > image.w) {
    std::ostringstream os;
    os << "patch " << patch.h << "x" << patch.w << " is larger than image " << image.h << "x" << image.w;
    throw ConfigError(os.str());
  }
  auto starts = [](int64_t extent, int64_t p, int64_t s) {
    std::vector<int64_t> v;
    for (int64_t o = 0; o + p <= extent; o += s) v.push_back(o);
    if (v.back() + p < extent) v.push_back(extent - p);
    return v;
  };
  std::vector<PatchRect> rects;
  for (int64_t y : starts(image.h, patch.h, stride.h))
    for (int64_t x : starts(image.w, patch.w, stride.w)) rects.push_back({y, x, patch.h, patch.w});
  return rects;
}

Tensor crop_patch(const Tensor& x, const PatchRect& r) {
  const Shape& s = x.shape();
  if (r.y < 0 || r.x < 0 || r.y + r.h > s.h || r.x + r.w > s.w) throw ConfigError("patch outside the image");
  auto in = x.data();
  std::vector<float> out(static_cast<size_t>(s.n * s.c * r.h * r.w));
  size_t k = 0;
  for (int64_t nc = 0; nc < s.n * s.c; ++nc)
    for (int64_t y = 0; y < r.h; ++y) {
      const float* row = in.data() + (nc * s.h + r.y + y) * s.w + r.x;
      std::copy(row, row + r.w, out.begin() + static_cast<std::ptrdiff_t>(k));
      k += static_cast<size_t>(r.w);
    }
  return Tensor::from_data(Shape{s.n, s.c, r.h, r.w}, std::move(out));
}

std::vector<SamplePatch> extract_patches(const Sample& sample, Hw patch, Hw stride) {
  std::vector<SamplePatch> out;
  for (const PatchRect& r : patch_grid(sample.size(), patch, stride)) {
    Sample p;
    p.id = sample.id + "@" + std::to_string(r.y) + "," + std::to_string(r.x);
    p.image = crop_patch(sample.image, r);
    p.mask = crop_patch(sample.mask, r);
    if (sample.fov) p.fov = crop_patch(*sample.fov, r);
    out.push_back({r, std::move(p)});
  }
  return out;
}

Tensor stitch(const std::vector<TensorPatch>& patches, Hw full) {
  if (patches.empty()) throw ConfigError("stitch: no patches");
  const int64_t n = patches[0].value.shape().n, c = patches[0].value.shape().c;
  std::vector<double> sum(static_cast<size_t>(n * c * full.h * full.w), 0.0);
  std::vector<int> count(static_cast<size_t>(full.h * full.w), 0);
  for (const TensorPatch& p : patches) {
    const Shape& s = p.value.shape();
    if (s.n != n || s.c != c || s.h != p.rect.h || s.w != p.rect.w) throw ConfigError("stitch: patch shape mismatch");
    if (p.rect.y < 0 || p.rect.x < 0 || p.rect.y + p.rect.h > full.h || p.rect.x + p.rect.w > full.w)
      throw ConfigError("stitch: patch outside the target");
    auto v = p.value.data();
    for (int64_t nc = 0; nc < n * c; ++nc)
      for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x)
          sum[static_cast<size_t>((nc * full.h + p.rect.y + y) * full.w + p.rect.x + x)] +=
              v[static_cast<size_t>((nc * s.h + y) * s.w + x)];
    for (int64_t y = 0; y < s.h; ++y)
      for (int64_t x = 0; x < s.w; ++x) ++count[static_cast<size_t>((p.rect.y + y) * full.w + p.rect.x + x)];
  }
  std::vector<float> out(sum.size());
  const size_t plane = static_cast<size_t>(full.h * full.w);
  for (size_t i = 0; i < out.size(); ++i) {
    const int k = count[i % plane];
    if (k == 0) throw ConfigError("stitch: patches leave pixels uncovered");
    out[i] = static_cast<float>(sum[i] / k);
  }
  return Tensor::from_data(Shape{n, c, full.h, full.w}, std::move(out));
}

const char* to_string(NormalizeMode mode) {
  return mode == NormalizeMode::none ? "none" : "per_image_standardize";
}

NormalizeMode parse_normalize_mode(const std::string& text) {
  if (text == "none") return NormalizeMode::none;
  if (text == "per_image_standardize") return NormalizeMode::per_image_standardize;
  throw ConfigError("unknown normalize mode '" + text + "' (expected per_image_standardize or none)");
}

Sample normalize(const Sample& sample, NormalizeMode mode, std::vector<std::string>* warnings) {
  if (mode == NormalizeMode::none) return sample;
  const Shape& s = sample.image.shape();
  const int64_t plane = s.plane();
  std::vector<float> v(sample.image.data().begin(), sample.image.data().end());
  const float* fov = sample.fov ? sample.fov->data().data() : nullptr;
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    float* ch = v.data() + nc * plane;
    double sum = 0.0, sq = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < plane; ++i) {
      if (fov && fov[i] == 0.0f) continue;
      sum += ch[i];
      ++count;
    }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    for (int64_t i = 0; i < plane; ++i) {
      if (fov && fov[i] == 0.0f) continue;
      sq += (ch[i] - mean) * (ch[i] - mean);
    }
    const double var = count ? sq / static_cast<double>(count) : 0.0;
    if (!(var > 0.0)) {
      if (warnings)
        warnings->push_back("sample '" + sample.id + "': channel " + std::to_string(nc % s.c) +
                            " has zero variance, left unchanged");
      continue;
    }
    const double inv = 1.0 / std::sqrt(var);
    for (int64_t i = 0; i < plane; ++i) ch[i] = static_cast<float>((ch[i] - mean) * inv);
  }
  Sample out = sample;
  out.image = Tensor::from_data(s, std::move(v));
  return out;
}

Sample synthetic_vessel_sample(Hw size, uint64_t seed, const std::string& id) {
  if (size.h < 8 || size.w < 8) throw ConfigError("synthetic sample must be at least 8x8");
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53); };
  const int64_t h = size.h, w = size.w, plane = h * w;
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double fov_r = 0.48 * static_cast<double>(std::min(h, w));
  const double scale = static_cast<double>(std::min(h, w)) / 64.0;

  // Signed distance field to the nearest vessel centerline, minus its radius.
  std::vector<double> depth(static_cast<size_t>(plane), 1e9);
  auto draw_segment = [&](double y0, double x0, double y1, double x1, double radius) {
    const int64_t ylo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(y0, y1) - radius - 2)));
    const int64_t yhi = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(std::max(y0, y1) + radius + 2)));
    const int64_t xlo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(x0, x1) - radius - 2)));
    const int64_t xhi = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(std::max(x0, x1) + radius + 2)));
    const double dy = y1 - y0, dx = x1 - x0, len2 = dy * dy + dx * dx;
    for (int64_t y = ylo; y <= yhi; ++y)
      for (int64_t x = xlo; x <= xhi; ++x) {
        double t = len2 > 0 ? ((y - y0) * dy + (x - x0) * dx) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double ey = y - (y0 + t * dy), ex = x - (x0 + t * dx);
        double& d = depth[static_cast<size_t>(y * w + x)];
        d = std::min(d, std::sqrt(ey * ey + ex * ex) - radius);
      }
  };

  // Vessels grow outward from an off-centre disc, bending and thinning.
  const double disc_y = cy + uni(-0.1, 0.1) * h, disc_x = cx + uni(-0.25, 0.25) * w;
  const int trunks = 5 + static_cast<int>(rng() % 3);
  for (int v = 0; v < trunks; ++v) {
    double y = disc_y, x = disc_x;
    double angle = uni(0.0, 2.0 * M_PI);
    double radius = uni(1.3, 2.2) * scale;
    const double step = 1.5 * scale;
    while (radius > 0.45 * scale) {
      angle += uni(-0.25, 0.25);
      const double ny = y + step * std::sin(angle), nx = x + step * std::cos(angle);
      draw_segment(y, x, ny, nx, radius);
      y = ny;
      x = nx;
      radius *= 0.985;
      if (std::hypot(y - cy, x - cx) > fov_r + 2) break;
    }
  }

  std::vector<float> img(static_cast<size_t>(3 * plane)), mask(static_cast<size_t>(plane)), fov(static_cast<size_t>(plane));
  std::normal_distribution<double> noise(0.0, 0.015);
  const double base[3] = {0.78, 0.40, 0.18};
  const double tilt_y = uni(-0.15, 0.15), tilt_x = uni(-0.15, 0.15);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y * w + x);
      const double r = std::hypot(y - cy, x - cx) / fov_r;
      const bool inside = r <= 1.0;
      fov[i] = inside ? 1.0f : 0.0f;
      const bool vessel = inside && depth[i] <= 0.0;
      mask[i] = vessel ? 1.0f : 0.0f;
      // Soft-edged darkening: full contrast inside, fading over one pixel.
      const double core = std::clamp(0.5 - depth[i], 0.0, 1.0);
      const double illum = (1.0 - 0.35 * r * r) * (1.0 + tilt_y * (y - cy) / h + tilt_x * (x - cx) / w);
      for (int c = 0; c < 3; ++c) {
        double v = 0.0;
        if (inside) {
          const double contrast = c == 1 ? 0.45 : c == 0 ? 0.25 : 0.35;
          v = base[c] * illum * (1.0 - contrast * core) + noise(rng);
        }
        img[static_cast<size_t>(c) * static_cast<size_t>(plane) + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  Sample s;
  s.id = id;
  s.image = Tensor::from_data(Shape{1, 3, h, w}, std::move(img));
  s.mask = Tensor::from_data(Shape{1, 1, h, w}, std::move(mask));
  s.fov = Tensor::from_data(Shape{1, 1, h, w}, std::move(fov));
  return s;
}

}  // namespace mslae
