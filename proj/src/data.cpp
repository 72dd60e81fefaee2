#include "dseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>

#include "dseg/errors.hpp"
#include "dseg/kernels.hpp"

namespace fs = std::filesystem;

namespace dseg {

const std::array<const char*, ClassMap::kNumClasses>& ClassMap::tokens() {
  static const std::array<const char*, kNumClasses> t = {
      "background", "road",    "lanemark", "curb",       "person",
      "rider",      "vehicles", "bicycle",  "motorcycle", "traffic_sign"};
  return t;
}

const std::array<const char*, ClassMap::kNumClasses>& ClassMap::display_names() {
  static const std::array<const char*, kNumClasses> t = {
      "Background", "Road",    "Lanemark", "Curb",       "Person",
      "Rider",      "Vehicles", "Bicycle",  "Motorcycle", "Traffic Sign"};
  return t;
}

int ClassMap::id_of(const std::string& token) {
  const auto& t = tokens();
  for (int i = 0; i < kNumClasses; ++i)
    if (token == t[size_t(i)]) return i;
  throw ConfigError("unknown class token: " + token);
}

FisheyeCameraModel default_camera(int size, double max_theta) {
  check_config(size > 1 && max_theta > 0, "invalid camera geometry");
  FisheyeCameraModel cam;
  cam.max_theta = max_theta;
  cam.focal = (double(size) / 2.0) / max_theta;
  cam.cy = cam.cx = (double(size) - 1.0) / 2.0;
  return cam;
}

namespace {

constexpr std::array<std::array<uint8_t, 3>, 10> kPalette = {{
    {95, 108, 72},    // background (ground)
    {72, 72, 78},     // road
    {230, 225, 160},  // lanemark
    {162, 152, 140},  // curb
    {200, 80, 70},    // person
    {220, 130, 60},   // rider
    {70, 110, 180},   // vehicles
    {120, 200, 120},  // bicycle
    {170, 90, 190},   // motorcycle
    {240, 200, 60},   // traffic_sign
}};
constexpr std::array<uint8_t, 3> kSky = {138, 158, 188};
constexpr std::array<uint8_t, 3> kVignette = {15, 15, 22};

// Paints class ids onto the flat (pre-warp) scene canvas.
struct Painter {
  int s;
  std::vector<uint8_t>& cls;

  void rect(double y0, double y1, double x0, double x1, uint8_t c) {
    int iy0 = std::max(0, int(std::floor(y0))), iy1 = std::min(s, int(std::ceil(y1)));
    int ix0 = std::max(0, int(std::floor(x0))), ix1 = std::min(s, int(std::ceil(x1)));
    for (int y = iy0; y < iy1; ++y)
      for (int x = ix0; x < ix1; ++x) cls[size_t(y) * s + x] = c;
  }

  void disc(double cy, double cx, double r, uint8_t c) {
    int iy0 = std::max(0, int(std::floor(cy - r))),
        iy1 = std::min(s, int(std::ceil(cy + r)) + 1);
    int ix0 = std::max(0, int(std::floor(cx - r))),
        ix1 = std::min(s, int(std::ceil(cx + r)) + 1);
    for (int y = iy0; y < iy1; ++y)
      for (int x = ix0; x < ix1; ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
          cls[size_t(y) * s + x] = c;
  }
};

// Flat street scene on a canvas of side s2: road trapezoid converging at a
// horizon, curb strips along its edges, a dashed center line, and sparse
// objects whose size shrinks toward the horizon. Traffic signs spawn the
// most rarely, keeping the class histogram imbalanced.
std::vector<uint8_t> render_flat_scene(int s2, Rng& rng) {
  std::vector<uint8_t> cls(size_t(s2) * s2, 0);
  Painter p{s2, cls};

  double horizon = rng.uniform(0.40, 0.50) * s2;
  double bl = rng.uniform(0.02, 0.10) * s2, br = rng.uniform(0.90, 0.98) * s2;
  double tl = rng.uniform(0.38, 0.46) * s2, tr = rng.uniform(0.54, 0.62) * s2;
  double curb_w = rng.uniform(0.015, 0.03) * s2;
  double dash_period = rng.uniform(0.06, 0.12) * s2;
  bool left_line = rng.bernoulli(0.5), right_line = rng.bernoulli(0.5);

  auto road_t = [&](double y) { return (y - horizon) / (double(s2) - horizon); };
  for (int y = int(std::ceil(horizon)); y < s2; ++y) {
    double t = road_t(y);
    double xl = tl + (bl - tl) * t, xr = tr + (br - tr) * t;
    double cw = curb_w * (0.2 + 0.8 * t);
    p.rect(y, y + 1, xl - cw, xr + cw, 3);
    p.rect(y, y + 1, xl, xr, 1);
  }
  // Dashed lane lines drawn over the road surface.
  for (int y = int(std::ceil(horizon)); y < s2; ++y) {
    double t = road_t(y);
    if (std::fmod(double(y) - horizon, dash_period) > 0.5 * dash_period) continue;
    double xl = tl + (bl - tl) * t, xr = tr + (br - tr) * t;
    double lw = std::max(0.8, 0.008 * s2 * (0.2 + 0.8 * t));
    double mid = 0.5 * (xl + xr);
    p.rect(y, y + 1, mid - lw, mid + lw, 2);
    if (left_line) {
      double lx = xl + 0.33 * (xr - xl);
      p.rect(y, y + 1, lx - lw, lx + lw, 2);
    }
    if (right_line) {
      double rx = xl + 0.67 * (xr - xl);
      p.rect(y, y + 1, rx - lw, rx + lw, 2);
    }
  }

  auto ground_point = [&](double* yb, double* scale) {
    *yb = rng.uniform(horizon / s2 + 0.08, 0.97) * s2;
    *scale = 0.35 + 0.65 * road_t(*yb);
  };

  int vehicles = int(rng.uniform_int(4));
  for (int i = 0; i < vehicles; ++i) {
    double yb, sc;
    ground_point(&yb, &sc);
    double xc = rng.uniform(0.10, 0.90) * s2;
    double bw = 0.14 * s2 * sc, bh = 0.07 * s2 * sc;
    p.rect(yb - bh, yb, xc - bw / 2, xc + bw / 2, 6);
    p.rect(yb - bh - 0.05 * s2 * sc, yb - bh, xc - bw / 4, xc + bw / 4, 6);
  }
  int persons = int(rng.uniform_int(3));
  for (int i = 0; i < persons; ++i) {
    double yb, sc;
    ground_point(&yb, &sc);
    double xc = rng.uniform(0.08, 0.92) * s2;
    double bh = 0.085 * s2 * sc, bw = 0.022 * s2 * sc;
    p.rect(yb - bh, yb, xc - bw, xc + bw, 4);
    p.disc(yb - bh - 0.016 * s2 * sc, xc, 0.016 * s2 * sc, 4);
  }
  if (rng.bernoulli(0.40)) {
    double yb, sc;
    ground_point(&yb, &sc);
    double xc = rng.uniform(0.10, 0.90) * s2;
    double wr = 0.018 * s2 * sc;
    p.disc(yb - wr, xc - 0.03 * s2 * sc, wr, 5);
    p.disc(yb - wr, xc + 0.03 * s2 * sc, wr, 5);
    p.rect(yb - 0.095 * s2 * sc, yb - 0.02 * s2 * sc, xc - 0.02 * s2 * sc,
           xc + 0.02 * s2 * sc, 5);
    p.disc(yb - 0.11 * s2 * sc, xc, 0.014 * s2 * sc, 5);
  }
  if (rng.bernoulli(0.35)) {
    double yb, sc;
    ground_point(&yb, &sc);
    double xc = rng.uniform(0.10, 0.90) * s2;
    double wr = 0.02 * s2 * sc, gap = 0.055 * s2 * sc;
    p.disc(yb - wr, xc - gap / 2, wr, 7);
    p.disc(yb - wr, xc + gap / 2, wr, 7);
    p.rect(yb - wr - 0.008 * s2 * sc, yb - wr + 0.008 * s2 * sc, xc - gap / 2,
           xc + gap / 2, 7);
  }
  if (rng.bernoulli(0.30)) {
    double yb, sc;
    ground_point(&yb, &sc);
    double xc = rng.uniform(0.10, 0.90) * s2;
    double wr = 0.022 * s2 * sc, gap = 0.05 * s2 * sc;
    p.disc(yb - wr, xc - gap / 2, wr, 8);
    p.disc(yb - wr, xc + gap / 2, wr, 8);
    p.rect(yb - wr - 0.022 * s2 * sc, yb - wr, xc - gap / 2, xc + gap / 2, 8);
  }
  if (rng.bernoulli(0.15)) {
    double yb = rng.uniform(0.50, 0.80) * s2;
    double xc = rng.uniform(0.05, 0.95) * s2;
    p.rect(yb - 0.07 * s2, yb, xc - 0.004 * s2, xc + 0.004 * s2, 9);
    p.disc(yb - 0.07 * s2 - 0.018 * s2, xc, 0.018 * s2, 9);
  }
  // Sky above the horizon stays class 0; it is colored differently below.
  return cls;
}

}  // namespace

std::vector<uint8_t> flat_scene_classes(uint64_t seed, int size) {
  int s2 = 2 * size;
  Rng rng(derive_seed(seed, 0x7363656e65));  // scene stream
  return render_flat_scene(s2, rng);
}

SegmentationSample generate_scene(const FisheyeCameraModel& cam, uint64_t seed,
                                  int size) {
  check_config(size >= 8, "scene size too small");
  int s2 = 2 * size;
  Rng rng(derive_seed(seed, 0x7363656e65));  // scene stream

  std::vector<uint8_t> cls = render_flat_scene(s2, rng);
  double horizon_for_color = 0;  // recover sky split from the class grid: first road row
  for (int y = 0; y < s2; ++y) {
    bool has_road = false;
    for (int x = 0; x < s2 && !has_road; ++x) has_road = cls[size_t(y) * s2 + x] != 0;
    if (has_road) {
      horizon_for_color = y;
      break;
    }
  }

  // Colorize with per-pixel noise; class 0 splits into sky/ground by height.
  std::vector<float> color(size_t(3) * s2 * s2);
  for (int y = 0; y < s2; ++y) {
    for (int x = 0; x < s2; ++x) {
      uint8_t c = cls[size_t(y) * s2 + x];
      const auto& base =
          (c == 0 && y < horizon_for_color) ? kSky : kPalette[size_t(c)];
      for (int ch = 0; ch < 3; ++ch) {
        double v = double(base[size_t(ch)]) + rng.uniform(-10.0, 10.0);
        color[(size_t(ch) * s2 + y) * s2 + x] =
            float(std::clamp(v, 0.0, 255.0));
      }
    }
  }

  // Fisheye warp. A destination ray at angle theta = r/f samples the flat
  // canvas at radius f_src*tan(theta): content near max_theta gets squeezed
  // into few destination pixels, mimicking real fisheye edge compression.
  double f_src = (double(s2) / 2.0 - 1.0) / std::tan(cam.max_theta);
  double src_c = (double(s2) - 1.0) / 2.0;

  SegmentationSample out;
  out.image = Tensor(Shape{3, size, size});
  out.mask = ClassMask(1, size, size);
  out.view = "SYN";
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double dy = double(y) - cam.cy, dx = double(x) - cam.cx;
      double r = std::hypot(dy, dx);
      double theta = r / cam.focal;
      size_t pix = size_t(y) * size + x;
      if (theta > cam.max_theta) {
        for (int ch = 0; ch < 3; ++ch)
          out.image.data[(size_t(ch) * size + y) * size + x] =
              float(kVignette[size_t(ch)]) / 255.0f;
        out.mask.v[pix] = 0;
        continue;
      }
      double sy = src_c, sx = src_c;
      if (r > 0) {
        double r_src = f_src * std::tan(theta);
        sy = src_c + (dy / r) * r_src;
        sx = src_c + (dx / r) * r_src;
      }
      for (int ch = 0; ch < 3; ++ch) {
        float v = bilinear_at(color.data() + size_t(ch) * s2 * s2, s2, s2,
                              float(sy), float(sx));
        out.image.data[(size_t(ch) * size + y) * size + x] =
            std::clamp(v, 0.0f, 255.0f) / 255.0f;
      }
      int ny = std::clamp(int(std::lround(sy)), 0, s2 - 1);
      int nx = std::clamp(int(std::lround(sx)), 0, s2 - 1);
      out.mask.v[pix] = cls[size_t(ny) * s2 + nx];
    }
  }
  return out;
}

std::vector<SegmentationSample> make_synthetic_set(int n, int size, uint64_t seed) {
  check_config(n > 0, "synthetic set size must be positive");
  FisheyeCameraModel cam = default_camera(size);
  std::vector<SegmentationSample> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    SegmentationSample s = generate_scene(cam, derive_seed(seed, 1000000 + uint64_t(i)), size);
    char stem[32];
    std::snprintf(stem, sizeof stem, "SYN_%05d", i);
    s.stem = stem;
    out.push_back(std::move(s));
  }
  return out;
}

void write_synthetic_dataset(const std::string& out_dir, int n, int size,
                             uint64_t seed) {
  fs::create_directories(fs::path(out_dir) / "rgb");
  fs::create_directories(fs::path(out_dir) / "mask");
  for (SegmentationSample& s : make_synthetic_set(n, size, seed)) {
    std::vector<uint8_t> rgb(size_t(3) * s.mask.h * s.mask.w);
    size_t plane = size_t(s.mask.h) * s.mask.w;
    for (size_t p = 0; p < plane; ++p)
      for (int ch = 0; ch < 3; ++ch)
        rgb[p * 3 + size_t(ch)] =
            uint8_t(std::lround(std::clamp(s.image.data[size_t(ch) * plane + p], 0.0f, 1.0f) * 255.0f));
    write_png_rgb((fs::path(out_dir) / "rgb" / (s.stem + ".png")).string(),
                  s.mask.h, s.mask.w, rgb.data());
    write_png_gray((fs::path(out_dir) / "mask" / (s.stem + ".png")).string(),
                   s.mask.h, s.mask.w, s.mask.v.data());
  }
}

DatasetSplits split_samples(std::vector<SegmentationSample> samples,
                            SplitRatios ratios, uint64_t seed) {
  check_config(ratios.train >= 0 && ratios.val >= 0 && ratios.test >= 0 &&
                   std::abs(ratios.train + ratios.val + ratios.test - 1.0) <= 1e-6,
               "split ratios must be non-negative and sum to 1");
  std::map<std::string, std::vector<size_t>> by_view;
  for (size_t i = 0; i < samples.size(); ++i) by_view[samples[i].view].push_back(i);

  Rng rng(derive_seed(seed, 0x73706c6974));  // split stream
  DatasetSplits out;
  for (auto& [view, idx] : by_view) {
    rng.shuffle(idx);
    size_t n = idx.size();
    size_t n_tr = size_t(std::llround(double(n) * ratios.train));
    size_t n_val = size_t(std::llround(double(n) * (ratios.train + ratios.val))) - n_tr;
    for (size_t k = 0; k < n; ++k) {
      auto& dst = k < n_tr ? out.train : (k < n_tr + n_val ? out.val : out.test);
      dst.push_back(std::move(samples[idx[k]]));
    }
  }
  return out;
}

DatasetSplits load_dataset(const std::string& root, SplitRatios ratios,
                           uint64_t seed, int target_size) {
  fs::path rgb_dir = fs::path(root) / "rgb";
  fs::path mask_dir = fs::path(root) / "mask";
  if (!fs::is_directory(rgb_dir) || !fs::is_directory(mask_dir))
    throw DatasetError("dataset root must contain rgb/ and mask/: " + root);

  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(rgb_dir))
    if (e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw DatasetError("no PNG images under " + rgb_dir.string());

  size_t mask_count = 0;
  for (const auto& e : fs::directory_iterator(mask_dir))
    if (e.path().extension() == ".png") ++mask_count;
  if (mask_count != stems.size())
    throw DatasetError("rgb/mask file counts differ (unpaired samples)");

  static const std::array<const char*, 5> kViews = {"FV", "MVR", "MVL", "RV", "SYN"};
  std::vector<SegmentationSample> samples;
  samples.reserve(stems.size());
  for (const std::string& stem : stems) {
    size_t us = stem.find('_');
    std::string view = us == std::string::npos ? "" : stem.substr(0, us);
    if (std::find(kViews.begin(), kViews.end(), view) == kViews.end())
      throw DatasetError("filename does not encode a view tag: " + stem);
    fs::path mask_path = mask_dir / (stem + ".png");
    if (!fs::exists(mask_path))
      throw DatasetError("missing mask for " + stem);

    ImageU8 rgb = read_png_rgb((rgb_dir / (stem + ".png")).string());
    ImageU8 gray = read_png_gray(mask_path.string());
    if (rgb.h != gray.h || rgb.w != gray.w)
      throw DatasetError("image/mask dimensions differ for " + stem);

    Tensor img(Shape{3, rgb.h, rgb.w});
    size_t plane = size_t(rgb.h) * rgb.w;
    for (size_t p = 0; p < plane; ++p)
      for (int ch = 0; ch < 3; ++ch)
        img.data[size_t(ch) * plane + p] = float(rgb.pixels[p * 3 + size_t(ch)]) / 255.0f;
    ClassMask mask(1, gray.h, gray.w);
    mask.v = std::move(gray.pixels);
    for (uint8_t v : mask.v)
      if (v >= ClassMap::kNumClasses)
        throw LabelError("mask value out of range in " + stem);

    SegmentationSample s;
    s.image = resize_bilinear_chw(img, target_size, target_size);
    s.mask = resize_nearest_mask(mask, target_size, target_size);
    s.view = view;
    s.stem = stem;
    samples.push_back(std::move(s));
  }
  return split_samples(std::move(samples), ratios, seed);
}

void augment_in_place(SegmentationSample& s, Rng& rng) {
  bool flip = rng.bernoulli(0.5);
  double b = rng.uniform(-0.2, 0.2);
  double k = rng.uniform(0.8, 1.2);
  int h = s.mask.h, w = s.mask.w;
  size_t plane = size_t(h) * w;
  if (flip) {
    for (int ch = 0; ch < 3; ++ch) {
      float* p = s.image.data.data() + size_t(ch) * plane;
      for (int y = 0; y < h; ++y)
        std::reverse(p + size_t(y) * w, p + size_t(y + 1) * w);
    }
    for (int y = 0; y < h; ++y)
      std::reverse(s.mask.v.begin() + size_t(y) * w,
                   s.mask.v.begin() + size_t(y + 1) * w);
  }
  for (float& v : s.image.data)
    v = std::clamp((v - 0.5f) * float(k) + 0.5f + float(b), 0.0f, 1.0f);
}

Tensor resize_bilinear_chw(const Tensor& img, int oh, int ow) {
  check_dim(img.rank() == 3, "resize expects a [C,H,W] tensor");
  int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == oh && w == ow) return img;
  Tensor out(Shape{c, oh, ow});
  auto clamped = [&](const float* p, int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return p[size_t(y) * w + x];
  };
  for (int ci = 0; ci < c; ++ci) {
    const float* src = img.data.data() + size_t(ci) * h * w;
    float* dst = out.data.data() + size_t(ci) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      double sy = (double(oy) + 0.5) * double(h) / double(oh) - 0.5;
      int y0 = int(std::floor(sy));
      double fy = sy - y0;
      for (int ox = 0; ox < ow; ++ox) {
        double sx = (double(ox) + 0.5) * double(w) / double(ow) - 0.5;
        int x0 = int(std::floor(sx));
        double fx = sx - x0;
        double v = (1 - fy) * ((1 - fx) * clamped(src, y0, x0) +
                               fx * clamped(src, y0, x0 + 1)) +
                   fy * ((1 - fx) * clamped(src, y0 + 1, x0) +
                         fx * clamped(src, y0 + 1, x0 + 1));
        dst[size_t(oy) * ow + ox] = float(v);
      }
    }
  }
  return out;
}

ClassMask resize_nearest_mask(const ClassMask& m, int oh, int ow) {
  if (m.h == oh && m.w == ow) return m;
  ClassMask out(m.batch, oh, ow);
  for (int b = 0; b < m.batch; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      int sy = std::clamp(int((double(oy) + 0.5) * double(m.h) / double(oh)), 0, m.h - 1);
      for (int ox = 0; ox < ow; ++ox) {
        int sx = std::clamp(int((double(ox) + 0.5) * double(m.w) / double(ow)), 0, m.w - 1);
        out.v[(size_t(b) * oh + oy) * ow + ox] =
            m.v[(size_t(b) * m.h + sy) * m.w + sx];
      }
    }
  }
  return out;
}

std::vector<double> class_frequencies(const std::vector<SegmentationSample>& set) {
  check_config(!set.empty(), "cannot compute class frequencies of an empty set");
  std::vector<uint64_t> counts(ClassMap::kNumClasses, 0);
  uint64_t total = 0;
  for (const SegmentationSample& s : set)
    for (uint8_t v : s.mask.v) {
      if (v >= ClassMap::kNumClasses) throw LabelError("mask value out of range");
      ++counts[v];
      ++total;
    }
  std::vector<double> freq(ClassMap::kNumClasses);
  for (size_t i = 0; i < freq.size(); ++i) freq[i] = double(counts[i]) / double(total);
  return freq;
}

}  // namespace dseg
