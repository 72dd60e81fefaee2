#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dseg/png_io.hpp"
#include "dseg/rng.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

// The ten segmentation classes. Id order is fixed — it is the report row
// order and the mask encoding.
struct ClassMap {
  static constexpr int kNumClasses = 10;
  static const std::array<const char*, kNumClasses>& tokens();
  static const std::array<const char*, kNumClasses>& display_names();
  static int id_of(const std::string& token);
};

// Equidistant fisheye projection r = focal * theta, valid out to max_theta
// (the image circle).
struct FisheyeCameraModel {
  double focal = 0;      // pixels per radian
  double cy = 0, cx = 0; // projection center, pixels
  double max_theta = 0;  // radians
};

// Camera whose image circle exactly fills a size x size frame.
FisheyeCameraModel default_camera(int size, double max_theta = 1.15);

struct SegmentationSample {
  Tensor image;      // [3,H,W], values in [0,1]
  ClassMask mask;    // batch 1, values 0..9
  std::string view;  // FV | MVR | MVL | RV | SYN
  std::string stem;  // file stem, e.g. "SYN_00012"
};

// Renders a random planar street scene (road trapezoid, dashed lane lines,
// curbs, sparse objects with traffic signs rarest) and warps it through the
// fisheye model: bilinear for the image, nearest-neighbor for the mask,
// background outside the image circle. Bit-reproducible per seed.
SegmentationSample generate_scene(const FisheyeCameraModel& cam, uint64_t seed,
                                  int size);

// The flat (pre-warp) class canvas generate_scene(seed, size) samples from:
// a 2*size x 2*size grid of class ids. Exposed so warp geometry can be
// checked against the source plane.
std::vector<uint8_t> flat_scene_classes(uint64_t seed, int size);

std::vector<SegmentationSample> make_synthetic_set(int n, int size, uint64_t seed);

// Writes n generated samples as <out_dir>/rgb/SYN_<id>.png (color) and
// <out_dir>/mask/SYN_<id>.png (8-bit class indices).
void write_synthetic_dataset(const std::string& out_dir, int n, int size,
                             uint64_t seed);

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
};

struct DatasetSplits {
  std::vector<SegmentationSample> train, val, test;
};

// Deterministic split, stratified by view tag so every view lands in every
// partition in proportion (to +-1 sample per view).
DatasetSplits split_samples(std::vector<SegmentationSample> samples,
                            SplitRatios ratios, uint64_t seed);

// Loads <root>/rgb + <root>/mask pairs, resizes to target_size (bilinear
// image, nearest mask), scales pixels to [0,1], and splits by view.
DatasetSplits load_dataset(const std::string& root, SplitRatios ratios,
                           uint64_t seed, int target_size);

// Training-time augmentation: horizontal flip with probability 0.5 (image
// and mask together), then brightness +U(-0.2,0.2) and contrast
// x[0.8,1.2] on the image only, clamped to [0,1].
void augment_in_place(SegmentationSample& s, Rng& rng);

Tensor resize_bilinear_chw(const Tensor& img, int oh, int ow);
ClassMask resize_nearest_mask(const ClassMask& m, int oh, int ow);

// Pixel share of each class over all masks in the set.
std::vector<double> class_frequencies(const std::vector<SegmentationSample>& set);

}  // namespace dseg
