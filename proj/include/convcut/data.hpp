#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "convcut/tensor.hpp"

namespace convcut {

// Images are [H,W,3] tensors with values in [0,1].
struct LabeledDataset {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> label_map;

  std::size_t size() const { return images.size(); }
  std::size_t num_classes() const { return label_map.size(); }
  bool empty() const { return images.empty(); }
  std::vector<std::size_t> class_counts() const;
};

struct SyntheticSpec {
  std::size_t num_classes = 2;
  std::size_t samples_per_class = 32;
  std::size_t image_size = 64;
  double noise_std = 0.1;
  std::uint64_t seed = 7;
};

// Binary netpbm: reads P6 (maxval <= 255), writes P6 RGB and P5 gray.
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);
void write_pgm(const std::filesystem::path& path, const Tensor& gray);

// Nearest-neighbour resize of an [H,W,C] image to size x size.
Tensor resize_nearest(const Tensor& image, std::size_t size);

// Reads root/<class>/<image>.ppm. Classes and files are taken in
// lexicographic order; empty class directories are kept with a warning.
LabeledDataset load_dataset(const std::filesystem::path& root, std::size_t expected_size);

// Class k: bright (0.9) quadrant k mod 4 over a 0.1 background, plus clamped
// Gaussian noise. Quadrants run TL, BL, TR, BR so that classes 0 and 1 stay
// distinct under horizontal flips.
LabeledDataset generate_synthetic(const SyntheticSpec& spec);

// Stratified seeded split: floor(fraction * n_k) samples of each class go to
// train. Classes with fewer than two samples go entirely to train.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double train_fraction,
                                                std::uint64_t seed);

// Stacks the selected images into [B,H,W,3].
Tensor make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices);

// Mirrors an [H,W,C] or [B,H,W,C] tensor along the width axis.
Tensor flip_width(const Tensor& x);

}  // namespace convcut
