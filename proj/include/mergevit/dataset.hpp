#pragma once

#include <cstdint>
#include <vector>

#include "mergevit/tensor.hpp"

namespace mergevit {

// Deterministic synthetic classification task: low background noise plus a
// bright rectangle whose (position quadrant, size) pair encodes the class.
// Same seed, same spec -> bit-identical dataset; classes exactly balanced.
struct SyntheticDatasetSpec {
  int image_size = 64;
  int channels = 1;
  int num_classes = 10;
  int samples_per_class = 128;
  std::uint64_t seed = 0;
};

struct Dataset {
  SyntheticDatasetSpec spec;
  std::vector<TensorF> images;  // each [H x W x C]
  std::vector<int> labels;
};

// Number of (quadrant, size) patterns available; num_classes above this is a
// config error.
int max_encodable_classes();

Dataset generate_dataset(const SyntheticDatasetSpec& spec);

}  // namespace mergevit
