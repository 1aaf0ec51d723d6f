#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mergevit/tensor.hpp"

namespace mergevit {

// Single-file checkpoint mapping parameter path strings to tensors.
//
// Layout (all integers and floats little-endian):
//   magic   "MVCKPT01"                                  8 bytes
//   count   u32                                          number of entries
//   entry*  u16 path_len | path bytes | u8 dtype (4=f32, 8=f64)
//           | u8 ndim | u32 dims[ndim] | payload floats
struct CheckpointEntry {
  std::string path;
  int dtype_bytes = 4;
  std::vector<int> shape;
  std::vector<double> values;  // held widened; narrowed on save for f32
};

void save_checkpoint(const std::string& file,
                     const std::vector<std::pair<std::string, const TensorF*>>& entries);
void save_checkpoint(const std::string& file,
                     const std::vector<std::pair<std::string, const TensorD*>>& entries);

std::vector<CheckpointEntry> load_checkpoint(const std::string& file);

// Copies checkpoint values into the named tensors; every name must be present
// with a matching shape.
template <typename T>
void apply_checkpoint(const std::vector<CheckpointEntry>& entries,
                      const std::vector<std::pair<std::string, Tensor<T>*>>& params) {
  for (const auto& [name, tensor] : params) {
    const CheckpointEntry* found = nullptr;
    for (const auto& e : entries)
      if (e.path == name) {
        found = &e;
        break;
      }
    if (!found) throw ConfigError("checkpoint missing parameter '" + name + "'");
    if (found->shape != tensor->shape)
      throw ShapeError("checkpoint '" + name + "' has shape " + shape_str(found->shape) +
                       ", model expects " + shape_str(tensor->shape));
    for (std::size_t i = 0; i < tensor->data.size(); ++i)
      tensor->data[i] = static_cast<T>(found->values[i]);
  }
}

}  // namespace mergevit
