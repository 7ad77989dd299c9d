#pragma once

/*
 * safetensors layout:
 *   [8 bytes]  little-endian u64 N, the header length
 *   [N bytes]  JSON header: {"__metadata__": {str: str}, name: {"dtype", "shape", "data_offsets"}}
 *   [rest]     tensor payloads, little-endian, offsets relative to the end of the header
 *
 * Only F32, F16 and BF16 are supported. 16-bit tensors are held as float and
 * rounded back (nearest-even) on save.
 */

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace halludet {

enum class DType { F32, F16, BF16 };

std::string_view to_string(DType d);
std::optional<DType> parse_dtype(std::string_view s);
std::size_t dtype_size(DType d);

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bf16_to_float(std::uint16_t h);
std::uint16_t float_to_bf16(float f);

struct Tensor {
  std::vector<std::uint64_t> shape;
  DType dtype = DType::F32;
  std::vector<float> values;

  std::size_t numel() const { return values.size(); }
  bool operator==(const Tensor& o) const;
};

struct TensorCheckpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  bool operator==(const TensorCheckpoint&) const = default;
};

std::uint64_t shape_product(const std::vector<std::uint64_t>& shape);

TensorCheckpoint parse_safetensors(std::string_view bytes);
TensorCheckpoint load_checkpoint(const std::filesystem::path& path);

// Canonical layout: tensors ordered by (dtype size desc, name), metadata first
// in the header, header padded with spaces to a multiple of 8 bytes.
std::string serialize_safetensors(const TensorCheckpoint& ckpt);
void save_checkpoint(const TensorCheckpoint& ckpt, const std::filesystem::path& path);

}  // namespace halludet
