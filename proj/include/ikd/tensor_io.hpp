#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ikd/tensor.hpp"

namespace ikd {

// "TNSR" container: magic, u8 version, u32 rank, rank x u32 dims, then a
// little-endian row-major payload. Version 1 stores float32 (images,
// weights, exported features); version 2 stores float64 and is what
// checkpoints use so parameters survive a round trip bit for bit.
enum class TensorPrecision : std::uint8_t { Float32 = 1, Float64 = 2 };

std::vector<std::uint8_t> encode_tensor(const Tensor& t, TensorPrecision precision = TensorPrecision::Float32);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_tensor(const std::filesystem::path& path, const Tensor& t,
                  TensorPrecision precision = TensorPrecision::Float32);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace ikd
