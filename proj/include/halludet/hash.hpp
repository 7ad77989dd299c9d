#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace halludet {

std::array<std::uint8_t, 32> sha256(std::string_view bytes);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file_hex(const std::filesystem::path& path);

// First 8 digest bytes, big-endian. Used as a stable 64-bit hash.
std::uint64_t hash64(std::string_view bytes);

// Maps a 64-bit hash onto [0, 1) with 53 bits of resolution.
inline double unit_interval(std::uint64_t h) {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace halludet
