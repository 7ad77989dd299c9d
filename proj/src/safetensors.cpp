#include "halludet/safetensors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"
#include "halludet/error.hpp"

namespace halludet {

static_assert(std::endian::native == std::endian::little,
              "safetensors payloads are little-endian; big-endian hosts need byte swapping");

std::string_view to_string(DType d) {
  switch (d) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view s) {
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  return std::nullopt;
}

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 2; }

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalise
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 | (mant & 0x3FFu) << 13;
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | mant << 13;
  } else {
    bits = sign | (exp + 127 - 15) << 23 | mant << 13;
  }
  return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7FFFFFFFu;
  if (abs >= 0x7F800000u) {
    // inf or NaN; keep NaN quiet and non-zero
    return sign | 0x7C00u | (abs > 0x7F800000u ? 0x200u | ((abs >> 13) & 0x3FFu) : 0u);
  }
  if (abs >= 0x477FF000u) return sign | 0x7C00u;  // rounds to >= 65520 -> inf
  if (abs < 0x38800000u) {
    // result is subnormal or zero
    if (abs < 0x33000000u) return sign;  // < 2^-25 rounds to zero
    const std::uint32_t e = abs >> 23;
    const std::uint32_t m = (abs & 0x7FFFFFu) | 0x800000u;
    const std::uint32_t shift = 126 - e;  // 14 + (113 - e)
    std::uint32_t half_m = m >> shift;
    const std::uint32_t rem = m & ((1u << shift) - 1);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_m & 1u))) ++half_m;
    return sign | static_cast<std::uint16_t>(half_m);
  }
  std::uint32_t h = ((abs >> 23) - 112) << 10 | ((abs >> 13) & 0x3FFu);
  const std::uint32_t rem = abs & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carries into exponent correctly
  return sign | static_cast<std::uint16_t>(h);
}

float bf16_to_float(std::uint16_t h) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

std::uint16_t float_to_bf16(float f) {
  std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  if ((x & 0x7FFFFFFFu) > 0x7F800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
  x += 0x7FFFu + ((x >> 16) & 1u);
  return static_cast<std::uint16_t>(x >> 16);
}

bool Tensor::operator==(const Tensor& o) const {
  if (shape != o.shape || dtype != o.dtype || values.size() != o.values.size()) return false;
  return std::memcmp(values.data(), o.values.data(), values.size() * sizeof(float)) == 0;
}

std::uint64_t shape_product(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > UINT64_MAX / d) throw FormatError("tensor shape overflows");
    n *= d;
  }
  return n;
}

namespace {

std::uint64_t read_u64_le(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}

struct Entry {
  std::string name;
  DType dtype;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin;
  std::uint64_t end;
};

[[noreturn]] void bad_tensor(const std::string& name, const std::string& why) {
  throw FormatError("tensor '" + name + "': " + why);
}

std::uint64_t as_u64(const nlohmann::json& v, const std::string& name, const char* what) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    bad_tensor(name, std::string(what) + " must be nonnegative integers");
  }
  return v.get<std::uint64_t>();
}

}  // namespace

TensorCheckpoint parse_safetensors(std::string_view bytes) {
  if (bytes.size() < 8) {
    throw FormatError("file is " + std::to_string(bytes.size()) +
                      " bytes, too short for the 8-byte header length");
  }
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) {
    throw FormatError("header length " + std::to_string(header_len) + " exceeds the " +
                      std::to_string(bytes.size() - 8) + " bytes after the length prefix");
  }
  const auto header_text = bytes.substr(8, header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("malformed safetensors header JSON", 8 + (e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!header.is_object()) throw FormatError("safetensors header is not a JSON object");

  TensorCheckpoint ckpt;
  std::vector<Entry> entries;
  for (auto it = header.begin(); it != header.end(); ++it) {
    const std::string& name = it.key();
    const auto& v = it.value();
    if (name == "__metadata__") {
      if (!v.is_object()) throw FormatError("__metadata__ must be an object");
      for (auto m = v.begin(); m != v.end(); ++m) {
        if (!m.value().is_string()) throw FormatError("__metadata__ value '" + m.key() + "' is not a string");
        ckpt.metadata[m.key()] = m.value().get<std::string>();
      }
      continue;
    }
    if (!v.is_object()) bad_tensor(name, "entry is not an object");
    auto dt = v.find("dtype");
    if (dt == v.end() || !dt->is_string()) bad_tensor(name, "missing 'dtype'");
    auto dtype = parse_dtype(dt->get<std::string>());
    if (!dtype) bad_tensor(name, "unsupported dtype '" + dt->get<std::string>() + "'");
    auto sh = v.find("shape");
    if (sh == v.end() || !sh->is_array()) bad_tensor(name, "missing 'shape'");
    auto off = v.find("data_offsets");
    if (off == v.end() || !off->is_array() || off->size() != 2) {
      bad_tensor(name, "'data_offsets' must be [begin, end]");
    }
    Entry e{name, *dtype, {}, as_u64((*off)[0], name, "data_offsets"),
            as_u64((*off)[1], name, "data_offsets")};
    for (const auto& d : *sh) e.shape.push_back(as_u64(d, name, "shape dimensions"));
    if (e.begin > e.end) bad_tensor(name, "data_offsets begin > end");
    const std::uint64_t numel = shape_product(e.shape);
    if (numel > UINT64_MAX / dtype_size(e.dtype) || numel * dtype_size(e.dtype) != e.end - e.begin) {
      bad_tensor(name, "shape " + nlohmann::json(e.shape).dump() + " needs " +
                           std::to_string(numel * dtype_size(e.dtype)) + " bytes but data_offsets span " +
                           std::to_string(e.end - e.begin));
    }
    entries.push_back(std::move(e));
  }

  const std::uint64_t data_size = bytes.size() - 8 - header_len;
  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) {
    return a->begin != b->begin ? a->begin < b->begin : a->end < b->end;
  });
  std::uint64_t cursor = 0;
  const Entry* prev = nullptr;
  for (const Entry* e : by_offset) {
    if (e->begin < cursor) {
      throw FormatError("tensor '" + e->name + "' overlaps tensor '" + prev->name + "'");
    }
    if (e->begin > cursor) {
      throw FormatError("gap in data buffer before tensor '" + e->name + "' at offset " +
                        std::to_string(cursor));
    }
    if (e->end > data_size) {
      throw FormatError("truncated data: tensor '" + e->name + "' ends at byte " +
                        std::to_string(e->end) + " of a " + std::to_string(data_size) +
                        "-byte data buffer");
    }
    cursor = e->end;
    prev = e;
  }
  if (cursor != data_size) {
    throw FormatError("data buffer has " + std::to_string(data_size - cursor) +
                      " trailing bytes not covered by any tensor");
  }

  const char* data = bytes.data() + 8 + header_len;
  for (const auto& e : entries) {
    Tensor t;
    t.shape = e.shape;
    t.dtype = e.dtype;
    const std::size_t n = static_cast<std::size_t>(shape_product(e.shape));
    t.values.resize(n);
    const char* src = data + e.begin;
    if (e.dtype == DType::F32) {
      std::memcpy(t.values.data(), src, n * 4);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        t.values[i] = e.dtype == DType::F16 ? half_to_float(h) : bf16_to_float(h);
      }
    }
    ckpt.tensors.emplace(e.name, std::move(t));
  }
  return ckpt;
}

TensorCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const ValidationError&) {
    throw ValidationError("cannot open checkpoint " + path.string());
  }
  try {
    return parse_safetensors(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": malformed safetensors header JSON", e.byte_offset());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string serialize_safetensors(const TensorCheckpoint& ckpt) {
  std::vector<const std::pair<const std::string, Tensor>*> order;
  for (const auto& kv : ckpt.tensors) {
    if (kv.first == "__metadata__") throw ValidationError("'__metadata__' is not a valid tensor name");
    if (shape_product(kv.second.shape) != kv.second.values.size()) {
      throw ValidationError("tensor '" + kv.first + "': value count does not match its shape");
    }
    order.push_back(&kv);
  }
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) {
    const auto sa = dtype_size(a->second.dtype), sb = dtype_size(b->second.dtype);
    return sa != sb ? sa > sb : a->first < b->first;
  });

  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!ckpt.metadata.empty()) {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : ckpt.metadata) meta[k] = v;
    header["__metadata__"] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto* kv : order) {
    const auto& t = kv->second;
    const std::uint64_t bytes = t.values.size() * dtype_size(t.dtype);
    header[kv->first] = {{"dtype", to_string(t.dtype)},
                         {"shape", t.shape},
                         {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header_text = header.dump();
  header_text.append((8 - header_text.size() % 8) % 8, ' ');

  std::string out;
  out.reserve(8 + header_text.size() + offset);
  const std::uint64_t len = header_text.size();
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += header_text;
  for (const auto* kv : order) {
    const auto& t = kv->second;
    if (t.dtype == DType::F32) {
      out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * 4);
    } else {
      for (float v : t.values) {
        const std::uint16_t h = t.dtype == DType::F16 ? float_to_half(v) : float_to_bf16(v);
        out.append(reinterpret_cast<const char*>(&h), 2);
      }
    }
  }
  return out;
}

void save_checkpoint(const TensorCheckpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_safetensors(ckpt));
}

}  // namespace halludet
