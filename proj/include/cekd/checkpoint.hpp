#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "json.hpp"

#include "cekd/errors.hpp"
#include "cekd/io.hpp"
#include "cekd/model.hpp"

namespace cekd {

// Checkpoint layout (all integers and doubles little-endian):
//   "CEKDCKPT" | u32 version | u64 meta_len | meta JSON (net config + seed
//   lineage) | u32 tensor_count | per tensor: u32 rank, u64 dims[rank],
//   f64 values[prod(dims)]
// Doubles are stored as raw IEEE-754 bits, so save/load is bit-exact.

inline constexpr std::string_view kCheckpointMagic = "CEKDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Params params;
  nlohmann::json lineage = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"input_hw", c.input_hw},
                     {"conv_channels", c.conv_channels},
                     {"pool_after", c.pool_after},
                     {"num_classes", c.num_classes},
                     {"input_mean", c.input_mean},
                     {"input_std", c.input_std}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.input_channels = j.at("input_channels").get<std::size_t>();
  c.input_hw = j.at("input_hw").get<std::size_t>();
  c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  c.pool_after = j.at("pool_after").get<std::vector<bool>>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.input_mean = j.at("input_mean").get<double>();
  c.input_std = j.at("input_std").get<double>();
  c.validate();
  return c;
}

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T))
      throw ParseError(std::string("checkpoint: truncated while reading ") + what, pos_);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw ParseError(std::string("checkpoint: truncated while reading ") + what, pos_);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta =
      nlohmann::json{{"net", ckpt.params.config}, {"lineage", ckpt.lineage}}.dump();
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;
  const auto tensors = ckpt.params.tensors();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(double));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic)
    throw ParseError("checkpoint: bad magic", 0);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unsupported version " + std::to_string(version), in.pos() - 4);
  const auto meta_len = in.get<std::uint64_t>("metadata length");
  const std::size_t meta_pos = in.pos();
  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(in.take(meta_len, "metadata"));
    ckpt.params = Params::zeros(net_config_from_json(meta.at("net")));
    ckpt.lineage = meta.at("lineage");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad metadata: ") + e.what(), meta_pos);
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("checkpoint: bad net config: ") + e.what(), meta_pos);
  }
  auto tensors = ckpt.params.tensors();
  const std::size_t count_pos = in.pos();
  if (in.get<std::uint32_t>("tensor count") != tensors.size())
    throw ParseError("checkpoint: tensor count does not match net config", count_pos);
  for (Tensor* t : tensors) {
    const std::size_t shape_pos = in.pos();
    const auto rank = in.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint64_t>("dimension");
    if (shape != t->shape())
      throw ParseError("checkpoint: tensor shape " + shape_string(shape) + " does not match " +
                           shape_string(t->shape()),
                       shape_pos);
    const auto raw = in.take(t->size() * sizeof(double), "tensor values");
    std::memcpy(t->data(), raw.data(), raw.size());
  }
  if (!in.done()) throw ParseError("checkpoint: trailing bytes", in.pos());
  return ckpt;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace cekd
