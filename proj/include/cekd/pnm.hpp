#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>

#include "cekd/errors.hpp"
#include "cekd/io.hpp"
#include "cekd/tensor.hpp"

namespace cekd {

// Binary PGM (P5, one channel) and PPM (P6, three channels) with maxval 255.
// Pixel values are in [0, 1]; encoding rounds to the nearest of 256 levels.

inline unsigned char quantize_pixel(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Encodes [C,H,W] (C = 1 or 3) as "P5\n<w> <h>\n255\n" / "P6\n..." followed
/// by raw interleaved bytes.
inline std::string encode_pnm(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw std::invalid_argument("encode_pnm: expected [1,H,W] or [3,H,W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = (c == 1 ? "P5\n" : "P6\n") + std::to_string(w) + " " + std::to_string(h) +
                    "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + c * h * w);
  std::size_t i = header;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[i++] = static_cast<char>(quantize_pixel(image(ch, y, x)));
  return out;
}

namespace detail {

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > (1u << 24)) throw ParseError(std::string("PNM ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("PNM: expected ") + what, start);
    return value;
  }

  void expect_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      throw ParseError("PNM: expected whitespace after maxval", pos_);
    ++pos_;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 2;
};

}  // namespace detail

/// Decodes P5/P6 bytes into [C,H,W] with values v / maxval.
inline Tensor decode_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw ParseError("PNM: expected magic P5 or P6", 0);
  const std::size_t c = bytes[1] == '5' ? 1 : 3;
  detail::PnmHeaderReader header(bytes);
  const std::size_t w = header.read_uint("width");
  const std::size_t h = header.read_uint("height");
  const std::size_t maxval_pos = header.pos();
  const std::size_t maxval = header.read_uint("maxval");
  if (w == 0 || h == 0) throw ParseError("PNM: zero image extent", maxval_pos);
  if (maxval == 0 || maxval > 255) throw ParseError("PNM: maxval must be in [1, 255]", maxval_pos);
  header.expect_single_space();
  const std::size_t offset = header.pos();
  const std::size_t need = c * h * w;
  if (bytes.size() - offset < need)
    throw ParseError("PNM: truncated payload, expected " + std::to_string(need) + " bytes, found " +
                         std::to_string(bytes.size() - offset),
                     bytes.size());
  Tensor image({c, h, w});
  std::size_t i = offset;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto v = static_cast<unsigned char>(bytes[i++]);
        if (v > maxval) throw ParseError("PNM: sample exceeds maxval", i - 1);
        image(ch, y, x) = static_cast<double>(v) / static_cast<double>(maxval);
      }
  return image;
}

inline void save_pnm(const fs::path& path, const Tensor& image) {
  write_file_atomic(path, encode_pnm(image));
}

inline Tensor load_pnm(const fs::path& path) {
  return decode_pnm(read_file(path));
}

}  // namespace cekd
