#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lada/tensor.hpp"

namespace lada {

/// Canvas edge length used throughout (masks, resists, network inputs).
inline constexpr int kCanvas = 64;

/// Binary raster; the tag keeps masks and resist images from being mixed up.
template <class Tag>
class BinaryImage {
 public:
  BinaryImage() = default;
  BinaryImage(int h, int w) : h_(h), w_(w), px_(static_cast<std::size_t>(h) * w, 0) {
    if (h <= 0 || w <= 0) throw ValidationError("image extents must be positive");
  }
  BinaryImage(int h, int w, std::vector<std::uint8_t> px) : h_(h), w_(w), px_(std::move(px)) {
    if (h <= 0 || w <= 0 || px_.size() != static_cast<std::size_t>(h) * w) {
      throw ValidationError("image data does not match extents");
    }
    for (auto v : px_) {
      if (v > 1) throw ValidationError("binary image values must be 0 or 1");
    }
  }

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return px_.size(); }

  std::uint8_t operator()(int y, int x) const { return px_[static_cast<std::size_t>(y) * w_ + x]; }
  void set(int y, int x, bool v) { px_[static_cast<std::size_t>(y) * w_ + x] = v ? 1 : 0; }
  std::uint8_t operator[](std::size_t i) const { return px_[i]; }

  const std::vector<std::uint8_t>& pixels() const noexcept { return px_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : px_) n += v;
    return n;
  }
  double fraction() const { return px_.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(px_.size()); }

  friend bool operator==(const BinaryImage&, const BinaryImage&) = default;

 private:
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> px_;
};

struct MaskTag {};
struct ResistTag {};
using MaskImage = BinaryImage<MaskTag>;
using ResistImage = BinaryImage<ResistTag>;

/// Toroidal integer shift: out(y, x) = in(y − dy, x − dx).
template <class Tag>
BinaryImage<Tag> shifted(const BinaryImage<Tag>& img, int dy, int dx) {
  const int h = img.height(), w = img.width();
  BinaryImage<Tag> out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.set(((y + dy) % h + h) % h, ((x + dx) % w + w) % w, img(y, x));
  }
  return out;
}

/// Network encoding of a mask: 1×H×W with values 2M − 1 ∈ {−1, +1}.
inline Tensor encode_mask(const MaskImage& m) {
  Tensor t(Dims{1, m.height(), m.width()});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = m[i] ? 1.0f : -1.0f;
  return t;
}

/// H×W {0, 1} target for the segmentation loss.
inline Tensor resist_target(const ResistImage& r) {
  Tensor t(Dims{r.height(), r.width()});
  for (std::size_t i = 0; i < r.size(); ++i) t[i] = r[i];
  return t;
}

// ---------------------------------------------------------------- PGM (P5, 8-bit, {0, 255})

template <class Tag>
void write_pgm(const std::string& path, const BinaryImage<Tag>& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  std::vector<char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) bytes[i] = static_cast<char>(img[i] ? 255 : 0);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <class Tag>
BinaryImage<Tag> read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open PGM: " + path);
  auto next_token = [&is]() {
    std::string tok;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
      } else {
        tok.push_back(c);
      }
    }
    return tok;
  };
  if (next_token() != "P5") throw ValidationError("not a binary PGM (P5): " + path);
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw ValidationError("malformed PGM header: " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw ValidationError("unsupported PGM header: " + path);
  std::vector<char> bytes(static_cast<std::size_t>(w) * h);
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw ValidationError("truncated PGM: " + path);
  std::vector<std::uint8_t> px(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto v = static_cast<unsigned char>(bytes[i]);
    if (v != 0 && v != 255) throw ValidationError("PGM is not binary {0,255}: " + path);
    px[i] = v ? 1 : 0;
  }
  return BinaryImage<Tag>(h, w, std::move(px));
}

}  // namespace lada
