#pragma once

// IDX files: 4-byte big-endian magic, big-endian u32 dims, then unsigned bytes.

#include <array>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdrobust/data/dataset.hpp"

namespace tdr {

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be_u32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size())
    throw IdxError(path + ": truncated header at byte offset " + std::to_string(off) + " (file has " +
                   std::to_string(b.size()) + " bytes)");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be_u32(std::ofstream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  os.write(b.data(), 4);
}

}  // namespace detail

/// Reads an image/label IDX pair; pixels are scaled by 1/255.
inline LabeledSet load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 10) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const std::uint32_t im = detail::be_u32(img, 0, images_path);
  if (im != kIdxImagesMagic)
    throw IdxError(images_path + ": bad magic at byte offset 0 (expected 0x00000803, got " + std::to_string(im) + ")");
  const std::uint32_t lm = detail::be_u32(lab, 0, labels_path);
  if (lm != kIdxLabelsMagic)
    throw IdxError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801, got " + std::to_string(lm) + ")");
  const std::size_t n = detail::be_u32(img, 4, images_path);
  const std::size_t rows = detail::be_u32(img, 8, images_path);
  const std::size_t cols = detail::be_u32(img, 12, images_path);
  const std::size_t nl = detail::be_u32(lab, 4, labels_path);
  if (n != nl)
    throw IdxError("count mismatch: " + images_path + " declares " + std::to_string(n) + " images at byte offset 4, " +
                   labels_path + " declares " + std::to_string(nl) + " labels at byte offset 4");
  if (n == 0 || rows == 0 || cols == 0) throw IdxError(images_path + ": zero dimension in header");
  const std::size_t d = rows * cols;
  if (img.size() < 16 + n * d)
    throw IdxError(images_path + ": truncated pixel data at byte offset " + std::to_string(img.size()) + " (need " +
                   std::to_string(16 + n * d) + ")");
  if (lab.size() < 8 + n)
    throw IdxError(labels_path + ": truncated label data at byte offset " + std::to_string(lab.size()) + " (need " +
                   std::to_string(8 + n) + ")");
  LabeledSet out{Tensor({n, d}), std::vector<int>(n), classes, "idx:" + images_path};
  for (std::size_t i = 0; i < n * d; ++i) out.features[i] = static_cast<double>(img[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = lab[8 + i];
    if (static_cast<std::size_t>(out.labels[i]) >= classes)
      throw IdxError(labels_path + ": label " + std::to_string(out.labels[i]) + " out of range at byte offset " +
                     std::to_string(8 + i));
  }
  return out;
}

/// Writes raw bytes as an IDX pair (images [n, rows, cols]).
inline void write_idx(const std::string& images_path, const std::string& labels_path, std::size_t rows, std::size_t cols,
                      const std::vector<unsigned char>& pixels, const std::vector<unsigned char>& labels) {
  if (pixels.size() != labels.size() * rows * cols) throw IdxError("write_idx: pixel count does not match labels");
  std::ofstream im(images_path, std::ios::binary), lb(labels_path, std::ios::binary);
  if (!im || !lb) throw IdxError("write_idx: cannot open output files");
  detail::put_be_u32(im, kIdxImagesMagic);
  detail::put_be_u32(im, static_cast<std::uint32_t>(labels.size()));
  detail::put_be_u32(im, static_cast<std::uint32_t>(rows));
  detail::put_be_u32(im, static_cast<std::uint32_t>(cols));
  im.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  detail::put_be_u32(lb, kIdxLabelsMagic);
  detail::put_be_u32(lb, static_cast<std::uint32_t>(labels.size()));
  lb.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

}  // namespace tdr
