#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "detcid/core.hpp"
#include "detcid/error.hpp"
#include "detcid/fsutil.hpp"

namespace detcid::core {

namespace {

std::vector<std::uint8_t> read_png8(const std::filesystem::path& path, int& rows, int& cols) {
  const std::string bytes = read_file(path);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::kIo, "cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::kIo, "cannot decode PNG " + path.string() + ": " + msg);
  }
  rows = static_cast<int>(image.height);
  cols = static_cast<int>(image.width);
  return buffer;
}

void write_png8(const std::filesystem::path& path, const std::vector<std::uint8_t>& buffer,
                int rows, int cols) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(cols);
  image.height = static_cast<png_uint_32>(rows);
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, buffer.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, std::string("PNG encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, buffer.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  write_file_atomic(path, out);
}

}  // namespace

GrayImage read_gray_png(const std::filesystem::path& path) {
  int rows = 0, cols = 0;
  const auto buf = read_png8(path, rows, cols);
  GrayImage img(rows, cols);
  for (std::size_t i = 0; i < buf.size(); ++i) img.storage()[i] = buf[i] / 255.0;
  return img;
}

void write_gray_png(const std::filesystem::path& path, const GrayImage& img) {
  std::vector<std::uint8_t> buf(img.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.storage()[i], 0.0, 1.0) * 255.0));
  }
  write_png8(path, buf, img.rows(), img.cols());
}

InstanceMask read_mask_png(const std::filesystem::path& path) {
  int rows = 0, cols = 0;
  const auto buf = read_png8(path, rows, cols);
  InstanceMask m(rows, cols);
  for (std::size_t i = 0; i < buf.size(); ++i) m.storage()[i] = buf[i] ? 1 : 0;
  return m;
}

void write_mask_png(const std::filesystem::path& path, const InstanceMask& mask) {
  std::vector<std::uint8_t> buf(mask.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask.storage()[i] ? 255 : 0;
  write_png8(path, buf, mask.rows(), mask.cols());
}

}  // namespace detcid::core
