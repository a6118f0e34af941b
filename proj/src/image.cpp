#include "avedit/image.hpp"

#include "avedit/error.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <vector>

namespace avedit {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<uint8_t>& pixels) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(width) * static_cast<size_t>(channels);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + stride * static_cast<size_t>(y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Returns pixels as 8-bit, expanded to `want_channels` (1 or 3).
std::vector<uint8_t> read_png(const std::filesystem::path& path, int want_channels, int& width,
                              int& height) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw MissingFileError("missing file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng read failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
  if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (want_channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  const size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<uint8_t> pixels(rowbytes * static_cast<size_t>(height));
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<size_t>(y)] = pixels.data() + rowbytes * static_cast<size_t>(y);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  if (rowbytes != static_cast<size_t>(width * want_channels)) {
    throw IoError("unexpected channel layout in " + path.string());
  }
  return pixels;
}

std::vector<uint8_t> to_u8(const torch::Tensor& t) {
  auto bytes = (t.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  const auto* p = bytes.data_ptr<uint8_t>();
  return {p, p + bytes.numel()};
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 3 && image.size(2) == 3, "expected [H,W,3] image");
  write_png(path, static_cast<int>(image.size(1)), static_cast<int>(image.size(0)), 3, to_u8(image));
}

torch::Tensor read_png_rgb(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto pixels = read_png(path, 3, w, h);
  auto t = torch::from_blob(pixels.data(), {h, w, 3}, torch::kUInt8).to(torch::kFloat32) / 255.0f;
  return t.contiguous();
}

void write_png_mask(const std::filesystem::path& path, const torch::Tensor& mask) {
  TORCH_CHECK(mask.dim() == 2, "expected [H,W] mask");
  write_png(path, static_cast<int>(mask.size(1)), static_cast<int>(mask.size(0)), 1, to_u8(mask));
}

torch::Tensor read_png_mask(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto pixels = read_png(path, 1, w, h);
  auto t = torch::from_blob(pixels.data(), {h, w}, torch::kUInt8).to(torch::kFloat32);
  return (t > 127.0f).to(torch::kFloat32);
}

void write_float_bin(const std::filesystem::path& path, const torch::Tensor& values) {
  auto v = values.detach().to(torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(v.data_ptr<float>()),
            static_cast<std::streamsize>(v.numel() * static_cast<int64_t>(sizeof(float))));
}

torch::Tensor read_float_bin(const std::filesystem::path& path, int64_t height, int64_t width) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw MissingFileError("missing file: " + path.string());
  const auto bytes = static_cast<int64_t>(in.tellg());
  if (bytes != height * width * static_cast<int64_t>(sizeof(float))) {
    throw SizeMismatchError("float dump " + path.string() + " has " + std::to_string(bytes) +
                            " bytes, expected " + std::to_string(height * width * 4));
  }
  in.seekg(0);
  auto t = torch::empty({height, width}, torch::kFloat32);
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()), bytes);
  return t;
}

torch::Tensor quantize_u8(const torch::Tensor& image) {
  return ((image.to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round() / 255.0).to(torch::kFloat32);
}

torch::Tensor hue_rotate(const torch::Tensor& image, double degrees) {
  // Rodrigues rotation about the unit grey axis (1,1,1)/sqrt(3).
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double k = (1.0 - c) / 3.0;
  const double r = std::sqrt(1.0 / 3.0) * s;
  const auto m = torch::tensor({c + k, k - r, k + r,  //
                                k + r, c + k, k - r,  //
                                k - r, k + r, c + k},
                               torch::kFloat64)
                     .view({3, 3});
  auto out = torch::matmul(image.to(torch::kFloat64), m.t());
  return out.clamp(0.0, 1.0).to(image.scalar_type());
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).square().mean().item<double>();
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

torch::Tensor block_mean(const torch::Tensor& plane, int64_t factor) {
  const auto h = plane.size(0), w = plane.size(1);
  return plane.view({h / factor, factor, w / factor, factor}).mean({1, 3});
}

}  // namespace avedit
