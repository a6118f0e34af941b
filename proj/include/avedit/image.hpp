#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace avedit {

// Images are float32 tensors laid out [H, W, 3] with values in [0, 1].
// Masks are float32 [H, W] holding exactly 0 or 1.

void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_png_rgb(const std::filesystem::path& path);

void write_png_mask(const std::filesystem::path& path, const torch::Tensor& mask);
torch::Tensor read_png_mask(const std::filesystem::path& path);

// Row-major float32 dump, no header.
void write_float_bin(const std::filesystem::path& path, const torch::Tensor& values);
torch::Tensor read_float_bin(const std::filesystem::path& path, int64_t height, int64_t width);

// Snap values to the 8-bit grid (round(v * 255) / 255) after clamping to [0,1].
torch::Tensor quantize_u8(const torch::Tensor& image);

// Hue rotation about the grey axis, clamped back into [0,1].
torch::Tensor hue_rotate(const torch::Tensor& image, double degrees);

// Peak signal-to-noise ratio for unit-range images, in dB.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

// Mean over the last-two-dims block of size factor x factor: [H,W] -> [H/f, W/f].
torch::Tensor block_mean(const torch::Tensor& plane, int64_t factor);

}  // namespace avedit
