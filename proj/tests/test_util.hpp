#pragma once

#include "avedit/scene.hpp"
#include "avedit/training.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace avedit::testkit {

// Small networks so unit tests render in milliseconds.
inline ModelConfig tiny_model_config(int expr_dim = 8) {
  ModelConfig c;
  c.net_spec.trunk_layers = 3;
  c.net_spec.trunk_width = 24;
  c.net_spec.head_layers = 2;
  c.net_spec.head_width = 16;
  c.net_spec.feature_dim = 8;
  c.net_spec.deform_layers = 2;
  c.net_spec.deform_width = 16;
  c.net_spec.upsampler_width = 8;
  c.dims.id = 8;
  c.dims.expr = expr_dim;
  c.dims.ill = 4;
  c.dims.torso_w = 4;
  return c;
}

inline SceneSpec tiny_scene(int n_frames = 4, int image_size = 32) {
  SceneSpec s;
  s.n_frames = n_frames;
  s.image_size = image_size;
  return s;
}

inline RenderOptions fast_options(const Dataset& ds, int samples = 16) { return render_options_for(ds, samples); }

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("avedit_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Central-difference oracle: perturbs up to `per_tensor` randomly chosen
// entries of each tensor by +-step, evaluates `f` (a scalar), and compares the
// slope with the autodiff gradient. Relative error is
// |num - ana| / max(|num|, |ana|, abs_floor).
inline GradCheck check_gradients(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& tensors,
                                 int per_tensor, double step, double abs_floor = 1e-6, uint64_t seed = 5) {
  for (const auto& t : tensors) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  f().backward();
  std::vector<torch::Tensor> analytic;
  for (const auto& t : tensors) analytic.push_back(t.grad().defined() ? t.grad().clone() : torch::zeros_like(t));

  std::mt19937_64 rng(seed);
  GradCheck out;
  torch::NoGradGuard ng;
  for (size_t k = 0; k < tensors.size(); ++k) {
    auto flat = tensors[k].view({-1});
    auto grad = analytic[k].view({-1});
    const int64_t n = flat.numel();
    const int count = static_cast<int>(std::min<int64_t>(n, per_tensor));
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int c = 0; c < count; ++c) {
      const int64_t i = idx[static_cast<size_t>(c)];
      const double orig = flat[i].item<double>();
      flat[i] = orig + step;
      const double fp = f().item<double>();
      flat[i] = orig - step;
      const double fm = f().item<double>();
      flat[i] = orig;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = grad[i].item<double>();
      const double denom = std::max({std::abs(num), std::abs(ana), abs_floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(num - ana) / denom);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace avedit::testkit
