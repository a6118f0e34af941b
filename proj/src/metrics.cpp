#include "avedit/metrics.hpp"

#include "avedit/error.hpp"
#include "avedit/hash.hpp"

#include <algorithm>
#include <cctype>

namespace avedit {

namespace F = torch::nn::functional;

namespace {

constexpr int64_t kGrid = 16;

torch::Tensor unit(const torch::Tensor& v) {
  const double n = v.norm().item<double>();
  if (!(n > 1e-12)) {
    auto e = torch::zeros_like(v);
    e[0] = 1.0;
    return e;
  }
  return v / n;
}

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
  return std::clamp((a * b).sum().item<double>(), -1.0, 1.0);
}

void check_frames(const std::vector<torch::Tensor>& frames, size_t minimum, const char* metric) {
  if (frames.size() < minimum) {
    throw ContractError(std::string(metric) + " needs at least " + std::to_string(minimum) + " frame(s)");
  }
  for (const auto& f : frames) {
    if (!f.sizes().equals(frames.front().sizes())) throw DimensionError(std::string(metric) + ": frame sizes differ");
  }
}

}  // namespace

RandomProjectionEmbedder::RandomProjectionEmbedder(uint64_t seed, int dim) : seed_(seed), dim_(dim) {
  if (dim < 1) throw ValidationError("embedding dimension must be >= 1");
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  projection_ = torch::randn({kGrid * kGrid * 3, dim}, gen, torch::kFloat64);
}

torch::Tensor RandomProjectionEmbedder::embed_image(const torch::Tensor& image) const {
  if (image.dim() != 3 || image.size(2) != 3) throw DimensionError("embed_image expects [H,W,3]");
  auto x = image.to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(0);
  x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({kGrid, kGrid}));
  x = x.reshape({-1});
  x = x - x.mean();
  return unit(torch::matmul(x, projection_));
}

torch::Tensor RandomProjectionEmbedder::embed_text(const std::string& text) const {
  std::string low = text;
  std::transform(low.begin(), low.end(), low.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  Fnv1a h;
  h.update_value(seed_);
  h.update(low);
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(h.digest());
  return unit(torch::randn({dim_}, gen, torch::kFloat64));
}

double pixel_mse_consistency(const std::vector<torch::Tensor>& frames) {
  check_frames(frames, 2, "pixel_mse_consistency");
  // Extended-precision accumulation: a constant per-pixel difference d gives
  // exactly fl(d*d) instead of a value perturbed by summation order.
  long double sum = 0.0L;
  for (size_t i = 0; i + 1 < frames.size(); ++i) {
    const auto sq = (frames[i + 1].to(torch::kFloat64) - frames[i].to(torch::kFloat64)).pow(2).contiguous();
    const double* p = sq.data_ptr<double>();
    long double frame_sum = 0.0L;
    for (int64_t k = 0; k < sq.numel(); ++k) frame_sum += p[k];
    sum += frame_sum / static_cast<long double>(sq.numel());
  }
  return static_cast<double>(sum / static_cast<long double>(frames.size() - 1));
}

double temporal_embedding_consistency(const std::vector<torch::Tensor>& frames, const Embedder& embedder) {
  check_frames(frames, 2, "temporal_embedding_consistency");
  std::vector<torch::Tensor> emb;
  emb.reserve(frames.size());
  for (const auto& f : frames) emb.push_back(embedder.embed_image(f));
  double sum = 0.0;
  for (size_t i = 0; i + 1 < emb.size(); ++i) sum += cosine(emb[i], emb[i + 1]);
  return sum / static_cast<double>(emb.size() - 1);
}

double text_alignment(const std::vector<torch::Tensor>& frames, const std::string& prompt, const Embedder& embedder) {
  check_frames(frames, 1, "text_alignment");
  const auto t = embedder.embed_text(prompt);
  double sum = 0.0;
  for (const auto& f : frames) sum += cosine(embedder.embed_image(f), t);
  return sum / static_cast<double>(frames.size());
}

}  // namespace avedit
