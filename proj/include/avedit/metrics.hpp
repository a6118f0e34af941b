#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

namespace avedit {

// Maps images and text into a shared space. Outputs are unit-norm [D] vectors.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual torch::Tensor embed_image(const torch::Tensor& image) const = 0;
  virtual torch::Tensor embed_text(const std::string& text) const = 0;
};

// Fixed Gaussian projection of a 16x16 area-downsampled, mean-centred image;
// text maps to a Gaussian vector seeded by a hash of its lower-cased bytes.
class RandomProjectionEmbedder final : public Embedder {
 public:
  explicit RandomProjectionEmbedder(uint64_t seed = 11, int dim = 64);
  torch::Tensor embed_image(const torch::Tensor& image) const override;
  torch::Tensor embed_text(const std::string& text) const override;

 private:
  uint64_t seed_;
  int dim_;
  torch::Tensor projection_;  // [16*16*3, dim]
};

// Mean over consecutive pairs of the per-pixel mean squared difference.
double pixel_mse_consistency(const std::vector<torch::Tensor>& frames);
// Mean cosine similarity of consecutive frame embeddings.
double temporal_embedding_consistency(const std::vector<torch::Tensor>& frames, const Embedder& embedder);
// Mean cosine similarity between each frame and the prompt.
double text_alignment(const std::vector<torch::Tensor>& frames, const std::string& prompt, const Embedder& embedder);

}  // namespace avedit
