#pragma once

#include "avedit/fields.hpp"
#include "avedit/renderer.hpp"
#include "avedit/scene.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace avedit {

// Mean squared error over pixels and channels.
torch::Tensor photometric_loss(const torch::Tensor& rendered, const torch::Tensor& target);

// Multi-level feature stack phi_l. Inputs are [H,W,3] images.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<torch::Tensor> features(const torch::Tensor& image) const = 0;
  virtual int levels() const = 0;
};

// Fixed random strided 3x3 convolutions with ReLU between levels. Weights are
// drawn once from `seed` and never trained.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed = 7, std::vector<int> channels = {16, 32, 64});
  std::vector<torch::Tensor> features(const torch::Tensor& image) const override;
  int levels() const override { return static_cast<int>(weights_.size()); }

 private:
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

struct PerceptualConfig {
  std::shared_ptr<const FeatureExtractor> extractor;
  std::vector<double> layer_weights;  // one per level; empty means all 1.0

  void validate() const;
};

PerceptualConfig default_perceptual_config();

// sum_l lambda_l * mean((phi_l(a) - phi_l(b))^2).
torch::Tensor perceptual_loss(const torch::Tensor& rendered, const torch::Tensor& target,
                              const PerceptualConfig& config);

struct LossTerms {
  torch::Tensor total;
  torch::Tensor photometric;
  torch::Tensor perceptual;
};

// photometric + alpha * perceptual.
LossTerms total_loss(const torch::Tensor& rendered, const torch::Tensor& target, double alpha,
                     const PerceptualConfig& config);

enum class Stage { Reconstruct, Edit };
std::string to_string(Stage s);

struct TrainSchedule {
  Stage stage = Stage::Reconstruct;
  int total_iters = 4000;
  double learning_rate = 1e-4;
  double loss_alpha = 0.5;
  int eval_every = 500;
  // Every `holdout_stride`-th frame (offset stride/2) is kept out of training.
  // 0 trains on every frame.
  int holdout_stride = 5;
  uint64_t seed = 0;

  void validate() const;
};

// Frame indices used for optimisation / for evaluation.
std::vector<int> training_indices(int n_frames, int holdout_stride);
std::vector<int> holdout_indices(int n_frames, int holdout_stride);

struct ModelConfig {
  EncodingConfig encoding;
  FieldNetSpec net_spec;
  LatentDims dims;
};

// Head model, torso model and the shared subject codes.
struct ModelSet {
  PortraitModel head{nullptr};
  PortraitModel torso{nullptr};
  SubjectCodes codes{nullptr};

  // Deep copy of every parameter.
  ModelSet clone() const;
  uint64_t hash() const;
  // Digest of D_theta of both regions plus the torso deformation latent.
  uint64_t deformation_hash() const;
  void save(const std::filesystem::path& dir) const;
  static ModelSet load(const std::filesystem::path& dir);
};

ModelSet make_model_set(const ModelConfig& config, int expr_dim, uint64_t seed);

struct StepRecord {
  int iter = 0;
  int frame = -1;
  double loss = 0.0;
  double photometric = 0.0;
  double perceptual = 0.0;
};

// One optimiser over the parameters a stage is allowed to change. In the
// reconstruction stage that is everything; in the edit stage only F_theta and
// U of both regions, with D_theta, the torso latent and the subject codes
// frozen.
class Trainer {
 public:
  Trainer(ModelSet models, const TrainSchedule& schedule, const RenderOptions& options,
          PerceptualConfig perceptual = default_perceptual_config());

  // Renders `frame`, compares against its edit_target and steps the optimiser.
  // Throws NumericError on a non-finite loss (after writing a snapshot when a
  // diagnostic directory is set).
  StepRecord step(const FrameRecord& frame);

  // Uniform draw from `pool` using the trainer's generator.
  int sample_frame(const std::vector<int>& pool);

  ModelSet& models() { return models_; }
  int iteration() const { return iter_; }
  void set_diagnostic_dir(std::filesystem::path dir) { diagnostic_dir_ = std::move(dir); }

 private:
  ModelSet models_;
  TrainSchedule schedule_;
  RenderOptions options_;
  PerceptualConfig perceptual_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  torch::Generator gen_;
  int iter_ = 0;
  std::optional<std::filesystem::path> diagnostic_dir_;
};

// Deterministic (non-stratified) render of one frame without gradients.
torch::Tensor render_eval(const FrameRecord& frame, ModelSet& models, const RenderOptions& options);

// Mean PSNR of deterministic renders against image_gt over `indices`.
double mean_psnr(const Dataset& dataset, ModelSet& models, const std::vector<int>& indices,
                 const RenderOptions& options);

struct FitReport {
  std::vector<StepRecord> steps;
  std::vector<std::pair<int, double>> heldout_psnr;  // (iteration, dB)
  double final_heldout_psnr = 0.0;
  double final_train_psnr = 0.0;
};

using LogSink = std::function<void(const std::string& json_line)>;

// Portrait reconstruction against image_gt (edit_target must equal image_gt).
FitReport fit_reconstruction(const Dataset& dataset, ModelSet& models, const TrainSchedule& schedule,
                             const RenderOptions& options, const LogSink& log = nullptr,
                             PerceptualConfig perceptual = default_perceptual_config());

}  // namespace avedit
