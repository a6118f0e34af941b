#pragma once

#include "avedit/scene.hpp"

#include <torch/torch.h>

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace avedit {

// Ordered keyword -> mask name routing table.
using RegionLexicon = std::vector<std::pair<std::string, std::string>>;
RegionLexicon default_region_lexicon();

struct EditConfig {
  std::string instruction;
  double s_T = 12.0;
  double s_I = 1.5;
  double t_min = 0.25;
  double t_max = 0.95;
  int denoise_steps = 25;
  RegionLexicon region_lexicon = default_region_lexicon();

  // Throws ValidationError listing every violated invariant.
  void validate() const;
};

// Linear-beta schedule over 1000 virtual steps, beta in [1e-4, 2e-2].
class NoiseSchedule {
 public:
  static constexpr int kSteps = 1000;
  NoiseSchedule();
  // Cumulative signal coefficient at step index n in [0, kSteps]; index 0 is 1.
  double alpha_bar_at(int n) const;
  // Continuous in t in [0,1]: log-linear between neighbouring step indices, so
  // it is strictly decreasing and agrees with alpha_bar_at on the step grid.
  double alpha_bar(double t) const;
  static int step_index(double t);

 private:
  std::vector<double> log_alpha_bar_;  // size kSteps + 1
};

enum class Variant : uint8_t { Uncond = 0, Image = 1, Full = 2 };

// Noise predictor epsilon(z_t, t, I?, T?). Variant selects which conditions
// are active: (none, none), (I, none) or (I, T).
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual torch::Tensor predict(const torch::Tensor& z_t, double t, Variant variant, const torch::Tensor& image_cond,
                                const std::string& instruction) = 0;
  virtual bool concurrent_safe() const = 0;
  // Frame context for denoisers that key on parsing masks. Optional.
  virtual void bind_frame(const FrameRecord* /*frame*/) {}
};

class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual torch::Tensor encode(const torch::Tensor& image) const = 0;
  virtual torch::Tensor decode(const torch::Tensor& latent) const = 0;
};

// Latent space == pixel space.
class IdentityCodec final : public LatentCodec {
 public:
  torch::Tensor encode(const torch::Tensor& image) const override { return image; }
  torch::Tensor decode(const torch::Tensor& latent) const override { return latent; }
};

torch::Tensor cfg_score(const torch::Tensor& eps_uncond, const torch::Tensor& eps_img, const torch::Tensor& eps_full,
                        double s_I, double s_T);

// z_t = sqrt(abar(t)) z0 + sqrt(1 - abar(t)) noise.
torch::Tensor make_noisy_latent(const torch::Tensor& z0, double t, const torch::Tensor& noise,
                                const NoiseSchedule& schedule);

struct DdimTrace {
  double t = 0.0;
  std::vector<int> step_indices;        // source index of each update, then 0
  std::vector<torch::Tensor> latents;   // latent before each update, then final
};

// Deterministic (eta = 0) DDIM edit. Draws t ~ U[t_min, t_max] and the
// starting noise from `gen`; the image condition is `image_cond`, the
// starting latent comes from `init_render`. Output clamped to [0,1].
torch::Tensor ddim_edit(const torch::Tensor& image_cond, const torch::Tensor& init_render, const EditConfig& config,
                        Denoiser& denoiser, const LatentCodec& codec, torch::Generator& gen,
                        DdimTrace* trace = nullptr);

// Same with t and the starting noise supplied by the caller.
torch::Tensor ddim_edit_at(const torch::Tensor& image_cond, const torch::Tensor& init_render, const EditConfig& config,
                           Denoiser& denoiser, const LatentCodec& codec, double t, const torch::Tensor& noise,
                           DdimTrace* trace = nullptr);

// Target image for the toy editor: f(image_cond, instruction, bound frame or null).
using TargetTransform =
    std::function<torch::Tensor(const torch::Tensor& image, const std::string& instruction, const FrameRecord* frame)>;

// Analytic denoiser whose (I,T) prediction points at encode(target), (I,none)
// at encode(I) and (none,none) at the zero latent.
class ToyDenoiser final : public Denoiser {
 public:
  explicit ToyDenoiser(TargetTransform transform, std::shared_ptr<const LatentCodec> codec = nullptr);
  torch::Tensor predict(const torch::Tensor& z_t, double t, Variant variant, const torch::Tensor& image_cond,
                        const std::string& instruction) override;
  bool concurrent_safe() const override { return true; }
  void bind_frame(const FrameRecord* frame) override { frame_ = frame; }
  torch::Tensor target(const torch::Tensor& image_cond, const std::string& instruction) const;

 private:
  TargetTransform transform_;
  std::shared_ptr<const LatentCodec> codec_;
  NoiseSchedule schedule_;
  const FrameRecord* frame_ = nullptr;
};

std::unique_ptr<ToyDenoiser> toy_denoiser(TargetTransform transform);

// Keyword-triggered hue rotation used as the toy editor's target. Each rule
// whose keyword occurs in the instruction (case-insensitive) rotates the hue
// inside `region`: a mask name, "foreground" (head and torso labels) or
// "all". Unmatched instructions leave the image unchanged.
struct HueRule {
  std::string keyword;
  double degrees = 0.0;
  std::string region = "foreground";
};
std::vector<HueRule> default_hue_rules();
TargetTransform hue_rule_transform(std::vector<HueRule> rules);

// ---- External backend ------------------------------------------------------

struct DenoiseRequest {
  uint64_t request_id = 0;
  Variant variant = Variant::Uncond;
  float t = 0.f;
  torch::Tensor latent;
  torch::Tensor image;  // may be undefined (no image condition)
  std::string instruction;
};

struct DenoiseResponse {
  uint64_t request_id = 0;
  Variant variant = Variant::Uncond;
  float t = 0.f;
  torch::Tensor eps;
};

// Message bodies (without the u32 length prefix).
std::vector<uint8_t> encode_request(const DenoiseRequest& request);
DenoiseRequest decode_request(const std::vector<uint8_t>& body);
std::vector<uint8_t> encode_response(const DenoiseResponse& response);
DenoiseResponse decode_response(const std::vector<uint8_t>& body);

// Length-prefixed framing over a connected stream socket.
void write_frame(int fd, const std::vector<uint8_t>& body);
// Returns false on orderly EOF before a frame starts.
bool read_frame(int fd, std::vector<uint8_t>& body);

// Answers requests on `fd` with `denoiser` until the peer closes.
void serve_denoiser(int fd, Denoiser& denoiser);

// Client for an instruction-conditioned diffusion service. Address forms:
// "unix:/path/to/socket" or "host:port". Calls are serialised.
class ExternalDenoiser final : public Denoiser {
 public:
  explicit ExternalDenoiser(std::string address);
  ~ExternalDenoiser() override;
  ExternalDenoiser(const ExternalDenoiser&) = delete;
  ExternalDenoiser& operator=(const ExternalDenoiser&) = delete;

  torch::Tensor predict(const torch::Tensor& z_t, double t, Variant variant, const torch::Tensor& image_cond,
                        const std::string& instruction) override;
  bool concurrent_safe() const override { return false; }

 private:
  void connect();
  std::string address_;
  int fd_ = -1;
  uint64_t next_id_ = 1;
  std::mutex mutex_;
};

inline constexpr const char* kEditorSocketEnv = "AVEDIT_EDITOR_SOCKET";

}  // namespace avedit
