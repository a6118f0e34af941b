#include "avedit/editor.hpp"

#include "avedit/error.hpp"
#include "avedit/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace avedit {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

RegionLexicon default_region_lexicon() {
  return {{"hair", "hair"}, {"cloth", "torso"}, {"clothes", "torso"}, {"shirt", "torso"}, {"face", "face"}};
}

void EditConfig::validate() const {
  std::vector<std::string> bad;
  if (!(t_min >= 0.0 && t_min < t_max && t_max <= 1.0)) bad.push_back("need 0 <= t_min < t_max <= 1");
  if (denoise_steps < 1) bad.push_back("denoise_steps must be >= 1");
  if (!(s_T >= 0.0) || !(s_I >= 0.0)) bad.push_back("guidance scales must be >= 0");
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "invalid edit config:";
    for (const auto& b : bad) msg << " " << b << ";";
    throw ValidationError(msg.str());
  }
}

NoiseSchedule::NoiseSchedule() : log_alpha_bar_(kSteps + 1) {
  constexpr double beta_start = 1e-4, beta_end = 2e-2;
  log_alpha_bar_[0] = 0.0;
  for (int i = 1; i <= kSteps; ++i) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(i - 1) / (kSteps - 1);
    log_alpha_bar_[static_cast<size_t>(i)] = log_alpha_bar_[static_cast<size_t>(i - 1)] + std::log1p(-beta);
  }
}

double NoiseSchedule::alpha_bar_at(int n) const {
  if (n < 0 || n > kSteps) throw ContractError("noise step index out of range");
  return std::exp(log_alpha_bar_[static_cast<size_t>(n)]);
}

double NoiseSchedule::alpha_bar(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("noise level t must lie in [0,1]");
  const double pos = t * kSteps;
  const int lo = std::min(static_cast<int>(std::floor(pos)), kSteps - 1);
  const double frac = pos - lo;
  const auto l0 = log_alpha_bar_[static_cast<size_t>(lo)];
  const auto l1 = log_alpha_bar_[static_cast<size_t>(lo + 1)];
  return std::exp(l0 + frac * (l1 - l0));
}

int NoiseSchedule::step_index(double t) { return static_cast<int>(std::lround(t * kSteps)); }

torch::Tensor cfg_score(const torch::Tensor& eps_uncond, const torch::Tensor& eps_img, const torch::Tensor& eps_full,
                        double s_I, double s_T) {
  if (!eps_uncond.sizes().equals(eps_img.sizes()) || !eps_img.sizes().equals(eps_full.sizes())) {
    throw DimensionError("cfg_score: prediction shapes differ");
  }
  // Expanded weights so (1,1) and (0,0) return eps_full / eps_uncond bit-exactly.
  return (1.0 - s_I) * eps_uncond + (s_I - s_T) * eps_img + s_T * eps_full;
}

torch::Tensor make_noisy_latent(const torch::Tensor& z0, double t, const torch::Tensor& noise,
                                const NoiseSchedule& schedule) {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("noise level t must lie in [0,1]");
  if (!z0.sizes().equals(noise.sizes())) throw DimensionError("noise shape differs from latent shape");
  if (t == 0.0) return z0.clone();
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor ddim_edit_at(const torch::Tensor& image_cond, const torch::Tensor& init_render, const EditConfig& config,
                           Denoiser& denoiser, const LatentCodec& codec, double t, const torch::Tensor& noise,
                           DdimTrace* trace) {
  config.validate();
  if (!image_cond.sizes().equals(init_render.sizes())) throw DimensionError("ddim_edit: image sizes differ");
  static const NoiseSchedule schedule;

  const int start = NoiseSchedule::step_index(t);
  const auto z0 = codec.encode(init_render);
  auto z = make_noisy_latent(z0, static_cast<double>(start) / NoiseSchedule::kSteps, noise, schedule);

  // Evenly spaced step indices from `start` down to 0, duplicates removed.
  std::vector<int> indices;
  const int k = config.denoise_steps;
  for (int i = 0; i <= k; ++i) {
    const int n = static_cast<int>(std::lround(static_cast<double>(start) * (k - i) / k));
    if (indices.empty() || indices.back() != n) indices.push_back(n);
  }
  if (trace) {
    trace->t = t;
    trace->step_indices = indices;
    trace->latents.clear();
  }

  for (size_t i = 0; i + 1 < indices.size(); ++i) {
    const int from = indices[i];
    const int to = indices[i + 1];
    if (trace) trace->latents.push_back(z.clone());
    const double tf = static_cast<double>(from) / NoiseSchedule::kSteps;
    torch::Tensor eps;
    try {
      const auto eu = denoiser.predict(z, tf, Variant::Uncond, image_cond, config.instruction);
      const auto ei = denoiser.predict(z, tf, Variant::Image, image_cond, config.instruction);
      const auto ef = denoiser.predict(z, tf, Variant::Full, image_cond, config.instruction);
      eps = cfg_score(eu, ei, ef, config.s_I, config.s_T);
    } catch (const Error& e) {
      throw Error(e.kind(), "denoise step " + std::to_string(i) + " (t index " + std::to_string(from) + "): " + e.what());
    }
    const double ab_from = schedule.alpha_bar_at(from);
    const double ab_to = schedule.alpha_bar_at(to);
    const auto x0 = (z - std::sqrt(1.0 - ab_from) * eps) / std::sqrt(ab_from);
    z = std::sqrt(ab_to) * x0 + std::sqrt(1.0 - ab_to) * eps;
  }
  if (trace) trace->latents.push_back(z.clone());
  return codec.decode(z).clamp(0.0, 1.0);
}

torch::Tensor ddim_edit(const torch::Tensor& image_cond, const torch::Tensor& init_render, const EditConfig& config,
                        Denoiser& denoiser, const LatentCodec& codec, torch::Generator& gen, DdimTrace* trace) {
  config.validate();
  const double u = torch::rand({1}, gen, torch::kFloat64).item<double>();
  const double t = config.t_min + (config.t_max - config.t_min) * u;
  const auto shape = codec.encode(init_render).sizes();
  const auto noise = torch::randn(shape, gen, init_render.options());
  return ddim_edit_at(image_cond, init_render, config, denoiser, codec, t, noise, trace);
}

ToyDenoiser::ToyDenoiser(TargetTransform transform, std::shared_ptr<const LatentCodec> codec)
    : transform_(std::move(transform)), codec_(codec ? std::move(codec) : std::make_shared<IdentityCodec>()) {}

torch::Tensor ToyDenoiser::target(const torch::Tensor& image_cond, const std::string& instruction) const {
  return transform_(image_cond, instruction, frame_);
}

torch::Tensor ToyDenoiser::predict(const torch::Tensor& z_t, double t, Variant variant, const torch::Tensor& image_cond,
                                   const std::string& instruction) {
  const double ab = schedule_.alpha_bar(t);
  if (ab >= 1.0) return torch::zeros_like(z_t);
  torch::Tensor goal;
  switch (variant) {
    case Variant::Uncond: goal = torch::zeros_like(z_t); break;
    case Variant::Image: goal = codec_->encode(image_cond); break;
    case Variant::Full: goal = codec_->encode(target(image_cond, instruction)); break;
  }
  return (z_t - std::sqrt(ab) * goal) / std::sqrt(1.0 - ab);
}

std::unique_ptr<ToyDenoiser> toy_denoiser(TargetTransform transform) {
  return std::make_unique<ToyDenoiser>(std::move(transform));
}

std::vector<HueRule> default_hue_rules() {
  return {{"blue", 120.0, "foreground"},
          {"pink", -100.0, "foreground"},
          {"green", -120.0, "foreground"},
          {"purple", 150.0, "foreground"}};
}

TargetTransform hue_rule_transform(std::vector<HueRule> rules) {
  return [rules = std::move(rules)](const torch::Tensor& image, const std::string& instruction,
                                    const FrameRecord* frame) {
    const std::string text = lower(instruction);
    auto out = image.clone();
    for (const auto& rule : rules) {
      if (text.find(lower(rule.keyword)) == std::string::npos) continue;
      const auto shifted = hue_rotate(out, rule.degrees);
      if (rule.region == "all" || frame == nullptr) {
        out = shifted;
        continue;
      }
      torch::Tensor m;
      if (rule.region == "foreground") {
        m = head_region(frame->masks) + torso_region(frame->masks);
      } else {
        auto it = frame->masks.find(rule.region);
        if (it == frame->masks.end()) throw ValidationError("toy edit rule names unknown mask '" + rule.region + "'");
        m = it->second;
      }
      out = torch::where(m.unsqueeze(-1) > 0.5, shifted, out);
    }
    return out;
  };
}

}  // namespace avedit
