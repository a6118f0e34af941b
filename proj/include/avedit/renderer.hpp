#pragma once

#include "avedit/fields.hpp"
#include "avedit/scene.hpp"

#include <torch/torch.h>

#include <optional>

namespace avedit {

struct RayBatch {
  torch::Tensor origins;     // [R,3]
  torch::Tensor directions;  // [R,3], unit
  double near = 0.0;
  double far = 1.0;
  int sample_count = 64;
  // Per-ray surface depth; entries <= 0 fall back to [near, far].
  std::optional<torch::Tensor> guide_depth;
  double guide_halfwidth = 0.15;
};

struct RaySamples {
  torch::Tensor t;      // [R,S], strictly increasing along S
  torch::Tensor delta;  // [R,S]
};

// Stratified samples inside [depth-h, depth+h] clamped to [near, far] for
// guided rays, else inside [near, far]. With `stratified` false the samples
// sit on the left edges of equal bins. delta_last runs to the interval end.
RaySamples sample_along_rays(const RayBatch& batch, bool stratified, torch::Generator* gen = nullptr);

struct VolumeRenderResult {
  torch::Tensor feature;  // [R,F]
  torch::Tensor opacity;  // [R]
  torch::Tensor weights;  // [R,S]
  torch::Tensor transmittance;  // [R,S]
};

// w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j).
// sigma [R,S] >= 0, feature [R,S,F], delta [R,S].
VolumeRenderResult volume_render(const torch::Tensor& sigma, const torch::Tensor& feature, const torch::Tensor& delta);

// Feature map [F,h,w] -> RGB [h*f, w*f, 3].
torch::Tensor upsample(const torch::Tensor& feature_map, Upsampler& upsampler);

// I_r = S_head*head + S_torso*torso + (1 - S_head - S_torso)*background.
// Images [H,W,3], masks [H,W], background [3] or [H,W,3].
torch::Tensor composite(const torch::Tensor& head_rgb, const torch::Tensor& torso_rgb, const torch::Tensor& s_head,
                        const torch::Tensor& s_torso, const torch::Tensor& background);

struct RenderOptions {
  int samples = 64;
  double guide_halfwidth = 0.15;
  double near = 1.8;
  double far = 4.6;
  std::array<float, 3> background = {0.f, 0.f, 0.f};
  bool stratified = false;
  bool use_guide_depth = true;
  // Skip low-resolution rays farther than the upsampler's receptive field
  // from the region; output inside the region is unchanged.
  bool cull_outside_region = true;
};

RenderOptions render_options_for(const Dataset& dataset, int samples = 64, double guide_halfwidth_fraction = 0.15);

// Everything a frame render needs besides the models.
struct RenderRequest {
  Camera head_camera;
  Pose torso_pose = Pose::Identity();
  torch::Tensor z_exp;
  int image_size = 0;
  std::optional<MaskSet> masks;
  std::optional<torch::Tensor> guide_depth;
};

RenderRequest request_for(const FrameRecord& frame);

struct RegionRender {
  torch::Tensor feature_map;  // [F,h,w]
  torch::Tensor opacity_map;  // [h,w]
  torch::Tensor rgb;          // [H,W,3]
};

struct FrameRender {
  RegionRender head;
  RegionRender torso;
  torch::Tensor s_head;  // masks used for compositing, [H,W]
  torch::Tensor s_torso;
  torch::Tensor rgb;  // composited [H,W,3]
};

// Renders one region's model. `region_mask` [H,W] drives depth guidance and
// ray culling when present.
RegionRender render_region(PortraitModel& model, const Camera& camera, int image_size, const LatentBundle& codes,
                           const RenderOptions& options, const std::optional<torch::Tensor>& region_mask,
                           const std::optional<torch::Tensor>& guide_depth, torch::Generator* gen = nullptr);

FrameRender render_frame(const RenderRequest& request, PortraitModel& head, PortraitModel& torso, SubjectCodes& codes,
                         const RenderOptions& options, torch::Generator* gen = nullptr);
FrameRender render_frame(const FrameRecord& frame, PortraitModel& head, PortraitModel& torso, SubjectCodes& codes,
                         const RenderOptions& options, torch::Generator* gen = nullptr);

}  // namespace avedit
