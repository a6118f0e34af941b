#include "avedit/renderer.hpp"

#include "avedit/error.hpp"
#include "avedit/image.hpp"

namespace avedit {

namespace F = torch::nn::functional;

namespace {

constexpr int64_t kCullRadius = 2;  // low-res pixels; covers the upsampler's receptive field

torch::Tensor eigen_to_tensor(const Eigen::Matrix3d& m) {
  auto t = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t[r][c] = m(r, c);
  return t;
}

}  // namespace

RaySamples sample_along_rays(const RayBatch& batch, bool stratified, torch::Generator* gen) {
  if (!(batch.near < batch.far)) throw ContractError("ray batch needs near < far");
  if (batch.sample_count < 2) throw ContractError("ray batch needs at least 2 samples");
  const auto opts = batch.origins.options();
  const int64_t rays = batch.origins.size(0);
  const int64_t s = batch.sample_count;

  auto lo = torch::full({rays}, batch.near, opts);
  auto hi = torch::full({rays}, batch.far, opts);
  if (batch.guide_depth) {
    const auto d = batch.guide_depth->to(opts.dtype()).view({rays});
    const auto glo = (d - batch.guide_halfwidth).clamp(batch.near, batch.far);
    const auto ghi = (d + batch.guide_halfwidth).clamp(batch.near, batch.far);
    const auto use = (d > 0) & (ghi - glo > 1e-6);
    lo = torch::where(use, glo, lo);
    hi = torch::where(use, ghi, hi);
  }
  const auto bin = ((hi - lo) / static_cast<double>(s)).unsqueeze(1);
  auto offset = torch::arange(s, opts).unsqueeze(0).expand({rays, s});
  if (stratified) {
    auto u = gen ? torch::rand({rays, s}, *gen, opts) : torch::rand({rays, s}, opts);
    offset = offset + u;
  }
  RaySamples out;
  out.t = lo.unsqueeze(1) + offset * bin;
  out.delta = torch::cat({out.t.narrow(1, 1, s - 1) - out.t.narrow(1, 0, s - 1),
                          hi.unsqueeze(1) - out.t.narrow(1, s - 1, 1)},
                         1);
  return out;
}

VolumeRenderResult volume_render(const torch::Tensor& sigma, const torch::Tensor& feature, const torch::Tensor& delta) {
  if (!sigma.sizes().equals(delta.sizes()) || feature.dim() != 3 || feature.size(0) != sigma.size(0) ||
      feature.size(1) != sigma.size(1)) {
    throw DimensionError("volume_render expects sigma/delta [R,S] and feature [R,S,F]");
  }
  if ((sigma < 0).any().item<bool>()) throw ContractError("volume_render received negative density");
  const auto tau = sigma * delta;
  const auto alpha = 1.0 - torch::exp(-tau);
  const auto transmittance = torch::exp(-(torch::cumsum(tau, 1) - tau));
  VolumeRenderResult out;
  out.weights = transmittance * alpha;
  out.transmittance = transmittance;
  out.feature = (out.weights.unsqueeze(-1) * feature).sum(1);
  out.opacity = out.weights.sum(1);
  return out;
}

torch::Tensor upsample(const torch::Tensor& feature_map, Upsampler& upsampler) {
  if (feature_map.dim() != 3) throw DimensionError("feature map must be [F,h,w]");
  return upsampler->forward(feature_map.unsqueeze(0)).squeeze(0).permute({1, 2, 0});
}

torch::Tensor composite(const torch::Tensor& head_rgb, const torch::Tensor& torso_rgb, const torch::Tensor& s_head,
                        const torch::Tensor& s_torso, const torch::Tensor& background) {
  if (!head_rgb.sizes().equals(torso_rgb.sizes()) || head_rgb.dim() != 3 || head_rgb.size(2) != 3) {
    throw DimensionError("composite: branch images differ in size");
  }
  if (s_head.size(0) != head_rgb.size(0) || s_head.size(1) != head_rgb.size(1) || !s_head.sizes().equals(s_torso.sizes())) {
    throw DimensionError("composite: mask size differs from image size");
  }
  if ((s_head * s_torso).ne(0).any().item<bool>()) throw ContractError("composite: head and torso masks overlap");
  const auto sh = s_head.unsqueeze(-1);
  const auto st = s_torso.unsqueeze(-1);
  const auto bg = background.dim() == 1 ? background.view({1, 1, 3}) : background;
  return sh * head_rgb + st * torso_rgb + (1.0 - sh - st) * bg;
}

RenderOptions render_options_for(const Dataset& dataset, int samples, double guide_halfwidth_fraction) {
  RenderOptions o;
  o.samples = samples;
  o.guide_halfwidth = guide_halfwidth_fraction * dataset.scene_radius;
  o.near = dataset.near;
  o.far = dataset.far;
  o.background = dataset.background;
  return o;
}

RenderRequest request_for(const FrameRecord& frame) {
  RenderRequest r;
  r.head_camera = frame.camera;
  r.torso_pose = frame.torso_pose();
  r.z_exp = frame.z_exp;
  r.image_size = frame.height();
  r.masks = frame.masks;
  r.guide_depth = frame.guide_depth;
  return r;
}

RegionRender render_region(PortraitModel& model, const Camera& camera, int image_size, const LatentBundle& codes,
                           const RenderOptions& options, const std::optional<torch::Tensor>& region_mask,
                           const std::optional<torch::Tensor>& guide_depth, torch::Generator* gen) {
  const int factor = model->upsampler->factor();
  if (image_size % factor != 0) throw DimensionError("image size must be divisible by the upsample factor");
  const int64_t low = image_size / factor;
  const auto dtype = model->field->parameters().front().scalar_type();
  const auto opts = torch::TensorOptions().dtype(dtype);

  // Low-resolution ray grid at block centres of the full-resolution image.
  const auto k = camera.intrinsics;
  const auto centers = (torch::arange(low, torch::kFloat64) + 0.5) * static_cast<double>(factor);
  const auto grid = torch::meshgrid({centers, centers}, "ij");
  const auto dir_cam = torch::stack({(grid[1] - k.cx) / k.fx, (grid[0] - k.cy) / k.fy, torch::ones({low, low}, torch::kFloat64)}, -1)
                           .view({low * low, 3});
  const auto rot = eigen_to_tensor(camera.pose.topLeftCorner<3, 3>());
  auto dirs = torch::matmul(dir_cam, rot.t());
  dirs = dirs / dirs.norm(2, -1, true);
  const Eigen::Vector3d o = camera.pose.topRightCorner<3, 1>();
  auto origins = torch::tensor({o.x(), o.y(), o.z()}, torch::kFloat64).view({1, 3}).expand({low * low, 3});

  std::optional<torch::Tensor> guide_low;
  torch::Tensor active;  // [low*low] bool
  if (region_mask) {
    const auto coverage = block_mean(region_mask->to(torch::kFloat64), factor);
    const auto covered = (coverage > 0).to(torch::kFloat64);
    if (options.cull_outside_region) {
      active = F::max_pool2d(covered.view({1, 1, low, low}),
                             F::MaxPool2dFuncOptions(2 * kCullRadius + 1).stride(1).padding(kCullRadius))
                   .view({low * low}) > 0;
    }
    if (guide_depth && options.use_guide_depth) {
      const auto depth = guide_depth->to(torch::kFloat64) * region_mask->to(torch::kFloat64);
      const auto mean_depth = torch::where(covered > 0, block_mean(depth, factor) / coverage.clamp_min(1e-12),
                                           torch::zeros_like(coverage));
      // Blocks next to the region borrow the mean depth of covered neighbours.
      const auto pool = F::AvgPool2dFuncOptions(2 * kCullRadius + 1).stride(1).padding(kCullRadius);
      const auto num = F::avg_pool2d(mean_depth.view({1, 1, low, low}), pool).view({low, low});
      const auto den = F::avg_pool2d(covered.view({1, 1, low, low}), pool).view({low, low});
      const auto filled = torch::where(den > 0, num / den.clamp_min(1e-12), torch::zeros_like(num));
      guide_low = torch::where(covered > 0, mean_depth, filled).view({low * low});
    }
  } else if (guide_depth && options.use_guide_depth) {
    guide_low = block_mean(guide_depth->to(torch::kFloat64), factor).view({low * low});
  }

  torch::Tensor index;
  if (active.defined()) {
    index = active.nonzero().view({-1});
    dirs = dirs.index_select(0, index);
    origins = origins.index_select(0, index);
    if (guide_low) guide_low = guide_low->index_select(0, index);
  }

  RayBatch batch;
  batch.origins = origins.to(dtype);
  batch.directions = dirs.to(dtype);
  batch.near = options.near;
  batch.far = options.far;
  batch.sample_count = options.samples;
  if (guide_low) batch.guide_depth = guide_low->to(dtype);
  batch.guide_halfwidth = options.guide_halfwidth;

  const int64_t rays = batch.origins.size(0);
  const int64_t fdim = model->net_spec().feature_dim;
  torch::Tensor ray_feature, ray_opacity;
  if (rays > 0) {
    const auto samples = sample_along_rays(batch, options.stratified, gen);
    const int64_t s = options.samples;
    const auto points = (batch.origins.unsqueeze(1) + samples.t.unsqueeze(-1) * batch.directions.unsqueeze(1)).view({rays * s, 3});
    const auto view_dirs = batch.directions.unsqueeze(1).expand({rays, s, 3}).reshape({rays * s, 3});
    const auto w = model->deform_latent(codes.z_exp);
    const auto x_hat = model->canonicalize(points, w);
    const auto fo = model->field->forward(x_hat, view_dirs, codes.z_id, codes.z_exp, codes.z_ill);
    const auto vr = volume_render(fo.sigma.view({rays, s}), fo.feature.view({rays, s, fdim}), samples.delta);
    ray_feature = vr.feature;
    ray_opacity = vr.opacity;
  } else {
    ray_feature = torch::zeros({0, fdim}, opts);
    ray_opacity = torch::zeros({0}, opts);
  }

  torch::Tensor feature_rows = ray_feature;
  torch::Tensor opacity_rows = ray_opacity;
  if (index.defined()) {
    feature_rows = torch::zeros({low * low, fdim}, opts).index_add(0, index, ray_feature);
    opacity_rows = torch::zeros({low * low}, opts).index_add(0, index, ray_opacity);
  }

  RegionRender out;
  out.feature_map = feature_rows.t().reshape({fdim, low, low});
  out.opacity_map = opacity_rows.view({low, low});
  out.rgb = upsample(out.feature_map, model->upsampler);
  return out;
}

FrameRender render_frame(const RenderRequest& request, PortraitModel& head, PortraitModel& torso, SubjectCodes& codes,
                         const RenderOptions& options, torch::Generator* gen) {
  if (request.z_exp.numel() != head->dims().expr) {
    throw DimensionError("z_exp has " + std::to_string(request.z_exp.numel()) + " entries, model expects " +
                         std::to_string(head->dims().expr));
  }
  const auto dtype = head->field->parameters().front().scalar_type();
  LatentBundle bundle{codes->z_id.to(dtype), request.z_exp.to(dtype), codes->z_ill.to(dtype), {}};

  std::optional<torch::Tensor> head_mask, torso_mask;
  if (request.masks) {
    head_mask = head_region(*request.masks);
    torso_mask = torso_region(*request.masks);
  }

  FrameRender out;
  bundle.w = head->deform_latent(bundle.z_exp);
  out.head = render_region(head, request.head_camera, request.image_size, bundle, options, head_mask,
                           request.guide_depth, gen);
  const Camera torso_camera{request.torso_pose, request.head_camera.intrinsics};
  bundle.w = torso->deform_latent(bundle.z_exp);
  out.torso = render_region(torso, torso_camera, request.image_size, bundle, options, torso_mask,
                            request.guide_depth, gen);

  if (head_mask) {
    out.s_head = head_mask->to(dtype);
    out.s_torso = torso_mask->to(dtype);
  } else {
    // No parsing available: derive the partition from rendered opacity.
    const int factor = head->upsampler->factor();
    auto up = [factor](const torch::Tensor& m) { return m.repeat_interleave(factor, 0).repeat_interleave(factor, 1); };
    const auto h = (up(out.head.opacity_map.detach()) > 0.5).to(dtype);
    const auto t = (up(out.torso.opacity_map.detach()) > 0.5).to(dtype) * (1.0 - h);
    out.s_head = h;
    out.s_torso = t;
  }
  const auto bg = torch::tensor({options.background[0], options.background[1], options.background[2]}, torch::kFloat32).to(dtype);
  out.rgb = composite(out.head.rgb, out.torso.rgb, out.s_head, out.s_torso, bg);
  return out;
}

FrameRender render_frame(const FrameRecord& frame, PortraitModel& head, PortraitModel& torso, SubjectCodes& codes,
                         const RenderOptions& options, torch::Generator* gen) {
  return render_frame(request_for(frame), head, torso, codes, options, gen);
}

}  // namespace avedit
