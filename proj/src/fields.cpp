#include "avedit/fields.hpp"

#include "avedit/error.hpp"
#include "avedit/hash.hpp"

#include <cmath>
#include <numbers>

namespace avedit {

namespace F = torch::nn::functional;

std::string to_string(Region r) { return r == Region::Head ? "head" : "torso"; }

Region region_from_string(const std::string& s) {
  if (s == "head") return Region::Head;
  if (s == "torso") return Region::Torso;
  throw ManifestError("unknown region tag '" + s + "'");
}

int64_t encoded_dim(int64_t d, int frequencies, bool include_raw) {
  return d * ((include_raw ? 1 : 0) + 2 * frequencies);
}

torch::Tensor pos_encode(const torch::Tensor& v, int frequencies, bool include_raw) {
  std::vector<torch::Tensor> parts;
  parts.reserve(static_cast<size_t>(2 * frequencies + 1));
  if (include_raw) parts.push_back(v);
  for (int k = 0; k < frequencies; ++k) {
    const auto scaled = v * (std::ldexp(1.0, k) * std::numbers::pi);
    parts.push_back(torch::sin(scaled));
    parts.push_back(torch::cos(scaled));
  }
  if (parts.empty()) {
    auto shape = v.sizes().vec();
    shape.back() = 0;
    return v.new_empty(shape);
  }
  return torch::cat(parts, -1);
}

namespace {

void check_last_dim(const torch::Tensor& t, int64_t expected, const char* what) {
  if (t.size(-1) != expected) {
    throw DimensionError(std::string(what) + " has trailing dim " + std::to_string(t.size(-1)) + ", expected " +
                         std::to_string(expected));
  }
}

// Broadcast a per-frame code [D] (or already [N,D]) to N rows.
torch::Tensor rows(const torch::Tensor& code, int64_t n) {
  if (code.dim() == 1) return code.unsqueeze(0).expand({n, code.size(0)});
  return code;
}

}  // namespace

DeformNetImpl::DeformNetImpl(int frequencies, bool include_raw, int latent_dim, int layers, int width)
    : frequencies_(frequencies), include_raw_(include_raw), latent_dim_(latent_dim) {
  if (layers < 1 || width < 1) throw ValidationError("deformation net needs >= 1 layer of width >= 1");
  hidden_ = register_module("hidden", torch::nn::ModuleList());
  int64_t in = encoded_dim(3, frequencies, include_raw) + latent_dim;
  for (int i = 0; i < layers - 1; ++i) {
    hidden_->push_back(torch::nn::Linear(in, width));
    in = width;
  }
  out_ = register_module("out", torch::nn::Linear(in, 3));
  torch::NoGradGuard ng;
  out_->weight.zero_();
  out_->bias.zero_();
}

torch::Tensor DeformNetImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
  check_last_dim(x, 3, "deform input point");
  check_last_dim(w, latent_dim_, "deformation latent");
  auto h = torch::cat({pos_encode(x, frequencies_, include_raw_), rows(w, x.size(0))}, -1);
  for (const auto& layer : *hidden_) h = F::softplus(layer->as<torch::nn::Linear>()->forward(h));
  return out_->forward(h);
}

RadianceFieldImpl::RadianceFieldImpl(const EncodingConfig& enc, const FieldNetSpec& spec, const LatentDims& dims)
    : enc_(enc), dims_(dims), trunk_width_(spec.trunk_width) {
  if (spec.trunk_layers < 1 || spec.trunk_width < 1 || spec.head_layers < 1 || spec.head_width < 1 ||
      spec.feature_dim < 1) {
    throw ValidationError("field net widths and depths must be >= 1");
  }
  trunk_ = register_module("trunk", torch::nn::ModuleList());
  int64_t in = encoded_dim(3, enc.pos_field, enc.include_raw) + dims.id;
  for (int i = 0; i < spec.trunk_layers; ++i) {
    trunk_->push_back(torch::nn::Linear(in, spec.trunk_width));
    in = spec.trunk_width;
  }
  trunk_out_ = register_module("trunk_out", torch::nn::Linear(spec.trunk_width, 1 + spec.trunk_width));

  head_ = register_module("head", torch::nn::ModuleList());
  in = spec.trunk_width + encoded_dim(3, enc.dir, enc.include_raw) + dims.expr + dims.ill;
  for (int i = 0; i < spec.head_layers; ++i) {
    const int64_t out = (i + 1 == spec.head_layers) ? spec.feature_dim : spec.head_width;
    head_->push_back(torch::nn::Linear(in, out));
    in = out;
  }
}

torch::Tensor RadianceFieldImpl::trunk_forward(const torch::Tensor& x_hat, const torch::Tensor& z_id) {
  check_last_dim(x_hat, 3, "canonical point");
  check_last_dim(z_id, dims_.id, "z_id");
  auto h = torch::cat({pos_encode(x_hat, enc_.pos_field, enc_.include_raw), rows(z_id, x_hat.size(0))}, -1);
  for (const auto& layer : *trunk_) h = torch::relu(layer->as<torch::nn::Linear>()->forward(h));
  return trunk_out_->forward(h);
}

torch::Tensor RadianceFieldImpl::density(const torch::Tensor& x_hat, const torch::Tensor& z_id) {
  return F::softplus(trunk_forward(x_hat, z_id).select(-1, 0));
}

FieldOutput RadianceFieldImpl::forward(const torch::Tensor& x_hat, const torch::Tensor& dir, const torch::Tensor& z_id,
                                       const torch::Tensor& z_exp, const torch::Tensor& z_ill) {
  check_last_dim(dir, 3, "view direction");
  check_last_dim(z_exp, dims_.expr, "z_exp");
  check_last_dim(z_ill, dims_.ill, "z_ill");
  const auto t = trunk_forward(x_hat, z_id);
  const int64_t n = x_hat.size(0);
  FieldOutput out;
  out.sigma = F::softplus(t.select(-1, 0));
  auto h = torch::cat({t.narrow(-1, 1, trunk_width_), pos_encode(dir, enc_.dir, enc_.include_raw), rows(z_exp, n),
                       rows(z_ill, n)},
                      -1);
  const auto count = static_cast<int64_t>(head_->size());
  for (int64_t i = 0; i < count; ++i) {
    h = head_[static_cast<size_t>(i)]->as<torch::nn::Linear>()->forward(h);
    if (i + 1 < count) h = torch::relu(h);
  }
  out.feature = h;
  return out;
}

UpsamplerImpl::UpsamplerImpl(int feature_dim, int width, int factor) : feature_dim_(feature_dim), factor_(factor) {
  if (factor < 1 || (factor & (factor - 1)) != 0) throw ValidationError("upsample factor must be a power of two");
  in_ = register_module("in", torch::nn::Conv2d(torch::nn::Conv2dOptions(feature_dim, width, 3).padding(1)));
  stages_ = register_module("stages", torch::nn::ModuleList());
  for (int f = factor; f > 1; f /= 2) {
    stages_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(width, width, 3).padding(1)));
  }
  out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 3, 1)));
  torch::NoGradGuard ng;
  out_->weight.zero_();
  out_->bias.zero_();
}

torch::Tensor UpsamplerImpl::forward(const torch::Tensor& features) {
  if (features.dim() != 4 || features.size(1) != feature_dim_) {
    throw DimensionError("upsampler expects [B," + std::to_string(feature_dim_) + ",h,w] features");
  }
  auto h = torch::relu(in_->forward(features));
  for (const auto& stage : *stages_) {
    h = h.repeat_interleave(2, 2).repeat_interleave(2, 3);
    h = torch::relu(stage->as<torch::nn::Conv2d>()->forward(h));
  }
  return torch::sigmoid(out_->forward(h));
}

PortraitModelImpl::PortraitModelImpl(Region region, const EncodingConfig& enc, const FieldNetSpec& spec,
                                     const LatentDims& dims)
    : region_(region), enc_(enc), spec_(spec), dims_(dims) {
  if (enc.pos_deform < 1 || enc.pos_field < 1 || enc.dir < 1) throw ValidationError("encoding frequencies must be >= 1");
  const int latent = region == Region::Head ? dims.expr : dims.torso_w;
  deform_net = register_module("deform", DeformNet(enc.pos_deform, enc.include_raw, latent, spec.deform_layers,
                                                   spec.deform_width));
  field = register_module("field", RadianceField(enc, spec, dims));
  upsampler = register_module("upsampler", Upsampler(spec.feature_dim, spec.upsampler_width, spec.upsample_factor));
  if (region == Region::Torso) {
    torso_w = register_parameter("torso_w", torch::randn({dims.torso_w}) * 0.01);
  }
}

torch::Tensor PortraitModelImpl::deform(const torch::Tensor& x, const torch::Tensor& w) { return deform_net->forward(x, w); }

torch::Tensor PortraitModelImpl::canonicalize(const torch::Tensor& x, const torch::Tensor& w) {
  return x + deform(x, w);
}

torch::Tensor PortraitModelImpl::deform_latent(const torch::Tensor& z_exp) const {
  return region_ == Region::Head ? z_exp : torso_w;
}

std::vector<torch::Tensor> PortraitModelImpl::appearance_parameters() {
  auto out = field->parameters();
  for (auto& p : upsampler->parameters()) out.push_back(p);
  return out;
}

std::vector<torch::Tensor> PortraitModelImpl::deformation_parameters() {
  auto out = deform_net->parameters();
  if (torso_w.defined()) out.push_back(torso_w);
  return out;
}

SubjectCodesImpl::SubjectCodesImpl(int id_dim, int ill_dim) {
  z_id = register_parameter("z_id", torch::randn({id_dim}) * 0.01);
  z_ill = register_parameter("z_ill", torch::randn({ill_dim}) * 0.01);
}

PortraitModel make_portrait_model(Region region, const EncodingConfig& enc, const FieldNetSpec& spec,
                                  const LatentDims& dims, uint64_t seed) {
  torch::manual_seed(seed);
  return PortraitModel(region, enc, spec, dims);
}

SubjectCodes make_subject_codes(const LatentDims& dims, uint64_t seed) {
  torch::manual_seed(seed);
  return SubjectCodes(dims.id, dims.ill);
}

uint64_t parameter_hash(const torch::nn::Module& module, const std::string& prefix) {
  Fnv1a h;
  for (const auto& item : module.named_parameters(true)) {
    if (!prefix.empty() && item.key().rfind(prefix, 0) != 0) continue;
    h.update(item.key());
    h.update(item.value());
  }
  return h.digest();
}

uint64_t tensors_hash(const std::vector<torch::Tensor>& tensors) {
  Fnv1a h;
  for (const auto& t : tensors) h.update(t);
  return h.digest();
}

}  // namespace avedit
