#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

namespace avedit {

struct EncodingConfig {
  int pos_deform = 4;  // max frequency count for deformation input
  int pos_field = 8;   // for canonical location
  int dir = 4;         // for view direction
  bool include_raw = true;
  bool operator==(const EncodingConfig&) const = default;
};

struct FieldNetSpec {
  int trunk_layers = 10;
  int trunk_width = 64;
  int head_layers = 3;
  int head_width = 32;
  int feature_dim = 16;
  int deform_layers = 4;
  int deform_width = 32;
  int upsampler_width = 32;
  int upsample_factor = 4;
  bool operator==(const FieldNetSpec&) const = default;
};

struct LatentDims {
  int id = 100;
  int expr = 8;
  int ill = 8;
  int torso_w = 32;
  bool operator==(const LatentDims&) const = default;
};

enum class Region { Head, Torso };
std::string to_string(Region r);
Region region_from_string(const std::string& s);

// Conditioning codes for one render. For the head model `w` is z_exp; for the
// torso it is the model's shared trainable latent.
struct LatentBundle {
  torch::Tensor z_id;
  torch::Tensor z_exp;
  torch::Tensor z_ill;
  torch::Tensor w;
};

// Fourier features over the last axis: [v?] ++ [sin(2^k pi v), cos(2^k pi v)]_k.
torch::Tensor pos_encode(const torch::Tensor& v, int frequencies, bool include_raw);
int64_t encoded_dim(int64_t d, int frequencies, bool include_raw);

// D_theta: world point + deformation latent -> displacement. Softplus hidden
// activations keep it smooth; the output layer starts at zero.
class DeformNetImpl : public torch::nn::Module {
 public:
  DeformNetImpl(int frequencies, bool include_raw, int latent_dim, int layers, int width);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);
  int latent_dim() const { return latent_dim_; }

 private:
  int frequencies_;
  bool include_raw_;
  int latent_dim_;
  torch::nn::ModuleList hidden_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(DeformNet);

struct FieldOutput {
  torch::Tensor sigma;    // [N], >= 0
  torch::Tensor feature;  // [N, feature_dim]
};

// F_theta: trunk on (gamma(x_hat), z_id) emits density and an intermediate
// feature; the feature head adds (gamma(d), z_exp, z_ill).
class RadianceFieldImpl : public torch::nn::Module {
 public:
  RadianceFieldImpl(const EncodingConfig& enc, const FieldNetSpec& spec, const LatentDims& dims);
  FieldOutput forward(const torch::Tensor& x_hat, const torch::Tensor& dir, const torch::Tensor& z_id,
                      const torch::Tensor& z_exp, const torch::Tensor& z_ill);
  torch::Tensor density(const torch::Tensor& x_hat, const torch::Tensor& z_id);

 private:
  torch::Tensor trunk_forward(const torch::Tensor& x_hat, const torch::Tensor& z_id);
  EncodingConfig enc_;
  LatentDims dims_;
  int trunk_width_;
  torch::nn::ModuleList trunk_{nullptr};
  torch::nn::Linear trunk_out_{nullptr};
  torch::nn::ModuleList head_{nullptr};
};
TORCH_MODULE(RadianceField);

// Feature map [B,F,h,w] -> RGB [B,3,h*f,w*f] in [0,1]: conv + nearest-repeat
// x2 stages, sigmoid output, final 1x1 conv zero-initialised.
class UpsamplerImpl : public torch::nn::Module {
 public:
  UpsamplerImpl(int feature_dim, int width, int factor);
  torch::Tensor forward(const torch::Tensor& features);
  int factor() const { return factor_; }
  int feature_dim() const { return feature_dim_; }

 private:
  int feature_dim_;
  int factor_;
  torch::nn::Conv2d in_{nullptr};
  torch::nn::ModuleList stages_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Upsampler);

class PortraitModelImpl : public torch::nn::Module {
 public:
  PortraitModelImpl(Region region, const EncodingConfig& enc, const FieldNetSpec& spec, const LatentDims& dims);

  torch::Tensor deform(const torch::Tensor& x, const torch::Tensor& w);
  torch::Tensor canonicalize(const torch::Tensor& x, const torch::Tensor& w);

  // Deformation latent used for a frame with expression `z_exp`.
  torch::Tensor deform_latent(const torch::Tensor& z_exp) const;

  // Parameters updated during edit fine-tuning (F_theta and U).
  std::vector<torch::Tensor> appearance_parameters();
  // D_theta plus, for the torso, its deformation latent.
  std::vector<torch::Tensor> deformation_parameters();

  Region region() const { return region_; }
  const EncodingConfig& encoding() const { return enc_; }
  const FieldNetSpec& net_spec() const { return spec_; }
  const LatentDims& dims() const { return dims_; }

  DeformNet deform_net{nullptr};
  RadianceField field{nullptr};
  Upsampler upsampler{nullptr};
  torch::Tensor torso_w;  // undefined for head models

 private:
  Region region_;
  EncodingConfig enc_;
  FieldNetSpec spec_;
  LatentDims dims_;
};
TORCH_MODULE(PortraitModel);

// Per-subject identity and illumination embeddings shared by both regions.
class SubjectCodesImpl : public torch::nn::Module {
 public:
  SubjectCodesImpl(int id_dim, int ill_dim);
  torch::Tensor z_id;
  torch::Tensor z_ill;
};
TORCH_MODULE(SubjectCodes);

// Builds a model with parameters drawn from `seed`.
PortraitModel make_portrait_model(Region region, const EncodingConfig& enc, const FieldNetSpec& spec,
                                  const LatentDims& dims, uint64_t seed);
SubjectCodes make_subject_codes(const LatentDims& dims, uint64_t seed);

// Digest over the bytes of every named parameter of `module` whose name
// starts with `prefix` (empty: all).
uint64_t parameter_hash(const torch::nn::Module& module, const std::string& prefix = "");
uint64_t tensors_hash(const std::vector<torch::Tensor>& tensors);

// Checkpoint archives: magic, format version, JSON header with configs and
// tensor table, then raw little-endian float32 payloads in table order.
void save_checkpoint(const std::filesystem::path& path, PortraitModel& model);
PortraitModel load_checkpoint(const std::filesystem::path& path);
void save_subject_codes(const std::filesystem::path& path, SubjectCodes& codes);
SubjectCodes load_subject_codes(const std::filesystem::path& path);

}  // namespace avedit
