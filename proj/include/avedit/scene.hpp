#pragma once

#include "avedit/geometry.hpp"

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace avedit {

// Semantic parsing labels. Every pixel carries exactly one of them.
inline constexpr std::array<const char*, 5> kMaskNames = {"head", "torso", "hair", "face", "background"};

using MaskSet = std::map<std::string, torch::Tensor>;

// Parameters of a procedurally generated portrait sequence.
struct SceneSpec {
  int n_frames = 20;
  int image_size = 64;
  int expr_dim = 8;
  uint64_t motion_seed = 1;
  uint64_t head_texture_seed = 2;
  uint64_t torso_texture_seed = 3;
  std::array<float, 3> background_color = {0.92f, 0.92f, 0.95f};
  // Multipliers on the rigid head/torso motion and on the expression
  // trajectory. Zero freezes the respective motion.
  double motion_scale = 1.0;
  double expression_scale = 1.0;

  bool operator==(const SceneSpec&) const = default;
};

// Returns one message per violated field; empty when every field is valid.
std::vector<std::string> spec_violations(const SceneSpec& spec);

struct FrameRecord {
  int index = 0;
  // Head pose expressed as camera extrinsics: camera-to-head-canonical.
  Camera camera;
  // Head-to-torso rigid transform. The torso camera is neck * camera.pose.
  Pose neck = Pose::Identity();
  torch::Tensor z_exp;        // [expr_dim]
  torch::Tensor image_gt;     // [H,W,3]
  torch::Tensor edit_target;  // [H,W,3]
  MaskSet masks;              // each [H,W] in {0,1}
  std::optional<torch::Tensor> guide_depth;  // [H,W], 0 where no surface

  Pose torso_pose() const { return neck * camera.pose; }
  int height() const { return static_cast<int>(image_gt.size(0)); }
  int width() const { return static_cast<int>(image_gt.size(1)); }
};

struct Dataset {
  SceneSpec spec;
  int expr_dim = 0;
  int image_size = 0;
  Intrinsics intrinsics;
  double near = 0.0;
  double far = 0.0;
  double scene_radius = 1.0;
  std::array<float, 3> background = {0.f, 0.f, 0.f};
  std::vector<FrameRecord> frames;

  torch::Tensor background_image() const;
};

// Region supervised by the head model: head skin, face and hair labels.
torch::Tensor head_region(const MaskSet& masks);
torch::Tensor torso_region(const MaskSet& masks);

// Rendering the analytic generator. Deterministic for fixed seeds.
Dataset synth_sequence(const SceneSpec& spec);

// Signed implicit value of the generating head surface at a point in head
// canonical coordinates; negative inside. Exposed for geometry checks.
double head_surface_value(const Eigen::Vector3d& p, const torch::Tensor& z_exp);
// Same for the torso box in torso coordinates.
double torso_surface_value(const Eigen::Vector3d& p);

struct ValidationIssue {
  int frame = -1;  // -1 for dataset-level issues
  std::string field;
  std::string message;
};

// Never throws; empty iff the dataset satisfies every invariant.
std::vector<ValidationIssue> validate_dataset(const Dataset& dataset);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

bool datasets_equal(const Dataset& a, const Dataset& b);
// Stable 64-bit digest over every stored value.
uint64_t dataset_hash(const Dataset& dataset);

}  // namespace avedit
