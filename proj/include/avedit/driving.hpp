#pragma once

#include "avedit/renderer.hpp"
#include "avedit/scene.hpp"
#include "avedit/training.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <vector>

namespace avedit {

// One driving step: expression code and head pose (as camera extrinsics),
// plus the head-to-torso transform.
struct DriveEntry {
  torch::Tensor z_exp;
  Pose pose = Pose::Identity();
  Pose neck = Pose::Identity();
  // Present when the entry comes from a full dataset frame.
  std::optional<MaskSet> masks;
  std::optional<torch::Tensor> guide_depth;
};

// Every frame of `dataset`, keeping masks and guide depth.
std::vector<DriveEntry> drive_entries(const Dataset& dataset);

// Reads `dir/codes/*.json` records (the dataset code format) in index order.
std::vector<DriveEntry> load_reference_codes(const std::filesystem::path& dir);

// Renders the models under each entry's code and pose. Parameters and codes
// are only read. Throws DimensionError on an expr size mismatch and
// ContractError on an empty sequence.
std::vector<torch::Tensor> transfer(ModelSet& models, const std::vector<DriveEntry>& sequence,
                                    const Intrinsics& intrinsics, int image_size, const RenderOptions& options);

// neck * base_pose with neck = [rotation | translation]. Throws
// ValidationError when the rotation is not orthonormal with det +1 within
// 1e-6, or when base_pose is not rigid.
Pose torso_camera_refine(const Eigen::Matrix3d& neck_rotation, const Eigen::Vector3d& neck_translation,
                         const Pose& base_pose);

}  // namespace avedit
