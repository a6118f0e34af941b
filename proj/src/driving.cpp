#include "avedit/driving.hpp"

#include "avedit/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace avedit {

namespace fs = std::filesystem;

std::vector<DriveEntry> drive_entries(const Dataset& dataset) {
  std::vector<DriveEntry> out;
  out.reserve(dataset.frames.size());
  for (const auto& f : dataset.frames) {
    DriveEntry e;
    e.z_exp = f.z_exp;
    e.pose = f.camera.pose;
    e.neck = f.neck;
    e.masks = f.masks;
    e.guide_depth = f.guide_depth;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<DriveEntry> load_reference_codes(const fs::path& dir) {
  const auto codes_dir = dir / "codes";
  if (!fs::is_directory(codes_dir)) throw MissingFileError("no codes directory in " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(codes_dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<DriveEntry> out;
  for (const auto& path : files) {
    std::ifstream in(path);
    try {
      const auto j = nlohmann::json::parse(in);
      DriveEntry e;
      const auto z = j.at("z_exp").get<std::vector<float>>();
      e.z_exp = torch::tensor(z, torch::kFloat32);
      const auto pose = j.at("pose").get<std::array<double, 16>>();
      const auto neck = j.at("neck").get<std::array<double, 16>>();
      e.pose = from_row_major(pose);
      e.neck = from_row_major(neck);
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ManifestError("malformed code record " + path.string() + ": " + ex.what());
    }
  }
  return out;
}

std::vector<torch::Tensor> transfer(ModelSet& models, const std::vector<DriveEntry>& sequence,
                                    const Intrinsics& intrinsics, int image_size, const RenderOptions& options) {
  if (sequence.empty()) throw ContractError("driving sequence is empty");
  const int64_t expr = models.head->dims().expr;
  for (size_t i = 0; i < sequence.size(); ++i) {
    if (sequence[i].z_exp.numel() != expr) {
      throw DimensionError("driving entry " + std::to_string(i) + " has " + std::to_string(sequence[i].z_exp.numel()) +
                           " expression entries, model expects " + std::to_string(expr));
    }
  }
  torch::NoGradGuard ng;
  auto opts = options;
  opts.stratified = false;
  std::vector<torch::Tensor> frames;
  frames.reserve(sequence.size());
  for (const auto& e : sequence) {
    RenderRequest r;
    r.head_camera = Camera{e.pose, intrinsics};
    r.torso_pose = e.neck * e.pose;
    r.z_exp = e.z_exp;
    r.image_size = image_size;
    r.masks = e.masks;
    r.guide_depth = e.guide_depth;
    frames.push_back(render_frame(r, models.head, models.torso, models.codes, opts).rgb.to(torch::kFloat32));
  }
  return frames;
}

Pose torso_camera_refine(const Eigen::Matrix3d& neck_rotation, const Eigen::Vector3d& neck_translation,
                         const Pose& base_pose) {
  const Pose neck = make_pose(neck_rotation, neck_translation);
  if (!is_rigid(neck, 1e-6)) throw ValidationError("neck transform is not rigid (rotation not orthonormal)");
  if (!is_rigid(base_pose, 1e-6)) throw ValidationError("base pose is not rigid");
  return neck * base_pose;
}

}  // namespace avedit
