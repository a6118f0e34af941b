#include "avedit/error.hpp"
#include "avedit/hash.hpp"
#include "avedit/image.hpp"
#include "avedit/scene.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace avedit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kDatasetFormatVersion = 1;

std::string frame_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return buf;
}

json pose_json(const Pose& pose) { return to_row_major(pose); }

Pose pose_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 16) throw ManifestError(what + " must hold 16 numbers");
  std::array<double, 16> v{};
  for (size_t i = 0; i < 16; ++i) v[i] = j[i].get<double>();
  return from_row_major(v);
}

json spec_json(const SceneSpec& s) {
  return {{"n_frames", s.n_frames},
          {"image_size", s.image_size},
          {"expr_dim", s.expr_dim},
          {"motion_seed", s.motion_seed},
          {"head_texture_seed", s.head_texture_seed},
          {"torso_texture_seed", s.torso_texture_seed},
          {"background_color", s.background_color},
          {"motion_scale", s.motion_scale},
          {"expression_scale", s.expression_scale}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.n_frames = j.at("n_frames").get<int>();
  s.image_size = j.at("image_size").get<int>();
  s.expr_dim = j.at("expr_dim").get<int>();
  s.motion_seed = j.at("motion_seed").get<uint64_t>();
  s.head_texture_seed = j.at("head_texture_seed").get<uint64_t>();
  s.torso_texture_seed = j.at("torso_texture_seed").get<uint64_t>();
  s.background_color = j.at("background_color").get<std::array<float, 3>>();
  s.motion_scale = j.value("motion_scale", 1.0);
  s.expression_scale = j.value("expression_scale", 1.0);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
}

json read_json(const fs::path& path, int frame) {
  std::ifstream in(path);
  if (!in) {
    throw MissingFileError(frame >= 0 ? "frame " + std::to_string(frame) + ": missing " + path.string()
                                      : "missing " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ManifestError("cannot parse " + path.string() + ": " + e.what());
  }
}

template <typename Fn>
auto with_frame(int frame, Fn&& fn) {
  try {
    return fn();
  } catch (const MissingFileError& e) {
    throw MissingFileError("frame " + std::to_string(frame) + ": " + e.what());
  }
}

bool all_finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "codes");
  fs::create_directories(dir / "targets");
  const bool has_depth = !ds.frames.empty() && ds.frames.front().guide_depth.has_value();
  if (has_depth) fs::create_directories(dir / "depth");

  std::vector<std::string> mask_names(kMaskNames.begin(), kMaskNames.end());
  json manifest = {{"format_version", kDatasetFormatVersion},
                   {"spec", spec_json(ds.spec)},
                   {"expr_dim", ds.expr_dim},
                   {"image_size", ds.image_size},
                   {"n_frames", ds.frames.size()},
                   {"intrinsics", {{"fx", ds.intrinsics.fx}, {"fy", ds.intrinsics.fy}, {"cx", ds.intrinsics.cx}, {"cy", ds.intrinsics.cy}}},
                   {"near", ds.near},
                   {"far", ds.far},
                   {"scene_radius", ds.scene_radius},
                   {"background", ds.background},
                   {"mask_names", mask_names},
                   {"has_depth", has_depth}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  for (const auto& f : ds.frames) {
    const auto stem = frame_stem(f.index);
    write_png_rgb(dir / "frames" / (stem + ".png"), f.image_gt);
    write_png_rgb(dir / "targets" / (stem + ".png"), f.edit_target);
    for (const auto& [name, mask] : f.masks) write_png_mask(dir / "masks" / (stem + "_" + name + ".png"), mask);
    if (f.guide_depth) write_float_bin(dir / "depth" / (stem + ".bin"), *f.guide_depth);
    auto z = f.z_exp.to(torch::kFloat32).contiguous();
    std::vector<float> zv(z.data_ptr<float>(), z.data_ptr<float>() + z.numel());
    json codes = {{"index", f.index}, {"z_exp", zv}, {"pose", pose_json(f.camera.pose)}, {"neck", pose_json(f.neck)}};
    write_text(dir / "codes" / (stem + ".json"), codes.dump() + "\n");
  }
}

Dataset load_dataset(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json", -1);
  Dataset ds;
  std::vector<std::string> mask_names;
  bool has_depth = false;
  int n_frames = 0;
  try {
    if (manifest.at("format_version").get<int>() != kDatasetFormatVersion) {
      throw ManifestError("unsupported dataset format_version");
    }
    ds.spec = spec_from_json(manifest.at("spec"));
    ds.expr_dim = manifest.at("expr_dim").get<int>();
    ds.image_size = manifest.at("image_size").get<int>();
    n_frames = manifest.at("n_frames").get<int>();
    const auto& k = manifest.at("intrinsics");
    ds.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(), k.at("cy").get<double>()};
    ds.near = manifest.at("near").get<double>();
    ds.far = manifest.at("far").get<double>();
    ds.scene_radius = manifest.value("scene_radius", 1.0);
    ds.background = manifest.at("background").get<std::array<float, 3>>();
    mask_names = manifest.at("mask_names").get<std::vector<std::string>>();
    has_depth = manifest.value("has_depth", false);
  } catch (const json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
  if (ds.expr_dim < 1 || ds.image_size < 1 || n_frames < 0) throw ManifestError("manifest holds non-positive sizes");

  const int64_t size = ds.image_size;
  auto check_size = [&](const torch::Tensor& t, int frame, const std::string& what) {
    if (t.size(0) != size || t.size(1) != size) {
      throw SizeMismatchError("frame " + std::to_string(frame) + ": " + what + " is " + std::to_string(t.size(1)) +
                              "x" + std::to_string(t.size(0)) + ", manifest says " + std::to_string(size));
    }
  };

  for (int i = 0; i < n_frames; ++i) {
    const auto stem = frame_stem(i);
    FrameRecord f;
    const json codes = read_json(dir / "codes" / (stem + ".json"), i);
    try {
      f.index = codes.at("index").get<int>();
      const auto z = codes.at("z_exp").get<std::vector<float>>();
      if (static_cast<int>(z.size()) != ds.expr_dim) {
        throw DimensionError("frame " + std::to_string(i) + ": z_exp has " + std::to_string(z.size()) +
                             " entries, manifest expr_dim is " + std::to_string(ds.expr_dim));
      }
      f.z_exp = torch::tensor(z, torch::kFloat32);
      f.camera.pose = pose_from_json(codes.at("pose"), "pose");
      f.neck = pose_from_json(codes.at("neck"), "neck");
    } catch (const json::exception& e) {
      throw ManifestError("frame " + std::to_string(i) + ": malformed code record: " + e.what());
    }
    f.camera.intrinsics = ds.intrinsics;

    f.image_gt = with_frame(i, [&] { return read_png_rgb(dir / "frames" / (stem + ".png")); });
    check_size(f.image_gt, i, "image");
    const auto target_path = dir / "targets" / (stem + ".png");
    f.edit_target = fs::exists(target_path) ? read_png_rgb(target_path) : f.image_gt.clone();
    check_size(f.edit_target, i, "edit target");
    for (const auto& name : mask_names) {
      auto m = with_frame(i, [&] { return read_png_mask(dir / "masks" / (stem + "_" + name + ".png")); });
      check_size(m, i, "mask '" + name + "'");
      f.masks.emplace(name, m);
    }
    if (has_depth) {
      f.guide_depth = with_frame(i, [&] { return read_float_bin(dir / "depth" / (stem + ".bin"), size, size); });
    }
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

std::vector<ValidationIssue> validate_dataset(const Dataset& ds) {
  std::vector<ValidationIssue> issues;
  auto add = [&](int frame, std::string field, std::string msg) {
    issues.push_back({frame, std::move(field), std::move(msg)});
  };
  if (ds.frames.size() < 2) add(-1, "frames", "fewer than 2 frames");
  if (!(ds.near < ds.far)) add(-1, "near/far", "near must be < far");

  for (const auto& f : ds.frames) {
    const int i = f.index;
    try {
      if (!f.z_exp.defined() || f.z_exp.numel() != ds.expr_dim) {
        add(i, "z_exp", "dimension differs from expr_dim");
      } else if (!all_finite(f.z_exp)) {
        add(i, "z_exp", "non-finite value");
      }
      if (!f.camera.pose.allFinite() || !is_rigid(f.camera.pose, 1e-5)) add(i, "camera", "pose is not a finite rigid transform");
      if (!f.neck.allFinite() || !is_rigid(f.neck, 1e-5)) add(i, "neck", "not a finite rigid transform");
      if (!f.image_gt.defined() || !all_finite(f.image_gt)) {
        add(i, "image_gt", "missing or non-finite");
        continue;
      }
      if (!f.edit_target.defined() || !f.edit_target.sizes().equals(f.image_gt.sizes())) {
        add(i, "edit_target", "dimensions differ from image_gt");
      } else if (!all_finite(f.edit_target)) {
        add(i, "edit_target", "non-finite value");
      }

      torch::Tensor sum;
      bool masks_ok = true;
      for (const char* name : kMaskNames) {
        auto it = f.masks.find(name);
        if (it == f.masks.end()) {
          add(i, std::string("masks.") + name, "mask missing");
          masks_ok = false;
          continue;
        }
        const auto& m = it->second;
        if (m.size(0) != f.image_gt.size(0) || m.size(1) != f.image_gt.size(1)) {
          add(i, std::string("masks.") + name, "size differs from image");
          masks_ok = false;
          continue;
        }
        if (!((m == 0) | (m == 1)).all().item<bool>()) add(i, std::string("masks.") + name, "mask is not binary");
        sum = sum.defined() ? sum + m : m.clone();
      }
      if (masks_ok && sum.defined()) {
        if ((sum > 1.0f).any().item<bool>()) add(i, "masks", "masks overlap (disjointness violated)");
        if ((sum < 1.0f).any().item<bool>()) add(i, "masks", "masks leave pixels uncovered");
      }
      if (f.guide_depth) {
        const auto& d = *f.guide_depth;
        if (!all_finite(d)) {
          add(i, "guide_depth", "non-finite value");
        } else if (masks_ok) {
          auto fg = (head_region(f.masks) + torso_region(f.masks)) > 0.5f;
          if ((d.masked_select(fg) <= 0.0f).any().item<bool>()) add(i, "guide_depth", "non-positive depth on foreground");
        }
      }
    } catch (const std::exception& e) {
      add(i, "frame", std::string("unreadable: ") + e.what());
    }
  }
  return issues;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (!(a.spec == b.spec) || a.expr_dim != b.expr_dim || a.image_size != b.image_size ||
      !(a.intrinsics == b.intrinsics) || a.near != b.near || a.far != b.far || a.background != b.background ||
      a.frames.size() != b.frames.size()) {
    return false;
  }
  for (size_t i = 0; i < a.frames.size(); ++i) {
    const auto& x = a.frames[i];
    const auto& y = b.frames[i];
    if (x.index != y.index || x.camera.pose != y.camera.pose || x.neck != y.neck) return false;
    if (!(x.camera.intrinsics == y.camera.intrinsics)) return false;
    if (!torch::equal(x.z_exp, y.z_exp) || !torch::equal(x.image_gt, y.image_gt) ||
        !torch::equal(x.edit_target, y.edit_target)) {
      return false;
    }
    if (x.masks.size() != y.masks.size()) return false;
    for (const auto& [name, m] : x.masks) {
      auto it = y.masks.find(name);
      if (it == y.masks.end() || !torch::equal(m, it->second)) return false;
    }
    if (x.guide_depth.has_value() != y.guide_depth.has_value()) return false;
    if (x.guide_depth && !torch::equal(*x.guide_depth, *y.guide_depth)) return false;
  }
  return true;
}

uint64_t dataset_hash(const Dataset& ds) {
  Fnv1a h;
  h.update(spec_json(ds.spec).dump());
  h.update_value(ds.expr_dim);
  h.update_value(ds.image_size);
  for (const auto& f : ds.frames) {
    h.update_value(f.index);
    for (double v : to_row_major(f.camera.pose)) h.update_value(v);
    for (double v : to_row_major(f.neck)) h.update_value(v);
    h.update(f.z_exp);
    h.update(f.image_gt);
    h.update(f.edit_target);
    for (const auto& [name, m] : f.masks) {
      h.update(name);
      h.update(m);
    }
    if (f.guide_depth) h.update(*f.guide_depth);
  }
  return h.digest();
}

}  // namespace avedit
