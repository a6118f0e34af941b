#include "avedit/error.hpp"
#include "avedit/image.hpp"
#include "avedit/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace avedit {

namespace {

constexpr double kPi = std::numbers::pi;

// Fixed world layout of the toy studio.
constexpr double kCameraDistance = 3.2;
constexpr double kFocalPerPixel = 1.45;  // fx = fy = kFocalPerPixel * image_size
constexpr double kNear = 1.8;
constexpr double kFar = 4.6;
const Eigen::Vector3d kHeadCenter(0.0, 0.32, 0.05);
const Eigen::Vector3d kHeadAxes(0.46, 0.58, 0.50);
constexpr double kHeadExponent = 2.4;
constexpr double kHeadBoundRadius = 0.72;
const Eigen::Vector3d kTorsoCenter(0.0, -0.82, -0.05);
const Eigen::Vector3d kTorsoHalf(0.78, 0.42, 0.32);

// Shape basis is shared by every subject so expression codes keep their
// meaning across generated sequences.
constexpr uint64_t kShapeSeed = 0x5eedf00dULL;
constexpr int kShapeBumps = 6;
constexpr double kBumpSharpness = 0.08;
constexpr double kDisplacementScale = 0.045;

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

struct ShapeBasis {
  std::array<Eigen::Vector3d, kShapeBumps> centers;
  Eigen::MatrixXd mixing;  // [bumps, expr_dim]
};

ShapeBasis make_shape_basis(int expr_dim) {
  std::mt19937_64 rng(kShapeSeed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ShapeBasis basis;
  // Bumps concentrated on the front half: cheeks, jaw, brow.
  const std::array<Eigen::Vector3d, kShapeBumps> anchors = {
      Eigen::Vector3d(0.0, -0.55, 0.83), Eigen::Vector3d(0.45, -0.2, 0.87),
      Eigen::Vector3d(-0.45, -0.2, 0.87), Eigen::Vector3d(0.0, 0.35, 0.94),
      Eigen::Vector3d(0.0, -0.1, 1.0),   Eigen::Vector3d(0.0, -0.85, 0.5)};
  for (int j = 0; j < kShapeBumps; ++j) basis.centers[static_cast<size_t>(j)] = anchors[static_cast<size_t>(j)].normalized();
  basis.mixing.resize(kShapeBumps, expr_dim);
  const double norm = kDisplacementScale / std::sqrt(static_cast<double>(expr_dim));
  for (int j = 0; j < kShapeBumps; ++j)
    for (int e = 0; e < expr_dim; ++e) basis.mixing(j, e) = normal(rng) * norm;
  return basis;
}

Eigen::VectorXd bump_weights(const ShapeBasis& basis, const torch::Tensor& z_exp) {
  auto z = z_exp.to(torch::kFloat64).contiguous();
  Eigen::Map<const Eigen::VectorXd> zv(z.data_ptr<double>(), z.numel());
  return basis.mixing * zv;
}

double head_value(const Eigen::Vector3d& p, const ShapeBasis& basis, const Eigen::VectorXd& weights) {
  const double r = p.norm();
  if (r < 1e-9) return -1.0;
  const Eigen::Vector3d u = p / r;
  double rho = 0.0;
  for (int i = 0; i < 3; ++i) rho += std::pow(std::abs(p[i] / kHeadAxes[i]), kHeadExponent);
  rho = std::pow(rho, 1.0 / kHeadExponent);
  double disp = 0.0;
  for (int j = 0; j < kShapeBumps; ++j) {
    disp += weights[j] * std::exp(-(1.0 - u.dot(basis.centers[static_cast<size_t>(j)])) / kBumpSharpness);
  }
  return rho - (1.0 + disp);
}

double torso_value(const Eigen::Vector3d& p) {
  const Eigen::Vector3d q = p.cwiseAbs() - kTorsoHalf;
  return std::max({q.x(), q.y(), q.z()});
}

enum class Label : int { Head = 0, Torso = 1, Hair = 2, Face = 3, Background = 4 };

double hair_score(const Eigen::Vector3d& u) {
  return std::max(u.y() - 0.30, std::min(-u.z() - 0.15, u.y() + 0.35));
}

double face_score(const Eigen::Vector3d& u) {
  return std::min({u.z() - 0.35, 0.75 - std::abs(u.x()), -hair_score(u)});
}

Label head_label(const Eigen::Vector3d& u) {
  if (hair_score(u) > 0.0) return Label::Hair;
  if (face_score(u) > 0.0) return Label::Face;
  return Label::Head;
}

struct Texture {
  std::array<Eigen::Vector3d, 3> freq;
  std::array<double, 3> phase;
  std::array<Eigen::Vector3d, 3> tint;
};

Texture make_texture(uint64_t seed, double freq_lo, double freq_hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Texture tex;
  for (size_t k = 0; k < 3; ++k) {
    Eigen::Vector3d dir(normal(rng), normal(rng), normal(rng));
    dir.normalize();
    tex.freq[k] = dir * (freq_lo + (freq_hi - freq_lo) * uni(rng));
    tex.phase[k] = 2.0 * kPi * uni(rng);
    tex.tint[k] = Eigen::Vector3d(uni(rng), uni(rng), uni(rng)) * 2.0 - Eigen::Vector3d::Ones();
  }
  return tex;
}

Eigen::Vector3d modulate(const Texture& tex, const Eigen::Vector3d& coord, const Eigen::Vector3d& base,
                         double strength) {
  Eigen::Vector3d c = base;
  for (size_t k = 0; k < 3; ++k) {
    const double s = std::sin(tex.freq[k].dot(coord) + tex.phase[k]);
    c += strength * s * (0.6 * base + 0.4 * tex.tint[k].cwiseAbs());
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

double gaussian_spot(const Eigen::Vector3d& u, const Eigen::Vector3d& center, double width) {
  return std::exp(-(1.0 - u.dot(center.normalized())) / width);
}

Eigen::Vector3d head_color(const Eigen::Vector3d& u, const Texture& tex) {
  const Eigen::Vector3d skin(0.86, 0.60, 0.47);
  const Eigen::Vector3d face(0.94, 0.72, 0.58);
  const Eigen::Vector3d hair(0.55, 0.26, 0.12);
  const double w = 0.07;
  Eigen::Vector3d c = skin + (face - skin) * smoothstep(-w, w, face_score(u));
  c += (hair - c) * smoothstep(-w, w, hair_score(u));
  // Eyes and mouth: soft darker spots attached to the surface.
  const double eyes = gaussian_spot(u, {0.32, 0.12, 0.94}, 0.035) + gaussian_spot(u, {-0.32, 0.12, 0.94}, 0.035);
  const double mouth = gaussian_spot(u, {0.0, -0.42, 0.9}, 0.04);
  c = c * (1.0 - 0.55 * std::min(eyes, 1.0));
  c += (Eigen::Vector3d(0.7, 0.25, 0.25) - c) * 0.6 * std::min(mouth, 1.0);
  return modulate(tex, u, c, 0.06);
}

Eigen::Vector3d torso_color(const Eigen::Vector3d& p, const Texture& tex) {
  const Eigen::Vector3d shirt(0.22, 0.38, 0.78);
  Eigen::Vector3d c = shirt;
  const double stripes = 0.5 + 0.5 * std::sin(5.0 * p.x() + 1.3 * p.y());
  c = c * (0.85 + 0.15 * stripes);
  const double collar = smoothstep(0.22, 0.36, p.y() - (-kTorsoHalf.y()) - 0.45);
  c += (Eigen::Vector3d(0.9, 0.9, 0.85) - c) * 0.5 * collar * smoothstep(0.35, 0.05, std::abs(p.x()));
  return modulate(tex, p, c, 0.05);
}

// Low-frequency sinusoid mixture, roughly unit amplitude.
struct Trajectory {
  std::array<double, 3> amp{}, freq{}, phase{};
  double at(double time01) const {
    double v = 0.0;
    for (size_t k = 0; k < 3; ++k) v += amp[k] * std::sin(2.0 * kPi * freq[k] * time01 + phase[k]);
    return v;
  }
};

Trajectory make_trajectory(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Trajectory tr;
  double total = 0.0;
  for (size_t k = 0; k < 3; ++k) {
    tr.amp[k] = 0.3 + uni(rng);
    tr.freq[k] = 0.3 + 1.2 * uni(rng);
    tr.phase[k] = 2.0 * kPi * uni(rng);
    total += tr.amp[k];
  }
  for (auto& a : tr.amp) a /= total;
  return tr;
}

// Returns distance along the (unit) ray to the first crossing, if any.
std::optional<double> march_head(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const ShapeBasis& basis,
                                 const Eigen::VectorXd& weights) {
  // Clip to the bounding sphere.
  const double b = o.dot(d);
  const double c = o.squaredNorm() - kHeadBoundRadius * kHeadBoundRadius;
  const double disc = b * b - c;
  if (disc <= 0.0) return std::nullopt;
  const double t0 = std::max(-b - std::sqrt(disc), 0.0);
  const double t1 = -b + std::sqrt(disc);
  constexpr double kStep = 0.01;
  double prev_t = t0;
  double prev_f = head_value(o + t0 * d, basis, weights);
  if (prev_f < 0.0) return t0;
  for (double t = t0 + kStep; t <= t1 + kStep; t += kStep) {
    const double f = head_value(o + t * d, basis, weights);
    if (f < 0.0) {
      double lo = prev_t, hi = t;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (head_value(o + mid * d, basis, weights) < 0.0) hi = mid; else lo = mid;
      }
      return 0.5 * (lo + hi);
    }
    prev_t = t;
    prev_f = f;
  }
  return std::nullopt;
}

std::optional<double> hit_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  double tmin = -1e30, tmax = 1e30;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (std::abs(o[i]) > kTorsoHalf[i]) return std::nullopt;
      continue;
    }
    double ta = (-kTorsoHalf[i] - o[i]) / d[i];
    double tb = (kTorsoHalf[i] - o[i]) / d[i];
    if (ta > tb) std::swap(ta, tb);
    tmin = std::max(tmin, ta);
    tmax = std::min(tmax, tb);
  }
  if (tmax < tmin || tmax < 0.0) return std::nullopt;
  return std::max(tmin, 0.0);
}

Pose world_camera() {
  Eigen::Matrix3d r = Eigen::Matrix3d::Zero();
  r(0, 0) = 1.0;
  r(1, 1) = -1.0;
  r(2, 2) = -1.0;
  return make_pose(r, Eigen::Vector3d(0.0, 0.0, kCameraDistance));
}

}  // namespace

std::vector<std::string> spec_violations(const SceneSpec& spec) {
  std::vector<std::string> out;
  if (spec.n_frames < 2) out.push_back("n_frames must be >= 2 (got " + std::to_string(spec.n_frames) + ")");
  const bool pow2 = spec.image_size > 0 && (spec.image_size & (spec.image_size - 1)) == 0;
  if (!pow2 || spec.image_size < 32) {
    out.push_back("image_size must be a power of two >= 32 (got " + std::to_string(spec.image_size) + ")");
  }
  if (spec.expr_dim < 1) out.push_back("expr_dim must be >= 1 (got " + std::to_string(spec.expr_dim) + ")");
  for (float c : spec.background_color) {
    if (!(c >= 0.0f && c <= 1.0f)) {
      out.push_back("background_color entries must lie in [0,1]");
      break;
    }
  }
  if (!(spec.motion_scale >= 0.0) || !(spec.expression_scale >= 0.0)) {
    out.push_back("motion_scale and expression_scale must be non-negative");
  }
  return out;
}

torch::Tensor Dataset::background_image() const {
  auto bg = torch::tensor({background[0], background[1], background[2]}, torch::kFloat32);
  return bg.view({1, 1, 3}).expand({image_size, image_size, 3}).contiguous();
}

torch::Tensor head_region(const MaskSet& masks) {
  return masks.at("head") + masks.at("hair") + masks.at("face");
}

torch::Tensor torso_region(const MaskSet& masks) { return masks.at("torso"); }

double head_surface_value(const Eigen::Vector3d& p, const torch::Tensor& z_exp) {
  const auto basis = make_shape_basis(static_cast<int>(z_exp.numel()));
  return head_value(p, basis, bump_weights(basis, z_exp));
}

double torso_surface_value(const Eigen::Vector3d& p) { return torso_value(p); }

Dataset synth_sequence(const SceneSpec& spec) {
  if (auto v = spec_violations(spec); !v.empty()) {
    std::ostringstream msg;
    msg << "invalid scene spec:";
    for (const auto& s : v) msg << " " << s << ";";
    throw ValidationError(msg.str());
  }

  const int size = spec.image_size;
  Dataset ds;
  ds.spec = spec;
  ds.expr_dim = spec.expr_dim;
  ds.image_size = size;
  ds.intrinsics = {kFocalPerPixel * size, kFocalPerPixel * size, 0.5 * size, 0.5 * size};
  ds.near = kNear;
  ds.far = kFar;
  ds.scene_radius = 1.0;
  ds.background = spec.background_color;

  const ShapeBasis basis = make_shape_basis(spec.expr_dim);
  const Texture head_tex = make_texture(spec.head_texture_seed, 1.5, 3.5);
  const Texture torso_tex = make_texture(spec.torso_texture_seed, 1.0, 2.5);

  std::mt19937_64 motion_rng(spec.motion_seed);
  // Rigid channels: head yaw, pitch, roll, head tx, ty, tz, torso tx, ty, yaw.
  std::array<Trajectory, 9> rigid;
  for (auto& t : rigid) t = make_trajectory(motion_rng);
  const std::array<double, 9> rigid_amp = {0.22, 0.12, 0.06, 0.03, 0.02, 0.02, 0.025, 0.015, 0.05};
  std::vector<Trajectory> expr(static_cast<size_t>(spec.expr_dim));
  for (auto& t : expr) t = make_trajectory(motion_rng);

  const Pose cam_world = world_camera();
  const Eigen::Vector3d bg(spec.background_color[0], spec.background_color[1], spec.background_color[2]);

  for (int f = 0; f < spec.n_frames; ++f) {
    const double time01 = static_cast<double>(f) / static_cast<double>(spec.n_frames);
    auto rig = [&](size_t c) { return spec.motion_scale * rigid_amp[c] * rigid[c].at(time01); };

    const Pose head_to_world = make_pose(rotation_ypr(rig(0), rig(1), rig(2)),
                                         kHeadCenter + Eigen::Vector3d(rig(3), rig(4), rig(5)));
    const Pose torso_to_world = make_pose(rotation_ypr(rig(8), 0.0, 0.0),
                                          kTorsoCenter + Eigen::Vector3d(rig(6), rig(7), 0.0));
    const Pose world_to_head = rigid_inverse(head_to_world);
    const Pose world_to_torso = rigid_inverse(torso_to_world);

    auto z = torch::empty({spec.expr_dim}, torch::kFloat32);
    for (int e = 0; e < spec.expr_dim; ++e) {
      z[e] = static_cast<float>(spec.expression_scale * expr[static_cast<size_t>(e)].at(time01));
    }
    const Eigen::VectorXd weights = bump_weights(basis, z);

    FrameRecord rec;
    rec.index = f;
    rec.camera.pose = world_to_head * cam_world;
    rec.camera.intrinsics = ds.intrinsics;
    rec.neck = world_to_torso * head_to_world;
    rec.z_exp = z;

    auto image = torch::empty({size, size, 3}, torch::kFloat32);
    auto depth = torch::zeros({size, size}, torch::kFloat32);
    auto labels = std::vector<Label>(static_cast<size_t>(size * size), Label::Background);
    auto img = image.accessor<float, 3>();
    auto dep = depth.accessor<float, 2>();

    const Eigen::Matrix3d rc = cam_world.topLeftCorner<3, 3>();
    const Eigen::Vector3d oc = cam_world.topRightCorner<3, 1>();
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Eigen::Vector3d dir_cam((x + 0.5 - ds.intrinsics.cx) / ds.intrinsics.fx,
                                      (y + 0.5 - ds.intrinsics.cy) / ds.intrinsics.fy, 1.0);
        const Eigen::Vector3d d = (rc * dir_cam).normalized();

        const Eigen::Vector3d oh = world_to_head.topLeftCorner<3, 3>() * oc + world_to_head.topRightCorner<3, 1>();
        const Eigen::Vector3d dh = world_to_head.topLeftCorner<3, 3>() * d;
        const Eigen::Vector3d ot = world_to_torso.topLeftCorner<3, 3>() * oc + world_to_torso.topRightCorner<3, 1>();
        const Eigen::Vector3d dt = world_to_torso.topLeftCorner<3, 3>() * d;

        const auto th = march_head(oh, dh, basis, weights);
        const auto tt = hit_box(ot, dt);

        Eigen::Vector3d color = bg;
        Label label = Label::Background;
        double hit = 0.0;
        if (th && (!tt || *th <= *tt)) {
          const Eigen::Vector3d p = oh + *th * dh;
          const Eigen::Vector3d u = p.normalized();
          color = head_color(u, head_tex);
          label = head_label(u);
          hit = *th;
        } else if (tt) {
          color = torso_color(ot + *tt * dt, torso_tex);
          label = Label::Torso;
          hit = *tt;
        }
        for (int c = 0; c < 3; ++c) img[y][x][c] = static_cast<float>(color[c]);
        dep[y][x] = static_cast<float>(hit);
        labels[static_cast<size_t>(y * size + x)] = label;
      }
    }

    rec.image_gt = quantize_u8(image);
    rec.edit_target = rec.image_gt.clone();
    for (size_t m = 0; m < kMaskNames.size(); ++m) {
      auto mask = torch::zeros({size, size}, torch::kFloat32);
      auto acc = mask.accessor<float, 2>();
      for (int i = 0; i < size * size; ++i) {
        if (static_cast<size_t>(labels[static_cast<size_t>(i)]) == m) acc[i / size][i % size] = 1.0f;
      }
      rec.masks.emplace(kMaskNames[m], mask);
    }
    rec.guide_depth = depth;
    ds.frames.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace avedit
