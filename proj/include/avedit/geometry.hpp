#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>

namespace avedit {

// Rigid transform stored as a homogeneous 4x4 matrix. Camera poses are
// camera-to-object: applying the pose to a camera-space point yields the
// point in the frame of the object the camera is rendered against.
using Pose = Eigen::Matrix4d;

struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;

  // Same camera observed at an image scaled by `factor` (factor < 1 shrinks).
  Intrinsics scaled(double factor) const {
    return {fx * factor, fy * factor, cx * factor, cy * factor};
  }
  bool operator==(const Intrinsics&) const = default;
};

struct Camera {
  Pose pose = Pose::Identity();
  Intrinsics intrinsics;
};

Pose make_pose(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);

// Rotation from yaw (about +y), pitch (about +x) and roll (about +z), radians.
Eigen::Matrix3d rotation_ypr(double yaw, double pitch, double roll);

// True when the rotation block is orthonormal with det +1 within `tol` and the
// bottom row is (0,0,0,1).
bool is_rigid(const Pose& pose, double tol = 1e-6);

Pose rigid_inverse(const Pose& pose);

std::array<double, 16> to_row_major(const Pose& pose);
Pose from_row_major(const std::array<double, 16>& values);

}  // namespace avedit
