#include "avedit/geometry.hpp"

#include <cmath>

namespace avedit {

Pose make_pose(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation) {
  Pose pose = Pose::Identity();
  pose.topLeftCorner<3, 3>() = rotation;
  pose.topRightCorner<3, 1>() = translation;
  return pose;
}

Eigen::Matrix3d rotation_ypr(double yaw, double pitch, double roll) {
  const Eigen::AngleAxisd ry(yaw, Eigen::Vector3d::UnitY());
  const Eigen::AngleAxisd rx(pitch, Eigen::Vector3d::UnitX());
  const Eigen::AngleAxisd rz(roll, Eigen::Vector3d::UnitZ());
  return (ry * rx * rz).toRotationMatrix();
}

bool is_rigid(const Pose& pose, double tol) {
  if (!pose.allFinite()) return false;
  const Eigen::Matrix3d r = pose.topLeftCorner<3, 3>();
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  if (std::abs(r.determinant() - 1.0) > tol) return false;
  const Eigen::RowVector4d bottom(0.0, 0.0, 0.0, 1.0);
  return (pose.row(3) - bottom).cwiseAbs().maxCoeff() <= tol;
}

Pose rigid_inverse(const Pose& pose) {
  const Eigen::Matrix3d rt = pose.topLeftCorner<3, 3>().transpose();
  return make_pose(rt, -rt * pose.topRightCorner<3, 1>());
}

std::array<double, 16> to_row_major(const Pose& pose) {
  std::array<double, 16> out{};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out[static_cast<size_t>(r * 4 + c)] = pose(r, c);
  return out;
}

Pose from_row_major(const std::array<double, 16>& values) {
  Pose pose;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pose(r, c) = values[static_cast<size_t>(r * 4 + c)];
  return pose;
}

}  // namespace avedit
