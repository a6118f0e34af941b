#include "avedit/driving.hpp"
#include "avedit/error.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace avedit;

namespace {

const Dataset& scene() {
  static const Dataset ds = synth_sequence(testkit::tiny_scene(4, 32));
  return ds;
}

ModelSet perturbed_set(uint64_t seed) {
  auto m = make_model_set(testkit::tiny_model_config(8), 8, seed);
  torch::manual_seed(seed);
  torch::NoGradGuard ng;
  for (auto* mod : std::initializer_list<torch::nn::Module*>{m.head.get(), m.torso.get()}) {
    for (auto& p : mod->parameters()) p.add_(torch::randn_like(p) * 0.05);
  }
  return m;
}

}  // namespace

TEST(TorsoRefine, IdentityAndTranslation) {
  const Pose base = make_pose(rotation_ypr(0.2, 0.1, -0.3), Eigen::Vector3d(0.1, 0.2, 3.0));
  EXPECT_EQ(torso_camera_refine(Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), base), base);
  const Eigen::Vector3d t(0.05, -0.3, 0.7);
  const Pose moved = torso_camera_refine(Eigen::Matrix3d::Identity(), t, base);
  EXPECT_EQ(Eigen::Vector3d(moved.topRightCorner<3, 1>()), Eigen::Vector3d(base.topRightCorner<3, 1>() + t));
  EXPECT_EQ(Eigen::Matrix3d(moved.topLeftCorner<3, 3>()), Eigen::Matrix3d(base.topLeftCorner<3, 3>()));
}

TEST(TorsoRefine, InverseRecoversBaseAndStaysRigid) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Pose base = make_pose(rotation_ypr(u(rng), u(rng), u(rng)), Eigen::Vector3d(u(rng), u(rng), 3 + u(rng)));
    const Eigen::Matrix3d r = rotation_ypr(u(rng), u(rng), u(rng));
    const Eigen::Vector3d t(u(rng), u(rng), u(rng));
    const Pose adjusted = torso_camera_refine(r, t, base);
    EXPECT_TRUE(is_rigid(adjusted, 1e-9));
    EXPECT_NEAR((adjusted.topLeftCorner<3, 3>().determinant()), 1.0, 1e-9);
    const Pose back = torso_camera_refine(r.transpose(), -r.transpose() * t, adjusted);
    EXPECT_LT((back - base).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(TorsoRefine, NonRigidRejected) {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  r(0, 1) = 1e-5;
  EXPECT_THROW(torso_camera_refine(r, Eigen::Vector3d::Zero(), Pose::Identity()), ValidationError);
  EXPECT_THROW(torso_camera_refine(-Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), Pose::Identity()),
               ValidationError);
  r(0, 1) = 1e-8;
  EXPECT_NO_THROW(torso_camera_refine(r, Eigen::Vector3d::Zero(), Pose::Identity()));
}

TEST(Transfer, OwnCodesReproduceRendersAndKeepParameters) {
  auto m = perturbed_set(2);
  const auto opts = testkit::fast_options(scene(), 8);
  const auto before = m.hash();
  const auto frames = transfer(m, drive_entries(scene()), scene().intrinsics, scene().image_size, opts);
  ASSERT_EQ(frames.size(), scene().frames.size());
  for (size_t k = 0; k < frames.size(); ++k) {
    EXPECT_TRUE(torch::equal(frames[k], render_eval(scene().frames[k], m, opts))) << k;
  }
  EXPECT_EQ(m.hash(), before);
}

TEST(Transfer, RepeatedRenderIsBitIdentical) {
  auto m = perturbed_set(3);
  const auto opts = testkit::fast_options(scene(), 8);
  auto seq = drive_entries(scene());
  for (auto& e : seq) e.z_exp = seq[0].z_exp;
  const auto a = transfer(m, seq, scene().intrinsics, scene().image_size, opts);
  const auto b = transfer(m, {seq[2]}, scene().intrinsics, scene().image_size, opts);
  EXPECT_TRUE(torch::equal(a[2], b[0]));
}

TEST(Transfer, Errors) {
  auto m = perturbed_set(4);
  const auto opts = testkit::fast_options(scene(), 8);
  EXPECT_THROW(transfer(m, {}, scene().intrinsics, 32, opts), ContractError);
  auto seq = drive_entries(scene());
  seq[1].z_exp = torch::zeros({7});
  EXPECT_THROW(transfer(m, seq, scene().intrinsics, 32, opts), DimensionError);
}

TEST(Transfer, ReferenceCodesLoadFromDatasetDirectory) {
  testkit::TempDir tmp("ref");
  save_dataset(scene(), tmp.path());
  const auto ref = load_reference_codes(tmp.path());
  ASSERT_EQ(ref.size(), scene().frames.size());
  for (size_t k = 0; k < ref.size(); ++k) {
    EXPECT_TRUE(torch::equal(ref[k].z_exp, scene().frames[k].z_exp));
    EXPECT_LT((ref[k].pose - scene().frames[k].camera.pose).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(load_reference_codes(tmp.path() / "nope"), MissingFileError);
}

TEST(Transfer, SecondSubjectCodesDriveStructuralChange) {
  auto spec = testkit::tiny_scene(12, 32);
  spec.motion_seed = 41;
  spec.head_texture_seed = 42;
  spec.expression_scale = 2.0;
  const auto other = synth_sequence(spec);
  auto m = perturbed_set(5);
  const auto opts = testkit::fast_options(scene(), 8);
  // Hold the pose fixed so only the driving code varies; every other frame
  // repeats its predecessor's code.
  auto seq = drive_entries(other);
  for (size_t k = 0; k < seq.size(); ++k) {
    seq[k].pose = scene().frames[0].camera.pose;
    seq[k].neck = scene().frames[0].neck;
    seq[k].masks = scene().frames[0].masks;
    seq[k].guide_depth = scene().frames[0].guide_depth;
    if (k % 2 == 1) seq[k].z_exp = seq[k - 1].z_exp;
  }
  const auto frames = transfer(m, seq, scene().intrinsics, scene().image_size, opts);
  const auto head = head_region(scene().frames[0].masks).unsqueeze(-1);
  for (size_t k = 0; k + 1 < frames.size(); ++k) {
    const auto diff = frames[k + 1] - frames[k];
    const double head_energy = (diff * head).pow(2).sum().item<double>();
    if (k % 2 == 0) {
      EXPECT_EQ(head_energy, 0.0) << k;
    } else {
      EXPECT_GT(head_energy, 0.0) << k;
    }
  }
}
