#include "avedit/error.hpp"
#include "avedit/fields.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace avedit;

namespace {

struct Mini {
  PortraitModel model{nullptr};
  SubjectCodes codes{nullptr};
};

Mini mini(Region region, torch::Dtype dtype = torch::kFloat64, uint64_t seed = 3) {
  const auto cfg = testkit::tiny_model_config(4);
  Mini m;
  m.model = make_portrait_model(region, cfg.encoding, cfg.net_spec, cfg.dims, seed);
  m.codes = make_subject_codes(cfg.dims, seed + 100);
  m.model->to(dtype);
  m.codes->to(dtype);
  return m;
}

// Gives the zero-initialised output layers nonzero weights so gradients reach
// every parameter group.
void perturb_all(torch::nn::Module& module, uint64_t seed) {
  torch::manual_seed(seed);
  torch::NoGradGuard ng;
  for (auto& p : module.parameters()) p.add_(torch::randn_like(p) * 0.1);
}

}  // namespace

TEST(PosEncode, ZeroInputLayout) {
  const auto e = pos_encode(torch::zeros({3}), 8, true);
  ASSERT_EQ(e.size(0), 51);
  EXPECT_TRUE(torch::equal(e.slice(0, 0, 3), torch::zeros({3})));
  for (int k = 0; k < 8; ++k) {
    const int base = 3 + 6 * k;
    EXPECT_TRUE(torch::equal(e.slice(0, base, base + 3), torch::zeros({3})));
    EXPECT_TRUE(torch::equal(e.slice(0, base + 3, base + 6), torch::ones({3})));
  }
}

TEST(PosEncode, DimensionFormulaHoldsEverywhere) {
  EXPECT_EQ(encoded_dim(3, 2, true), 15);
  for (int d = 1; d <= 5; ++d) {
    for (int l = 0; l <= 10; ++l) {
      for (bool raw : {true, false}) {
        const auto e = pos_encode(torch::rand({2, d}), l, raw);
        EXPECT_EQ(e.size(1), d * ((raw ? 1 : 0) + 2 * l));
        EXPECT_EQ(encoded_dim(d, l, raw), e.size(1));
      }
    }
  }
}

TEST(PosEncode, MatchesScalarFormula) {
  const auto v = torch::tensor({0.3, -0.7}, torch::kFloat64);
  const auto e = pos_encode(v, 3, false);
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 2; ++i) {
      const double x = v[i].item<double>() * std::ldexp(1.0, k) * M_PI;
      EXPECT_NEAR(e[4 * k + i].item<double>(), std::sin(x), 1e-12);
      EXPECT_NEAR(e[4 * k + 2 + i].item<double>(), std::cos(x), 1e-12);
    }
  }
}

TEST(Deform, FreshNetworkIsIdentity) {
  for (auto region : {Region::Head, Region::Torso}) {
    auto m = mini(region);
    const auto x = torch::randn({50, 3}, torch::kFloat64);
    const auto w = m.model->deform_latent(torch::randn({4}, torch::kFloat64));
    EXPECT_TRUE(torch::equal(m.model->deform(x, w), torch::zeros_like(x)));
    EXPECT_TRUE(torch::equal(m.model->canonicalize(x, w), x));
  }
}

TEST(Deform, ZeroParametersGiveZeroDisplacement) {
  auto m = mini(Region::Head);
  {
    torch::NoGradGuard ng;
    for (auto& p : m.model->deform_net->parameters()) p.zero_();
  }
  const auto x = torch::randn({20, 3}, torch::kFloat64);
  EXPECT_TRUE(torch::equal(m.model->deform(x, torch::randn({4}, torch::kFloat64)), torch::zeros_like(x)));
}

TEST(Field, DensityNonNegativeAndViewIndependent) {
  auto m = mini(Region::Head, torch::kFloat32);
  perturb_all(*m.model, 1);
  torch::NoGradGuard ng;
  const auto x = torch::randn({500, 3}) * 3.0;
  const auto z_exp = torch::randn({4});
  const auto d1 = torch::nn::functional::normalize(torch::randn({500, 3}), torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto d2 = torch::nn::functional::normalize(torch::randn({500, 3}), torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto a = m.model->field->forward(x, d1, m.codes->z_id, z_exp, m.codes->z_ill);
  const auto b = m.model->field->forward(x, d2, m.codes->z_id, z_exp, m.codes->z_ill);
  EXPECT_GE(a.sigma.min().item<float>(), 0.0f);
  EXPECT_TRUE(torch::equal(a.sigma, b.sigma));
  EXPECT_FALSE(torch::equal(a.feature, b.feature));
  EXPECT_TRUE(torch::equal(a.sigma, m.model->field->density(x, m.codes->z_id)));
}

TEST(Field, IdentityCodeChangesDensity) {
  auto m = mini(Region::Head, torch::kFloat32);
  torch::NoGradGuard ng;
  const auto x = torch::rand({100, 3}) * 2 - 1;
  const auto base = m.model->field->density(x, m.codes->z_id);
  const auto other = m.model->field->density(x, m.codes->z_id + torch::randn_like(m.codes->z_id));
  const auto changed = ((base - other).abs() > 1e-7).sum().item<int64_t>();
  // A random net responds to its identity input at essentially every point.
  EXPECT_GT(changed, 90);
}

TEST(Field, WrongCodeWidthIsDimensionError) {
  auto m = mini(Region::Head, torch::kFloat32);
  EXPECT_THROW(m.model->field->density(torch::zeros({2, 3}), torch::zeros({3})), DimensionError);
}

TEST(FieldGradients, DensityWrtCanonicalPoint) {
  auto m = mini(Region::Head);
  perturb_all(*m.model, 2);
  auto x = torch::randn({6, 3}, torch::kFloat64).requires_grad_(true);
  const auto g = testkit::check_gradients([&] { return m.model->field->density(x, m.codes->z_id).sum(); }, {x}, 18,
                                          1e-6);
  EXPECT_EQ(g.checked, 18);
  EXPECT_LT(g.max_rel_error, 1e-4);
}

TEST(FieldGradients, EveryParameterGroup) {
  for (auto region : {Region::Head, Region::Torso}) {
    auto m = mini(region);
    perturb_all(*m.model, 3);
    const auto x = torch::randn({5, 3}, torch::kFloat64);
    const auto d = torch::nn::functional::normalize(torch::randn({5, 3}, torch::kFloat64),
                                                    torch::nn::functional::NormalizeFuncOptions().dim(1));
    const auto z_exp = torch::randn({4}, torch::kFloat64);
    auto f = [&] {
      const auto w = m.model->deform_latent(z_exp);
      const auto xh = m.model->canonicalize(x, w);
      const auto out = m.model->field->forward(xh, d, m.codes->z_id, z_exp, m.codes->z_ill);
      return out.sigma.sum() + out.feature.pow(2).sum();
    };
    std::vector<torch::Tensor> params;
    for (auto& p : m.model->deform_net->parameters()) params.push_back(p);
    for (auto& p : m.model->field->parameters()) params.push_back(p);
    if (m.model->torso_w.defined()) params.push_back(m.model->torso_w);
    params.push_back(m.codes->z_id);
    params.push_back(m.codes->z_ill);
    const auto g = testkit::check_gradients(f, params, 20, 1e-6);
    EXPECT_LT(g.max_rel_error, 1e-4) << to_string(region);
  }
}

TEST(FieldGradients, Upsampler) {
  auto m = mini(Region::Head);
  perturb_all(*m.model->upsampler, 4);
  auto feat = torch::randn({1, 8, 3, 3}, torch::kFloat64).requires_grad_(true);
  std::vector<torch::Tensor> params{feat};
  for (auto& p : m.model->upsampler->parameters()) params.push_back(p);
  const auto g = testkit::check_gradients([&] { return m.model->upsampler->forward(feat).pow(2).sum(); }, params, 20,
                                          1e-6);
  EXPECT_LT(g.max_rel_error, 1e-4);
}

TEST(FieldParameters, AppearanceAndDeformationGroupsAreDisjoint) {
  auto m = mini(Region::Torso);
  const auto app = m.model->appearance_parameters();
  const auto def = m.model->deformation_parameters();
  EXPECT_EQ(app.size() + def.size(), m.model->parameters().size());
  for (const auto& a : app) {
    for (const auto& d : def) EXPECT_NE(a.data_ptr(), d.data_ptr());
  }
  EXPECT_EQ(def.back().data_ptr(), m.model->torso_w.data_ptr());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testkit::TempDir tmp("ckpt");
  auto m = mini(Region::Torso, torch::kFloat32, 9);
  perturb_all(*m.model, 5);
  save_checkpoint(tmp.path() / "t.ckpt", m.model);
  auto back = load_checkpoint(tmp.path() / "t.ckpt");
  EXPECT_EQ(back->region(), Region::Torso);
  EXPECT_EQ(back->net_spec(), m.model->net_spec());
  EXPECT_EQ(back->encoding(), m.model->encoding());
  EXPECT_EQ(parameter_hash(*back), parameter_hash(*m.model));

  save_subject_codes(tmp.path() / "c.ckpt", m.codes);
  auto codes = load_subject_codes(tmp.path() / "c.ckpt");
  EXPECT_TRUE(torch::equal(codes->z_id, m.codes->z_id));
  EXPECT_TRUE(torch::equal(codes->z_ill, m.codes->z_ill));
}

TEST(Checkpoint, CorruptOrMissingArchive) {
  testkit::TempDir tmp("ckpt_bad");
  EXPECT_THROW(load_checkpoint(tmp.path() / "none.ckpt"), MissingFileError);
  std::ofstream(tmp.path() / "bad.ckpt") << "garbage";
  EXPECT_THROW(load_checkpoint(tmp.path() / "bad.ckpt"), Error);
}

TEST(Checkpoint, SeedsDetermineParameters) {
  const auto cfg = testkit::tiny_model_config(4);
  auto a = make_portrait_model(Region::Head, cfg.encoding, cfg.net_spec, cfg.dims, 11);
  auto b = make_portrait_model(Region::Head, cfg.encoding, cfg.net_spec, cfg.dims, 11);
  auto c = make_portrait_model(Region::Head, cfg.encoding, cfg.net_spec, cfg.dims, 12);
  EXPECT_EQ(parameter_hash(*a), parameter_hash(*b));
  EXPECT_NE(parameter_hash(*a), parameter_hash(*c));
}
