#include "avedit/editor.hpp"
#include "avedit/error.hpp"
#include "avedit/image.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <thread>

using namespace avedit;

namespace {

// alpha_bar on the integer step grid, recomputed from the beta line.
double reference_alpha_bar(int n) {
  double prod = 1.0;
  for (int i = 1; i <= n; ++i) {
    const double beta = 1e-4 + (2e-2 - 1e-4) * (i - 1) / 999.0;
    prod *= 1.0 - beta;
  }
  return prod;
}

EditConfig unit_guidance(const std::string& instruction, int steps = 25) {
  EditConfig c;
  c.instruction = instruction;
  c.s_I = 1.0;
  c.s_T = 1.0;
  c.denoise_steps = steps;
  return c;
}

// Returns a fixed tensor for every variant.
class ConstantDenoiser final : public Denoiser {
 public:
  explicit ConstantDenoiser(torch::Tensor eps) : eps_(std::move(eps)) {}
  torch::Tensor predict(const torch::Tensor&, double, Variant, const torch::Tensor&, const std::string&) override {
    ++calls;
    return eps_;
  }
  bool concurrent_safe() const override { return true; }
  int calls = 0;

 private:
  torch::Tensor eps_;
};

class FailingDenoiser final : public Denoiser {
 public:
  torch::Tensor predict(const torch::Tensor&, double, Variant, const torch::Tensor&, const std::string&) override {
    throw NumericError("backend produced NaN");
  }
  bool concurrent_safe() const override { return true; }
};

TargetTransform fixed_shift(double degrees) {
  return [degrees](const torch::Tensor& img, const std::string&, const FrameRecord*) { return hue_rotate(img, degrees); };
}

}  // namespace

TEST(Cfg, HandValue) {
  const auto s = cfg_score(torch::tensor({1.0}), torch::tensor({2.0}), torch::tensor({4.0}), 1.5, 12.0);
  EXPECT_EQ(s.item<double>(), 26.5);
}

TEST(Cfg, IdentityCases) {
  const auto u = torch::randn({3, 4, 4});
  const auto i = torch::randn({3, 4, 4});
  const auto f = torch::randn({3, 4, 4});
  EXPECT_TRUE(torch::allclose(cfg_score(u, i, f, 1.0, 1.0), f, 0, 1e-6));
  EXPECT_TRUE(torch::equal(cfg_score(u, i, f, 0.0, 0.0), u));
  EXPECT_THROW(cfg_score(u, i, torch::randn({3, 4}), 1.0, 1.0), DimensionError);
}

TEST(Cfg, AffineInGuidanceScales) {
  torch::manual_seed(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto u = torch::randn({16}, torch::kFloat64);
    const auto i = torch::randn({16}, torch::kFloat64);
    const auto f = torch::randn({16}, torch::kFloat64);
    const double si = torch::randn({1}).item<double>() * 3;
    const double st = torch::randn({1}).item<double>() * 10;
    const auto expected = u + si * (i - u) + st * (f - i);
    EXPECT_TRUE(torch::allclose(cfg_score(u, i, f, si, st), expected, 1e-12, 1e-12));
  }
}

TEST(Schedule, MatchesBetaLineAndIsMonotone) {
  NoiseSchedule s;
  EXPECT_EQ(s.alpha_bar(0.0), 1.0);
  for (int n : {1, 10, 250, 500, 950, 1000}) {
    EXPECT_NEAR(s.alpha_bar_at(n), reference_alpha_bar(n), 1e-12 * std::max(1.0, 1.0 / reference_alpha_bar(n)));
    EXPECT_NEAR(s.alpha_bar(n / 1000.0), s.alpha_bar_at(n), 1e-15);
  }
  double prev = 2.0;
  for (int i = 0; i <= 2000; ++i) {
    const double a = s.alpha_bar(i / 2000.0);
    EXPECT_LT(a, prev);
    prev = a;
  }
  EXPECT_EQ(NoiseSchedule::step_index(0.2504), 250);
  EXPECT_EQ(NoiseSchedule::step_index(0.9496), 950);
  EXPECT_THROW(s.alpha_bar(1.5), ContractError);
}

TEST(NoisyLatent, EndpointsAndZeroSignal) {
  NoiseSchedule s;
  const auto z0 = torch::rand({2, 2, 3});
  const auto noise = torch::randn({2, 2, 3});
  EXPECT_TRUE(torch::equal(make_noisy_latent(z0, 0.0, noise, s), z0));
  for (double t : {0.25, 0.6, 0.95}) {
    const auto z = make_noisy_latent(torch::zeros({2, 2, 3}), t, noise, s);
    EXPECT_TRUE(torch::allclose(z, std::sqrt(1.0 - s.alpha_bar(t)) * noise, 0, 1e-7));
  }
}

TEST(NoisyLatent, VariancePreservingForUnitInputs) {
  // E[z_t^2] = abar z0^2 + (1 - abar) for standard normal noise: unit when z0 = +-1.
  NoiseSchedule s;
  torch::manual_seed(3);
  const auto z0 = torch::ones({200000}, torch::kFloat64);
  const auto noise = torch::randn({200000}, torch::kFloat64);
  for (double t : {0.3, 0.7}) {
    const auto z = make_noisy_latent(z0, t, noise, s);
    EXPECT_NEAR(z.pow(2).mean().item<double>(), 1.0, 0.01);
    EXPECT_NEAR(z.mean().item<double>(), std::sqrt(s.alpha_bar(t)), 0.01);
  }
}

TEST(Ddim, OneStepWithTrueNoiseRecoversInitialLatent) {
  NoiseSchedule s;
  torch::manual_seed(4);
  const auto render = torch::rand({2, 2, 3}, torch::kFloat64);
  const auto noise = torch::randn({2, 2, 3}, torch::kFloat64);
  ConstantDenoiser truth(noise);
  auto cfg = unit_guidance("anything", 1);
  cfg.s_I = 1.5;
  cfg.s_T = 12.0;  // identical predictions make guidance irrelevant
  DdimTrace trace;
  const auto out = ddim_edit_at(torch::rand({2, 2, 3}, torch::kFloat64), render, cfg, truth, IdentityCodec{}, 0.5, noise,
                                &trace);
  ASSERT_EQ(trace.step_indices, (std::vector<int>{500, 0}));
  // Hand update: z = sqrt(a) z0 + sqrt(1-a) n, x0 = (z - sqrt(1-a) n) / sqrt(a).
  const double a = reference_alpha_bar(500);
  const auto z = std::sqrt(a) * render + std::sqrt(1 - a) * noise;
  const auto x0 = (z - std::sqrt(1 - a) * noise) / std::sqrt(a);
  EXPECT_TRUE(torch::allclose(trace.latents.front(), z, 0, 1e-12));
  EXPECT_TRUE(torch::allclose(out, x0.clamp(0, 1), 0, 1e-12));
  EXPECT_TRUE(torch::allclose(out, render, 0, 1e-12));
  EXPECT_EQ(truth.calls, 3);
}

TEST(Ddim, ToyEditorLandsOnTarget) {
  auto toy = toy_denoiser(fixed_shift(90.0));
  const auto image = torch::rand({2, 2, 3});
  const auto render = torch::rand({2, 2, 3});
  torch::Generator gen = at::detail::createCPUGenerator(5);
  const auto out = ddim_edit(image, render, unit_guidance("x"), *toy, IdentityCodec{}, gen);
  EXPECT_LT((out - hue_rotate(image, 90.0)).abs().max().item<float>(), 1e-3);
}

TEST(Ddim, ToyEditorHandCheckedOnTwoByTwo) {
  // With unit guidance every prediction is the Full branch, so x0 == target
  // after the first step and the final step (abar = 1) returns it.
  const auto image = torch::tensor({0.1, 0.5, 0.9, 0.2, 0.4, 0.6, 0.3, 0.3, 0.3, 0.8, 0.1, 0.0}, torch::kFloat64)
                         .view({2, 2, 3});
  const auto target = hue_rotate(image, 120.0);
  auto toy = toy_denoiser(fixed_shift(120.0));
  const auto noise = torch::randn({2, 2, 3}, torch::kFloat64);
  DdimTrace trace;
  const auto out = ddim_edit_at(image, torch::zeros_like(image), unit_guidance("x", 2), *toy, IdentityCodec{}, 0.8,
                                noise, &trace);
  ASSERT_EQ(trace.step_indices, (std::vector<int>{800, 400, 0}));
  const double a8 = reference_alpha_bar(800);
  const double a4 = reference_alpha_bar(400);
  const auto z8 = std::sqrt(1 - a8) * noise;  // zero render
  const auto eps8 = (z8 - std::sqrt(a8) * target) / std::sqrt(1 - a8);
  const auto z4 = std::sqrt(a4) * target + std::sqrt(1 - a4) * eps8;
  EXPECT_TRUE(torch::allclose(trace.latents[1], z4, 0, 1e-10));
  EXPECT_TRUE(torch::allclose(out, target.clamp(0, 1), 0, 1e-10));
}

TEST(Ddim, IdentityTargetReturnsImage) {
  auto toy = toy_denoiser([](const torch::Tensor& img, const std::string&, const FrameRecord*) { return img; });
  const auto image = torch::rand({8, 8, 3});
  torch::Generator gen = at::detail::createCPUGenerator(6);
  const auto out = ddim_edit(image, torch::rand({8, 8, 3}), unit_guidance("keep"), *toy, IdentityCodec{}, gen);
  EXPECT_LT((out - image).abs().max().item<float>(), 1e-3);
}

TEST(Ddim, ToyEditorContractsTowardTarget) {
  auto toy = toy_denoiser(fixed_shift(60.0));
  torch::manual_seed(7);
  for (double si : {1.0, 1.5}) {
    for (double st : {1.0, 12.0}) {
      const auto image = torch::rand({4, 4, 3}, torch::kFloat64);
      auto cfg = unit_guidance("x");
      cfg.s_I = si;
      cfg.s_T = st;
      DdimTrace trace;
      ddim_edit_at(image, torch::rand({4, 4, 3}, torch::kFloat64), cfg, *toy, IdentityCodec{}, 0.9,
                   torch::randn({4, 4, 3}, torch::kFloat64), &trace);
      // With exact per-variant predictions the guided estimate is itself a toy
      // denoiser whose goal is the affine combination of the variant goals
      // (zero, image, target); at s_I = s_T = 1 that goal is the target.
      const auto target = hue_rotate(image, 60.0);
      const auto goal = si * image + st * (target - image);
      if (si == 1.0 && st == 1.0) EXPECT_TRUE(torch::allclose(goal, target));
      double prev = std::numeric_limits<double>::infinity();
      for (const auto& z : trace.latents) {
        const double d = (z - goal).norm().item<double>();
        EXPECT_LE(d, prev + 1e-9) << "s_I=" << si << " s_T=" << st;
        prev = d;
      }
    }
  }
}

TEST(Ddim, ZeroTextScaleIgnoresInstruction) {
  auto toy = toy_denoiser(hue_rule_transform(default_hue_rules()));
  const auto image = torch::rand({8, 8, 3});
  const auto render = torch::rand({8, 8, 3});
  auto a = EditConfig{};
  a.instruction = "make it blue";
  a.s_T = 0.0;
  auto b = a;
  b.instruction = "make it pink";
  torch::Generator g1 = at::detail::createCPUGenerator(8);
  torch::Generator g2 = at::detail::createCPUGenerator(8);
  EXPECT_TRUE(torch::equal(ddim_edit(image, render, a, *toy, IdentityCodec{}, g1),
                           ddim_edit(image, render, b, *toy, IdentityCodec{}, g2)));
}

TEST(Ddim, SeededRunsAreIdentical) {
  auto toy = toy_denoiser(fixed_shift(30.0));
  const auto image = torch::rand({8, 8, 3});
  const auto render = torch::rand({8, 8, 3});
  EditConfig cfg;
  cfg.instruction = "x";
  torch::Generator g1 = at::detail::createCPUGenerator(9);
  torch::Generator g2 = at::detail::createCPUGenerator(9);
  torch::Generator g3 = at::detail::createCPUGenerator(10);
  const auto a = ddim_edit(image, render, cfg, *toy, IdentityCodec{}, g1);
  EXPECT_TRUE(torch::equal(a, ddim_edit(image, render, cfg, *toy, IdentityCodec{}, g2)));
  EXPECT_FALSE(torch::equal(a, ddim_edit(image, render, cfg, *toy, IdentityCodec{}, g3)));
}

TEST(Ddim, ErrorsCarryStepContext) {
  FailingDenoiser bad;
  try {
    ddim_edit_at(torch::rand({2, 2, 3}), torch::rand({2, 2, 3}), unit_guidance("x"), bad, IdentityCodec{}, 0.5,
                 torch::randn({2, 2, 3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "non_finite");
    EXPECT_NE(std::string(e.what()).find("denoise step 0"), std::string::npos);
  }
  EXPECT_THROW(ddim_edit_at(torch::rand({2, 2, 3}), torch::rand({3, 2, 3}), unit_guidance("x"), bad, IdentityCodec{}, 0.5,
                            torch::randn({2, 2, 3})),
               DimensionError);
}

TEST(EditConfigValidation, ListsEveryProblem) {
  EditConfig c;
  c.t_min = 0.9;
  c.t_max = 0.2;
  c.denoise_steps = 0;
  try {
    c.validate();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("t_min"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("denoise_steps"), std::string::npos);
  }
}

TEST(HueRules, DifferentInstructionsDifferOnlyInRuleRegion) {
  const auto ds = synth_sequence(testkit::tiny_scene(2, 32));
  const auto& f = ds.frames[0];
  auto transform = hue_rule_transform({{"blue", 120.0, "hair"}, {"pink", -100.0, "hair"}});
  const auto a = transform(f.image_gt, "Turn the hair blue", &f);
  const auto b = transform(f.image_gt, "turn the hair PINK", &f);
  const auto hair = f.masks.at("hair").unsqueeze(-1).expand_as(a) > 0.5;
  EXPECT_TRUE(torch::equal(a.masked_select(~hair), f.image_gt.masked_select(~hair)));
  EXPECT_TRUE(torch::equal(b.masked_select(~hair), f.image_gt.masked_select(~hair)));
  EXPECT_FALSE(torch::equal(a.masked_select(hair), b.masked_select(hair)));
  EXPECT_TRUE(torch::equal(transform(f.image_gt, "no keyword", &f), f.image_gt));

  auto bad = hue_rule_transform({{"blue", 120.0, "ears"}});
  EXPECT_THROW(bad(f.image_gt, "blue", &f), ValidationError);
}

TEST(WireFormat, RequestAndResponseRoundTrip) {
  DenoiseRequest req;
  req.request_id = 77;
  req.variant = Variant::Image;
  req.t = 0.375f;
  req.latent = torch::randn({4, 4, 3});
  req.image = torch::rand({4, 4, 3});
  req.instruction = "Turn the hair blue \xC3\xA9";
  const auto back = decode_request(encode_request(req));
  EXPECT_EQ(back.request_id, 77u);
  EXPECT_EQ(back.variant, Variant::Image);
  EXPECT_EQ(back.t, 0.375f);
  EXPECT_TRUE(torch::equal(back.latent, req.latent));
  EXPECT_TRUE(torch::equal(back.image, req.image));
  EXPECT_EQ(back.instruction, req.instruction);

  req.image = torch::Tensor();
  EXPECT_FALSE(decode_request(encode_request(req)).image.defined());

  DenoiseResponse resp{9, Variant::Full, 0.5f, torch::randn({2, 3})};
  const auto rb = decode_response(encode_response(resp));
  EXPECT_EQ(rb.request_id, 9u);
  EXPECT_TRUE(torch::equal(rb.eps, resp.eps));

  auto body = encode_request(req);
  body.pop_back();
  EXPECT_THROW(decode_request(body), ProtocolError);
  body = encode_request(req);
  body[8] = 7;  // variant tag
  EXPECT_THROW(decode_request(body), ProtocolError);
}

TEST(WireFormat, FramingOverSocketPair) {
  int fds[2];
  ASSERT_EQ(socketpair(AF_UNIX, SOCK_STREAM, 0, fds), 0);
  auto toy = toy_denoiser(fixed_shift(45.0));
  std::thread server([&] {
    serve_denoiser(fds[1], *toy);
    close(fds[1]);
  });
  DenoiseRequest req{3, Variant::Full, 0.4f, torch::randn({2, 2, 3}), torch::rand({2, 2, 3}), "x"};
  write_frame(fds[0], encode_request(req));
  std::vector<uint8_t> body;
  ASSERT_TRUE(read_frame(fds[0], body));
  const auto resp = decode_response(body);
  EXPECT_EQ(resp.request_id, 3u);
  const auto expected = toy->predict(req.latent, 0.4f, Variant::Full, req.image, "x");
  EXPECT_TRUE(torch::allclose(resp.eps, expected, 0, 1e-6));
  close(fds[0]);
  server.join();
}

TEST(ExternalBackend, MatchesInProcessToyOverUnixSocket) {
  testkit::TempDir tmp("sock");
  const auto path = (tmp.path() / "editor.sock").string();
  const int listener = socket(AF_UNIX, SOCK_STREAM, 0);
  ASSERT_GE(listener, 0);
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
  ASSERT_EQ(bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)), 0);
  ASSERT_EQ(listen(listener, 1), 0);

  auto served = toy_denoiser(fixed_shift(100.0));
  std::thread server([&] {
    const int conn = accept(listener, nullptr, nullptr);
    if (conn >= 0) {
      serve_denoiser(conn, *served);
      close(conn);
    }
  });

  const auto image = torch::rand({4, 4, 3});
  const auto render = torch::rand({4, 4, 3});
  const auto noise = torch::randn({4, 4, 3});
  auto local = toy_denoiser(fixed_shift(100.0));
  torch::Tensor remote_out;
  {
    ExternalDenoiser remote("unix:" + path);
    EXPECT_FALSE(remote.concurrent_safe());
    remote_out = ddim_edit_at(image, render, unit_guidance("x"), remote, IdentityCodec{}, 0.7, noise);
  }
  server.join();
  close(listener);
  const auto local_out = ddim_edit_at(image, render, unit_guidance("x"), *local, IdentityCodec{}, 0.7, noise);
  EXPECT_TRUE(torch::allclose(remote_out, local_out, 0, 1e-6));
}

TEST(ExternalBackend, BadAddresses) {
  EXPECT_THROW(ExternalDenoiser(""), ConfigError);
  // Connection happens on first use.
  const auto z = torch::zeros({2, 2, 3});
  ExternalDenoiser no_port("no-port-here");
  EXPECT_THROW(no_port.predict(z, 0.5, Variant::Uncond, z, ""), ConfigError);
  ExternalDenoiser missing("unix:/nonexistent/avedit.sock");
  EXPECT_THROW(missing.predict(z, 0.5, Variant::Uncond, z, ""), IoError);
}
