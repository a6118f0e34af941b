#pragma once

// Independent reference computations used by unit and acceptance tests. They
// deliberately avoid the library's own code paths.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace avedit::oracle {

struct Profile {
  std::function<double(double)> sigma;
  std::function<double(double)> feature;
};

// Smooth, strictly non-negative density and a bounded feature on [0,1].
inline Profile random_smooth_profile(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double a = 0.5 + 2.5 * u(rng);
  const double b = a * 0.9 * u(rng);
  const double fs = 1.0 + std::floor(2.0 * u(rng));
  const double ps = 2.0 * M_PI * u(rng);
  const double c = 0.5 * u(rng);
  const double fc = 1.0 + std::floor(2.0 * u(rng));
  const double pc = 2.0 * M_PI * u(rng);
  Profile p;
  p.sigma = [=](double t) { return a + b * std::sin(2.0 * M_PI * fs * t + ps); };
  p.feature = [=](double t) { return 0.5 + c * std::cos(2.0 * M_PI * fc * t + pc); };
  return p;
}

struct Integral {
  double feature = 0.0;
  double opacity = 0.0;
};

// Trapezoid integration of C = int T(t) sigma(t) F(t) dt with
// T(t) = exp(-int_near^t sigma), on `points` nodes.
inline Integral dense_volume_integral(const Profile& p, double near, double far, int points = 10000) {
  const double h = (far - near) / (points - 1);
  double tau = 0.0;
  double prev_sigma = p.sigma(near);
  double prev_f = std::exp(-tau) * prev_sigma * p.feature(near);
  double prev_o = std::exp(-tau) * prev_sigma;
  Integral out;
  for (int i = 1; i < points; ++i) {
    const double t = near + h * i;
    const double s = p.sigma(t);
    tau += 0.5 * h * (prev_sigma + s);
    const double f = std::exp(-tau) * s * p.feature(t);
    const double o = std::exp(-tau) * s;
    out.feature += 0.5 * h * (prev_f + f);
    out.opacity += 0.5 * h * (prev_o + o);
    prev_sigma = s;
    prev_f = f;
    prev_o = o;
  }
  return out;
}

// Two samples with unit density and unit spacing, worked by hand:
// w1 = 1 - e^-1, w2 = e^-1 (1 - e^-1).
struct TwoSample {
  double w1 = 1.0 - std::exp(-1.0);
  double w2 = std::exp(-1.0) * (1.0 - std::exp(-1.0));
  double feature(double f1, double f2) const { return w1 * f1 + w2 * f2; }
  double opacity() const { return w1 + w2; }
};

}  // namespace avedit::oracle
