#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mros/tensor.hpp"

namespace mros::test {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), random_values(n, rng, lo, hi), requires_grad);
}

inline std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, tiny)
  std::size_t checked = 0;
};

// Central differences with step h on every element of every input, compared
// against the backward pass of f(inputs).
inline GradCheck grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                            double h = 1e-3) {
  for (auto& t : inputs) t.zero_grad();
  Tensor out = f(inputs);
  out.backward();
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  GradCheck r;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const auto grad = t.grad();
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = keep + h;
        plus = f(inputs).item();
        data[i] = keep - h;
        minus = f(inputs).item();
        data[i] = keep;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double analytic = grad.empty() ? 0.0 : grad[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++r.checked;
    }
  }
  const double scale = std::sqrt(a2) + std::sqrt(n2);
  r.rel_error = scale < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / scale;
  return r;
}

// Fixed random projection to a scalar so every output element matters.
inline Tensor project(const Tensor& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w(t.shape(), random_values(t.numel(), rng), false);
  return sum(mul(t, w));
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("mros_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace mros::test
