#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vprda/autodiff.hpp"
#include "vprda/tensor.hpp"

namespace testing {

inline vprda::Tensor random_tensor(vprda::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  vprda::Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

inline vprda::Tensor uniform_tensor(vprda::Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  vprda::Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Builds a scalar graph from leaves holding `inputs`.
using ScalarFn = std::function<vprda::Var(const std::vector<vprda::Var>&)>;

/// Largest relative error between backprop gradients and central differences
/// over every input tensor.
inline double gradient_error(const ScalarFn& f, std::vector<vprda::Tensor> inputs, double h = 1e-5) {
  std::vector<vprda::Var> leaves;
  for (const auto& t : inputs) leaves.push_back(vprda::leaf(t));
  const vprda::Var out = f(leaves);
  vprda::backward(out);
  double worst = 0.0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const auto analytic = leaves[p].grad().vec();
    std::vector<double> numeric(inputs[p].size());
    for (std::size_t i = 0; i < inputs[p].size(); ++i) {
      const double keep = inputs[p][i];
      auto eval = [&](double v) {
        inputs[p][i] = v;
        std::vector<vprda::Var> ls;
        for (const auto& t : inputs) ls.push_back(vprda::leaf(t));
        return f(ls).item();
      };
      numeric[i] = (eval(keep + h) - eval(keep - h)) / (2.0 * h);
      inputs[p][i] = keep;
    }
    worst = std::max(worst, rel_error(analytic, numeric));
  }
  return worst;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("vprda_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace testing
