#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sor/types.hpp"

namespace sor {

// Parameter-free covariate feature map x -> v(x).  Feature evaluation never
// depends on model coefficients, so builders can precompute feature matrices
// once per dataset.
class FeatureMap {
 public:
  using Fn = std::function<Vector(const Vector&)>;

  FeatureMap() : dim_(0) {}
  FeatureMap(int dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}

  int dim() const { return dim_; }
  bool empty() const { return dim_ == 0; }

  Vector operator()(const Vector& x) const;

  static FeatureMap intercept_only();
  // (1, x_1, ..., x_d)
  static FeatureMap intercept_plus_all(int d_in);
  // (1, x_{cols[0]}, x_{cols[1]}, ...)
  static FeatureMap intercept_plus_columns(std::vector<int> cols);
  // Columns without an intercept.
  static FeatureMap columns(std::vector<int> cols);

 private:
  int dim_;
  Fn fn_;
};

// Log odds ratio design u(x, y) with the reference normalization u(x, 0) = 0.
// Every design used by the estimators is linear in y, u(x, y) = y * s(x),
// which is what the Gaussian closed-form tilting path requires; a general
// (x, y) form is kept for the quadrature fallback.
struct OddsRatioDesign {
  int dim = 0;
  bool linear_in_y = false;
  std::function<Vector(const Vector& x, double y)> u;
  std::function<Vector(const Vector& x)> slope;  // s(x), set iff linear_in_y

  Vector eval(const Vector& x, double y) const { return u(x, y); }

  // u(x, y) = y  (the default model: one shared odds ratio coefficient).
  static OddsRatioDesign outcome_only();
  // u(x, y) = y * f(x), e.g. f = (1, gender) for outcome-by-group odds ratios.
  static OddsRatioDesign outcome_times(FeatureMap f);
  // Arbitrary u; Gaussian tilting falls back to quadrature.
  static OddsRatioDesign general(int dim, std::function<Vector(const Vector&, double)> u);
};

}  // namespace sor
