#include "sor/design.hpp"

#include <stdexcept>

namespace sor {

Vector FeatureMap::operator()(const Vector& x) const {
  if (!fn_) throw std::invalid_argument("feature map is empty");
  Vector v = fn_(x);
  if (v.size() != dim_) {
    throw std::invalid_argument("feature map returned dimension " +
                                std::to_string(v.size()) + ", declared " +
                                std::to_string(dim_));
  }
  return v;
}

FeatureMap FeatureMap::intercept_only() {
  return FeatureMap(1, [](const Vector&) { return Vector::Ones(1); });
}

FeatureMap FeatureMap::intercept_plus_all(int d_in) {
  return FeatureMap(d_in + 1, [d_in](const Vector& x) {
    if (x.size() != d_in) {
      throw std::invalid_argument("covariate vector has dimension " +
                                  std::to_string(x.size()) + ", design expects " +
                                  std::to_string(d_in));
    }
    Vector v(d_in + 1);
    v(0) = 1.0;
    v.tail(d_in) = x;
    return v;
  });
}

FeatureMap FeatureMap::intercept_plus_columns(std::vector<int> cols) {
  const int d = static_cast<int>(cols.size()) + 1;
  return FeatureMap(d, [cols = std::move(cols), d](const Vector& x) {
    Vector v(d);
    v(0) = 1.0;
    for (std::size_t j = 0; j < cols.size(); ++j) v(static_cast<int>(j) + 1) = x(cols[j]);
    return v;
  });
}

FeatureMap FeatureMap::columns(std::vector<int> cols) {
  const int d = static_cast<int>(cols.size());
  return FeatureMap(d, [cols = std::move(cols), d](const Vector& x) {
    Vector v(d);
    for (std::size_t j = 0; j < cols.size(); ++j) v(static_cast<int>(j)) = x(cols[j]);
    return v;
  });
}

OddsRatioDesign OddsRatioDesign::outcome_only() {
  OddsRatioDesign d;
  d.dim = 1;
  d.linear_in_y = true;
  d.u = [](const Vector&, double y) { return Vector::Constant(1, y); };
  d.slope = [](const Vector&) { return Vector::Ones(1); };
  return d;
}

OddsRatioDesign OddsRatioDesign::outcome_times(FeatureMap f) {
  OddsRatioDesign d;
  d.dim = f.dim();
  d.linear_in_y = true;
  d.u = [f](const Vector& x, double y) { return Vector(y * f(x)); };
  d.slope = [f](const Vector& x) { return f(x); };
  return d;
}

OddsRatioDesign OddsRatioDesign::general(int dim,
                                         std::function<Vector(const Vector&, double)> u) {
  OddsRatioDesign d;
  d.dim = dim;
  d.linear_in_y = false;
  d.u = std::move(u);
  return d;
}

}  // namespace sor
