#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sor/types.hpp"

namespace sor {

// Named slices of a packed parameter vector, e.g. alpha1 | alpha2 | gamma | theta.
struct ParameterLayout {
  struct Slice {
    std::string name;
    int offset;
    int size;
  };

  std::vector<Slice> slices;

  int dim() const;
  void add(const std::string& name, int size);
  bool has(const std::string& name) const;
  const Slice& slice(const std::string& name) const;  // throws if absent
  Vector block(const Vector& params, const std::string& name) const;
  std::vector<std::string> component_names() const;  // one name per coordinate
};

// A contributing unit's response propensity left the admissible range.
struct PositivityError : std::runtime_error {
  PositivityError(int unit, int call, double value);
  int unit;
  int call;
  double value;
};

// Square stacked moment system g(params) = 0.  g is the weight-normalized sum
// of per-unit contributions plus population-expectation constants:
//   g = sum_i (w_i / sum w) * psi_i(params),
// where psi_i already carries the unit's share of every constant term.  The
// evaluator fills g and, when requested, the n x dim matrix of psi_i rows
// scaled by w_i / sum w (so that B = sum_i row_i row_i' in the sandwich).
class EquationSystem {
 public:
  using EvalFn = std::function<void(const Vector& params, Vector& g, Matrix* unit_rows)>;

  EquationSystem() = default;
  EquationSystem(ParameterLayout layout, int n_units, EvalFn eval)
      : layout_(std::move(layout)), n_units_(n_units), eval_(std::move(eval)) {
    if (layout_.dim() <= 0) throw std::invalid_argument("equation system has no parameters");
  }

  const ParameterLayout& layout() const { return layout_; }
  int dim() const { return layout_.dim(); }
  int n_units() const { return n_units_; }

  // May throw PositivityError naming the offending unit.
  Vector residual(const Vector& params) const;

  // Rows are the scaled per-unit contributions described above; their column
  // sums reproduce residual(params).
  Matrix unit_contributions(const Vector& params) const;

 private:
  ParameterLayout layout_;
  int n_units_ = 0;
  EvalFn eval_;
};

}  // namespace sor
