#include "sor/system.hpp"

namespace sor {

int ParameterLayout::dim() const {
  return slices.empty() ? 0 : slices.back().offset + slices.back().size;
}

void ParameterLayout::add(const std::string& name, int size) {
  if (size <= 0) throw std::invalid_argument("parameter block " + name + " has size 0");
  if (has(name)) throw std::invalid_argument("duplicate parameter block " + name);
  slices.push_back({name, dim(), size});
}

bool ParameterLayout::has(const std::string& name) const {
  for (const auto& s : slices)
    if (s.name == name) return true;
  return false;
}

const ParameterLayout::Slice& ParameterLayout::slice(const std::string& name) const {
  for (const auto& s : slices)
    if (s.name == name) return s;
  throw std::invalid_argument("no parameter block named " + name);
}

Vector ParameterLayout::block(const Vector& params, const std::string& name) const {
  const Slice& s = slice(name);
  return params.segment(s.offset, s.size);
}

std::vector<std::string> ParameterLayout::component_names() const {
  std::vector<std::string> names;
  for (const auto& s : slices) {
    if (s.size == 1) {
      names.push_back(s.name);
    } else {
      for (int j = 0; j < s.size; ++j) names.push_back(s.name + "[" + std::to_string(j) + "]");
    }
  }
  return names;
}

PositivityError::PositivityError(int unit_, int call_, double value_)
    : std::runtime_error("positivity violated at unit " + std::to_string(unit_) + ", call " +
                         std::to_string(call_ + 1) + ": propensity " + std::to_string(value_)),
      unit(unit_),
      call(call_),
      value(value_) {}

Vector EquationSystem::residual(const Vector& params) const {
  if (params.size() != dim()) {
    throw std::invalid_argument("parameter vector has dimension " +
                                std::to_string(params.size()) + ", system expects " +
                                std::to_string(dim()));
  }
  Vector g(dim());
  eval_(params, g, nullptr);
  return g;
}

Matrix EquationSystem::unit_contributions(const Vector& params) const {
  if (params.size() != dim()) {
    throw std::invalid_argument("parameter vector has dimension " +
                                std::to_string(params.size()) + ", system expects " +
                                std::to_string(dim()));
  }
  Vector g(dim());
  Matrix rows(n_units_, dim());
  eval_(params, g, &rows);
  return rows;
}

}  // namespace sor
