#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmmrec/tape.hpp"
#include "pmmrec/tensor.hpp"

namespace pmmrec {

/// A differentiable program: builds a scalar from tracked inputs on a tape.
using Program = std::function<Var(Tape&, std::span<const Var>)>;

struct ForwardBackwardResult {
  Tensor value;
  std::vector<Tensor> gradients;
};

/// Evaluates `program` at `inputs` and returns the value together with
/// ∂value/∂inputs[i] for every input.
inline ForwardBackwardResult forward_backward(const Program& program,
                                              const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.input(t));
  Var out = program(tape, vars);
  tape.backward(out);
  ForwardBackwardResult result{out.value(), {}};
  for (const Var& v : vars) result.gradients.push_back(tape.grad(v));
  return result;
}

/// Relative error with a floor on the denominator. Central differences at
/// step 1e-5 carry about 1e-10 of rounding noise for O(1) losses, so
/// gradients below the floor are compared absolutely.
inline constexpr double kRelativeErrorFloor = 1e-5;

inline double relative_error(double analytic, double numeric,
                             double floor = kRelativeErrorFloor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct GradientCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(),
                       [](const GradientCheckEntry& e) { return e.passed; });
  }
  double max_relative_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_relative_error);
    return m;
  }
};

namespace detail {
inline void validate_check_args(double step, double tol) {
  if (!(step > 0.0)) throw std::invalid_argument("gradient_check: step must be > 0");
  if (!(tol > 0.0)) throw std::invalid_argument("gradient_check: tol must be > 0");
}
}  // namespace detail

/// Compares analytic gradients of `program` at `point` with central
/// differences, element by element.
inline GradientCheckReport gradient_check(const Program& program, std::vector<Tensor> point,
                                          double step, double tol) {
  detail::validate_check_args(step, tol);
  for (const Tensor& t : point) {
    if (!t.all_finite()) throw std::invalid_argument("gradient_check: non-finite point");
  }
  const ForwardBackwardResult analytic = forward_backward(program, point);
  auto eval = [&](const std::vector<Tensor>& at) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& t : at) vars.push_back(tape.constant(t));
    return program(tape, vars).value().item();
  };
  GradientCheckReport report;
  report.tolerance = tol;
  for (std::size_t i = 0; i < point.size(); ++i) {
    GradientCheckEntry entry;
    entry.name = "input" + std::to_string(i);
    for (std::size_t k = 0; k < point[i].size(); ++k) {
      const double orig = point[i][k];
      point[i][k] = orig + step;
      const double up = eval(point);
      point[i][k] = orig - step;
      const double down = eval(point);
      point[i][k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic.gradients[i][k], numeric);
      if (err > entry.max_relative_error) {
        entry.max_relative_error = err;
        entry.worst_index = k;
      }
      ++entry.checked;
    }
    entry.passed = entry.max_relative_error <= tol;
    report.entries.push_back(entry);
  }
  return report;
}

/// Parameter-level check: `loss` builds the scalar from the live values of
/// `params`. Each element is perturbed in place and restored bit-exactly.
inline GradientCheckReport check_parameter_gradients(const std::function<Var(Tape&)>& loss,
                                                     const std::vector<Parameter*>& params,
                                                     double step, double tol) {
  detail::validate_check_args(step, tol);
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = loss(tape);
    tape.backward(out);
  }
  auto eval = [&] {
    Tape tape(false);
    return loss(tape).value().item();
  };
  GradientCheckReport report;
  report.tolerance = tol;
  for (Parameter* p : params) {
    GradientCheckEntry entry;
    entry.name = p->name;
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double orig = p->value[k];
      p->value[k] = orig + step;
      const double up = eval();
      p->value[k] = orig - step;
      const double down = eval();
      p->value[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(p->grad[k], numeric);
      if (err > entry.max_relative_error) {
        entry.max_relative_error = err;
        entry.worst_index = k;
      }
      ++entry.checked;
    }
    entry.passed = entry.max_relative_error <= tol;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace pmmrec
