#pragma once

// Central finite-difference verification of tape gradients. Always runs in
// 64-bit; the computation under test must be deterministic (verified by
// comparing two forward evaluations bit for bit).

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "tsr/tape.hpp"

namespace tsr {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0;
  bool ok = true;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double max_rel_err = 0;
  bool all_ok = true;
};

// build(tape, param_ids) must construct a scalar loss from the given
// parameter leaves and return its ValueId.
template <typename BuildFn>
GradCheckReport grad_check(BuildFn&& build,
                           const std::vector<std::pair<std::string, Tensor<double>>>& params,
                           double step = 1e-5, double tolerance = 1e-4) {
  auto eval = [&](const std::vector<std::pair<std::string, Tensor<double>>>& ps) {
    Tape<double> tape;
    std::vector<ValueId> ids;
    ids.reserve(ps.size());
    for (const auto& [name, tensor] : ps) ids.push_back(tape.leaf(tensor));
    ValueId loss = build(tape, ids);
    return tape.value(loss)[0];
  };

  // Reject non-deterministic computations outright.
  const double probe1 = eval(params);
  const double probe2 = eval(params);
  if (std::memcmp(&probe1, &probe2, sizeof(double)) != 0) {
    throw std::runtime_error("grad_check: computation is not deterministic");
  }

  // Analytic gradients.
  Tape<double> tape;
  std::vector<ValueId> ids;
  for (const auto& [name, tensor] : params) ids.push_back(tape.leaf(tensor, true));
  ValueId loss = build(tape, ids);
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (ValueId id : ids) analytic.push_back(tape.grad(id));

  GradCheckReport report;
  auto perturbed = params;
  for (size_t p = 0; p < params.size(); ++p) {
    GradCheckRow row;
    row.name = params[p].first;
    Tensor<double>& t = perturbed[p].second;
    for (int64_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      const double up = eval(perturbed);
      t[i] = saved - step;
      const double down = eval(perturbed);
      t[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      row.max_rel_err = std::max(row.max_rel_err, std::abs(a - numeric) / denom);
    }
    row.ok = row.max_rel_err <= tolerance;
    report.max_rel_err = std::max(report.max_rel_err, row.max_rel_err);
    report.all_ok = report.all_ok && row.ok;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace tsr
