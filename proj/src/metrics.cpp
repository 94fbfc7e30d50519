#include "fddm/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "fddm/errors.hpp"

namespace fddm {

namespace {

std::vector<double> in_mask_values(const Grid2D& dose, const Grid2D& mask) {
  if (!dose.same_shape(mask)) throw DimensionError("dose and mask shapes differ");
  std::vector<double> vals;
  for (std::size_t i = 0; i < dose.values.size(); ++i)
    if (mask.values[i] > 0.5) vals.push_back(dose.values[i]);
  if (vals.empty()) throw ParameterError("empty structure mask");
  return vals;
}

}  // namespace

double dose_percentile(const Grid2D& dose, const Grid2D& mask, double m) {
  if (m <= 0.0 || m > 100.0) throw ParameterError("percentile must be in (0, 100]");
  std::vector<double> vals = in_mask_values(dose, mask);
  std::sort(vals.begin(), vals.end(), std::greater<>());
  const auto n = static_cast<double>(vals.size());
  // ceil with a tiny guard so exact products (e.g. 50% of 100) do not round up.
  auto need = static_cast<std::size_t>(std::ceil(m * n / 100.0 - 1e-9));
  need = std::clamp<std::size_t>(need, 1, vals.size());
  return vals[need - 1];
}

double mean_dose(const Grid2D& dose, const Grid2D& mask) {
  std::vector<double> vals = in_mask_values(dose, mask);
  double s = 0.0;
  for (double v : vals) s += v;
  return s / static_cast<double>(vals.size());
}

double conformity_index(const Grid2D& dose, const Grid2D& ptv_mask, double prescription) {
  if (prescription <= 0.0) throw ParameterError("prescription must be positive");
  if (!dose.same_shape(ptv_mask)) throw DimensionError("dose and mask shapes differ");
  std::size_t v_ptv = 0, v_iso = 0, overlap = 0;
  for (std::size_t i = 0; i < dose.values.size(); ++i) {
    const bool in_ptv = ptv_mask.values[i] > 0.5;
    const bool in_iso = dose.values[i] >= prescription;
    v_ptv += in_ptv;
    v_iso += in_iso;
    overlap += in_ptv && in_iso;
  }
  if (v_ptv == 0) throw ParameterError("empty PTV mask");
  if (v_iso == 0) return 0.0;
  return static_cast<double>(overlap) * static_cast<double>(overlap) /
         (static_cast<double>(v_ptv) * static_cast<double>(v_iso));
}

DvhCurve dvh(const Grid2D& dose, const Grid2D& mask, double bin_width, double max_dose) {
  if (bin_width <= 0.0) throw ParameterError("bin width must be positive");
  if (max_dose < 0.0) throw ParameterError("max dose must be non-negative");
  std::vector<double> vals = in_mask_values(dose, mask);
  const auto n_bins = static_cast<int>(std::ceil(max_dose / bin_width - 1e-9));

  DvhCurve curve;
  for (int b = 0; b <= n_bins; ++b) {
    const double edge = bin_width * b;
    std::size_t count = 0;
    for (double v : vals) count += (v >= edge);
    curve.edges.push_back(edge);
    curve.fraction.push_back(static_cast<double>(count) / static_cast<double>(vals.size()));
  }
  return curve;
}

StructureMetrics compute_metrics(const Grid2D& dose, const Grid2D& mask, double prescription, bool with_ci) {
  StructureMetrics m;
  m.d2 = dose_percentile(dose, mask, 2.0);
  m.d50 = dose_percentile(dose, mask, 50.0);
  m.dmean = mean_dose(dose, mask);
  if (with_ci) m.ci = conformity_index(dose, mask, prescription);
  return m;
}

std::vector<DeltaRow> delta_rows(const std::string& structure, const std::vector<PairedCase>& cases) {
  const bool with_ci = structure == "ptv";
  std::vector<DeltaRow> rows;
  for (const auto& c : cases) {
    if (c.pred == nullptr || c.truth == nullptr || c.mask == nullptr)
      throw ContractError("unpaired case " + c.id);
    const StructureMetrics p = compute_metrics(*c.pred, *c.mask, c.prescription, with_ci);
    const StructureMetrics t = compute_metrics(*c.truth, *c.mask, c.prescription, with_ci);
    DeltaRow row;
    row.case_id = c.id;
    row.structure = structure;
    row.has_ci = with_ci;
    if (with_ci) row.d_ci = p.ci - t.ci;
    row.d_d2 = p.d2 - t.d2;
    row.d_d50 = p.d50 - t.d50;
    row.d_dmean = p.dmean - t.dmean;
    rows.push_back(row);
  }
  return rows;
}

namespace {

// Population mean/std of |x|; the parenthetical in value(std) reports.
void abs_stats(const std::vector<double>& xs, double& mean, double& stddev) {
  if (xs.empty()) {
    mean = stddev = 0.0;
    return;
  }
  double s = 0.0;
  for (double x : xs) s += std::abs(x);
  mean = s / static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (std::abs(x) - mean) * (std::abs(x) - mean);
  stddev = std::sqrt(v / static_cast<double>(xs.size()));
}

}  // namespace

DeltaSummary summarize_deltas(const std::string& structure, const std::vector<DeltaRow>& rows) {
  DeltaSummary s;
  s.structure = structure;
  std::vector<double> ci, d2, d50, dmean;
  for (const auto& r : rows) {
    if (r.structure != structure) continue;
    s.cases += 1;
    s.has_ci = s.has_ci || r.has_ci;
    if (r.has_ci) ci.push_back(r.d_ci);
    d2.push_back(r.d_d2);
    d50.push_back(r.d_d50);
    dmean.push_back(r.d_dmean);
  }
  abs_stats(ci, s.mean_abs_ci, s.std_abs_ci);
  abs_stats(d2, s.mean_abs_d2, s.std_abs_d2);
  abs_stats(d50, s.mean_abs_d50, s.std_abs_d50);
  abs_stats(dmean, s.mean_abs_dmean, s.std_abs_dmean);
  return s;
}

}  // namespace fddm
