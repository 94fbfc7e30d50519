#pragma once

#include <string>
#include <vector>

#include "fddm/grid.hpp"

namespace fddm {

// Volumetric dose percentile D_m: the largest dose D such that at least
// ceil(m% * N) in-mask voxels receive >= D. Sorted-order definition, no
// interpolation; reduces to min/max at m=100 / small m.
double dose_percentile(const Grid2D& dose, const Grid2D& mask, double m);

double mean_dose(const Grid2D& dose, const Grid2D& mask);

// Paddick conformity index with the >= prescription isodose; 0 when the
// isodose volume is empty.
double conformity_index(const Grid2D& dose, const Grid2D& ptv_mask, double prescription);

struct DvhCurve {
  std::vector<double> edges;     // Gy, ascending from 0 in bin_width steps
  std::vector<double> fraction;  // volume fraction receiving >= edge
};

DvhCurve dvh(const Grid2D& dose, const Grid2D& mask, double bin_width, double max_dose);

// ---- prediction-vs-truth reporting --------------------------------------------

struct StructureMetrics {
  double ci = 0.0;  // meaningful for the PTV only
  double d2 = 0.0, d50 = 0.0, dmean = 0.0;
};

StructureMetrics compute_metrics(const Grid2D& dose, const Grid2D& mask, double prescription, bool with_ci);

// Signed per-case differences, prediction minus ground truth.
struct DeltaRow {
  std::string case_id, structure;
  bool has_ci = false;
  double d_ci = 0.0, d_d2 = 0.0, d_d50 = 0.0, d_dmean = 0.0;
};

// mean(|delta|) with the population standard deviation of |delta|.
struct DeltaSummary {
  std::string structure;
  int cases = 0;
  bool has_ci = false;
  double mean_abs_ci = 0.0, std_abs_ci = 0.0;
  double mean_abs_d2 = 0.0, std_abs_d2 = 0.0;
  double mean_abs_d50 = 0.0, std_abs_d50 = 0.0;
  double mean_abs_dmean = 0.0, std_abs_dmean = 0.0;
};

struct PairedCase {
  std::string id;
  const Grid2D* pred = nullptr;
  const Grid2D* truth = nullptr;
  const Grid2D* mask = nullptr;  // shared between pred and truth by contract
  double prescription = 0.0;
};

// One structure at a time: pass the paired cases for that structure.
std::vector<DeltaRow> delta_rows(const std::string& structure, const std::vector<PairedCase>& cases);
DeltaSummary summarize_deltas(const std::string& structure, const std::vector<DeltaRow>& rows);

}  // namespace fddm
