#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fddm/grid.hpp"

namespace fddm {

inline constexpr std::array<const char*, 5> kStructureNames = {"ptv", "st", "fhl", "fhr", "bld"};

// One 2D planning case: CT-like image, target/organ masks, and the
// ground-truth dose with deliberate sharp beam edges.
struct PlanningSample {
  std::string id;
  Grid2D ct;             // normalized [0,1]
  Grid2D mask_ptv, mask_st, mask_fhl, mask_fhr, mask_bld;  // binary
  Grid2D dose;           // Gy, >= 0
  double prescription = 0.0;  // Gy
  std::int64_t seed_index = 0;
  std::string split;     // "train" | "val" | "test" (may be empty before assignment)

  [[nodiscard]] const Grid2D& mask(const std::string& name) const;
  [[nodiscard]] std::vector<const Grid2D*> mask_list() const {
    return {&mask_ptv, &mask_st, &mask_fhl, &mask_fhr, &mask_bld};
  }
};

struct PhantomConfig {
  int size = 64;                  // square slices; must be divisible by 16
  int beams = 9;
  double prescription_min = 45.0; // Gy
  double prescription_max = 55.0;
  double penumbra = 1.2;          // Gaussian sigma, voxels
  double attenuation = 0.04;      // per voxel
  double jitter = 0.06;           // fractional geometry jitter
  std::uint64_t seed = 0;

  void validate() const;
};

// Deterministic in (config, index): same arguments always produce the same
// sample, independent of call order.
PlanningSample generate_sample(const PhantomConfig& cfg, std::int64_t index);

// Dataset directory: manifest.json + samples/<id>/{ct,dose,mask_*}.arr.
void write_dataset(const std::vector<PlanningSample>& samples, const PhantomConfig& cfg, const std::string& dir);
std::vector<PlanningSample> read_dataset(const std::string& dir);
std::vector<PlanningSample> read_dataset_split(const std::string& dir, const std::string& split);

// Deterministic disjoint exhaustive partition; counts must sum to n_total.
std::vector<std::string> split_dataset(std::int64_t n_total, std::array<std::int64_t, 3> counts,
                                       std::uint64_t seed);

// Default split sizing used by the CLI when explicit counts are not given:
// ~8% validation, ~17% test (rounded), remainder training.
std::array<std::int64_t, 3> default_split_counts(std::int64_t n_total);

// ---- array files -----------------------------------------------------------

inline constexpr char kArrayMagic[9] = "FDDMARR1";

void write_array(const std::string& path, const Grid2D& grid);
Grid2D read_array(const std::string& path);

}  // namespace fddm
