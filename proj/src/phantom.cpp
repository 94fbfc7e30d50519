#include "fddm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "fddm/binio.hpp"
#include "fddm/checksum.hpp"
#include "fddm/errors.hpp"
#include "fddm/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fddm {

const Grid2D& PlanningSample::mask(const std::string& name) const {
  if (name == "ptv") return mask_ptv;
  if (name == "st") return mask_st;
  if (name == "fhl") return mask_fhl;
  if (name == "fhr") return mask_fhr;
  if (name == "bld") return mask_bld;
  throw ParameterError("unknown structure '" + name + "'");
}

void PhantomConfig::validate() const {
  if (size < 16 || size % 16 != 0) throw ParameterError("slice size must be a positive multiple of 16");
  if (beams < 1) throw ParameterError("need at least one beam");
  if (prescription_min <= 0.0 || prescription_max < prescription_min)
    throw ParameterError("bad prescription range");
  if (penumbra <= 0.0 || attenuation <= 0.0) throw ParameterError("penumbra and attenuation must be positive");
  if (jitter < 0.0 || jitter > 0.3) throw ParameterError("jitter must be in [0, 0.3]");
}

namespace {

struct Ellipse {
  double cx, cy, rx, ry;

  [[nodiscard]] bool contains(double x, double y) const {
    const double u = (x - cx) / rx, v = (y - cy) / ry;
    return u * u + v * v <= 1.0;
  }
};

Grid2D rasterize(const Ellipse& e, const Ellipse& clip, int size) {
  Grid2D g(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      if (e.contains(c, r) && clip.contains(c, r)) g.at(r, c) = 1.0;
  return g;
}

bool masks_overlap(const Grid2D& a, const Grid2D& b) {
  for (std::size_t i = 0; i < a.values.size(); ++i)
    if (a.values[i] > 0.5 && b.values[i] > 0.5) return true;
  return false;
}

// Distance from the upstream body-surface entry point to p along direction d
// (unit), for a point inside the ellipse: the larger root of the quadratic
// for the line p - s*d intersecting the boundary.
double entry_depth(const Ellipse& body, double px, double py, double dx, double dy) {
  const double u0 = (px - body.cx) / body.rx, u1 = dx / body.rx;
  const double v0 = (py - body.cy) / body.ry, v1 = dy / body.ry;
  const double a = u1 * u1 + v1 * v1;
  const double b = -2.0 * (u0 * u1 + v0 * v1);
  const double c = u0 * u0 + v0 * v0 - 1.0;
  const double disc = b * b - 4.0 * a * c;
  if (disc <= 0.0 || a == 0.0) return 0.0;  // grazing; treat as surface
  return (-b + std::sqrt(disc)) / (2.0 * a);
}

void gaussian_blur(Grid2D& g, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(k + radius)];
  }
  for (double& w : kernel) w /= sum;

  Grid2D tmp(g.height, g.width);
  for (int r = 0; r < g.height; ++r)
    for (int c = 0; c < g.width; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int cc = c + k;
        if (cc < 0 || cc >= g.width) continue;
        acc += kernel[static_cast<std::size_t>(k + radius)] * g.at(r, cc);
      }
      tmp.at(r, c) = acc;
    }
  for (int r = 0; r < g.height; ++r)
    for (int c = 0; c < g.width; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int rr = r + k;
        if (rr < 0 || rr >= g.height) continue;
        acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.at(rr, c);
      }
      g.at(r, c) = acc;
    }
}

void quantize_f32(Grid2D& g) {
  for (double& v : g.values) v = static_cast<double>(static_cast<float>(v));
}

std::string sample_id(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%05lld", static_cast<long long>(index));
  return buf;
}

}  // namespace

PlanningSample generate_sample(const PhantomConfig& cfg, std::int64_t index) {
  cfg.validate();
  if (index < 0) throw ParameterError("sample index must be non-negative");
  SeededRng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const int S = cfg.size;
  const double Sf = static_cast<double>(S);
  const double J = cfg.jitter;
  auto jit = [&](double base, double spread) { return base + spread * rng.uniform(-1.0, 1.0); };

  PlanningSample s;
  s.id = sample_id(index);
  s.seed_index = index;
  s.prescription = rng.uniform(cfg.prescription_min, cfg.prescription_max);

  // Geometry. Draw order is fixed; overlap retries below never consume
  // randomness, so determinism is preserved.
  const Ellipse body{jit(0.50 * Sf, J * Sf), jit(0.50 * Sf, J * Sf), jit(0.44 * Sf, J * 0.3 * Sf),
                     jit(0.38 * Sf, J * 0.3 * Sf)};
  const Ellipse ptv{jit(body.cx, J * Sf), jit(body.cy + 0.02 * Sf, J * Sf), jit(0.11 * Sf, J * 0.4 * Sf),
                    jit(0.10 * Sf, J * 0.4 * Sf)};
  std::array<Ellipse, 4> organs = {
      Ellipse{jit(body.cx + 0.16 * Sf, J * Sf), jit(body.cy - 0.16 * Sf, J * Sf), jit(0.12 * Sf, J * 0.3 * Sf),
              jit(0.07 * Sf, J * 0.3 * Sf)},  // ST
      Ellipse{jit(body.cx - 0.30 * Sf, J * 0.5 * Sf), jit(body.cy + 0.06 * Sf, J * 0.5 * Sf),
              jit(0.07 * Sf, J * 0.3 * Sf), jit(0.07 * Sf, J * 0.3 * Sf)},  // FHL
      Ellipse{jit(body.cx + 0.30 * Sf, J * 0.5 * Sf), jit(body.cy + 0.06 * Sf, J * 0.5 * Sf),
              jit(0.07 * Sf, J * 0.3 * Sf), jit(0.07 * Sf, J * 0.3 * Sf)},  // FHR
      Ellipse{jit(body.cx, J * Sf), jit(body.cy - 0.24 * Sf, J * 0.5 * Sf), jit(0.10 * Sf, J * 0.3 * Sf),
              jit(0.07 * Sf, J * 0.3 * Sf)},  // BLD
  };

  s.mask_ptv = rasterize(ptv, body, S);
  double ptv_count = 0.0;
  for (double v : s.mask_ptv.values) ptv_count += v;
  if (ptv_count < 4.0) throw GenerationError(s.id + ": target volume degenerate");

  // Push organs radially away from the target until disjoint.
  std::array<Grid2D, 4> organ_masks;
  for (std::size_t k = 0; k < organs.size(); ++k) {
    Ellipse e = organs[k];
    Grid2D m = rasterize(e, body, S);
    int retries = 0;
    while (masks_overlap(m, s.mask_ptv)) {
      if (++retries > 50) throw GenerationError(s.id + ": organ placement failed after 50 retries");
      double ax = e.cx - ptv.cx, ay = e.cy - ptv.cy;
      const double len = std::hypot(ax, ay);
      if (len < 1e-9) {
        ax = 1.0;
        ay = 0.0;
      } else {
        ax /= len;
        ay /= len;
      }
      e.cx += ax;
      e.cy += ay;
      m = rasterize(e, body, S);
    }
    organ_masks[k] = std::move(m);
  }
  s.mask_st = std::move(organ_masks[0]);
  s.mask_fhl = std::move(organ_masks[1]);
  s.mask_fhr = std::move(organ_masks[2]);
  s.mask_bld = std::move(organ_masks[3]);

  // CT: structure-dependent intensities plus smooth texture and voxel noise.
  const double f1 = rng.uniform(1.0, 3.0), f2 = rng.uniform(1.0, 3.0);
  const double p1 = rng.uniform(0.0, 6.283185307179586), p2 = rng.uniform(0.0, 6.283185307179586);
  s.ct = Grid2D(S, S);
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c) {
      if (!body.contains(c, r)) continue;
      double v = 0.40;
      if (s.mask_bld.at(r, c) > 0.5) v = 0.22;
      if (s.mask_st.at(r, c) > 0.5) v = 0.30;
      if (s.mask_ptv.at(r, c) > 0.5) v = 0.48;
      if (s.mask_fhl.at(r, c) > 0.5 || s.mask_fhr.at(r, c) > 0.5) v = 0.85;
      v += 0.06 * std::sin(6.283185307179586 * f1 * c / Sf + p1) * std::sin(6.283185307179586 * f2 * r / Sf + p2);
      v += 0.02 * rng.normal();
      s.ct.at(r, c) = std::clamp(v, 0.0, 1.0);
    }

  // Target centroid, aimed at by every beam.
  double cx = 0.0, cy = 0.0;
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c)
      if (s.mask_ptv.at(r, c) > 0.5) {
        cx += c;
        cy += r;
      }
  cx /= ptv_count;
  cy /= ptv_count;

  // Equiangular parallel beams through the centroid, width matched to the
  // target's projected extent. Hard strip edges are the point: they put real
  // high-frequency structure into the dose.
  s.dose = Grid2D(S, S);
  for (int b = 0; b < cfg.beams; ++b) {
    const double theta =
        6.283185307179586 * b / cfg.beams + rng.uniform(-1.0, 1.0) * J * 6.283185307179586 / cfg.beams * 0.5;
    const double dx = std::cos(theta), dy = std::sin(theta);
    const double nx = -dy, ny = dx;
    double halfwidth = 0.0;
    for (int r = 0; r < S; ++r)
      for (int c = 0; c < S; ++c)
        if (s.mask_ptv.at(r, c) > 0.5)
          halfwidth = std::max(halfwidth, std::abs((c - cx) * nx + (r - cy) * ny));
    halfwidth += 1.5;

    for (int r = 0; r < S; ++r)
      for (int c = 0; c < S; ++c) {
        if (!body.contains(c, r)) continue;
        const double lateral = std::abs((c - cx) * nx + (r - cy) * ny);
        if (lateral > halfwidth) continue;
        const double depth = entry_depth(body, c, r, dx, dy);
        s.dose.at(r, c) += std::exp(-cfg.attenuation * depth);
      }
  }

  gaussian_blur(s.dose, cfg.penumbra);

  // Penumbra can only leak a few sigma past the surface; hard-zero beyond it.
  const double margin = 3.0 * cfg.penumbra + 1.0;
  const Ellipse dilated{body.cx, body.cy, body.rx + margin, body.ry + margin};
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c)
      if (!dilated.contains(c, r)) s.dose.at(r, c) = 0.0;

  double ptv_mean = 0.0;
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c)
      if (s.mask_ptv.at(r, c) > 0.5) ptv_mean += s.dose.at(r, c);
  ptv_mean /= ptv_count;
  if (ptv_mean <= 0.0) throw GenerationError(s.id + ": no dose reached the target");
  const double scale = s.prescription / ptv_mean;
  for (double& v : s.dose.values) v *= scale;

  // Stored arrays are 32-bit; quantize now so memory and disk agree exactly.
  quantize_f32(s.ct);
  quantize_f32(s.dose);
  s.prescription = static_cast<double>(static_cast<float>(s.prescription));
  return s;
}

// ---- array files -------------------------------------------------------------

void write_array(const std::string& path, const Grid2D& grid) {
  BinaryWriter body;
  body.u32(2);
  body.u32(static_cast<std::uint32_t>(grid.height));
  body.u32(static_cast<std::uint32_t>(grid.width));
  for (double v : grid.values) body.f32(static_cast<float>(v));

  BinaryWriter file;
  file.raw(kArrayMagic, 8);
  file.raw(body.bytes().data(), body.bytes().size());
  file.u32(Crc32::of(body.bytes()));
  write_file_bytes(path, file.bytes());
}

Grid2D read_array(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kArrayMagic, 8) != 0)
    throw CorruptionError(path + ": not an array file (bad magic)");
  const std::size_t body_size = bytes.size() - 12;
  const std::uint32_t computed = Crc32::of(bytes.data() + 8, body_size);
  BinaryReader r(bytes.data() + 8, bytes.size() - 8);
  const std::uint32_t rank = r.u32();
  if (rank != 2) throw CorruptionError(path + ": expected rank-2 array, got rank " + std::to_string(rank));
  const std::uint32_t h = r.u32(), w = r.u32();
  if (static_cast<std::uint64_t>(h) * w * 4 != body_size - 12)
    throw CorruptionError(path + ": dims disagree with payload size");
  Grid2D g(static_cast<int>(h), static_cast<int>(w));
  for (double& v : g.values) v = static_cast<double>(r.f32());
  const std::uint32_t stored = r.u32();
  if (stored != computed) throw CorruptionError(path + ": checksum mismatch");
  return g;
}

// ---- dataset directory --------------------------------------------------------

namespace {

constexpr std::array<const char*, 7> kArrayNames = {"ct", "dose", "mask_ptv", "mask_st",
                                                    "mask_fhl", "mask_fhr", "mask_bld"};

Grid2D& array_field(PlanningSample& s, const std::string& name) {
  if (name == "ct") return s.ct;
  if (name == "dose") return s.dose;
  if (name == "mask_ptv") return s.mask_ptv;
  if (name == "mask_st") return s.mask_st;
  if (name == "mask_fhl") return s.mask_fhl;
  if (name == "mask_fhr") return s.mask_fhr;
  return s.mask_bld;
}

}  // namespace

void write_dataset(const std::vector<PlanningSample>& samples, const PhantomConfig& cfg, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "samples");
  json manifest;
  manifest["schema_version"] = 1;
  manifest["phantom"] = {{"size", cfg.size},
                         {"beams", cfg.beams},
                         {"prescription_min", cfg.prescription_min},
                         {"prescription_max", cfg.prescription_max},
                         {"penumbra", cfg.penumbra},
                         {"attenuation", cfg.attenuation},
                         {"jitter", cfg.jitter},
                         {"seed", cfg.seed}};
  manifest["samples"] = json::array();
  for (const auto& s : samples) {
    const fs::path sdir = fs::path(dir) / "samples" / s.id;
    fs::create_directories(sdir);
    const PlanningSample* sp = &s;
    for (const char* name : kArrayNames)
      write_array((sdir / (std::string(name) + ".arr")).string(),
                  array_field(const_cast<PlanningSample&>(*sp), name));
    manifest["samples"].push_back({{"id", s.id},
                                   {"seed_index", s.seed_index},
                                   {"prescription", s.prescription},
                                   {"split", s.split}});
  }
  write_file_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::vector<PlanningSample> read_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.json")) throw IoError(dir + ": no manifest.json");
  json manifest;
  try {
    manifest = json::parse(read_file_text((root / "manifest.json").string()));
  } catch (const json::exception& e) {
    throw CorruptionError(dir + ": manifest.json unparseable: " + e.what());
  }
  if (!manifest.contains("samples")) throw CorruptionError(dir + ": manifest lacks sample list");

  std::size_t dir_count = 0;
  if (fs::exists(root / "samples"))
    for (const auto& entry : fs::directory_iterator(root / "samples"))
      if (entry.is_directory()) ++dir_count;
  if (dir_count != manifest["samples"].size())
    throw CorruptionError(dir + ": manifest lists " + std::to_string(manifest["samples"].size()) +
                          " samples but " + std::to_string(dir_count) + " sample directories exist");

  std::vector<PlanningSample> out;
  for (const auto& entry : manifest["samples"]) {
    PlanningSample s;
    s.id = entry.at("id").get<std::string>();
    s.seed_index = entry.at("seed_index").get<std::int64_t>();
    s.prescription = entry.at("prescription").get<double>();
    s.split = entry.value("split", "");
    const fs::path sdir = root / "samples" / s.id;
    for (const char* name : kArrayNames) {
      const fs::path p = sdir / (std::string(name) + ".arr");
      if (!fs::exists(p)) throw IoError(s.id + ": missing array " + std::string(name));
      try {
        array_field(s, name) = read_array(p.string());
      } catch (const CorruptionError& e) {
        throw CorruptionError("sample " + s.id + ": " + e.what());
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PlanningSample> read_dataset_split(const std::string& dir, const std::string& split) {
  auto all = read_dataset(dir);
  std::vector<PlanningSample> out;
  for (auto& s : all)
    if (s.split == split) out.push_back(std::move(s));
  return out;
}

std::vector<std::string> split_dataset(std::int64_t n_total, std::array<std::int64_t, 3> counts,
                                       std::uint64_t seed) {
  if (n_total < 0) throw ParameterError("negative sample count");
  for (auto c : counts)
    if (c < 0) throw ParameterError("negative split count");
  if (counts[0] + counts[1] + counts[2] != n_total)
    throw ParameterError("split counts sum to " + std::to_string(counts[0] + counts[1] + counts[2]) +
                         ", expected " + std::to_string(n_total));

  std::vector<std::size_t> perm(static_cast<std::size_t>(n_total));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  SeededRng rng(mix_seed(seed, 0x53504C4954ull));  // distinct stream from sample generation
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);

  std::vector<std::string> assignment(static_cast<std::size_t>(n_total));
  std::int64_t k = 0;
  for (std::int64_t i = 0; i < counts[0]; ++i) assignment[perm[static_cast<std::size_t>(k++)]] = "train";
  for (std::int64_t i = 0; i < counts[1]; ++i) assignment[perm[static_cast<std::size_t>(k++)]] = "val";
  for (std::int64_t i = 0; i < counts[2]; ++i) assignment[perm[static_cast<std::size_t>(k++)]] = "test";
  return assignment;
}

std::array<std::int64_t, 3> default_split_counts(std::int64_t n_total) {
  const auto val = static_cast<std::int64_t>(std::llround(0.08 * static_cast<double>(n_total)));
  const auto test = static_cast<std::int64_t>(std::llround(0.17 * static_cast<double>(n_total)));
  if (val + test > n_total) return {n_total, 0, 0};
  return {n_total - val - test, val, test};
}

}  // namespace fddm
