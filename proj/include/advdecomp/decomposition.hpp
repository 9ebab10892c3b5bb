#pragma once

// Perturbation decomposition.
//
// Noise split: the raw attack dx on one model is split against the attack
// dx_nr on an ensemble of retrained copies of the same architecture:
//     dx_noise = dx - P_{dx_nr}(dx)
// Architecture split: dx_nr is split against dx_data, the mean over the other
// architectures of ensemble attacks warm-started at dx_nr:
//     dx_arch = dx_nr - P_{dx_data}(dx_nr)
// All projections act per example on the flattened perturbation.

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdecomp/attack.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/tensor.hpp"

namespace advdecomp {

constexpr double kDegenerateNorm = 1e-12;

// (<v,u>/<u,u>) u into `out`. Returns false (and leaves `out` untouched) when
// ||u|| is below kDegenerateNorm.
inline bool project_into(std::span<const float> u, std::span<const float> v, std::span<float> out) {
  const double uu = dot(u, u);
  if (std::sqrt(uu) < kDegenerateNorm) return false;
  const double c = dot(v, u) / uu;
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = static_cast<float>(c * u[i]);
  return true;
}

// Projection of each example of v onto the matching example of u.
inline Tensor project(const Tensor& u, const Tensor& v) {
  if (u.shape() != v.shape())
    throw ShapeError("decomposition", detail::concat("project: shapes ", shape_str(u.shape()), " and ",
                                                     shape_str(v.shape())));
  Tensor out(u.shape());
  if (u.rank() == 1) {
    if (!project_into(u.data(), v.data(), out.data()))
      throw NumericError("decomposition", "project: degenerate direction (||u|| < 1e-12)");
    return out;
  }
  for (std::size_t i = 0; i < u.dim(0); ++i)
    if (!project_into(u.row(i), v.row(i), out.row(i)))
      throw NumericError("decomposition", detail::concat("project: degenerate direction at example ", i,
                                                         " (||u|| < 1e-12)"));
  return out;
}

// |<a,b>| / (||a|| ||b||), or 0 when either side is zero.
inline double normalized_dot(std::span<const float> a, std::span<const float> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na < kDegenerateNorm || nb < kDegenerateNorm) return 0.0;
  return std::abs(dot(a, b)) / (na * nb);
}

inline Tensor unit_rows(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    const double n = l2_norm(t.row(i));
    if (n < kDegenerateNorm) continue;
    auto src = t.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<float>(src[j] / n);
  }
  return out;
}

// v - alpha * P_u(v) per example; examples with degenerate u keep v and are
// marked in `degenerate`.
inline Tensor projection_residual(const Tensor& u, const Tensor& v, double alpha, std::vector<bool>& degenerate) {
  if (u.shape() != v.shape())
    throw ShapeError("decomposition", detail::concat("residual: shapes ", shape_str(u.shape()), " and ",
                                                     shape_str(v.shape())));
  Tensor out = v;
  degenerate.assign(v.dim(0), false);
  std::vector<float> proj(v.row_size());
  for (std::size_t i = 0; i < v.dim(0); ++i) {
    if (!project_into(u.row(i), v.row(i), proj)) {
      degenerate[i] = true;
      continue;
    }
    auto dst = out.row(i);
    if (alpha == 1.0) {
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] -= proj[j];
    } else {
      const float a = static_cast<float>(alpha);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] -= a * proj[j];
    }
  }
  return out;
}

inline std::size_t count_true(const std::vector<bool>& v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), true));
}

// ---- combination coefficients ---------------------------------------------

struct CombinationCoeffs {
  std::vector<double> a;  // <dx, unit(dx_noise)>
  std::vector<double> b;  // <dx, unit(dx_nr)>
  std::vector<double> reconstruction_error;  // ||a n + b r - dx|| / ||dx||
  std::vector<bool> degenerate;

  std::size_t degenerate_count() const { return count_true(degenerate); }

  // Means over non-degenerate examples.
  double mean_a() const { return masked_mean(a); }
  double mean_b() const { return masked_mean(b); }

private:
  double masked_mean(const std::vector<double>& v) const {
    double s = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!degenerate[i]) {
        s += v[i];
        ++k;
      }
    return k ? s / static_cast<double>(k) : 0.0;
  }
};

inline CombinationCoeffs solve_combination_coeffs(const Tensor& dx, const Tensor& dx_noise, const Tensor& dx_nr) {
  if (dx.shape() != dx_noise.shape() || dx.shape() != dx_nr.shape())
    throw ShapeError("decomposition", "combination coefficients: component shapes differ");
  const std::size_t n = dx.dim(0);
  CombinationCoeffs c;
  c.a.assign(n, 0.0);
  c.b.assign(n, 0.0);
  c.reconstruction_error.assign(n, 0.0);
  c.degenerate.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = dx.row(i), ns = dx_noise.row(i), r = dx_nr.row(i);
    const double nn = l2_norm(ns), nr = l2_norm(r), nx = l2_norm(x);
    // Coefficients of a vanished component are 0; the example is still
    // flagged so aggregates skip it.
    c.degenerate[i] = nn < kDegenerateNorm || nr < kDegenerateNorm;
    const double inv_n = nn < kDegenerateNorm ? 0.0 : 1.0 / nn;
    const double inv_r = nr < kDegenerateNorm ? 0.0 : 1.0 / nr;
    c.a[i] = dot(x, ns) * inv_n;
    c.b[i] = dot(x, r) * inv_r;
    double err = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double d = c.a[i] * ns[j] * inv_n + c.b[i] * r[j] * inv_r - x[j];
      err += d * d;
    }
    c.reconstruction_error[i] = nx > 0.0 ? std::sqrt(err) / nx : std::sqrt(err);
  }
  return c;
}

// ---- noise / noise-reduced ------------------------------------------------

struct NoiseDecomposition {
  Perturbation dx;
  Perturbation dx_nr;
  Perturbation dx_noise;
  CombinationCoeffs coeffs;
  std::vector<double> orthogonality;  // |<dx_noise, dx_nr>| normalized, per example
  std::vector<bool> degenerate;       // dx_nr vanished, so no projection was taken

  std::size_t degenerate_count() const { return count_true(degenerate); }
};

// Splits an existing pair (dx on M_1, dx_nr on the ensemble).
inline NoiseDecomposition split_noise(Perturbation dx, Perturbation dx_nr) {
  NoiseDecomposition d;
  d.dx_noise.delta = projection_residual(dx_nr.delta, dx.delta, 1.0, d.degenerate);
  d.dx_noise.kind = PerturbationKind::Noise;
  d.dx_noise.provenance = {{"method", "dx - P_nr(dx)"},
                           {"alpha", 1.0},
                           {"dx", dx.provenance},
                           {"dx_nr", dx_nr.provenance}};
  d.orthogonality.resize(dx.delta.dim(0));
  for (std::size_t i = 0; i < d.orthogonality.size(); ++i)
    d.orthogonality[i] = normalized_dot(d.dx_noise.delta.row(i), dx_nr.delta.row(i));
  d.coeffs = solve_combination_coeffs(dx.delta, d.dx_noise.delta, dx_nr.delta);
  d.dx = std::move(dx);
  d.dx_nr = std::move(dx_nr);
  d.dx.kind = PerturbationKind::Raw;
  d.dx_nr.kind = PerturbationKind::NoiseReduced;
  return d;
}

// models[0] is attacked alone; models[1..] form the noise-reduction ensemble.
inline NoiseDecomposition decompose_noise(std::span<const ModelInstance* const> models, const Tensor& x,
                                          std::span<const int> y, const AttackConfig& cfg,
                                          const AttackOptions& opts = {}) {
  if (models.size() < 2)
    throw ConfigError("decomposition", "noise decomposition needs n >= 2 models (one attacked, >= 1 averaged)");
  for (const auto* m : models)
    if (m->arch_id() != models[0]->arch_id())
      throw ConfigError("decomposition", "noise decomposition models must share one architecture; got " +
                                             models[0]->arch_id() + " and " + m->arch_id());
  Perturbation dx = ifgsm(EnsembleTarget(*models[0]), x, y, cfg, nullptr, opts);
  EnsembleTarget rest(std::vector<const ModelInstance*>(models.begin() + 1, models.end()));
  Perturbation nr = ifgsm(rest, x, y, cfg, nullptr, opts);
  nr.kind = PerturbationKind::NoiseReduced;
  return split_noise(std::move(dx), std::move(nr));
}

// dx - alpha * P_{dx_nr}(dx), kind=noise.
inline Perturbation alpha_residual(const Perturbation& dx, const Perturbation& dx_nr, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("decomposition", "alpha must be >= 0");
  std::vector<bool> degenerate;
  Perturbation p;
  p.delta = projection_residual(dx_nr.delta, dx.delta, alpha, degenerate);
  p.kind = PerturbationKind::Noise;
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < degenerate.size(); ++i)
    if (degenerate[i]) bad.push_back(i);
  p.provenance = {{"method", "dx - alpha * P_nr(dx)"}, {"alpha", alpha}, {"degenerate_examples", bad}};
  return p;
}

// ---- architecture / data --------------------------------------------------

struct ArchDecomposition {
  Perturbation dx_nr;
  Perturbation dx_data;
  Perturbation dx_arch;
  std::vector<double> orthogonality;  // |<dx_arch, dx_data>| normalized
  std::vector<bool> degenerate;

  std::size_t degenerate_count() const { return count_true(degenerate); }
};

// Mean of the given perturbations (elementwise, in order).
inline Tensor mean_of(std::span<const Tensor> parts) {
  if (parts.empty()) throw ConfigError("decomposition", "mean of zero perturbations");
  Tensor out(parts[0].shape());
  for (const auto& p : parts) {
    if (p.shape() != out.shape()) throw ShapeError("decomposition", "mean: perturbation shapes differ");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
  }
  if (parts.size() > 1) {
    const float inv = 1.0f / static_cast<float>(parts.size());
    for (float& v : out.storage()) v *= inv;
  }
  return out;
}

inline ArchDecomposition split_arch(Perturbation dx_nr, Perturbation dx_data) {
  ArchDecomposition d;
  d.dx_arch.delta = projection_residual(dx_data.delta, dx_nr.delta, 1.0, d.degenerate);
  d.dx_arch.kind = PerturbationKind::Arch;
  d.dx_arch.provenance = {{"method", "dx_nr - P_data(dx_nr)"}, {"dx_nr", dx_nr.provenance},
                          {"dx_data", dx_data.provenance}};
  d.orthogonality.resize(dx_nr.delta.dim(0));
  for (std::size_t i = 0; i < d.orthogonality.size(); ++i)
    d.orthogonality[i] = normalized_dot(d.dx_arch.delta.row(i), dx_data.delta.row(i));
  d.dx_nr = std::move(dx_nr);
  d.dx_data = std::move(dx_data);
  d.dx_nr.kind = PerturbationKind::NoiseReduced;
  d.dx_data.kind = PerturbationKind::Data;
  return d;
}

// `other_archs[j]` is the ensemble of retrained copies of the j-th non-source
// architecture; each is attacked from the warm start dx_nr.
inline ArchDecomposition decompose_arch_data(const std::vector<EnsembleTarget>& other_archs, const Perturbation& dx_nr,
                                             const Tensor& x, std::span<const int> y, const AttackConfig& cfg,
                                             const AttackOptions& opts = {}) {
  if (other_archs.empty())
    throw ConfigError("decomposition", "architecture decomposition needs at least one other architecture");
  if (dx_nr.delta.shape() != x.shape())
    throw ShapeError("decomposition", detail::concat("dx_nr ", shape_str(dx_nr.delta.shape()), " != input ",
                                                     shape_str(x.shape())));
  std::vector<Tensor> parts;
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& t : other_archs) {
    t.validate();
    Perturbation p = ifgsm(t, x, y, cfg, &dx_nr.delta, opts, "dx_nr");
    sources.push_back(p.provenance);
    parts.push_back(std::move(p.delta));
  }
  Perturbation data;
  data.delta = mean_of(parts);
  data.kind = PerturbationKind::Data;
  data.provenance = {{"method", "mean over architectures of ensemble attacks warm-started at dx_nr"},
                     {"per_architecture", sources}};
  return split_arch(dx_nr, std::move(data));
}

// ---- recombination ---------------------------------------------------------

// eps * sign(v) elementwise with sign(0) = 0.
inline Tensor sign_maximize(const Tensor& v, double epsilon) {
  const float eps = static_cast<float>(epsilon);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = eps * sign0(v[i]);
  return out;
}

// sign_maximize(ratio_a * unit(dx_noise) + ratio_b * unit(dx_nr)). Examples
// where every direction with a nonzero weight vanishes get a zero delta and
// are listed as degenerate in the provenance.
inline Perturbation recombine(const Tensor& dx_noise, const Tensor& dx_nr, double ratio_b, double ratio_a,
                              double epsilon) {
  if (ratio_a < 0.0 || ratio_b < 0.0 || (ratio_a == 0.0 && ratio_b == 0.0))
    throw ConfigError("decomposition", "recombination ratios must be >= 0 and not both zero");
  if (dx_noise.shape() != dx_nr.shape()) throw ShapeError("decomposition", "recombine: component shapes differ");
  const Tensor un = unit_rows(dx_noise), ur = unit_rows(dx_nr);
  Tensor v(dx_noise.shape());
  std::vector<std::size_t> degenerate;
  for (std::size_t i = 0; i < v.dim(0); ++i) {
    const bool noise_ok = ratio_a > 0.0 && l2_norm(dx_noise.row(i)) >= kDegenerateNorm;
    const bool nr_ok = ratio_b > 0.0 && l2_norm(dx_nr.row(i)) >= kDegenerateNorm;
    if (!noise_ok && !nr_ok) {
      degenerate.push_back(i);
      continue;
    }
    auto dst = v.row(i);
    const auto a = un.row(i), b = ur.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j)
      dst[j] = static_cast<float>(ratio_a * a[j] + ratio_b * b[j]);
  }
  Perturbation p;
  p.delta = sign_maximize(v, epsilon);
  p.kind = PerturbationKind::Recombined;
  p.provenance = {{"method", "sign_maximize(a*unit(noise) + b*unit(nr))"},
                  {"ratio_b", ratio_b},
                  {"ratio_a", ratio_a},
                  {"epsilon", epsilon},
                  {"degenerate_examples", degenerate}};
  return p;
}

// ---- convergence diagnostics -----------------------------------------------

// For each n in `grid`, the mean over examples of ||g(n) - g(N)||, where g(k)
// is the mean of the first k unit per-model attack directions and N is the
// number of directions supplied.
inline std::vector<double> direction_convergence(std::span<const Tensor> per_model, std::span<const std::size_t> grid) {
  if (per_model.empty()) throw ConfigError("decomposition", "no per-model perturbations supplied");
  std::vector<Tensor> units;
  for (const auto& p : per_model) units.push_back(unit_rows(p));
  const Tensor full = mean_of(units);
  std::vector<double> out;
  for (std::size_t n : grid) {
    if (n < 1 || n > units.size())
      throw ConfigError("decomposition", detail::concat("grid size ", n, " outside [1, ", units.size(), "]"));
    const Tensor g = mean_of(std::span<const Tensor>(units.data(), n));
    double total = 0.0;
    for (std::size_t i = 0; i < g.dim(0); ++i) {
      double s = 0.0;
      const auto a = g.row(i), b = full.row(i);
      for (std::size_t j = 0; j < a.size(); ++j) s += (static_cast<double>(a[j]) - b[j]) * (a[j] - b[j]);
      total += std::sqrt(s);
    }
    out.push_back(total / static_cast<double>(g.dim(0)));
  }
  return out;
}

// Mean over examples of || mean_j (unit(dx_j) - unit(ensemble)) ||: the
// average noise direction of n models relative to their joint attack.
inline double mean_noise_norm(std::span<const Tensor> per_model, const Tensor& ensemble) {
  std::vector<Tensor> units;
  for (const auto& p : per_model) units.push_back(unit_rows(p));
  const Tensor g = mean_of(units);
  const Tensor e = unit_rows(ensemble);
  double total = 0.0;
  for (std::size_t i = 0; i < g.dim(0); ++i) {
    double s = 0.0;
    const auto a = g.row(i), b = e.row(i);
    for (std::size_t j = 0; j < a.size(); ++j) s += (static_cast<double>(a[j]) - b[j]) * (a[j] - b[j]);
    total += std::sqrt(s);
  }
  return total / static_cast<double>(g.dim(0));
}

// ---- decomposition archive -------------------------------------------------

inline nlohmann::json noise_sidecar(const NoiseDecomposition& d) {
  nlohmann::json ex = nlohmann::json::array();
  for (std::size_t i = 0; i < d.orthogonality.size(); ++i)
    ex.push_back({{"index", i},
                  {"a", d.coeffs.a[i]},
                  {"b", d.coeffs.b[i]},
                  {"orthogonality", d.orthogonality[i]},
                  {"reconstruction_error", d.coeffs.reconstruction_error[i]},
                  {"degenerate", d.degenerate[i] || d.coeffs.degenerate[i]}});
  return {{"decomposition", "noise"},
          {"mean_a", d.coeffs.mean_a()},
          {"mean_b", d.coeffs.mean_b()},
          {"degenerate_count", d.coeffs.degenerate_count()},
          {"examples", ex}};
}

inline nlohmann::json arch_sidecar(const ArchDecomposition& d) {
  nlohmann::json ex = nlohmann::json::array();
  for (std::size_t i = 0; i < d.orthogonality.size(); ++i)
    ex.push_back({{"index", i}, {"orthogonality", d.orthogonality[i]}, {"degenerate", bool(d.degenerate[i])}});
  return {{"decomposition", "arch"}, {"degenerate_count", d.degenerate_count()}, {"examples", ex}};
}

inline void write_perturbation(const std::filesystem::path& path, const Perturbation& p) {
  io::write_file(path, encode_perturbation(p));
}

inline Perturbation read_perturbation(const std::filesystem::path& path) {
  return decode_perturbation(io::read_file(path, "archive"));
}

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  io::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline void write_decomposition(const std::filesystem::path& dir, const std::string& prefix,
                                const NoiseDecomposition& d) {
  write_perturbation(dir / (prefix + "_raw.advp"), d.dx);
  write_perturbation(dir / (prefix + "_nr.advp"), d.dx_nr);
  write_perturbation(dir / (prefix + "_noise.advp"), d.dx_noise);
  write_text(dir / (prefix + "_decomposition.json"), noise_sidecar(d).dump(2) + "\n");
}

inline void write_decomposition(const std::filesystem::path& dir, const std::string& prefix,
                                const ArchDecomposition& d) {
  write_perturbation(dir / (prefix + "_nr.advp"), d.dx_nr);
  write_perturbation(dir / (prefix + "_data.advp"), d.dx_data);
  write_perturbation(dir / (prefix + "_arch.advp"), d.dx_arch);
  write_text(dir / (prefix + "_decomposition.json"), arch_sidecar(d).dump(2) + "\n");
}

}  // namespace advdecomp
