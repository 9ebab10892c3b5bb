#pragma once

// Iterative FGSM under an L-infinity budget, against a single model or the
// mean cross-entropy of a model ensemble, with an optional warm start.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdecomp/dataset.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/model.hpp"
#include "advdecomp/parallel.hpp"
#include "advdecomp/tensor.hpp"

namespace advdecomp {

struct AttackConfig {
  double epsilon = 0.03;
  std::size_t iterations = 10;
  // 0 selects epsilon / iterations.
  double step_size = 0.0;

  double step() const { return step_size > 0.0 ? step_size : epsilon / static_cast<double>(iterations); }

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("attack", "epsilon must be > 0");
    if (iterations < 1) throw ConfigError("attack", "iterations must be >= 1");
    if (step_size < 0.0) throw ConfigError("attack", "step_size must be > 0 (or 0 for epsilon/iterations)");
  }

  nlohmann::json to_json() const {
    return {{"epsilon", epsilon}, {"iterations", iterations}, {"step_size", step()}, {"loss", "cross_entropy"}};
  }
};

enum class PerturbationKind : std::uint8_t { Raw = 0, NoiseReduced = 1, Noise = 2, Arch = 3, Data = 4, Recombined = 5 };

inline const char* kind_name(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::Raw: return "raw";
    case PerturbationKind::NoiseReduced: return "nr";
    case PerturbationKind::Noise: return "noise";
    case PerturbationKind::Arch: return "arch";
    case PerturbationKind::Data: return "data";
    case PerturbationKind::Recombined: return "recombined";
  }
  return "?";
}

inline PerturbationKind kind_from_name(const std::string& s) {
  for (std::uint8_t k = 0; k <= 5; ++k)
    if (s == kind_name(static_cast<PerturbationKind>(k))) return static_cast<PerturbationKind>(k);
  throw FormatError("attack", "unknown perturbation kind '" + s + "'");
}

struct Perturbation {
  Tensor delta;  // shaped like the input batch
  PerturbationKind kind = PerturbationKind::Raw;
  nlohmann::json provenance = nlohmann::json::object();
};

// Uniform ensemble; the loss is the mean of member cross-entropies.
struct EnsembleTarget {
  std::vector<const ModelInstance*> members;

  EnsembleTarget() = default;
  explicit EnsembleTarget(std::vector<const ModelInstance*> m) : members(std::move(m)) {}
  explicit EnsembleTarget(const ModelInstance& m) : members{&m} {}
  explicit EnsembleTarget(const std::vector<ModelInstance>& ms) {
    for (const auto& m : ms) members.push_back(&m);
  }

  void validate() const {
    if (members.empty()) throw ConfigError("attack", "ensemble target has no members");
    for (const auto* m : members)
      if (m->arch.input_shape != members[0]->arch.input_shape || m->arch.classes != members[0]->arch.classes)
        throw ShapeError("attack", detail::concat("ensemble member ", m->tag(), " does not share input shape/classes with ",
                                                  members[0]->tag()));
  }

  std::vector<std::string> tags() const {
    std::vector<std::string> t;
    for (const auto* m : members) t.push_back(m->tag());
    return t;
  }
};

// (1/m) * sum_j L(M_j(x), y), with its input gradient (the mean of per-model
// input gradients).
inline LossAndGrad ensemble_loss(const EnsembleTarget& target, const Tensor& x, std::span<const int> y,
                                 Reduction reduction = Reduction::Mean) {
  target.validate();
  const float inv = 1.0f / static_cast<float>(target.members.size());
  Tensor grad(x.shape());
  double loss = 0.0;
  for (const auto* m : target.members) {
    auto lg = loss_and_input_grad(*m, x, y, reduction);
    loss += lg.loss;
    auto& dst = grad.storage();
    const auto& src = lg.grad.storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  for (float& v : grad.storage()) v *= inv;
  return {static_cast<float>(loss / static_cast<double>(target.members.size())), std::move(grad)};
}

struct AttackOptions {
  std::size_t batch = 100;
  std::size_t jobs = 1;
};

// Clamp d to [-eps, eps] and so that x + d stays inside [-1, 1]. Leaves d
// untouched (bitwise) when it already satisfies both.
inline float clip_delta(float x, float d, float eps) {
  d = std::clamp(d, -eps, eps);
  if (x + d > 1.0f) {
    d = 1.0f - x;
    while (x + d > 1.0f) d = std::nextafter(d, -2.0f);
  } else if (x + d < -1.0f) {
    d = -1.0f - x;
    while (x + d < -1.0f) d = std::nextafter(d, 2.0f);
  }
  return d;
}

// Iterates delta <- clip(delta + step * sign(grad_x L(target(x + delta), y))).
// A single-member target yields kind=raw, larger ensembles kind=nr. Each
// example's update depends only on that example, so results do not depend on
// batching or job count.
inline Perturbation ifgsm(const EnsembleTarget& target, const Tensor& x, std::span<const int> y,
                          const AttackConfig& cfg, const Tensor* warm_start = nullptr,
                          const AttackOptions& opts = {}, const std::string& warm_start_id = "zero") {
  cfg.validate();
  target.validate();
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != target.members[0]->arch.input_shape)
    throw ShapeError("attack", detail::concat("input ", shape_str(x.shape()), " does not match model input [N,",
                                              shape_str(target.members[0]->arch.input_shape).substr(1)));
  if (y.size() != x.dim(0))
    throw ShapeError("attack", detail::concat(x.dim(0), " inputs but ", y.size(), " labels"));
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= target.members[0]->arch.classes)
      throw Error("attack", detail::concat("label ", y[i], " at example ", i, " outside class range"));
  if (warm_start && warm_start->shape() != x.shape())
    throw ShapeError("attack", detail::concat("warm start ", shape_str(warm_start->shape()), " != input ",
                                              shape_str(x.shape())));

  const float eps = static_cast<float>(cfg.epsilon);
  const float step = static_cast<float>(cfg.step());
  Tensor delta(x.shape());
  if (warm_start) {
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = clip_delta(x[i], (*warm_start)[i], eps);
  }
  const std::size_t n = x.dim(0);
  const std::size_t ex = x.row_size();
  const std::size_t chunks = (n + opts.batch - 1) / opts.batch;
  parallel_for(chunks, opts.jobs, [&](std::size_t c) {
    const std::size_t b0 = c * opts.batch, b1 = std::min(n, b0 + opts.batch);
    const Tensor xb = slice_rows(x, b0, b1);
    Tensor db = slice_rows(delta, b0, b1);
    const auto yb = y.subspan(b0, b1 - b0);
    Tensor adv(xb.shape());
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = xb[i] + db[i];
      const Tensor g = ensemble_loss(target, adv, yb, Reduction::Sum).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i]))
          throw NumericError("attack", detail::concat("non-finite input gradient at example ", b0 + i / ex,
                                                      ", iteration ", it));
        db[i] = clip_delta(xb[i], db[i] + step * sign0(g[i]), eps);
      }
    }
    write_rows(delta, b0, db);
  });

  Perturbation p;
  p.delta = std::move(delta);
  p.kind = target.members.size() == 1 ? PerturbationKind::Raw : PerturbationKind::NoiseReduced;
  p.provenance = {{"source_models", target.tags()},
                  {"attack", cfg.to_json()},
                  {"warm_start", warm_start ? warm_start_id : std::string("zero")}};
  return p;
}

inline Perturbation ifgsm(const ModelInstance& model, const Tensor& x, std::span<const int> y,
                          const AttackConfig& cfg, const Tensor* warm_start = nullptr,
                          const AttackOptions& opts = {}) {
  return ifgsm(EnsembleTarget(model), x, y, cfg, warm_start, opts);
}

// ---- perturbation archive -------------------------------------------------
//
//   "ADVP" | u16 version | u8 kind | u32 json_len | provenance JSON |
//   u32 rank | rank x u32 extents | float32 payload (little-endian)

namespace archive {

constexpr std::uint16_t kPerturbationVersion = 1;

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}
inline void put_floats(std::vector<std::uint8_t>& b, std::span<const float> v) {
  for (float f : v) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(b, u);
  }
}

class Reader {
public:
  Reader(std::span<const std::uint8_t> b, const char* what) : b_(b), what_(what) {}

  void need(std::size_t n) const {
    if (off_ + n > b_.size())
      throw FormatError("archive", detail::concat(what_, ": truncated at offset ", off_, " (need ", n,
                                                  " more bytes, have ", b_.size() - off_, ")"));
  }
  std::uint8_t u8() {
    need(1);
    return b_[off_++];
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(b_[off_] | (b_[off_ + 1] << 8));
    off_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b_[off_ + static_cast<std::size_t>(i)];
    off_ += 4;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + off_), n);
    off_ += n;
    return s;
  }
  void floats(std::span<float> out) {
    need(out.size() * 4);
    for (float& f : out) {
      const std::uint32_t u = u32();
      std::memcpy(&f, &u, 4);
    }
  }
  std::size_t offset() const { return off_; }
  std::size_t remaining() const { return b_.size() - off_; }

private:
  std::span<const std::uint8_t> b_;
  const char* what_;
  std::size_t off_ = 0;
};

}  // namespace archive

inline std::vector<std::uint8_t> encode_perturbation(const Perturbation& p) {
  std::vector<std::uint8_t> b = {'A', 'D', 'V', 'P'};
  archive::put_u16(b, archive::kPerturbationVersion);
  b.push_back(static_cast<std::uint8_t>(p.kind));
  const std::string js = p.provenance.dump();
  archive::put_u32(b, static_cast<std::uint32_t>(js.size()));
  b.insert(b.end(), js.begin(), js.end());
  archive::put_u32(b, static_cast<std::uint32_t>(p.delta.rank()));
  for (std::size_t d : p.delta.shape()) archive::put_u32(b, static_cast<std::uint32_t>(d));
  archive::put_floats(b, p.delta.data());
  return b;
}

inline Perturbation decode_perturbation(std::span<const std::uint8_t> bytes) {
  archive::Reader r(bytes, "perturbation archive");
  if (r.bytes(4) != "ADVP") throw FormatError("archive", "perturbation archive: bad magic (expected ADVP)");
  const std::uint16_t version = r.u16();
  if (version != archive::kPerturbationVersion)
    throw FormatError("archive", detail::concat("perturbation archive: unsupported version ", version));
  const std::uint8_t kind = r.u8();
  if (kind > 5) throw FormatError("archive", detail::concat("perturbation archive: bad kind byte ", int{kind}));
  Perturbation p;
  p.kind = static_cast<PerturbationKind>(kind);
  const std::uint32_t jl = r.u32();
  try {
    p.provenance = nlohmann::json::parse(r.bytes(jl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("archive", std::string("perturbation archive: malformed provenance JSON: ") + e.what());
  }
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("archive", detail::concat("perturbation archive: bad rank ", rank));
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  p.delta = Tensor(shape);
  r.floats(p.delta.data());
  if (r.remaining() != 0)
    throw FormatError("archive", detail::concat("perturbation archive: ", r.remaining(), " trailing bytes"));
  return p;
}

}  // namespace advdecomp
