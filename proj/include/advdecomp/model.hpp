#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdecomp/autodiff.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/rng.hpp"
#include "advdecomp/tensor.hpp"

namespace advdecomp {

enum class LayerKind { Conv2d, Dense, Relu, MaxPool2, Flatten };

struct LayerSpec {
  LayerKind kind;
  std::size_t units = 0;  // output channels (conv) or output features (dense)
  std::size_t kernel = 0;
  Padding padding = Padding::Valid;

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel, Padding p) {
    return {LayerKind::Conv2d, out_channels, kernel, p};
  }
  static LayerSpec dense(std::size_t units) { return {LayerKind::Dense, units, 0, Padding::Valid}; }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec maxpool2() { return {LayerKind::MaxPool2}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
};

struct ArchitectureSpec {
  std::string arch_id;
  std::vector<LayerSpec> layers;
  Shape input_shape;  // [C, H, W]
  std::size_t classes = 10;
  // Multiplies TrainConfig::learning_rate for this architecture.
  double lr_scale = 1.0;

  // Parameter shapes in layer order: (weight, bias) per conv/dense layer.
  // Throws if consecutive layer shapes do not conform.
  std::vector<Shape> param_shapes() const {
    std::vector<Shape> out;
    Shape cur = input_shape;
    auto fail = [&](const char* what) {
      throw ShapeError("model", detail::concat(arch_id, ": ", what, " cannot follow activation shape ", shape_str(cur)));
    };
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::Conv2d: {
          if (cur.size() != 3) fail("conv2d");
          out.push_back({l.units, cur[0], l.kernel, l.kernel});
          out.push_back({l.units});
          if (l.padding == Padding::Valid) {
            if (cur[1] < l.kernel || cur[2] < l.kernel) fail("conv2d");
            cur = {l.units, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
          } else {
            if (l.kernel % 2 == 0) fail("same-padded conv2d with even kernel");
            cur = {l.units, cur[1], cur[2]};
          }
          break;
        }
        case LayerKind::Dense:
          if (cur.size() != 1) fail("dense");
          out.push_back({cur[0], l.units});
          out.push_back({l.units});
          cur = {l.units};
          break;
        case LayerKind::Relu: break;
        case LayerKind::MaxPool2:
          if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) fail("maxpool2");
          cur = {cur[0], cur[1] / 2, cur[2] / 2};
          break;
        case LayerKind::Flatten: cur = {shape_numel(cur)}; break;
      }
    }
    if (cur != Shape{classes}) fail("class output");
    return out;
  }
};

// Default architectures. Each is built for a given input shape and class count.
inline ArchitectureSpec make_architecture(const std::string& arch_id, const Shape& input_shape, std::size_t classes) {
  ArchitectureSpec a{arch_id, {}, input_shape, classes};
  using L = LayerSpec;
  if (arch_id == "mlp") {
    a.layers = {L::flatten(), L::dense(256), L::relu(), L::dense(classes)};
  } else if (arch_id == "cnn_a") {
    a.layers = {L::conv(4, 3, Padding::Same), L::relu(), L::conv(8, 3, Padding::Same), L::relu(),
                L::maxpool2(), L::flatten(), L::dense(classes)};
    // Two stacked convs oscillate at the shared step size; halve it.
    a.lr_scale = 0.5;
  } else if (arch_id == "cnn_b") {
    a.layers = {L::conv(6, 5, Padding::Valid), L::relu(), L::maxpool2(), L::flatten(),
                L::dense(64), L::relu(), L::dense(classes)};
  } else if (arch_id == "cnn_wide") {
    a.layers = {L::conv(16, 3, Padding::Same), L::relu(), L::maxpool2(), L::flatten(), L::dense(classes)};
  } else if (arch_id == "linear") {
    // Softmax regression; used by closed-form attack checks.
    a.layers = {L::flatten(), L::dense(classes)};
  } else {
    throw ConfigError("model", "unknown arch_id '" + arch_id + "'");
  }
  a.param_shapes();
  return a;
}

// Registry order fixes the arch index used in seed derivation.
inline const std::vector<std::string>& registered_architectures() {
  static const std::vector<std::string> ids = {"mlp", "cnn_a", "cnn_b", "cnn_wide", "linear"};
  return ids;
}

inline std::size_t registry_index(const std::string& arch_id) {
  const auto& ids = registered_architectures();
  const auto it = std::find(ids.begin(), ids.end(), arch_id);
  if (it == ids.end()) throw ConfigError("model", "unknown arch_id '" + arch_id + "'");
  return static_cast<std::size_t>(it - ids.begin());
}

struct TrainFingerprint {
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  double learning_rate = 0.0;
  double momentum = 0.0;
  std::string dataset_id;
  double train_accuracy = -1.0;
  double test_accuracy = -1.0;

  friend bool operator==(const TrainFingerprint&, const TrainFingerprint&) = default;
};

struct ModelInstance {
  ArchitectureSpec arch;
  std::uint64_t init_seed = 0;
  std::vector<Tensor> params;
  TrainFingerprint fingerprint;

  const std::string& arch_id() const noexcept { return arch.arch_id; }
  std::string tag() const { return detail::concat(arch.arch_id, "#", init_seed); }
};

inline ModelInstance init_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  registry_index(spec.arch_id);
  ModelInstance m;
  m.arch = spec;
  m.init_seed = seed;
  Rng rng(seed);
  for (const Shape& s : spec.param_shapes()) {
    Tensor t(s);
    if (s.size() > 1) {
      const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
      const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (float& v : t.storage()) v = static_cast<float>(std * rng.normal());
    }
    m.params.push_back(std::move(t));
  }
  return m;
}

struct ForwardResult {
  NodeId logits;
  std::vector<NodeId> params;
};

// Records the model on `g` starting from `input` ([N, C, H, W]). Parameters are
// referenced, not copied, so `model` must outlive the graph.
inline ForwardResult forward(Graph& g, const ModelInstance& model, NodeId input, bool param_grad = false) {
  const Shape& xs = g.shape(input);
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != model.arch.input_shape)
    throw ShapeError("model", detail::concat(model.arch_id(), ": input ", shape_str(xs), " does not match [N,",
                                             shape_str(model.arch.input_shape).substr(1)));
  ForwardResult r;
  for (const auto& p : model.params) r.params.push_back(g.leaf_ref(p, param_grad));
  NodeId cur = input;
  std::size_t pi = 0;
  for (const auto& l : model.arch.layers) {
    switch (l.kind) {
      case LayerKind::Conv2d:
        cur = g.conv2d(cur, r.params[pi], l.padding);
        cur = g.bias_add(cur, r.params[pi + 1]);
        pi += 2;
        break;
      case LayerKind::Dense:
        cur = g.matmul(cur, r.params[pi]);
        cur = g.bias_add(cur, r.params[pi + 1]);
        pi += 2;
        break;
      case LayerKind::Relu: cur = g.relu(cur); break;
      case LayerKind::MaxPool2: cur = g.maxpool2(cur); break;
      case LayerKind::Flatten: cur = g.flatten(cur); break;
    }
  }
  r.logits = cur;
  return r;
}

inline Tensor logits(const ModelInstance& model, const Tensor& x) {
  Graph g;
  const NodeId in = g.leaf_ref(x);
  return g.value(forward(g, model, in).logits);
}

// Argmax per row; ties resolve to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& scores) {
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = scores.raw() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const ModelInstance& model, const Tensor& x, std::size_t batch = 256) {
  std::vector<int> out;
  out.reserve(x.dim(0));
  for (std::size_t b = 0; b < x.dim(0); b += batch) {
    const Tensor chunk = slice_rows(x, b, std::min(x.dim(0), b + batch));
    const auto p = argmax_rows(logits(model, chunk));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

enum class LossKind { CrossEntropy };

struct LossAndGrad {
  float loss;
  Tensor grad;
};

// Cross-entropy of `model` on (x, y) and its gradient w.r.t. the input.
// Parameters are not differentiated and never modified.
inline LossAndGrad loss_and_input_grad(const ModelInstance& model, const Tensor& x, std::span<const int> y,
                                       Reduction reduction = Reduction::Mean) {
  if (y.size() != x.dim(0))
    throw ShapeError("model", detail::concat("batch of ", x.dim(0), " inputs but ", y.size(), " labels"));
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= model.arch.classes)
      throw Error("model", detail::concat("label ", y[i], " at index ", i, " outside [0, ", model.arch.classes, ")"));
  Graph g;
  const NodeId in = g.leaf_ref(x, true);
  const auto fr = forward(g, model, in, false);
  const NodeId loss = g.cross_entropy(fr.logits, y, reduction);
  g.backward(loss);
  return {g.value(loss)[0], g.grad(in)};
}

inline Tensor grad_wrt_input(const ModelInstance& model, const Tensor& x, std::span<const int> y,
                             LossKind = LossKind::CrossEntropy, Reduction reduction = Reduction::Mean) {
  return loss_and_input_grad(model, x, y, reduction).grad;
}

inline float model_loss(const ModelInstance& model, const Tensor& x, std::span<const int> y,
                        Reduction reduction = Reduction::Mean) {
  Graph g;
  const NodeId in = g.leaf_ref(x);
  const auto fr = forward(g, model, in);
  return g.value(g.cross_entropy(fr.logits, y, reduction))[0];
}

inline double accuracy(const ModelInstance& model, const Tensor& x, std::span<const int> y) {
  if (y.empty()) return 0.0;
  const auto p = predict(model, x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += p[i] == y[i];
  return static_cast<double>(ok) / static_cast<double>(y.size());
}

}  // namespace advdecomp
