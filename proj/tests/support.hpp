#pragma once
// Helpers shared by the unit tests: random tensors, an independent
// double-precision forward pass, and small trained models.

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "advdecomp/dataset.hpp"
#include "advdecomp/model.hpp"
#include "advdecomp/rng.hpp"
#include "advdecomp/train.hpp"

namespace testsupport {

using namespace advdecomp;

inline Tensor random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(s);
  for (float& v : t.storage()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

// Plain nested-loop forward in double. `params` follow the model's layout.
struct RefTensor {
  std::vector<std::size_t> shape;  // without batch
  std::vector<double> v;
};

inline double ref_loss(const ArchitectureSpec& arch, const std::vector<std::vector<double>>& params,
                       const std::vector<double>& x, std::size_t n, const std::vector<int>& y) {
  const std::size_t ex = shape_numel(arch.input_shape);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    RefTensor cur{arch.input_shape, std::vector<double>(x.begin() + b * ex, x.begin() + (b + 1) * ex)};
    std::size_t pi = 0;
    for (const auto& l : arch.layers) {
      switch (l.kind) {
        case LayerKind::Conv2d: {
          const auto& w = params[pi];
          const auto& bias = params[pi + 1];
          pi += 2;
          const std::size_t C = cur.shape[0], H = cur.shape[1], W = cur.shape[2], K = l.kernel, O = l.units;
          const std::ptrdiff_t pad = l.padding == Padding::Same ? static_cast<std::ptrdiff_t>(K / 2) : 0;
          const std::size_t OH = l.padding == Padding::Same ? H : H - K + 1;
          const std::size_t OW = l.padding == Padding::Same ? W : W - K + 1;
          RefTensor out{{O, OH, OW}, std::vector<double>(O * OH * OW)};
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < OH; ++i)
              for (std::size_t j = 0; j < OW; ++j) {
                double s = bias[o];
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t ki = 0; ki < K; ++ki)
                    for (std::size_t kj = 0; kj < K; ++kj) {
                      const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i + ki) - pad;
                      const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + kj) - pad;
                      if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(H) ||
                          xj >= static_cast<std::ptrdiff_t>(W))
                        continue;
                      s += w[((o * C + c) * K + ki) * K + kj] *
                           cur.v[(c * H + static_cast<std::size_t>(yi)) * W + static_cast<std::size_t>(xj)];
                    }
                out.v[(o * OH + i) * OW + j] = s;
              }
          cur = std::move(out);
          break;
        }
        case LayerKind::Dense: {
          const auto& w = params[pi];
          const auto& bias = params[pi + 1];
          pi += 2;
          const std::size_t in = cur.v.size(), out_n = l.units;
          RefTensor out{{out_n}, std::vector<double>(out_n)};
          for (std::size_t o = 0; o < out_n; ++o) {
            double s = bias[o];
            for (std::size_t i = 0; i < in; ++i) s += cur.v[i] * w[i * out_n + o];
            out.v[o] = s;
          }
          cur = std::move(out);
          break;
        }
        case LayerKind::Relu:
          for (double& v : cur.v) v = v > 0.0 ? v : 0.0;
          break;
        case LayerKind::MaxPool2: {
          const std::size_t C = cur.shape[0], H = cur.shape[1], W = cur.shape[2];
          RefTensor out{{C, H / 2, W / 2}, std::vector<double>(C * (H / 2) * (W / 2))};
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H / 2; ++i)
              for (std::size_t j = 0; j < W / 2; ++j) {
                double m = -INFINITY;
                for (std::size_t di = 0; di < 2; ++di)
                  for (std::size_t dj = 0; dj < 2; ++dj)
                    m = std::max(m, cur.v[(c * H + 2 * i + di) * W + 2 * j + dj]);
                out.v[(c * (H / 2) + i) * (W / 2) + j] = m;
              }
          cur = std::move(out);
          break;
        }
        case LayerKind::Flatten: cur.shape = {cur.v.size()}; break;
      }
    }
    double mx = -INFINITY;
    for (double v : cur.v) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : cur.v) se += std::exp(v - mx);
    total += (mx + std::log(se)) - cur.v[static_cast<std::size_t>(y[b])];
  }
  return total / static_cast<double>(n);
}

inline std::vector<std::vector<double>> to_double(const std::vector<Tensor>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.emplace_back(p.storage().begin(), p.storage().end());
  return out;
}

// Small dataset that trains in well under a second per model.
inline SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train_per_class = 60;
  s.test_per_class = 20;
  return s;
}

inline TrainConfig small_train() {
  TrainConfig t;
  t.epochs = 4;
  return t;
}

inline const Dataset& small_train_set() {
  static const Dataset d = generate_synthetic(small_spec(), Split::Train);
  return d;
}

inline const Dataset& small_test_set() {
  static const Dataset d = generate_synthetic(small_spec(), Split::Test);
  return d;
}

// Copy `copy` of `arch`, trained on the small dataset and cached per process.
inline const ModelInstance& small_model(const std::string& arch, std::size_t copy) {
  static std::map<std::pair<std::string, std::size_t>, ModelInstance> cache;
  const auto key = std::make_pair(arch, copy);
  auto it = cache.find(key);
  if (it == cache.end()) {
    const auto& tr = small_train_set();
    const auto spec = make_architecture(arch, tr.example_shape(), tr.classes);
    auto m = train(init_model(spec, model_seed(1, arch, copy)), tr, small_train(), &small_test_set());
    it = cache.emplace(key, std::move(m)).first;
  }
  return it->second;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("advdecomp_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
