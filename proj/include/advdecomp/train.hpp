#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "advdecomp/autodiff.hpp"
#include "advdecomp/dataset.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/model.hpp"
#include "advdecomp/parallel.hpp"
#include "advdecomp/rng.hpp"

namespace advdecomp {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.045;
  double momentum = 0.9;
  std::uint64_t global_seed = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("train", "epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train", "batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("train", "learning_rate must be >= 0");
  }
};

// Mini-batch SGD with momentum on mean cross-entropy. Shuffle order is drawn
// from the model's init seed, so (seed, dataset, cfg) fixes the result.
inline ModelInstance train(ModelInstance model, const Dataset& train_set, const TrainConfig& cfg,
                           const Dataset* test_set = nullptr) {
  cfg.validate();
  if (train_set.example_shape() != model.arch.input_shape)
    throw ShapeError("train", detail::concat(model.tag(), ": dataset example shape ",
                                             shape_str(train_set.example_shape()), " != model input ",
                                             shape_str(model.arch.input_shape)));
  const std::size_t n = train_set.size();
  std::vector<Tensor> velocity;
  for (const auto& p : model.params) velocity.emplace_back(p.shape());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(splitmix64(model.init_seed ^ 0x5f0ff1e5ULL));
  const std::size_t ex = train_set.inputs.row_size();
  const float lr = static_cast<float>(cfg.learning_rate * model.arch.lr_scale);
  const float mu = static_cast<float>(cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t b = 0, batch_idx = 0; b < n; b += cfg.batch_size, ++batch_idx) {
      const std::size_t m = std::min(cfg.batch_size, n - b);
      Shape bs = train_set.inputs.shape();
      bs[0] = m;
      Tensor xb(bs);
      std::vector<int> yb(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t src = order[b + i];
        std::copy_n(train_set.inputs.raw() + src * ex, ex, xb.raw() + i * ex);
        yb[i] = train_set.labels[src];
      }
      Graph g;
      const NodeId in = g.leaf_ref(xb);
      const auto fr = forward(g, model, in, true);
      const NodeId loss = g.cross_entropy(fr.logits, yb);
      const float lv = g.value(loss)[0];
      if (!std::isfinite(lv))
        throw NumericError("train", detail::concat(model.tag(), ": loss diverged (", lv, ") at epoch ", epoch,
                                                   ", batch ", batch_idx));
      g.backward(loss);
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        const Tensor grad = g.grad(fr.params[p]);
        auto& v = velocity[p].storage();
        auto& w = model.params[p].storage();
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = mu * v[i] + grad[i];
          w[i] -= lr * v[i];
        }
      }
    }
  }
  for (const auto& p : model.params)
    if (!p.all_finite()) throw NumericError("train", model.tag() + ": non-finite parameters after training");

  model.fingerprint.epochs = cfg.epochs;
  model.fingerprint.batch_size = cfg.batch_size;
  model.fingerprint.learning_rate = cfg.learning_rate;
  model.fingerprint.momentum = cfg.momentum;
  model.fingerprint.dataset_id = train_set.name;
  model.fingerprint.train_accuracy = accuracy(model, train_set.inputs, train_set.labels);
  model.fingerprint.test_accuracy = test_set ? accuracy(model, test_set->inputs, test_set->labels) : -1.0;
  return model;
}

// Seed for copy `copy_index` of `arch_id` under a global seed.
inline std::uint64_t model_seed(std::uint64_t global_seed, const std::string& arch_id, std::size_t copy_index) {
  return mix64(global_seed, registry_index(arch_id), copy_index);
}

struct CohortMember {
  std::string arch_id;
  std::size_t copy_index;
};

// Trains copies [0, copies_per_arch) of every architecture; models are keyed
// by arch id in copy order. `jobs` bounds parallel training runs.
inline std::map<std::string, std::vector<ModelInstance>> train_cohort(const std::vector<ArchitectureSpec>& specs,
                                                                      std::size_t copies_per_arch,
                                                                      const Dataset& train_set,
                                                                      const TrainConfig& cfg,
                                                                      const Dataset* test_set = nullptr,
                                                                      std::size_t jobs = 1) {
  if (copies_per_arch < 2) throw ConfigError("train", "a cohort needs at least 2 copies per architecture");
  std::vector<std::pair<std::size_t, std::size_t>> tasks;
  for (std::size_t a = 0; a < specs.size(); ++a)
    for (std::size_t c = 0; c < copies_per_arch; ++c) tasks.emplace_back(a, c);
  std::vector<ModelInstance> trained(tasks.size());
  parallel_for(tasks.size(), jobs, [&](std::size_t t) {
    const auto& spec = specs[tasks[t].first];
    const std::uint64_t seed = model_seed(cfg.global_seed, spec.arch_id, tasks[t].second);
    try {
      trained[t] = train(init_model(spec, seed), train_set, cfg, test_set);
    } catch (const Error& e) {
      throw Error("train", detail::concat("training ", spec.arch_id, " (seed ", seed, ") failed: ", e.what()));
    }
  });
  std::map<std::string, std::vector<ModelInstance>> out;
  for (std::size_t t = 0; t < tasks.size(); ++t) out[specs[tasks[t].first].arch_id].push_back(std::move(trained[t]));
  return out;
}

}  // namespace advdecomp
