#include <catch_amalgamated.hpp>

#include "advdecomp/attack.hpp"
#include "advdecomp/decomposition.hpp"
#include "advdecomp/evaluation.hpp"
#include "support.hpp"

using namespace advdecomp;
using namespace testsupport;
using Catch::Matchers::ContainsSubstring;

namespace {

const Dataset& eval_set() {
  static const Dataset d = take_first(small_test_set(), 60);
  return d;
}

void check_budget(const Tensor& x, const Tensor& delta, double eps) {
  for (std::size_t i = 0; i < delta.dim(0); ++i) {
    REQUIRE(max_abs(delta.row(i)) <= eps + 1e-6);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    REQUIRE(x[i] + delta[i] <= 1.0f);
    REQUIRE(x[i] + delta[i] >= -1.0f);
  }
}

}  // namespace

TEST_CASE("attack config validation", "[attack][errors]") {
  AttackConfig c;
  CHECK(c.step() == Catch::Approx(0.003));
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.epsilon = 0.03;
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.iterations = 4;
  c.step_size = 0.1;
  CHECK(c.step() == 0.1);
}

TEST_CASE("perturbations stay inside the budget", "[attack][property]") {
  const auto& d = eval_set();
  // Push some inputs to the range boundary so the [-1, 1] clip is exercised.
  Tensor x = d.inputs;
  for (std::size_t i = 0; i < x.size(); i += 7) x[i] = (i % 2 ? 1.0f : -1.0f);
  const ModelInstance& m = small_model("cnn_b", 0);
  const EnsembleTarget ens(std::vector<const ModelInstance*>{&small_model("cnn_b", 1), &small_model("cnn_b", 2)});
  for (double eps : {0.01, 0.03, 0.1}) {
    AttackConfig cfg;
    cfg.epsilon = eps;
    const auto raw = ifgsm(m, x, d.labels, cfg);
    CHECK(raw.kind == PerturbationKind::Raw);
    check_budget(x, raw.delta, eps);
    const auto nr = ifgsm(ens, x, d.labels, cfg);
    CHECK(nr.kind == PerturbationKind::NoiseReduced);
    check_budget(x, nr.delta, eps);
    // A warm start far outside the ball is projected back first.
    const Tensor wild = random_tensor(x.shape(), 3, -0.5, 0.5);
    check_budget(x, ifgsm(m, x, d.labels, cfg, &wild).delta, eps);
  }
}

TEST_CASE("one iteration of iFGSM is FGSM", "[attack][oracle]") {
  const auto& d = eval_set();
  const ModelInstance& m = small_model("cnn_a", 0);
  AttackConfig cfg;
  cfg.iterations = 1;
  const auto p = ifgsm(m, d.inputs, d.labels, cfg);
  const Tensor g = grad_wrt_input(m, d.inputs, d.labels);
  const float eps = static_cast<float>(cfg.epsilon);
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float x = d.inputs[i];
    const float step = eps * sign0(g[i]);
    if (x + step <= 1.0f && x + step >= -1.0f) {
      REQUIRE(p.delta[i] == step);
    } else {
      ++clipped;
      REQUIRE(x + p.delta[i] == std::clamp(x + step, -1.0f, 1.0f));
    }
  }
  INFO("coordinates clipped at the range edge: " << clipped);
}

TEST_CASE("iFGSM on softmax regression matches the closed-form iteration", "[attack][oracle]") {
  const auto& d = eval_set();
  const ModelInstance& m = small_model("linear", 0);
  const Tensor& W = m.params[0];  // [256, 10]
  const Tensor& b = m.params[1];
  const std::size_t D = 256, K = 10;
  AttackConfig cfg;
  cfg.iterations = 7;
  const auto p = ifgsm(m, d.inputs, d.labels, cfg);

  // grad_x CE = W (softmax(x W + b) - onehot(y)), iterated in double.
  const double eps = cfg.epsilon, step = cfg.step();
  std::size_t mismatches = 0;
  for (std::size_t n = 0; n < d.size(); ++n) {
    std::vector<double> x(D), delta(D, 0.0);
    for (std::size_t j = 0; j < D; ++j) x[j] = d.inputs[n * D + j];
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      std::vector<double> z(K);
      for (std::size_t k = 0; k < K; ++k) {
        z[k] = b[k];
        for (std::size_t j = 0; j < D; ++j) z[k] += (x[j] + delta[j]) * W[j * K + k];
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double se = 0.0;
      for (double& v : z) se += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < K; ++k) z[k] = z[k] / se - (static_cast<int>(k) == d.labels[n] ? 1.0 : 0.0);
      for (std::size_t j = 0; j < D; ++j) {
        double gj = 0.0;
        for (std::size_t k = 0; k < K; ++k) gj += W[j * K + k] * z[k];
        const double s = gj > 0 ? 1.0 : (gj < 0 ? -1.0 : 0.0);
        double nd = std::clamp(delta[j] + step * s, -eps, eps);
        nd = std::clamp(x[j] + nd, -1.0, 1.0) - x[j];
        delta[j] = nd;
      }
    }
    for (std::size_t j = 0; j < D; ++j)
      if (std::abs(delta[j] - p.delta[n * D + j]) > 1e-6) ++mismatches;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("ensemble loss and gradient are member means", "[attack][property]") {
  const auto& d = eval_set();
  std::vector<const ModelInstance*> ms{&small_model("mlp", 0), &small_model("cnn_a", 0), &small_model("cnn_b", 0),
                                       &small_model("cnn_wide", 0)};
  const EnsembleTarget t(ms);
  const auto e = ensemble_loss(t, d.inputs, d.labels);
  double loss = 0.0;
  Tensor grad(d.inputs.shape());
  for (const auto* m : ms) {
    const auto lg = loss_and_input_grad(*m, d.inputs, d.labels);
    loss += lg.loss / 4.0;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += lg.grad[i] / 4.0f;
  }
  CHECK(std::abs(e.loss - loss) <= 1e-6);
  double worst = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) worst = std::max(worst, double(std::abs(e.grad[i] - grad[i])));
  CHECK(worst <= 1e-6);
  CHECK_THROWS_AS(ensemble_loss(EnsembleTarget{}, d.inputs, d.labels), ConfigError);
  const ModelInstance odd = init_model(make_architecture("mlp", {1, 16, 16}, 5), 1);
  CHECK_THROWS_AS(ensemble_loss(EnsembleTarget(std::vector<const ModelInstance*>{ms[0], &odd}), d.inputs, d.labels),
                  ShapeError);
}

TEST_CASE("attacks do not depend on batch size or job count", "[attack][property]") {
  const auto& d = eval_set();
  const EnsembleTarget t(std::vector<const ModelInstance*>{&small_model("cnn_b", 1), &small_model("cnn_b", 2)});
  const AttackConfig cfg;
  const auto a = ifgsm(t, d.inputs, d.labels, cfg, nullptr, {100, 1});
  const auto b = ifgsm(t, d.inputs, d.labels, cfg, nullptr, {7, 3});
  const auto c = ifgsm(t, d.inputs, d.labels, cfg, nullptr, {1, 2});
  CHECK(a.delta == b.delta);
  CHECK(a.delta == c.delta);
  // The first rows equal an attack on just those rows.
  const Tensor head = slice_rows(d.inputs, 0, 5);
  const auto h = ifgsm(t, head, std::span<const int>(d.labels).first(5), cfg);
  CHECK(h.delta == slice_rows(a.delta, 0, 5));
}

TEST_CASE("attack raises the loss above the clean loss", "[attack][property]") {
  const auto& d = eval_set();
  const ModelInstance& m = small_model("cnn_wide", 0);
  const auto p = ifgsm(m, d.inputs, d.labels, AttackConfig{});
  const Tensor adv = perturbed(d.inputs, p.delta);
  std::size_t up = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::vector<int> y{d.labels[i]};
    up += model_loss(m, slice_rows(adv, i, i + 1), y) >= model_loss(m, slice_rows(d.inputs, i, i + 1), y);
  }
  CHECK(static_cast<double>(up) >= 0.95 * static_cast<double>(d.size()));
}

TEST_CASE("source-model efficacy grows with epsilon", "[attack][property]") {
  const auto& d = eval_set();
  const ModelInstance& m = small_model("cnn_b", 0);
  double prev = -1.0;
  for (double eps : {0.01, 0.03, 0.06}) {
    AttackConfig cfg;
    cfg.epsilon = eps;
    const double f = fooling_ratio(m, d.inputs, ifgsm(m, d.inputs, d.labels, cfg).delta);
    CHECK(f >= prev);
    prev = f;
  }
}

TEST_CASE("attack determinism and warm-start provenance", "[attack]") {
  const auto& d = eval_set();
  const ModelInstance& m = small_model("mlp", 0);
  const auto a = ifgsm(m, d.inputs, d.labels, AttackConfig{});
  const auto b = ifgsm(m, d.inputs, d.labels, AttackConfig{});
  CHECK(a.delta == b.delta);
  CHECK(a.provenance == b.provenance);
  CHECK(a.provenance["warm_start"] == "zero");
  const auto w = ifgsm(EnsembleTarget(m), d.inputs, d.labels, AttackConfig{}, &a.delta, {}, "prior");
  CHECK(w.provenance["warm_start"] == "prior");
  CHECK(w.provenance["source_models"][0] == m.tag());
}

TEST_CASE("attack input validation", "[attack][errors]") {
  const auto& d = eval_set();
  const ModelInstance& m = small_model("mlp", 0);
  std::vector<int> y = d.labels;
  y.pop_back();
  CHECK_THROWS_AS(ifgsm(m, d.inputs, y, AttackConfig{}), ShapeError);
  y = d.labels;
  y[3] = 12;
  CHECK_THROWS_WITH(ifgsm(m, d.inputs, y, AttackConfig{}), ContainsSubstring("example 3"));
  const Tensor wrong({2, 1, 8, 8});
  CHECK_THROWS_AS(ifgsm(m, wrong, std::vector<int>{0, 1}, AttackConfig{}), ShapeError);
  const Tensor ws({1, 1, 16, 16});
  CHECK_THROWS_AS(ifgsm(m, d.inputs, d.labels, AttackConfig{}, &ws), ShapeError);
}

TEST_CASE("perturbation archive round trip", "[attack][archive]") {
  const auto& d = eval_set();
  const auto p = ifgsm(small_model("cnn_b", 0), d.inputs, d.labels, AttackConfig{});
  const auto bytes = encode_perturbation(p);
  const auto back = decode_perturbation(bytes);
  CHECK(back.delta == p.delta);
  CHECK(back.kind == p.kind);
  CHECK(back.provenance == p.provenance);
  CHECK(encode_perturbation(back) == bytes);
  const auto dir = temp_dir("advp");
  write_perturbation(dir / "p.advp", p);
  CHECK(read_perturbation(dir / "p.advp").delta == p.delta);

  for (std::uint8_t k = 0; k <= 5; ++k) {
    const auto kind = static_cast<PerturbationKind>(k);
    CHECK(kind_from_name(kind_name(kind)) == kind);
  }
  CHECK_THROWS_AS(kind_from_name("bogus"), FormatError);

  SECTION("magic") {
    auto b = bytes;
    b[1] = 'X';
    CHECK_THROWS_WITH(decode_perturbation(b), ContainsSubstring("magic"));
  }
  SECTION("version") {
    auto b = bytes;
    b[4] = 7;
    CHECK_THROWS_WITH(decode_perturbation(b), ContainsSubstring("version"));
  }
  SECTION("kind") {
    auto b = bytes;
    b[6] = 9;
    CHECK_THROWS_WITH(decode_perturbation(b), ContainsSubstring("kind"));
  }
  SECTION("truncated") {
    std::vector<std::uint8_t> b(bytes.begin(), bytes.end() - 1);
    CHECK_THROWS_WITH(decode_perturbation(b), ContainsSubstring("truncated"));
  }
  SECTION("trailing") {
    auto b = bytes;
    b.push_back(1);
    CHECK_THROWS_WITH(decode_perturbation(b), ContainsSubstring("trailing"));
  }
}
