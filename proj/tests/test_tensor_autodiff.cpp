#include <catch_amalgamated.hpp>

#include "advdecomp/autodiff.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace advdecomp;
using namespace testsupport;
using Catch::Matchers::ContainsSubstring;

namespace {

// Brute-force cross-correlation, [N,C,H,W] * [O,C,K,K].
Tensor naive_conv(const Tensor& x, const Tensor& w, Padding p) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0), K = w.dim(2);
  const long pad = p == Padding::Same ? static_cast<long>(K / 2) : 0;
  const std::size_t OH = p == Padding::Same ? H : H - K + 1, OW = p == Padding::Same ? W : W - K + 1;
  Tensor out({N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t b = 0; b < K; ++b) {
                const long yi = static_cast<long>(i + a) - pad, xj = static_cast<long>(j + b) - pad;
                if (yi < 0 || xj < 0 || yi >= static_cast<long>(H) || xj >= static_cast<long>(W)) continue;
                s += static_cast<double>(w[((o * C + c) * K + a) * K + b]) *
                     x[((n * C + c) * H + static_cast<std::size_t>(yi)) * W + static_cast<std::size_t>(xj)];
              }
          out[((n * O + o) * OH + i) * OW + j] = static_cast<float>(s);
        }
  return out;
}

void require_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) <= tol);
}

}  // namespace

TEST_CASE("tensor basics", "[tensor]") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.row_size() == 3);
  CHECK(t.all_finite());
  t[4] = std::nanf("");
  CHECK_FALSE(t.all_finite());
  CHECK(sign0(0.0f) == 0.0f);
  CHECK(sign0(-0.0f) == 0.0f);
  CHECK(sign0(-3.0f) == -1.0f);
  const Tensor r = random_tensor({4, 2}, 3);
  const Tensor s = slice_rows(r, 1, 3);
  CHECK(s.dim(0) == 2);
  CHECK(s[0] == r[2]);
  Tensor w({4, 2});
  write_rows(w, 1, s);
  CHECK(w[2] == r[2]);
  CHECK(w[0] == 0.0f);
}

TEST_CASE("matmul matches triple loop", "[autodiff][oracle]") {
  const Tensor a = random_tensor({5, 7}, 1), b = random_tensor({7, 3}, 2);
  Graph g;
  const Tensor& c = g.value(g.matmul(g.leaf(a), g.leaf(b)));
  Tensor ref({5, 3});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += static_cast<double>(a[i * 7 + k]) * b[k * 3 + j];
      ref[i * 3 + j] = static_cast<float>(s);
    }
  require_close(c, ref, 1e-5);
}

TEST_CASE("conv2d matches brute force", "[autodiff][oracle]") {
  const Tensor x = random_tensor({2, 3, 7, 6}, 4);
  for (std::size_t k : {1u, 3u, 5u}) {
    const Tensor w = random_tensor({4, 3, k, k}, 5 + k);
    for (Padding p : {Padding::Valid, Padding::Same}) {
      Graph g;
      const Tensor& y = g.value(g.conv2d(g.leaf(x), g.leaf(w), p));
      require_close(y, naive_conv(x, w, p), 1e-5);
    }
  }
}

TEST_CASE("maxpool2, relu, flatten, bias_add forward", "[autodiff][oracle]") {
  const Tensor x = random_tensor({2, 3, 5, 4}, 6);
  Graph g;
  const NodeId in = g.leaf(x);
  const Tensor& p = g.value(g.maxpool2(in));
  REQUIRE(p.shape() == Shape{2, 3, 2, 2});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
          float m = -2.0f;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x[((n * 3 + c) * 5 + 2 * i + a) * 4 + 2 * j + b]);
          CHECK(p[((n * 3 + c) * 2 + i) * 2 + j] == m);
        }
  const Tensor& r = g.value(g.relu(in));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(r[i] == std::max(0.0f, x[i]));
  CHECK(g.shape(g.flatten(in)) == Shape{2, 60});
  const Tensor bias = random_tensor({3}, 7);
  const Tensor& ba = g.value(g.bias_add(in, g.leaf(bias)));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(ba[i] == x[i] + bias[(i / 20) % 3]);
}

TEST_CASE("log_softmax and cross-entropy forward", "[autodiff][oracle]") {
  Tensor z({2, 4}, std::vector<float>{1, 2, 3, 4, 100, -100, 0, 0});
  const std::vector<int> y{3, 0};
  Graph g;
  const NodeId in = g.leaf(z);
  const Tensor& lp = g.value(g.log_softmax(in));
  for (std::size_t n = 0; n < 2; ++n) {
    double mx = -1e300, se = 0.0;
    for (std::size_t k = 0; k < 4; ++k) mx = std::max(mx, double(z[n * 4 + k]));
    for (std::size_t k = 0; k < 4; ++k) se += std::exp(z[n * 4 + k] - mx);
    for (std::size_t k = 0; k < 4; ++k) CHECK(lp[n * 4 + k] == Catch::Approx(z[n * 4 + k] - mx - std::log(se)).margin(1e-5));
  }
  CHECK(lp.all_finite());
  const float mean = g.value(g.cross_entropy(in, y))[0];
  const float sum = g.value(g.cross_entropy(in, y, Reduction::Sum))[0];
  CHECK(sum == Catch::Approx(-(lp[3] + lp[4])).margin(1e-5));
  CHECK(mean == Catch::Approx(sum / 2).margin(1e-6));
  CHECK(g.value(g.nll(g.log_softmax(in), y))[0] == Catch::Approx(mean).margin(1e-6));
}

TEST_CASE("relu subgradient at zero is zero", "[autodiff]") {
  Graph g;
  const NodeId x = g.leaf(Tensor({3}, std::vector<float>{-1.0f, 0.0f, 2.0f}), true);
  g.backward(g.sum(g.relu(x)));
  const Tensor gr = g.grad(x);
  CHECK(gr[0] == 0.0f);
  CHECK(gr[1] == 0.0f);
  CHECK(gr[2] == 1.0f);
}

TEST_CASE("composite graph gradients match central differences", "[autodiff][property]") {
  // f = mean(relu(x W + b) - 0.5 x W) + sum(log_softmax(xW)) * 0.1
  const Tensor x0 = random_tensor({3, 4}, 11), w0 = random_tensor({4, 5}, 12), b0 = random_tensor({5}, 13);
  auto build = [](Graph& g, NodeId x, NodeId w, NodeId b) {
    const NodeId xw = g.matmul(x, w);
    const NodeId h = g.relu(g.bias_add(xw, b));
    const NodeId a = g.mean(g.sub(h, g.scale(xw, 0.5f)));
    const NodeId c = g.scale(g.sum(g.log_softmax(xw)), 0.1f);
    return g.add(a, c);
  };
  Graph g;
  const NodeId x = g.leaf(x0, true), w = g.leaf(w0, true), b = g.leaf(b0, true);
  g.backward(build(g, x, w, b));
  const std::vector<Tensor> grads{g.grad(x), g.grad(w), g.grad(b)};

  // Same expression evaluated in double.
  auto f = [](const std::vector<std::vector<double>>& v) {
    const auto &X = v[0], &W = v[1], &B = v[2];
    double a = 0.0, c = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double row[5], mx = -1e300, se = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        row[j] = 0.0;
        for (std::size_t k = 0; k < 4; ++k) row[j] += X[i * 4 + k] * W[k * 5 + j];
        a += std::max(0.0, row[j] + B[j]) - 0.5 * row[j];
        mx = std::max(mx, row[j]);
      }
      for (double r : row) se += std::exp(r - mx);
      for (double r : row) c += r - mx - std::log(se);
    }
    return a / 15.0 + 0.1 * c;
  };
  std::vector<std::vector<double>> v;
  for (const Tensor* t : {&x0, &w0, &b0}) v.emplace_back(t->storage().begin(), t->storage().end());
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < v[s].size(); ++i) {
      auto p = v, m = v;
      p[s][i] += 1e-6;
      m[s][i] -= 1e-6;
      const double num = (f(p) - f(m)) / 2e-6;
      CHECK(grad_rel_error(grads[s][i], num) < 1e-3);
    }
}

TEST_CASE("every registered architecture passes the finite-difference check", "[autodiff][property]") {
  for (const auto& arch : registered_architectures()) {
    const auto r = check_gradients(arch, 120, 77);
    INFO(arch << " max rel error " << r.max_rel_error);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("backward is linear in the loss", "[autodiff][property]") {
  const ModelInstance m = init_model(make_architecture("cnn_b", {1, 16, 16}, 10), 5);
  const Tensor x = random_tensor({4, 1, 16, 16}, 21);
  const auto y1 = random_labels(4, 10, 1), y2 = random_labels(4, 10, 2);
  auto grad_of = [&](float a, float b) {
    Graph g;
    const NodeId in = g.leaf_ref(x, true);
    const auto fr = forward(g, m, in);
    const NodeId l1 = g.cross_entropy(fr.logits, y1), l2 = g.cross_entropy(fr.logits, y2);
    NodeId loss;
    if (b == 0.0f)
      loss = g.scale(l1, a);
    else if (a == 0.0f)
      loss = g.scale(l2, b);
    else
      loss = g.add(g.scale(l1, a), g.scale(l2, b));
    g.backward(loss);
    return g.grad(in);
  };
  const Tensor both = grad_of(0.7f, -1.3f), f = grad_of(0.7f, 0.0f), h = grad_of(0.0f, -1.3f);
  for (std::size_t i = 0; i < both.size(); ++i) CHECK(std::abs(both[i] - (f[i] + h[i])) <= 1e-6);
}

TEST_CASE("graph evaluation is deterministic", "[autodiff][property]") {
  const ModelInstance m = init_model(make_architecture("cnn_a", {1, 16, 16}, 10), 9);
  const Tensor x = random_tensor({3, 1, 16, 16}, 22);
  const auto y = random_labels(3, 10, 3);
  const auto a = loss_and_input_grad(m, x, y), b = loss_and_input_grad(m, x, y);
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("autodiff error paths", "[autodiff][errors]") {
  Graph g;
  CHECK_THROWS_AS(g.backward(0), Error);
  const NodeId a = g.leaf(Tensor({2, 3}), true), b = g.leaf(Tensor({4, 2}));
  CHECK_THROWS_AS(g.matmul(a, b), ShapeError);
  CHECK_THROWS_AS(g.add(a, b), ShapeError);
  CHECK_THROWS_AS(g.backward(a), ShapeError);
  CHECK_THROWS_AS(g.value(99), Error);
  const std::vector<int> bad{0, 7};
  CHECK_THROWS_WITH(g.cross_entropy(a, bad), ContainsSubstring("7"));
  const std::vector<int> short_labels{0};
  CHECK_THROWS(g.cross_entropy(a, short_labels));
  const NodeId x = g.leaf(Tensor({1, 2, 4, 4})), w = g.leaf(Tensor({3, 1, 3, 3}));
  CHECK_THROWS_AS(g.conv2d(x, w, Padding::Valid), ShapeError);
}
