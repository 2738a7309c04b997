#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "tabledet/rng.hpp"
#include "tabledet/tensor.hpp"

using namespace tabledet;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (long i = 0; i < t.size(); ++i) t.v[i] = scale * rng.normal();
  return t;
}

// Generic FD check for a scalar-valued function of named inputs.
double fd_error(std::vector<Tensor*> inputs, const std::function<Tensor()>& f,
                double h = 1e-6) {
  std::vector<std::pair<std::string, Tensor*>> named;
  for (size_t i = 0; i < inputs.size(); ++i) named.emplace_back("p" + std::to_string(i), inputs[i]);
  return finite_diff_check(named, f, h).max_rel_err;
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor r = matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(r.v[i] == doctest::Approx(a.v[i]));
  Tensor z = Tensor::zeros({2, 3});
  Tensor rz = matmul(a, Tensor::zeros({2, 3}));
  for (long i = 0; i < rz.size(); ++i) CHECK(rz.v[i] == 0.0);
}

TEST_CASE("matmul matches scalar triple-loop oracle") {
  Rng rng(42);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  Tensor r = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.v[i * 4 + k] * b.v[k * 2 + j];
      CHECK(std::abs(r.v[i * 2 + j] - acc) <= 1e-12);
    }
}

TEST_CASE("matmul shape mismatch") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(7);
  Tensor x = random_tensor(rng, {1, 5, 5});
  Tensor w = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, w, 1, 0);
  for (long i = 0; i < x.size(); ++i) CHECK(y.v[i] == doctest::Approx(x.v[i]));
  Tensor zy = conv2d(Tensor::zeros({1, 5, 5}), random_tensor(rng, {2, 1, 3, 3}), 1, 1);
  for (long i = 0; i < zy.size(); ++i) CHECK(zy.v[i] == 0.0);
}

TEST_CASE("conv2d matches direct 6-loop oracle") {
  Rng rng(11);
  Tensor x = random_tensor(rng, {2, 5, 5});
  Tensor w = random_tensor(rng, {3, 2, 3, 3});
  const int stride = 2, pad = 1;
  Tensor y = conv2d(x, w, stride, pad);
  const int Ho = (5 + 2 * pad - 3) / stride + 1, Wo = Ho;
  REQUIRE(y.shape == std::vector<int>({3, Ho, Wo}));
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += x.v[(ci * 5 + iy) * 5 + ix] * w.v[((co * 2 + ci) * 3 + ky) * 3 + kx];
            }
        CHECK(std::abs(y.v[(co * Ho + oy) * Wo + ox] - acc) <= 1e-12);
      }
}

TEST_CASE("conv2d empty output is an error") {
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), 1, 0),
                  DimensionError);
}

TEST_CASE("softmax basics") {
  Tensor c = Tensor::full({1, 4}, 3.0);
  Tensor y = softmax(c, 1);
  for (int i = 0; i < 4; ++i) CHECK(y.v[i] == doctest::Approx(0.25));
  Tensor hot = Tensor::from({1, 3}, {1e4, 0, 0});
  Tensor yh = softmax(hot, 1);
  CHECK(yh.v[0] == doctest::Approx(1.0));
  CHECK(std::isfinite(yh.v.sum()));
  Tensor t = Tensor::from({1, 2}, {0.0, std::log(2.0)});
  Tensor yt = softmax(t, 1);
  CHECK(yt.v[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(yt.v[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax slices sum to one over random inputs") {
  Rng rng(3);
  for (int it = 0; it < 20; ++it) {
    Tensor x = random_tensor(rng, {3, 4, 5}, 5.0);
    for (int axis = 0; axis < 3; ++axis) {
      Tensor y = softmax(x, axis);
      // check a few random slices by summing over the axis
      long inner = 1, outer = 1;
      const int ax = x.shape[axis];
      for (int i = axis + 1; i < 3; ++i) inner *= x.shape[i];
      for (int i = 0; i < axis; ++i) outer *= x.shape[i];
      for (long o = 0; o < outer; ++o)
        for (long in = 0; in < inner; ++in) {
          double s = 0;
          for (int k = 0; k < ax; ++k) s += y.v[o * ax * inner + k * inner + in];
          CHECK(std::abs(s - 1.0) <= 1e-9);
        }
    }
  }
}

TEST_CASE("sigmoid closed forms") {
  Tensor z = sigmoid(Tensor::scalar(0.0));
  CHECK(z.v[0] == doctest::Approx(0.5));
  Tensor l3 = sigmoid(Tensor::scalar(std::log(3.0)));
  CHECK(l3.v[0] == doctest::Approx(0.75).epsilon(1e-12));
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const double x = rng.uniform(-30, 30);
    const double a = sigmoid(Tensor::scalar(x)).v[0];
    const double b = sigmoid(Tensor::scalar(-x)).v[0];
    CHECK(a + b == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a > 0.0);
    CHECK(a < 1.0);
  }
}

TEST_CASE("backward on simple losses") {
  Rng rng(9);
  Tensor p = random_tensor(rng, {3, 4});
  {
    Graph g;
    g.watch(p);
    Tensor loss = sum(p);
    g.backward(loss);
    Tensor gp = g.grad(p);
    for (long i = 0; i < gp.size(); ++i) CHECK(gp.v[i] == doctest::Approx(1.0));
    p.node = -1;
  }
  {
    Graph g;
    g.watch(p);
    Tensor loss = scale(sum(mul(p, p)), 0.5);
    g.backward(loss);
    Tensor gp = g.grad(p);
    for (long i = 0; i < gp.size(); ++i) CHECK(gp.v[i] == doctest::Approx(p.v[i]));
    p.node = -1;
  }
}

TEST_CASE("backward rejects non-scalar loss; unreachable params get zeros") {
  Tensor p = Tensor::full({2}, 1.0);
  Tensor q = Tensor::full({2}, 1.0);
  Graph g;
  g.watch(p);
  g.watch(q);
  Tensor l = sum(mul(p, p));
  CHECK_THROWS_AS(g.backward(mul(p, p)), ContractError);
  g.backward(l);
  Tensor gq = g.grad(q);
  CHECK(gq.v[0] == 0.0);
  CHECK(gq.v[1] == 0.0);
}

TEST_CASE("property: backward matches finite differences per op") {
  Rng rng(1234);
  for (int seedi = 0; seedi < 100; ++seedi) {
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {3, 4});
    Tensor m1 = random_tensor(rng, {4, 3});
    Tensor w = random_tensor(rng, {2, 3, 3, 3}, 0.5);
    Tensor x3 = random_tensor(rng, {3, 6, 6});
    Tensor gmm = random_tensor(rng, {4});
    Tensor bt = random_tensor(rng, {4});

    CHECK(fd_error({&a, &b}, [&] { return sum(mul(sigmoid(a), relu(b))); }) <= 1e-4);
    CHECK(fd_error({&a, &m1}, [&] { return sum(softmax(matmul(a, m1), 1)); }) <= 1e-4);
    CHECK(fd_error({&a}, [&] { return mean(abs_t(a)); }) <= 1e-4);
    CHECK(fd_error({&a, &b}, [&] { return sum(emax(a, emin(b, a))); }) <= 1e-4);
    CHECK(fd_error({&x3, &w}, [&] { return sum(conv2d(x3, w, 2, 1)); }) <= 1e-4);
    CHECK(fd_error({&a, &gmm, &bt}, [&] { return sum(layernorm_rows(a, gmm, bt)); }) <= 1e-4);
    CHECK(fd_error({&a}, [&] {
            return cross_entropy_rows(a, {0, 3, 1}, {1.0, 0.1, 0.5});
          }) <= 1e-4);
    CHECK(fd_error({&a}, [&] { return sum(slice_cols(transpose(a), 1, 2)); }) <= 1e-4);
    CHECK(fd_error({&a, &b}, [&] {
            return sum(concat_cols({select_rows(a, {0, 2}), select_rows(b, {1, 1})}));
          }) <= 1e-4);
    CHECK(fd_error({&a}, [&] { return sum(log_t(add_scalar(abs_t(a), 1.0))); }) <= 1e-4);
  }
}

TEST_CASE("roi_align / bilinear_sample / sinusoidal_embed gradients") {
  Rng rng(777);
  for (int it = 0; it < 30; ++it) {
    Tensor feat = random_tensor(rng, {5, 6, 3});
    Tensor box = Tensor::from({4}, {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                                    rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5)});
    CHECK(fd_error({&feat, &box}, [&] { return sum(roi_align(feat, box, 3)); }) <= 1e-4);

    Tensor grid = random_tensor(rng, {4, 3, 3});
    Tensor pt = Tensor::from({2}, {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)});
    CHECK(fd_error({&grid, &pt}, [&] { return sum(mul(bilinear_sample(grid, pt),
                                                      bilinear_sample(grid, pt))); }) <= 1e-4);

    Tensor pts = Tensor::from({2, 2}, {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                                       rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)});
    CHECK(fd_error({&box, &pts}, [&] { return sum(sinusoidal_embed(box, pts, 8)); }) <= 1e-4);
  }
}

TEST_CASE("adamw: zero gradient with zero decay keeps params") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5});
  Tensor orig = p.detached();
  std::vector<Tensor*> params{&p};
  std::vector<Array> grads{Array::Zero(3)};
  OptimState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  for (int i = 0; i < 5; ++i) adamw_step(params, grads, st, cfg);
  for (int i = 0; i < 3; ++i) CHECK(p.v[i] == orig.v[i]);
}

TEST_CASE("adamw: constant gradient approaches -lr*sign(g)") {
  Tensor p = Tensor::from({2}, {0.0, 0.0});
  std::vector<Tensor*> params{&p};
  Array g(2);
  g << 3.0, -0.02;
  OptimState st;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0;
  double prev0 = p.v[0], prev1 = p.v[1];
  for (int i = 0; i < 200; ++i) {
    adamw_step(params, {g}, st, cfg);
    prev0 = p.v[0];
    prev1 = p.v[1];
  }
  adamw_step(params, {g}, st, cfg);
  CHECK(p.v[0] - prev0 == doctest::Approx(-0.1).epsilon(1e-3));
  CHECK(p.v[1] - prev1 == doctest::Approx(0.1).epsilon(1e-3));
}

TEST_CASE("adamw single step matches hand unroll") {
  Tensor p = Tensor::from({1}, {1.0});
  std::vector<Tensor*> params{&p};
  Array g(1);
  g << 1.0;
  OptimState st;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0;
  adamw_step(params, {g}, st, cfg);
  // m = 0.1*g, v = 0.001*g^2; mhat = g, vhat = g^2; p -= lr * g/(|g|+eps)
  const double expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
  CHECK(p.v[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("adamw shape mismatch") {
  Tensor p = Tensor::from({2}, {1.0, 1.0});
  std::vector<Tensor*> params{&p};
  OptimState st;
  AdamWConfig cfg;
  CHECK_THROWS_AS(adamw_step(params, {Array::Zero(3)}, st, cfg), DimensionError);
}

TEST_CASE("finite_diff_check basics") {
  Tensor p = Tensor::from({3}, {0.3, -0.4, 2.0});
  std::vector<std::pair<std::string, Tensor*>> named{{"p", &p}};
  auto linear = [&] {
    Graph* g = Graph::active();
    if (g) g->watch(p);
    return sum(scale(p, 3.0));
  };
  // linear loss: exact
  auto res = finite_diff_check(named, [&] { return sum(scale(p, 3.0)); }, 1e-5);
  CHECK(res.max_rel_err <= 1e-10);
  CHECK_THROWS_AS(finite_diff_check(named, [&] { return sum(p); }, 0.0), ContractError);
  (void)linear;
}

TEST_CASE("graph replay determinism") {
  Rng rng(2024);
  Tensor p = random_tensor(rng, {4, 4});
  auto run = [&]() {
    Graph g;
    Tensor q = p.detached();
    g.watch(q);
    Tensor loss = sum(mul(softmax(matmul(q, q), 1), sigmoid(q)));
    g.backward(loss);
    return std::make_pair(loss.item(), g.grad(q).v);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  for (long i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(31);
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("a.w", random_tensor(rng, {3, 4}));
  params.emplace_back("b.b", random_tensor(rng, {7}));
  const std::string path = "test_ckpt.bin";
  save_checkpoint(path, params);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].first == "a.w");
  CHECK(loaded[1].second.shape == std::vector<int>({7}));
  for (size_t i = 0; i < 2; ++i)
    for (long j = 0; j < params[i].second.size(); ++j)
      CHECK(loaded[i].second.v[j] == params[i].second.v[j]);
  std::remove(path.c_str());
}
