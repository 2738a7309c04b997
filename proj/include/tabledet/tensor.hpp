#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <stdexcept>
#include <vector>

namespace tabledet {

using Array = Eigen::ArrayXd;
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor of doubles. `node` is a handle into the active
// Graph when the tensor participates in autodiff; -1 means constant.
struct Tensor {
  std::vector<int> shape;
  Array v;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<int> s, Array values) : shape(std::move(s)), v(std::move(values)) {
    if (static_cast<long>(numel(shape)) != v.size())
      throw DimensionError("tensor shape/value length mismatch");
  }

  static long numel(const std::vector<int>& s) {
    long n = 1;
    for (int e : s) {
      if (e <= 0) throw DimensionError("non-positive tensor extent");
      n *= e;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    long n = numel(s);
    return Tensor(std::move(s), Array::Zero(n));
  }
  static Tensor full(std::vector<int> s, double x) {
    long n = numel(s);
    return Tensor(std::move(s), Array::Constant(n, x));
  }
  static Tensor scalar(double x) { return Tensor({1}, Array::Constant(1, x)); }
  static Tensor from(std::vector<int> s, std::vector<double> data) {
    return Tensor(std::move(s), Eigen::Map<const Array>(data.data(), static_cast<long>(data.size())));
  }

  long size() const { return v.size(); }
  double item() const {
    if (v.size() != 1) throw ContractError("item() on non-scalar tensor");
    return v[0];
  }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  // Value without graph participation.
  Tensor detached() const { return Tensor(shape, v); }
};

// Dynamic tape rebuilt per training step. One Graph is active at a time
// (single-writer); ops record themselves onto Graph::active() when their
// inputs carry node handles.
class Graph {
 public:
  using BackFn = std::function<void(const Array& gout, Graph& g)>;

  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active() { return active_; }

  // Register a leaf (parameter). Idempotent per tensor object per graph.
  int watch(Tensor& t);

  int record(long out_size, BackFn back);

  // Accumulation buffer for a node, allocated on first touch.
  Array& grad_buf(int node, long size);

  void backward(const Tensor& loss);

  // Gradient of a participating tensor; zeros if unreached.
  Tensor grad(const Tensor& t) const;

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    BackFn back;
    long size;
  };
  std::vector<Node> nodes_;
  std::vector<Array> grads_;
  bool ran_backward_ = false;
  static thread_local Graph* active_;
  Graph* prev_ = nullptr;
};

// ---- differentiable ops -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);

Tensor slice_cols(const Tensor& a, int c0, int len);
Tensor select_rows(const Tensor& a, const std::vector<int>& idx);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor emin(const Tensor& a, const Tensor& b);
Tensor emax(const Tensor& a, const Tensor& b);
Tensor abs_t(const Tensor& a);
// Elementwise 1/(a + eps).
Tensor reciprocal(const Tensor& a, double eps = 1e-12);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);

// x: [m x n] plus row vector b: [n].
Tensor add_rowvec(const Tensor& x, const Tensor& b);
// x: [C x H x W] plus per-channel bias b: [C].
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

// Cross-correlation with zero padding; x: [Cin x H x W], w: [Cout x Cin x k x k].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-5);

// Weighted negative log-likelihood over rows of logits [m x C];
// returns sum_i weights[i] * -log softmax(logits_i)[targets[i]].
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights);

// feat: [H x W x C] row-major (y, x, channel); box: [4] = (cx, cy, w, h)
// normalized. Output [C x S x S] channel-first grid of bilinear samples at
// sub-cell centers; zero padding outside the map. Differentiable w.r.t.
// feat and box.
Tensor roi_align(const Tensor& feat, const Tensor& box, int S);

// grid: [C x S x S]; pt: [2] in [0,1]^2 over the grid extent. Output [C].
// Differentiable w.r.t. grid and pt.
Tensor bilinear_sample(const Tensor& grid, const Tensor& pt);

// box: [4], pts: [H x 2] box-relative. Output [H x dim]: fixed sin/cos bands
// of the points' absolute coordinates; dim divisible by 4.
Tensor sinusoidal_embed(const Tensor& box, const Tensor& pts, int dim,
                        double temperature = 10000.0);

// ---- optimizer ----------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimState {
  std::vector<Array> m;
  std::vector<Array> v;
  long step = 0;
};

// Decoupled weight-decay Adam with bias correction. `grads[i]` pairs with
// `params[i]`; state slots are created on first use.
void adamw_step(std::vector<Tensor*>& params, const std::vector<Array>& grads,
                OptimState& state, const AdamWConfig& cfg);

// Test hook: deliberately corrupts one backward rule so gradient-check
// failure paths can be exercised.
void corrupt_backward_for_tests(bool enabled);

// ---- finite differences -------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_coord = -1;
  double analytic = 0.0, numeric = 0.0;
  std::map<std::string, double> per_param_worst;
};

// Central finite differences against backward() over every coordinate, or a
// seeded random subset of `max_coords` when the parameter vector is larger.
GradCheckResult finite_diff_check(
    const std::vector<std::pair<std::string, Tensor*>>& params,
    const std::function<Tensor()>& loss_fn, double h, long max_coords = 0,
    uint64_t seed = 0);

// ---- checkpoints ---------------------------------------------------------

// One JSON header line listing (name, shape, offset) followed by raw
// little-endian 64-bit floats; offsets count floats from the data start.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& params);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

}  // namespace tabledet
