#include "tabledet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "tabledet/rng.hpp"
#include "json.hpp"

namespace tabledet {

thread_local Graph* Graph::active_ = nullptr;

Graph::Graph() {
  prev_ = active_;
  active_ = this;
}

Graph::~Graph() { active_ = prev_; }

int Graph::watch(Tensor& t) {
  if (t.node >= 0) return t.node;
  t.node = record(t.size(), nullptr);
  return t.node;
}

int Graph::record(long out_size, BackFn back) {
  nodes_.push_back(Node{std::move(back), out_size});
  return static_cast<int>(nodes_.size()) - 1;
}

Array& Graph::grad_buf(int node, long size) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& g = grads_[static_cast<size_t>(node)];
  if (g.size() == 0) g = Array::Zero(size);
  return g;
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
  if (loss.node < 0) throw ContractError("backward: loss is not on the graph");
  grads_.assign(nodes_.size(), Array());
  grad_buf(loss.node, 1)[0] = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    auto& g = grads_[static_cast<size_t>(i)];
    if (g.size() == 0) continue;  // unreached
    if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(g, *this);
  }
  ran_backward_ = true;
}

Tensor Graph::grad(const Tensor& t) const {
  if (!ran_backward_) throw ContractError("grad() before backward()");
  Tensor out = Tensor::zeros(t.shape);
  if (t.node >= 0 && static_cast<size_t>(t.node) < grads_.size()) {
    const auto& g = grads_[static_cast<size_t>(t.node)];
    if (g.size() == t.size()) out.v = g;
  }
  return out;
}

namespace {

// Record `out` on the active graph when any input participates.
void record_op(Tensor& out, std::vector<const Tensor*> inputs,
               std::function<void(const Array&, Graph&, const std::vector<int>&)> back) {
  Graph* g = Graph::active();
  if (!g) return;
  bool any = false;
  std::vector<int> parents;
  parents.reserve(inputs.size());
  std::vector<long> sizes;
  for (const Tensor* in : inputs) {
    parents.push_back(in->node);
    sizes.push_back(in->size());
    if (in->node >= 0) any = true;
  }
  if (!any) return;
  out.node = g->record(out.size(), [back = std::move(back), parents](const Array& gout, Graph& gg) {
    back(gout, gg, parents);
  });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) throw DimensionError(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape, a.v + b.v);
  record_op(out, {&a, &b}, [na = a.size()](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], na) += g;
    if (p[1] >= 0) gg.grad_buf(p[1], na) += g;
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape, a.v - b.v);
  record_op(out, {&a, &b}, [na = a.size()](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], na) += g;
    if (p[1] >= 0) gg.grad_buf(p[1], na) -= g;
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape, a.v * b.v);
  record_op(out, {&a, &b},
            [av = a.v, bv = b.v](const Array& g, Graph& gg, const std::vector<int>& p) {
              if (p[0] >= 0) gg.grad_buf(p[0], av.size()) += g * bv;
              if (p[1] >= 0) gg.grad_buf(p[1], bv.size()) += g * av;
            });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape, a.v * c);
  record_op(out, {&a}, [c, n = a.size()](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], n) += g * c;
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out(a.shape, a.v + c);
  record_op(out, {&a}, [n = a.size()](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], n) += g;
  });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    throw DimensionError("matmul: inner extents differ");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Eigen::Map<const MatRM> ma(a.v.data(), m, k), mb(b.v.data(), k, n);
  Tensor out({m, n}, Array(static_cast<long>(m) * n));
  Eigen::Map<MatRM>(out.v.data(), m, n) = ma * mb;
  record_op(out, {&a, &b},
            [av = a.v, bv = b.v, m, k, n](const Array& g, Graph& gg, const std::vector<int>& p) {
              Eigen::Map<const MatRM> mg(g.data(), m, n);
              if (p[0] >= 0) {
                Array& ga = gg.grad_buf(p[0], static_cast<long>(m) * k);
                Eigen::Map<const MatRM> mb2(bv.data(), k, n);
                Eigen::Map<MatRM>(ga.data(), m, k) += mg * mb2.transpose();
              }
              if (p[1] >= 0) {
                Array& gb = gg.grad_buf(p[1], static_cast<long>(k) * n);
                Eigen::Map<const MatRM> ma2(av.data(), m, k);
                Eigen::Map<MatRM>(gb.data(), k, n) += ma2.transpose() * mg;
              }
            });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.shape.size() != 2) throw DimensionError("transpose: rank-2 only");
  const int m = a.shape[0], n = a.shape[1];
  Tensor out({n, m}, Array(a.size()));
  Eigen::Map<MatRM>(out.v.data(), n, m) = Eigen::Map<const MatRM>(a.v.data(), m, n).transpose();
  record_op(out, {&a}, [m, n](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) {
      Array& ga = gg.grad_buf(p[0], static_cast<long>(m) * n);
      Eigen::Map<MatRM>(ga.data(), m, n) += Eigen::Map<const MatRM>(g.data(), n, m).transpose();
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (Tensor::numel(shape) != a.size()) throw DimensionError("reshape: element count differs");
  Tensor out(std::move(shape), a.v);
  record_op(out, {&a}, [n = a.size()](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], n) += g;
  });
  return out;
}

Tensor slice_cols(const Tensor& a, int c0, int len) {
  if (a.shape.size() != 2) throw DimensionError("slice_cols: rank-2 only");
  const int m = a.shape[0], n = a.shape[1];
  if (c0 < 0 || len <= 0 || c0 + len > n) throw DimensionError("slice_cols: out of range");
  Tensor out({m, len}, Array(static_cast<long>(m) * len));
  for (int i = 0; i < m; ++i)
    out.v.segment(static_cast<long>(i) * len, len) = a.v.segment(static_cast<long>(i) * n + c0, len);
  record_op(out, {&a}, [m, n, c0, len](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) {
      Array& ga = gg.grad_buf(p[0], static_cast<long>(m) * n);
      for (int i = 0; i < m; ++i)
        ga.segment(static_cast<long>(i) * n + c0, len) += g.segment(static_cast<long>(i) * len, len);
    }
  });
  return out;
}

Tensor select_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.shape.size() != 2) throw DimensionError("select_rows: rank-2 only");
  const int m = a.shape[0], n = a.shape[1];
  Tensor out({static_cast<int>(idx.size()), n}, Array(static_cast<long>(idx.size()) * n));
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= m) throw DimensionError("select_rows: index out of range");
    out.v.segment(static_cast<long>(i) * n, n) = a.v.segment(static_cast<long>(idx[i]) * n, n);
  }
  record_op(out, {&a}, [m, n, idx](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) {
      Array& ga = gg.grad_buf(p[0], static_cast<long>(m) * n);
      for (size_t i = 0; i < idx.size(); ++i)
        ga.segment(static_cast<long>(idx[i]) * n, n) += g.segment(static_cast<long>(i) * n, n);
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty");
  const int m = parts[0].shape[0];
  int n = 0;
  for (const auto& t : parts) {
    if (t.shape.size() != 2 || t.shape[0] != m) throw DimensionError("concat_cols: row mismatch");
    n += t.shape[1];
  }
  Tensor out({m, n}, Array(static_cast<long>(m) * n));
  std::vector<int> widths;
  int off = 0;
  for (const auto& t : parts) {
    const int w = t.shape[1];
    for (int i = 0; i < m; ++i)
      out.v.segment(static_cast<long>(i) * n + off, w) = t.v.segment(static_cast<long>(i) * w, w);
    widths.push_back(w);
    off += w;
  }
  std::vector<const Tensor*> ins;
  for (const auto& t : parts) ins.push_back(&t);
  record_op(out, ins, [m, n, widths](const Array& g, Graph& gg, const std::vector<int>& p) {
    int off2 = 0;
    for (size_t q = 0; q < widths.size(); ++q) {
      const int w = widths[q];
      if (p[q] >= 0) {
        Array& ga = gg.grad_buf(p[q], static_cast<long>(m) * w);
        for (int i = 0; i < m; ++i)
          ga.segment(static_cast<long>(i) * w, w) += g.segment(static_cast<long>(i) * n + off2, w);
      }
      off2 += w;
    }
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty");
  const int n = parts[0].shape.back();
  int m = 0;
  for (const auto& t : parts) {
    if (t.shape.size() != 2 || t.shape[1] != n) throw DimensionError("concat_rows: col mismatch");
    m += t.shape[0];
  }
  Tensor out({m, n}, Array(static_cast<long>(m) * n));
  long off = 0;
  std::vector<long> sizes;
  for (const auto& t : parts) {
    out.v.segment(off, t.size()) = t.v;
    sizes.push_back(t.size());
    off += t.size();
  }
  std::vector<const Tensor*> ins;
  for (const auto& t : parts) ins.push_back(&t);
  record_op(out, ins, [sizes](const Array& g, Graph& gg, const std::vector<int>& p) {
    long off2 = 0;
    for (size_t q = 0; q < sizes.size(); ++q) {
      if (p[q] >= 0) gg.grad_buf(p[q], sizes[q]) += g.segment(off2, sizes[q]);
      off2 += sizes[q];
    }
  });
  return out;
}

namespace {
bool g_corrupt_backward = false;
}

void corrupt_backward_for_tests(bool enabled) { g_corrupt_backward = enabled; }

Tensor relu(const Tensor& a) {
  Tensor out(a.shape, a.v.max(0.0));
  record_op(out, {&a}, [av = a.v](const Array& g, Graph& gg, const std::vector<int>& p) {
    // negative-control hook: 1.05 factor makes gradient checks fail
    const double k = g_corrupt_backward ? 1.05 : 1.0;
    if (p[0] >= 0) gg.grad_buf(p[0], av.size()) += k * g * (av > 0.0).cast<double>();
  });
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Array y = 1.0 / (1.0 + (-a.v).exp());
  Tensor out(a.shape, y);
  record_op(out, {&a}, [y](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], y.size()) += g * y * (1.0 - y);
  });
  return out;
}

Tensor log_t(const Tensor& a) {
  Tensor out(a.shape, a.v.log());
  record_op(out, {&a}, [av = a.v](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], av.size()) += g / av;
  });
  return out;
}

Tensor emin(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "emin");
  Tensor out(a.shape, a.v.min(b.v));
  record_op(out, {&a, &b},
            [av = a.v, bv = b.v](const Array& g, Graph& gg, const std::vector<int>& p) {
              Array amask = (av <= bv).cast<double>();
              if (p[0] >= 0) gg.grad_buf(p[0], av.size()) += g * amask;
              if (p[1] >= 0) gg.grad_buf(p[1], bv.size()) += g * (1.0 - amask);
            });
  return out;
}

Tensor emax(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "emax");
  Tensor out(a.shape, a.v.max(b.v));
  record_op(out, {&a, &b},
            [av = a.v, bv = b.v](const Array& g, Graph& gg, const std::vector<int>& p) {
              Array amask = (av >= bv).cast<double>();
              if (p[0] >= 0) gg.grad_buf(p[0], av.size()) += g * amask;
              if (p[1] >= 0) gg.grad_buf(p[1], bv.size()) += g * (1.0 - amask);
            });
  return out;
}

Tensor abs_t(const Tensor& a) {
  Tensor out(a.shape, a.v.abs());
  record_op(out, {&a}, [av = a.v](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], av.size()) += g * av.sign();
  });
  return out;
}

Tensor reciprocal(const Tensor& a, double eps) {
  Array y = 1.0 / (a.v + eps);
  Tensor out(a.shape, y);
  record_op(out, {&a}, [y](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], y.size()) -= g * y * y;
  });
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::scalar(a.v.sum());
  record_op(out, {&a}, [n = a.size()](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], n) += g[0];
  });
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor softmax(const Tensor& a, int axis) {
  const int rank = static_cast<int>(a.shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: bad axis");
  long inner = 1, outer = 1;
  const int ax = a.shape[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < rank; ++i) inner *= a.shape[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= a.shape[static_cast<size_t>(i)];
  Array y(a.size());
  for (long o = 0; o < outer; ++o)
    for (long in = 0; in < inner; ++in) {
      const long base = o * ax * inner + in;
      double mx = -1e300;
      for (int k = 0; k < ax; ++k) mx = std::max(mx, a.v[base + k * inner]);
      double z = 0;
      for (int k = 0; k < ax; ++k) z += std::exp(a.v[base + k * inner] - mx);
      for (int k = 0; k < ax; ++k) y[base + k * inner] = std::exp(a.v[base + k * inner] - mx) / z;
    }
  Tensor out(a.shape, y);
  record_op(out, {&a}, [y, outer, inner, ax](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] < 0) return;
    Array& ga = gg.grad_buf(p[0], y.size());
    for (long o = 0; o < outer; ++o)
      for (long in = 0; in < inner; ++in) {
        const long base = o * ax * inner + in;
        double dot = 0;
        for (int k = 0; k < ax; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (int k = 0; k < ax; ++k)
          ga[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
      }
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.shape.size() != 2 || b.size() != x.shape[1]) throw DimensionError("add_rowvec: shapes");
  const int m = x.shape[0], n = x.shape[1];
  Tensor out(x.shape, x.v);
  for (int i = 0; i < m; ++i) out.v.segment(static_cast<long>(i) * n, n) += b.v;
  record_op(out, {&x, &b}, [m, n](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], static_cast<long>(m) * n) += g;
    if (p[1] >= 0) {
      Array& gb = gg.grad_buf(p[1], n);
      for (int i = 0; i < m; ++i) gb += g.segment(static_cast<long>(i) * n, n);
    }
  });
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.shape.size() != 3 || b.size() != x.shape[0])
    throw DimensionError("add_channel_bias: shapes");
  const int C = x.shape[0];
  const long hw = static_cast<long>(x.shape[1]) * x.shape[2];
  Tensor out(x.shape, x.v);
  for (int c = 0; c < C; ++c) out.v.segment(c * hw, hw) += b.v[c];
  record_op(out, {&x, &b}, [C, hw](const Array& g, Graph& gg, const std::vector<int>& p) {
    if (p[0] >= 0) gg.grad_buf(p[0], C * hw) += g;
    if (p[1] >= 0) {
      Array& gb = gg.grad_buf(p[1], C);
      for (int c = 0; c < C; ++c) gb[c] += g.segment(c * hw, hw).sum();
    }
  });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.shape.size() != 3 || w.shape.size() != 4) throw DimensionError("conv2d: rank");
  const int Cin = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int Cout = w.shape[0], k = w.shape[2];
  if (w.shape[1] != Cin || w.shape[3] != k) throw DimensionError("conv2d: kernel shape");
  if (stride < 1) throw DimensionError("conv2d: stride");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (H + 2 * pad < k || W + 2 * pad < k || Ho <= 0 || Wo <= 0)
    throw DimensionError("conv2d: empty output extent");
  Tensor out = Tensor::zeros({Cout, Ho, Wo});
  auto xat = [&](int c, int y, int xx) { return x.v[(static_cast<long>(c) * H + y) * W + xx]; };
  for (int co = 0; co < Cout; ++co)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = 0;
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              acc += xat(ci, iy, ix) * w.v[((static_cast<long>(co) * Cin + ci) * k + ky) * k + kx];
            }
          }
        out.v[(static_cast<long>(co) * Ho + oy) * Wo + ox] = acc;
      }
  record_op(out, {&x, &w},
            [xv = x.v, wv = w.v, Cin, H, W, Cout, k, stride, pad, Ho,
             Wo](const Array& g, Graph& gg, const std::vector<int>& p) {
              Array* gx = p[0] >= 0 ? &gg.grad_buf(p[0], static_cast<long>(Cin) * H * W) : nullptr;
              Array* gw =
                  p[1] >= 0 ? &gg.grad_buf(p[1], static_cast<long>(Cout) * Cin * k * k) : nullptr;
              for (int co = 0; co < Cout; ++co)
                for (int oy = 0; oy < Ho; ++oy)
                  for (int ox = 0; ox < Wo; ++ox) {
                    const double go = g[(static_cast<long>(co) * Ho + oy) * Wo + ox];
                    if (go == 0.0) continue;
                    for (int ci = 0; ci < Cin; ++ci)
                      for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < k; ++kx) {
                          const int ix = ox * stride - pad + kx;
                          if (ix < 0 || ix >= W) continue;
                          const long xi = (static_cast<long>(ci) * H + iy) * W + ix;
                          const long wi = ((static_cast<long>(co) * Cin + ci) * k + ky) * k + kx;
                          if (gx) (*gx)[xi] += go * wv[wi];
                          if (gw) (*gw)[wi] += go * xv[xi];
                        }
                      }
                  }
            });
  return out;
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.shape.size() != 2) throw DimensionError("layernorm_rows: rank-2 only");
  const int m = x.shape[0], n = x.shape[1];
  if (gamma.size() != n || beta.size() != n) throw DimensionError("layernorm_rows: param size");
  Array xhat(x.size()), inv_std(m);
  for (int i = 0; i < m; ++i) {
    auto row = x.v.segment(static_cast<long>(i) * n, n);
    const double mu = row.mean();
    const double var = (row - mu).square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.segment(static_cast<long>(i) * n, n) = (row - mu) * inv_std[i];
  }
  Tensor out(x.shape, Array(x.size()));
  for (int i = 0; i < m; ++i)
    out.v.segment(static_cast<long>(i) * n, n) =
        xhat.segment(static_cast<long>(i) * n, n) * gamma.v + beta.v;
  record_op(out, {&x, &gamma, &beta},
            [xhat, inv_std, gv = gamma.v, m, n](const Array& g, Graph& gg,
                                                const std::vector<int>& p) {
              Array* gx = p[0] >= 0 ? &gg.grad_buf(p[0], static_cast<long>(m) * n) : nullptr;
              Array* ggam = p[1] >= 0 ? &gg.grad_buf(p[1], n) : nullptr;
              Array* gbet = p[2] >= 0 ? &gg.grad_buf(p[2], n) : nullptr;
              for (int i = 0; i < m; ++i) {
                auto grow = g.segment(static_cast<long>(i) * n, n);
                auto xh = xhat.segment(static_cast<long>(i) * n, n);
                if (ggam) *ggam += grow * xh;
                if (gbet) *gbet += grow;
                if (gx) {
                  Array dxhat = grow * gv;
                  const double s1 = dxhat.sum() / n;
                  const double s2 = (dxhat * xh).sum() / n;
                  gx->segment(static_cast<long>(i) * n, n) +=
                      inv_std[i] * (dxhat - s1 - xh * s2);
                }
              }
            });
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights) {
  if (logits.shape.size() != 2) throw DimensionError("cross_entropy_rows: rank-2 only");
  const int m = logits.shape[0], C = logits.shape[1];
  if (static_cast<int>(targets.size()) != m || static_cast<int>(weights.size()) != m)
    throw DimensionError("cross_entropy_rows: target/weight count");
  Array probs(logits.size());
  double loss = 0;
  for (int i = 0; i < m; ++i) {
    auto row = logits.v.segment(static_cast<long>(i) * C, C);
    const double mx = row.maxCoeff();
    Array e = (row - mx).exp();
    const double z = e.sum();
    probs.segment(static_cast<long>(i) * C, C) = e / z;
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= C)
      throw DimensionError("cross_entropy_rows: target out of range");
    loss -= weights[static_cast<size_t>(i)] *
            (row[targets[static_cast<size_t>(i)]] - mx - std::log(z));
  }
  Tensor out = Tensor::scalar(loss);
  record_op(out, {&logits},
            [probs, targets, weights, m, C](const Array& g, Graph& gg, const std::vector<int>& p) {
              if (p[0] < 0) return;
              Array& ga = gg.grad_buf(p[0], static_cast<long>(m) * C);
              for (int i = 0; i < m; ++i) {
                auto seg = ga.segment(static_cast<long>(i) * C, C);
                seg += g[0] * weights[static_cast<size_t>(i)] *
                       probs.segment(static_cast<long>(i) * C, C);
                seg[targets[static_cast<size_t>(i)]] -= g[0] * weights[static_cast<size_t>(i)];
              }
            });
  return out;
}

namespace {

// Shared bilinear kernel over an H x W lattice with zero padding.
// Returns value and per-corner data needed for gradients.
struct BilinearTap {
  int ix[4], iy[4];
  double wgt[4];
  double dwx[4], dwy[4];  // d wgt / d fx, d wgt / d fy
};

BilinearTap bilinear_taps(double fx, double fy, int W, int H) {
  BilinearTap t{};
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0, ay = fy - y0;
  const int xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - ax, ax}, wy[2] = {1.0 - ay, ay};
  const double dwxd[2] = {-1.0, 1.0};
  int q = 0;
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i, ++q) {
      t.ix[q] = xs[i];
      t.iy[q] = ys[j];
      const bool in = xs[i] >= 0 && xs[i] < W && ys[j] >= 0 && ys[j] < H;
      t.wgt[q] = in ? wx[i] * wy[j] : 0.0;
      t.dwx[q] = in ? dwxd[i] * wy[j] : 0.0;
      t.dwy[q] = in ? wx[i] * dwxd[j] : 0.0;
    }
  return t;
}

}  // namespace

Tensor roi_align(const Tensor& feat, const Tensor& box, int S) {
  if (feat.shape.size() != 3) throw DimensionError("roi_align: feat must be H x W x C");
  if (box.size() != 4) throw DimensionError("roi_align: box must have 4 entries");
  if (S < 1) throw DimensionError("roi_align: S >= 1");
  const int H = feat.shape[0], W = feat.shape[1], C = feat.shape[2];
  const double cx = box.v[0], cy = box.v[1], bw = box.v[2], bh = box.v[3];
  const double x1 = cx - bw / 2, y1 = cy - bh / 2;
  Tensor out = Tensor::zeros({C, S, S});
  // Cache taps for backward: S*S entries.
  std::vector<BilinearTap> taps(static_cast<size_t>(S) * S);
  std::vector<double> dfx_db(static_cast<size_t>(S) * S), dfy_db(static_cast<size_t>(S) * S);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) {
      const double rx = (j + 0.5) / S;  // box-relative sample position
      const double ry = (i + 0.5) / S;
      const double px = x1 + rx * bw, py = y1 + ry * bh;
      const double fx = px * W - 0.5, fy = py * H - 0.5;
      auto t = bilinear_taps(fx, fy, W, H);
      taps[static_cast<size_t>(i) * S + j] = t;
      dfx_db[static_cast<size_t>(i) * S + j] = rx - 0.5;  // d px / d bw
      dfy_db[static_cast<size_t>(i) * S + j] = ry - 0.5;  // d py / d bh
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int q = 0; q < 4; ++q)
          if (t.wgt[q] != 0.0) acc += t.wgt[q] * feat.v[(static_cast<long>(t.iy[q]) * W + t.ix[q]) * C + c];
        out.v[(static_cast<long>(c) * S + i) * S + j] = acc;
      }
    }
  record_op(out, {&feat, &box},
            [fv = feat.v, taps, dfx_db, dfy_db, H, W, C, S](const Array& g, Graph& gg,
                                                            const std::vector<int>& p) {
              Array* gf = p[0] >= 0 ? &gg.grad_buf(p[0], static_cast<long>(H) * W * C) : nullptr;
              Array* gb = p[1] >= 0 ? &gg.grad_buf(p[1], 4) : nullptr;
              for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                  const auto& t = taps[static_cast<size_t>(i) * S + j];
                  double dout_dfx = 0, dout_dfy = 0;  // accumulated over channels with grad
                  for (int c = 0; c < C; ++c) {
                    const double go = g[(static_cast<long>(c) * S + i) * S + j];
                    if (go == 0.0) continue;
                    for (int q = 0; q < 4; ++q) {
                      if (t.wgt[q] == 0.0 && t.dwx[q] == 0.0 && t.dwy[q] == 0.0) continue;
                      const bool in = t.ix[q] >= 0 && t.ix[q] < W && t.iy[q] >= 0 && t.iy[q] < H;
                      if (!in) continue;
                      const long fi = (static_cast<long>(t.iy[q]) * W + t.ix[q]) * C + c;
                      if (gf) (*gf)[fi] += go * t.wgt[q];
                      dout_dfx += go * t.dwx[q] * fv[fi];
                      dout_dfy += go * t.dwy[q] * fv[fi];
                    }
                  }
                  if (gb) {
                    // fx = (x1 + rx*bw)*W - 0.5 with x1 = cx - bw/2
                    (*gb)[0] += dout_dfx * W;                                     // d/d cx
                    (*gb)[1] += dout_dfy * H;                                     // d/d cy
                    (*gb)[2] += dout_dfx * W * dfx_db[static_cast<size_t>(i) * S + j];  // d/d bw
                    (*gb)[3] += dout_dfy * H * dfy_db[static_cast<size_t>(i) * S + j];  // d/d bh
                  }
                }
            });
  return out;
}

Tensor bilinear_sample(const Tensor& grid, const Tensor& pt) {
  if (grid.shape.size() != 3) throw DimensionError("bilinear_sample: grid must be C x S x S");
  if (pt.size() != 2) throw DimensionError("bilinear_sample: pt must have 2 entries");
  const int C = grid.shape[0], Sy = grid.shape[1], Sx = grid.shape[2];
  const double x = pt.v[0], y = pt.v[1];
  const double gx = Sx > 1 ? x * (Sx - 1) : 0.0;
  const double gy = Sy > 1 ? y * (Sy - 1) : 0.0;
  int x0 = static_cast<int>(std::floor(gx));
  int y0 = static_cast<int>(std::floor(gy));
  x0 = std::clamp(x0, 0, std::max(0, Sx - 2));
  y0 = std::clamp(y0, 0, std::max(0, Sy - 2));
  const double ax = std::clamp(gx - x0, 0.0, 1.0), ay = std::clamp(gy - y0, 0.0, 1.0);
  const int x1 = std::min(x0 + 1, Sx - 1), y1 = std::min(y0 + 1, Sy - 1);
  Tensor out = Tensor::zeros({C});
  auto gat = [&](int c, int yy, int xx) {
    return grid.v[(static_cast<long>(c) * Sy + yy) * Sx + xx];
  };
  for (int c = 0; c < C; ++c)
    out.v[c] = (1 - ax) * (1 - ay) * gat(c, y0, x0) + ax * (1 - ay) * gat(c, y0, x1) +
               (1 - ax) * ay * gat(c, y1, x0) + ax * ay * gat(c, y1, x1);
  record_op(out, {&grid, &pt},
            [gv = grid.v, C, Sy, Sx, x0, y0, x1, y1, ax, ay](const Array& g, Graph& gg,
                                                             const std::vector<int>& p) {
              Array* ggr = p[0] >= 0 ? &gg.grad_buf(p[0], static_cast<long>(C) * Sy * Sx) : nullptr;
              Array* gp = p[1] >= 0 ? &gg.grad_buf(p[1], 2) : nullptr;
              const double sx = Sx > 1 ? Sx - 1 : 0.0, sy = Sy > 1 ? Sy - 1 : 0.0;
              for (int c = 0; c < C; ++c) {
                const double go = g[c];
                if (go == 0.0) continue;
                const long b00 = (static_cast<long>(c) * Sy + y0) * Sx + x0;
                const long b01 = (static_cast<long>(c) * Sy + y0) * Sx + x1;
                const long b10 = (static_cast<long>(c) * Sy + y1) * Sx + x0;
                const long b11 = (static_cast<long>(c) * Sy + y1) * Sx + x1;
                if (ggr) {
                  (*ggr)[b00] += go * (1 - ax) * (1 - ay);
                  (*ggr)[b01] += go * ax * (1 - ay);
                  (*ggr)[b10] += go * (1 - ax) * ay;
                  (*ggr)[b11] += go * ax * ay;
                }
                if (gp) {
                  const double dval_dax =
                      (1 - ay) * (gv[b01] - gv[b00]) + ay * (gv[b11] - gv[b10]);
                  const double dval_day =
                      (1 - ax) * (gv[b10] - gv[b00]) + ax * (gv[b11] - gv[b01]);
                  (*gp)[0] += go * dval_dax * sx;
                  (*gp)[1] += go * dval_day * sy;
                }
              }
            });
  return out;
}

Tensor sinusoidal_embed(const Tensor& box, const Tensor& pts, int dim, double temperature) {
  if (dim % 4 != 0) throw ConfigError("sinusoidal_embed: dim must be divisible by 4");
  if (box.size() != 4) throw DimensionError("sinusoidal_embed: box must have 4 entries");
  if (pts.shape.size() != 2 || pts.shape[1] != 2)
    throw DimensionError("sinusoidal_embed: pts must be H x 2");
  const int Hn = pts.shape[0];
  const int nf = dim / 4;
  const double cx = box.v[0], cy = box.v[1], bw = box.v[2], bh = box.v[3];
  std::vector<double> omega(static_cast<size_t>(nf));
  for (int f = 0; f < nf; ++f)
    omega[static_cast<size_t>(f)] = std::pow(temperature, -static_cast<double>(f) / nf);
  Tensor out = Tensor::zeros({Hn, dim});
  Array axs(Hn), ays(Hn);
  for (int h = 0; h < Hn; ++h) {
    const double px = pts.v[2 * h], py = pts.v[2 * h + 1];
    const double ax = (cx - bw / 2) + px * bw;  // absolute coordinates
    const double ay = (cy - bh / 2) + py * bh;
    axs[h] = ax;
    ays[h] = ay;
    for (int f = 0; f < nf; ++f) {
      const double w = omega[static_cast<size_t>(f)];
      out.v[static_cast<long>(h) * dim + f] = std::sin(ax * w);
      out.v[static_cast<long>(h) * dim + nf + f] = std::cos(ax * w);
      out.v[static_cast<long>(h) * dim + 2 * nf + f] = std::sin(ay * w);
      out.v[static_cast<long>(h) * dim + 3 * nf + f] = std::cos(ay * w);
    }
  }
  record_op(out, {&box, &pts},
            [axs, ays, omega, ptv = pts.v, bw, bh, Hn, dim, nf](const Array& g, Graph& gg,
                                                                const std::vector<int>& p) {
              Array* gb = p[0] >= 0 ? &gg.grad_buf(p[0], 4) : nullptr;
              Array* gp = p[1] >= 0 ? &gg.grad_buf(p[1], static_cast<long>(Hn) * 2) : nullptr;
              for (int h = 0; h < Hn; ++h) {
                double dax = 0, day = 0;  // d loss / d absolute coords
                for (int f = 0; f < nf; ++f) {
                  const double w = omega[static_cast<size_t>(f)];
                  dax += g[static_cast<long>(h) * dim + f] * std::cos(axs[h] * w) * w;
                  dax -= g[static_cast<long>(h) * dim + nf + f] * std::sin(axs[h] * w) * w;
                  day += g[static_cast<long>(h) * dim + 2 * nf + f] * std::cos(ays[h] * w) * w;
                  day -= g[static_cast<long>(h) * dim + 3 * nf + f] * std::sin(ays[h] * w) * w;
                }
                const double px = ptv[2 * h], py = ptv[2 * h + 1];
                if (gb) {
                  (*gb)[0] += dax;                  // d ax / d cx = 1
                  (*gb)[1] += day;                  // d ay / d cy = 1
                  (*gb)[2] += dax * (px - 0.5);     // d ax / d bw
                  (*gb)[3] += day * (py - 0.5);     // d ay / d bh
                }
                if (gp) {
                  (*gp)[2 * h] += dax * bw;
                  (*gp)[2 * h + 1] += day * bh;
                }
              }
            });
  return out;
}

void adamw_step(std::vector<Tensor*>& params, const std::vector<Array>& grads, OptimState& state,
                const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw DimensionError("adamw_step: param/grad count");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i] = Array::Zero(params[i]->size());
      state.v[i] = Array::Zero(params[i]->size());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: state size");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (grads[i].size() != p.size() || state.m[i].size() != p.size())
      throw DimensionError("adamw_step: shape mismatch");
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i].square();
    const Array mhat = state.m[i] / bc1;
    const Array vhat = state.v[i] / bc2;
    p.v -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.v);
  }
}

GradCheckResult finite_diff_check(const std::vector<std::pair<std::string, Tensor*>>& params,
                                  const std::function<Tensor()>& loss_fn, double h,
                                  long max_coords, uint64_t seed) {
  if (h <= 0) throw ContractError("finite_diff_check: h must be positive");
  // Analytic gradients.
  std::vector<Array> analytic(params.size());
  {
    Graph g;
    // Drop any stale node ids from an earlier graph before re-watching.
    for (auto& [name, t] : params) t->node = -1;
    for (auto& [name, t] : params) g.watch(*t);
    Tensor loss = loss_fn();
    g.backward(loss);
    for (size_t i = 0; i < params.size(); ++i) analytic[i] = g.grad(*params[i].second).v;
    for (auto& [name, t] : params) t->node = -1;
  }
  // Coordinate list, optionally subsampled.
  std::vector<std::pair<size_t, long>> coords;
  long total = 0;
  for (const auto& [name, t] : params) total += t->size();
  if (max_coords > 0 && total > max_coords) {
    Rng rng(seed ^ 0xFD15FD15u);
    for (long c = 0; c < max_coords; ++c) {
      long pick = static_cast<long>(rng.uniform_int(static_cast<uint64_t>(total)));
      for (size_t i = 0; i < params.size(); ++i) {
        if (pick < params[i].second->size()) {
          coords.emplace_back(i, pick);
          break;
        }
        pick -= params[i].second->size();
      }
    }
  } else {
    for (size_t i = 0; i < params.size(); ++i)
      for (long c = 0; c < params[i].second->size(); ++c) coords.emplace_back(i, c);
  }
  GradCheckResult res;
  auto eval = [&]() {
    Tensor loss = loss_fn();
    return loss.item();
  };
  for (auto [pi, c] : coords) {
    Tensor& t = *params[pi].second;
    const double orig = t.v[c];
    t.v[c] = orig + h;
    const double fp = eval();
    t.v[c] = orig - h;
    const double fm = eval();
    t.v[c] = orig;
    const double num = (fp - fm) / (2 * h);
    const double ana = analytic[pi][c];
    // The 1e-3 floor keeps central-difference roundoff (~1e-10 at h=1e-6)
    // from dominating coordinates whose true gradient is exactly zero.
    const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-3});
    auto& worst = res.per_param_worst[params[pi].first];
    worst = std::max(worst, rel);
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_param = params[pi].first;
      res.worst_coord = static_cast<int>(c);
      res.analytic = ana;
      res.numeric = num;
    }
  }
  return res;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
  nlohmann::json hdr = nlohmann::json::array();
  long off = 0;
  for (const auto& [name, t] : params) {
    hdr.push_back({{"name", name}, {"shape", t.shape}, {"offset", off}});
    off += t.size();
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f << hdr.dump() << "\n";
  for (const auto& [name, t] : params)
    f.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  std::getline(f, line);
  nlohmann::json hdr = nlohmann::json::parse(line);
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& e : hdr) {
    std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    Tensor t = Tensor::zeros(shape);
    out.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  for (auto& [name, t] : out) {
    f.read(reinterpret_cast<char*>(t.v.data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
  }
  return out;
}

}  // namespace tabledet
