#include "vprda/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "vprda/kernels.hpp"

namespace vprda {

const Tensor& Var::value() const { return node_->value; }

Tensor Var::grad() const {
  if (node_->grad.empty() && !node_->value.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape());
  return grad;
}

Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  return Var(std::move(n));
}

namespace {

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  return make_node(std::move(value), std::move(parents), std::move(bw));
}

Tensor& pgrad(Node& self, std::size_t i) { return self.parents[i].node()->grad_buffer(); }
const Tensor& pval(const Node& self, std::size_t i) { return self.parents[i].node()->value; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0 || t.shape().back() == 0) throw DimensionError("expected non-empty last axis");
  return t.shape().back();
}

void check_fmap(const Tensor& fm, const char* op) {
  if (fm.rank() != 3) throw DimensionError(std::string(op) + ": feature map must be H x W x D, got " + shape_str(fm.shape()));
}

}  // namespace

void backward(const Var& root) {
  if (root.value().size() != 1) throw DimensionError("backward: root must be a scalar");
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].node();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace ops {

Var matmul(const Var& a, const Var& b) {
  const std::size_t m = rows_of(a.value()), k = cols_of(a.value());
  const std::size_t k2 = rows_of(b.value()), n = cols_of(b.value());
  if (k != k2)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({m, n});
  kernels::gemm(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make(std::move(out), {a, b}, [m, k, n](Node& self) {
    // dA = G B^T, dB = A^T G
    kernels::gemm_nt_acc(self.grad.data(), pval(self, 1).data(), pgrad(self, 0).data(), m, n, k);
    kernels::gemm_tn_acc(pval(self, 0).data(), self.grad.data(), pgrad(self, 1).data(), m, k, n);
  });
}

Var transpose(const Var& a) {
  const std::size_t r = rows_of(a.value()), c = cols_of(a.value());
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
  return make(std::move(out), {a}, [r, c](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    auto& ga = pgrad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto& gb = pgrad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    auto& ga = pgrad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto& gb = pgrad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    const auto& av = pval(self, 0);
    const auto& bv = pval(self, 1);
    auto& ga = pgrad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    auto& gb = pgrad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make(std::move(out), {a}, [s](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v += s;
  return make(std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make(std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var add_row_bias(const Var& x, const Var& b) {
  const std::size_t n = rows_of(x.value()), k = cols_of(x.value());
  if (b.value().size() != k)
    throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " vs " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += b.value()[j];
  return make(std::move(out), {x, b}, [n, k](Node& self) {
    auto& gx = pgrad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    auto& gb = pgrad(self, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gb[j] += self.grad[i * k + j];
  });
}

Var scale_rows(const Var& x, const Var& s) {
  const std::size_t n = rows_of(x.value()), d = cols_of(x.value());
  if (s.value().size() != n)
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " scales for " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= s.value()[i];
  return make(std::move(out), {x, s}, [n, d](Node& self) {
    const auto& xv = pval(self, 0);
    const auto& sv = pval(self, 1);
    auto& gx = pgrad(self, 0);
    auto& gs = pgrad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        gx[i * d + j] += self.grad[i * d + j] * sv[i];
        acc += self.grad[i * d + j] * xv[i * d + j];
      }
      gs[i] += acc;
    }
  });
}

Var col_sum(const Var& x) {
  const std::size_t n = rows_of(x.value()), k = cols_of(x.value());
  Tensor out({k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j] += x.value()[i * k + j];
  return make(std::move(out), {x}, [n, k](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += self.grad[j];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make(Tensor::scalar(s), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& a) {
  if (a.value().empty()) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_squares(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return make(Tensor::scalar(s), {a}, [](Node& self) {
    const auto& av = pval(self, 0);
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * av[i] * self.grad[0];
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
  return make(std::move(out), {a}, [](Node& self) {
    const auto& av = pval(self, 0);
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > 0.0) g[i] += self.grad[i];
  });
}

Var softplus(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  return make(std::move(out), {a}, [](Node& self) {
    const auto& av = pval(self, 0);
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += self.grad[i] * sig;
    }
  });
}

Var exp(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = std::exp(v);
  return make(std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Var softmax(const Var& a) {
  const std::size_t k = last_dim(a.value());
  const std::size_t n = a.value().size() / k;
  Tensor out = a.value();
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data().data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) row[j] /= z;
  }
  return make(std::move(out), {a}, [n, k](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data().data() + r * k;
      const double* gy = self.grad.data().data() + r * k;
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (gy[j] - dot);
    }
  });
}

Var l2_normalize(const Var& a) {
  const std::size_t k = last_dim(a.value());
  const std::size_t n = a.value().size() / k;
  Tensor out = a.value();
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data().data() + r * k;
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += row[j] * row[j];
    norms[r] = std::sqrt(s);
    const double denom = std::max(norms[r], kNormEpsilon);
    for (std::size_t j = 0; j < k; ++j) row[j] /= denom;
  }
  return make(std::move(out), {a}, [n, k, norms = std::move(norms)](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data().data() + r * k;
      const double* gy = self.grad.data().data() + r * k;
      if (norms[r] > kNormEpsilon) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += (gy[j] - y[j] * dot) / norms[r];
      } else {
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += gy[j] / kNormEpsilon;
      }
    }
  });
}

Var conv2d_1x1(const Var& fm, const Var& w, const Var& b) {
  check_fmap(fm.value(), "conv2d_1x1");
  const std::size_t h = fm.value().dim(0), wd = fm.value().dim(1), din = fm.value().dim(2);
  if (w.value().rank() != 2 || w.value().dim(0) != din)
    throw DimensionError("conv2d_1x1: weights " + shape_str(w.shape()) + " for " + shape_str(fm.shape()));
  const std::size_t dout = w.value().dim(1);
  if (b.value().size() != dout) throw DimensionError("conv2d_1x1: bias " + shape_str(b.shape()));
  const std::size_t n = h * wd;
  Tensor out({h, wd, dout});
  kernels::gemm(fm.value().data(), w.value().data(), out.data(), n, din, dout);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += b.value()[j];
  return make(std::move(out), {fm, w, b}, [n, din, dout](Node& self) {
    kernels::gemm_nt_acc(self.grad.data(), pval(self, 1).data(), pgrad(self, 0).data(), n, dout, din);
    kernels::gemm_tn_acc(pval(self, 0).data(), self.grad.data(), pgrad(self, 1).data(), n, din, dout);
    auto& gb = pgrad(self, 2);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dout; ++j) gb[j] += self.grad[i * dout + j];
  });
}

Var conv2d_3x3(const Var& fm, const Var& w, const Var& b) {
  check_fmap(fm.value(), "conv2d_3x3");
  const std::size_t h = fm.value().dim(0), wd = fm.value().dim(1), din = fm.value().dim(2);
  const auto& ws = w.value().shape();
  if (ws.size() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != din)
    throw DimensionError("conv2d_3x3: weights " + shape_str(ws) + " for " + shape_str(fm.shape()));
  const std::size_t dout = ws[3];
  if (b.value().size() != dout) throw DimensionError("conv2d_3x3: bias " + shape_str(b.shape()));
  Tensor out({h, wd, dout});
  kernels::conv3x3(fm.value().data(), w.value().data(), b.value().data(), out.data(), h, wd, din, dout);
  return make(std::move(out), {fm, w, b}, [h, wd, din, dout](Node& self) {
    const auto& in = pval(self, 0);
    const auto& wv = pval(self, 1);
    auto& gin = pgrad(self, 0);
    auto& gw = pgrad(self, 1);
    auto& gb = pgrad(self, 2);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < wd; ++x) {
        const double* go = self.grad.data().data() + (y * wd + x) * dout;
        for (std::size_t co = 0; co < dout; ++co) gb[co] += go[co];
        for (int dy = -1; dy <= 1; ++dy) {
          const long yy = static_cast<long>(y) + dy;
          if (yy < 0 || yy >= static_cast<long>(h)) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const long xx = static_cast<long>(x) + dx;
            if (xx < 0 || xx >= static_cast<long>(wd)) continue;
            const std::size_t src = (static_cast<std::size_t>(yy) * wd + static_cast<std::size_t>(xx)) * din;
            const std::size_t tap = (static_cast<std::size_t>(dy + 1) * 3 + static_cast<std::size_t>(dx + 1)) * din * dout;
            for (std::size_t ci = 0; ci < din; ++ci) {
              const double iv = in[src + ci];
              double acc = 0.0;
              for (std::size_t co = 0; co < dout; ++co) {
                acc += go[co] * wv[tap + ci * dout + co];
                gw[tap + ci * dout + co] += iv * go[co];
              }
              gin[src + ci] += acc;
            }
          }
        }
      }
    }
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const std::size_t n = rows_of(x.value()), d = cols_of(x.value());
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.value().data().begin() + static_cast<long>(rows[r] * d), d, out.data().begin() + static_cast<long>(r * d));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make(std::move(out), {x}, [d, idx = std::move(idx)](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = cols_of(parts[0].value());
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (cols_of(p.value()) != d) throw DimensionError("concat_rows: column mismatch");
    total += rows_of(p.value());
  }
  Tensor out({total, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<long>(off));
    off += p.value().size();
  }
  return make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& g = pgrad(self, i);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[off + j];
      off += g.size();
    }
  });
}

}  // namespace ops
}  // namespace vprda
