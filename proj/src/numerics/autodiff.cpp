#include "mqmk/numerics/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace mqmk::num {

namespace {

constexpr double kLayerNormEps = 1e-12;
constexpr double kNormEps = 1e-12;  // epsilon_norm for cosine denominators

NodePtr make_node(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                  const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->op = op;
  for (const auto& p : n->parents) {
    if (p->needs_grad) {
      n->needs_grad = true;
      break;
    }
  }
  return n;
}

bool is_vector(const Shape& s) {
  return s.size() == 1 || (s.size() == 2 && (s[0] == 1 || s[1] == 1));
}

// Rows/cols for matrix-like operands; 1-D is one row.
std::pair<std::size_t, std::size_t> rows_cols(const Var& v, const char* op) {
  const Shape& s = v.shape();
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError(std::string(op) + ": expected matrix or vector, got " + shape_str(s));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

void Node::accumulate(const std::vector<double>& g) {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

double* Node::grad_slot() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

double Var::scalar() const {
  if (size() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str(shape()));
  return n_->value[0];
}

Var leaf(Tensor& t) {
  auto n = std::make_shared<Node>();
  n->shape = t.shape();
  n->value = t.values();
  n->op = "leaf";
  if (t.requires_grad()) {
    n->needs_grad = true;
    n->bound = &t;
  }
  return Var(n);
}

Var constant(const Tensor& t) {
  auto n = std::make_shared<Node>();
  n->shape = t.shape();
  n->value = t.values();
  n->op = "const";
  return Var(n);
}

Var constant(Shape shape, std::vector<double> values) {
  if (element_count(shape) != values.size()) {
    throw ShapeError("constant: " + std::to_string(values.size()) + " values do not fill " +
                     shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = "const";
  return Var(n);
}

Var scalar_const(double v) {
  return constant(Shape{1}, std::vector<double>{v});
}

Var detach(const Var& x) {
  auto n = std::make_shared<Node>();
  n->shape = x.shape();
  n->value = x.values();
  n->op = "detach";
  return Var(n);
}

// ------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n, 0.0);
  {
    const double* A = a.values().data();
    const double* B = b.values().data();
    double* C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* Ai = A + i * k;
      double* Ci = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = Ai[p];
        if (aip == 0.0) continue;
        const double* Bp = B + p * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
      }
    }
  }
  auto node = make_node(Shape{m, n}, std::move(out), {a.node(), b.node()}, "matmul");
  if (node->needs_grad) {
    node->backprop = [m, k, n](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      const double* dC = self.grad.data();
      if (pa->needs_grad) {
        double* dA = pa->grad_slot();
        const double* B = pb->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* dCi = dC + i * n;
          double* dAi = dA + i * k;
          for (std::size_t p = 0; p < k; ++p) {
            const double* Bp = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dCi[j] * Bp[j];
            dAi[p] += acc;
          }
        }
      }
      if (pb->needs_grad) {
        double* dB = pb->grad_slot();
        const double* A = pa->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* Ai = A + i * k;
          const double* dCi = dC + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = Ai[p];
            if (aip == 0.0) continue;
            double* dBp = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) dBp[j] += aip * dCi[j];
          }
        }
      }
    };
  }
  return Var(node);
}

Var transpose(const Var& a) {
  auto [m, n] = rows_cols(a, "transpose");
  std::vector<double> out(m * n);
  const double* A = a.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  auto node = make_node(Shape{n, m}, std::move(out), {a.node()}, "transpose");
  if (node->needs_grad) {
    node->backprop = [m, n](Node& self) {
      double* dA = self.parents[0]->grad_slot();
      const double* dC = self.grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += dC[j * m + i];
    };
  }
  return Var(node);
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto node = make_node(a.shape(), std::move(out), {a.node(), b.node()}, "add");
  if (node->needs_grad) {
    node->backprop = [](Node& self) {
      for (auto& p : self.parents) {
        if (p->needs_grad) p->accumulate(self.grad);
      }
    };
  }
  return Var(node);
}

Var scalar_mul(const Var& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  auto node = make_node(a.shape(), std::move(out), {a.node()}, "scalar_mul");
  if (node->needs_grad) {
    node->backprop = [c](Node& self) {
      double* dA = self.parents[0]->grad_slot();
      for (std::size_t i = 0; i < self.grad.size(); ++i) dA[i] += c * self.grad[i];
    };
  }
  return Var(node);
}

Var add_row_broadcast(const Var& x, const Var& row) {
  auto [m, n] = rows_cols(x, "add_row_broadcast");
  if (!is_vector(row.shape()) || row.size() != n) {
    throw ShapeError("add_row_broadcast: row " + shape_str(row.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(x.values());
  const double* r = row.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* oi = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) oi[j] += r[j];
  }
  auto node = make_node(x.shape(), std::move(out), {x.node(), row.node()}, "add_row_broadcast");
  if (node->needs_grad) {
    node->backprop = [m, n](Node& self) {
      Node* px = self.parents[0].get();
      Node* pr = self.parents[1].get();
      if (px->needs_grad) px->accumulate(self.grad);
      if (pr->needs_grad) {
        double* dr = pr->grad_slot();
        const double* dC = self.grad.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dr[j] += dC[i * n + j];
      }
    };
  }
  return Var(node);
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  auto [m, n] = rows_cols(x, "layer_norm");
  if (!is_vector(gain.shape()) || gain.size() != n || !is_vector(bias.shape()) ||
      bias.size() != n) {
    throw ShapeError("layer_norm: gain/bias must have length " + std::to_string(n) + ", got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  std::vector<double> out(m * n);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_sigma = std::make_shared<std::vector<double>>(m);
  const double* X = x.values().data();
  const double* g = gain.values().data();
  const double* b = bias.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = X + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xi[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_sigma)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (xi[j] - mu) * is;
      (*xhat)[i * n + j] = xh;
      out[i * n + j] = xh * g[j] + b[j];
    }
  }
  auto node =
      make_node(x.shape(), std::move(out), {x.node(), gain.node(), bias.node()}, "layer_norm");
  if (node->needs_grad) {
    node->backprop = [m, n, xhat, inv_sigma](Node& self) {
      Node* px = self.parents[0].get();
      Node* pg = self.parents[1].get();
      Node* pb = self.parents[2].get();
      const double* dY = self.grad.data();
      const double* g = pg->value.data();
      if (pg->needs_grad) {
        double* dg = pg->grad_slot();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dg[j] += dY[i * n + j] * (*xhat)[i * n + j];
      }
      if (pb->needs_grad) {
        double* db = pb->grad_slot();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += dY[i * n + j];
      }
      if (px->needs_grad) {
        double* dx = px->grad_slot();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* dyi = dY + i * n;
          const double* xh = xhat->data() + i * n;
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dyi[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
          }
          mean_dxhat *= inv_n;
          mean_dxhat_xhat *= inv_n;
          const double is = (*inv_sigma)[i];
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dyi[j] * g[j];
            dx[i * n + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
          }
        }
      }
    };
  }
  return Var(node);
}

Var softmax_rows(const Var& x) {
  auto [m, n] = rows_cols(x, "softmax");
  std::vector<double> out(m * n);
  const double* X = x.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = X + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(xi[j] - mx);
      out[i * n + j] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= inv;
  }
  auto node = make_node(x.shape(), std::move(out), {x.node()}, "softmax");
  if (node->needs_grad) {
    node->backprop = [m, n](Node& self) {
      double* dx = self.parents[0]->grad_slot();
      const double* dY = self.grad.data();
      const double* Y = self.value.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* yi = Y + i * n;
        const double* dyi = dY + i * n;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += yi[j] * dyi[j];
        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += yi[j] * (dyi[j] - s);
      }
    };
  }
  return Var(node);
}

Var gelu(const Var& x) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  auto node = make_node(x.shape(), std::move(out), {x.node()}, "gelu");
  if (node->needs_grad) {
    node->backprop = [](Node& self) {
      double* dx = self.parents[0]->grad_slot();
      const double* X = self.parents[0]->value.data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = X[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        dx[i] += self.grad[i] * (cdf + v * pdf);
      }
    };
  }
  return Var(node);
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  std::size_t cols = 0, rows = 0;
  for (const Var& p : parts) {
    auto [m, n] = rows_cols(p, "concat_rows");
    if (cols == 0) cols = n;
    if (n != cols) {
      throw ShapeError("concat_rows: column mismatch, " + std::to_string(n) + " vs " +
                       std::to_string(cols));
    }
    rows += m;
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<NodePtr> parents;
  parents.reserve(parts.size());
  for (const Var& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
  }
  auto node = make_node(Shape{rows, cols}, std::move(out), std::move(parents), "concat_rows");
  if (node->needs_grad) {
    node->backprop = [](Node& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        const std::size_t cnt = p->value.size();
        if (p->needs_grad) {
          double* dp = p->grad_slot();
          for (std::size_t i = 0; i < cnt; ++i) dp[i] += self.grad[off + i];
        }
        off += cnt;
      }
    };
  }
  return Var(node);
}

Var slice_rows(const Var& x, std::size_t row_begin, std::size_t row_end) {
  auto [m, n] = rows_cols(x, "slice_rows");
  if (row_begin > row_end || row_end > m) {
    throw ShapeError("slice_rows: range [" + std::to_string(row_begin) + ", " +
                     std::to_string(row_end) + ") out of bounds for " + shape_str(x.shape()));
  }
  const std::size_t rows = row_end - row_begin;
  if (rows == 0) throw ShapeError("slice_rows: empty slice");
  std::vector<double> out(x.values().begin() + row_begin * n,
                          x.values().begin() + row_end * n);
  auto node = make_node(Shape{rows, n}, std::move(out), {x.node()}, "slice_rows");
  if (node->needs_grad) {
    node->backprop = [row_begin, n](Node& self) {
      double* dx = self.parents[0]->grad_slot();
      for (std::size_t i = 0; i < self.grad.size(); ++i) dx[row_begin * n + i] += self.grad[i];
    };
  }
  return Var(node);
}

Var mean_all(const Var& x) {
  const std::size_t cnt = x.size();
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto node = make_node(Shape{1}, {s / static_cast<double>(cnt)}, {x.node()}, "mean");
  if (node->needs_grad) {
    node->backprop = [cnt](Node& self) {
      double* dx = self.parents[0]->grad_slot();
      const double g = self.grad[0] / static_cast<double>(cnt);
      for (std::size_t i = 0; i < cnt; ++i) dx[i] += g;
    };
  }
  return Var(node);
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto node = make_node(Shape{1}, {s}, {x.node()}, "sum");
  if (node->needs_grad) {
    node->backprop = [](Node& self) {
      double* dx = self.parents[0]->grad_slot();
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) dx[i] += self.grad[0];
    };
  }
  return Var(node);
}

Var dot(const Var& a, const Var& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  auto node = make_node(Shape{1}, {s}, {a.node(), b.node()}, "dot");
  if (node->needs_grad) {
    node->backprop = [](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      const double g = self.grad[0];
      if (pa->needs_grad) {
        double* da = pa->grad_slot();
        for (std::size_t i = 0; i < pa->value.size(); ++i) da[i] += g * pb->value[i];
      }
      if (pb->needs_grad) {
        double* db = pb->grad_slot();
        for (std::size_t i = 0; i < pb->value.size(); ++i) db[i] += g * pa->value[i];
      }
    };
  }
  return Var(node);
}

Var cosine_similarity(const Var& a, const Var& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: length mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa += a.values()[i] * a.values()[i];
    bb += b.values()[i] * b.values()[i];
    ab += a.values()[i] * b.values()[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na <= kNormEps || nb <= kNormEps) {
    throw ValueError("cosine_similarity: degenerate vector (norm <= 1e-12)");
  }
  const double raw = ab / (na * nb);
  const double clamped = std::clamp(raw, -1.0, 1.0);
  auto node = make_node(Shape{1}, {clamped}, {a.node(), b.node()}, "cosine_similarity");
  if (node->needs_grad) {
    node->backprop = [na, nb, raw](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      const double g = self.grad[0];
      const double inv = 1.0 / (na * nb);
      if (pa->needs_grad) {
        double* da = pa->grad_slot();
        const double s = raw / (na * na);
        for (std::size_t i = 0; i < pa->value.size(); ++i)
          da[i] += g * (pb->value[i] * inv - s * pa->value[i]);
      }
      if (pb->needs_grad) {
        double* db = pb->grad_slot();
        const double s = raw / (nb * nb);
        for (std::size_t i = 0; i < pb->value.size(); ++i)
          db[i] += g * (pa->value[i] * inv - s * pb->value[i]);
      }
    };
  }
  return Var(node);
}

Var cross_entropy(const Var& logits, std::size_t label) {
  if (!is_vector(logits.shape())) {
    throw ShapeError("cross_entropy: logits must be a vector, got " + shape_str(logits.shape()));
  }
  const std::size_t c = logits.size();
  if (label >= c) {
    throw ValueError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(c) + " classes");
  }
  const double* x = logits.values().data();
  double mx = x[0];
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
  const double lse = mx + std::log(sum);
  auto node = make_node(Shape{1}, {lse - x[label]}, {logits.node()}, "cross_entropy");
  if (node->needs_grad) {
    node->backprop = [label, lse](Node& self) {
      Node* p = self.parents[0].get();
      double* dx = p->grad_slot();
      const double g = self.grad[0];
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        const double soft = std::exp(p->value[j] - lse);
        dx[j] += g * (soft - (j == label ? 1.0 : 0.0));
      }
    };
  }
  return Var(node);
}

Var masked_cross_entropy_mean(const Var& logits, const std::vector<std::size_t>& labels,
                              const std::vector<std::size_t>& allowed) {
  auto [m, n] = rows_cols(logits, "masked_cross_entropy");
  if (labels.size() != m) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(m) + " logit rows");
  }
  if (allowed.empty()) throw ValueError("masked_cross_entropy: empty class mask");
  for (std::size_t j : allowed) {
    if (j >= n) {
      throw ValueError("masked_cross_entropy: mask class " + std::to_string(j) +
                       " out of range for " + std::to_string(n) + " columns");
    }
  }
  auto lse_rows = std::make_shared<std::vector<double>>(m);
  const double* X = logits.values().data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    bool label_ok = false;
    for (std::size_t j : allowed) label_ok |= (j == labels[i]);
    if (!label_ok) {
      throw ValueError("masked_cross_entropy: label " + std::to_string(labels[i]) +
                       " not in the allowed class set");
    }
    const double* xi = X + i * n;
    double mx = xi[allowed[0]];
    for (std::size_t j : allowed) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j : allowed) sum += std::exp(xi[j] - mx);
    const double lse = mx + std::log(sum);
    (*lse_rows)[i] = lse;
    total += lse - xi[labels[i]];
  }
  total /= static_cast<double>(m);
  auto node = make_node(Shape{1}, {total}, {logits.node()}, "masked_cross_entropy");
  if (node->needs_grad) {
    auto labels_c = std::make_shared<std::vector<std::size_t>>(labels);
    auto allowed_c = std::make_shared<std::vector<std::size_t>>(allowed);
    node->backprop = [m, n, lse_rows, labels_c, allowed_c](Node& self) {
      Node* p = self.parents[0].get();
      double* dx = p->grad_slot();
      const double* X = p->value.data();
      const double g = self.grad[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const double lse = (*lse_rows)[i];
        for (std::size_t j : *allowed_c) {
          const double soft = std::exp(X[i * n + j] - lse);
          dx[i * n + j] += g * (soft - (j == (*labels_c)[i] ? 1.0 : 0.0));
        }
      }
    };
  }
  return Var(node);
}

// ------------------------------------------------------------------
// Batched sequence primitives
// ------------------------------------------------------------------

namespace {
void check_batched(const Var& x, std::size_t batch, std::size_t seq, const char* op) {
  const Shape& s = x.shape();
  if (s.size() != 2 || s[0] != batch * seq) {
    throw ShapeError(std::string(op) + ": expected (" + std::to_string(batch * seq) +
                     ", dim) for batch " + std::to_string(batch) + " x seq " +
                     std::to_string(seq) + ", got " + shape_str(s));
  }
}
}  // namespace

Var concat_front_per_sample(const Var& x, const Var& tokens, std::size_t batch, std::size_t seq) {
  check_batched(x, batch, seq, "concat_front_per_sample");
  auto [p, n] = rows_cols(tokens, "concat_front_per_sample");
  if (p == 0) return x;
  if (n != x.shape()[1]) {
    throw ShapeError("concat_front_per_sample: token dim " + std::to_string(n) +
                     " vs sequence dim " + std::to_string(x.shape()[1]));
  }
  const std::size_t out_seq = seq + p;
  std::vector<double> out(batch * out_seq * n);
  const double* T = tokens.values().data();
  const double* X = x.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    double* ob = out.data() + b * out_seq * n;
    std::copy(T, T + p * n, ob);
    std::copy(X + b * seq * n, X + (b + 1) * seq * n, ob + p * n);
  }
  auto node = make_node(Shape{batch * out_seq, n}, std::move(out), {x.node(), tokens.node()},
                        "concat_front_per_sample");
  if (node->needs_grad) {
    node->backprop = [batch, seq, p, n, out_seq](Node& self) {
      Node* px = self.parents[0].get();
      Node* pt = self.parents[1].get();
      const double* dO = self.grad.data();
      if (pt->needs_grad) {
        double* dT = pt->grad_slot();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = dO + b * out_seq * n;
          for (std::size_t i = 0; i < p * n; ++i) dT[i] += src[i];
        }
      }
      if (px->needs_grad) {
        double* dX = px->grad_slot();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = dO + b * out_seq * n + p * n;
          double* dst = dX + b * seq * n;
          for (std::size_t i = 0; i < seq * n; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Var(node);
}

Var drop_front_per_sample(const Var& x, std::size_t count, std::size_t batch, std::size_t seq) {
  check_batched(x, batch, seq, "drop_front_per_sample");
  if (count == 0) return x;
  if (count >= seq) {
    throw ShapeError("drop_front_per_sample: dropping " + std::to_string(count) +
                     " of " + std::to_string(seq) + " tokens leaves nothing");
  }
  const std::size_t n = x.shape()[1];
  const std::size_t out_seq = seq - count;
  std::vector<double> out(batch * out_seq * n);
  const double* X = x.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = X + b * seq * n + count * n;
    std::copy(src, src + out_seq * n, out.data() + b * out_seq * n);
  }
  auto node =
      make_node(Shape{batch * out_seq, n}, std::move(out), {x.node()}, "drop_front_per_sample");
  if (node->needs_grad) {
    node->backprop = [batch, seq, count, n, out_seq](Node& self) {
      double* dX = self.parents[0]->grad_slot();
      const double* dO = self.grad.data();
      for (std::size_t b = 0; b < batch; ++b) {
        double* dst = dX + b * seq * n + count * n;
        const double* src = dO + b * out_seq * n;
        for (std::size_t i = 0; i < out_seq * n; ++i) dst[i] += src[i];
      }
    };
  }
  return Var(node);
}

Var take_row0_per_sample(const Var& x, std::size_t batch, std::size_t seq) {
  check_batched(x, batch, seq, "take_row0_per_sample");
  const std::size_t n = x.shape()[1];
  std::vector<double> out(batch * n);
  const double* X = x.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(X + b * seq * n, X + b * seq * n + n, out.data() + b * n);
  }
  auto node = make_node(Shape{batch, n}, std::move(out), {x.node()}, "take_row0_per_sample");
  if (node->needs_grad) {
    node->backprop = [batch, seq, n](Node& self) {
      double* dX = self.parents[0]->grad_slot();
      const double* dO = self.grad.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < n; ++j) dX[b * seq * n + j] += dO[b * n + j];
      }
    };
  }
  return Var(node);
}

Var add_block_broadcast(const Var& x, const Var& block, std::size_t batch) {
  auto [l, n] = rows_cols(block, "add_block_broadcast");
  check_batched(x, batch, l, "add_block_broadcast");
  if (x.shape()[1] != n) {
    throw ShapeError("add_block_broadcast: block dim " + std::to_string(n) + " vs " +
                     std::to_string(x.shape()[1]));
  }
  std::vector<double> out(x.values());
  const double* B = block.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    double* ob = out.data() + b * l * n;
    for (std::size_t i = 0; i < l * n; ++i) ob[i] += B[i];
  }
  auto node = make_node(x.shape(), std::move(out), {x.node(), block.node()}, "add_block_broadcast");
  if (node->needs_grad) {
    node->backprop = [batch, l, n](Node& self) {
      Node* px = self.parents[0].get();
      Node* pb = self.parents[1].get();
      if (px->needs_grad) px->accumulate(self.grad);
      if (pb->needs_grad) {
        double* dB = pb->grad_slot();
        const double* dO = self.grad.data();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = dO + b * l * n;
          for (std::size_t i = 0; i < l * n; ++i) dB[i] += src[i];
        }
      }
    };
  }
  return Var(node);
}

Var self_attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t seq,
                   std::size_t heads) {
  check_batched(q, batch, seq, "self_attention");
  check_same_shape(q, k, "self_attention");
  check_same_shape(q, v, "self_attention");
  const std::size_t dim = q.shape()[1];
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("self_attention: dim " + std::to_string(dim) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t hd = dim / heads;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> out(batch * seq * dim, 0.0);
  auto attn = std::make_shared<std::vector<double>>(batch * heads * seq * seq);
  const double* Q = q.values().data();
  const double* K = k.values().data();
  const double* V = v.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * seq * dim;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t hoff = h * hd;
      double* A = attn->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = Q + base + i * dim + hoff;
        double* Ai = A + i * seq;
        double mx = -1e300;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = K + base + j * dim + hoff;
          double s = 0.0;
          for (std::size_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
          s *= alpha;
          Ai[j] = s;
          mx = std::max(mx, s);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          Ai[j] = std::exp(Ai[j] - mx);
          sum += Ai[j];
        }
        const double inv = 1.0 / sum;
        double* oi = out.data() + base + i * dim + hoff;
        for (std::size_t j = 0; j < seq; ++j) {
          const double a = Ai[j] * inv;
          Ai[j] = a;
          const double* vj = V + base + j * dim + hoff;
          for (std::size_t d = 0; d < hd; ++d) oi[d] += a * vj[d];
        }
      }
    }
  }
  auto node =
      make_node(q.shape(), std::move(out), {q.node(), k.node(), v.node()}, "self_attention");
  if (node->needs_grad) {
    node->backprop = [batch, seq, heads, hd, dim, alpha, attn](Node& self) {
      Node* pq = self.parents[0].get();
      Node* pk = self.parents[1].get();
      Node* pv = self.parents[2].get();
      const double* Q = pq->value.data();
      const double* K = pk->value.data();
      const double* V = pv->value.data();
      const double* dO = self.grad.data();
      double* dQ = pq->needs_grad ? pq->grad_slot() : nullptr;
      double* dK = pk->needs_grad ? pk->grad_slot() : nullptr;
      double* dV = pv->needs_grad ? pv->grad_slot() : nullptr;
      std::vector<double> dA(seq), dS(seq);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq * dim;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t hoff = h * hd;
          const double* A = attn->data() + (b * heads + h) * seq * seq;
          for (std::size_t i = 0; i < seq; ++i) {
            const double* Ai = A + i * seq;
            const double* doi = dO + base + i * dim + hoff;
            // dA = dO . Vt, then dS = A * (dA - sum(dA * A))
            double dot_da_a = 0.0;
            for (std::size_t j = 0; j < seq; ++j) {
              const double* vj = V + base + j * dim + hoff;
              double s = 0.0;
              for (std::size_t d = 0; d < hd; ++d) s += doi[d] * vj[d];
              dA[j] = s;
              dot_da_a += s * Ai[j];
            }
            for (std::size_t j = 0; j < seq; ++j) dS[j] = Ai[j] * (dA[j] - dot_da_a);
            if (dV) {
              for (std::size_t j = 0; j < seq; ++j) {
                double* dvj = dV + base + j * dim + hoff;
                const double a = Ai[j];
                for (std::size_t d = 0; d < hd; ++d) dvj[d] += a * doi[d];
              }
            }
            if (dQ) {
              double* dqi = dQ + base + i * dim + hoff;
              for (std::size_t j = 0; j < seq; ++j) {
                const double s = alpha * dS[j];
                const double* kj = K + base + j * dim + hoff;
                for (std::size_t d = 0; d < hd; ++d) dqi[d] += s * kj[d];
              }
            }
            if (dK) {
              const double* qi = Q + base + i * dim + hoff;
              for (std::size_t j = 0; j < seq; ++j) {
                const double s = alpha * dS[j];
                double* dkj = dK + base + j * dim + hoff;
                for (std::size_t d = 0; d < hd; ++d) dkj[d] += s * qi[d];
              }
            }
          }
        }
      }
    };
  }
  return Var(node);
}

// ------------------------------------------------------------------

void backward(const Var& output) {
  if (!output.defined()) throw ValueError("backward: undefined output");
  if (output.size() != 1) {
    throw ValueError("backward: output must be scalar, got shape " + shape_str(output.shape()));
  }
  Node* root = output.node().get();
  if (!root->needs_grad) return;  // nothing trainable reaches the output

  // Post-order DFS: every node appears after all of its parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) continue;  // unreachable contribution
    if (n->backprop) n->backprop(*n);
    if (n->bound && n->bound->requires_grad()) {
      n->bound->ensure_grad();
      auto& g = n->bound->grad();
      for (std::size_t i = 0; i < n->grad.size(); ++i) g[i] += n->grad[i];
    }
  }
}

}  // namespace mqmk::num
