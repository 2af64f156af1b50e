#include "falcon/ops.hpp"

#include <algorithm>
#include <cmath>

namespace falcon {

namespace {

constexpr Scalar kKlEps = 1e-12;
constexpr Scalar kLnEps = 1e-5;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise(ErrorKind::Dimension, std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  }
}

void check_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    raise(ErrorKind::Dimension,
          std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (Scalar v : t.values()) {
    if (!std::isfinite(v)) {
      raise(ErrorKind::Numeric, std::string(op) + ": non-finite input");
    }
  }
}

// Elementwise op with backward dx = dy * dfn(saved forward).
template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd bwd_factor) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  if (autograd_active({x})) {
    auto xn = x.node();
    auto on = out.node();
    autograd_record({x}, out, [xn, on, bwd_factor]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) {
        xn->grad[i] += on->grad[i] * bwd_factor(xn->values[i], on->values[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
  if (autograd_active({a, b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    autograd_record({a, b}, out, [an, bn, on]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
  if (autograd_active({a, b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    autograd_record({a, b}, out, [an, bn, on]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
  if (autograd_active({a, b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    autograd_record({a, b}, out, [an, bn, on]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) {
          an->grad[i] += on->grad[i] * bn->values[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) {
          bn->grad[i] += on->grad[i] * an->values[i];
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, Scalar s) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * s;
  if (autograd_active({a})) {
    auto an = a.node(), on = out.node();
    autograd_record({a}, out, [an, on, s]() {
      if (on->grad.empty() || !an->requires_grad) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      x, [](Scalar v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& x) {
  return unary_elementwise(x, [](Scalar v) { return std::tanh(v); },
                           [](Scalar, Scalar y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr Scalar kInvSqrt2 = 0.7071067811865475244;
  constexpr Scalar kInvSqrt2Pi = 0.3989422804014326779;
  return unary_elementwise(
      x,
      [](Scalar v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](Scalar v, Scalar) {
        Scalar cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        Scalar pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor sum(const Tensor& x) {
  Scalar total = 0.0;
  for (Scalar v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);
  if (autograd_active({x})) {
    auto xn = x.node(), on = out.node();
    autograd_record({x}, out, [xn, on]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<Scalar>(x.size()));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) raise(ErrorKind::Dimension, "concat_rows: no inputs");
  int64_t cols = parts[0].dim(parts[0].rank() - 1);
  int64_t rows = 0;
  for (const auto& p : parts) {
    check_matrix(p, "concat_rows");
    if (p.dim(1) != cols) {
      raise(ErrorKind::Dimension, "concat_rows: width mismatch " +
                                      shape_str(p.shape()) + " vs width " +
                                      std::to_string(cols));
    }
    rows += p.dim(0);
  }
  Tensor out = Tensor::zeros({rows, cols});
  auto& ov = out.values();
  size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.values();
    std::copy(pv.begin(), pv.end(), ov.begin() + off);
    off += pv.size();
  }
  if (autograd_active(parts)) {
    std::vector<std::shared_ptr<TensorData>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tensor out_ref = out;
    autograd_record(parts, out_ref, [nodes, on]() {
      if (on->grad.empty()) return;
      size_t off2 = 0;
      for (auto& n : nodes) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (size_t i = 0; i < n->grad.size(); ++i) {
            n->grad[i] += on->grad[off2 + i];
          }
        }
        off2 += n->values.size();
      }
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_matrix(a, "concat_cols");
  check_matrix(b, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    raise(ErrorKind::Dimension, "concat_cols: row mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  }
  int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out = Tensor::zeros({rows, ca + cb});
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(av.begin() + r * ca, av.begin() + (r + 1) * ca,
              ov.begin() + r * (ca + cb));
    std::copy(bv.begin() + r * cb, bv.begin() + (r + 1) * cb,
              ov.begin() + r * (ca + cb) + ca);
  }
  if (autograd_active({a, b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    autograd_record({a, b}, out, [an, bn, on, rows, ca, cb]() {
      if (on->grad.empty()) return;
      for (int64_t r = 0; r < rows; ++r) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t j = 0; j < ca; ++j) {
            an->grad[r * ca + j] += on->grad[r * (ca + cb) + j];
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t j = 0; j < cb; ++j) {
            bn->grad[r * cb + j] += on->grad[r * (ca + cb) + ca + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
  check_matrix(x, "slice_rows");
  if (start < 0 || len < 1 || start + len > x.dim(0)) {
    raise(ErrorKind::Dimension,
          "slice_rows: range [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of " +
              std::to_string(x.dim(0)) + " rows");
  }
  int64_t cols = x.dim(1);
  Tensor out = Tensor::zeros({len, cols});
  const auto& xv = x.values();
  std::copy(xv.begin() + start * cols, xv.begin() + (start + len) * cols,
            out.values().begin());
  if (autograd_active({x})) {
    auto xn = x.node(), on = out.node();
    autograd_record({x}, out, [xn, on, start, len, cols]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (int64_t i = 0; i < len * cols; ++i) {
        xn->grad[start * cols + i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t len) {
  check_matrix(x, "slice_cols");
  if (start < 0 || len < 1 || start + len > x.dim(1)) {
    raise(ErrorKind::Dimension,
          "slice_cols: range [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of " +
              std::to_string(x.dim(1)) + " columns");
  }
  int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros({rows, len});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xv.begin() + r * cols + start, xv.begin() + r * cols + start + len,
              ov.begin() + r * len);
  }
  if (autograd_active({x})) {
    auto xn = x.node(), on = out.node();
    autograd_record({x}, out, [xn, on, rows, cols, start, len]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < len; ++j) {
          xn->grad[r * cols + start + j] += on->grad[r * len + j];
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  check_matrix(table, "gather_rows");
  if (ids.empty()) raise(ErrorKind::Dimension, "gather_rows: empty id list");
  int64_t rows = table.dim(0), cols = table.dim(1);
  for (int64_t id : ids) {
    if (id < 0 || id >= rows) {
      raise(ErrorKind::Dimension, "gather_rows: id " + std::to_string(id) +
                                      " out of " + std::to_string(rows) +
                                      " rows");
    }
  }
  Tensor out = Tensor::zeros({static_cast<int64_t>(ids.size()), cols});
  const auto& tv = table.values();
  auto& ov = out.values();
  for (size_t r = 0; r < ids.size(); ++r) {
    std::copy(tv.begin() + ids[r] * cols, tv.begin() + (ids[r] + 1) * cols,
              ov.begin() + static_cast<int64_t>(r) * cols);
  }
  if (autograd_active({table})) {
    auto tn = table.node(), on = out.node();
    auto ids_copy = ids;
    autograd_record({table}, out, [tn, on, ids_copy, cols]() {
      if (on->grad.empty() || !tn->requires_grad) return;
      tn->ensure_grad();
      for (size_t r = 0; r < ids_copy.size(); ++r) {
        for (int64_t j = 0; j < cols; ++j) {
          tn->grad[ids_copy[r] * cols + j] +=
              on->grad[static_cast<int64_t>(r) * cols + j];
        }
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    raise(ErrorKind::Dimension, "matmul: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  }
  const int64_t R = a.dim(0), K = a.dim(1), C = b.dim(1);
  Tensor out = Tensor::zeros({R, C});
  const Scalar* av = a.values().data();
  const Scalar* bv = b.values().data();
  Scalar* ov = out.values().data();
  for (int64_t i = 0; i < R; ++i) {
    for (int64_t kk = 0; kk < K; ++kk) {
      const Scalar aik = av[i * K + kk];
      if (aik == 0.0) continue;
      const Scalar* brow = bv + kk * C;
      Scalar* orow = ov + i * C;
      for (int64_t j = 0; j < C; ++j) orow[j] += aik * brow[j];
    }
  }
  if (autograd_active({a, b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    autograd_record({a, b}, out, [an, bn, on, R, K, C]() {
      if (on->grad.empty()) return;
      const Scalar* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        Scalar* da = an->grad.data();
        const Scalar* bv2 = bn->values.data();
        for (int64_t i = 0; i < R; ++i) {
          for (int64_t kk = 0; kk < K; ++kk) {
            const Scalar* brow = bv2 + kk * C;
            const Scalar* grow = g + i * C;
            Scalar acc = 0.0;
            for (int64_t j = 0; j < C; ++j) acc += grow[j] * brow[j];
            da[i * K + kk] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Scalar* db = bn->grad.data();
        const Scalar* av2 = an->values.data();
        for (int64_t i = 0; i < R; ++i) {
          const Scalar* grow = g + i * C;
          for (int64_t kk = 0; kk < K; ++kk) {
            const Scalar aik = av2[i * K + kk];
            if (aik == 0.0) continue;
            Scalar* brow = db + kk * C;
            for (int64_t j = 0; j < C; ++j) brow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  check_matrix(x, "transpose");
  int64_t R = x.dim(0), C = x.dim(1);
  Tensor out = Tensor::zeros({C, R});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t i = 0; i < R; ++i) {
    for (int64_t j = 0; j < C; ++j) ov[j * R + i] = xv[i * C + j];
  }
  if (autograd_active({x})) {
    auto xn = x.node(), on = out.node();
    autograd_record({x}, out, [xn, on, R, C]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (int64_t i = 0; i < R; ++i) {
        for (int64_t j = 0; j < C; ++j) {
          xn->grad[i * C + j] += on->grad[j * R + i];
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_matrix(x, "linear");
  check_matrix(w, "linear");
  if (x.dim(1) != w.dim(0)) {
    raise(ErrorKind::Dimension, "linear: input width " + shape_str(x.shape()) +
                                    " does not match weight " +
                                    shape_str(w.shape()));
  }
  Tensor out = matmul(x, w);
  if (!b.defined()) return out;
  if (b.size() != w.dim(1)) {
    raise(ErrorKind::Dimension, "linear: bias size " + shape_str(b.shape()) +
                                    " does not match weight " +
                                    shape_str(w.shape()));
  }
  const int64_t R = out.dim(0), C = out.dim(1);
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < R; ++r) {
    for (int64_t j = 0; j < C; ++j) ov[r * C + j] += bv[j];
  }
  if (autograd_active({b})) {
    // matmul already recorded grads for x and w; add the bias path.
    auto bn = b.node(), on = out.node();
    autograd_record({b}, out, [bn, on, R, C]() {
      if (on->grad.empty() || !bn->requires_grad) return;
      bn->ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        for (int64_t j = 0; j < C; ++j) bn->grad[j] += on->grad[r * C + j];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  check_finite(x, "softmax");
  int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    raise(ErrorKind::Dimension, "softmax: axis out of range");
  }
  int64_t n = x.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);

  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      Scalar m = xv[base];
      for (int64_t i = 1; i < n; ++i) m = std::max(m, xv[base + i * inner]);
      Scalar z = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        Scalar e = std::exp(xv[base + i * inner] - m);
        ov[base + i * inner] = e;
        z += e;
      }
      for (int64_t i = 0; i < n; ++i) ov[base + i * inner] /= z;
    }
  }
  if (autograd_active({x})) {
    auto xn = x.node(), on = out.node();
    autograd_record({x}, out, [xn, on, outer, inner, n]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * n * inner + in;
          Scalar dot = 0.0;
          for (int64_t i = 0; i < n; ++i) {
            dot += on->values[base + i * inner] * on->grad[base + i * inner];
          }
          for (int64_t i = 0; i < n; ++i) {
            const int64_t idx = base + i * inner;
            xn->grad[idx] += on->values[idx] * (on->grad[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() < 1) raise(ErrorKind::Dimension, "layer_norm: rank-0 input");
  int64_t C = x.dim(x.rank() - 1);
  if (gamma.size() != C || beta.size() != C) {
    raise(ErrorKind::Dimension, "layer_norm: parameter size mismatch for " +
                                    shape_str(x.shape()));
  }
  int64_t R = x.size() / C;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<Scalar> xhat(static_cast<size_t>(R * C));
  std::vector<Scalar> inv_std(static_cast<size_t>(R));
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < R; ++r) {
    Scalar mu = 0.0;
    for (int64_t j = 0; j < C; ++j) mu += xv[r * C + j];
    mu /= static_cast<Scalar>(C);
    Scalar var = 0.0;
    for (int64_t j = 0; j < C; ++j) {
      Scalar d = xv[r * C + j] - mu;
      var += d * d;
    }
    var /= static_cast<Scalar>(C);
    Scalar is = 1.0 / std::sqrt(var + kLnEps);
    inv_std[r] = is;
    for (int64_t j = 0; j < C; ++j) {
      Scalar xh = (xv[r * C + j] - mu) * is;
      xhat[r * C + j] = xh;
      ov[r * C + j] = gv[j] * xh + bv[j];
    }
  }
  if (autograd_active({x, gamma, beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    autograd_record(
        {x, gamma, beta}, out,
        [xn, gn, bn, on, R, C, xhat = std::move(xhat),
         inv_std = std::move(inv_std)]() {
          if (on->grad.empty()) return;
          for (int64_t r = 0; r < R; ++r) {
            if (gn->requires_grad) {
              gn->ensure_grad();
              for (int64_t j = 0; j < C; ++j) {
                gn->grad[j] += on->grad[r * C + j] * xhat[r * C + j];
              }
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              for (int64_t j = 0; j < C; ++j) bn->grad[j] += on->grad[r * C + j];
            }
            if (xn->requires_grad) {
              xn->ensure_grad();
              Scalar mean_gy = 0.0, mean_gyxh = 0.0;
              for (int64_t j = 0; j < C; ++j) {
                Scalar gy = on->grad[r * C + j] * gn->values[j];
                mean_gy += gy;
                mean_gyxh += gy * xhat[r * C + j];
              }
              mean_gy /= static_cast<Scalar>(C);
              mean_gyxh /= static_cast<Scalar>(C);
              for (int64_t j = 0; j < C; ++j) {
                Scalar gy = on->grad[r * C + j] * gn->values[j];
                xn->grad[r * C + j] +=
                    inv_std[r] * (gy - mean_gy - xhat[r * C + j] * mean_gyxh);
              }
            }
          }
        });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  check_matrix(logits, "cross_entropy");
  const int64_t R = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != R) {
    raise(ErrorKind::Dimension, "cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(R) + " rows");
  }
  for (int64_t t : targets) {
    if (t < 0 || t >= V) {
      raise(ErrorKind::Dimension, "cross_entropy: target " + std::to_string(t) +
                                      " outside vocab " + std::to_string(V));
    }
  }
  const auto& lv = logits.values();
  Scalar total = 0.0;
  for (int64_t r = 0; r < R; ++r) {
    Scalar m = lv[r * V];
    for (int64_t j = 1; j < V; ++j) m = std::max(m, lv[r * V + j]);
    Scalar z = 0.0;
    for (int64_t j = 0; j < V; ++j) z += std::exp(lv[r * V + j] - m);
    total += m + std::log(z) - lv[r * V + targets[r]];
  }
  Tensor out = Tensor::scalar(total / static_cast<Scalar>(R));
  if (!std::isfinite(out.at(0))) {
    raise(ErrorKind::Numeric, "cross_entropy: non-finite loss");
  }
  if (autograd_active({logits})) {
    auto ln = logits.node(), on = out.node();
    auto tg = targets;
    autograd_record({logits}, out, [ln, on, tg, R, V]() {
      if (on->grad.empty() || !ln->requires_grad) return;
      ln->ensure_grad();
      const Scalar g = on->grad[0] / static_cast<Scalar>(R);
      for (int64_t r = 0; r < R; ++r) {
        Scalar m = ln->values[r * V];
        for (int64_t j = 1; j < V; ++j) m = std::max(m, ln->values[r * V + j]);
        Scalar z = 0.0;
        for (int64_t j = 0; j < V; ++j) z += std::exp(ln->values[r * V + j] - m);
        for (int64_t j = 0; j < V; ++j) {
          Scalar p = std::exp(ln->values[r * V + j] - m) / z;
          ln->grad[r * V + j] += g * (p - (j == tg[r] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  check_same_shape(p, q, "kl_divergence");
  const int64_t C = p.dim(p.rank() - 1);
  const int64_t R = p.size() / C;
  const auto& pv = p.values();
  const auto& qv = q.values();
  Scalar total = 0.0;
  for (int64_t i = 0; i < R * C; ++i) {
    Scalar pc = std::max(pv[i], kKlEps);
    Scalar qc = std::max(qv[i], kKlEps);
    total += pv[i] * std::log(pc / qc);
  }
  Tensor out = Tensor::scalar(total / static_cast<Scalar>(R));
  if (autograd_active({p, q})) {
    auto pn = p.node(), qn = q.node(), on = out.node();
    autograd_record({p, q}, out, [pn, qn, on, R, C]() {
      if (on->grad.empty()) return;
      const Scalar g = on->grad[0] / static_cast<Scalar>(R);
      for (int64_t i = 0; i < R * C; ++i) {
        Scalar pc = std::max(pn->values[i], kKlEps);
        Scalar qc = std::max(qn->values[i], kKlEps);
        if (qn->requires_grad) {
          qn->ensure_grad();
          if (qn->values[i] >= kKlEps) {
            qn->grad[i] -= g * pn->values[i] / qc;
          }
        }
        if (pn->requires_grad) {
          pn->ensure_grad();
          Scalar dlog = std::log(pc / qc);
          if (pn->values[i] >= kKlEps) dlog += 1.0;
          pn->grad[i] += g * dlog;
        }
      }
    });
  }
  return out;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "smooth_l1");
  const auto& pv = pred.values();
  const auto& tv = target.values();
  Scalar total = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    Scalar d = pv[i] - tv[i];
    Scalar a = std::abs(d);
    total += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  const Scalar n = static_cast<Scalar>(pred.size());
  Tensor out = Tensor::scalar(total / n);
  if (autograd_active({pred, target})) {
    auto pn = pred.node(), tn = target.node(), on = out.node();
    autograd_record({pred, target}, out, [pn, tn, on, n]() {
      if (on->grad.empty()) return;
      const Scalar g = on->grad[0] / n;
      for (size_t i = 0; i < pn->values.size(); ++i) {
        Scalar d = pn->values[i] - tn->values[i];
        Scalar dd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
        if (pn->requires_grad) {
          pn->ensure_grad();
          pn->grad[i] += g * dd;
        }
        if (tn->requires_grad) {
          tn->ensure_grad();
          tn->grad[i] -= g * dd;
        }
      }
    });
  }
  return out;
}

LstmState lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                    const Tensor& w_ih, const Tensor& w_hh, const Tensor& b) {
  check_matrix(x, "lstm_cell");
  check_matrix(h, "lstm_cell");
  check_matrix(c, "lstm_cell");
  const int64_t I = x.dim(1);
  const int64_t H = h.dim(1);
  if (x.dim(0) != 1 || h.dim(0) != 1 || c.dim(0) != 1 || c.dim(1) != H ||
      w_ih.dim(0) != I || w_ih.dim(1) != 4 * H || w_hh.dim(0) != H ||
      w_hh.dim(1) != 4 * H || b.size() != 4 * H) {
    raise(ErrorKind::Dimension, "lstm_cell: inconsistent shapes x" +
                                    shape_str(x.shape()) + " h" +
                                    shape_str(h.shape()) + " w_ih" +
                                    shape_str(w_ih.shape()));
  }

  std::vector<Scalar> z(static_cast<size_t>(4 * H), 0.0);
  const Scalar* xv = x.values().data();
  const Scalar* hv = h.values().data();
  const Scalar* wi = w_ih.values().data();
  const Scalar* wh = w_hh.values().data();
  const Scalar* bv = b.values().data();
  for (int64_t j = 0; j < 4 * H; ++j) z[j] = bv[j];
  for (int64_t i = 0; i < I; ++i) {
    const Scalar xi = xv[i];
    if (xi == 0.0) continue;
    const Scalar* row = wi + i * 4 * H;
    for (int64_t j = 0; j < 4 * H; ++j) z[j] += xi * row[j];
  }
  for (int64_t i = 0; i < H; ++i) {
    const Scalar hi = hv[i];
    if (hi == 0.0) continue;
    const Scalar* row = wh + i * 4 * H;
    for (int64_t j = 0; j < 4 * H; ++j) z[j] += hi * row[j];
  }

  std::vector<Scalar> gi(H), gf(H), gg(H), go(H);
  for (int64_t j = 0; j < H; ++j) {
    gi[j] = 1.0 / (1.0 + std::exp(-z[j]));
    gf[j] = 1.0 / (1.0 + std::exp(-z[H + j]));
    gg[j] = std::tanh(z[2 * H + j]);
    go[j] = 1.0 / (1.0 + std::exp(-z[3 * H + j]));
  }
  Tensor c_out = Tensor::zeros({1, H});
  Tensor h_out = Tensor::zeros({1, H});
  std::vector<Scalar> tanh_c(H);
  const Scalar* cv = c.values().data();
  for (int64_t j = 0; j < H; ++j) {
    Scalar cn = gf[j] * cv[j] + gi[j] * gg[j];
    c_out.at(j) = cn;
    tanh_c[j] = std::tanh(cn);
    h_out.at(j) = go[j] * tanh_c[j];
  }

  std::vector<Tensor> inputs = {x, h, c, w_ih, w_hh, b};
  if (autograd_active(inputs)) {
    auto xn = x.node(), hn = h.node(), cn = c.node();
    auto win = w_ih.node(), whn = w_hh.node(), bn = b.node();
    auto hon = h_out.node(), con = c_out.node();
    // One record drives both outputs; their grads are fully accumulated by
    // the time this entry replays because all consumers sit later on the tape.
    autograd_record(
        inputs, h_out,
        [xn, hn, cn, win, whn, bn, hon, con, I, H, gi = std::move(gi),
         gf = std::move(gf), gg = std::move(gg), go = std::move(go),
         tanh_c = std::move(tanh_c)]() {
          if (hon->grad.empty() && con->grad.empty()) return;
          std::vector<Scalar> dz(static_cast<size_t>(4 * H), 0.0);
          for (int64_t j = 0; j < H; ++j) {
            Scalar dh = hon->grad.empty() ? 0.0 : hon->grad[j];
            Scalar dc = con->grad.empty() ? 0.0 : con->grad[j];
            Scalar d_o = dh * tanh_c[j];
            Scalar dct = dc + dh * go[j] * (1.0 - tanh_c[j] * tanh_c[j]);
            Scalar d_i = dct * gg[j];
            Scalar d_f = dct * cn->values[j];
            Scalar d_g = dct * gi[j];
            if (cn->requires_grad) {
              cn->ensure_grad();
              cn->grad[j] += dct * gf[j];
            }
            dz[j] = d_i * gi[j] * (1.0 - gi[j]);
            dz[H + j] = d_f * gf[j] * (1.0 - gf[j]);
            dz[2 * H + j] = d_g * (1.0 - gg[j] * gg[j]);
            dz[3 * H + j] = d_o * go[j] * (1.0 - go[j]);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t j = 0; j < 4 * H; ++j) bn->grad[j] += dz[j];
          }
          if (win->requires_grad) {
            win->ensure_grad();
            for (int64_t i = 0; i < I; ++i) {
              const Scalar xi = xn->values[i];
              if (xi == 0.0) continue;
              for (int64_t j = 0; j < 4 * H; ++j) {
                win->grad[i * 4 * H + j] += xi * dz[j];
              }
            }
          }
          if (whn->requires_grad) {
            whn->ensure_grad();
            for (int64_t i = 0; i < H; ++i) {
              const Scalar hi = hn->values[i];
              if (hi == 0.0) continue;
              for (int64_t j = 0; j < 4 * H; ++j) {
                whn->grad[i * 4 * H + j] += hi * dz[j];
              }
            }
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            for (int64_t i = 0; i < I; ++i) {
              Scalar acc = 0.0;
              const Scalar* row = win->values.data() + i * 4 * H;
              for (int64_t j = 0; j < 4 * H; ++j) acc += row[j] * dz[j];
              xn->grad[i] += acc;
            }
          }
          if (hn->requires_grad) {
            hn->ensure_grad();
            for (int64_t i = 0; i < H; ++i) {
              Scalar acc = 0.0;
              const Scalar* row = whn->values.data() + i * 4 * H;
              for (int64_t j = 0; j < 4 * H; ++j) acc += row[j] * dz[j];
              hn->grad[i] += acc;
            }
          }
        });
    // c_out shares the record above but must carry tape identity so later
    // ops on it keep recording.
    c_out.node()->requires_grad = true;
    c_out.node()->tape = h_out.tape();
  }
  return {h_out, c_out};
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int64_t n_heads, const BoolMatrix& mask) {
  check_matrix(q, "masked_attention");
  check_same_shape(q, k, "masked_attention");
  check_same_shape(q, v, "masked_attention");
  const int64_t S = q.dim(0), Hd = q.dim(1);
  if (n_heads < 1 || Hd % n_heads != 0) {
    raise(ErrorKind::Dimension, "masked_attention: hidden " +
                                    std::to_string(Hd) + " not divisible by " +
                                    std::to_string(n_heads) + " heads");
  }
  if (mask.size() != S) {
    raise(ErrorKind::Dimension, "masked_attention: mask size " +
                                    std::to_string(mask.size()) +
                                    " != sequence length " + std::to_string(S));
  }
  const int64_t dh = Hd / n_heads;
  const Scalar sc = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  const bool track = autograd_active({q, k, v});

  Tensor out = Tensor::zeros({S, Hd});
  const Scalar* qv = q.values().data();
  const Scalar* kv = k.values().data();
  const Scalar* vv = v.values().data();
  Scalar* ov = out.values().data();
  // attention probabilities, saved per head only while recording
  std::vector<Scalar> saved;
  if (track) saved.assign(static_cast<size_t>(n_heads * S * S), 0.0);

  std::vector<Scalar> row_scores(static_cast<size_t>(S));
  std::vector<int64_t> allowed;
  allowed.reserve(static_cast<size_t>(S));
  for (int64_t h = 0; h < n_heads; ++h) {
    const int64_t off = h * dh;
    for (int64_t i = 0; i < S; ++i) {
      allowed.clear();
      for (int64_t j = 0; j < S; ++j) {
        if (mask.get(i, j)) allowed.push_back(j);
      }
      if (allowed.empty()) {
        raise(ErrorKind::Contract, "masked_attention: row " +
                                       std::to_string(i) +
                                       " has no visible columns");
      }
      Scalar m = -1e300;
      for (int64_t j : allowed) {
        Scalar s = 0.0;
        const Scalar* qrow = qv + i * Hd + off;
        const Scalar* krow = kv + j * Hd + off;
        for (int64_t d = 0; d < dh; ++d) s += qrow[d] * krow[d];
        s *= sc;
        row_scores[j] = s;
        m = std::max(m, s);
      }
      Scalar z = 0.0;
      for (int64_t j : allowed) {
        row_scores[j] = std::exp(row_scores[j] - m);
        z += row_scores[j];
      }
      Scalar* orow = ov + i * Hd + off;
      for (int64_t j : allowed) {
        const Scalar a = row_scores[j] / z;
        if (track) saved[(h * S + i) * S + j] = a;
        const Scalar* vrow = vv + j * Hd + off;
        for (int64_t d = 0; d < dh; ++d) orow[d] += a * vrow[d];
      }
    }
  }

  if (track) {
    auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
    BoolMatrix mask_copy = mask;
    autograd_record(
        {q, k, v}, out,
        [qn, kn, vn, on, n_heads, S, dh, Hd, sc, saved = std::move(saved),
         mask_copy = std::move(mask_copy)]() {
          if (on->grad.empty()) return;
          if (qn->requires_grad) qn->ensure_grad();
          if (kn->requires_grad) kn->ensure_grad();
          if (vn->requires_grad) vn->ensure_grad();
          std::vector<Scalar> ds(static_cast<size_t>(S));
          for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t off = h * dh;
            for (int64_t i = 0; i < S; ++i) {
              const Scalar* grow = on->grad.data() + i * Hd + off;
              // dA_j then softmax backward
              Scalar dot = 0.0;
              for (int64_t j = 0; j < S; ++j) {
                const Scalar a = saved[(h * S + i) * S + j];
                if (a == 0.0 && !mask_copy.get(i, j)) {
                  ds[j] = 0.0;
                  continue;
                }
                const Scalar* vrow = vn->values.data() + j * Hd + off;
                Scalar da = 0.0;
                for (int64_t d = 0; d < dh; ++d) da += grow[d] * vrow[d];
                ds[j] = da;
                dot += a * da;
              }
              for (int64_t j = 0; j < S; ++j) {
                if (!mask_copy.get(i, j)) continue;
                const Scalar a = saved[(h * S + i) * S + j];
                const Scalar dscore = a * (ds[j] - dot);
                if (vn->requires_grad) {
                  Scalar* dvrow = vn->grad.data() + j * Hd + off;
                  for (int64_t d = 0; d < dh; ++d) dvrow[d] += a * grow[d];
                }
                if (qn->requires_grad) {
                  Scalar* dqrow = qn->grad.data() + i * Hd + off;
                  const Scalar* krow = kn->values.data() + j * Hd + off;
                  for (int64_t d = 0; d < dh; ++d) {
                    dqrow[d] += sc * dscore * krow[d];
                  }
                }
                if (kn->requires_grad) {
                  Scalar* dkrow = kn->grad.data() + j * Hd + off;
                  const Scalar* qrow = qn->values.data() + i * Hd + off;
                  for (int64_t d = 0; d < dh; ++d) {
                    dkrow[d] += sc * dscore * qrow[d];
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

}  // namespace falcon
