// SPDX-License-Identifier: Apache-2.0
#include "bigs/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bigs {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC view(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
Map view(Tensor& t) { return Map(t.data().data(), t.rows(), t.cols()); }

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < s.size(); ++i) d[i] += s[i];
}

void require_seq(const Tensor& x, std::size_t seq_len, const char* op) {
  if (seq_len == 0 || x.rows() % seq_len != 0) {
    throw ShapeError(std::string(op) + ": " + std::to_string(x.rows()) + " rows not divisible by seq_len " +
                     std::to_string(seq_len));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  view(out).noalias() = view(a) * view(b);
  return out;
}

Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    if (t.needs_grad(a)) view(t.grad(a)).noalias() += view(g) * view(t.value(b)).transpose();
    if (t.needs_grad(b)) view(t.grad(b)).noalias() += view(t.value(a)).transpose() * view(g);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) +
                     "^T");
  }
  Tensor out({av.rows(), bv.rows()});
  view(out).noalias() = view(av) * view(bv).transpose();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    if (t.needs_grad(a)) view(t.grad(a)).noalias() += view(g) * view(t.value(b));
    if (t.needs_grad(b)) view(t.grad(b)).noalias() += view(g).transpose() * view(t.value(a));
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    if (t.needs_grad(a)) accumulate(t.grad(a), g);
    if (t.needs_grad(b)) accumulate(t.grad(b), g);
  });
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.numel() != xv.cols()) {
    throw ShapeError("add_row: bias " + shape_str(bv.shape()) + " does not match columns of " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += bv[c];
  return x.tape()->record(std::move(out), {x, bias}, [x, bias](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    if (t.needs_grad(x)) accumulate(t.grad(x), g);
    if (t.needs_grad(bias)) {
      Tensor& gb = t.grad(bias);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g.at(r, c);
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  for (double& v : out.storage()) v *= s;
  return x.tape()->record(std::move(out), {x}, [x, s](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += s * g[i];
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.tape()->record(Tensor::scalar(acc), {x}, [x](Tape& t, Var out) {
    const double g = t.grad(out)[0];
    for (double& v : t.grad(x).storage()) v += g;
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = gelu_value(v);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * gelu_derivative(xv[i]);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t d = xv.cols();
  if (d == 0) throw ShapeError("layer_norm: feature dimension is zero");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xv.at(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = xv.at(r, c) - mean;
      var += z * z;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat.at(r, c) = (xv.at(r, c) - mean) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gv[c] + bv[c];
    }
  }
  return x.tape()->record(std::move(out), {x, gain, bias},
                          [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, Var out) {
                            const Tensor& g = t.grad(out);
                            const Tensor& gv = t.value(gain);
                            const std::size_t rows = g.rows();
                            const std::size_t d = g.cols();
                            if (t.needs_grad(gain) || t.needs_grad(bias)) {
                              Tensor& gg = t.grad(gain);
                              Tensor& gb = t.grad(bias);
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < d; ++c) {
                                  gg[c] += g.at(r, c) * xhat.at(r, c);
                                  gb[c] += g.at(r, c);
                                }
                            }
                            if (!t.needs_grad(x)) return;
                            Tensor& gx = t.grad(x);
                            const double inv_d = 1.0 / static_cast<double>(d);
                            for (std::size_t r = 0; r < rows; ++r) {
                              double mean_dxh = 0.0;
                              double mean_dxh_xh = 0.0;
                              for (std::size_t c = 0; c < d; ++c) {
                                const double dxh = g.at(r, c) * gv[c];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat.at(r, c);
                              }
                              mean_dxh *= inv_d;
                              mean_dxh_xh *= inv_d;
                              for (std::size_t c = 0; c < d; ++c) {
                                const double dxh = g.at(r, c) * gv[c];
                                gx.at(r, c) += inv_std[r] * (dxh - mean_dxh - xhat.at(r, c) * mean_dxh_xh);
                              }
                            }
                          });
}

namespace {

void flip_into(const Tensor& src, Tensor& dst, std::size_t seq_len, bool accumulate_dst) {
  const std::size_t d = src.cols();
  const std::size_t n_seq = src.rows() / seq_len;
  for (std::size_t s = 0; s < n_seq; ++s)
    for (std::size_t i = 0; i < seq_len; ++i) {
      const std::size_t from = s * seq_len + i;
      const std::size_t to = s * seq_len + (seq_len - 1 - i);
      for (std::size_t c = 0; c < d; ++c) {
        if (accumulate_dst)
          dst.at(to, c) += src.at(from, c);
        else
          dst.at(to, c) = src.at(from, c);
      }
    }
}

}  // namespace

Var flip(Var x, std::size_t seq_len) {
  const Tensor& xv = x.value();
  require_seq(xv, seq_len, "flip");
  Tensor out(xv.shape());
  flip_into(xv, out, seq_len, false);
  return x.tape()->record(std::move(out), {x}, [x, seq_len](Tape& t, Var out) {
    flip_into(t.grad(out), t.grad(x), seq_len, true);
  });
}

Var gather_rows(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  require_rank2(tv, "gather_rows");
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table}, [table, idx = std::move(idx)](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    Tensor& gt = t.grad(table);
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt.at(static_cast<std::size_t>(idx[i]), c) += g.at(i, c);
  });
}

Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  const Tensor& xv = x.value();
  Tensor mask(xv.shape());
  const double keep = 1.0 / (1.0 - p);
  for (double& m : mask.storage()) m = rng.bernoulli(p) ? 0.0 : keep;
  Tensor out = xv;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return x.tape()->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
  });
}

std::vector<double> softmax_row(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

Tensor attention_probs(const Tensor& q, const Tensor& k, std::size_t n_heads, std::size_t head) {
  require_same(q, k, "attention_probs");
  const std::size_t L = q.rows();
  const std::size_t d = q.cols();
  if (n_heads == 0 || d % n_heads != 0 || head >= n_heads) throw ShapeError("attention_probs: bad head split");
  const std::size_t dh = d / n_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor probs({L, L});
  std::vector<double> row(L);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      double acc = 0.0;
      for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) acc += q.at(i, c) * k.at(j, c);
      row[j] = acc * s;
    }
    const auto p = softmax_row(row);
    std::copy(p.begin(), p.end(), probs.data().begin() + static_cast<std::ptrdiff_t>(i * L));
  }
  return probs;
}

Var attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t n_heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_same(qv, kv, "attention");
  require_same(qv, vv, "attention");
  require_seq(qv, seq_len, "attention");
  const std::size_t d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("attention: d=" + std::to_string(d) + " not divisible by n_heads=" + std::to_string(n_heads));
  }
  const std::size_t dh = d / n_heads;
  const std::size_t n_seq = qv.rows() / seq_len;
  const std::size_t L = seq_len;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs laid out [seq][head][i][j]
  std::vector<double> probs(n_seq * n_heads * L * L);
  Tensor out(qv.shape());
  std::vector<double> row(L);
  for (std::size_t b = 0; b < n_seq; ++b)
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* P = probs.data() + (b * n_heads + h) * L * L;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < L; ++i) {
        const std::size_t ri = b * L + i;
        for (std::size_t j = 0; j < L; ++j) {
          const std::size_t rj = b * L + j;
          double acc = 0.0;
          for (std::size_t c = c0; c < c0 + dh; ++c) acc += qv.at(ri, c) * kv.at(rj, c);
          row[j] = acc * s;
        }
        const auto p = softmax_row(row);
        std::copy(p.begin(), p.end(), P + i * L);
        for (std::size_t j = 0; j < L; ++j) {
          const std::size_t rj = b * L + j;
          for (std::size_t c = c0; c < c0 + dh; ++c) out.at(ri, c) += p[j] * vv.at(rj, c);
        }
      }
    }

  return q.tape()->record(
      std::move(out), {q, k, v}, [q, k, v, L, n_heads, dh, n_seq, s, probs = std::move(probs)](Tape& t, Var out) {
        const Tensor& g = t.grad(out);
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        Tensor& gq = t.grad(q);
        Tensor& gk = t.grad(k);
        Tensor& gv = t.grad(v);
        std::vector<double> dp(L);
        for (std::size_t b = 0; b < n_seq; ++b)
          for (std::size_t h = 0; h < n_heads; ++h) {
            const double* P = probs.data() + (b * n_heads + h) * L * L;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
              const std::size_t ri = b * L + i;
              double dot = 0.0;
              for (std::size_t j = 0; j < L; ++j) {
                const std::size_t rj = b * L + j;
                double acc = 0.0;
                for (std::size_t c = c0; c < c0 + dh; ++c) {
                  acc += g.at(ri, c) * vv.at(rj, c);
                  gv.at(rj, c) += P[i * L + j] * g.at(ri, c);
                }
                dp[j] = acc;
                dot += acc * P[i * L + j];
              }
              for (std::size_t j = 0; j < L; ++j) {
                const std::size_t rj = b * L + j;
                const double ds = P[i * L + j] * (dp[j] - dot) * s;
                for (std::size_t c = c0; c < c0 + dh; ++c) {
                  gq.at(ri, c) += ds * kv.at(rj, c);
                  gk.at(rj, c) += ds * qv.at(ri, c);
                }
              }
            }
          }
      });
}

Var masked_cross_entropy(Var logits, std::span<const std::int32_t> labels) {
  const Tensor& lv = logits.value();
  require_rank2(lv, "masked_cross_entropy");
  if (labels.size() != lv.rows()) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(lv.rows()) + " rows");
  }
  const std::size_t V = lv.cols();
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const std::int32_t y = labels[r];
    if (y < 0) continue;
    if (static_cast<std::size_t>(y) >= V) throw std::out_of_range("masked_cross_entropy: label out of range");
    const auto row = lv.data().subspan(r * V, V);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(y)];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return logits.tape()->record(Tensor::scalar(loss), {logits}, [logits, lab = std::move(lab), count](Tape& t, Var out) {
    if (count == 0) return;
    const double g = t.grad(out)[0] / static_cast<double>(count);
    const Tensor& lv = t.value(logits);
    Tensor& gl = t.grad(logits);
    const std::size_t V = lv.cols();
    for (std::size_t r = 0; r < lv.rows(); ++r) {
      if (lab[r] < 0) continue;
      const auto p = softmax_row(lv.data().subspan(r * V, V));
      for (std::size_t c = 0; c < V; ++c) gl.at(r, c) += g * p[c];
      gl.at(r, static_cast<std::size_t>(lab[r])) -= g;
    }
  });
}

}  // namespace bigs
