#include "attnlr/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "attnlr/error.hpp"

namespace attnlr::nn::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;
using Stride = Eigen::OuterStride<>;
using SMapR = Eigen::Map<RowMat, 0, Stride>;
using CSMapR = Eigen::Map<const RowMat, 0, Stride>;

CMapR cmat(const Tensor& x) { return CMapR(x.data.data(), x.rows(), x.cols()); }
CMapR cmat(const std::vector<double>& g, std::size_t r, std::size_t c) { return CMapR(g.data(), r, c); }
MapR mat(std::vector<double>& g, std::size_t r, std::size_t c) { return MapR(g.data(), r, c); }

Tensor matrix_tensor(std::size_t r, std::size_t c) { return Tensor({r, c}); }

void mismatch(const std::string& op, const std::string& what) {
  fail(ErrorCategory::DimMismatch, op + ": " + what);
}

bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  for (Var v : vs) {
    if (t.requires_grad(v)) return true;
  }
  return false;
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.cols() != bv.rows()) mismatch("matmul", "inner dimensions differ");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = matrix_tensor(m, n);
  mat(out.data, m, n).noalias() = cmat(av) * cmat(bv);
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b, m, k, n](Tape& tp, const std::vector<double>& g) {
    auto G = cmat(g, m, n);
    if (tp.requires_grad(a)) mat(tp.grad_buffer(a), m, k).noalias() += G * cmat(tp.value(b)).transpose();
    if (tp.requires_grad(b)) mat(tp.grad_buffer(b), k, n).noalias() += cmat(tp.value(a)).transpose() * G;
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.cols() != bv.cols()) mismatch("matmul_nt", "inner dimensions differ");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out = matrix_tensor(m, n);
  mat(out.data, m, n).noalias() = cmat(av) * cmat(bv).transpose();
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b, m, k, n](Tape& tp, const std::vector<double>& g) {
    auto G = cmat(g, m, n);
    if (tp.requires_grad(a)) mat(tp.grad_buffer(a), m, k).noalias() += G * cmat(tp.value(b));
    if (tp.requires_grad(b)) mat(tp.grad_buffer(b), n, k).noalias() += G.transpose() * cmat(tp.value(a));
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.numel() != bv.numel()) mismatch("add", "element counts differ");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const std::vector<double>& g) {
    for (Var v : {a, b}) {
      if (!tp.requires_grad(v)) continue;
      auto& ga = tp.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Var add_bias(Tape& t, Var a, Var bias) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(bias);
  const std::size_t r = av.rows(), c = av.cols();
  if (bv.numel() != c) mismatch("add_bias", "bias length differs from columns");
  Tensor out = av;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += bv[j];
  }
  return t.record(std::move(out), any_grad(t, {a, bias}), [a, bias, r, c](Tape& tp, const std::vector<double>& g) {
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bias)) {
      auto& gb = tp.grad_buffer(bias);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  Tensor out = t.value(a);
  for (double& v : out.data) v *= s;
  return t.record(std::move(out), t.requires_grad(a), [a, s](Tape& tp, const std::vector<double>& g) {
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Tape& t, Var a) {
  Tensor out = t.value(a);
  const auto n = static_cast<Eigen::Index>(out.numel());
  Eigen::Map<Eigen::ArrayXd> x(out.data.data(), n);
  // tanh(u) = 1 - 2 / (exp(2u) + 1), vectorized through exp
  Eigen::ArrayXd th = 1.0 - 2.0 / ((2.0 * kGeluC * (x + kGeluA * x.cube())).exp() + 1.0);
  std::vector<double> dgelu;
  if (t.requires_grad(a)) {
    Eigen::ArrayXd du = kGeluC * (1.0 + 3.0 * kGeluA * x.square());
    Eigen::ArrayXd dg = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * du;
    dgelu.assign(dg.data(), dg.data() + n);
  }
  x = 0.5 * x * (1.0 + th);
  return t.record(std::move(out), t.requires_grad(a), [a, dgelu = std::move(dgelu)](Tape& tp, const std::vector<double>& g) {
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dgelu[i];
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = t.value(x);
  const std::size_t r = xv.rows(), c = xv.cols();
  if (t.value(gamma).numel() != c || t.value(beta).numel() != c) mismatch("layer_norm", "gamma/beta length differs from columns");
  // xhat and 1/sigma are kept for the backward pass.
  std::vector<double> xhat(r * c), inv(r);
  Tensor out = matrix_tensor(r, c);
  const auto& gv = t.value(gamma).data;
  const auto& bv = t.value(beta).data;
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mean) * inv[i];
      out.data[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return t.record(std::move(out), any_grad(t, {x, gamma, beta}),
                  [x, gamma, beta, r, c, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, const std::vector<double>& g) {
                    const auto& gv = tp.value(gamma).data;
                    if (tp.requires_grad(gamma)) {
                      auto& gg = tp.grad_buffer(gamma);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                    if (tp.requires_grad(beta)) {
                      auto& gb = tp.grad_buffer(beta);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                    }
                    if (!tp.requires_grad(x)) return;
                    auto& gx = tp.grad_buffer(x);
                    const double cn = static_cast<double>(c);
                    for (std::size_t i = 0; i < r; ++i) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double dh = g[i * c + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[i * c + j];
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const double dh = g[i * c + j] * gv[j];
                        gx[i * c + j] += inv[i] * (dh - s1 / cn - xhat[i * c + j] * s2 / cn);
                      }
                    }
                  });
}

Var embedding(Tape& t, Var table, std::span<const int> ids) {
  const Tensor& tv = t.value(table);
  const std::size_t v = tv.rows(), c = tv.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor out = matrix_tensor(idx.size(), c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) fail(ErrorCategory::Domain, "embedding: id out of range");
    std::copy_n(tv.data.data() + idx[i] * c, c, out.data.data() + i * c);
  }
  return t.record(std::move(out), t.requires_grad(table), [table, c, idx = std::move(idx)](Tape& tp, const std::vector<double>& g) {
    auto& gt = tp.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += g[i * c + j];
    }
  });
}

Var softmax_rows(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out = matrix_tensor(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = av.data.data() + i * c;
    double* o = out.data.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  const Var y = t.next();
  return t.record(std::move(out), t.requires_grad(a), [a, y, r, c](Tape& tp, const std::vector<double>& g) {
    const auto& p = tp.value(y).data;
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a).data) s += v;
  return t.record(Tensor::scalar(s), t.requires_grad(a), [a](Tape& tp, const std::vector<double>& g) {
    auto& ga = tp.grad_buffer(a);
    for (double& v : ga) v += g[0];
  });
}

Var sum_squares(Tape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a).data) s += v * v;
  return t.record(Tensor::scalar(s), t.requires_grad(a), [a](Tape& tp, const std::vector<double>& g) {
    const auto& x = tp.value(a).data;
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * x[i] * g[0];
  });
}

double scaled_dot(const double* a, const double* b, std::size_t d, double s) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= d; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < d; ++i) s0 += a[i] * b[i];
  return s * ((s0 + s1) + (s2 + s3));
}

Var head_scores(Tape& t, Var q, Var k, const HeadLayout& L) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const std::size_t f = L.width();
  if (qv.rows() != L.batch * L.n || qv.cols() != f || kv.rows() != qv.rows() || kv.cols() != f)
    mismatch("head_scores", "q/k shape differs from layout");
  const double s = 1.0 / std::sqrt(static_cast<double>(L.d));
  Tensor out = matrix_tensor(L.score_rows(), L.n);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t h = 0; h < L.heads; ++h) {
      double* o = out.data.data() + (b * L.heads + h) * L.n * L.n;
      for (std::size_t i = 0; i < L.n; ++i) {
        const double* qi = qv.data.data() + (b * L.n + i) * f + h * L.d;
        for (std::size_t j = 0; j < L.n; ++j) o[i * L.n + j] = scaled_dot(qi, kv.data.data() + (b * L.n + j) * f + h * L.d, L.d, s);
      }
    }
  }
  return t.record(std::move(out), any_grad(t, {q, k}), [q, k, L, f, s](Tape& tp, const std::vector<double>& g) {
    const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k);
    const auto& qd = tp.value(q).data;
    const auto& kd = tp.value(k).data;
    double* gqd = gq ? tp.grad_buffer(q).data() : nullptr;
    double* gkd = gk ? tp.grad_buffer(k).data() : nullptr;
    for (std::size_t b = 0; b < L.batch; ++b) {
      for (std::size_t h = 0; h < L.heads; ++h) {
        const std::size_t off = b * L.n * f + h * L.d;
        CMapR G(g.data() + (b * L.heads + h) * L.n * L.n, L.n, L.n);
        if (gq) SMapR(gqd + off, L.n, L.d, Stride(f)).noalias() += s * (G * CSMapR(kd.data() + off, L.n, L.d, Stride(f)));
        if (gk) SMapR(gkd + off, L.n, L.d, Stride(f)).noalias() += s * (G.transpose() * CSMapR(qd.data() + off, L.n, L.d, Stride(f)));
      }
    }
  });
}

Var attend(Tape& t, Var probs, Var v, const HeadLayout& L) {
  const Tensor& pv = t.value(probs);
  const Tensor& vv = t.value(v);
  const std::size_t f = L.width();
  if (pv.rows() != L.score_rows() || pv.cols() != L.n) mismatch("attend", "probability shape differs from layout");
  if (vv.rows() != L.batch * L.n || vv.cols() != f) mismatch("attend", "value shape differs from layout");
  Tensor out = matrix_tensor(L.batch * L.n, f);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t h = 0; h < L.heads; ++h) {
      const std::size_t off = b * L.n * f + h * L.d;
      CMapR P(pv.data.data() + (b * L.heads + h) * L.n * L.n, L.n, L.n);
      SMapR(out.data.data() + off, L.n, L.d, Stride(f)).noalias() = P * CSMapR(vv.data.data() + off, L.n, L.d, Stride(f));
    }
  }
  return t.record(std::move(out), any_grad(t, {probs, v}), [probs, v, L, f](Tape& tp, const std::vector<double>& g) {
    const bool gp = tp.requires_grad(probs), gv = tp.requires_grad(v);
    const auto& pd = tp.value(probs).data;
    const auto& vd = tp.value(v).data;
    double* gpd = gp ? tp.grad_buffer(probs).data() : nullptr;
    double* gvd = gv ? tp.grad_buffer(v).data() : nullptr;
    for (std::size_t b = 0; b < L.batch; ++b) {
      for (std::size_t h = 0; h < L.heads; ++h) {
        const std::size_t off = b * L.n * f + h * L.d;
        const std::size_t poff = (b * L.heads + h) * L.n * L.n;
        CSMapR G(g.data() + off, L.n, L.d, Stride(f));
        if (gp) MapR(gpd + poff, L.n, L.n).noalias() += G * CSMapR(vd.data() + off, L.n, L.d, Stride(f)).transpose();
        if (gv) SMapR(gvd + off, L.n, L.d, Stride(f)).noalias() += CMapR(pd.data() + poff, L.n, L.n).transpose() * G;
      }
    }
  });
}

Var masked_cross_entropy(Tape& t, Var logits, std::span<const Target> targets) {
  const Tensor& lv = t.value(logits);
  const std::size_t r = lv.rows(), c = lv.cols();
  std::vector<Target> tg(targets.begin(), targets.end());
  // Softmax of each target row, kept for the backward pass.
  std::vector<double> probs(tg.size() * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < tg.size(); ++i) {
    if (tg[i].row >= r || tg[i].token < 0 || static_cast<std::size_t>(tg[i].token) >= c)
      fail(ErrorCategory::Domain, "masked_cross_entropy: target out of range");
    const double* row = lv.data.data() + tg[i].row * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = std::log(z) + mx;
    loss += lz - row[tg[i].token];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lz);
  }
  const double inv = tg.empty() ? 0.0 : 1.0 / static_cast<double>(tg.size());
  const bool needs_grad = t.requires_grad(logits) && !tg.empty();
  return t.record(Tensor::scalar(loss * inv), needs_grad,
                  [logits, c, inv, tg = std::move(tg), probs = std::move(probs)](Tape& tp, const std::vector<double>& g) {
                    auto& gl = tp.grad_buffer(logits);
                    for (std::size_t i = 0; i < tg.size(); ++i) {
                      double* row = gl.data() + tg[i].row * c;
                      for (std::size_t j = 0; j < c; ++j) row[j] += g[0] * inv * probs[i * c + j];
                      row[tg[i].token] -= g[0] * inv;
                    }
                  });
}

}  // namespace attnlr::nn::ops
