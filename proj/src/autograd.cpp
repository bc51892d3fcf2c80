#include "codecse/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "codecse/error.hpp"

namespace codecse {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;
using Eigen::Index;

MapC view(const Tensor& t) {
  return MapC(t.data(), static_cast<Index>(t.rows()), static_cast<Index>(t.cols()));
}
Map view(Tensor& t) {
  return Map(t.data(), static_cast<Index>(t.rows()), static_cast<Index>(t.cols()));
}

void expect_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kShape,
          std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

Tensor scalar_tensor(double v) { return Tensor({1, 1}, v); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor grouped_softmax(const Tensor& logits, std::size_t group) {
  require(group > 0 && logits.cols() % group == 0, ErrorKind::kShape,
          "grouped_softmax: width " + std::to_string(logits.cols()) +
              " is not a multiple of " + std::to_string(group));
  Tensor out = logits;
  const std::size_t groups = out.size() / group;
  for (std::size_t g = 0; g < groups; ++g) {
    double* p = out.data() + g * group;
    const double mx = *std::max_element(p, p + group);
    double z = 0.0;
    for (std::size_t d = 0; d < group; ++d) z += (p[d] = std::exp(p[d] - mx));
    for (std::size_t d = 0; d < group; ++d) p[d] /= z;
  }
  return out;
}

Var Tape::push(Tensor value, bool requires_grad, BackFn back) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad && record_;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external ? *n.external : n.owned;
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(Var{id}).shape());
  return n.grad;
}

Var Tape::constant(Tensor value) { return push(std::move(value), false); }

Var Tape::leaf(Tensor value) { return push(std::move(value), true, [](Tape&) {}); }

Var Tape::param(ParamId id) {
  require(params_ != nullptr && id < params_->size(), ErrorKind::kState,
          "tape has no parameter " + std::to_string(id));
  const Parameter& p = (*params_)[id];
  Node n;
  n.external = &p.value;
  n.requires_grad = p.trainable && record_;
  n.param = n.requires_grad ? static_cast<std::ptrdiff_t>(id) : -1;
  if (n.requires_grad) n.back = [](Tape&) {};
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::matmul(Var x, Var w) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  require(xv.cols() == wv.rows(), ErrorKind::kShape,
          "matmul: input " + shape_string(xv.shape()) + " vs weights " +
              shape_string(wv.shape()));
  Tensor out = Tensor::matrix(xv.rows(), wv.cols());
  view(out).noalias() = view(xv) * view(wv);
  const bool needs = rg(x) || rg(w);
  Var self = push(std::move(out), needs);
  if (needs) {
    nodes_[self.id].back = [x, w, self](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      if (t.rg(x)) view(t.grad_ref(x.id)).noalias() += view(g) * view(t.value(w)).transpose();
      if (t.rg(w)) view(t.grad_ref(w.id)).noalias() += view(t.value(x)).transpose() * view(g);
    };
  }
  return self;
}

Var Tape::affine(Var x, Var w, Var b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  require(xv.cols() == wv.rows(), ErrorKind::kShape,
          "affine: input " + shape_string(xv.shape()) + " vs weights " +
              shape_string(wv.shape()));
  require(bv.size() == wv.cols(), ErrorKind::kShape,
          "affine: bias " + shape_string(bv.shape()) + " vs weights " +
              shape_string(wv.shape()));
  Tensor out = Tensor::matrix(xv.rows(), wv.cols());
  auto o = view(out);
  o.noalias() = view(xv) * view(wv);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), static_cast<Index>(bv.size()));
  const bool needs = rg(x) || rg(w) || rg(b);
  Var self = push(std::move(out), needs);
  if (needs) {
    nodes_[self.id].back = [x, w, b, self](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      if (t.rg(x)) view(t.grad_ref(x.id)).noalias() += view(g) * view(t.value(w)).transpose();
      if (t.rg(w)) view(t.grad_ref(w.id)).noalias() += view(t.value(x)).transpose() * view(g);
      if (t.rg(b)) {
        Tensor& gb = t.grad_ref(b.id);
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Index>(gb.size())) +=
            view(g).colwise().sum();
      }
    };
  }
  return self;
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  expect_same(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool needs = rg(a) || rg(b);
  Var self = push(std::move(out), needs);
  if (needs) {
    nodes_[self.id].back = [a, b, self](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      for (Var v : {a, b}) {
        if (!t.rg(v)) continue;
        Tensor& gv = t.grad_ref(v.id);
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      }
    };
  }
  return self;
}

Var Tape::scale(Var a, double factor) {
  Tensor out = value(a);
  for (auto& v : out.values()) v *= factor;
  Var self = push(std::move(out), rg(a));
  if (rg(a)) {
    nodes_[self.id].back = [a, self, factor](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      Tensor& ga = t.grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    };
  }
  return self;
}

Var Tape::add_rows(Var x, Var table, std::size_t offset) {
  const Tensor& xv = value(x);
  const Tensor& tv = value(table);
  require(xv.cols() == tv.cols() && offset + xv.rows() <= tv.rows(), ErrorKind::kShape,
          "add_rows: input " + shape_string(xv.shape()) + " at offset " +
              std::to_string(offset) + " vs table " + shape_string(tv.shape()));
  Tensor out = xv;
  const std::size_t span = xv.size();
  const double* src = tv.data() + offset * tv.cols();
  for (std::size_t i = 0; i < span; ++i) out[i] += src[i];
  const bool needs = rg(x) || rg(table);
  Var self = push(std::move(out), needs);
  if (needs) {
    nodes_[self.id].back = [x, table, self, offset](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      if (t.rg(x)) {
        Tensor& gx = t.grad_ref(x.id);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (t.rg(table)) {
        Tensor& gt = t.grad_ref(table.id);
        double* dst = gt.data() + offset * gt.cols();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    };
  }
  return self;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  const std::size_t n = xv.rows();
  const std::size_t h = xv.cols();
  require(gv.size() == h && bv.size() == h, ErrorKind::kShape,
          "layer_norm: gain/bias width does not match input " + shape_string(xv.shape()));
  Tensor normed = Tensor::matrix(n, h);
  std::vector<double> rstd(n);
  Tensor out = Tensor::matrix(n, h);
  for (std::size_t r = 0; r < n; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < h; ++c) {
      normed(r, c) = (in[c] - mean) * rstd[r];
      out(r, c) = normed(r, c) * gv[c] + bv[c];
    }
  }
  const bool needs = rg(x) || rg(gamma) || rg(beta);
  Var self = push(std::move(out), needs);
  if (needs) {
    nodes_[self.id].back = [x, gamma, beta, self, normed = std::move(normed),
                            rstd = std::move(rstd)](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      const Tensor& gv = t.value(gamma);
      const std::size_t n = g.rows();
      const std::size_t h = g.cols();
      if (t.rg(gamma) || t.rg(beta)) {
        Tensor* gg = t.rg(gamma) ? &t.grad_ref(gamma.id) : nullptr;
        Tensor* gb = t.rg(beta) ? &t.grad_ref(beta.id) : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < h; ++c) {
            if (gg) (*gg)[c] += g(r, c) * normed(r, c);
            if (gb) (*gb)[c] += g(r, c);
          }
        }
      }
      if (t.rg(x)) {
        Tensor& gx = t.grad_ref(x.id);
        std::vector<double> dn(h);
        for (std::size_t r = 0; r < n; ++r) {
          double mean_dn = 0.0;
          double mean_dn_x = 0.0;
          for (std::size_t c = 0; c < h; ++c) {
            dn[c] = g(r, c) * gv[c];
            mean_dn += dn[c];
            mean_dn_x += dn[c] * normed(r, c);
          }
          mean_dn /= static_cast<double>(h);
          mean_dn_x /= static_cast<double>(h);
          for (std::size_t c = 0; c < h; ++c) {
            gx(r, c) += rstd[r] * (dn[c] - mean_dn - normed(r, c) * mean_dn_x);
          }
        }
      }
    };
  }
  return self;
}

Var Tape::gelu(Var x) {
  Tensor out = value(x);
  for (auto& v : out.values()) {
    const double u = kGeluC * (v + 0.044715 * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  Var self = push(std::move(out), rg(x));
  if (rg(x)) {
    nodes_[self.id].back = [x, self](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      const Tensor& xv = t.value(x);
      Tensor& gx = t.grad_ref(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double th = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
      }
    };
  }
  return self;
}

Var Tape::self_attention(Var qkv, std::size_t num_heads) {
  const Tensor& in = value(qkv);
  require(in.cols() % 3 == 0, ErrorKind::kShape,
          "self_attention: packed width " + std::to_string(in.cols()) + " not divisible by 3");
  const std::size_t n = in.rows();
  const std::size_t h = in.cols() / 3;
  require(num_heads > 0 && h % num_heads == 0, ErrorKind::kConfig,
          "self_attention: " + std::to_string(num_heads) + " heads do not divide width " +
              std::to_string(h));
  const std::size_t dh = h / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto ni = static_cast<Index>(n);
  const auto dhi = static_cast<Index>(dh);
  const auto stride = Eigen::OuterStride<>(static_cast<Index>(3 * h));
  using Block = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

  Tensor out = Tensor::matrix(n, h);
  std::vector<RowMatrix> probs(num_heads);
  for (std::size_t hd = 0; hd < num_heads; ++hd) {
    Block q(in.data() + hd * dh, ni, dhi, stride);
    Block k(in.data() + h + hd * dh, ni, dhi, stride);
    Block v(in.data() + 2 * h + hd * dh, ni, dhi, stride);
    RowMatrix s = (q * k.transpose()) * inv_sqrt;
    for (Index r = 0; r < ni; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>> o(
        out.data() + hd * dh, ni, dhi, Eigen::OuterStride<>(static_cast<Index>(h)));
    o.noalias() = s * v;
    probs[hd] = std::move(s);
  }
  Var self = push(std::move(out), rg(qkv));
  if (rg(qkv)) {
    nodes_[self.id].back = [qkv, self, num_heads, h, dh, inv_sqrt,
                            probs = std::move(probs)](Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      const Tensor& in = t.value(qkv);
      Tensor& gin = t.grad_ref(qkv.id);
      const auto ni = static_cast<Index>(g.rows());
      const auto dhi = static_cast<Index>(dh);
      const auto stride = Eigen::OuterStride<>(static_cast<Index>(3 * h));
      using Block = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
      using MutBlock = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
      for (std::size_t hd = 0; hd < num_heads; ++hd) {
        Block q(in.data() + hd * dh, ni, dhi, stride);
        Block k(in.data() + h + hd * dh, ni, dhi, stride);
        Block v(in.data() + 2 * h + hd * dh, ni, dhi, stride);
        Block go(g.data() + hd * dh, ni, dhi, Eigen::OuterStride<>(static_cast<Index>(h)));
        const RowMatrix& a = probs[hd];
        MutBlock gq(gin.data() + hd * dh, ni, dhi, stride);
        MutBlock gk(gin.data() + h + hd * dh, ni, dhi, stride);
        MutBlock gv(gin.data() + 2 * h + hd * dh, ni, dhi, stride);
        RowMatrix ga = go * v.transpose();
        gv.noalias() += a.transpose() * go;
        RowMatrix gs = a.cwiseProduct(ga);
        const Eigen::VectorXd row_dot = gs.rowwise().sum();
        gs -= a.cwiseProduct(row_dot.replicate(1, ni));
        gs *= inv_sqrt;
        gq.noalias() += gs * k;
        gk.noalias() += gs.transpose() * q;
      }
    };
  }
  return self;
}

Var Tape::embedding(Var table, std::span<const int> indices) {
  const Tensor& tv = value(table);
  const std::size_t h = tv.cols();
  Tensor out = Tensor::matrix(indices.size(), h);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    require(idx >= 0 && static_cast<std::size_t>(idx) < tv.rows(), ErrorKind::kDomain,
            "embedding: token " + std::to_string(idx) + " out of vocabulary of size " +
                std::to_string(tv.rows()));
    std::copy_n(tv.data() + static_cast<std::size_t>(idx) * h, h, out.data() + i * h);
  }
  Var self = push(std::move(out), rg(table));
  if (rg(table)) {
    nodes_[self.id].back = [table, self, idx = std::vector<int>(indices.begin(), indices.end())](
                               Tape& t) {
      const Tensor& g = t.nodes_[self.id].grad;
      Tensor& gt = t.grad_ref(table.id);
      const std::size_t h = g.cols();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = gt.data() + static_cast<std::size_t>(idx[i]) * h;
        const double* src = g.data() + i * h;
        for (std::size_t c = 0; c < h; ++c) dst[c] += src[c];
      }
    };
  }
  return self;
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  Var self = push(scalar_tensor(s), rg(a));
  if (rg(a)) {
    nodes_[self.id].back = [a, self](Tape& t) {
      const double g = t.nodes_[self.id].grad[0];
      for (auto& v : t.grad_ref(a.id).values()) v += g;
    };
  }
  return self;
}

Var Tape::add_scalars(std::span<const Var> terms) {
  double s = 0.0;
  bool needs = false;
  for (Var v : terms) {
    require(value(v).size() == 1, ErrorKind::kShape, "add_scalars: non-scalar term");
    s += value(v)[0];
    needs = needs || rg(v);
  }
  Var self = push(scalar_tensor(s), needs);
  if (needs) {
    nodes_[self.id].back = [self, terms = std::vector<Var>(terms.begin(), terms.end())](Tape& t) {
      const double g = t.nodes_[self.id].grad[0];
      for (Var v : terms) {
        if (t.rg(v)) t.grad_ref(v.id)[0] += g;
      }
    };
  }
  return self;
}

Var Tape::masked_cross_entropy(Var logits, const TokenGrid& targets, const MaskGrid& mask,
                               std::size_t codebook_size) {
  const Tensor& lv = value(logits);
  const std::size_t rows = targets.rows();
  const std::size_t groups = targets.cols();
  require(lv.rows() == rows && lv.cols() == groups * codebook_size, ErrorKind::kShape,
          "masked_cross_entropy: logits " + shape_string(lv.shape()) + " vs targets " +
              grid_shape(rows, groups) + " with codebook size " + std::to_string(codebook_size));
  require(mask.same_shape(targets), ErrorKind::kShape,
          "masked_cross_entropy: mask " + grid_shape(mask.rows(), mask.cols()) +
              " vs targets " + grid_shape(rows, groups));
  Tensor probs = grouped_softmax(lv, codebook_size);
  const std::size_t count = popcount(mask);
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    const int target = targets[i];
    require(target >= 0 && static_cast<std::size_t>(target) < codebook_size, ErrorKind::kDomain,
            "masked_cross_entropy: target " + std::to_string(target) + " is not a codeword");
    loss -= std::log(std::max(probs[i * codebook_size + static_cast<std::size_t>(target)],
                              1e-300));
  }
  if (count > 0) loss /= static_cast<double>(count);
  Var self = push(scalar_tensor(loss), rg(logits));
  if (rg(logits) && count > 0) {
    nodes_[self.id].back = [logits, self, targets, mask, codebook_size, count,
                            probs = std::move(probs)](Tape& t) {
      const double g = t.nodes_[self.id].grad[0] / static_cast<double>(count);
      Tensor& gl = t.grad_ref(logits.id);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        if (!mask[i]) continue;
        const std::size_t base = i * codebook_size;
        for (std::size_t d = 0; d < codebook_size; ++d) gl[base + d] += g * probs[base + d];
        gl[base + static_cast<std::size_t>(targets[i])] -= g;
      }
    };
  }
  return self;
}

Var Tape::bce_with_logits(Var logits, const MaskGrid& targets, const MaskGrid& include) {
  const Tensor& lv = value(logits);
  require(lv.size() == targets.size() && lv.rows() == targets.rows(), ErrorKind::kShape,
          "bce_with_logits: logits " + shape_string(lv.shape()) + " vs targets " +
              grid_shape(targets.rows(), targets.cols()));
  const bool all = include.size() == 0;
  require(all || include.same_shape(targets), ErrorKind::kShape,
          "bce_with_logits: include mask shape mismatch");
  std::size_t count = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (!all && !include[i]) continue;
    const double z = lv[i];
    const double y = targets[i] ? 1.0 : 0.0;
    // softplus(z) - y z, evaluated stably
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    ++count;
  }
  if (count > 0) loss /= static_cast<double>(count);
  Var self = push(scalar_tensor(loss), rg(logits));
  if (rg(logits) && count > 0) {
    nodes_[self.id].back = [logits, self, targets, include, all, count](Tape& t) {
      const double g = t.nodes_[self.id].grad[0] / static_cast<double>(count);
      const Tensor& lv = t.value(logits);
      Tensor& gl = t.grad_ref(logits.id);
      for (std::size_t i = 0; i < lv.size(); ++i) {
        if (!all && !include[i]) continue;
        gl[i] += g * (sigmoid(lv[i]) - (targets[i] ? 1.0 : 0.0));
      }
    };
  }
  return self;
}

Var Tape::mae(Var estimate, const Tensor& target) {
  const Tensor& ev = value(estimate);
  expect_same(ev, target, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < ev.size(); ++i) s += std::abs(ev[i] - target[i]);
  const double n = static_cast<double>(std::max<std::size_t>(ev.size(), 1));
  Var self = push(scalar_tensor(s / n), rg(estimate));
  if (rg(estimate)) {
    nodes_[self.id].back = [estimate, self, target, n](Tape& t) {
      const double g = t.nodes_[self.id].grad[0] / n;
      const Tensor& ev = t.value(estimate);
      Tensor& ge = t.grad_ref(estimate.id);
      for (std::size_t i = 0; i < ev.size(); ++i) {
        const double d = ev[i] - target[i];
        ge[i] += g * static_cast<double>((d > 0) - (d < 0));
      }
    };
  }
  return self;
}

void Tape::backward(Var loss, GradientSet* param_grads) {
  require(value(loss).size() == 1, ErrorKind::kShape, "backward: loss must be a scalar");
  require(std::isfinite(value(loss)[0]), ErrorKind::kNumeric, "backward: non-finite loss");
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id].requires_grad) return;
  grad_ref(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this);
    if (n.param >= 0 && param_grads != nullptr) {
      Tensor& dst = (*param_grads)[static_cast<std::size_t>(n.param)];
      require(dst.size() == n.grad.size(), ErrorKind::kShape,
              "backward: gradient buffer shape mismatch for parameter " + std::to_string(n.param));
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }
}

}  // namespace codecse
