#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "haformer/ops.hpp"
#include "haformer/tensor.hpp"

namespace haformer::ad {

class Tape;

struct Node {
  Tensor value;
  Tensor grad;  // sized and zeroed at the start of every backward pass
  std::vector<Node*> inputs;
  std::function<void(Node&)> back;  // empty on leaves
  int id = 0;
  bool marked = false;  // reachability scratch for backward
};

inline void axpy(Tensor& dst, const Tensor& src) {
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

// Handle into a tape-owned node. Creation order is topological by construction.
class Var {
 public:
  Var() = default;
  Var(Tape* t, Node* n) : tape_(t), node_(n) {}
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  const Tensor& grad() const { return node_->grad; }
  Node* node() const { return node_; }
  Tape* tape() const { return tape_; }
  explicit operator bool() const { return node_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  Node* node_ = nullptr;
};

class Tape {
 public:
  Var leaf(Tensor v) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    n->value = std::move(v);
    n->id = static_cast<int>(nodes_.size()) - 1;
    return Var(this, n);
  }

  Var param(const std::string& name, Tensor v) {
    require(!registry_.count(name), "tape: parameter '" + name + "' registered twice");
    Var p = leaf(std::move(v));
    registry_[name] = p.node();
    order_.push_back(name);
    return p;
  }

  Var make(Tensor v, std::vector<Node*> inputs, std::function<void(Node&)> back) {
    Var out = leaf(std::move(v));
    out.node()->inputs = std::move(inputs);
    out.node()->back = std::move(back);
    return out;
  }

  // Reverse sweep from a scalar loss. Accumulators are zeroed up front, so
  // repeated calls produce identical gradients.
  std::map<std::string, Tensor> backward(const Var& loss) {
    require(loss.tape() == this, "tape: loss belongs to a different tape");
    require(loss.value().numel() == 1, "backward: loss must be scalar, got " +
                                           shape_str(loss.shape()));
    for (auto& n : nodes_) n->marked = false;
    std::vector<Node*> stack{loss.node()};
    loss.node()->marked = true;
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      for (Node* in : n->inputs)
        if (in && !in->marked) {
          in->marked = true;
          stack.push_back(in);
        }
    }
    for (auto& n : nodes_)
      if (n->marked) n->grad = Tensor(n->value.shape());
    loss.node()->grad = Tensor::full({1}, 1.0f);
    for (int i = loss.node()->id; i >= 0; --i) {
      Node* n = nodes_[static_cast<size_t>(i)].get();
      if (n->marked && n->back) n->back(*n);
    }
    std::map<std::string, Tensor> grads;
    for (const auto& name : order_) {
      Node* p = registry_.at(name);
      grads[name] = p->marked ? p->grad : Tensor(p->value.shape());
    }
    return grads;
  }

  const Tensor& grad_of(const std::string& name) const {
    auto it = registry_.find(name);
    require(it != registry_.end(), "tape: parameter '" + name + "' is not registered");
    return it->second->grad;
  }

  const Tensor& param_value(const std::string& name) const {
    auto it = registry_.find(name);
    require(it != registry_.end(), "tape: parameter '" + name + "' is not registered");
    return it->second->value;
  }

  const std::vector<std::string>& param_order() const { return order_; }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<std::string, Node*> registry_;
  std::vector<std::string> order_;
};

inline Tape& tape_of(const Var& a) {
  require(a.tape() != nullptr, "autodiff: unbound Var");
  return *a.tape();
}

inline void same_tape(const Var& a, const Var& b) {
  require(a.tape() == b.tape(), "autodiff: operands come from different tapes");
}

// ---- primitive recordings; forward math defers to the eager ops ----

inline Var conv2d(const Var& x, const Var& w, const Var* b, const ConvSpec& cs) {
  same_tape(x, w);
  if (b) same_tape(x, *b);
  Tensor y = haformer::conv2d(x.value(), w.value(), b ? &b->value() : nullptr, cs);
  Node* bn = b ? b->node() : nullptr;
  return tape_of(x).make(
      std::move(y), {x.node(), w.node(), bn}, [xn = x.node(), wn = w.node(), bn, cs](Node& self) {
        conv2d_backward(xn->value, wn->value, cs, self.grad, &xn->grad, &wn->grad,
                        bn ? &bn->grad : nullptr);
      });
}

inline Var conv2d(const Var& x, const Var& w, const Var& b, const ConvSpec& cs) {
  return conv2d(x, w, &b, cs);
}

inline Var conv2d(const Var& x, const Var& w, const ConvSpec& cs) {
  return conv2d(x, w, nullptr, cs);
}

inline Var matmul(const Var& a, const Var& b) {
  same_tape(a, b);
  Tensor y = haformer::matmul(a.value(), b.value());
  return tape_of(a).make(std::move(y), {a.node(), b.node()},
                         [an = a.node(), bn = b.node()](Node& self) {
                           const int m = an->value.dim(0), k = an->value.dim(1),
                                     n = bn->value.dim(1);
                           ConstMatMap<float> ga(self.grad.data(), m, n);
                           ConstMatMap<float> ma(an->value.data(), m, k);
                           ConstMatMap<float> mb(bn->value.data(), k, n);
                           MatMap<float>(an->grad.data(), m, k).noalias() += ga * mb.transpose();
                           MatMap<float>(bn->grad.data(), k, n).noalias() += ma.transpose() * ga;
                         });
}

inline Var transpose2d(const Var& a) {
  Tensor y = haformer::transpose2d(a.value());
  return tape_of(a).make(std::move(y), {a.node()}, [an = a.node()](Node& self) {
    axpy(an->grad, haformer::transpose2d(self.grad));
  });
}

inline Var softmax(const Var& x, int axis) {
  Tensor y = haformer::softmax(x.value(), axis);
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node(), axis](Node& self) {
    axpy(xn->grad, softmax_backward(self.value, self.grad, axis));
  });
}

inline Var relu(const Var& x) {
  Tensor y = haformer::relu(x.value());
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      if (xn->value[i] > 0.0f) xn->grad[i] += self.grad[i];
  });
}

inline Var sigmoid(const Var& x) {
  Tensor y = haformer::sigmoid(x.value());
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      const float s = self.value[i];
      xn->grad[i] += self.grad[i] * s * (1.0f - s);
    }
  });
}

inline Var gelu(const Var& x) {
  Tensor y = haformer::gelu(x.value());
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      xn->grad[i] += self.grad[i] * gelu_grad_scalar(xn->value[i]);
  });
}

inline Var prelu(const Var& x, const Var& slope) {
  same_tape(x, slope);
  Tensor y = haformer::prelu(x.value(), slope.value());
  return tape_of(x).make(std::move(y), {x.node(), slope.node()},
                         [xn = x.node(), sn = slope.node()](Node& self) {
                           const std::int64_t per = xn->value.numel() / xn->value.dim(0);
                           for (int c = 0; c < xn->value.dim(0); ++c) {
                             const float a = sn->value[c];
                             double sacc = 0;
                             for (std::int64_t i = c * per; i < (c + 1) * per; ++i) {
                               const float xv = xn->value[i];
                               xn->grad[i] += self.grad[i] * (xv > 0.0f ? 1.0f : a);
                               if (xv <= 0.0f) sacc += static_cast<double>(self.grad[i]) * xv;
                             }
                             sn->grad[c] += static_cast<float>(sacc);
                           }
                         });
}

inline Var add(const Var& a, const Var& b) {
  same_tape(a, b);
  Tensor y = haformer::add(a.value(), b.value());
  return tape_of(a).make(std::move(y), {a.node(), b.node()},
                         [an = a.node(), bn = b.node()](Node& self) {
                           axpy(an->grad, reduce_to_shape(self.grad, an->value.shape()));
                           axpy(bn->grad, reduce_to_shape(self.grad, bn->value.shape()));
                         });
}

inline Var mul(const Var& a, const Var& b) {
  same_tape(a, b);
  Tensor y = haformer::mul(a.value(), b.value());
  return tape_of(a).make(
      std::move(y), {a.node(), b.node()}, [an = a.node(), bn = b.node()](Node& self) {
        axpy(an->grad, reduce_to_shape(haformer::mul(self.grad, bn->value), an->value.shape()));
        axpy(bn->grad, reduce_to_shape(haformer::mul(self.grad, an->value), bn->value.shape()));
      });
}

inline Var global_avg_pool_spatial(const Var& x) {
  Tensor y = haformer::global_avg_pool_spatial(x.value());
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    const std::int64_t hw = static_cast<std::int64_t>(xn->value.dim(1)) * xn->value.dim(2);
    for (int c = 0; c < xn->value.dim(0); ++c) {
      const float g = self.grad[c] / static_cast<float>(hw);
      for (std::int64_t i = c * hw; i < (c + 1) * hw; ++i) xn->grad[i] += g;
    }
  });
}

inline Var channel_mean_map(const Var& x) {
  Tensor y = haformer::channel_mean_map(x.value());
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    const int c = xn->value.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(xn->value.dim(1)) * xn->value.dim(2);
    for (int ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < hw; ++i)
        xn->grad[ch * hw + i] += self.grad[i] / static_cast<float>(c);
  });
}

inline Var channel_shuffle(const Var& x, int groups) {
  Tensor y = haformer::channel_shuffle(x.value(), groups);
  const int inv = x.value().dim(0) / groups;
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node(), inv](Node& self) {
    axpy(xn->grad, haformer::channel_shuffle(self.grad, inv));
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = haformer::reshape(x.value(), std::move(shape));
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    axpy(xn->grad, haformer::reshape(self.grad, xn->value.shape()));
  });
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  require(!parts.empty(), "concat: needs at least one operand");
  std::vector<const Tensor*> vals;
  std::vector<Node*> nodes;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    vals.push_back(&p.value());
    nodes.push_back(p.node());
  }
  Tensor y = haformer::concat(vals, axis);
  auto back_nodes = nodes;
  return tape_of(parts[0]).make(std::move(y), std::move(nodes),
                                [back_nodes, axis](Node& self) {
    const Shape& os = self.value.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(os.size()); ++i) inner *= os[static_cast<size_t>(i)];
    const std::int64_t total = os[static_cast<size_t>(axis)] * inner;
    std::int64_t off = 0;
    for (Node* part : back_nodes) {
      const std::int64_t blk = part->value.dim(axis) * inner;
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < blk; ++i)
          part->grad[o * blk + i] += self.grad[o * total + off + i];
      off += blk;
    }
  });
}

inline Var concat(const Var& a, const Var& b, int axis) { return concat(std::vector<Var>{a, b}, axis); }

inline Var slice_cols(const Var& x, int c0, int c1) {
  Tensor y = haformer::slice_cols(x.value(), c0, c1);
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node(), c0, c1](Node& self) {
    const int d = xn->value.dim(1), w = c1 - c0;
    for (int i = 0; i < xn->value.dim(0); ++i)
      for (int j = 0; j < w; ++j)
        xn->grad[static_cast<std::int64_t>(i) * d + c0 + j] +=
            self.grad[static_cast<std::int64_t>(i) * w + j];
  });
}

inline Var patch_flatten(const Var& x, int p) {
  Tensor y = haformer::patch_flatten(x.value(), p);
  const int c = x.value().dim(0), gh = x.value().dim(1) / p, gw = x.value().dim(2) / p;
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node(), c, gh, gw, p](Node& self) {
    axpy(xn->grad, haformer::patch_unflatten(self.grad, c, gh, gw, p));
  });
}

inline Var patch_unflatten(const Var& t, int c, int gh, int gw, int p) {
  Tensor y = haformer::patch_unflatten(t.value(), c, gh, gw, p);
  return tape_of(t).make(std::move(y), {t.node()}, [tn = t.node(), p](Node& self) {
    axpy(tn->grad, haformer::patch_flatten(self.grad, p));
  });
}

inline Var bilinear_upsample(const Var& x, int ho, int wo) {
  Tensor y = haformer::bilinear_upsample(x.value(), ho, wo);
  const int h = x.value().dim(1), w = x.value().dim(2);
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node(), h, w](Node& self) {
    axpy(xn->grad, bilinear_upsample_backward(self.grad, h, w));
  });
}

inline Var scale(const Var& x, double alpha) {
  Tensor y = haformer::scale(x.value(), alpha);
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node(), alpha](Node& self) {
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      xn->grad[i] += self.grad[i] * static_cast<float>(alpha);
  });
}

inline Var sum_all(const Var& x) {
  Tensor y = haformer::sum_all(x.value());
  return tape_of(x).make(std::move(y), {x.node()}, [xn = x.node()](Node& self) {
    const float g = self.grad[0];
    for (std::int64_t i = 0; i < xn->grad.numel(); ++i) xn->grad[i] += g;
  });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  same_tape(x, gamma);
  same_tape(x, beta);
  Tensor y = haformer::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return tape_of(x).make(
      std::move(y), {x.node(), gamma.node(), beta.node()},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), eps](Node& self) {
        const int n = xn->value.dim(0), d = xn->value.dim(1);
        std::vector<float> xhat(static_cast<size_t>(d));
        for (int i = 0; i < n; ++i) {
          const float* row = xn->value.data() + static_cast<std::int64_t>(i) * d;
          const float* g = self.grad.data() + static_cast<std::int64_t>(i) * d;
          double mu = 0;
          for (int j = 0; j < d; ++j) mu += row[j];
          mu /= d;
          double var = 0;
          for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= d;
          const double inv = 1.0 / std::sqrt(var + eps);
          double m1 = 0, m2 = 0;
          for (int j = 0; j < d; ++j) {
            xhat[static_cast<size_t>(j)] = static_cast<float>((row[j] - mu) * inv);
            const double dxh = static_cast<double>(g[j]) * gn->value[j];
            m1 += dxh;
            m2 += dxh * xhat[static_cast<size_t>(j)];
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(g[j]) * gn->value[j];
            xn->grad[static_cast<std::int64_t>(i) * d + j] +=
                static_cast<float>(inv * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2));
            gn->grad[j] += g[j] * xhat[static_cast<size_t>(j)];
            bn->grad[j] += g[j];
          }
        }
      });
}

inline Var softmax_xent(const Var& logits, const Tensor& labels, int ignore = 255) {
  Tensor y = haformer::softmax_xent(logits.value(), labels, ignore);
  return tape_of(logits).make(std::move(y), {logits.node()},
                              [ln = logits.node(), labels, ignore](Node& self) {
                                axpy(ln->grad, softmax_xent_backward(ln->value, labels, ignore,
                                                                     self.grad[0]));
                              });
}

// ---- finite differences and the comparison metric ----

// Central differences with the evaluation promoted to 64-bit.
inline DTensor finite_diff_grad(const std::function<double(const DTensor&)>& f, const DTensor& x,
                                double eps = 1e-3) {
  DTensor g(x.shape());
  DTensor probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    probe[i] = v + eps;
    const double fp = f(probe);
    probe[i] = v - eps;
    const double fm = f(probe);
    probe[i] = v;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(a) + std::abs(b));
}

struct GradCheckReport {
  double max_rel_err = 0;
  bool pass = true;
  std::string worst;

  void fold(const std::string& name, double err, double tol) {
    if (err > max_rel_err) {
      max_rel_err = err;
      worst = name;
    }
    if (err > tol) pass = false;
  }
};

// Compares tape gradients against per-parameter finite differences. eval64
// re-evaluates the whole composite in double with one named tensor replaced.
// Reports instead of throwing, so callers can render failures.
inline GradCheckReport grad_check_params(
    const std::vector<std::pair<std::string, Tensor>>& params,
    const std::map<std::string, Tensor>& analytic,
    const std::function<double(const std::string&, const DTensor&)>& eval64, double tol,
    double eps = 1e-3) {
  GradCheckReport report;
  for (const auto& [name, value] : params) {
    auto it = analytic.find(name);
    if (it == analytic.end()) {
      report.pass = false;
      report.worst = name + " (missing analytic gradient)";
      report.max_rel_err = 1.0;
      continue;
    }
    const DTensor fd = finite_diff_grad(
        [&](const DTensor& p) { return eval64(name, p); }, value.cast<double>(), eps);
    for (std::int64_t i = 0; i < fd.numel(); ++i)
      report.fold(name + "[" + std::to_string(i) + "]",
                  rel_err(static_cast<double>(it->second[i]), fd[i]), tol);
  }
  return report;
}

}  // namespace haformer::ad
