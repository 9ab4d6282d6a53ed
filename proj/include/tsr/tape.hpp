#pragma once

// Reverse-mode autodiff over the operator set the network needs. Forward
// runs eagerly; each op records a closure that scatters the output gradient
// into its inputs. One backward sweep visits recorded nodes in reverse
// execution order exactly once.

#include <functional>
#include <optional>
#include <vector>

#include "tsr/kernels.hpp"
#include "tsr/tensor.hpp"

namespace tsr {

using ValueId = int32_t;

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ValueId leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr);
  }

  ValueId conv2d(ValueId x, ValueId w, std::optional<ValueId> bias, int64_t stride,
                 int64_t pad) {
    const Tensor<T>* b = bias ? &value(*bias) : nullptr;
    Tensor<T> y = conv2d_fwd(value(x), value(w), b, stride, pad);
    bool rg = requires_grad(x) || requires_grad(w) || (bias && requires_grad(*bias));
    ValueId bid = bias ? *bias : -1;
    return push(std::move(y), rg, [x, w, bid, stride, pad](Tape& t, ValueId self) {
      const Tensor<T>& gy = t.node(self).grad;
      conv2d_bwd(t.value(x), t.value(w), stride, pad, gy,
                 t.requires_grad(x) ? &t.grad_buf(x) : nullptr,
                 t.requires_grad(w) ? &t.grad_buf(w) : nullptr,
                 (bid >= 0 && t.requires_grad(bid)) ? &t.grad_buf(bid) : nullptr);
    });
  }

  ValueId conv2d_transposed(ValueId x, ValueId w, std::optional<ValueId> bias, int64_t stride,
                            int64_t pad) {
    const Tensor<T>* b = bias ? &value(*bias) : nullptr;
    Tensor<T> y = deconv2d_fwd(value(x), value(w), b, stride, pad);
    bool rg = requires_grad(x) || requires_grad(w) || (bias && requires_grad(*bias));
    ValueId bid = bias ? *bias : -1;
    return push(std::move(y), rg, [x, w, bid, stride, pad](Tape& t, ValueId self) {
      const Tensor<T>& gy = t.node(self).grad;
      deconv2d_bwd(t.value(x), t.value(w), stride, pad, gy,
                   t.requires_grad(x) ? &t.grad_buf(x) : nullptr,
                   t.requires_grad(w) ? &t.grad_buf(w) : nullptr,
                   (bid >= 0 && t.requires_grad(bid)) ? &t.grad_buf(bid) : nullptr);
    });
  }

  ValueId space_to_depth(ValueId x, int64_t block) {
    Tensor<T> y = space_to_depth_fwd(value(x), block);
    return push(std::move(y), requires_grad(x), [x, block](Tape& t, ValueId self) {
      if (!t.requires_grad(x)) return;
      Tensor<T> gx = depth_to_space_fwd(t.node(self).grad, block);
      t.accumulate(x, gx);
    });
  }

  ValueId depth_to_space(ValueId x, int64_t block) {
    Tensor<T> y = depth_to_space_fwd(value(x), block);
    return push(std::move(y), requires_grad(x), [x, block](Tape& t, ValueId self) {
      if (!t.requires_grad(x)) return;
      Tensor<T> gx = space_to_depth_fwd(t.node(self).grad, block);
      t.accumulate(x, gx);
    });
  }

  ValueId add(ValueId a, ValueId b) { return eltwise(EltwiseOp::Add, a, b); }
  ValueId sub(ValueId a, ValueId b) { return eltwise(EltwiseOp::Sub, a, b); }
  ValueId mul(ValueId a, ValueId b) { return eltwise(EltwiseOp::Mul, a, b); }

  ValueId eltwise(EltwiseOp op, ValueId a, ValueId b) {
    Tensor<T> y = eltwise_fwd(op, value(a), value(b));
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(y), rg, [op, a, b](Tape& t, ValueId self) {
      const Tensor<T>& gy = t.node(self).grad;
      const int64_t n = gy.size();
      if (t.requires_grad(a)) {
        Tensor<T>& ga = t.grad_buf(a);
        if (op == EltwiseOp::Mul) {
          const Tensor<T>& bv = t.value(b);
          for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bv[i];
        } else {
          for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
      }
      if (t.requires_grad(b)) {
        Tensor<T>& gb = t.grad_buf(b);
        switch (op) {
          case EltwiseOp::Add:
            for (int64_t i = 0; i < n; ++i) gb[i] += gy[i];
            break;
          case EltwiseOp::Sub:
            for (int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
            break;
          case EltwiseOp::Mul: {
            const Tensor<T>& av = t.value(a);
            for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * av[i];
            break;
          }
        }
      }
    });
  }

  ValueId relu(ValueId x) {
    Tensor<T> y = relu_fwd(value(x));
    return push(std::move(y), requires_grad(x), [x](Tape& t, ValueId self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& gy = t.node(self).grad;
      const Tensor<T>& xv = t.value(x);
      Tensor<T>& gx = t.grad_buf(x);
      for (int64_t i = 0; i < gy.size(); ++i)
        if (xv[i] > T(0)) gx[i] += gy[i];
    });
  }

  ValueId prelu(ValueId x, ValueId slope) {
    Tensor<T> y = prelu_fwd(value(x), value(slope));
    bool rg = requires_grad(x) || requires_grad(slope);
    return push(std::move(y), rg, [x, slope](Tape& t, ValueId self) {
      const Tensor<T>& gy = t.node(self).grad;
      const Tensor<T>& xv = t.value(x);
      const T s = t.value(slope)[0];
      if (t.requires_grad(x)) {
        Tensor<T>& gx = t.grad_buf(x);
        for (int64_t i = 0; i < gy.size(); ++i) {
          if (xv[i] > T(0))
            gx[i] += gy[i];
          else if (xv[i] < T(0))
            gx[i] += s * gy[i];
        }
      }
      if (t.requires_grad(slope)) {
        double acc = 0;
        for (int64_t i = 0; i < gy.size(); ++i)
          if (xv[i] < T(0)) acc += static_cast<double>(gy[i]) * static_cast<double>(xv[i]);
        t.grad_buf(slope)[0] += static_cast<T>(acc);
      }
    });
  }

  ValueId concat_channels(const std::vector<ValueId>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: empty input list");
    const Tensor<T>& first = value(parts[0]);
    detail::require_rank4(first, "concat_channels input");
    int64_t B = first.dim(0), H = first.dim(2), W = first.dim(3), C = 0;
    bool rg = false;
    for (ValueId p : parts) {
      const Tensor<T>& t = value(p);
      detail::require_rank4(t, "concat_channels input");
      if (t.dim(0) != B || t.dim(2) != H || t.dim(3) != W) {
        throw ShapeError("concat_channels batch/spatial mismatch: " + shape_str(first.shape()) +
                         " vs " + shape_str(t.shape()));
      }
      C += t.dim(1);
      rg = rg || requires_grad(p);
    }
    Tensor<T> y({B, C, H, W});
    for (int64_t b = 0; b < B; ++b) {
      int64_t co = 0;
      for (ValueId p : parts) {
        const Tensor<T>& t = value(p);
        const int64_t pc = t.dim(1);
        std::copy_n(t.data() + b * pc * H * W, pc * H * W, y.data() + (b * C + co) * H * W);
        co += pc;
      }
    }
    return push(std::move(y), rg, [parts, B, C, H, W](Tape& t, ValueId self) {
      const Tensor<T>& gy = t.node(self).grad;
      int64_t co = 0;
      for (ValueId p : parts) {
        const int64_t pc = t.value(p).dim(1);
        if (t.requires_grad(p)) {
          Tensor<T>& gp = t.grad_buf(p);
          for (int64_t b = 0; b < B; ++b) {
            const T* src = gy.data() + (b * C + co) * H * W;
            T* dst = gp.data() + b * pc * H * W;
            for (int64_t i = 0; i < pc * H * W; ++i) dst[i] += src[i];
          }
        }
        co += pc;
      }
    });
  }

  ValueId mean_abs_error(ValueId pred, ValueId target) {
    T loss = mae_fwd(value(pred), value(target));
    bool rg = requires_grad(pred) || requires_grad(target);
    return push(Tensor<T>::scalar(loss), rg, [pred, target](Tape& t, ValueId self) {
      const T g = t.node(self).grad[0];
      const Tensor<T>& p = t.value(pred);
      const Tensor<T>& tv = t.value(target);
      const T inv_n = T(1) / static_cast<T>(p.size());
      auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
      if (t.requires_grad(pred)) {
        Tensor<T>& gp = t.grad_buf(pred);
        for (int64_t i = 0; i < p.size(); ++i) gp[i] += g * inv_n * sign(p[i] - tv[i]);
      }
      if (t.requires_grad(target)) {
        Tensor<T>& gt = t.grad_buf(target);
        for (int64_t i = 0; i < p.size(); ++i) gt[i] -= g * inv_n * sign(p[i] - tv[i]);
      }
    });
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse execution
  // order. With release_memory, interior values and gradients are dropped as
  // soon as they can no longer be needed; leaves keep both.
  void backward(ValueId loss, bool release_memory = false) {
    Node& ln = node(loss);
    if (ln.value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(ln.value.shape()));
    }
    if (!ln.requires_grad) return;  // loss is constant w.r.t. every parameter
    grad_buf(loss)[0] = T(1);
    for (ValueId id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.defined() && n.backprop) n.backprop(*this, id);
      if (release_memory && n.backprop) {
        n.grad.reset();
        n.value.reset();
      }
    }
  }

  const Tensor<T>& value(ValueId id) const { return node(id).value; }

  // Gradient of the last backward() w.r.t. this node; zeros if the node was
  // not reached. Throws for nodes that do not require gradients.
  const Tensor<T>& grad(ValueId id) {
    Node& n = node(id);
    if (!n.requires_grad) throw ShapeError("grad requested for a node that opted out");
    return grad_buf(id);
  }

  bool requires_grad(ValueId id) const { return node(id).requires_grad; }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&, ValueId)> backprop;  // null for leaves
  };

  Node& node(ValueId id) { return nodes_.at(id); }
  const Node& node(ValueId id) const { return nodes_.at(id); }

  Tensor<T>& grad_buf(ValueId id) {
    Node& n = node(id);
    if (!n.grad.defined()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(ValueId id, const Tensor<T>& g) {
    Tensor<T>& dst = grad_buf(id);
    for (int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  ValueId push(Tensor<T> v, bool requires_grad, std::function<void(Tape&, ValueId)> backprop) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<ValueId>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace tsr
