#pragma once

// Define-by-run reverse-mode tape over the dense kernels, plus the eager
// context that shares the same forward API. Model code is written once as a
// template over the context; tracing for training and plain inference then
// run the identical architecture.
//
// Values are computed eagerly while tracing; backward() walks the nodes in
// reverse creation order. Parameters are recognized by address through a
// ParameterStore: tensors registered there receive gradients, everything
// else is a constant.

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "spirdet/ops.hpp"
#include "spirdet/ortho.hpp"
#include "spirdet/param_store.hpp"

namespace spirdet {

template <std::floating_point S>
class Tape {
 public:
  using Scalar = S;
  struct Ref {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Tape(ParameterStore<S>* store = nullptr) : store_(store) {}

  bool training = true;        // batch-statistics BN when true
  bool update_running = true;  // fold batch stats into the running estimates
  S bn_momentum = S(0.1);

  // --- graph plumbing ---------------------------------------------------

  Ref input(Tensor<S> v) { return push(std::move(v), {}, nullptr, "input", false); }

  Ref param(Tensor<S>& t) {
    auto it = param_cache_.find(t.data.data());
    if (it != param_cache_.end()) return Ref{it->second};
    ParamEntry<S>* e = store_ ? store_->find(t.data.data()) : nullptr;
    Tensor<S> copy = t;
    Ref r = push(std::move(copy), {}, nullptr, "param", e != nullptr);
    nodes_[r.id].sink = e;
    param_cache_[t.data.data()] = r.id;
    return r;
  }

  // Per-channel vector parameter, carried as a (1, C, 1, 1) tensor node.
  Ref param_vec(VecX<S>& v) {
    auto it = param_cache_.find(v.data());
    if (it != param_cache_.end()) return Ref{it->second};
    ParamEntry<S>* e = store_ ? store_->find(v.data()) : nullptr;
    Tensor<S> t(1, static_cast<int>(v.size()), 1, 1);
    t.data = v;
    Ref r = push(std::move(t), {}, nullptr, "param", e != nullptr);
    nodes_[r.id].sink = e;
    param_cache_[v.data()] = r.id;
    return r;
  }

  const Tensor<S>& value(Ref r) const { return nodes_.at(r.id).val; }

  const Tensor<S>& grad(Ref r) const {
    const Node& n = nodes_.at(r.id);
    if (!n.has_grad) {
      static const Tensor<S> empty;
      return empty;
    }
    return n.grad;
  }

  // Node with parents but no adjoint: backward reaching it is an error.
  Ref opaque(Tensor<S> v, std::vector<Ref> parents, const char* op_name) {
    std::vector<int> p;
    for (Ref r : parents) p.push_back(r.id);
    Ref r = push(std::move(v), std::move(p), nullptr, op_name, true);
    nodes_[r.id].opaque = true;
    return r;
  }

  void backward(Ref loss) {
    Node& ln = nodes_.at(loss.id);
    if (ln.val.size() != 1) throw InvalidInput("backward: loss must be scalar");
    ln.grad = Tensor<S>::full(1, 1, 1, 1, S(1));
    ln.has_grad = true;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.needs_grad) continue;
      if (n.opaque) throw UnsupportedOp(n.op);
      if (n.back) n.back(*this, n);
      if (n.sink) n.sink->grad += n.grad.data;
    }
  }

  void clear() {
    nodes_.clear();
    param_cache_.clear();
  }

  size_t node_count() const { return nodes_.size(); }

  // --- ops ----------------------------------------------------------------

  Ref conv2d_op(Ref x, Ref w, Ref b, const ConvSpec& sp) {
    const Tensor<S>& xv = val(x);
    const Tensor<S>& wv = val(w);
    static const VecX<S> no_bias;
    const bool has_b = b.valid();
    Tensor<S> y = has_b ? spirdet::conv2d(xv, wv, vec_of(b), sp)
                        : spirdet::conv2d(xv, wv, no_bias, sp);
    std::vector<int> parents{x.id, w.id};
    if (has_b) parents.push_back(b.id);
    const auto xshape = xv.shape;
    const auto wshape = wv.shape;
    auto back = [x, w, b, sp, xshape, wshape, has_b](Tape& t, Node& n) {
      if (t.needs(x)) t.accum(x.id, conv2d_grad_input(n.grad, t.val(w), sp, xshape));
      if (t.needs(w)) t.accum(w.id, conv2d_grad_weights(t.val(x), n.grad, sp, wshape));
      if (has_b && t.needs(b)) {
        VecX<S> db = conv2d_grad_bias(n.grad);
        Tensor<S> dbt(1, static_cast<int>(db.size()), 1, 1);
        dbt.data = db;
        t.accum(b.id, std::move(dbt));
      }
    };
    const bool ng = any_needs(parents);
    return push(std::move(y), std::move(parents), back, "conv2d", ng);
  }

  // Model-facing conv: binds weight / bias parameters by address.
  Ref conv(Ref x, Tensor<S>& w, VecX<S>* bias, const ConvSpec& sp) {
    Ref wr = param(w);
    Ref br;
    if (bias && bias->size()) br = param_vec(*bias);
    return conv2d_op(x, wr, br, sp);
  }

  Ref bn(Ref x, BnParams<S>& p) {
    Ref g = param_vec(p.gamma);
    Ref b = param_vec(p.beta);
    const Tensor<S>& xv = val(x);
    check_bn(xv, p);
    if (!training) {
      Tensor<S> y = batch_norm_inference(xv, p);
      VecX<S> scale(p.channels());
      for (int c = 0; c < p.channels(); ++c)
        scale[c] = S(1) / std::sqrt(p.running_var[c] + p.eps);
      VecX<S> mean = p.running_mean;
      auto back = [x, g, b, scale, mean](Tape& t, Node& n) {
        const Tensor<S>& xin = t.val(x);
        const int C = xin.c();
        if (t.needs(x)) {
          Tensor<S> dx = xin.like_zeros();
          const Tensor<S>& gamma = t.val(g);
          for (int c = 0; c < C; ++c)
            for (int nn = 0; nn < xin.n(); ++nn)
              dx.plane_map(nn, c) = gamma.data[c] * scale[c] * n.grad.plane_map(nn, c);
          t.accum(x.id, std::move(dx));
        }
        if (t.needs(g) || t.needs(b)) {
          Tensor<S> dg(1, C, 1, 1), db(1, C, 1, 1);
          for (int c = 0; c < C; ++c) {
            S sg = 0, sb = 0;
            for (int nn = 0; nn < xin.n(); ++nn) {
              sg += (n.grad.plane_map(nn, c) * (xin.plane_map(nn, c) - mean[c]) * scale[c]).sum();
              sb += n.grad.plane_map(nn, c).sum();
            }
            dg.data[c] = sg;
            db.data[c] = sb;
          }
          if (t.needs(g)) t.accum(g.id, std::move(dg));
          if (t.needs(b)) t.accum(b.id, std::move(db));
        }
      };
      return push(std::move(y), {x.id, g.id, b.id}, back, "batch_norm(eval)", true);
    }
    auto stats = std::make_shared<BnBatchStats<S>>();
    Tensor<S> y = batch_norm_train(xv, p, bn_momentum, update_running, stats.get());
    VecX<S> gamma_now = p.gamma;
    S eps = p.eps;
    auto back = [x, g, b, stats, gamma_now, eps](Tape& t, Node& n) {
      const Tensor<S>& xin = t.val(x);
      BnParams<S> frozen;
      frozen.gamma = gamma_now;
      frozen.beta = VecX<S>::Zero(gamma_now.size());
      frozen.running_mean = stats->mean;
      frozen.running_var = stats->var;
      frozen.eps = eps;
      Tensor<S> dx;
      VecX<S> dgamma, dbeta;
      batch_norm_train_backward(xin, *stats, frozen, n.grad, dx, dgamma, dbeta);
      if (t.needs(x)) t.accum(x.id, std::move(dx));
      const int C = xin.c();
      if (t.needs(g)) {
        Tensor<S> dg(1, C, 1, 1);
        dg.data = dgamma;
        t.accum(g.id, std::move(dg));
      }
      if (t.needs(b)) {
        Tensor<S> db(1, C, 1, 1);
        db.data = dbeta;
        t.accum(b.id, std::move(db));
      }
    };
    return push(std::move(y), {x.id, g.id, b.id}, back, "batch_norm", true);
  }

  Ref relu(Ref x) {
    Tensor<S> y = activation(val(x), Act::relu);
    auto back = [x](Tape& t, Node& n) {
      if (t.needs(x)) t.accum(x.id, relu_backward(t.val(x), n.grad));
    };
    return push(std::move(y), {x.id}, back, "relu", needs(x));
  }

  Ref sigmoid(Ref x) {
    Tensor<S> y = activation(val(x), Act::sigmoid);
    auto back = [x](Tape& t, Node& n) {
      if (t.needs(x)) t.accum(x.id, sigmoid_backward(n.val, n.grad));
    };
    return push(std::move(y), {x.id}, back, "sigmoid", needs(x));
  }

  Ref add(Ref a, Ref b) {
    Tensor<S> y = spirdet::add(val(a), val(b));
    auto back = [a, b](Tape& t, Node& n) {
      if (t.needs(a)) t.accum(a.id, n.grad);
      if (t.needs(b)) t.accum(b.id, n.grad);
    };
    return push(std::move(y), {a.id, b.id}, back, "add", needs(a) || needs(b));
  }

  Ref concat(Ref a, Ref b) {
    const int ca = val(a).c();
    const int cb = val(b).c();
    Tensor<S> y = concat_channels(val(a), val(b));
    auto back = [a, b, ca, cb](Tape& t, Node& n) {
      if (t.needs(a)) t.accum(a.id, slice_channels(n.grad, 0, ca));
      if (t.needs(b)) t.accum(b.id, slice_channels(n.grad, ca, cb));
    };
    return push(std::move(y), {a.id, b.id}, back, "concat", needs(a) || needs(b));
  }

  Ref bilinear(Ref x, int factor) {
    const auto xshape = val(x).shape;
    Tensor<S> y = bilinear_upsample(val(x), factor);
    auto back = [x, factor, xshape](Tape& t, Node& n) {
      if (t.needs(x)) t.accum(x.id, bilinear_upsample_backward(n.grad, factor, xshape));
    };
    return push(std::move(y), {x.id}, back, "bilinear_upsample", needs(x));
  }

  Ref slice_batch_op(Ref x, int n_idx) {
    Tensor<S> y = spirdet::slice_batch(val(x), n_idx);
    const auto xshape = val(x).shape;
    auto back = [x, n_idx, xshape](Tape& t, Node& n) {
      if (!t.needs(x)) return;
      Tensor<S> dx(xshape[0], xshape[1], xshape[2], xshape[3]);
      const Eigen::Index sz = n.grad.size();
      dx.data.segment(static_cast<Eigen::Index>(n_idx) * sz, sz) = n.grad.data;
      t.accum(x.id, std::move(dx));
    };
    return push(std::move(y), {x.id}, back, "slice_batch", needs(x));
  }

  Ref stack_batch_op(const std::vector<Ref>& xs) {
    std::vector<const Tensor<S>*> vals;
    std::vector<int> parents;
    for (Ref r : xs) {
      vals.push_back(&val(r));
      parents.push_back(r.id);
    }
    Tensor<S> y = spirdet::stack_batch(vals);
    std::vector<Ref> refs = xs;
    auto back = [refs](Tape& t, Node& n) {
      for (size_t i = 0; i < refs.size(); ++i)
        if (t.needs(refs[i])) t.accum(refs[i].id, spirdet::slice_batch(n.grad, static_cast<int>(i)));
    };
    const bool ng = any_needs(parents);
    return push(std::move(y), std::move(parents), back, "stack_batch", ng);
  }

  // Orthogonality penalty over a set of same-shaped kernel parameters.
  Ref ortho_penalty_op(const std::vector<Ref>& kernels) {
    std::vector<const Tensor<S>*> kv;
    std::vector<int> parents;
    for (Ref r : kernels) {
      kv.push_back(&val(r));
      parents.push_back(r.id);
    }
    DownsampleBranchBank<S> bank{kv};
    MatX<S> f = concat_filters(bank);
    Tensor<S> y = Tensor<S>::full(1, 1, 1, 1, ortho_penalty(f));
    std::vector<Ref> refs = kernels;
    auto back = [refs](Tape& t, Node& n) {
      std::vector<const Tensor<S>*> kv2;
      for (Ref r : refs) kv2.push_back(&t.val(r));
      DownsampleBranchBank<S> bank2{kv2};
      MatX<S> grad = ortho_penalty_grad(concat_filters(bank2));
      grad *= n.grad.data[0];
      auto per_kernel = split_filter_grad(grad, bank2);
      for (size_t i = 0; i < refs.size(); ++i)
        if (t.needs(refs[i])) t.accum(refs[i].id, std::move(per_kernel[i]));
    };
    const bool ng = any_needs(parents);
    return push(std::move(y), std::move(parents), back, "ortho_penalty", ng);
  }

  // loss = 1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)
  Ref soft_iou_op(Ref pred, const Tensor<S>& target, S eps) {
    const Tensor<S>& p = val(pred);
    if (!p.same_shape(target)) throw InvalidInput("soft_iou: shape mismatch");
    const S inter = (p.data * target.data).sum();
    const S psum = p.data.sum();
    const S gsum = target.data.sum();
    const S uni = psum + gsum - inter;
    Tensor<S> y = Tensor<S>::full(1, 1, 1, 1, S(1) - (inter + eps) / (uni + eps));
    Tensor<S> tgt = target;
    auto back = [pred, tgt, inter, uni, eps](Tape& t, Node& n) {
      if (!t.needs(pred)) return;
      const Tensor<S>& p2 = t.val(pred);
      const S iu = inter + eps, uu = uni + eps;
      Tensor<S> dp = p2.like_zeros();
      // d/dp_i [ -(I+eps)/(U+eps) ] with dI = g_i, dU = 1 - g_i
      dp.data = -(tgt.data * uu - iu * (S(1) - tgt.data)) / (uu * uu);
      dp.data *= n.grad.data[0];
      t.accum(pred.id, std::move(dp));
    };
    return push(std::move(y), {pred.id}, back, "soft_iou", needs(pred));
  }

  // Generic extension point for ops defined outside this header.
  using BackFn = std::function<void(Tape&, const Tensor<S>& out_grad)>;
  Ref custom(Tensor<S> v, std::vector<Ref> parents, const char* op_name, BackFn back) {
    std::vector<int> p;
    for (Ref r : parents) p.push_back(r.id);
    auto wrapped = [back = std::move(back)](Tape& t, Node& n) { back(t, n.grad); };
    const bool ng = any_needs(p);
    return push(std::move(v), std::move(p), wrapped, op_name, ng);
  }

  void accum(int id, Tensor<S> g) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
    } else {
      if (!n.grad.same_shape(g)) throw InvalidInput("grad accumulation shape mismatch");
      n.grad.data += g.data;
    }
  }

  bool needs(Ref r) const { return nodes_.at(r.id).needs_grad; }
  const Tensor<S>& val(Ref r) const { return nodes_.at(r.id).val; }

 private:
  struct Node {
    Tensor<S> val;
    Tensor<S> grad;
    bool has_grad = false;
    bool needs_grad = false;
    bool opaque = false;
    std::function<void(Tape&, Node&)> back;
    std::vector<int> parents;
    const char* op = "";
    ParamEntry<S>* sink = nullptr;
  };

  bool any_needs(const std::vector<int>& parents) const {
    for (int p : parents)
      if (nodes_[p].needs_grad) return true;
    return false;
  }

  VecX<S> vec_of(Ref r) const {
    const Tensor<S>& t = val(r);
    return t.data;
  }

  Ref push(Tensor<S> v, std::vector<int> parents, std::function<void(Tape&, Node&)> back,
           const char* op, bool needs_grad) {
    Node n;
    n.val = std::move(v);
    n.parents = std::move(parents);
    n.back = std::move(back);
    n.op = op;
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Ref{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> param_cache_;
  ParameterStore<S>* store_ = nullptr;
};

// Plain-tensor context sharing the tracing API; BN always runs in inference
// mode here.
template <std::floating_point S>
struct EagerCtx {
  using Scalar = S;
  using Ref = Tensor<S>;

  Ref input(Tensor<S> v) { return v; }
  const Tensor<S>& value(const Ref& r) const { return r; }

  Ref conv(const Ref& x, Tensor<S>& w, VecX<S>* bias, const ConvSpec& sp) {
    static const VecX<S> no_bias;
    return spirdet::conv2d(x, w, bias ? *bias : no_bias, sp);
  }
  Ref bn(const Ref& x, BnParams<S>& p) { return batch_norm_inference(x, p); }
  Ref relu(const Ref& x) { return activation(x, Act::relu); }
  Ref sigmoid(const Ref& x) { return activation(x, Act::sigmoid); }
  Ref add(const Ref& a, const Ref& b) { return spirdet::add(a, b); }
  Ref concat(const Ref& a, const Ref& b) { return concat_channels(a, b); }
  Ref bilinear(const Ref& x, int factor) { return bilinear_upsample(x, factor); }
  Ref slice_batch_op(const Ref& x, int n) { return spirdet::slice_batch(x, n); }
  Ref stack_batch_op(const std::vector<Ref>& xs) {
    std::vector<const Tensor<S>*> ptrs;
    for (const Ref& r : xs) ptrs.push_back(&r);
    return spirdet::stack_batch(ptrs);
  }
};

}  // namespace spirdet
