#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <type_traits>
#include <mutex>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "framecast/params.hpp"
#include "framecast/tensor.hpp"

namespace framecast {

using NodeId = int;

/// Reverse-mode tape over Tensor<S>. One Graph instance is built per
/// forward pass (training sample or sampler step), then backward() runs a
/// single reverse sweep. Ops are free functions appending nodes; closures
/// capture node ids and whatever forward intermediates their VJP needs.
template <typename S>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // empty until something accumulates into it
    bool needs_grad = false;
    int param_index = -1;
    BackwardFn backward;
  };

  NodeId add(Tensor<S> value, bool needs_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor<S>(), needs_grad, -1,
                          needs_grad ? std::move(backward) : BackwardFn()});
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId constant(Tensor<S> value) { return add(std::move(value), false, {}); }

  /// Inference graphs treat parameters as constants: no backward closures
  /// are recorded and fused ops drop their backward buffers.
  void set_inference(bool on) { inference_ = on; }
  bool inference() const { return inference_; }

  /// Binds a parameter (gradient flows into add_param_grads). Repeated binds
  /// of the same parameter return the same node. Distinct Parameters trees
  /// may be bound in one graph; add_param_grads routes by (tree, index).
  NodeId param(const Parameters<S>& params, int index) {
    ParamKey key{&params, index};
    auto it = param_nodes_.find(key);
    if (it != param_nodes_.end()) return it->second;
    NodeId id = add(params[index], !inference_, {});
    nodes_[static_cast<size_t>(id)].param_index = index;
    param_nodes_.emplace(key, id);
    return id;
  }
  NodeId param(const Parameters<S>& params, const std::string& name) {
    return param(params, params.require(name));
  }

  const Tensor<S>& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor<S>& val(NodeId id) { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  /// Gradient buffer, allocated on first touch.
  Tensor<S>& grad_ref(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }
  bool has_grad(NodeId id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. root must be
  /// a scalar node.
  void backward(NodeId root) {
    if (val(root).size() != 1) throw std::invalid_argument("backward: root must be scalar");
    grad_ref(root)[0] = S(1);
    for (NodeId id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  /// Adds the gradients of parameters bound from `tree` into `out` (a
  /// structural clone of `tree`).
  void add_param_grads(const Parameters<S>& tree, Parameters<S>& out) {
    for (auto& [key, id] : param_nodes_) {
      if (key.tree != &tree) continue;
      const Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.grad.empty()) out[key.index].array() += n.grad.array();
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct ParamKey {
    const void* tree;
    int index;
    bool operator==(const ParamKey& o) const {
      return tree == o.tree && index == o.index;
    }
  };
  struct ParamKeyHash {
    size_t operator()(const ParamKey& k) const {
      return std::hash<const void*>()(k.tree) ^
             (std::hash<int>()(k.index) * 0x9E3779B97F4A7C15ull);
    }
  };

  std::vector<Node> nodes_;
  std::unordered_map<ParamKey, NodeId, ParamKeyHash> param_nodes_;
  bool inference_ = false;
};

namespace detail {

template <typename S>
void accum_flat(Graph<S>& g, NodeId id, const Tensor<S>& delta) {
  if (!g.needs_grad(id)) return;
  g.grad_ref(id).array() += delta.array();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / linear algebra ops
// ---------------------------------------------------------------------------

template <typename S>
NodeId add(Graph<S>& g, NodeId a, NodeId b) {
  assert(g.val(a).size() == g.val(b).size());
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = g.val(a).array() + g.val(b).array();
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(b),
               [a, b](Graph<S>& gr, NodeId self) {
                 const Tensor<S>& d = gr.grad_ref(self);
                 detail::accum_flat(gr, a, d);
                 detail::accum_flat(gr, b, d);
               });
}

template <typename S>
NodeId sub(Graph<S>& g, NodeId a, NodeId b) {
  assert(g.val(a).size() == g.val(b).size());
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = g.val(a).array() - g.val(b).array();
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(b),
               [a, b](Graph<S>& gr, NodeId self) {
                 const Tensor<S>& d = gr.grad_ref(self);
                 if (gr.needs_grad(a)) gr.grad_ref(a).array() += d.array();
                 if (gr.needs_grad(b)) gr.grad_ref(b).array() -= d.array();
               });
}

template <typename S>
NodeId mul(Graph<S>& g, NodeId a, NodeId b) {
  assert(g.val(a).size() == g.val(b).size());
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = g.val(a).array() * g.val(b).array();
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(b),
               [a, b](Graph<S>& gr, NodeId self) {
                 const Tensor<S>& d = gr.grad_ref(self);
                 if (gr.needs_grad(a)) gr.grad_ref(a).array() += d.array() * gr.val(b).array();
                 if (gr.needs_grad(b)) gr.grad_ref(b).array() += d.array() * gr.val(a).array();
               });
}

template <typename S>
NodeId scale(Graph<S>& g, NodeId a, S c) {
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = g.val(a).array() * c;
  return g.add(std::move(out), g.needs_grad(a), [a, c](Graph<S>& gr, NodeId self) {
    if (gr.needs_grad(a)) gr.grad_ref(a).array() += gr.grad_ref(self).array() * c;
  });
}

template <typename S>
NodeId add_scalar(Graph<S>& g, NodeId a, S c) {
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = g.val(a).array() + c;
  return g.add(std::move(out), g.needs_grad(a), [a](Graph<S>& gr, NodeId self) {
    detail::accum_flat(gr, a, gr.grad_ref(self));
  });
}

/// C = A(n,k) * B(k,m) on the 2-d row-major views.
template <typename S>
NodeId matmul(Graph<S>& g, NodeId a, NodeId b) {
  const Tensor<S>& av = g.val(a);
  const Tensor<S>& bv = g.val(b);
  Index k = bv.shape()[0];
  Index m = bv.size() / k;
  Index n = av.size() / k;
  assert(av.size() == n * k);
  Tensor<S> out = Tensor<S>::uninit({n, m});
  out.mat(n, m).noalias() = av.mat(n, k) * bv.mat(k, m);
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(b),
               [a, b, n, k, m](Graph<S>& gr, NodeId self) {
                 auto d = gr.grad_ref(self).mat(n, m);
                 if (gr.needs_grad(a))
                   gr.grad_ref(a).mat(n, k).noalias() += d * gr.val(b).mat(k, m).transpose();
                 if (gr.needs_grad(b))
                   gr.grad_ref(b).mat(k, m).noalias() += gr.val(a).mat(n, k).transpose() * d;
               });
}

/// Broadcasts a length-m row vector over every row of a (·, m).
template <typename S>
NodeId add_rowvec(Graph<S>& g, NodeId a, NodeId v) {
  Index m = g.val(v).size();
  Index n = g.val(a).size() / m;
  assert(g.val(a).size() == n * m);
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.mat(n, m) = g.val(a).mat(n, m).rowwise() + g.val(v).mat(1, m).row(0);
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(v),
               [a, v, n, m](Graph<S>& gr, NodeId self) {
                 auto d = gr.grad_ref(self).mat(n, m);
                 if (gr.needs_grad(a)) gr.grad_ref(a).mat(n, m) += d;
                 if (gr.needs_grad(v))
                   gr.grad_ref(v).mat(1, m).row(0) += d.colwise().sum();
               });
}

template <typename S>
NodeId mul_rowvec(Graph<S>& g, NodeId a, NodeId v) {
  Index m = g.val(v).size();
  Index n = g.val(a).size() / m;
  assert(g.val(a).size() == n * m);
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.mat(n, m) = g.val(a).mat(n, m).array().rowwise() *
                  g.val(v).mat(1, m).row(0).array();
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(v),
               [a, v, n, m](Graph<S>& gr, NodeId self) {
                 auto d = gr.grad_ref(self).mat(n, m);
                 if (gr.needs_grad(a))
                   gr.grad_ref(a).mat(n, m).array() +=
                       d.array().rowwise() * gr.val(v).mat(1, m).row(0).array();
                 if (gr.needs_grad(v))
                   gr.grad_ref(v).mat(1, m).array().row(0) +=
                       (d.array() * gr.val(a).mat(n, m).array()).colwise().sum();
               });
}

template <typename S>
NodeId gelu(Graph<S>& g, NodeId a) {
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  const Tensor<S>& x = g.val(a);
  for (Index i = 0; i < x.size(); ++i) {
    S xi = x[i];
    if constexpr (std::is_same_v<S, float>) {
      out[i] = 0.5f * xi * (1.0f + ::erff(xi * 0.70710677f));
    } else {
      out[i] = S(0.5) * xi * (S(1) + std::erf(xi * S(0.70710678118654752440)));
    }
  }
  return g.add(std::move(out), g.needs_grad(a), [a](Graph<S>& gr, NodeId self) {
    if (!gr.needs_grad(a)) return;
    const Tensor<S>& x = gr.val(a);
    const Tensor<S>& d = gr.grad_ref(self);
    Tensor<S>& da = gr.grad_ref(a);
    for (Index i = 0; i < x.size(); ++i) {
      S xi = x[i];
      if constexpr (std::is_same_v<S, float>) {
        float cdf = 0.5f * (1.0f + ::erff(xi * 0.70710677f));
        float pdf = 0.39894228f * ::expf(-0.5f * xi * xi);
        da[i] += d[i] * (cdf + xi * pdf);
      } else {
        S cdf = S(0.5) * (S(1) + std::erf(xi * S(0.70710678118654752440)));
        S pdf = S(0.39894228040143267794) * std::exp(S(-0.5) * xi * xi);
        da[i] += d[i] * (cdf + xi * pdf);
      }
    }
  });
}

template <typename S>
NodeId sigmoid_op(Graph<S>& g, NodeId a) {
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = S(1) / (S(1) + (-g.val(a).array()).exp());
  return g.add(std::move(out), g.needs_grad(a), [a](Graph<S>& gr, NodeId self) {
    if (!gr.needs_grad(a)) return;
    const auto& y = gr.val(self).array();
    gr.grad_ref(a).array() += gr.grad_ref(self).array() * y * (S(1) - y);
  });
}

template <typename S>
NodeId tanh_op(Graph<S>& g, NodeId a) {
  Tensor<S> out = Tensor<S>::uninit(g.val(a).shape());
  out.array() = g.val(a).array().tanh();
  return g.add(std::move(out), g.needs_grad(a), [a](Graph<S>& gr, NodeId self) {
    if (!gr.needs_grad(a)) return;
    const auto& y = gr.val(self).array();
    gr.grad_ref(a).array() += gr.grad_ref(self).array() * (S(1) - y * y);
  });
}

template <typename S>
NodeId sum(Graph<S>& g, NodeId a) {
  Tensor<S> out({1});
  out[0] = g.val(a).array().sum();
  return g.add(std::move(out), g.needs_grad(a), [a](Graph<S>& gr, NodeId self) {
    if (gr.needs_grad(a)) gr.grad_ref(a).array() += gr.grad_ref(self)[0];
  });
}

template <typename S>
NodeId sum_sq(Graph<S>& g, NodeId a) {
  Tensor<S> out({1});
  out[0] = (g.val(a).array() * g.val(a).array()).sum();
  return g.add(std::move(out), g.needs_grad(a), [a](Graph<S>& gr, NodeId self) {
    if (gr.needs_grad(a))
      gr.grad_ref(a).array() += S(2) * gr.grad_ref(self)[0] * gr.val(a).array();
  });
}

/// RMS normalization over the trailing dimension (no learned gain; compose
/// with mul_rowvec for gains or conditioning modulation).
template <typename S>
NodeId rms_norm(Graph<S>& g, NodeId a, S eps = S(1e-6)) {
  const Tensor<S>& x = g.val(a);
  Index m = x.last_dim();
  Index n = x.size() / m;
  Tensor<S> out = Tensor<S>::uninit(x.shape());
  auto inv_rms = std::make_shared<Tensor<S>>(Shape{n});
  auto xm = x.mat(n, m);
  for (Index r = 0; r < n; ++r) {
    S ms = xm.row(r).squaredNorm() / static_cast<S>(m);
    (*inv_rms)[r] = S(1) / std::sqrt(ms + eps);
    out.mat(n, m).row(r) = xm.row(r) * (*inv_rms)[r];
  }
  return g.add(std::move(out), g.needs_grad(a),
               [a, n, m, inv_rms](Graph<S>& gr, NodeId self) {
                 if (!gr.needs_grad(a)) return;
                 auto x = gr.val(a).mat(n, m);
                 auto d = gr.grad_ref(self).mat(n, m);
                 auto da = gr.grad_ref(a).mat(n, m);
                 for (Index r = 0; r < n; ++r) {
                   S ir = (*inv_rms)[r];
                   S dot = d.row(r).dot(x.row(r));
                   da.row(r) += d.row(r) * ir -
                                x.row(r) * (dot * ir * ir * ir / static_cast<S>(m));
                 }
               });
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

/// out[i] = in[map[i]], map entries of -1 emit zero. Backward scatter-adds.
template <typename S>
NodeId gather(Graph<S>& g, NodeId a, std::shared_ptr<const std::vector<Index>> map,
              Shape out_shape) {
  assert(shape_size(out_shape) == static_cast<Index>(map->size()));
  Tensor<S> out = Tensor<S>::uninit(std::move(out_shape));
  const Tensor<S>& x = g.val(a);
  const auto& idx = *map;
  for (size_t i = 0; i < idx.size(); ++i)
    out[static_cast<Index>(i)] = idx[i] >= 0 ? x[idx[i]] : S(0);
  return g.add(std::move(out), g.needs_grad(a), [a, map](Graph<S>& gr, NodeId self) {
    if (!gr.needs_grad(a)) return;
    const Tensor<S>& d = gr.grad_ref(self);
    Tensor<S>& da = gr.grad_ref(a);
    const auto& idx = *map;
    for (size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) da[idx[i]] += d[static_cast<Index>(i)];
  });
}

/// Contiguous slice of the flat buffer.
template <typename S>
NodeId slice_flat(Graph<S>& g, NodeId a, Index offset, Shape out_shape) {
  Index len = shape_size(out_shape);
  assert(offset >= 0 && offset + len <= g.val(a).size());
  Tensor<S> out = Tensor<S>::uninit(std::move(out_shape));
  out.array() = g.val(a).array().segment(offset, len);
  return g.add(std::move(out), g.needs_grad(a),
               [a, offset, len](Graph<S>& gr, NodeId self) {
                 if (gr.needs_grad(a))
                   gr.grad_ref(a).array().segment(offset, len) +=
                       gr.grad_ref(self).array();
               });
}

/// Column range [c0, c1) of the 2-d row-major view.
template <typename S>
NodeId slice_cols(Graph<S>& g, NodeId a, Index c0, Index c1) {
  Index m = g.val(a).last_dim();
  Index n = g.val(a).size() / m;
  assert(c0 >= 0 && c0 < c1 && c1 <= m);
  Tensor<S> out = Tensor<S>::uninit({n, c1 - c0});
  out.mat(n, c1 - c0) = g.val(a).mat(n, m).middleCols(c0, c1 - c0);
  return g.add(std::move(out), g.needs_grad(a),
               [a, c0, c1, n, m](Graph<S>& gr, NodeId self) {
                 if (gr.needs_grad(a))
                   gr.grad_ref(a).mat(n, m).middleCols(c0, c1 - c0) +=
                       gr.grad_ref(self).mat(n, c1 - c0);
               });
}

template <typename S>
NodeId concat_flat(Graph<S>& g, const std::vector<NodeId>& parts, Shape out_shape) {
  Index total = 0;
  for (NodeId p : parts) total += g.val(p).size();
  assert(total == shape_size(out_shape));
  Tensor<S> out = Tensor<S>::uninit(std::move(out_shape));
  bool any_grad = false;
  Index off = 0;
  for (NodeId p : parts) {
    out.array().segment(off, g.val(p).size()) = g.val(p).array();
    off += g.val(p).size();
    any_grad = any_grad || g.needs_grad(p);
  }
  auto ids = std::make_shared<std::vector<NodeId>>(parts);
  return g.add(std::move(out), any_grad, [ids](Graph<S>& gr, NodeId self) {
    const Tensor<S>& d = gr.grad_ref(self);
    Index off = 0;
    for (NodeId p : *ids) {
      Index len = gr.val(p).size();
      if (gr.needs_grad(p)) gr.grad_ref(p).array() += d.array().segment(off, len);
      off += len;
    }
  });
}

template <typename S>
NodeId concat_cols(Graph<S>& g, NodeId a, NodeId b) {
  Index ma = g.val(a).last_dim();
  Index mb = g.val(b).last_dim();
  Index n = g.val(a).size() / ma;
  assert(g.val(b).size() / mb == n);
  Tensor<S> out = Tensor<S>::uninit({n, ma + mb});
  out.mat(n, ma + mb).leftCols(ma) = g.val(a).mat(n, ma);
  out.mat(n, ma + mb).rightCols(mb) = g.val(b).mat(n, mb);
  return g.add(std::move(out), g.needs_grad(a) || g.needs_grad(b),
               [a, b, n, ma, mb](Graph<S>& gr, NodeId self) {
                 auto d = gr.grad_ref(self).mat(n, ma + mb);
                 if (gr.needs_grad(a)) gr.grad_ref(a).mat(n, ma) += d.leftCols(ma);
                 if (gr.needs_grad(b)) gr.grad_ref(b).mat(n, mb) += d.rightCols(mb);
               });
}

// ---------------------------------------------------------------------------
// attention / rotary / convolution
// ---------------------------------------------------------------------------

/// Rotates adjacent (even, odd) coordinate pairs of every head by per-token
/// angles given as elementwise cos/sin tables of shape (rows, head_dim).
/// Norm-preserving by construction.
template <typename S>
NodeId pair_rotate(Graph<S>& g, NodeId a,
                   std::shared_ptr<const Tensor<std::type_identity_t<S>>> cos_t,
                   std::shared_ptr<const Tensor<std::type_identity_t<S>>> sin_t,
                   int heads) {
  const Tensor<S>& x = g.val(a);
  Index w = x.last_dim();
  Index n = x.size() / w;
  Index hd = w / heads;
  assert(cos_t->size() == n * hd && sin_t->size() == n * hd);
  Tensor<S> out = Tensor<S>::uninit(x.shape());
  {
    const S* xp = x.data();
    S* op = out.data();
    const S* cp = cos_t->data();
    const S* sp = sin_t->data();
    for (Index r = 0; r < n; ++r) {
      const S* cr = cp + r * hd;
      const S* sr = sp + r * hd;
      for (int h = 0; h < heads; ++h) {
        const S* xh = xp + r * w + h * hd;
        S* oh = op + r * w + h * hd;
        for (Index j = 0; j < hd; j += 2) {
          S x0 = xh[j], x1 = xh[j + 1];
          oh[j] = x0 * cr[j] - x1 * sr[j];
          oh[j + 1] = x0 * sr[j] + x1 * cr[j];
        }
      }
    }
  }
  return g.add(std::move(out), g.needs_grad(a),
               [a, cos_t, sin_t, heads, n, w, hd](Graph<S>& gr, NodeId self) {
                 if (!gr.needs_grad(a)) return;
                 const S* dp = gr.grad_ref(self).data();
                 S* dap = gr.grad_ref(a).data();
                 const S* cp = cos_t->data();
                 const S* sp = sin_t->data();
                 for (Index r = 0; r < n; ++r) {
                   const S* cr = cp + r * hd;
                   const S* sr = sp + r * hd;
                   for (int h = 0; h < heads; ++h) {
                     const S* dh = dp + r * w + h * hd;
                     S* dah = dap + r * w + h * hd;
                     for (Index j = 0; j < hd; j += 2) {
                       S d0 = dh[j], d1 = dh[j + 1];
                       dah[j] += d0 * cr[j] + d1 * sr[j];
                       dah[j + 1] += d1 * cr[j] - d0 * sr[j];
                     }
                   }
                 }
               });
}

/// Scaled-dot-product attention over `groups` independent contiguous row
/// blocks (groups = frames for per-frame spatial attention, 1 for the
/// flattened spatio-temporal sequence). q may have a different row count
/// than k/v (cross-attention). `mask`, when present, is an additive
/// (q_rows_per_group, k_rows_per_group) score mask shared by all groups and
/// heads. Softmax probabilities are kept for the backward sweep.
template <typename S>
NodeId attention(Graph<S>& g, NodeId q, NodeId k, NodeId v, int heads, int groups,
                 std::shared_ptr<const Tensor<std::type_identity_t<S>>> mask = nullptr) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Tensor<S>& qv = g.val(q);
  Index w = qv.last_dim();
  Index nq_rows = qv.size() / w;
  Index nk_rows = g.val(k).size() / w;
  Index sq = nq_rows / groups;
  Index sk = nk_rows / groups;
  Index hd = w / heads;
  S att_scale = S(1) / std::sqrt(static_cast<S>(hd));
  assert(g.val(v).size() == nk_rows * w);
  assert(nq_rows == sq * groups && nk_rows == sk * groups);

  bool ng = g.needs_grad(q) || g.needs_grad(k) || g.needs_grad(v);
  auto probs = std::make_shared<std::vector<Mat>>();
  if (ng) probs->reserve(static_cast<size_t>(groups) * heads);
  Tensor<S> out = Tensor<S>::uninit({nq_rows, w});
  auto qm = qv.mat(nq_rows, w);
  auto km = g.val(k).mat(nk_rows, w);
  auto vm = g.val(v).mat(nk_rows, w);
  auto om = out.mat(nq_rows, w);
  for (int grp = 0; grp < groups; ++grp) {
    Index rq = static_cast<Index>(grp) * sq;
    Index rk = static_cast<Index>(grp) * sk;
    for (int h = 0; h < heads; ++h) {
      Index c0 = static_cast<Index>(h) * hd;
      Mat scores = qm.block(rq, c0, sq, hd) * km.block(rk, c0, sk, hd).transpose();
      scores *= att_scale;
      if (mask) scores += mask->mat(sq, sk);
      for (Index r = 0; r < sq; ++r) {
        S mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      om.block(rq, c0, sq, hd).noalias() = scores * vm.block(rk, c0, sk, hd);
      if (ng) probs->push_back(std::move(scores));
    }
  }
  return g.add(std::move(out), ng,
               [q, k, v, heads, groups, nq_rows, nk_rows, w, sq, sk, hd, att_scale,
                probs](Graph<S>& gr, NodeId self) {
                 auto d = gr.grad_ref(self).mat(nq_rows, w);
                 auto qm = gr.val(q).mat(nq_rows, w);
                 auto km = gr.val(k).mat(nk_rows, w);
                 auto vm = gr.val(v).mat(nk_rows, w);
                 bool nq = gr.needs_grad(q), nk = gr.needs_grad(k), nv = gr.needs_grad(v);
                 for (int grp = 0; grp < groups; ++grp) {
                   Index rq = static_cast<Index>(grp) * sq;
                   Index rk = static_cast<Index>(grp) * sk;
                   for (int h = 0; h < heads; ++h) {
                     Index c0 = static_cast<Index>(h) * hd;
                     const Mat& p = (*probs)[static_cast<size_t>(grp) * heads +
                                             static_cast<size_t>(h)];
                     auto dout = d.block(rq, c0, sq, hd);
                     if (nv)
                       gr.grad_ref(v).mat(nk_rows, w).block(rk, c0, sk, hd).noalias() +=
                           p.transpose() * dout;
                     if (nq || nk) {
                       Mat dp = dout * vm.block(rk, c0, sk, hd).transpose();
                       Mat ds(sq, sk);
                       for (Index r = 0; r < sq; ++r) {
                         S dot = dp.row(r).dot(p.row(r));
                         ds.row(r) =
                             (dp.row(r).array() - dot) * p.row(r).array() * att_scale;
                       }
                       if (nq)
                         gr.grad_ref(q).mat(nq_rows, w).block(rq, c0, sq, hd).noalias() +=
                             ds * km.block(rk, c0, sk, hd);
                       if (nk)
                         gr.grad_ref(k).mat(nk_rows, w).block(rk, c0, sk, hd).noalias() +=
                             ds.transpose() * qm.block(rq, c0, sq, hd);
                     }
                   }
                 }
               });
}

namespace detail {

struct ConvDims {
  Index batch, in_h, in_w, in_c, out_h, out_w, kernel, stride, pad;
  bool operator==(const ConvDims& o) const {
    return batch == o.batch && in_h == o.in_h && in_w == o.in_w && in_c == o.in_c &&
           out_h == o.out_h && out_w == o.out_w && kernel == o.kernel &&
           stride == o.stride && pad == o.pad;
  }
};

/// im2col source-index map, cached per geometry (the handful of conv shapes
/// in the motion extractor recur every training step).
inline std::shared_ptr<const std::vector<Index>> im2col_map(const ConvDims& d) {
  static std::mutex mu;
  static std::vector<std::pair<ConvDims, std::shared_ptr<const std::vector<Index>>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  for (auto& [key, map] : cache)
    if (key == d) return map;
  auto map = std::make_shared<std::vector<Index>>();
  map->reserve(static_cast<size_t>(d.batch * d.out_h * d.out_w * d.kernel * d.kernel * d.in_c));
  for (Index b = 0; b < d.batch; ++b)
    for (Index oy = 0; oy < d.out_h; ++oy)
      for (Index ox = 0; ox < d.out_w; ++ox)
        for (Index ky = 0; ky < d.kernel; ++ky)
          for (Index kx = 0; kx < d.kernel; ++kx) {
            Index iy = oy * d.stride + ky - d.pad;
            Index ix = ox * d.stride + kx - d.pad;
            bool in = iy >= 0 && iy < d.in_h && ix >= 0 && ix < d.in_w;
            for (Index c = 0; c < d.in_c; ++c)
              map->push_back(in ? ((b * d.in_h + iy) * d.in_w + ix) * d.in_c + c : -1);
          }
  cache.emplace_back(d, map);
  return cache.back().second;
}

}  // namespace detail

/// 2-d convolution on channel-last data: x holds (batch, H, W, C_in) values
/// (any tensor whose flat layout matches; pass the geometry explicitly when
/// the node's shape metadata is 2-d). weight is (kernel*kernel*C_in, C_out),
/// bias (C_out). Lowered to im2col + matmul so the backward pass reuses
/// existing op VJPs. Output rows are (batch, H', W') pixels, columns C_out.
template <typename S>
NodeId conv2d(Graph<S>& g, NodeId x, NodeId weight, NodeId bias, Index kernel,
              Index stride, Index pad, Shape input_dims = {}) {
  Shape xs = input_dims.empty() ? g.val(x).shape() : std::move(input_dims);
  assert(xs.size() == 4 && shape_size(xs) == g.val(x).size());
  detail::ConvDims dims{xs[0],
                        xs[1],
                        xs[2],
                        xs[3],
                        (xs[1] + 2 * pad - kernel) / stride + 1,
                        (xs[2] + 2 * pad - kernel) / stride + 1,
                        kernel,
                        stride,
                        pad};
  NodeId col = gather(g, x, detail::im2col_map(dims),
                      Shape{dims.batch * dims.out_h * dims.out_w,
                            kernel * kernel * dims.in_c});
  NodeId y = matmul(g, col, weight);
  return add_rowvec(g, y, bias);
}

// ---------------------------------------------------------------------------
// gradient checking (test support)
// ---------------------------------------------------------------------------

/// Central-difference gradient check of `loss(params)` against the analytic
/// gradient at selected parameter entries. Returns the worst relative error.
template <typename S, typename LossFn, typename GradFn>
double gradcheck_entries(Parameters<S>& params, const std::vector<std::pair<int, Index>>& entries,
                         LossFn loss, GradFn analytic_grad, double step) {
  double worst = 0;
  for (auto [pi, ei] : entries) {
    double g_analytic = analytic_grad(pi, ei);
    S saved = params[pi][ei];
    double h = step * std::max(1.0, std::abs(static_cast<double>(saved)));
    params[pi][ei] = saved + static_cast<S>(h);
    double lp = loss();
    params[pi][ei] = saved - static_cast<S>(h);
    double lm = loss();
    params[pi][ei] = saved;
    double g_fd = (lp - lm) / (2 * h);
    double denom = std::max({std::abs(g_analytic), std::abs(g_fd), 1e-8});
    worst = std::max(worst, std::abs(g_analytic - g_fd) / denom);
  }
  return worst;
}

}  // namespace framecast
