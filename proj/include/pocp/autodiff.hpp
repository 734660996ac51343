/*
 Copyright 2026 The pocp authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pocp/tensor.hpp"

namespace pocp {

// Reverse-mode autodiff over Tensor values. Values are computed eagerly at
// node construction; the backward pass builds *new nodes* rather than plain
// tensors, so gradients are themselves differentiable. Second-order
// quantities (gradient-through-gradient for meta-training) therefore need
// only the first-derivative rule of each primitive.

class Node;
using VjpFn = std::function<std::vector<Node>(const std::vector<Node>& parents, const Node& self,
                                              const Node& gout)>;

namespace detail {
inline std::atomic<std::uint64_t> node_counter{0};

struct NodeData {
    Tensor value;
    std::vector<Node> parents;
    VjpFn vjp;  // empty for leaves and constants
    std::uint64_t idx = 0;
    bool requires_grad = false;
};
}  // namespace detail

class Node {
public:
    Node() = default;
    explicit Node(std::shared_ptr<detail::NodeData> d) : d_(std::move(d)) {}

    static Node constant(Tensor v) {
        auto d = std::make_shared<detail::NodeData>();
        d->value = std::move(v);
        d->idx = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
        return Node(std::move(d));
    }

    /// A differentiable leaf (trainable parameter or graph input).
    static Node leaf(Tensor v) {
        Node n = constant(std::move(v));
        n.d_->requires_grad = true;
        return n;
    }

    const Tensor& value() const { return d_->value; }
    bool requires_grad() const { return d_ && d_->requires_grad; }
    bool valid() const { return static_cast<bool>(d_); }
    detail::NodeData* raw() const { return d_.get(); }
    std::uint64_t idx() const { return d_->idx; }
    int rows() const { return d_->value.rows(); }
    int cols() const { return d_->value.cols(); }

    friend Node make_op(Tensor value, std::vector<Node> parents, VjpFn vjp);

private:
    std::shared_ptr<detail::NodeData> d_;
};

inline Node make_op(Tensor value, std::vector<Node> parents, VjpFn vjp) {
    auto d = std::make_shared<detail::NodeData>();
    d->value = std::move(value);
    for (const auto& p : parents) d->requires_grad |= p.requires_grad();
    d->parents = std::move(parents);
    if (d->requires_grad) d->vjp = std::move(vjp);
    d->idx = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
    return Node(std::move(d));
}

// ---- primitives -----------------------------------------------------------

Node add(const Node& a, const Node& b);
Node mul(const Node& a, const Node& b);
Node sum(const Node& a);
Node sum_rows(const Node& a);
Node repeat_rows(const Node& a, int n);
Node transpose_node(const Node& a);

inline Node matmul(const Node& a, const Node& b) {
    Tensor v = matmul(a.value(), b.value());
    return make_op(std::move(v), {a, b},
                   [](const std::vector<Node>& p, const Node&, const Node& g) {
                       return std::vector<Node>{matmul(g, transpose_node(p[1])),
                                                matmul(transpose_node(p[0]), g)};
                   });
}

inline Node transpose_node(const Node& a) {
    return make_op(transpose(a.value()), {a},
                   [](const std::vector<Node>&, const Node&, const Node& g) {
                       return std::vector<Node>{transpose_node(g)};
                   });
}

/// Elementwise add. Also accepts b as a 1x1 scalar or as a 1xk row vector
/// broadcast over the rows of a (the two cases the networks need).
inline Node add(const Node& a, const Node& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = av;
    if (av.same_shape(bv)) {
        out.map() += bv.map();
        return make_op(std::move(out), {a, b},
                       [](const std::vector<Node>&, const Node&, const Node& g) {
                           return std::vector<Node>{g, g};
                       });
    }
    if (bv.rows() == 1 && bv.cols() == 1) {
        out.map().array() += bv[0];
        return make_op(std::move(out), {a, b},
                       [](const std::vector<Node>&, const Node&, const Node& g) {
                           return std::vector<Node>{g, sum(g)};
                       });
    }
    if (bv.rows() == 1 && bv.cols() == av.cols()) {
        out.map().rowwise() += bv.map().row(0);
        return make_op(std::move(out), {a, b},
                       [](const std::vector<Node>&, const Node&, const Node& g) {
                           return std::vector<Node>{g, sum_rows(g)};
                       });
    }
    throw DimensionError("add: incompatible shapes");
}

inline Node scalar_mul(const Node& a, double c) {
    Tensor out = a.value();
    out.map() *= c;
    return make_op(std::move(out), {a},
                   [c](const std::vector<Node>&, const Node&, const Node& g) {
                       return std::vector<Node>{scalar_mul(g, c)};
                   });
}

inline Node sub(const Node& a, const Node& b) { return add(a, scalar_mul(b, -1.0)); }

/// Elementwise multiply; b may be a 1x1 scalar broadcast.
inline Node mul(const Node& a, const Node& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.same_shape(bv)) {
        Tensor out = av;
        out.map().array() *= bv.map().array();
        return make_op(std::move(out), {a, b},
                       [](const std::vector<Node>& p, const Node&, const Node& g) {
                           return std::vector<Node>{mul(g, p[1]), mul(g, p[0])};
                       });
    }
    if (bv.rows() == 1 && bv.cols() == 1) {
        Tensor out = av;
        out.map() *= bv[0];
        return make_op(std::move(out), {a, b},
                       [](const std::vector<Node>& p, const Node&, const Node& g) {
                           return std::vector<Node>{mul(g, p[1]), sum(mul(g, p[0]))};
                       });
    }
    throw DimensionError("mul: incompatible shapes");
}

inline Node sum(const Node& a) {
    Tensor out = Tensor::scalar(a.value().map().sum());
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>& p, const Node&, const Node& g) {
                       Tensor ones(p[0].rows(), p[0].cols(), 1.0);
                       return std::vector<Node>{mul(Node::constant(std::move(ones)), g)};
                   });
}

inline Node mean(const Node& a) { return scalar_mul(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Node sum_rows(const Node& a) {
    Tensor out(1, a.cols());
    out.map() = a.value().map().colwise().sum();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>& p, const Node&, const Node& g) {
                       return std::vector<Node>{repeat_rows(g, p[0].rows())};
                   });
}

inline Node mean_rows(const Node& a) { return scalar_mul(sum_rows(a), 1.0 / a.rows()); }

inline Node repeat_rows(const Node& a, int n) {
    if (a.rows() != 1) throw DimensionError("repeat_rows: expects a row vector");
    Tensor out(n, a.cols());
    out.map().rowwise() = a.value().map().row(0);
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>&, const Node&, const Node& g) {
                       return std::vector<Node>{sum_rows(g)};
                   });
}

inline Node tanh_node(const Node& a) {
    Tensor out = a.value();
    out.map() = out.map().array().tanh();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>&, const Node& self, const Node& g) {
                       Node one = Node::constant(Tensor(self.rows(), self.cols(), 1.0));
                       return std::vector<Node>{mul(g, sub(one, mul(self, self)))};
                   });
}

inline Node relu(const Node& a) {
    Tensor out = a.value();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    // Mask is piecewise constant in the input, so capturing it as a
    // constant node is exact for higher-order differentiation as well.
    Tensor mask(a.rows(), a.cols());
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = a.value()[i] > 0.0 ? 1.0 : 0.0;
    Node mask_n = Node::constant(std::move(mask));
    return make_op(std::move(out), {a},
                   [mask_n](const std::vector<Node>&, const Node&, const Node& g) {
                       return std::vector<Node>{mul(g, mask_n)};
                   });
}

inline Node sin_node(const Node& a);
inline Node cos_node(const Node& a);

inline Node sin_node(const Node& a) {
    Tensor out = a.value();
    out.map() = out.map().array().sin();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>& p, const Node&, const Node& g) {
                       return std::vector<Node>{mul(g, cos_node(p[0]))};
                   });
}

inline Node cos_node(const Node& a) {
    Tensor out = a.value();
    out.map() = out.map().array().cos();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>& p, const Node&, const Node& g) {
                       return std::vector<Node>{mul(g, scalar_mul(sin_node(p[0]), -1.0))};
                   });
}

inline Node exp_node(const Node& a) {
    Tensor out = a.value();
    out.map() = out.map().array().exp();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>&, const Node& self, const Node& g) {
                       return std::vector<Node>{mul(g, self)};
                   });
}

/// clip(x, lo, hi). Subgradient convention: derivative 1 on [lo, hi]
/// (boundary treated as interior), 0 strictly outside.
inline Node clip(const Node& a, double lo, double hi) {
    Tensor out = a.value();
    Tensor mask(a.rows(), a.cols());
    for (size_t i = 0; i < out.size(); ++i) {
        double v = out[i];
        mask[i] = (v >= lo && v <= hi) ? 1.0 : 0.0;
        out[i] = v < lo ? lo : (v > hi ? hi : v);
    }
    Node mask_n = Node::constant(std::move(mask));
    return make_op(std::move(out), {a},
                   [mask_n](const std::vector<Node>&, const Node&, const Node& g) {
                       return std::vector<Node>{mul(g, mask_n)};
                   });
}

inline Node square(const Node& a) {
    Tensor out = a.value();
    out.map().array() = out.map().array().square();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>& p, const Node&, const Node& g) {
                       return std::vector<Node>{mul(g, scalar_mul(p[0], 2.0))};
                   });
}

inline Node reciprocal(const Node& a) {
    Tensor out = a.value();
    out.map().array() = out.map().array().inverse();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>&, const Node& self, const Node& g) {
                       return std::vector<Node>{mul(g, scalar_mul(mul(self, self), -1.0))};
                   });
}

inline Node sqrt_node(const Node& a) {
    Tensor out = a.value();
    out.map().array() = out.map().array().sqrt();
    return make_op(std::move(out), {a},
                   [](const std::vector<Node>&, const Node& self, const Node& g) {
                       return std::vector<Node>{mul(g, scalar_mul(reciprocal(self), 0.5))};
                   });
}

Node slice(const Node& a, int r0, int r1, int c0, int c1);

/// Place g into a zero matrix of the given shape at (r0, c0); adjoint of slice.
inline Node embed(const Node& g, int rows, int cols, int r0, int c0) {
    Tensor out(rows, cols);
    out.map().block(r0, c0, g.rows(), g.cols()) = g.value().map();
    int gr = g.rows(), gc = g.cols();
    return make_op(std::move(out), {g},
                   [r0, c0, gr, gc](const std::vector<Node>&, const Node&, const Node& gout) {
                       return std::vector<Node>{slice(gout, r0, r0 + gr, c0, c0 + gc)};
                   });
}

/// Submatrix rows [r0, r1) x cols [c0, c1).
inline Node slice(const Node& a, int r0, int r1, int c0, int c1) {
    if (r0 < 0 || c0 < 0 || r1 > a.rows() || c1 > a.cols() || r0 >= r1 || c0 >= c1)
        throw DimensionError("slice: range out of bounds");
    Tensor out(r1 - r0, c1 - c0);
    out.map() = a.value().map().block(r0, c0, r1 - r0, c1 - c0);
    int ar = a.rows(), ac = a.cols();
    return make_op(std::move(out), {a},
                   [r0, c0, ar, ac](const std::vector<Node>&, const Node&, const Node& g) {
                       return std::vector<Node>{embed(g, ar, ac, r0, c0)};
                   });
}

/// Concatenate along axis 0 (stack rows) or axis 1 (stack cols).
inline Node concat(const std::vector<Node>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    int rows = parts[0].rows(), cols = parts[0].cols();
    if (axis == 0) {
        rows = 0;
        for (const auto& p : parts) {
            if (p.cols() != cols) throw DimensionError("concat: column mismatch");
            rows += p.rows();
        }
    } else if (axis == 1) {
        cols = 0;
        for (const auto& p : parts) {
            if (p.rows() != rows) throw DimensionError("concat: row mismatch");
            cols += p.cols();
        }
    } else {
        throw DimensionError("concat: axis must be 0 or 1");
    }
    Tensor out(rows, cols);
    int off = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            out.map().block(off, 0, p.rows(), cols) = p.value().map();
            off += p.rows();
        } else {
            out.map().block(0, off, rows, p.cols()) = p.value().map();
            off += p.cols();
        }
    }
    std::vector<std::pair<int, int>> shapes;
    for (const auto& p : parts) shapes.emplace_back(p.rows(), p.cols());
    return make_op(std::move(out), parts,
                   [axis, shapes](const std::vector<Node>&, const Node&, const Node& g) {
                       std::vector<Node> grads;
                       int off = 0;
                       for (auto [r, c] : shapes) {
                           if (axis == 0) {
                               grads.push_back(slice(g, off, off + r, 0, c));
                               off += r;
                           } else {
                               grads.push_back(slice(g, 0, r, off, off + c));
                               off += c;
                           }
                       }
                       return grads;
                   });
}

/// Value pass-through that blocks gradient flow.
inline Node detach(const Node& a) { return Node::constant(a.value()); }

// ---- reverse pass ----------------------------------------------------------

/// Gradients of a scalar loss with respect to the given nodes. The returned
/// gradients are themselves Nodes, so the result may be differentiated again.
/// Nodes not reachable from the loss get a zero gradient.
inline std::vector<Node> grad_nodes(const Node& loss, const std::vector<Node>& wrt) {
    if (loss.value().size() != 1) throw DimensionError("grad: loss must be scalar");

    // Reachable requires-grad subgraph, then reverse sweep in decreasing
    // creation index (a valid topological order: parents precede children).
    std::vector<detail::NodeData*> order;
    std::unordered_set<detail::NodeData*> seen;
    std::unordered_map<detail::NodeData*, Node> handle;
    std::vector<Node> stack{loss};
    while (!stack.empty()) {
        Node n = stack.back();
        stack.pop_back();
        if (!n.requires_grad() || seen.count(n.raw())) continue;
        seen.insert(n.raw());
        order.push_back(n.raw());
        handle.emplace(n.raw(), n);
        for (const auto& p : n.raw()->parents) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](detail::NodeData* a, detail::NodeData* b) { return a->idx > b->idx; });

    std::unordered_map<detail::NodeData*, Node> acc;
    acc.emplace(loss.raw(), Node::constant(Tensor::scalar(1.0)));
    for (detail::NodeData* nd : order) {
        auto it = acc.find(nd);
        if (it == acc.end() || !nd->vjp) continue;
        Node self = handle.at(nd);
        std::vector<Node> contribs = nd->vjp(nd->parents, self, it->second);
        for (size_t i = 0; i < nd->parents.size(); ++i) {
            const Node& par = nd->parents[i];
            if (!par.requires_grad()) continue;
            auto jt = acc.find(par.raw());
            if (jt == acc.end())
                acc.emplace(par.raw(), contribs[i]);
            else
                jt->second = add(jt->second, contribs[i]);
        }
    }

    std::vector<Node> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto it = acc.find(w.raw());
        if (it != acc.end())
            out.push_back(it->second);
        else
            out.push_back(Node::constant(Tensor(w.rows(), w.cols(), 0.0)));
    }
    return out;
}

// ---- named parameter sets ---------------------------------------------------

/// Named tensors with deterministic (lexicographic) iteration order.
struct ParamSet {
    std::map<std::string, Tensor> entries;

    Tensor& at(const std::string& name) { return entries.at(name); }
    const Tensor& at(const std::string& name) const { return entries.at(name); }
    bool has(const std::string& name) const { return entries.count(name) > 0; }
    size_t count() const { return entries.size(); }

    size_t flat_size() const {
        size_t n = 0;
        for (const auto& [k, v] : entries) n += v.size();
        return n;
    }
};

/// Leaf nodes mirroring a ParamSet; the entry point for building a
/// differentiable graph over model parameters.
struct ParamNodes {
    std::map<std::string, Node> entries;

    static ParamNodes leaves(const ParamSet& ps) {
        ParamNodes pn;
        for (const auto& [k, v] : ps.entries) pn.entries.emplace(k, Node::leaf(v));
        return pn;
    }

    const Node& at(const std::string& name) const { return entries.at(name); }
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries) out.push_back(k);
        return out;
    }
};

/// Gradient of a scalar loss with respect to every entry of a ParamNodes,
/// returned as plain tensors.
inline ParamSet grad(const Node& loss, const ParamNodes& params) {
    std::vector<std::string> names;
    std::vector<Node> wrt;
    for (const auto& [k, v] : params.entries) {
        names.push_back(k);
        wrt.push_back(v);
    }
    std::vector<Node> gs = grad_nodes(loss, wrt);
    ParamSet out;
    for (size_t i = 0; i < names.size(); ++i) out.entries.emplace(names[i], gs[i].value());
    return out;
}

/// d L_query(theta') / d theta where theta' = theta - inner_lr * grad
/// L_support(theta). With first_order set, gradients are stopped at the
/// inner gradient (FOMAML-style approximation).
template <class SupportLoss, class QueryLoss>
ParamSet grad_through_grad(SupportLoss&& support_loss, QueryLoss&& query_loss,
                           const ParamSet& params, double inner_lr, bool first_order = false) {
    ParamNodes leaves = ParamNodes::leaves(params);
    Node ls = support_loss(leaves);
    std::vector<std::string> names;
    std::vector<Node> wrt;
    for (const auto& [k, v] : leaves.entries) {
        names.push_back(k);
        wrt.push_back(v);
    }
    std::vector<Node> gs = grad_nodes(ls, wrt);
    ParamNodes adapted;
    for (size_t i = 0; i < names.size(); ++i) {
        Node g = first_order ? detach(gs[i]) : gs[i];
        adapted.entries.emplace(names[i], sub(leaves.entries.at(names[i]), scalar_mul(g, inner_lr)));
    }
    Node lq = query_loss(adapted);
    return grad(lq, leaves);
}

}  // namespace pocp
