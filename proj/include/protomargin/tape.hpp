#pragma once

// Reverse-mode differentiation tape. Ops append nodes in construction order,
// which is already topological; backward() walks the records in reverse and
// accumulates gradients additively at fan-out. A tape is built for one
// forward pass, backward()'d at most once, then discarded. Replaying the
// same construction sequence produces bit-identical values and gradients:
// every reduction below (and in ops.hpp) runs in a fixed sequential order.

#include <cassert>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "protomargin/tensor.hpp"

namespace protomargin {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
public:
    struct Node {
        const char* op = "";
        Shape shape;
        std::vector<double> val;
        std::vector<double> grad;  // allocated on first touch during backward
        bool requires_grad = false;
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;
    };

    Var leaf(const Tensor& t, bool requires_grad) {
        nodes_.push_back(Node{requires_grad ? "param" : "const", t.shape, t.values,
                              {}, requires_grad, {}, nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(const Tensor& t) { return leaf(t, false); }
    Var param(const Tensor& t) { return leaf(t, true); }

    Var make_node(const char* op, Shape shape, std::vector<double> val,
                  std::vector<int> parents,
                  std::function<void(Tape&, int)> backward) {
        bool rg = false;
        for (int p : parents) rg = rg || nodes_[static_cast<std::size_t>(p)].requires_grad;
        Node n;
        n.op = op;
        n.shape = std::move(shape);
        n.val = std::move(val);
        n.requires_grad = rg;
        n.parents = std::move(parents);
        if (rg) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
    const Shape& shape(Var v) const { return node(v).shape; }
    const std::vector<double>& val(Var v) const { return node(v).val; }
    double scalar(Var v) const {
        const Node& n = node(v);
        if (n.val.size() != 1)
            throw std::invalid_argument(std::string("expected scalar node, got shape ") +
                                        shape_str(n.shape));
        return n.val[0];
    }

    /// Gradient of the last backward() target w.r.t. v; zeros if no path.
    Tensor grad_tensor(Var v) const {
        const Node& n = node(v);
        Tensor g = Tensor::zeros(n.shape);
        if (!n.grad.empty()) g.values = n.grad;
        return g;
    }

    std::span<const double> grad_values(Var v) const {
        const Node& n = node(v);
        return {n.grad.data(), n.grad.size()};
    }

    /// Gradient destination for a parent node; nullptr when the parent does
    /// not require grad (callers skip the work entirely).
    double* grad_sink(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
        return n.grad.data();
    }

    const double* grad_source(int id) const {
        return nodes_[static_cast<std::size_t>(id)].grad.data();
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        check_owned(loss);
        Node& top = nodes_[static_cast<std::size_t>(loss.id)];
        if (top.val.size() != 1)
            throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                        shape_str(top.shape));
        if (!top.requires_grad) return;  // constant graph: nothing to differentiate
        top.grad.assign(1, 1.0);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    void check_owned(Var v) const {
        if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw std::invalid_argument("variable does not belong to this tape");
    }

private:
    std::vector<Node> nodes_;
};

inline void check_same_tape(Var a, Var b) {
    if (a.tape != b.tape)
        throw std::invalid_argument("variables belong to different tapes");
}

// ---- basic arithmetic -------------------------------------------------

inline Var add(Var a, Var b) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (t.shape(a) != t.shape(b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(t.shape(a)) +
                                    " vs " + shape_str(t.shape(b)));
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    const int aid = a.id, bid = b.id;
    return t.make_node("add", t.shape(a), std::move(out), {aid, bid},
                       [aid, bid](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const std::size_t n = tp.node(Var{&tp, self}).val.size();
                           if (double* ga = tp.grad_sink(aid))
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                           if (double* gb = tp.grad_sink(bid))
                               for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                       });
}

inline Var sub(Var a, Var b) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (t.shape(a) != t.shape(b))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(t.shape(a)) +
                                    " vs " + shape_str(t.shape(b)));
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    const int aid = a.id, bid = b.id;
    return t.make_node("sub", t.shape(a), std::move(out), {aid, bid},
                       [aid, bid](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const std::size_t n = tp.node(Var{&tp, self}).val.size();
                           if (double* ga = tp.grad_sink(aid))
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                           if (double* gb = tp.grad_sink(bid))
                               for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                       });
}

/// Elementwise (Hadamard) product of same-shape tensors.
inline Var mul(Var a, Var b) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (t.shape(a) != t.shape(b))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(t.shape(a)) +
                                    " vs " + shape_str(t.shape(b)));
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    const int aid = a.id, bid = b.id;
    return t.make_node("mul", t.shape(a), std::move(out), {aid, bid},
                       [aid, bid](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const auto& av2 = tp.val(Var{&tp, aid});
                           const auto& bv2 = tp.val(Var{&tp, bid});
                           if (double* ga = tp.grad_sink(aid))
                               for (std::size_t i = 0; i < av2.size(); ++i) ga[i] += g[i] * bv2[i];
                           if (double* gb = tp.grad_sink(bid))
                               for (std::size_t i = 0; i < av2.size(); ++i) gb[i] += g[i] * av2[i];
                       });
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    const auto& av = t.val(a);
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    const int aid = a.id;
    return t.make_node("scale", t.shape(a), std::move(out), {aid},
                       [aid, c](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const std::size_t n = tp.node(Var{&tp, self}).val.size();
                           if (double* ga = tp.grad_sink(aid))
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
                       });
}

/// Sum of all entries, as a scalar.
inline Var sum(Var a) {
    Tape& t = *a.tape;
    const auto& av = t.val(a);
    double s = 0.0;
    for (double v : av) s += v;
    const int aid = a.id;
    return t.make_node("sum", Shape{1}, {s}, {aid}, [aid](Tape& tp, int self) {
        const double g = tp.grad_source(self)[0];
        const std::size_t n = tp.val(Var{&tp, aid}).size();
        if (double* ga = tp.grad_sink(aid))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
}

/// Stacks scalar variables into a vector.
inline Var stack_scalars(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("stack_scalars: empty input");
    Tape& t = *xs[0].tape;
    std::vector<double> out;
    std::vector<int> parents;
    out.reserve(xs.size());
    parents.reserve(xs.size());
    for (Var x : xs) {
        check_same_tape(xs[0], x);
        if (t.val(x).size() != 1)
            throw std::invalid_argument("stack_scalars: non-scalar input of shape " +
                                        shape_str(t.shape(x)));
        out.push_back(t.val(x)[0]);
        parents.push_back(x.id);
    }
    std::vector<int> ids = parents;
    return t.make_node("stack", Shape{static_cast<int>(xs.size())}, std::move(out),
                       std::move(parents), [ids](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           for (std::size_t i = 0; i < ids.size(); ++i)
                               if (double* gi = tp.grad_sink(ids[i])) gi[0] += g[i];
                       });
}

/// Minimum of scalar variables; gradient routes to the first argmin.
inline Var min_of(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("min_of: empty input");
    Tape& t = *xs[0].tape;
    std::size_t best = 0;
    double bestv = t.scalar(xs[0]);
    for (std::size_t i = 1; i < xs.size(); ++i) {
        check_same_tape(xs[0], xs[i]);
        const double v = t.scalar(xs[i]);
        if (v < bestv) {
            bestv = v;
            best = i;
        }
    }
    std::vector<int> parents;
    parents.reserve(xs.size());
    for (Var x : xs) parents.push_back(x.id);
    const int chosen = xs[best].id;
    return t.make_node("min_of", Shape{1}, {bestv}, std::move(parents),
                       [chosen](Tape& tp, int self) {
                           const double g = tp.grad_source(self)[0];
                           if (double* gc = tp.grad_sink(chosen)) gc[0] += g;
                       });
}

/// Same data viewed under a new shape with equal element count.
inline Var reshape(Var a, Shape s) {
    Tape& t = *a.tape;
    if (shape_numel(s) != t.val(a).size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(t.shape(a)) +
                                    " as " + shape_str(s));
    const int aid = a.id;
    std::vector<double> out = t.val(a);
    return t.make_node("reshape", std::move(s), std::move(out), {aid},
                       [aid](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const std::size_t n = tp.node(Var{&tp, self}).val.size();
                           if (double* ga = tp.grad_sink(aid))
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                       });
}

/// Entrywise L2 (Frobenius) norm: sqrt(sum of squares). Gradient is x/norm;
/// defined as zero at the origin.
inline Var frobenius_norm(Var a) {
    Tape& t = *a.tape;
    const auto& av = t.val(a);
    double ss = 0.0;
    for (double v : av) ss += v * v;
    const double norm = std::sqrt(ss);
    const int aid = a.id;
    return t.make_node("frobenius_norm", Shape{1}, {norm}, {aid},
                       [aid, norm](Tape& tp, int self) {
                           if (norm == 0.0) return;
                           const double g = tp.grad_source(self)[0];
                           const auto& x = tp.val(Var{&tp, aid});
                           if (double* ga = tp.grad_sink(aid))
                               for (std::size_t i = 0; i < x.size(); ++i)
                                   ga[i] += g * x[i] / norm;
                       });
}

}  // namespace protomargin
