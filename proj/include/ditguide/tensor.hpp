#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "ditguide/common.hpp"

// Minimal define-by-run reverse-mode autodiff over dense row-major
// tensors. Only the ops the toy transformer and the guidance losses
// need. Matrix products are delegated to Eigen; everything else is
// plain loops.

namespace ditguide {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

template <typename T>
struct TensorData {
    std::vector<T> v;  // values, row-major
    std::vector<T> g;  // gradient, allocated on demand
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorData<T>>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(v.size()); }

    void ensure_grad() {
        if (g.size() != v.size()) {
            g.assign(v.size(), T(0));
        }
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}

    static Tensor leaf(std::vector<T> values, Shape shape, bool requires_grad = false) {
        auto d = std::make_shared<TensorData<T>>();
        d->v = std::move(values);
        d->shape = std::move(shape);
        d->requires_grad = requires_grad;
        if ((int64_t)d->v.size() != shape_numel(d->shape)) {
            throw Error("tensor: value count does not match shape");
        }
        return Tensor(std::move(d));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto d = std::make_shared<TensorData<T>>();
        d->shape = std::move(shape);
        d->v.assign(static_cast<size_t>(shape_numel(d->shape)), T(0));
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor scalar(T value) { return leaf({value}, {1}, false); }

    bool valid() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return d_->numel(); }
    bool requires_grad() const { return d_->requires_grad; }

    // Ref-qualified so chained calls on temporaries copy instead of
    // dangling.
    const std::vector<T>& values() const& { return d_->v; }
    std::vector<T> values() && { return d_->v; }
    std::vector<T>& mutable_values() { return d_->v; }
    const std::vector<T>& grad() const& { return d_->g; }
    std::vector<T> grad() && { return d_->g; }
    T item() const { return d_->v.at(0); }

    std::shared_ptr<TensorData<T>> node() const { return d_; }

    void zero_grad() { d_->g.assign(d_->v.size(), T(0)); }

    // Reverse pass from this (scalar) node.
    void backward() const {
        if (numel() != 1) {
            throw Error("backward: root must be a scalar");
        }
        std::vector<TensorData<T>*> order;
        topo_sort(d_.get(), order);
        d_->ensure_grad();
        d_->g[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) {
                (*it)->backward_fn();
            }
        }
    }

private:
    static void topo_sort(TensorData<T>* root, std::vector<TensorData<T>*>& order) {
        std::unordered_set<TensorData<T>*> seen;
        std::vector<std::pair<TensorData<T>*, size_t>> stack;
        stack.emplace_back(root, 0);
        seen.insert(root);
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                TensorData<T>* p = node->parents[idx].get();
                ++idx;
                if (p->requires_grad && seen.insert(p).second) {
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorData<T>> d_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorData<T>> make_node(Shape shape, const std::vector<Tensor<T>>& parents) {
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(shape);
    d->v.resize(static_cast<size_t>(shape_numel(d->shape)));
    for (const auto& p : parents) {
        if (p.requires_grad()) {
            d->requires_grad = true;
        }
    }
    if (d->requires_grad) {
        d->parents.reserve(parents.size());
        for (const auto& p : parents) {
            d->parents.push_back(p.node());
        }
    }
    return d;
}

template <typename T>
using EigMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EigMat<T>>;
template <typename T>
using MapCM = Eigen::Map<const EigMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw Error("add: shape mismatch");
    auto d = detail::make_node<T>(a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] + bv[i];
    if (d->requires_grad) {
        auto an = a.node(), bn = b.node();
        auto self = d.get();
        d->backward_fn = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) bn->g[i] += self->g[i];
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw Error("sub: shape mismatch");
    auto d = detail::make_node<T>(a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] - bv[i];
    if (d->requires_grad) {
        auto an = a.node(), bn = b.node();
        auto self = d.get();
        d->backward_fn = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) bn->g[i] -= self->g[i];
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw Error("mul: shape mismatch");
    auto d = detail::make_node<T>(a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] * bv[i];
    if (d->requires_grad) {
        auto an = a.node(), bn = b.node();
        auto self = d.get();
        d->backward_fn = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i] * bn->v[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) bn->g[i] += self->g[i] * an->v[i];
            }
        };
    }
    return Tensor<T>(d);
}

// Elementwise a / b. Caller guarantees b is nonzero everywhere.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw Error("div: shape mismatch");
    auto d = detail::make_node<T>(a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] / bv[i];
    if (d->requires_grad) {
        auto an = a.node(), bn = b.node();
        auto self = d.get();
        d->backward_fn = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i] / bn->v[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i)
                    bn->g[i] -= self->g[i] * self->v[i] / bn->v[i];
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    auto d = detail::make_node<T>(a.shape(), {a});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] * c;
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, c]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i] * c;
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
    auto d = detail::make_node<T>(a.shape(), {a});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] + c;
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i];
        };
    }
    return Tensor<T>(d);
}

// Scalar-tensor broadcast divide: a / s where s has one element.
template <typename T>
Tensor<T> div_bcast(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw Error("div_bcast: divisor must be scalar");
    auto d = detail::make_node<T>(a.shape(), {a, s});
    const auto& av = a.values();
    const T sv = s.values()[0];
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] / sv;
    if (d->requires_grad) {
        auto an = a.node(), sn = s.node();
        auto self = d.get();
        d->backward_fn = [self, an, sn]() {
            const T sv2 = sn->v[0];
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i] / sv2;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = T(0);
                for (size_t i = 0; i < self->g.size(); ++i) acc -= self->g[i] * self->v[i];
                sn->g[0] += acc / sv2;
            }
        };
    }
    return Tensor<T>(d);
}

// Scalar-tensor broadcast subtract: a - s where s has one element.
template <typename T>
Tensor<T> sub_bcast(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw Error("sub_bcast: subtrahend must be scalar");
    auto d = detail::make_node<T>(a.shape(), {a, s});
    const auto& av = a.values();
    const T sv = s.values()[0];
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = av[i] - sv;
    if (d->requires_grad) {
        auto an = a.node(), sn = s.node();
        auto self = d.get();
        d->backward_fn = [self, an, sn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i];
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = T(0);
                for (size_t i = 0; i < self->g.size(); ++i) acc += self->g[i];
                sn->g[0] -= acc;
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
    auto d = detail::make_node<T>(a.shape(), {a});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) d->v[i] = std::sqrt(av[i]);
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->g.size(); ++i)
                an->g[i] += self->g[i] * T(0.5) / self->v[i];
        };
    }
    return Tensor<T>(d);
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    auto d = detail::make_node<T>({1}, {a});
    T acc = T(0);
    for (T x : a.values()) acc += x;
    d->v[0] = acc;
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an]() {
            an->ensure_grad();
            const T g = self->g[0];
            for (size_t i = 0; i < an->g.size(); ++i) an->g[i] += g;
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// Sum of elementwise products; the inner product of the flattened maps.
template <typename T>
Tensor<T> dot_all(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.numel() != b.numel()) throw Error("dot_all: size mismatch");
    auto d = detail::make_node<T>({1}, {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    T acc = T(0);
    for (size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
    d->v[0] = acc;
    if (d->requires_grad) {
        auto an = a.node(), bn = b.node();
        auto self = d.get();
        d->backward_fn = [self, an, bn]() {
            const T g = self->g[0];
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < an->g.size(); ++i) an->g[i] += g * bn->v[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->g.size(); ++i) bn->g[i] += g * an->v[i];
            }
        };
    }
    return Tensor<T>(d);
}

// Max over all entries; gradient routed to the first maximizer.
template <typename T>
Tensor<T> max_all(const Tensor<T>& a) {
    auto d = detail::make_node<T>({1}, {a});
    const auto& av = a.values();
    size_t arg = 0;
    for (size_t i = 1; i < av.size(); ++i) {
        if (av[i] > av[arg]) arg = i;
    }
    d->v[0] = av[arg];
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, arg]() {
            an->ensure_grad();
            an->g[arg] += self->g[0];
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> min_all(const Tensor<T>& a) {
    auto d = detail::make_node<T>({1}, {a});
    const auto& av = a.values();
    size_t arg = 0;
    for (size_t i = 1; i < av.size(); ++i) {
        if (av[i] < av[arg]) arg = i;
    }
    d->v[0] = av[arg];
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, arg]() {
            an->ensure_grad();
            an->g[arg] += self->g[0];
        };
    }
    return Tensor<T>(d);
}

namespace detail {

// Pairwise elementwise sum, splitting each range at its midpoint. The
// association therefore matches between a full even-length range and
// the average of its two halves, which makes those two computations
// bit-identical when the scale factors are powers of two.
template <typename T>
void pairwise_sum(const std::vector<Tensor<T>>& xs, size_t lo, size_t hi, std::vector<T>& out) {
    if (hi - lo == 1) {
        out = xs[lo].values();
        return;
    }
    const size_t mid = lo + (hi - lo) / 2;
    std::vector<T> left, right;
    pairwise_sum(xs, lo, mid, left);
    pairwise_sum(xs, mid, hi, right);
    out.resize(left.size());
    for (size_t i = 0; i < left.size(); ++i) out[i] = left[i] + right[i];
}

}  // namespace detail

// Arithmetic mean of same-shaped tensors.
template <typename T>
Tensor<T> average(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw Error("average: empty list");
    for (const auto& x : xs) {
        if (x.shape() != xs[0].shape()) throw Error("average: shape mismatch");
    }
    auto d = detail::make_node<T>(xs[0].shape(), xs);
    detail::pairwise_sum(xs, 0, xs.size(), d->v);
    const T inv = T(1) / static_cast<T>(xs.size());
    for (auto& y : d->v) y *= inv;
    if (d->requires_grad) {
        std::vector<std::shared_ptr<TensorData<T>>> nodes;
        for (const auto& x : xs) nodes.push_back(x.node());
        auto self = d.get();
        d->backward_fn = [self, nodes, inv]() {
            for (auto& n : nodes) {
                if (!n->requires_grad) continue;
                n->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) n->g[i] += self->g[i] * inv;
            }
        };
    }
    return Tensor<T>(d);
}

// ---------------------------------------------------------------- structure

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) throw Error("reshape: element count mismatch");
    auto d = detail::make_node<T>(std::move(shape), {a});
    d->v = a.values();
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->g.size(); ++i) an->g[i] += self->g[i];
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw Error("transpose: 2-D only");
    const int r = a.dim(0), c = a.dim(1);
    auto d = detail::make_node<T>({c, r}, {a});
    const auto& av = a.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) d->v[(size_t)j * r + i] = av[(size_t)i * c + j];
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, r, c]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) an->g[(size_t)i * c + j] += self->g[(size_t)j * r + i];
        };
    }
    return Tensor<T>(d);
}

// Contiguous 2-D block [r0, r1) x [c0, c1).
template <typename T>
Tensor<T> slice2d(const Tensor<T>& a, int r0, int r1, int c0, int c1) {
    if (a.shape().size() != 2) throw Error("slice2d: 2-D only");
    const int rows = a.dim(0), cols = a.dim(1);
    if (r0 < 0 || r1 > rows || c0 < 0 || c1 > cols || r0 > r1 || c0 > c1) {
        throw Error("slice2d: bounds out of range");
    }
    const int nr = r1 - r0, nc = c1 - c0;
    auto d = detail::make_node<T>({nr, nc}, {a});
    const auto& av = a.values();
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nc; ++j)
            d->v[(size_t)i * nc + j] = av[(size_t)(i + r0) * cols + (j + c0)];
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, r0, c0, nr, nc, cols]() {
            an->ensure_grad();
            for (int i = 0; i < nr; ++i)
                for (int j = 0; j < nc; ++j)
                    an->g[(size_t)(i + r0) * cols + (j + c0)] += self->g[(size_t)i * nc + j];
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw Error("concat_rows: empty list");
    const int cols = xs[0].dim(1);
    int rows = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != 2 || x.dim(1) != cols) throw Error("concat_rows: column mismatch");
        rows += x.dim(0);
    }
    auto d = detail::make_node<T>({rows, cols}, xs);
    size_t off = 0;
    for (const auto& x : xs) {
        const auto& xv = x.values();
        std::copy(xv.begin(), xv.end(), d->v.begin() + (ptrdiff_t)off);
        off += xv.size();
    }
    if (d->requires_grad) {
        std::vector<std::shared_ptr<TensorData<T>>> nodes;
        for (const auto& x : xs) nodes.push_back(x.node());
        auto self = d.get();
        d->backward_fn = [self, nodes]() {
            size_t o = 0;
            for (auto& n : nodes) {
                if (n->requires_grad) {
                    n->ensure_grad();
                    for (size_t i = 0; i < n->g.size(); ++i) n->g[i] += self->g[o + i];
                }
                o += n->v.size();
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw Error("concat_cols: empty list");
    const int rows = xs[0].dim(0);
    int cols = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != 2 || x.dim(0) != rows) throw Error("concat_cols: row mismatch");
        cols += x.dim(1);
    }
    auto d = detail::make_node<T>({rows, cols}, xs);
    int coff = 0;
    for (const auto& x : xs) {
        const int xc = x.dim(1);
        const auto& xv = x.values();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < xc; ++j) d->v[(size_t)i * cols + coff + j] = xv[(size_t)i * xc + j];
        coff += xc;
    }
    if (d->requires_grad) {
        std::vector<std::shared_ptr<TensorData<T>>> nodes;
        for (const auto& x : xs) nodes.push_back(x.node());
        auto self = d.get();
        d->backward_fn = [self, nodes, rows, cols]() {
            int co = 0;
            for (auto& n : nodes) {
                const int xc = n->shape[1];
                if (n->requires_grad) {
                    n->ensure_grad();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < xc; ++j)
                            n->g[(size_t)i * xc + j] += self->g[(size_t)i * cols + co + j];
                }
                co += xc;
            }
        };
    }
    return Tensor<T>(d);
}

// Constant copy; values shared, gradient cut.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    auto d = std::make_shared<TensorData<T>>();
    d->v = a.values();
    d->shape = a.shape();
    d->requires_grad = false;
    return Tensor<T>(d);
}

// ---------------------------------------------------------------- dense algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
    if (a.shape().size() != 2 || b.shape().size() != 2) throw Error("matmul: 2-D only");
    const int m = trans_a ? a.dim(1) : a.dim(0);
    const int k = trans_a ? a.dim(0) : a.dim(1);
    const int kb = trans_b ? b.dim(1) : b.dim(0);
    const int n = trans_b ? b.dim(0) : b.dim(1);
    if (k != kb) throw Error("matmul: inner dimension mismatch");
    auto d = detail::make_node<T>({m, n}, {a, b});
    {
        detail::MapCM<T> A(a.values().data(), a.dim(0), a.dim(1));
        detail::MapCM<T> B(b.values().data(), b.dim(0), b.dim(1));
        detail::MapM<T> C(d->v.data(), m, n);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    if (d->requires_grad) {
        auto an = a.node(), bn = b.node();
        auto self = d.get();
        d->backward_fn = [self, an, bn, m, n, trans_a, trans_b]() {
            detail::MapCM<T> G(self->g.data(), m, n);
            detail::MapCM<T> A(an->v.data(), an->shape[0], an->shape[1]);
            detail::MapCM<T> B(bn->v.data(), bn->shape[0], bn->shape[1]);
            if (an->requires_grad) {
                an->ensure_grad();
                detail::MapM<T> GA(an->g.data(), an->shape[0], an->shape[1]);
                if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
                else if (!trans_a && trans_b) GA.noalias() += G * B;
                else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::MapM<T> GB(bn->g.data(), bn->shape[0], bn->shape[1]);
                if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
                else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
                else if (trans_a && !trans_b) GB.noalias() += A * G;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        };
    }
    return Tensor<T>(d);
}

// Broadcast-add a row vector v [n] to every row of x [m, n].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.shape().size() != 2 || v.numel() != x.dim(1)) throw Error("add_rowvec: shape mismatch");
    const int m = x.dim(0), n = x.dim(1);
    auto d = detail::make_node<T>({m, n}, {x, v});
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d->v[(size_t)i * n + j] = xv[(size_t)i * n + j] + vv[(size_t)j];
    if (d->requires_grad) {
        auto xn = x.node(), vn = v.node();
        auto self = d.get();
        d->backward_fn = [self, xn, vn, m, n]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self->g.size(); ++i) xn->g[i] += self->g[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) vn->g[(size_t)j] += self->g[(size_t)i * n + j];
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// Broadcast-multiply a row vector v [n] into every row of x [m, n].
template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.shape().size() != 2 || v.numel() != x.dim(1)) throw Error("mul_rowvec: shape mismatch");
    const int m = x.dim(0), n = x.dim(1);
    auto d = detail::make_node<T>({m, n}, {x, v});
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d->v[(size_t)i * n + j] = xv[(size_t)i * n + j] * vv[(size_t)j];
    if (d->requires_grad) {
        auto xn = x.node(), vn = v.node();
        auto self = d.get();
        d->backward_fn = [self, xn, vn, m, n]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        xn->g[(size_t)i * n + j] += self->g[(size_t)i * n + j] * vn->v[(size_t)j];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        vn->g[(size_t)j] += self->g[(size_t)i * n + j] * xn->v[(size_t)i * n + j];
            }
        };
    }
    return Tensor<T>(d);
}

// ---------------------------------------------------------------- nonlinear

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw Error("softmax_rows: 2-D only");
    const int m = a.dim(0), n = a.dim(1);
    auto d = detail::make_node<T>({m, n}, {a});
    const auto& av = a.values();
    for (int i = 0; i < m; ++i) {
        const T* row = av.data() + (size_t)i * n;
        T* out = d->v.data() + (size_t)i * n;
        T mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T s = T(0);
        for (int j = 0; j < n; ++j) {
            out[j] = std::exp(row[j] - mx);
            s += out[j];
        }
        const T inv = T(1) / s;
        for (int j = 0; j < n; ++j) out[j] *= inv;
    }
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, m, n]() {
            an->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const T* y = self->v.data() + (size_t)i * n;
                const T* gy = self->g.data() + (size_t)i * n;
                T* gx = an->g.data() + (size_t)i * n;
                T dot = T(0);
                for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> layernorm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (x.shape().size() != 2) throw Error("layernorm_rows: 2-D only");
    const int m = x.dim(0), n = x.dim(1);
    if (gamma.numel() != n || beta.numel() != n) throw Error("layernorm_rows: param size mismatch");
    auto d = detail::make_node<T>({m, n}, {x, gamma, beta});
    // Keep normalized activations and inverse sigma for the backward pass.
    auto xhat = std::make_shared<std::vector<T>>((size_t)m * n);
    auto inv_sigma = std::make_shared<std::vector<T>>((size_t)m);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int i = 0; i < m; ++i) {
        const T* row = xv.data() + (size_t)i * n;
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_sigma)[(size_t)i] = is;
        for (int j = 0; j < n; ++j) {
            const T h = (row[j] - mu) * is;
            (*xhat)[(size_t)i * n + j] = h;
            d->v[(size_t)i * n + j] = h * gv[(size_t)j] + bv[(size_t)j];
        }
    }
    if (d->requires_grad) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        auto self = d.get();
        d->backward_fn = [self, xn, gn, bn, xhat, inv_sigma, m, n]() {
            for (int i = 0; i < m; ++i) {
                const T* gy = self->g.data() + (size_t)i * n;
                const T* h = xhat->data() + (size_t)i * n;
                const T is = (*inv_sigma)[(size_t)i];
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int j = 0; j < n; ++j) gn->g[(size_t)j] += gy[j] * h[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < n; ++j) bn->g[(size_t)j] += gy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    T* gx = xn->g.data() + (size_t)i * n;
                    T s1 = T(0), s2 = T(0);
                    for (int j = 0; j < n; ++j) {
                        const T gg = gy[j] * gn->v[(size_t)j];
                        s1 += gg;
                        s2 += gg * h[j];
                    }
                    s1 /= static_cast<T>(n);
                    s2 /= static_cast<T>(n);
                    for (int j = 0; j < n; ++j) {
                        const T gg = gy[j] * gn->v[(size_t)j];
                        gx[j] += (gg - s1 - h[j] * s2) * is;
                    }
                }
            }
        };
    }
    return Tensor<T>(d);
}

// Row layernorm without learned affine; modulation layers provide the
// scale and shift instead.
template <typename T>
Tensor<T> layernorm_plain(const Tensor<T>& x, T eps = T(1e-5)) {
    if (x.shape().size() != 2) throw Error("layernorm_plain: 2-D only");
    const int m = x.dim(0), n = x.dim(1);
    auto d = detail::make_node<T>({m, n}, {x});
    auto inv_sigma = std::make_shared<std::vector<T>>((size_t)m);
    const auto& xv = x.values();
    for (int i = 0; i < m; ++i) {
        const T* row = xv.data() + (size_t)i * n;
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_sigma)[(size_t)i] = is;
        for (int j = 0; j < n; ++j) d->v[(size_t)i * n + j] = (row[j] - mu) * is;
    }
    if (d->requires_grad) {
        auto xn = x.node();
        auto self = d.get();
        d->backward_fn = [self, xn, inv_sigma, m, n]() {
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const T* gy = self->g.data() + (size_t)i * n;
                const T* h = self->v.data() + (size_t)i * n;
                T* gx = xn->g.data() + (size_t)i * n;
                const T is = (*inv_sigma)[(size_t)i];
                T s1 = T(0), s2 = T(0);
                for (int j = 0; j < n; ++j) {
                    s1 += gy[j];
                    s2 += gy[j] * h[j];
                }
                s1 /= static_cast<T>(n);
                s2 /= static_cast<T>(n);
                for (int j = 0; j < n; ++j) gx[j] += (gy[j] - s1 - h[j] * s2) * is;
            }
        };
    }
    return Tensor<T>(d);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    auto d = detail::make_node<T>(a.shape(), {a});
    const auto& av = a.values();
    constexpr T kInvSqrt2 = T(0.7071067811865475244);
    for (size_t i = 0; i < av.size(); ++i) {
        d->v[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * kInvSqrt2));
    }
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an]() {
            an->ensure_grad();
            constexpr T kInvSqrt2Pi = T(0.3989422804014326779);
            constexpr T kIS2 = T(0.7071067811865475244);
            for (size_t i = 0; i < self->g.size(); ++i) {
                const T x = an->v[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x * kIS2));
                const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
                an->g[i] += self->g[i] * (cdf + x * pdf);
            }
        };
    }
    return Tensor<T>(d);
}

// Arbitrary element gather: out[i] = a.flat[idx[i]]. Used for the
// patchify/unpatchify permutations.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, const std::vector<int64_t>& idx, Shape out_shape) {
    if (shape_numel(out_shape) != (int64_t)idx.size()) throw Error("gather: index count mismatch");
    auto d = detail::make_node<T>(std::move(out_shape), {a});
    const auto& av = a.values();
    for (size_t i = 0; i < idx.size(); ++i) {
        d->v[i] = av[(size_t)idx[i]];
    }
    if (d->requires_grad) {
        auto an = a.node();
        auto self = d.get();
        d->backward_fn = [self, an, idx]() {
            an->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i) an->g[(size_t)idx[i]] += self->g[i];
        };
    }
    return Tensor<T>(d);
}

// Row gather from an embedding table [vocab, width].
template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw Error("embedding_rows: table must be 2-D");
    const int vocab = table.dim(0), width = table.dim(1);
    const int L = static_cast<int>(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab) throw Error("embedding_rows: id out of range");
    }
    auto d = detail::make_node<T>({L, width}, {table});
    const auto& tv = table.values();
    for (int i = 0; i < L; ++i) {
        std::copy(tv.begin() + (size_t)ids[(size_t)i] * width,
                  tv.begin() + (size_t)(ids[(size_t)i] + 1) * width,
                  d->v.begin() + (size_t)i * width);
    }
    if (d->requires_grad) {
        auto tn = table.node();
        auto self = d.get();
        d->backward_fn = [self, tn, ids, width]() {
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < width; ++j)
                    tn->g[(size_t)ids[i] * width + j] += self->g[i * width + j];
        };
    }
    return Tensor<T>(d);
}

}  // namespace ditguide
