#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "kdlab/rng.hpp"

namespace kdlab {

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Reverse-mode autodiff over small dense tensors. A Tensor is a handle to a
// graph node; nodes own their value buffer, an optional gradient buffer, the
// parent handles that keep the graph alive, and a backward closure. Values
// are immutable once a node is created (parameter updates go through
// mutable_data between graph builds, never mid-graph).
template <class T>
class Tensor {
  public:
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        }
    };

    Tensor() = default;

    static Tensor from(std::vector<T> data, Shape shape, bool requires_grad = false) {
        if (data.size() != numel(shape)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        t.n_->requires_grad = requires_grad;
        t.check_finite("from");
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> d(numel(shape), T(0));
        return from(std::move(d), std::move(shape), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> d(numel(shape), value);
        return from(std::move(d), std::move(shape), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({value}, {1}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& mutable_data() { return n_->data; }
    const std::vector<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return n_->grad.size() == n_->data.size(); }
    size_t size() const { return n_->data.size(); }

    int rows() const { return n_->shape.size() == 2 ? n_->shape[0] : 1; }
    int cols() const { return n_->shape.size() == 2 ? n_->shape[1] : n_->shape[0]; }

    T item() const {
        if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
        return n_->data[0];
    }

    T at(int r, int c) const { return n_->data[static_cast<size_t>(r) * cols() + c]; }

    void zero_grad() { n_->grad.clear(); }

    // Runs reverse-mode accumulation from this scalar. Each backward pass
    // visits the graph in a deterministic reverse topological order.
    void backward() const {
        if (size() != 1) throw std::invalid_argument("backward() requires a scalar root");
        if (!n_->requires_grad) throw std::invalid_argument("backward() on a graph with no gradient path");
        std::vector<Node*> order = topo_order();
        n_->ensure_grad();
        n_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backward) node->backward(*node);
        }
    }

    std::shared_ptr<Node> node() const { return n_; }

    // --- internal helpers used by the free-function ops ---

    static Tensor make_op(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward, const char* opname) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        for (const auto& p : parents) {
            t.n_->requires_grad = t.n_->requires_grad || p.n_->requires_grad;
            t.n_->parents.push_back(p.n_);
        }
        if (t.n_->requires_grad) t.n_->backward = std::move(backward);
        t.check_finite(opname);
        return t;
    }

    void check_finite(const char* opname) const {
        for (const T& v : n_->data) {
            if (!std::isfinite(v)) {
                throw std::runtime_error(std::string("non-finite value produced by ") + opname);
            }
        }
    }

  private:
    std::vector<Node*> topo_order() const {
        std::vector<Node*> order;
        std::unordered_set<Node*> visited;
        // iterative DFS, parents visited in construction order
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        visited.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* parent = node->parents[idx++].get();
                if (parent->requires_grad && !visited.count(parent)) {
                    visited.insert(parent);
                    stack.emplace_back(parent, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <class T>
void accumulate(typename Tensor<T>::Node& dst, const std::vector<T>& delta) {
    dst.ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) dst.grad[i] += delta[i];
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// elementwise sum; also accepts a row vector b broadcast over the rows of a
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    using Node = typename Tensor<T>::Node;
    const int m = a.rows(), n = a.cols();
    const bool broadcast = (a.shape() != b.shape());
    if (broadcast && !(b.rows() == 1 && b.cols() == n && m >= 1)) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    std::vector<T> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out[static_cast<size_t>(i) * n + j] =
                ad[static_cast<size_t>(i) * n + j] + bd[broadcast ? j : static_cast<size_t>(i) * n + j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [an, bn, m, n, broadcast](Node& self) {
            if (an->requires_grad) detail::accumulate<T>(*an, self.grad);
            if (bn->requires_grad) {
                if (!broadcast) {
                    detail::accumulate<T>(*bn, self.grad);
                } else {
                    bn->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) bn->grad[j] += self.grad[static_cast<size_t>(i) * n + j];
                }
            }
        },
        "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    using Node = typename Tensor<T>::Node;
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [an, bn](Node& self) {
            if (an->requires_grad) detail::accumulate<T>(*an, self.grad);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        },
        "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    using Node = typename Tensor<T>::Node;
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [an, bn](Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
            }
        },
        "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    using Node = typename Tensor<T>::Node;
    std::vector<T> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a},
        [an, c](Node& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
        },
        "scale");
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    using Node = typename Tensor<T>::Node;
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const T av = ad[static_cast<size_t>(i) * k + p];
            const size_t bo = static_cast<size_t>(p) * n;
            const size_t oo = static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) out[oo + j] += av * bd[bo + j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(
        {m, n}, std::move(out), {a, b},
        [an, bn, m, k, n](Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();  // dA = g . B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        T acc = 0;
                        for (int j = 0; j < n; ++j)
                            acc += self.grad[static_cast<size_t>(i) * n + j] * bn->data[static_cast<size_t>(p) * n + j];
                        an->grad[static_cast<size_t>(i) * k + p] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB = A^T . g
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        T acc = 0;
                        for (int i = 0; i < m; ++i)
                            acc += an->data[static_cast<size_t>(i) * k + p] * self.grad[static_cast<size_t>(i) * n + j];
                        bn->grad[static_cast<size_t>(p) * n + j] += acc;
                    }
            }
        },
        "matmul");
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    using Node = typename Tensor<T>::Node;
    if (a.shape().size() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<T> out(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    auto an = a.node();
    return Tensor<T>::make_op(
        {n, m}, std::move(out), {a},
        [an, m, n](Node& self) {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    an->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
        },
        "transpose");
}

// row-wise softmax with max-subtraction
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    using Node = typename Tensor<T>::Node;
    const int m = x.rows(), n = x.cols();
    std::vector<T> out(x.size());
    for (int i = 0; i < m; ++i) {
        const size_t o = static_cast<size_t>(i) * n;
        T mx = x.data()[o];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x.data()[o + j]);
        T sum = 0;
        for (int j = 0; j < n; ++j) {
            out[o + j] = std::exp(x.data()[o + j] - mx);
            sum += out[o + j];
        }
        for (int j = 0; j < n; ++j) out[o + j] /= sum;
    }
    auto xn = x.node();
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x},
        [xn, m, n](Node& self) {
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t o = static_cast<size_t>(i) * n;
                T dot = 0;
                for (int j = 0; j < n; ++j) dot += self.grad[o + j] * self.data[o + j];
                for (int j = 0; j < n; ++j)
                    xn->grad[o + j] += self.data[o + j] * (self.grad[o + j] - dot);
            }
        },
        "softmax");
}

// softmax along an axis of a rank-1 or rank-2 tensor; axis counts from the
// last dimension when negative
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    const int rank = static_cast<int>(x.shape().size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw std::invalid_argument("softmax: axis out of range");
    if (rank == 1 || axis == 1) return softmax_rows(x);
    return transpose(softmax_rows(transpose(x)));
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
    using Node = typename Tensor<T>::Node;
    const int m = x.rows(), n = x.cols();
    std::vector<T> out(x.size());
    for (int i = 0; i < m; ++i) {
        const size_t o = static_cast<size_t>(i) * n;
        T mx = x.data()[o];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x.data()[o + j]);
        T sum = 0;
        for (int j = 0; j < n; ++j) sum += std::exp(x.data()[o + j] - mx);
        const T lse = mx + std::log(sum);
        for (int j = 0; j < n; ++j) out[o + j] = x.data()[o + j] - lse;
    }
    auto xn = x.node();
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x},
        [xn, m, n](Node& self) {
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t o = static_cast<size_t>(i) * n;
                T gsum = 0;
                for (int j = 0; j < n; ++j) gsum += self.grad[o + j];
                for (int j = 0; j < n; ++j)
                    xn->grad[o + j] += self.grad[o + j] - std::exp(self.data[o + j]) * gsum;
            }
        },
        "log_softmax");
}

// gelu, tanh approximation
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    using Node = typename Tensor<T>::Node;
    std::vector<T> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + 0.044715 * v * v * v))));
    }
    auto xn = x.node();
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x},
        [xn](Node& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = static_cast<double>(xn->data[i]);
                const double u = detail::kGeluC * (v + 0.044715 * v * v * v);
                const double th = std::tanh(u);
                const double du = detail::kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
                const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                xn->grad[i] += self.grad[i] * static_cast<T>(d);
            }
        },
        "gelu");
}

// per-row layer norm with learned gain/bias (row vectors)
template <class T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps = T(1e-5)) {
    using Node = typename Tensor<T>::Node;
    const int m = x.rows(), n = x.cols();
    if (gamma.size() != static_cast<size_t>(n) || beta.size() != static_cast<size_t>(n)) {
        throw std::invalid_argument("layer_norm: gain/bias size mismatch with " + shape_str(x.shape()));
    }
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const size_t o = static_cast<size_t>(i) * n;
        T mean = 0;
        for (int j = 0; j < n; ++j) mean += x.data()[o + j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (int j = 0; j < n; ++j) {
            const T d = x.data()[o + j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = istd;
        for (int j = 0; j < n; ++j) {
            xhat[o + j] = (x.data()[o + j] - mean) * istd;
            out[o + j] = xhat[o + j] * gamma.data()[static_cast<size_t>(j)] + beta.data()[static_cast<size_t>(j)];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gn->grad[static_cast<size_t>(j)] +=
                            self.grad[static_cast<size_t>(i) * n + j] * xhat[static_cast<size_t>(i) * n + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * n + j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const size_t o = static_cast<size_t>(i) * n;
                    T sum_g = 0, sum_gx = 0;
                    for (int j = 0; j < n; ++j) {
                        const T gy = self.grad[o + j] * gn->data[static_cast<size_t>(j)];
                        sum_g += gy;
                        sum_gx += gy * xhat[o + j];
                    }
                    for (int j = 0; j < n; ++j) {
                        const T gy = self.grad[o + j] * gn->data[static_cast<size_t>(j)];
                        xn->grad[o + j] += inv_std[static_cast<size_t>(i)] *
                                           (gy - (sum_g + xhat[o + j] * sum_gx) / static_cast<T>(n));
                    }
                }
            }
        },
        "layer_norm");
}

// gather rows; backward scatter-adds into the source
template <class T>
Tensor<T> select_rows(const Tensor<T>& x, std::vector<int> indices) {
    using Node = typename Tensor<T>::Node;
    const int n = x.cols();
    const int m = x.rows();
    for (int idx : indices) {
        if (idx < 0 || idx >= m) {
            throw std::invalid_argument("select_rows: index " + std::to_string(idx) +
                                        " out of range for " + shape_str(x.shape()));
        }
    }
    const int k = static_cast<int>(indices.size());
    std::vector<T> out(static_cast<size_t>(k) * n);
    for (int i = 0; i < k; ++i) {
        const size_t src = static_cast<size_t>(indices[static_cast<size_t>(i)]) * n;
        std::copy(x.data().begin() + src, x.data().begin() + src + n, out.begin() + static_cast<size_t>(i) * n);
    }
    auto xn = x.node();
    return Tensor<T>::make_op(
        {k, n}, std::move(out), {x},
        [xn, n, indices = std::move(indices)](Node& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i) {
                const size_t dst = static_cast<size_t>(indices[i]) * n;
                const size_t src = i * n;
                for (int j = 0; j < n; ++j) xn->grad[dst + j] += self.grad[src + j];
            }
        },
        "select_rows");
}

// overwrite the listed rows of a constant base matrix with rows of a
// differentiable tensor; gradient flows to the scattered rows only
template <class T>
Tensor<T> scatter_rows(const std::vector<T>& base, Shape base_shape, const std::vector<int>& indices,
                       const Tensor<T>& rows) {
    using Node = typename Tensor<T>::Node;
    const int n = base_shape[1];
    if (rows.cols() != n || rows.rows() != static_cast<int>(indices.size())) {
        throw std::invalid_argument("scatter_rows: rows shape " + shape_str(rows.shape()) +
                                    " does not match " + std::to_string(indices.size()) + " x " +
                                    std::to_string(n));
    }
    std::vector<T> out = base;
    for (size_t i = 0; i < indices.size(); ++i) {
        const size_t dst = static_cast<size_t>(indices[i]) * n;
        for (int j = 0; j < n; ++j) out[dst + j] = rows.data()[i * n + j];
    }
    auto rn = rows.node();
    return Tensor<T>::make_op(
        std::move(base_shape), std::move(out), {rows},
        [rn, n, indices](Node& self) {
            rn->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i) {
                const size_t src = static_cast<size_t>(indices[i]) * n;
                for (int j = 0; j < n; ++j) rn->grad[i * n + j] += self.grad[src + j];
            }
        },
        "scatter_rows");
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    using Node = typename Tensor<T>::Node;
    T s = 0;
    for (const T& v : x.data()) s += v;
    auto xn = x.node();
    return Tensor<T>::make_op(
        {1}, {s}, {x},
        [xn](Node& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
        },
        "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// mean of squared elementwise differences
template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    using Node = typename Tensor<T>::Node;
    detail::require_same_shape(a, b, "mse_loss");
    T s = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const T d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    const T inv_n = T(1) / static_cast<T>(a.size());
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(
        {1}, {s * inv_n}, {a, b},
        [an, bn, inv_n](Node& self) {
            const T g = self.grad[0] * T(2) * inv_n;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < an->grad.size(); ++i)
                    an->grad[i] += g * (an->data[i] - bn->data[i]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->grad.size(); ++i)
                    bn->grad[i] -= g * (an->data[i] - bn->data[i]);
            }
        },
        "mse_loss");
}

// -log softmax(logits)[gold], stabilized through log-sum-exp
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, int gold) {
    using Node = typename Tensor<T>::Node;
    const int c = static_cast<int>(logits.size());
    if (logits.rows() != 1) throw std::invalid_argument("cross_entropy_loss: single logit row expected");
    if (gold < 0 || gold >= c) {
        throw std::invalid_argument("cross_entropy_loss: gold class " + std::to_string(gold) +
                                    " out of range for " + std::to_string(c) + " classes");
    }
    T mx = logits.data()[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.data()[static_cast<size_t>(j)]);
    T sum = 0;
    for (int j = 0; j < c; ++j) sum += std::exp(logits.data()[static_cast<size_t>(j)] - mx);
    const T lse = mx + std::log(sum);
    const T loss = lse - logits.data()[static_cast<size_t>(gold)];
    auto ln = logits.node();
    return Tensor<T>::make_op(
        {1}, {loss}, {logits},
        [ln, gold, mx, sum, c](Node& self) {
            ln->ensure_grad();
            const T g = self.grad[0];
            for (int j = 0; j < c; ++j) {
                const T p = std::exp(ln->data[static_cast<size_t>(j)] - mx) / sum;
                ln->grad[static_cast<size_t>(j)] += g * (p - (j == gold ? T(1) : T(0)));
            }
        },
        "cross_entropy_loss");
}

// KL(softmax(p/tau) || softmax(q/tau)), mean over rows. Gradients flow to
// both logit tensors when requested.
template <class T>
Tensor<T> kl_divergence(const Tensor<T>& p_logits, const Tensor<T>& q_logits, T temperature) {
    detail::require_same_shape(p_logits, q_logits, "kl_divergence");
    if (!(temperature > T(0))) throw std::invalid_argument("kl_divergence: temperature must be > 0");
    const T inv_t = T(1) / temperature;
    Tensor<T> lp = log_softmax_rows(scale(p_logits, inv_t));
    Tensor<T> lq = log_softmax_rows(scale(q_logits, inv_t));
    Tensor<T> p = softmax_rows(scale(p_logits, inv_t));
    Tensor<T> per_elem = mul(p, sub(lp, lq));
    const T rows = static_cast<T>(p_logits.rows());
    return scale(sum(per_elem), T(1) / rows);
}

// softmax((logits + Gumbel noise) / tau), row-wise; differentiable w.r.t.
// logits, with the noise held as a constant
template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, T tau, Rng& rng) {
    if (!(tau > T(0))) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
    std::vector<T> noise(logits.size());
    for (auto& v : noise) v = static_cast<T>(rng.gumbel());
    Tensor<T> g = Tensor<T>::from(std::move(noise), logits.shape(), false);
    return softmax_rows(scale(add(logits, g), T(1) / tau));
}

}  // namespace kdlab
