#include "transfo/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "transfo/errors.hpp"

namespace transfo::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void dimension_error(const std::string& op, const Shape& a, const Shape& b) {
    throw DimensionError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

bool is_suffix(const Shape& full, const Shape& suffix) {
    if (suffix.size() > full.size() || suffix.empty()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_recording_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (numel(shape) != data.size()) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             to_string(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> value, const std::vector<Tensor>& inputs,
                                 BackwardFn backward) {
    Tensor out = from_data(std::move(shape), std::move(value), false);
    if (!g_grad_enabled) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(backward);
    return out;
}

template <typename T>
T Tensor<T>::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() {
    if (size() != 1) throw ContractError("backward() requires a scalar loss, got shape " + to_string(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->grad.assign(n->value.size(), T(0));
        }
    }
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose transpose_b) {
    const bool tb = transpose_b == Transpose::Yes;
    if (a.rank() < 2 || b.rank() < 2) dimension_error("matmul", a.shape(), b.shape());
    const std::size_t n = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t bk = tb ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
    const std::size_t m = tb ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
    if (bk != k) dimension_error("matmul", a.shape(), b.shape());

    const bool shared_b = b.rank() == 2;
    std::size_t batches = 1;
    if (!shared_b) {
        if (b.rank() != a.rank() ||
            !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            dimension_error("matmul", a.shape(), b.shape());
        }
        for (std::size_t i = 0; i + 2 < a.rank(); ++i) batches *= a.dim(i);
    }
    const std::size_t rows = shared_b ? a.size() / k : n;

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(m);
    std::vector<T> out(numel(out_shape));

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t bi = 0; bi < batches; ++bi) {
        ConstMapMat<T> A(pa + bi * rows * k, rows, k);
        MapMat<T> C(out.data() + bi * rows * m, rows, m);
        if (tb) {
            ConstMapMat<T> B(pb + (shared_b ? 0 : bi * m * k), m, k);
            C.noalias() = A * B.transpose();
        } else {
            ConstMapMat<T> B(pb + (shared_b ? 0 : bi * k * m), k, m);
            C.noalias() = A * B;
        }
    }

    return Tensor<T>::make_result(std::move(out_shape), std::move(out), {a, b},
                                  [=](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        const T* g = self.grad.data();
        if (na.requires_grad) na.ensure_grad();
        if (nb.requires_grad) nb.ensure_grad();
        for (std::size_t bi = 0; bi < batches; ++bi) {
            ConstMapMat<T> G(g + bi * rows * m, rows, m);
            ConstMapMat<T> A(na.value.data() + bi * rows * k, rows, k);
            const std::size_t boff = shared_b ? 0 : bi * k * m;
            if (na.requires_grad) {
                MapMat<T> dA(na.grad.data() + bi * rows * k, rows, k);
                if (tb) {
                    ConstMapMat<T> B(nb.value.data() + boff, m, k);
                    dA.noalias() += G * B;
                } else {
                    ConstMapMat<T> B(nb.value.data() + boff, k, m);
                    dA.noalias() += G * B.transpose();
                }
            }
            if (nb.requires_grad) {
                if (tb) {
                    MapMat<T> dB(nb.grad.data() + boff, m, k);
                    dB.noalias() += G.transpose() * A;
                } else {
                    MapMat<T> dB(nb.grad.data() + boff, k, m);
                    dB.noalias() += A.transpose() * G;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!is_suffix(a.shape(), b.shape()) && !(a.shape() == b.shape())) dimension_error("add", a.shape(), b.shape());
    const std::size_t inner = b.size();
    const std::size_t outer = a.size() / inner;
    std::vector<T> out(a.data().begin(), a.data().end());
    const T* pb = b.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        T* row = out.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) row[i] += pb[i];
    }
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [inner, outer](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const T* g = self.grad.data() + o * inner;
                for (std::size_t i = 0; i < inner; ++i) nb.grad[i] += g[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!is_suffix(a.shape(), b.shape()) && !(a.shape() == b.shape())) dimension_error("mul", a.shape(), b.shape());
    const std::size_t inner = b.size();
    const std::size_t outer = a.size() / inner;
    std::vector<T> out(a.size());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = pa[o * inner + i] * pb[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [inner, outer](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) na.grad[o * inner + i] += self.grad[o * inner + i] * nb.value[i];
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) nb.grad[i] += self.grad[o * inner + i] * na.value[o * inner + i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += factor * self.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (nx.value[i] > T(0)) nx.grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t cols = last_dim(x.shape());
    const std::size_t rows = x.size() / cols;
    std::vector<T> out(x.size());
    const T* px = x.data().data();
    using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
    const T underflow = std::log(std::numeric_limits<T>::min());
    // Work in an owned (aligned) row: on a Map Eigen peels a data-dependent
    // number of scalar lanes, which would make a row's result depend on
    // where it sits in memory.
    Row shifted(static_cast<Eigen::Index>(cols)), e(static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(px + r * cols, cols, shifted.data());
        shifted -= shifted.maxCoeff();
        // Eigen's vectorised exp clamps its argument, so masked logits would
        // keep a tiny weight; flush them to an exact zero.
        e = (shifted < underflow).select(T(0), shifted.exp());
        const T total = e.sum();
        T* o = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] = e[static_cast<Eigen::Index>(c)] / total;
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [rows, cols](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * cols;
            const T* g = self.grad.data() + r * cols;
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
            T* dx = nx.grad.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) dx[c] += y[c] * (g[c] - dot);
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T epsilon) {
    const std::size_t cols = last_dim(x.shape());
    if (gain.shape() != Shape{cols}) dimension_error("layer_norm", x.shape(), gain.shape());
    if (bias.shape() != Shape{cols}) dimension_error("layer_norm", x.shape(), bias.shape());
    const std::size_t rows = x.size() / cols;
    std::vector<T> out(x.size());
    auto normed = std::make_shared<std::vector<T>>(x.size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    const T* px = x.data().data();
    const T* pg = gain.data().data();
    const T* pbias = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = px + r * cols;
        T mean = 0;
        for (std::size_t c = 0; c < cols; ++c) mean += in[c];
        mean /= T(cols);
        T var = 0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
        var /= T(cols);
        T rs = T(1) / std::sqrt(var + epsilon);
        (*rstd)[r] = rs;
        for (std::size_t c = 0; c < cols; ++c) {
            T xh = (in[c] - mean) * rs;
            (*normed)[r * cols + c] = xh;
            out[r * cols + c] = xh * pg[c] + pbias[c];
        }
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x, gain, bias},
                                  [rows, cols, normed, rstd](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        Node<T>& ng = *self.parents[1];
        Node<T>& nb = *self.parents[2];
        if (ng.requires_grad) ng.ensure_grad();
        if (nb.requires_grad) nb.ensure_grad();
        if (nx.requires_grad) nx.ensure_grad();
        std::vector<T> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* g = self.grad.data() + r * cols;
            const T* xh = normed->data() + r * cols;
            T mean_d = 0;
            T mean_dx = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                if (ng.requires_grad) ng.grad[c] += g[c] * xh[c];
                if (nb.requires_grad) nb.grad[c] += g[c];
                dxhat[c] = g[c] * ng.value[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xh[c];
            }
            if (!nx.requires_grad) continue;
            mean_d /= T(cols);
            mean_dx /= T(cols);
            T* dx = nx.grad.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) dx[c] += (*rstd)[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
    if (table.rank() != 2) dimension_error("embedding", table.shape(), Shape{ids.size()});
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    std::vector<T> out(ids.size() * d);
    const T* pt = table.data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw InputError("embedding id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(vocab) + " rows",
                             i);
        }
        std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return Tensor<T>::make_result({ids.size(), d}, std::move(out), {table},
                                  [saved = std::move(saved), d](Node<T>& self) {
        Node<T>& nt = *self.parents[0];
        nt.ensure_grad();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            T* dst = nt.grad.data() + static_cast<std::size_t>(saved[i]) * d;
            const T* src = self.grad.data() + i * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }
    });
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value) {
    if (mask.size() != x.size()) dimension_error("masked_fill", x.shape(), Shape{mask.size()});
    std::vector<T> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (mask[i]) out[i] = value;
    }
    std::vector<std::uint8_t> saved(mask.begin(), mask.end());
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [saved = std::move(saved)](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (!saved[i]) nx.grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_index) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
        dimension_error("cross_entropy", logits.shape(), Shape{targets.size()});
    }
    const std::size_t rows = logits.dim(0);
    const std::size_t cols = logits.dim(1);
    std::size_t counted = 0;
    for (int t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= cols) {
            throw InputError("cross_entropy target " + std::to_string(t) + " outside " + std::to_string(cols) +
                                 " classes",
                             counted);
        }
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: every target is ignored");

    auto probs = std::make_shared<std::vector<T>>(logits.size());
    const T* pl = logits.data().data();
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_index) continue;
        const T* in = pl + r * cols;
        T* p = probs->data() + r * cols;
        T mx = *std::max_element(in, in + cols);
        T s = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] = std::exp(in[c] - mx);
            s += p[c];
        }
        T lse = mx + std::log(s);
        total += lse - in[targets[r]];
        for (std::size_t c = 0; c < cols; ++c) p[c] /= s;
    }
    const T inv_count = T(1) / T(counted);
    std::vector<int> saved(targets.begin(), targets.end());
    return Tensor<T>::make_result({}, {total * inv_count}, {logits},
                                  [=, saved = std::move(saved)](Node<T>& self) {
        Node<T>& nl = *self.parents[0];
        nl.ensure_grad();
        const T g = self.grad[0] * inv_count;
        for (std::size_t r = 0; r < rows; ++r) {
            if (saved[r] == ignore_index) continue;
            const T* p = probs->data() + r * cols;
            T* dst = nl.grad.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += g * p[c];
            dst[saved[r]] -= g;
        }
    });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool train) {
    if (!train || rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const T keep_scale = T(1) / T(1.0 - rate);
    // Each 64-bit draw yields four 16-bit uniforms; an element is dropped when
    // its uniform falls below rate * 2^16.
    const auto threshold = static_cast<std::uint32_t>(std::lround(rate * 65536.0));
    auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
    std::vector<T> out(x.size());
    const T* px = x.data().data();
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (i % 4 == 0) bits = rng();
        const auto u = static_cast<std::uint32_t>(bits & 0xFFFF);
        bits >>= 16;
        (*keep)[i] = u >= threshold ? 1 : 0;
        out[i] = (*keep)[i] ? px[i] * keep_scale : T(0);
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [keep, keep_scale](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if ((*keep)[i]) nx.grad[i] += self.grad[i] * keep_scale;
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) dimension_error("reshape", x.shape(), shape);
    std::vector<T> out(x.data().begin(), x.data().end());
    return Tensor<T>::make_result(std::move(shape), std::move(out), {x}, [](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> swap_middle(const Tensor<T>& x) {
    if (x.rank() != 4) dimension_error("swap_middle", x.shape(), Shape{4});
    const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
    std::vector<T> out(x.size());
    const T* px = x.data().data();
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t k = 0; k < c; ++k)
                std::copy_n(px + ((i * b + j) * c + k) * d, d, out.data() + ((i * c + k) * b + j) * d);
    return Tensor<T>::make_result({a, c, b, d}, std::move(out), {x}, [=](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < b; ++j)
                for (std::size_t k = 0; k < c; ++k) {
                    T* dst = nx.grad.data() + ((i * b + j) * c + k) * d;
                    const T* src = self.grad.data() + ((i * c + k) * b + j) * d;
                    for (std::size_t l = 0; l < d; ++l) dst[l] += src[l];
                }
    });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    const std::size_t cols = last_dim(x.shape());
    const std::size_t n = x.size() / cols;
    std::vector<T> out(rows.size() * cols);
    const T* px = x.data().data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) throw InputError("gather_rows index " + std::to_string(rows[i]) + " out of " +
                                               std::to_string(n) + " rows",
                                           i);
        std::copy_n(px + rows[i] * cols, cols, out.data() + i * cols);
    }
    std::vector<std::size_t> saved(rows.begin(), rows.end());
    return Tensor<T>::make_result({rows.size(), cols}, std::move(out), {x},
                                  [saved = std::move(saved), cols](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            T* dst = nx.grad.data() + saved[i] * cols;
            const T* src = self.grad.data() + i * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = 0;
    for (T v : x.data()) total += v;
    return Tensor<T>::make_result({}, {total}, {x}, [](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        nx.ensure_grad();
        for (auto& g : nx.grad) g += self.grad[0];
    });
}

#define TRANSFO_INSTANTIATE(T)                                                                      \
    template class Tensor<T>;                                                                       \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Transpose);                       \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> scale(const Tensor<T>&, T);                                                  \
    template Tensor<T> relu(const Tensor<T>&);                                                      \
    template Tensor<T> softmax(const Tensor<T>&);                                                   \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                           \
    template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, T);             \
    template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>, int);                  \
    template Tensor<T> dropout(const Tensor<T>&, double, Rng&, bool);                               \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
    template Tensor<T> swap_middle(const Tensor<T>&);                                               \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                 \
    template Tensor<T> sum(const Tensor<T>&);

TRANSFO_INSTANTIATE(float)
TRANSFO_INSTANTIATE(double)

#undef TRANSFO_INSTANTIATE

}  // namespace transfo::ad
