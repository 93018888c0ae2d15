#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward rule whenever gradient recording is enabled and at least one input
// requires a gradient; otherwise they produce plain values. The engine is
// instantiated for float (training) and double (gradient checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace transfo::ad {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient flows in
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_recording_enabled();

template <typename T>
class Tensor {
public:
    using BackwardFn = std::function<void(Node<T>&)>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    /// Extension point for custom ops. `backward` receives the result node;
    /// it must read `node.grad` and accumulate into `node.parents[i]->grad`
    /// for parents that require gradients.
    static Tensor make_result(Shape shape, std::vector<T> value, const std::vector<Tensor>& inputs,
                              BackwardFn backward);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }

    std::span<const T> data() const { return node_->value; }
    /// Writable view; only for leaves (optimizer updates, initialisation, perturbation).
    std::span<T> mutable_data() { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient view; all zeros when none has flowed in yet.
    std::span<const T> grad() const;
    std::span<T> mutable_grad();
    void zero_grad();

    /// Backpropagates from this scalar. Leaf gradients accumulate across
    /// calls until zero_grad(); intermediate gradients are recomputed.
    void backward();

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<Node<T>> node_;
};

enum class Transpose : std::uint8_t { No, Yes };

/// a[..., n, k] x b[k, m] (shared) or b[..., k, m] (same leading dims).
/// With Transpose::Yes, b is laid out as [..., m, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose transpose_b = Transpose::No);

/// Elementwise sum. b may have a's shape or a suffix of it (broadcast over leading dims).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product; same broadcasting rule as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Normalises the last axis, then applies gain and bias of shape [last].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T epsilon = T(1e-5));

/// Rows of table[V, d] selected by ids -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

/// Replaces entries where mask != 0 with value; mask has x's element count.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value);

/// Mean negative log-likelihood of targets under softmax(logits[N, C]); rows
/// whose target equals ignore_index are skipped. Throws ContractError when
/// every row is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_index = -100);

/// Inverted dropout. Returns x itself when train is false or rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool train);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// [a, b, c, d] -> [a, c, b, d]; splits and merges attention heads.
template <typename T>
Tensor<T> swap_middle(const Tensor<T>& x);

/// Views x as [N, last] and returns the selected rows -> [rows.size(), last].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

/// Sum of all elements -> scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

}  // namespace transfo::ad
