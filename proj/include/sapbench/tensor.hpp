#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sapbench/errors.hpp"

namespace sap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

// Dense row-major tensor. Copying a Tensor copies a handle: the payload
// (data and grad buffers) is shared, which is what lets tape closures see
// gradient accumulation and lets the trainer update parameters in place.
// Use clone() for an independent copy. An empty shape is a 0-d scalar.
template <typename T>
class Tensor {
public:
    Tensor() : Tensor(Shape{}) {}

    explicit Tensor(Shape shape) {
        payload_ = std::make_shared<Payload>();
        payload_->shape = std::move(shape);
        payload_->data.assign(shape_numel(payload_->shape), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                 std::to_string(data.size()) + " scalars");
        payload_ = std::make_shared<Payload>();
        payload_->shape = std::move(shape);
        payload_->data = std::move(data);
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (T& x : t.data()) x = v;
        return t;
    }

    const Shape& shape() const noexcept { return payload_->shape; }
    std::size_t ndim() const noexcept { return payload_->shape.size(); }
    std::size_t numel() const noexcept { return payload_->data.size(); }
    std::size_t dim(std::size_t axis) const { return payload_->shape.at(axis); }

    // A Tensor is a handle: const applies to the handle, not the shared
    // payload, so views stay mutable (as with smart pointers). Views are
    // only obtainable from lvalues; on a temporary they would dangle.
    std::span<T> data() const& noexcept { return payload_->data; }
    std::span<T> data() && = delete;

    bool requires_grad() const noexcept { return payload_->requires_grad; }

    // Enabling allocates a zeroed grad buffer; disabling frees it.
    void set_requires_grad(bool on) {
        payload_->requires_grad = on;
        if (on)
            payload_->grad.assign(payload_->data.size(), T(0));
        else {
            payload_->grad.clear();
            payload_->grad.shrink_to_fit();
        }
    }

    std::span<T> grad() const& {
        require_grad_buffer();
        return payload_->grad;
    }
    std::span<T> grad() && = delete;

    void zero_grad() const {
        require_grad_buffer();
        std::fill(payload_->grad.begin(), payload_->grad.end(), T(0));
    }

    void add_to_grad(std::span<const T> g) const {
        require_grad_buffer();
        if (g.size() != payload_->grad.size()) throw DimensionError("add_to_grad: size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) payload_->grad[i] += g[i];
    }

    T item() const {
        if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
        return payload_->data[0];
    }

    T& at(std::size_t flat) const { return payload_->data.at(flat); }

    // Deep copy of the values. Grad state is not copied.
    Tensor clone() const {
        Tensor t(payload_->shape, payload_->data);
        return t;
    }

    // True when both handles point at the same payload.
    bool same_storage(const Tensor& other) const noexcept { return payload_ == other.payload_; }

private:
    struct Payload {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
    };

    void require_grad_buffer() const {
        if (!payload_->requires_grad) throw StateError("tensor does not track gradients");
    }

    std::shared_ptr<Payload> payload_;
};

// Reverse-mode tape. Operations append backward closures in execution
// order, so running them reversed visits the graph in reverse topological
// order exactly once. A tape is consumed by exactly one backward pass.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
    void backward(Tensor<T>& loss) {
        if (consumed_) throw StateError("backward: tape already consumed");
        if (loss.numel() != 1) throw InputError("backward: loss must be a scalar");
        if (!loss.requires_grad()) throw StateError("backward: loss was not produced on this tape");
        consumed_ = true;
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

}  // namespace sap
