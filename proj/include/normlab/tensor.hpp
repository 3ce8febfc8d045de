#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "normlab/error.hpp"
#include "normlab/shape.hpp"

namespace normlab {

// Allocator that skips value-initialization for trivial scalar types, so op
// outputs that are fully overwritten do not pay a memset pass.
template <typename T>
struct uninit_allocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = uninit_allocator<U>;
    };
    template <class U>
    void construct(U*) noexcept {}
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <typename T>
using buffer_t = std::vector<T, uninit_allocator<T>>;

template <typename T>
struct TensorData {
    Shape shape;
    buffer_t<T> values;
    buffer_t<T> grad;  // empty until needed; same length as values once allocated
    bool requires_grad = false;
    int tape_id = -1;  // node index in the active GradientTape, -1 for leaves
};

// Value-semantic handle onto shared dense storage. Values are treated as
// immutable once an op has produced them; grad buffers and parameter
// updates are the only sanctioned mutation paths.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(const Shape& s) { return Tensor(s, buffer_t<T>(static_cast<std::size_t>(s.numel()), T(0))); }

    // Uninitialized storage; caller must overwrite every element.
    static Tensor empty(const Shape& s) { return Tensor(s, buffer_t<T>(static_cast<std::size_t>(s.numel()))); }

    static Tensor full(const Shape& s, T v) {
        return Tensor(s, buffer_t<T>(static_cast<std::size_t>(s.numel()), v));
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, buffer_t<T>{v}); }

    static Tensor from(const Shape& s, const std::vector<T>& vals) {
        if (static_cast<std::int64_t>(vals.size()) != s.numel())
            throw ShapeError("value count " + std::to_string(vals.size()) + " does not match shape " + s.str());
        buffer_t<T> buf(vals.size());
        std::copy(vals.begin(), vals.end(), buf.begin());
        return Tensor(s, std::move(buf));
    }

    static Tensor from(const Shape& s, std::initializer_list<T> vals) {
        if (static_cast<std::int64_t>(vals.size()) != s.numel())
            throw ShapeError("value count " + std::to_string(vals.size()) + " does not match shape " + s.str());
        buffer_t<T> buf(vals.size());
        std::copy(vals.begin(), vals.end(), buf.begin());
        return Tensor(s, std::move(buf));
    }

    static Tensor from(const Shape& s, buffer_t<T> vals) {
        if (static_cast<std::int64_t>(vals.size()) != s.numel())
            throw ShapeError("value count " + std::to_string(vals.size()) + " does not match shape " + s.str());
        return Tensor(s, std::move(vals));
    }

    static Tensor randn(const Shape& s, std::mt19937& rng, T stddev = T(1), T mean = T(0)) {
        std::normal_distribution<double> dist(0.0, 1.0);
        buffer_t<T> v(static_cast<std::size_t>(s.numel()));
        for (auto& x : v) x = static_cast<T>(dist(rng)) * stddev + mean;
        return Tensor(s, std::move(v));
    }

    static Tensor randu(const Shape& s, std::mt19937& rng, T lo = T(0), T hi = T(1)) {
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        buffer_t<T> v(static_cast<std::size_t>(s.numel()));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        return Tensor(s, std::move(v));
    }

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d_->shape; }
    std::int64_t numel() const { return d_ ? d_->shape.numel() : 0; }

    std::span<const T> values() const { return {d_->values.data(), d_->values.size()}; }
    std::span<T> values_mut() { return {d_->values.data(), d_->values.size()}; }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + d_->shape.str());
        return d_->values[0];
    }

    // Row-major element access, indices right-aligned like Shape::dim4.
    T at(int i0, int i1 = 0, int i2 = 0, int i3 = 0) const {
        const Shape& s = d_->shape;
        std::int64_t idx = 0;
        int ix[4] = {i0, i1, i2, i3};
        for (int k = 0; k < s.rank(); ++k) idx = idx * s[k] + ix[k];
        return d_->values[static_cast<std::size_t>(idx)];
    }

    bool requires_grad() const { return d_ && d_->requires_grad; }

    Tensor& set_requires_grad(bool b = true) {
        d_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return d_ && !d_->grad.empty(); }

    std::span<const T> grad() const {
        if (!has_grad()) throw UsageError("grad accessed before backward");
        return {d_->grad.data(), d_->grad.size()};
    }

    std::span<T> grad_mut() {
        ensure_grad();
        return {d_->grad.data(), d_->grad.size()};
    }

    void ensure_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
    }

    void zero_grad() {
        if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    int tape_id() const { return d_ ? d_->tape_id : -1; }

    std::shared_ptr<TensorData<T>>& ptr() { return d_; }
    const std::shared_ptr<TensorData<T>>& ptr() const { return d_; }

    bool all_finite() const {
        for (const T& v : d_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    Tensor(const Shape& s, buffer_t<T> vals) : d_(std::make_shared<TensorData<T>>()) {
        d_->shape = s;
        d_->values = std::move(vals);
    }

    std::shared_ptr<TensorData<T>> d_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace normlab
