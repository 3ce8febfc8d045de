#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab {

// Reverse-mode tape. Ops append nodes in execution order, so the node list
// is already topologically sorted: every parent index precedes its child.
// backward() runs one reverse sweep, invoking each node's pull closure at
// most once, then resets the tape.
template <typename T>
class GradientTape {
public:
    struct Node {
        const char* op;
        std::vector<int> parents;            // tape ids of recorded parents (-1 for leaves)
        std::function<void()> pull;          // accumulates into parents' grad buffers
        std::weak_ptr<TensorData<T>> out;    // the node's output storage
    };

    GradientTape() = default;
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    static GradientTape*& active() {
        thread_local GradientTape* current = nullptr;
        return current;
    }

    int record(const char* op, std::vector<int> parents, std::function<void()> pull,
               const std::shared_ptr<TensorData<T>>& out) {
        int id = static_cast<int>(nodes_.size());
        for (int p : parents)
            if (p >= id) throw UsageError("tape order violated: parent recorded after child");
        nodes_.push_back(Node{op, std::move(parents), std::move(pull), out});
        return id;
    }

    std::size_t size() const { return nodes_.size(); }

    void reset() { nodes_.clear(); }

    // Populates grad buffers of everything the loss depends on, leaves included.
    // The tape is consumed.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1) throw UsageError("backward requires a scalar loss, got shape " + loss.shape().str());
        if (nodes_.empty()) throw UsageError("backward on an empty tape");
        loss.ensure_grad();
        loss.grad_mut()[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            auto out = nodes_[i].out.lock();
            if (!out || out->grad.empty()) continue;  // output unused by the loss
            nodes_[i].pull();
        }
        reset();
    }

    // First recorded node whose output holds a non-finite value, for NaN
    // abort diagnostics. Returns (op name, shape string).
    std::optional<std::pair<std::string, std::string>> first_nonfinite() const {
        for (const Node& n : nodes_) {
            auto out = n.out.lock();
            if (!out) continue;
            for (const T& v : out->values) {
                if (!std::isfinite(static_cast<double>(v)))
                    return std::make_pair(std::string(n.op), out->shape.str());
            }
        }
        return std::nullopt;
    }

private:
    std::vector<Node> nodes_;
};

// RAII activation of a fresh tape on the current thread.
template <typename T>
class TapeScope {
public:
    TapeScope() : prev_(GradientTape<T>::active()) { GradientTape<T>::active() = &tape_; }
    ~TapeScope() { GradientTape<T>::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    GradientTape<T>& tape() { return tape_; }

private:
    GradientTape<T> tape_;
    GradientTape<T>* prev_;
};

// Suppresses recording within a scope (evaluation passes).
template <typename T>
class NoGradScope {
public:
    NoGradScope() : prev_(GradientTape<T>::active()) { GradientTape<T>::active() = nullptr; }
    ~NoGradScope() { GradientTape<T>::active() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    GradientTape<T>* prev_;
};

}  // namespace normlab
