#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dam/tensor.hpp"

namespace dam {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while its tape lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const { return tape_->value(*this); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t axis) const { return value().dim(axis); }
    std::size_t size() const { return value().size(); }
    bool requires_grad() const { return tape_->requires_grad(*this); }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Counters for guarded numeric edge cases hit while building a graph.
struct TapeDiagnostics {
    std::size_t zero_norm_guards = 0;    // l2 normalisation fell back to the epsilon floor
    std::size_t degenerate_std = 0;      // sample std requested with fewer than two rows

    // Opt-in log of every piecewise decision (ReLU sign, max-pool winner) in graph order. In
    // `record` mode the ops append their decisions; in `replay` mode they take the logged ones
    // instead, which evaluates the logged pass's linear piece at nearby inputs.
    enum class BranchMode { off, record, replay };
    BranchMode branch_mode = BranchMode::off;
    std::vector<std::uint32_t> branch_log;
    std::size_t branch_cursor = 0;
    std::size_t branch_overrides = 0;  // replayed decisions that differ from the op's own

    std::uint32_t decide(std::uint32_t own) {
        if (branch_mode == BranchMode::record) {
            branch_log.push_back(own);
            return own;
        }
        if (branch_mode == BranchMode::replay) {
            if (branch_cursor >= branch_log.size()) throw std::logic_error("branch log exhausted during replay");
            const std::uint32_t logged = branch_log[branch_cursor++];
            branch_overrides += logged != own;
            return logged;
        }
        return own;
    }
};

/// Ordered record of primitive applications. Backward replays it once, newest first.
///
/// Leaves either own their value or reference an external tensor (model parameters), in which
/// case the referenced tensor must outlive the tape and stay unmodified until the tape is gone.
template <typename T>
class Tape {
public:
    /// Receives the gradient of the recorded output and accumulates into its inputs.
    using Backward = std::function<void(Tape&, const Tensor<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, {}, "constant"); }

    Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
        return push(std::move(value), nullptr, requires_grad, {}, "leaf");
    }

    /// Leaf aliasing an externally owned tensor without copying it.
    /// When `grad_sink` is given, gradients for this leaf accumulate directly into it; it must have
    /// the parameter's shape and outlive the tape.
    Var<T> parameter(const Tensor<T>& external, bool requires_grad = true, Tensor<T>* grad_sink = nullptr) {
        if (grad_sink && grad_sink->shape() != external.shape())
            throw ShapeError("gradient sink shape " + to_string(grad_sink->shape()) + " does not match parameter " +
                             to_string(external.shape()));
        Var<T> v = push(Tensor<T>{}, &external, requires_grad, {}, "parameter");
        nodes_.back().sink = grad_sink;
        return v;
    }

    /// Records a primitive output. The backward closure is dropped when no input needs gradients.
    Var<T> record(Tensor<T> value, bool requires_grad, Backward backward, const char* op = "op") {
        if (!value.all_finite()) {
            throw NumericError(std::string("non-finite value produced by ") + op + " with shape " +
                               to_string(value.shape()));
        }
        if (!requires_grad) backward = {};
        return push(std::move(value), nullptr, requires_grad, std::move(backward), op);
    }

    const Tensor<T>& value(Var<T> v) const {
        const Node& n = nodes_.at(v.id());
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }

    /// Gradient accumulated so far; empty when the node was never reached.
    const Tensor<T>& grad(Var<T> v) const {
        const Node& n = nodes_.at(v.id());
        return n.sink ? *n.sink : n.grad;
    }

    /// Name of the primitive that produced `v`.
    const char* op(Var<T> v) const { return nodes_.at(v.id()).op; }

    /// Adds `delta` into the gradient slot of `v` (no-op for nodes that do not require grad).
    void accumulate(Var<T> v, const Tensor<T>& delta) {
        Tensor<T>* slot = grad_slot(v);
        if (!slot) return;
        T* g = slot->raw();
        const T* d = delta.raw();
        for (std::size_t i = 0, e = slot->size(); i < e; ++i) g[i] += d[i];
    }

    /// Mutable gradient buffer for in-place accumulation by primitives.
    Tensor<T>* grad_slot(Var<T> v) {
        Node& n = nodes_.at(v.id());
        if (!n.requires_grad) return nullptr;
        if (n.sink) return n.sink;
        if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
        return &n.grad;
    }

    /// Seeds d(root)/d(root) = 1 and runs every reachable backward closure in reverse order.
    void backward(Var<T> root) {
        if (value(root).size() != 1) {
            throw ShapeError("backward requires a scalar root, got shape " + to_string(value(root).shape()));
        }
        backward(root, Tensor<T>(value(root).shape(), T{1}));
    }

    void backward(Var<T> root, const Tensor<T>& seed) {
        if (seed.shape() != value(root).shape()) throw ShapeError("backward seed shape mismatch");
        accumulate(root, seed);
        visited_.clear();
        for (std::size_t id = root.id() + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.backward || n.grad.empty()) continue;
            visited_.push_back(id);
            // Inputs always have smaller ids, so the closure never touches this node's own grad.
            Tensor<T> g = std::move(n.grad);
            if (profiler_) {
                const auto start = std::chrono::steady_clock::now();
                n.backward(*this, g);
                profiler_(n.op, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
            } else {
                n.backward(*this, g);
            }
            nodes_[id].grad = std::move(g);
        }
    }

    /// Node ids whose backward closure ran during the last backward(), in execution order.
    const std::vector<std::size_t>& last_backward_order() const noexcept { return visited_; }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Called with (op, seconds) after each backward closure; for profiling.
    void set_profiler(std::function<void(const char*, double)> f) { profiler_ = std::move(f); }
    TapeDiagnostics& diagnostics() noexcept { return diag_; }
    const TapeDiagnostics& diagnostics() const noexcept { return diag_; }

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
        const char* op = "";
        Tensor<T>* sink = nullptr;
    };

    Var<T> push(Tensor<T> value, const Tensor<T>* external, bool requires_grad, Backward backward, const char* op) {
        nodes_.push_back(Node{std::move(value), external, Tensor<T>{}, requires_grad, std::move(backward), op});
        return Var<T>(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
    std::vector<std::size_t> visited_;
    TapeDiagnostics diag_;
    std::function<void(const char*, double)> profiler_;
};

}  // namespace dam
