#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "dam/ops.hpp"
#include "dam/random.hpp"
#include "dam/tape.hpp"
#include "dam/tensor.hpp"

namespace dam {

/// Maps model parameter tensors onto leaves of one tape, creating each leaf on first use.
template <typename T>
class Binding {
public:
    Binding(Tape<T>& tape, bool requires_grad) : tape_(&tape), requires_grad_(requires_grad) {}

    Var<T> operator()(const Tensor<T>& param) {
        auto it = vars_.find(&param);
        if (it != vars_.end()) return it->second;
        Tensor<T>* sink = nullptr;
        if (auto s = sinks_.find(&param); s != sinks_.end()) sink = s->second;
        Var<T> v = tape_->parameter(param, requires_grad_, sink);
        vars_.emplace(&param, v);
        return v;
    }

    /// Routes the gradient of `param` into `sink` (accumulating) instead of a tape-owned buffer.
    /// Must be called before the parameter is first used.
    void set_sink(const Tensor<T>& param, Tensor<T>& sink) {
        if (vars_.count(&param)) throw std::logic_error("gradient sink set after the parameter was bound");
        sinks_[&param] = &sink;
    }

    /// Gradient w.r.t. `param` after backward; nullptr if the parameter never entered the graph
    /// or no gradient reached it.
    const Tensor<T>* grad(const Tensor<T>& param) const {
        auto it = vars_.find(&param);
        if (it == vars_.end()) return nullptr;
        const Tensor<T>& g = tape_->grad(it->second);
        return g.empty() ? nullptr : &g;
    }

    Tape<T>& tape() const noexcept { return *tape_; }
    bool requires_grad() const noexcept { return requires_grad_; }

private:
    Tape<T>* tape_;
    bool requires_grad_;
    std::unordered_map<const Tensor<T>*, Var<T>> vars_;
    std::unordered_map<const Tensor<T>*, Tensor<T>*> sinks_;
};

/// 3x3 conv + batch-norm affine parameters of one block.
template <typename T>
struct ConvBlockParams {
    Tensor<T> kernel;    // [3,3,Cin,Cout]
    Tensor<T> bn_scale;  // [Cout]
    Tensor<T> bn_shift;  // [Cout]

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".kernel", kernel);
        f(prefix + ".bn_scale", bn_scale);
        f(prefix + ".bn_shift", bn_shift);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        f(prefix + ".kernel", kernel);
        f(prefix + ".bn_scale", bn_scale);
        f(prefix + ".bn_shift", bn_shift);
    }
};

/// Single-layer affine map weight·x + bias.
template <typename T>
struct AffineParams {
    Tensor<T> weight;  // [Dout,Din]
    Tensor<T> bias;    // [Dout]

    std::size_t in_dim() const { return weight.dim(1); }
    std::size_t out_dim() const { return weight.dim(0); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

/// Zero-mean He-normal kernel (std = sqrt(2 / fan_in)), BN scale 1 and shift 0.
template <typename T>
ConvBlockParams<T> init_conv_block(std::size_t cin, std::size_t cout, Rng& rng) {
    ConvBlockParams<T> p{Tensor<T>({3, 3, cin, cout}), Tensor<T>({cout}, T{1}), Tensor<T>({cout}, T{0})};
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(9 * cin)));
    for (auto& v : p.kernel.data()) v = static_cast<T>(dist(rng));
    return p;
}

/// Weight ~ N(0, 1/Din), zero bias.
template <typename T>
AffineParams<T> init_affine(std::size_t din, std::size_t dout, Rng& rng) {
    AffineParams<T> p{Tensor<T>({dout, din}), Tensor<T>({dout}, T{0})};
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(din)));
    for (auto& v : p.weight.data()) v = static_cast<T>(dist(rng));
    return p;
}

/// conv3x3 -> BN -> ReLU -> (optional) 2x2 max-pool on a [B,H,W,C] batch.
template <typename T>
Var<T> conv_block(Binding<T>& bind, const ConvBlockParams<T>& p, Var<T> x, bool training, bool pool_after) {
    Var<T> y = conv2d(x, bind(p.kernel));
    y = batch_norm(y, bind(p.bn_scale), bind(p.bn_shift), training);
    y = relu(y);
    return pool_after ? max_pool2x2(y) : y;
}

template <typename T>
Var<T> affine(Binding<T>& bind, const AffineParams<T>& p, Var<T> x) {
    return linear(x, bind(p.weight), bind(p.bias));
}

}  // namespace dam
