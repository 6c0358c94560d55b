#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "facelet/core/autograd.hpp"

namespace facelet {

template <class T>
struct BasicAdamState {
    std::uint64_t step = 0;
    BasicTensor<T> m;
    BasicTensor<T> v;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

using AdamState = BasicAdamState<float>;

/// One bias-corrected Adam update. The gradient is left for the caller to reset.
template <class T>
void adam_step(BasicParameter<T>& param, BasicAdamState<T>& state) {
    if (state.m.empty()) {
        state.m = BasicTensor<T>::zeros(param.value.shape());
        state.v = BasicTensor<T>::zeros(param.value.shape());
    }
    if (state.m.shape() != param.value.shape() || param.grad.shape() != param.value.shape())
        throw ShapeError("adam_step: state/gradient shape does not match parameter " +
                         shape_str(param.value.shape()));
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < param.value.numel(); ++i) {
        const double g = param.grad[i];
        const double m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        const double v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double update = state.lr * (m / c1) / (std::sqrt(v / c2) + state.eps);
        param.value[i] = static_cast<T>(param.value[i] - update);
    }
}

/// Adam over a fixed set of parameters sharing hyper-parameters.
template <class T>
class BasicAdam {
public:
    explicit BasicAdam(std::vector<BasicParameter<T>*> params, double lr = 1e-3) : params_(std::move(params)) {
        states_.resize(params_.size());
        set_lr(lr);
    }

    void set_lr(double lr) {
        for (auto& s : states_) s.lr = lr;
    }
    double lr() const { return states_.empty() ? 0.0 : states_.front().lr; }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) adam_step(*params_[i], states_[i]);
    }

    /// Multiplies every gradient by s (mini-batch averaging).
    void scale_grads(T s) {
        for (auto* p : params_)
            for (auto& g : p->grad.storage()) g *= s;
    }

private:
    std::vector<BasicParameter<T>*> params_;
    std::vector<BasicAdamState<T>> states_;
};

using Adam = BasicAdam<float>;

}  // namespace facelet
