#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

// Adam with bias correction and an optional linear learning-rate decay to
// zero over total_steps updates.
template <class T>
struct AdamState {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    long total_steps = 0;   // 0 disables decay
    long decay_offset = 0;  // updates already spent by an earlier optimizer on the same schedule
    long step = 0;

    struct Slot {
        std::vector<T> m;
        std::vector<T> v;
    };
    std::map<std::string, Slot> slots;

    T effective_lr() const {
        if (total_steps <= 0) return lr;
        const T frac = static_cast<T>(decay_offset + step - 1) / static_cast<T>(total_steps);
        return lr * std::max(T(0), T(1) - frac);
    }
};

template <class T>
void zero_grads(ParamMap<T>& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

// One Adam update over every parameter, reading gradients accumulated on the
// parameter tensors. A parameter with no gradient buffer is treated as
// having zero gradient.
template <class T>
void adam_step(ParamMap<T>& params, AdamState<T>& state) {
    state.step += 1;
    const T eff_lr = state.effective_lr();
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step)));
    for (auto& [name, p] : params) {
        auto& slot = state.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(p.size(), T(0));
            slot.v.assign(p.size(), T(0));
        }
        if (slot.m.size() != p.size()) {
            throw std::invalid_argument("adam_step: state shape mismatch for parameter " + name);
        }
        const bool has_grad = p.has_grad();
        auto& data = p.mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            const T g = has_grad ? p.grad()[i] : T(0);
            slot.m[i] = state.beta1 * slot.m[i] + (T(1) - state.beta1) * g;
            slot.v[i] = state.beta2 * slot.v[i] + (T(1) - state.beta2) * g * g;
            const T mhat = slot.m[i] / bc1;
            const T vhat = slot.v[i] / bc2;
            data[i] -= eff_lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace kdlab
