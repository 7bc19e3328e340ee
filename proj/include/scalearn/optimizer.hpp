#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "scalearn/tensor.hpp"

namespace scalearn {

// Decoupled weight-decay Adam with bias-corrected moments. Weight decay is
// scaled by the scheduled learning rate, and parameters that received no
// gradient in a step are left untouched.
template <typename T>
class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.99;
        double eps = 1e-6;
        double weight_decay = 0.01;
    };

    AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, Options opt)
        : opt_(opt) {
        slots_.reserve(params.size());
        for (auto& [name, p] : params) {
            slots_.push_back(Slot{name, p, std::vector<T>(p.numel(), T(0)),
                                  std::vector<T>(p.numel(), T(0))});
        }
    }

    void step(double lr_t) {
        if (lr_t < 0) throw ContractError("adamw: negative learning rate");
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
        for (Slot& slot : slots_) {
            if (!slot.param.has_grad()) continue;
            const std::vector<T>& g = slot.param.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                if (!std::isfinite(double(g[i])))
                    throw NumericError("non-finite gradient in parameter " + slot.name +
                                       " at step " + std::to_string(t_));
                const double gi = double(g[i]);
                slot.m[i] = T(opt_.beta1 * double(slot.m[i]) + (1.0 - opt_.beta1) * gi);
                slot.v[i] = T(opt_.beta2 * double(slot.v[i]) + (1.0 - opt_.beta2) * gi * gi);
                const double mhat = double(slot.m[i]) / bc1;
                const double vhat = double(slot.v[i]) / bc2;
                const double update =
                    mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * double(slot.param.at(i));
                slot.param.at(i) = T(double(slot.param.at(i)) - lr_t * update);
            }
        }
    }

    void zero_grad() {
        for (Slot& slot : slots_) slot.param.zero_grad();
    }

    int64_t step_count() const { return t_; }

private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        std::vector<T> m, v;
    };

    std::vector<Slot> slots_;
    Options opt_;
    int64_t t_ = 0;
};

// Linear decay to zero over the training horizon, no warmup.
inline double linear_decay_lr(double base_lr, int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return base_lr;
    const double frac = double(step) / double(total_steps);
    return base_lr * std::max(0.0, 1.0 - frac);
}

}  // namespace scalearn
