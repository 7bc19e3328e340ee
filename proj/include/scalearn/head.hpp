#pragma once

#include <string>
#include <utility>
#include <vector>

#include "scalearn/ops.hpp"

namespace scalearn {

// Classification / regression head on the pooled representation. C = 1 for
// regression. Trained jointly with whatever the stage trains.
template <typename T>
struct TaskHeadT {
    Tensor<T> weight;  // [d x C]
    Tensor<T> bias;    // [C]

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        return {{"head/W", weight}, {"head/b", bias}};
    }

    void set_trainable(bool trainable) {
        weight.set_requires_grad(trainable);
        bias.set_requires_grad(trainable);
    }

    Tensor<T> forward(const Tensor<T>& pooled) const {
        return affine(pooled, weight, bias);
    }

    template <typename U>
    TaskHeadT<U> cast() const {
        TaskHeadT<U> out;
        out.weight = weight.template cast<U>();
        out.bias = bias.template cast<U>();
        return out;
    }
};

using TaskHead = TaskHeadT<float>;

template <typename T>
TaskHeadT<T> head_init(size_t d, size_t n_outputs, Rng& rng) {
    TaskHeadT<T> head;
    head.weight = Tensor<T>::zeros({d, n_outputs});
    for (size_t i = 0; i < head.weight.numel(); ++i)
        head.weight.at(i) = T(rng.normal(0.0, 0.02));
    head.bias = Tensor<T>::zeros({n_outputs});
    return head;
}

}  // namespace scalearn
