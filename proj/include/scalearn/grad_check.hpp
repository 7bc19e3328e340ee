#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "scalearn/ops.hpp"
#include "scalearn/tape.hpp"

namespace scalearn {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
};

// Central-difference check of reverse-mode gradients. loss_fn must be a
// deterministic closure over the given parameters (dropout disabled) and is
// re-evaluated after each perturbation. Relative error per scalar is
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|). Intended to run
// on double tensors; the per-op tests instantiate it that way.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor<T>>>& params,
                           double eps) {
    if (eps <= 0) throw ContractError("grad_check: eps must be positive");

    // Analytic pass.
    std::vector<std::vector<T>> analytic;
    {
        for (const auto& [name, p] : params) {
            if (!p.requires_grad())
                throw ContractError("grad_check: parameter " + name + " does not require grad");
            p.zero_grad();
        }
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> loss = loss_fn();
        if (loss.numel() != 1) throw ContractError("grad_check: loss_fn must return a scalar");
        if (!loss.all_finite()) throw NumericError("grad_check: non-finite loss at base point");
        tape.backward(loss);
        for (const auto& [name, p] : params) {
            analytic.push_back(p.has_grad() ? p.grad() : std::vector<T>(p.numel(), T(0)));
        }
    }

    auto eval = [&](const std::string& pname) -> double {
        Tensor<T> loss = loss_fn();
        if (!loss.all_finite())
            throw NumericError("grad_check: non-finite loss while perturbing parameter " + pname);
        return double(loss.item());
    };

    GradCheckResult result;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const auto& name = params[pi].first;
        const Tensor<T>& p = params[pi].second;
        for (size_t i = 0; i < p.numel(); ++i) {
            const T saved = p.at(i);
            p.at(i) = saved + T(eps);
            const double up = eval(name);
            p.at(i) = saved - T(eps);
            const double down = eval(name);
            p.at(i) = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = double(analytic[pi][i]);
            const double rel =
                std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = name;
                result.worst_index = i;
            }
        }
        p.zero_grad();
    }
    return result;
}

}  // namespace scalearn
