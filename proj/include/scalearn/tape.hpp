#pragma once

#include <functional>
#include <vector>

#include "scalearn/tensor.hpp"

namespace scalearn {

// Reverse-mode tape. Ops append one record per executed operation, so the
// record list is in execution (topological) order by construction; backward
// replays it once, in reverse. A tape belongs to a single training run and
// must not be shared across threads while live.
template <typename T>
class Tape {
public:
    struct Record {
        const char* op;
        std::function<void()> backward;
    };

    static Tape*& current() {
        thread_local Tape* active = nullptr;
        return active;
    }

    // RAII activation: ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape& tape) : prev_(current()) { current() = &tape; }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(const char* op, std::function<void()> backward) {
        records_.push_back({op, std::move(backward)});
    }

    size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    void clear() { records_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from the loss. Gradients add across
    // multiple uses and across repeated backward calls; callers zero grads
    // between optimization steps.
    void backward(Tensor<T> loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss tensor");
        }
        if (!loss.requires_grad()) {
            throw ContractError("backward on a detached graph: loss does not require grad");
        }
        if (records_.empty()) {
            throw ContractError("backward on an empty tape");
        }
        if (!std::isfinite(double(loss.item()))) {
            throw NumericError("backward on non-finite loss");
        }
        loss.ensure_grad()[0] += T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            it->backward();
        }
    }

private:
    std::vector<Record> records_;
};

template <typename T>
inline bool grad_enabled() {
    return Tape<T>::current() != nullptr;
}

}  // namespace scalearn
