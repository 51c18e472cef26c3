#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedseg/tensor.hpp"

namespace fedseg {

// A named trainable tensor. Names are unique within a model and identical
// across all clients in a run, which is what FedAvg aligns on.
struct Parameter {
    std::string name;
    TensorPtr value;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Per-parameter first/second moments plus the shared step counter.
struct AdamWState {
    AdamWConfig cfg;
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;

    static AdamWState init(const std::vector<Parameter>& params, AdamWConfig cfg) {
        AdamWState s;
        s.cfg = cfg;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& p : params) {
            s.m.emplace_back(p.value->data.size(), 0.0);
            s.v.emplace_back(p.value->data.size(), 0.0);
        }
        return s;
    }
};

// AdamW with decoupled weight decay: decay is applied to the value, not
// folded into the gradient.
inline void adamw_step(std::vector<Parameter>& params, AdamWState& state) {
    if (params.size() != state.m.size())
        throw StateError("adamw_step: state sized for " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
    ++state.t;
    const auto& c = state.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].value;
        if (p.grad.size() != p.data.size())
            throw StateError("adamw_step: missing gradient for " + params[i].name);
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            const double g = p.grad[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.data[j] -= c.lr * c.weight_decay * p.data[j];
            p.data[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

inline void sgd_step(std::vector<Parameter>& params, double lr) {
    for (auto& param : params) {
        auto& p = *param.value;
        if (p.grad.size() != p.data.size())
            throw StateError("sgd_step: missing gradient for " + param.name);
        for (std::size_t j = 0; j < p.data.size(); ++j) p.data[j] -= lr * p.grad[j];
    }
}

inline void zero_grads(std::vector<Parameter>& params) {
    for (auto& p : params) p.value->zero_grad();
}

}  // namespace fedseg
