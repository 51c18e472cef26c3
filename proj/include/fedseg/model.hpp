#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedseg/ops.hpp"
#include "fedseg/optim.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

struct Conv2dLayer {
    TensorPtr weight, bias;
    int stride = 1;
    int padding = 0;

    TensorPtr forward(const TensorPtr& x) const {
        return conv2d(x, weight, bias, stride, padding);
    }
};

struct BatchNorm2dLayer {
    TensorPtr gamma, beta, running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    TensorPtr forward(const TensorPtr& x, bool train) const {
        return batchnorm2d(x, gamma, beta, running_mean, running_var, train, momentum, eps);
    }
};

// He-uniform: U(+-sqrt(6 / fan_in)) with fan_in = in_ch * kh * kw.
inline TensorPtr he_uniform(Rng& rng, Shape s) {
    const double fan_in = static_cast<double>(s.c) * s.h * s.w;
    const double limit = std::sqrt(6.0 / fan_in);
    auto t = Tensor::create(s, true);
    for (auto& v : t->data) v = rng.uniform(-limit, limit);
    return t;
}

// Ordered registry of named parameters (trainable) and buffers (BatchNorm
// running statistics). Registration order is the deterministic exchange and
// checkpoint order.
class Model {
  public:
    void register_parameter(const std::string& name, TensorPtr t) {
        t->requires_grad = true;
        add(params_, name, std::move(t));
    }

    void register_buffer(const std::string& name, TensorPtr t) {
        t->requires_grad = false;
        add(buffers_, name, std::move(t));
    }

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<Parameter>& buffers() { return buffers_; }
    const std::vector<Parameter>& buffers() const { return buffers_; }

    // Parameters followed by buffers: everything exchanged in a round.
    std::vector<Parameter> state_dict() const {
        std::vector<Parameter> all = params_;
        all.insert(all.end(), buffers_.begin(), buffers_.end());
        return all;
    }

    // Copies values (not pointers) from an aligned state dict.
    void load_state(const std::vector<Parameter>& state) {
        auto all = state_dict();
        if (state.size() != all.size())
            throw StateError("load_state: expected " + std::to_string(all.size()) +
                             " tensors, got " + std::to_string(state.size()));
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (state[i].name != all[i].name)
                throw StateError("load_state: name mismatch " + state[i].name + " vs " +
                                 all[i].name);
            if (!(state[i].value->shape == all[i].value->shape))
                throw StateError("load_state: shape mismatch for " + state[i].name);
            all[i].value->data = state[i].value->data;
        }
    }

    // Deep copy of the current state (detached from the live tensors).
    std::vector<Parameter> state_clone() const {
        std::vector<Parameter> out;
        out.reserve(params_.size() + buffers_.size());
        for (const auto& p : state_dict()) {
            out.push_back({p.name, Tensor::from_vector(p.value->shape, p.value->data)});
        }
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value->numel();
        return n;
    }

  private:
    void add(std::vector<Parameter>& into, const std::string& name, TensorPtr t) {
        if (index_.count(name)) throw StateError("duplicate tensor name " + name);
        index_[name] = true;
        into.push_back({name, std::move(t)});
    }

    std::vector<Parameter> params_, buffers_;
    std::unordered_map<std::string, bool> index_;
};

}  // namespace fedseg
