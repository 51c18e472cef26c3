#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedseg/rng.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0;  // coordinates sitting on a kink (e.g. relu at 0)
};

// Central-difference check of analytic gradients. `forward` must rebuild the
// graph from the current leaf values and return a scalar; it is re-evaluated
// under NoGradGuard for each probe. Coordinates whose one-sided slopes
// disagree are excluded (non-smooth points are not checkable by central
// differences). Above max_coords total coordinates, a seeded random
// subsample is checked instead.
inline GradCheckResult gradcheck(const std::vector<TensorPtr>& leaves,
                                 const std::function<TensorPtr()>& forward, double h = 1e-5,
                                 std::size_t max_coords = 10000,
                                 std::uint64_t subsample_seed = 0x9e3779b9) {
    for (const auto& leaf : leaves) {
        leaf->requires_grad = true;
        leaf->zero_grad();
    }
    TensorPtr loss = forward();
    backward(loss);
    const double f0 = loss->item();

    std::vector<std::pair<std::size_t, std::size_t>> coords;  // (leaf, index)
    for (std::size_t l = 0; l < leaves.size(); ++l)
        for (std::size_t i = 0; i < leaves[l]->data.size(); ++i) coords.emplace_back(l, i);

    if (coords.size() > max_coords) {
        Rng rng(subsample_seed);
        rng.shuffle(coords);
        coords.resize(max_coords);
    }

    auto eval = [&]() {
        NoGradGuard ng;
        return forward()->item();
    };

    GradCheckResult result;
    for (const auto& [l, i] : coords) {
        auto& leaf = *leaves[l];
        const double analytic = leaf.grad.size() == leaf.data.size() ? leaf.grad[i] : 0.0;
        const double orig = leaf.data[i];
        leaf.data[i] = orig + h;
        const double fp = eval();
        leaf.data[i] = orig - h;
        const double fm = eval();
        leaf.data[i] = orig;

        const double fwd = (fp - f0) / h;
        const double bwd = (f0 - fm) / h;
        if (std::abs(fwd - bwd) > 1e-2 * std::max({1.0, std::abs(fwd), std::abs(bwd)})) {
            ++result.excluded;
            continue;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic - numeric) /
                           std::max({1.0, std::abs(analytic), std::abs(numeric)});
        result.max_rel_err = std::max(result.max_rel_err, rel);
        ++result.checked;
    }
    return result;
}

}  // namespace fedseg
