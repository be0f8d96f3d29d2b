#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mwa/parameter.hpp"
#include "mwa/tensor.hpp"

namespace mwa {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::int64_t worst_coord = -1;
    double worst_autodiff = 0.0;
    double worst_numeric = 0.0;
    std::int64_t coords_checked = 0;
};

/// Central-difference verification of reverse-mode gradients, meant to run
/// in 64-bit precision. loss_fn must be a pure function of the parameter
/// values. Relative error is |a−b| / max(1, |a|, |b|); frozen parameters
/// are skipped entirely.
inline GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                         const std::vector<Parameter<double>*>& params,
                                         double eps = 1e-4) {
    std::vector<Parameter<double>*> checked;
    for (auto* p : params)
        if (!p->frozen) checked.push_back(p);

    zero_grads(checked);
    {
        GradTape<double> tape;
        Tensor<double> loss = loss_fn();
        tape.backward(loss);
    }

    GradCheckResult result;
    for (auto* p : checked) {
        const Tensor<double> autodiff = p->tensor.grad_tensor();
        double* value = p->tensor.data();
        for (std::int64_t i = 0; i < p->tensor.numel(); ++i) {
            const double saved = value[i];
            value[i] = saved + eps;
            const double up = loss_fn().value();
            value[i] = saved - eps;
            const double down = loss_fn().value();
            value[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = autodiff.at(i);
            const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            ++result.coords_checked;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = p->name;
                result.worst_coord = i;
                result.worst_autodiff = a;
                result.worst_numeric = numeric;
            }
        }
    }
    zero_grads(checked);
    return result;
}

}  // namespace mwa
