#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwa/parameter.hpp"

namespace mwa {

enum class OptimizerKind { adamw, sgd };

struct OptimizerHyper {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // applied to matrices (ndim >= 2) only
};

/// AdamW with decoupled weight decay, plus a plain-SGD mode for
/// hand-checkable tests. Bound to a fixed ordered parameter list; updates
/// are deterministic given identical gradients.
template <typename T>
class Optimizer {
public:
    Optimizer(std::vector<Parameter<T>*> params, OptimizerHyper hyper)
        : params_(std::move(params)), hyper_(hyper) {
        for (auto* p : params_) {
            if (p->frozen)
                throw std::invalid_argument("optimizer update set contains frozen parameter: " + p->name);
        }
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(static_cast<size_t>(params_[i]->tensor.numel()), 0.0);
            v_[i].assign(static_cast<size_t>(params_[i]->tensor.numel()), 0.0);
        }
    }

    const std::vector<Parameter<T>*>& params() const { return params_; }

    /// One update using gradients currently accumulated on the parameters.
    /// lr_scale multiplies the base learning rate (schedule hook).
    void step(double lr_scale = 1.0) {
        ++t_;
        const double lr = hyper_.lr * lr_scale;
        const double bias1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
        const double bias2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Parameter<T>& p = *params_[i];
            if (p.frozen)
                throw std::invalid_argument("attempt to update frozen parameter: " + p.name);
            const bool decay = p.tensor.ndim() >= 2;
            const double wd = decay ? hyper_.weight_decay : 0.0;
            const std::int64_t n = p.tensor.numel();
            const bool has_grad = p.tensor.has_grad();
            for (std::int64_t j = 0; j < n; ++j) {
                const double g = has_grad ? static_cast<double>(p.tensor.grad()[static_cast<size_t>(j)]) : 0.0;
                if (!std::isfinite(g))
                    throw std::runtime_error("non-finite gradient for parameter " + p.name);
                double upd;
                if (hyper_.kind == OptimizerKind::sgd) {
                    upd = lr * g;
                } else {
                    double& m = m_[i][static_cast<size_t>(j)];
                    double& v = v_[i][static_cast<size_t>(j)];
                    m = hyper_.beta1 * m + (1.0 - hyper_.beta1) * g;
                    v = hyper_.beta2 * v + (1.0 - hyper_.beta2) * g * g;
                    upd = lr * (m / bias1) / (std::sqrt(v / bias2) + hyper_.eps);
                }
                const double base = static_cast<double>(p.tensor.at(j));
                p.tensor.at(j) = static_cast<T>(base - upd - lr * wd * base);
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->tensor.clear_grad();
    }

    std::int64_t steps_taken() const { return t_; }

private:
    std::vector<Parameter<T>*> params_;
    OptimizerHyper hyper_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

/// Cosine decay from 1 to 0 across total_steps (scale for step index i).
inline double cosine_decay(std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0) return 1.0;
    if (step >= total_steps) return 0.0;
    const double x = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

}  // namespace mwa
