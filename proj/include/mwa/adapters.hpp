#pragma once

#include <optional>
#include <string>

#include "mwa/ops.hpp"
#include "mwa/parameter.hpp"

namespace mwa {

/// Mid-dimensions and scales for the two adapter components: the knowledge
/// extractor (one per expert FFN, sharing the block's pre-FFN LayerNorm)
/// and the alignment enhancer (one per block, atop the expert pool, with
/// its own trainable LayerNorm). mid == 0 disables a component.
struct AdapterConfig {
    int ke_mid = 8;
    int ae_mid = 16;
    double alpha = 1.0;
    std::optional<double> ke_alpha;  // defaults to alpha
    std::optional<double> ae_alpha;
    bool enable_ke = true;
    bool enable_ae = true;

    double effective_ke_alpha() const { return ke_alpha.value_or(alpha); }
    double effective_ae_alpha() const { return ae_alpha.value_or(alpha); }
    bool ke_active() const { return enable_ke && ke_mid > 0; }
    bool ae_active() const { return enable_ae && ae_mid > 0; }
};

/// Down/up projection pair. The LayerNorm members are set only when the
/// module owns its normalization (the enhancer); the extractor reuses the
/// block's pre-FFN LayerNorm instead.
template <typename T>
struct BottleneckParams {
    Parameter<T>* w_down = nullptr;  // [d × mid]
    Parameter<T>* b_down = nullptr;  // [mid]
    Parameter<T>* w_up = nullptr;    // [mid × d]
    Parameter<T>* b_up = nullptr;    // [d]
    Parameter<T>* ln_gamma = nullptr;
    Parameter<T>* ln_beta = nullptr;

    bool owns_ln() const { return ln_gamma != nullptr; }
    int mid_dim() const { return w_down->tensor.dim(1); }
};

/// ReLU(x_normed · W_down + b_down) · W_up + b_up on an already-normalized
/// input (the shared-LN path of the extractor).
template <typename T>
Tensor<T> bottleneck_core(const Tensor<T>& x_normed, const BottleneckParams<T>& p) {
    return linear(relu(linear(x_normed, p.w_down->tensor, p.b_down->tensor)), p.w_up->tensor, p.b_up->tensor);
}

/// Full adapted-feature branch: normalize, then project through the
/// bottleneck. ln_gamma/ln_beta select which LayerNorm feeds the branch.
template <typename T>
Tensor<T> bottleneck_forward(const Tensor<T>& x_prime, const BottleneckParams<T>& p,
                             const Tensor<T>& ln_gamma, const Tensor<T>& ln_beta, T eps) {
    if (x_prime.last_dim() != p.w_down->tensor.dim(0))
        throw std::invalid_argument("bottleneck_forward: input width " + shape_str(x_prime.shape()) +
                                    " does not match W_down " + shape_str(p.w_down->tensor.shape()));
    return bottleneck_core(layer_norm(x_prime, ln_gamma, ln_beta, eps), p);
}

/// Residual enhancer application: y + alpha · bottleneck(LN_own(y)).
template <typename T>
Tensor<T> ae_apply(const Tensor<T>& y, const BottleneckParams<T>& p, T alpha, T eps) {
    if (!p.owns_ln())
        throw std::invalid_argument("ae_apply requires a bottleneck that owns its LayerNorm");
    Tensor<T> z = layer_norm(y, p.ln_gamma->tensor, p.ln_beta->tensor, eps);
    return add(y, scale(bottleneck_core(z, p), alpha));
}

/// Closed-form adapter parameter count for one configuration; cross-checked
/// against runtime enumeration of what attach actually registered.
inline std::int64_t adapter_param_formula(int layers, int d, const AdapterConfig& cfg) {
    std::int64_t per_block = 0;
    if (cfg.ke_active())
        per_block += 2LL * (2LL * d * cfg.ke_mid + cfg.ke_mid + d);  // one per expert FFN
    if (cfg.ae_active())
        per_block += 2LL * d * cfg.ae_mid + cfg.ae_mid + d + 2LL * d;  // shared, owns its LN
    return static_cast<std::int64_t>(layers) * per_block;
}

}  // namespace mwa
