#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mwa/adapters.hpp"
#include "mwa/ops.hpp"
#include "mwa/parameter.hpp"
#include "mwa/random.hpp"

namespace mwa {

enum class ModalityTag { vision = 0, language = 1 };

constexpr int kNumModalities = 2;

inline int modality_index(ModalityTag m) { return static_cast<int>(m); }

inline const char* modality_name(ModalityTag m) {
    return m == ModalityTag::vision ? "vision" : "language";
}

struct BackboneConfig {
    int d = 128;
    int layers = 4;
    int heads = 4;
    int ffn_hidden = 512;
    int embed_dim_out = 64;
    int vocab_size = 512;
    int patch_input_dim = 48;
    int max_tokens = 16;  // per modality, excluding the CLS slot

    bool operator==(const BackboneConfig&) const = default;

    void validate() const {
        if (d <= 0 || layers <= 0 || heads <= 0 || ffn_hidden <= 0 || embed_dim_out <= 0 ||
            vocab_size <= 0 || patch_input_dim <= 0 || max_tokens <= 0)
            throw std::invalid_argument("backbone config: all dimensions must be positive");
        if (d % heads != 0)
            throw std::invalid_argument("backbone config: d (" + std::to_string(d) +
                                        ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
};

/// One expert FFN: its pre-FFN LayerNorm plus the two projection layers.
template <typename T>
struct ExpertParams {
    Parameter<T>* ln_gamma = nullptr;
    Parameter<T>* ln_beta = nullptr;
    Parameter<T>* w1 = nullptr;  // [d × ffn_hidden]
    Parameter<T>* b1 = nullptr;  // [ffn_hidden]
    Parameter<T>* w2 = nullptr;  // [ffn_hidden × d]
    Parameter<T>* b2 = nullptr;  // [d]
};

/// Shared-attention block: one self-attention sublayer for all tokens, then
/// one FFN expert per modality. Adapter slots are empty until attached.
template <typename T>
struct BlockParams {
    Parameter<T>* attn_ln_gamma = nullptr;
    Parameter<T>* attn_ln_beta = nullptr;
    Parameter<T>* wq = nullptr;
    Parameter<T>* bq = nullptr;
    Parameter<T>* wk = nullptr;
    Parameter<T>* bk = nullptr;
    Parameter<T>* wv = nullptr;
    Parameter<T>* bv = nullptr;
    Parameter<T>* wo = nullptr;
    Parameter<T>* bo = nullptr;
    std::array<ExpertParams<T>, kNumModalities> experts;

    std::array<std::optional<BottleneckParams<T>>, kNumModalities> ke;
    std::optional<BottleneckParams<T>> ae;
    T ke_alpha = T(1);
    T ae_alpha = T(1);
};

/// A batch of token sequences entering or leaving a block. All sequences in
/// the batch share one per-position modality layout; the CLS token sits at
/// cls_index (position 0 for sequences built by the encoders).
template <typename T>
struct TokenSequence {
    Tensor<T> features;  // [batch × tokens × d]
    std::vector<ModalityTag> tags;
    int cls_index = 0;

    int batch() const { return features.dim(0); }
    int tokens() const { return features.dim(1); }
};

template <typename T>
Tensor<T> expert_ffn(const Tensor<T>& a, const ExpertParams<T>& e) {
    return linear(relu(linear(a, e.w1->tensor, e.b1->tensor)), e.w2->tensor, e.b2->tensor);
}

/// Pure expert routing: row i is transformed by the FFN matching row_tags[i]
/// and by nothing else. Rows are regrouped per expert so each expert runs as
/// one batched matmul.
template <typename T>
Tensor<T> route_ffn(const Tensor<T>& x, const std::vector<ModalityTag>& row_tags,
                    const std::array<const ExpertParams<T>*, kNumModalities>& experts) {
    detail::require_2d(x, "route_ffn");
    if (static_cast<std::int64_t>(row_tags.size()) != x.dim(0))
        throw std::invalid_argument("route_ffn: tag count " + std::to_string(row_tags.size()) +
                                    " does not match row count " + std::to_string(x.dim(0)));
    Tensor<T> out;
    bool first = true;
    for (int m = 0; m < kNumModalities; ++m) {
        std::vector<std::int64_t> idx;
        for (size_t r = 0; r < row_tags.size(); ++r)
            if (modality_index(row_tags[r]) == m) idx.push_back(static_cast<std::int64_t>(r));
        if (idx.empty()) continue;
        if (experts[static_cast<size_t>(m)] == nullptr)
            throw std::invalid_argument(std::string("route_ffn: no expert for modality ") +
                                        modality_name(static_cast<ModalityTag>(m)));
        Tensor<T> part = scatter_rows(expert_ffn(gather_rows(x, idx), *experts[static_cast<size_t>(m)]),
                                      idx, x.dim(0));
        out = first ? part : add(out, part);
        first = false;
    }
    if (first) throw std::invalid_argument("route_ffn: empty input");
    return out;
}

/// Expert FFN sublayer with the knowledge-extractor branch. The extractor
/// reads the same normalized activations as the FFN, and its output joins
/// the residual stream additively: FFN(LN(x')) + alpha · bottleneck(LN(x')) + x'.
template <typename T>
Tensor<T> ke_sublayer(const Tensor<T>& x_prime, const ExpertParams<T>& e,
                      const BottleneckParams<T>* ke, T ke_alpha, T eps) {
    Tensor<T> a = layer_norm(x_prime, e.ln_gamma->tensor, e.ln_beta->tensor, eps);
    Tensor<T> f = expert_ffn(a, e);
    if (ke != nullptr) f = add(f, scale(bottleneck_core(a, *ke), ke_alpha));
    return add(f, x_prime);
}

/// Self-attention over the full sequence (pre-normalized input expected).
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& x, const BlockParams<T>& p, int batch, int tokens,
                              int heads) {
    Tensor<T> q = linear(x, p.wq->tensor, p.bq->tensor);
    Tensor<T> k = linear(x, p.wk->tensor, p.bk->tensor);
    Tensor<T> v = linear(x, p.wv->tensor, p.bv->tensor);
    return linear(attention(q, k, v, batch, tokens, heads), p.wo->tensor, p.bo->tensor);
}

/// One full block: shared pre-LN self-attention with residual, per-modality
/// expert FFN sublayers (with extractor branches when attached), then the
/// alignment-enhancer residual over all tokens jointly.
template <typename T>
TokenSequence<T> block_forward(const TokenSequence<T>& seq, const BlockParams<T>& block, int heads,
                               T eps) {
    const int B = seq.batch();
    const int Tk = seq.tokens();
    if (seq.features.ndim() != 3)
        throw std::invalid_argument("block_forward: features must be [batch × tokens × d], got " +
                                    shape_str(seq.features.shape()));
    if (static_cast<int>(seq.tags.size()) != Tk)
        throw std::invalid_argument("block_forward: tag count does not match token count");
    if (Tk < 1) throw std::invalid_argument("block_forward: sequence needs at least one token");
    const int d = seq.features.dim(2);
    if (d != block.attn_ln_gamma->tensor.dim(0))
        throw std::invalid_argument("block_forward: feature width does not match block dimension");

    const std::int64_t R = static_cast<std::int64_t>(B) * Tk;
    Tensor<T> x = seq.features.reshaped({static_cast<int>(R), d});

    Tensor<T> a = layer_norm(x, block.attn_ln_gamma->tensor, block.attn_ln_beta->tensor, eps);
    Tensor<T> h = add(x, multihead_attention(a, block, B, Tk, heads));

    Tensor<T> y;
    bool first = true;
    for (int m = 0; m < kNumModalities; ++m) {
        std::vector<std::int64_t> idx;
        for (std::int64_t r = 0; r < R; ++r)
            if (modality_index(seq.tags[static_cast<size_t>(r % Tk)]) == m)
                idx.push_back(r);
        if (idx.empty()) continue;
        const auto& ke_slot = block.ke[static_cast<size_t>(m)];
        Tensor<T> ym = ke_sublayer(gather_rows(h, idx), block.experts[static_cast<size_t>(m)],
                                   ke_slot ? &*ke_slot : nullptr, block.ke_alpha, eps);
        Tensor<T> part = scatter_rows(ym, idx, R);
        y = first ? part : add(y, part);
        first = false;
    }
    if (block.ae) y = ae_apply(y, *block.ae, block.ae_alpha, eps);

    TokenSequence<T> out;
    out.features = y.reshaped({B, Tk, d});
    out.tags = seq.tags;
    out.cls_index = seq.cls_index;
    return out;
}

/// Aggregate parameter accounting. Fractions are over the whole model
/// (backbone plus any attached adapters).
struct ParamCount {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
    std::int64_t backbone = 0;
    std::int64_t ke = 0;
    std::int64_t ae = 0;

    double trainable_fraction() const {
        return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total);
    }
};

/// Two-modality transformer with shared self-attention and per-modality
/// expert FFNs, plus paired image/text encoders that meet in one retrieval
/// embedding space. Construction is fully determined by (config, seed).
template <typename T>
class Model {
public:
    static constexpr T kLnEps = static_cast<T>(1e-5);
    /// Adapter down-projections start hotter than backbone fan-in so the
    /// zero-output adapter branch picks up useful gradient signal within a
    /// short fine-tune; attach-time behavior is unchanged (up-projections are
    /// zero, so the branch output is exactly zero regardless of this gain).
    static constexpr double kAdapterDownGain = 4.0;

    Model(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
        cfg_.validate();
        RandomSource rng(derive_seed(seed_, "model-init"));
        const int d = cfg_.d;

        patch_w_ = &init_matrix("patch_embed.w", cfg_.patch_input_dim, d, rng);
        patch_b_ = &init_zeros("patch_embed.b", {d});
        token_embed_ = &init_normal("token_embed", {cfg_.vocab_size, d}, rng);
        for (int m = 0; m < kNumModalities; ++m) {
            const std::string mn = modality_name(static_cast<ModalityTag>(m));
            cls_[static_cast<size_t>(m)] = &init_normal("cls." + mn, {d}, rng);
            pos_[static_cast<size_t>(m)] = &init_normal("pos." + mn, {cfg_.max_tokens + 1, d}, rng);
        }

        blocks_.resize(static_cast<size_t>(cfg_.layers));
        for (int i = 0; i < cfg_.layers; ++i) {
            const std::string bp = "block." + std::to_string(i) + ".";
            BlockParams<T>& blk = blocks_[static_cast<size_t>(i)];
            blk.attn_ln_gamma = &init_ones(bp + "attn.ln.gamma", {d});
            blk.attn_ln_beta = &init_zeros(bp + "attn.ln.beta", {d});
            blk.wq = &init_matrix(bp + "attn.wq", d, d, rng);
            blk.bq = &init_zeros(bp + "attn.bq", {d});
            blk.wk = &init_matrix(bp + "attn.wk", d, d, rng);
            blk.bk = &init_zeros(bp + "attn.bk", {d});
            blk.wv = &init_matrix(bp + "attn.wv", d, d, rng);
            blk.bv = &init_zeros(bp + "attn.bv", {d});
            blk.wo = &init_matrix(bp + "attn.wo", d, d, rng);
            blk.bo = &init_zeros(bp + "attn.bo", {d});
            for (int m = 0; m < kNumModalities; ++m) {
                const std::string ep = bp + "ffn." + modality_name(static_cast<ModalityTag>(m)) + ".";
                ExpertParams<T>& e = blk.experts[static_cast<size_t>(m)];
                e.ln_gamma = &init_ones(ep + "ln.gamma", {d});
                e.ln_beta = &init_zeros(ep + "ln.beta", {d});
                e.w1 = &init_matrix(ep + "w1", d, cfg_.ffn_hidden, rng);
                e.b1 = &init_zeros(ep + "b1", {cfg_.ffn_hidden});
                e.w2 = &init_matrix(ep + "w2", cfg_.ffn_hidden, d, rng);
                e.b2 = &init_zeros(ep + "b2", {d});
            }
        }

        final_ln_gamma_ = &init_ones("final_ln.gamma", {d});
        final_ln_beta_ = &init_zeros("final_ln.beta", {d});
        for (int m = 0; m < kNumModalities; ++m) {
            const std::string mn = modality_name(static_cast<ModalityTag>(m));
            proj_w_[static_cast<size_t>(m)] = &init_matrix("proj." + mn + ".w", d, cfg_.embed_dim_out, rng);
            proj_b_[static_cast<size_t>(m)] = &init_zeros("proj." + mn + ".b", {cfg_.embed_dim_out});
        }
        backbone_count_ = store_.total_count();
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const BackboneConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }
    std::vector<BlockParams<T>>& blocks() { return blocks_; }
    const std::vector<BlockParams<T>>& blocks() const { return blocks_; }
    bool adapters_attached() const { return adapters_attached_; }
    const AdapterConfig& adapter_config() const { return adapter_cfg_; }
    Parameter<T>& token_embedding() { return *token_embed_; }

    /// Register both adapter components on every block. Down projections get
    /// the same fan-in init as backbone weights; up projections start at zero
    /// so the adapted model initially computes exactly the backbone function.
    void attach_adapters(const AdapterConfig& acfg) {
        if (adapters_attached_) throw std::logic_error("adapters are already attached to this model");
        if (acfg.ke_mid < 0 || acfg.ae_mid < 0)
            throw std::invalid_argument("adapter mid-dimensions must be non-negative");
        if (acfg.ke_active() && acfg.ke_mid >= cfg_.d)
            throw std::invalid_argument("extractor mid-dimension " + std::to_string(acfg.ke_mid) +
                                        " must be below model dimension " + std::to_string(cfg_.d));
        if (acfg.ae_active() && acfg.ae_mid >= cfg_.d)
            throw std::invalid_argument("enhancer mid-dimension " + std::to_string(acfg.ae_mid) +
                                        " must be below model dimension " + std::to_string(cfg_.d));
        adapter_cfg_ = acfg;
        adapters_attached_ = true;
        RandomSource rng(derive_seed(seed_, "adapter-init"));
        for (int i = 0; i < cfg_.layers; ++i) {
            const std::string bp = "block." + std::to_string(i) + ".";
            BlockParams<T>& blk = blocks_[static_cast<size_t>(i)];
            blk.ke_alpha = static_cast<T>(acfg.effective_ke_alpha());
            blk.ae_alpha = static_cast<T>(acfg.effective_ae_alpha());
            if (acfg.ke_active())
                for (int m = 0; m < kNumModalities; ++m) {
                    const std::string kp = bp + "ke." + modality_name(static_cast<ModalityTag>(m)) + ".";
                    blk.ke[static_cast<size_t>(m)] =
                        init_bottleneck(kp, acfg.ke_mid, /*own_ln=*/false, rng, ke_names_);
                }
            if (acfg.ae_active())
                blk.ae = init_bottleneck(bp + "ae.", acfg.ae_mid, /*own_ln=*/true, rng, ae_names_);
        }
    }

    /// Freeze every backbone parameter; adapters (if any) stay trainable.
    /// Returns the trainable parameter names in registration order.
    std::vector<std::string> freeze_backbone() {
        std::vector<std::string> trainable;
        for (Parameter<T>* p : store_.all()) {
            const bool is_adapter = adapter_name_set_.count(p->name) > 0;
            p->set_frozen(!is_adapter);
            if (is_adapter) trainable.push_back(p->name);
        }
        return trainable;
    }

    ParamCount count_params() const {
        ParamCount c;
        c.total = store_.total_count();
        c.trainable = store_.trainable_count();
        c.backbone = backbone_count_;
        for (const auto& n : ke_names_) c.ke += store_.find(n)->tensor.numel();
        for (const auto& n : ae_names_) c.ae += store_.find(n)->tensor.numel();
        return c;
    }

    /// patches: [batch × n_patches × patch_input_dim] → unit-norm rows
    /// [batch × embed_dim_out].
    Tensor<T> encode_images(const Tensor<T>& patches) const {
        if (patches.ndim() != 3)
            throw std::invalid_argument("encode_images expects [batch × patches × features], got " +
                                        shape_str(patches.shape()));
        const int B = patches.dim(0);
        const int P = patches.dim(1);
        if (patches.dim(2) != cfg_.patch_input_dim)
            throw std::invalid_argument("encode_images: patch feature width " +
                                        std::to_string(patches.dim(2)) + " does not match configured " +
                                        std::to_string(cfg_.patch_input_dim));
        Tensor<T> x2 = linear(patches.reshaped({B * P, cfg_.patch_input_dim}), patch_w_->tensor,
                              patch_b_->tensor);
        return encode_common(x2, B, P, ModalityTag::vision);
    }

    /// ids: batch·len token ids laid out row-major → unit-norm rows
    /// [batch × embed_dim_out].
    Tensor<T> encode_texts(const std::vector<std::int32_t>& ids, int batch, int len) const {
        if (batch <= 0 || len <= 0 || ids.size() != static_cast<size_t>(batch) * static_cast<size_t>(len))
            throw std::invalid_argument("encode_texts: id buffer does not match batch × len");
        Tensor<T> x2 = embedding_lookup(token_embed_->tensor, ids);
        return encode_common(x2, batch, len, ModalityTag::language);
    }

private:
    Parameter<T>& init_matrix(const std::string& name, int rows, int cols, RandomSource& rng,
                              double gain = 1.0) {
        Tensor<T> t({rows, cols});
        const double bound = gain / std::sqrt(static_cast<double>(rows));
        T* p = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.uniform(-bound, bound));
        return store_.add(name, std::move(t));
    }

    Parameter<T>& init_normal(const std::string& name, Shape shape, RandomSource& rng) {
        Tensor<T> t(std::move(shape));
        T* p = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(0.02 * rng.normal());
        return store_.add(name, std::move(t));
    }

    Parameter<T>& init_zeros(const std::string& name, Shape shape) {
        return store_.add(name, Tensor<T>::zeros(std::move(shape)));
    }

    Parameter<T>& init_ones(const std::string& name, Shape shape) {
        return store_.add(name, Tensor<T>::full(std::move(shape), T(1)));
    }

    BottleneckParams<T> init_bottleneck(const std::string& prefix, int mid, bool own_ln,
                                        RandomSource& rng, std::vector<std::string>& names) {
        BottleneckParams<T> p;
        p.w_down = &init_matrix(prefix + "w_down", cfg_.d, mid, rng, kAdapterDownGain);
        p.b_down = &init_zeros(prefix + "b_down", {mid});
        p.w_up = &init_zeros(prefix + "w_up", {mid, cfg_.d});
        p.b_up = &init_zeros(prefix + "b_up", {cfg_.d});
        if (own_ln) {
            p.ln_gamma = &init_ones(prefix + "ln.gamma", {cfg_.d});
            p.ln_beta = &init_zeros(prefix + "ln.beta", {cfg_.d});
        }
        const char* suffixes[] = {"w_down", "b_down", "w_up", "b_up", "ln.gamma", "ln.beta"};
        const int n = own_ln ? 6 : 4;
        for (int i = 0; i < n; ++i) {
            names.push_back(prefix + suffixes[i]);
            adapter_name_set_.insert(prefix + suffixes[i]);
        }
        return p;
    }

    Tensor<T> encode_common(const Tensor<T>& tokens2d, int B, int len, ModalityTag modality) const {
        if (len > cfg_.max_tokens)
            throw std::invalid_argument("sequence length " + std::to_string(len) +
                                        " exceeds configured maximum " + std::to_string(cfg_.max_tokens));
        const int d = cfg_.d;
        const int Tk = len + 1;  // CLS prepended at position 0
        const std::int64_t R = static_cast<std::int64_t>(B) * Tk;
        const size_t mi = static_cast<size_t>(modality_index(modality));

        std::vector<std::int64_t> cls_idx(static_cast<size_t>(B));
        std::vector<std::int64_t> tok_idx(static_cast<size_t>(B) * len);
        for (int b = 0; b < B; ++b) {
            cls_idx[static_cast<size_t>(b)] = static_cast<std::int64_t>(b) * Tk;
            for (int t = 0; t < len; ++t)
                tok_idx[static_cast<size_t>(b) * len + t] = static_cast<std::int64_t>(b) * Tk + 1 + t;
        }
        Tensor<T> x = add(scatter_rows(tile_rows(cls_[mi]->tensor, B), cls_idx, R),
                          scatter_rows(tokens2d, tok_idx, R));

        std::vector<std::int64_t> pos_idx(static_cast<size_t>(Tk));
        for (int t = 0; t < Tk; ++t) pos_idx[static_cast<size_t>(t)] = t;
        Tensor<T> pos_slice = gather_rows(pos_[mi]->tensor, pos_idx).reshaped({Tk * d});
        x = add_broadcast_rows(x.reshaped({B, Tk * d}), pos_slice).reshaped({B, Tk, d});

        TokenSequence<T> seq;
        seq.features = x;
        seq.tags.assign(static_cast<size_t>(Tk), modality);
        seq.cls_index = 0;
        for (const BlockParams<T>& blk : blocks_) seq = block_forward(seq, blk, cfg_.heads, kLnEps);

        Tensor<T> flat = seq.features.reshaped({static_cast<int>(R), d});
        flat = layer_norm(flat, final_ln_gamma_->tensor, final_ln_beta_->tensor, kLnEps);
        Tensor<T> cls_rows = gather_rows(flat, cls_idx);
        Tensor<T> emb = linear(cls_rows, proj_w_[mi]->tensor, proj_b_[mi]->tensor);
        return l2_normalize_rows(emb);
    }

    BackboneConfig cfg_;
    std::uint64_t seed_ = 0;
    ParameterStore<T> store_;
    std::vector<BlockParams<T>> blocks_;
    Parameter<T>* patch_w_ = nullptr;
    Parameter<T>* patch_b_ = nullptr;
    Parameter<T>* token_embed_ = nullptr;
    std::array<Parameter<T>*, kNumModalities> cls_{};
    std::array<Parameter<T>*, kNumModalities> pos_{};
    Parameter<T>* final_ln_gamma_ = nullptr;
    Parameter<T>* final_ln_beta_ = nullptr;
    std::array<Parameter<T>*, kNumModalities> proj_w_{};
    std::array<Parameter<T>*, kNumModalities> proj_b_{};
    std::int64_t backbone_count_ = 0;
    bool adapters_attached_ = false;
    AdapterConfig adapter_cfg_;
    std::vector<std::string> ke_names_;
    std::vector<std::string> ae_names_;
    std::set<std::string> adapter_name_set_;
};

}  // namespace mwa
