#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "mwa/finite_diff.hpp"
#include "mwa/model.hpp"
#include "mwa/random.hpp"

using namespace mwa;

namespace {

constexpr double kEps = 1e-5;

void fill_uniform(Tensor<double>& t, RandomSource& rng, double lo = -0.5, double hi = 0.5) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
}

/// Standalone block with its own parameter store, so block-level functions
/// can be exercised without a full model.
struct BlockFixture {
    ParameterStore<double> store;
    BlockParams<double> block;
    int d = 0;
    int hidden = 0;

    BlockFixture(int d_, int hidden_, std::uint64_t seed, bool zero_weights = false,
                 bool random_ln = false)
        : d(d_), hidden(hidden_) {
        RandomSource rng(seed);
        auto mat = [&](const std::string& n, int r, int c) {
            Tensor<double> t({r, c});
            if (!zero_weights) fill_uniform(t, rng);
            return &store.add(n, std::move(t));
        };
        auto vec = [&](const std::string& n, int len, double v) {
            return &store.add(n, Tensor<double>::full({len}, v));
        };
        auto ln_pair = [&](const std::string& n, Parameter<double>*& g, Parameter<double>*& b) {
            if (random_ln) {
                Tensor<double> gt({d}), bt({d});
                fill_uniform(gt, rng, 0.5, 1.5);
                fill_uniform(bt, rng, -0.3, 0.3);
                g = &store.add(n + ".gamma", std::move(gt));
                b = &store.add(n + ".beta", std::move(bt));
            } else {
                g = vec(n + ".gamma", d, 1.0);
                b = vec(n + ".beta", d, 0.0);
            }
        };

        ln_pair("attn.ln", block.attn_ln_gamma, block.attn_ln_beta);
        block.wq = mat("attn.wq", d, d);
        block.bq = vec("attn.bq", d, 0.0);
        block.wk = mat("attn.wk", d, d);
        block.bk = vec("attn.bk", d, 0.0);
        block.wv = mat("attn.wv", d, d);
        block.bv = vec("attn.bv", d, 0.0);
        block.wo = mat("attn.wo", d, d);
        block.bo = vec("attn.bo", d, 0.0);
        for (int m = 0; m < kNumModalities; ++m) {
            const std::string ep = std::string("ffn.") + modality_name(static_cast<ModalityTag>(m)) + ".";
            ExpertParams<double>& e = block.experts[static_cast<size_t>(m)];
            ln_pair(ep + "ln", e.ln_gamma, e.ln_beta);
            e.w1 = mat(ep + "w1", d, hidden);
            e.b1 = vec(ep + "b1", hidden, 0.0);
            e.w2 = mat(ep + "w2", hidden, d);
            e.b2 = vec(ep + "b2", d, 0.0);
        }
    }

    BottleneckParams<double> add_bottleneck(const std::string& prefix, int mid, bool own_ln,
                                            RandomSource& rng, bool zero_up = true) {
        BottleneckParams<double> p;
        Tensor<double> wd({d, mid});
        fill_uniform(wd, rng);
        p.w_down = &store.add(prefix + "w_down", std::move(wd));
        p.b_down = &store.add(prefix + "b_down", Tensor<double>::zeros({mid}));
        Tensor<double> wu({mid, d});
        if (!zero_up) fill_uniform(wu, rng);
        p.w_up = &store.add(prefix + "w_up", std::move(wu));
        p.b_up = &store.add(prefix + "b_up", Tensor<double>::zeros({d}));
        if (own_ln) {
            p.ln_gamma = &store.add(prefix + "ln.gamma", Tensor<double>::full({d}, 1.0));
            p.ln_beta = &store.add(prefix + "ln.beta", Tensor<double>::zeros({d}));
        }
        return p;
    }
};

TokenSequence<double> make_sequence(int batch, int tokens, int d, std::uint64_t seed,
                                    std::vector<ModalityTag> tags) {
    TokenSequence<double> seq;
    seq.features = Tensor<double>({batch, tokens, d});
    RandomSource rng(seed);
    fill_uniform(seq.features, rng, 0.05, 1.0);  // positive values: exact residual-identity checks
    seq.tags = std::move(tags);
    seq.cls_index = 0;
    return seq;
}

std::vector<ModalityTag> alternating_tags(int tokens) {
    std::vector<ModalityTag> tags;
    for (int t = 0; t < tokens; ++t)
        tags.push_back(t % 2 == 0 ? ModalityTag::vision : ModalityTag::language);
    return tags;
}

// ---- straight-line reference implementations (plain loops, no ops.hpp) ----

std::vector<double> ref_layer_norm(const std::vector<double>& x, int rows, int d,
                                   const std::vector<double>& gamma, const std::vector<double>& beta,
                                   double eps) {
    std::vector<double> out(x.size());
    for (int r = 0; r < rows; ++r) {
        double mean = 0;
        for (int j = 0; j < d; ++j) mean += x[static_cast<size_t>(r) * d + j];
        mean /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) {
            const double c = x[static_cast<size_t>(r) * d + j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j)
            out[static_cast<size_t>(r) * d + j] =
                (x[static_cast<size_t>(r) * d + j] - mean) * inv * gamma[static_cast<size_t>(j)] +
                beta[static_cast<size_t>(j)];
    }
    return out;
}

std::vector<double> ref_linear(const std::vector<double>& x, int rows, int in, int out_dim,
                               const std::vector<double>& w, const std::vector<double>& b) {
    std::vector<double> out(static_cast<size_t>(rows) * out_dim);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < out_dim; ++c) {
            double acc = b[static_cast<size_t>(c)];
            for (int j = 0; j < in; ++j)
                acc += x[static_cast<size_t>(r) * in + j] * w[static_cast<size_t>(j) * out_dim + c];
            out[static_cast<size_t>(r) * out_dim + c] = acc;
        }
    return out;
}

std::vector<double> ref_attention(const std::vector<double>& q, const std::vector<double>& k,
                                  const std::vector<double>& v, int batch, int tokens, int d,
                                  int heads) {
    const int hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(q.size(), 0.0);
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h) {
            const int off = h * hd;
            for (int t = 0; t < tokens; ++t) {
                std::vector<double> logits(static_cast<size_t>(tokens));
                for (int s = 0; s < tokens; ++s) {
                    double dot = 0;
                    for (int c = 0; c < hd; ++c)
                        dot += q[(static_cast<size_t>(b) * tokens + t) * d + off + c] *
                               k[(static_cast<size_t>(b) * tokens + s) * d + off + c];
                    logits[static_cast<size_t>(s)] = dot * scale;
                }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double z = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    z += l;
                }
                for (int s = 0; s < tokens; ++s)
                    for (int c = 0; c < hd; ++c)
                        out[(static_cast<size_t>(b) * tokens + t) * d + off + c] +=
                            logits[static_cast<size_t>(s)] / z *
                            v[(static_cast<size_t>(b) * tokens + s) * d + off + c];
            }
        }
    return out;
}

std::vector<double> ref_bottleneck(const std::vector<double>& a, int rows, int d, int mid,
                                   const BottleneckParams<double>& p) {
    std::vector<double> h = ref_linear(a, rows, d, mid, p.w_down->tensor.values(), p.b_down->tensor.values());
    for (double& x : h) x = std::max(0.0, x);
    return ref_linear(h, rows, mid, d, p.w_up->tensor.values(), p.b_up->tensor.values());
}

/// Whole-block reference: the same wiring as block_forward written as one
/// straight-line pass over std::vector buffers.
std::vector<double> ref_block(const BlockFixture& fx, const TokenSequence<double>& seq,
                              int heads, int ke_mid, int ae_mid, double ke_alpha, double ae_alpha) {
    const int B = seq.batch(), Tk = seq.tokens(), d = fx.d;
    const int rows = B * Tk;
    const std::vector<double>& x = seq.features.values();

    std::vector<double> a =
        ref_layer_norm(x, rows, d, fx.block.attn_ln_gamma->tensor.values(),
                       fx.block.attn_ln_beta->tensor.values(), kEps);
    std::vector<double> q = ref_linear(a, rows, d, d, fx.block.wq->tensor.values(), fx.block.bq->tensor.values());
    std::vector<double> k = ref_linear(a, rows, d, d, fx.block.wk->tensor.values(), fx.block.bk->tensor.values());
    std::vector<double> v = ref_linear(a, rows, d, d, fx.block.wv->tensor.values(), fx.block.bv->tensor.values());
    std::vector<double> att = ref_attention(q, k, v, B, Tk, d, heads);
    std::vector<double> h =
        ref_linear(att, rows, d, d, fx.block.wo->tensor.values(), fx.block.bo->tensor.values());
    for (int i = 0; i < rows * d; ++i) h[static_cast<size_t>(i)] += x[static_cast<size_t>(i)];

    std::vector<double> y(static_cast<size_t>(rows) * d);
    for (int r = 0; r < rows; ++r) {
        const int m = modality_index(seq.tags[static_cast<size_t>(r % Tk)]);
        const ExpertParams<double>& e = fx.block.experts[static_cast<size_t>(m)];
        std::vector<double> row(h.begin() + static_cast<std::int64_t>(r) * d,
                                h.begin() + static_cast<std::int64_t>(r + 1) * d);
        std::vector<double> an =
            ref_layer_norm(row, 1, d, e.ln_gamma->tensor.values(), e.ln_beta->tensor.values(), kEps);
        std::vector<double> f1 = ref_linear(an, 1, d, fx.hidden, e.w1->tensor.values(), e.b1->tensor.values());
        for (double& t : f1) t = std::max(0.0, t);
        std::vector<double> f =
            ref_linear(f1, 1, fx.hidden, d, e.w2->tensor.values(), e.b2->tensor.values());
        if (fx.block.ke[static_cast<size_t>(m)]) {
            std::vector<double> bt =
                ref_bottleneck(an, 1, d, ke_mid, *fx.block.ke[static_cast<size_t>(m)]);
            for (int j = 0; j < d; ++j) f[static_cast<size_t>(j)] += ke_alpha * bt[static_cast<size_t>(j)];
        }
        for (int j = 0; j < d; ++j)
            y[static_cast<size_t>(r) * d + j] = f[static_cast<size_t>(j)] + row[static_cast<size_t>(j)];
    }

    if (fx.block.ae) {
        std::vector<double> z = ref_layer_norm(y, rows, d, fx.block.ae->ln_gamma->tensor.values(),
                                               fx.block.ae->ln_beta->tensor.values(), kEps);
        std::vector<double> bt = ref_bottleneck(z, rows, d, ae_mid, *fx.block.ae);
        for (int i = 0; i < rows * d; ++i) y[static_cast<size_t>(i)] += ae_alpha * bt[static_cast<size_t>(i)];
    }
    return y;
}

BackboneConfig micro_config() {
    BackboneConfig cfg;
    cfg.d = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.embed_dim_out = 8;
    cfg.vocab_size = 64;
    cfg.patch_input_dim = 6;
    cfg.max_tokens = 6;
    return cfg;
}

Tensor<double> random_patches(int batch, int patches, int pd, std::uint64_t seed) {
    Tensor<double> t({batch, patches, pd});
    RandomSource rng(seed);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
    return t;
}

std::vector<std::int32_t> random_ids(int count, int vocab, std::uint64_t seed) {
    RandomSource rng(seed);
    std::vector<std::int32_t> ids(static_cast<size_t>(count));
    for (auto& i : ids) i = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
    return ids;
}

}  // namespace

TEST_CASE("single-token attention reduces to the value path") {
    BlockFixture fx(4, 8, 41);
    Tensor<double> x({1, 4});
    RandomSource rng(42);
    fill_uniform(x, rng);
    Tensor<double> full = multihead_attention(x, fx.block, 1, 1, 2);
    Tensor<double> vpath = linear(linear(x, fx.block.wv->tensor, fx.block.bv->tensor),
                                  fx.block.wo->tensor, fx.block.bo->tensor);
    for (int i = 0; i < 4; ++i) CHECK(full.at(i) == vpath.at(i));
}

TEST_CASE("zero value projection leaves only the output bias") {
    BlockFixture fx(4, 8, 43);
    for (std::int64_t i = 0; i < fx.block.wv->tensor.numel(); ++i) fx.block.wv->tensor.at(i) = 0.0;
    for (int i = 0; i < 4; ++i) fx.block.bo->tensor.at(i) = 0.25 * (i + 1);
    Tensor<double> x({6, 4});
    RandomSource rng(44);
    fill_uniform(x, rng);
    Tensor<double> out = multihead_attention(x, fx.block, 2, 3, 2);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 4; ++c) CHECK(out.at(r * 4 + c) == 0.25 * (c + 1));
}

TEST_CASE("two-token one-head attention matches a hand-set oracle") {
    // d=2, tokens=2: q = [[1,0],[0,1]], k = [[1,0],[0,2]], v = [[1,2],[3,4]].
    Tensor<double> q({2, 2}, {1, 0, 0, 1});
    Tensor<double> k({2, 2}, {1, 0, 0, 2});
    Tensor<double> v({2, 2}, {1, 2, 3, 4});
    Tensor<double> out = attention(q, k, v, 1, 2, 1);

    const double s = 1.0 / std::sqrt(2.0);
    // Row 0 logits: (q0·k0, q0·k1)·s = (s, 0); row 1: (0, 2s).
    const double w00 = std::exp(s) / (std::exp(s) + 1.0);
    const double w10 = 1.0 / (1.0 + std::exp(2.0 * s));
    CHECK(out.at(0) == doctest::Approx(w00 * 1 + (1 - w00) * 3).epsilon(1e-12));
    CHECK(out.at(1) == doctest::Approx(w00 * 2 + (1 - w00) * 4).epsilon(1e-12));
    CHECK(out.at(2) == doctest::Approx(w10 * 1 + (1 - w10) * 3).epsilon(1e-12));
    CHECK(out.at(3) == doctest::Approx(w10 * 2 + (1 - w10) * 4).epsilon(1e-12));
}

TEST_CASE("attention matches the per-head loop oracle on random inputs") {
    for (int s = 0; s < 24; ++s) {
        RandomSource rng(derive_seed(300, "attn-oracle", static_cast<std::uint64_t>(s)));
        const int batch = 1 + static_cast<int>(rng.uniform_int(2));
        const int tokens = 1 + static_cast<int>(rng.uniform_int(4));
        const int heads = 1 + static_cast<int>(rng.uniform_int(2));
        const int d = heads * (1 + static_cast<int>(rng.uniform_int(3)));
        Tensor<double> q({batch * tokens, d}), k({batch * tokens, d}), v({batch * tokens, d});
        fill_uniform(q, rng, -1, 1);
        fill_uniform(k, rng, -1, 1);
        fill_uniform(v, rng, -1, 1);
        Tensor<double> out = attention(q, k, v, batch, tokens, heads);
        std::vector<double> want = ref_attention(q.values(), k.values(), v.values(), batch, tokens, d, heads);
        for (std::int64_t i = 0; i < out.numel(); ++i)
            CHECK(out.at(i) == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("route_ffn on a single modality equals the plain expert") {
    BlockFixture fx(6, 12, 45);
    Tensor<double> x({5, 6});
    RandomSource rng(46);
    fill_uniform(x, rng);
    std::vector<ModalityTag> tags(5, ModalityTag::vision);
    std::array<const ExpertParams<double>*, kNumModalities> experts{&fx.block.experts[0],
                                                                    &fx.block.experts[1]};
    Tensor<double> routed = route_ffn(x, tags, experts);
    Tensor<double> direct = expert_ffn(x, fx.block.experts[0]);
    REQUIRE(routed.shape() == direct.shape());
    CHECK(std::memcmp(routed.data(), direct.data(), sizeof(double) * 5 * 6) == 0);
}

TEST_CASE("route_ffn separates tokens by tag exactly") {
    // Zero weights make each expert collapse to its output bias, so the
    // routed output reads back which expert served each row.
    BlockFixture fx(3, 4, 47, /*zero_weights=*/true);
    for (int j = 0; j < 3; ++j) {
        fx.block.experts[0].b2->tensor.at(j) = 10.0;
        fx.block.experts[1].b2->tensor.at(j) = 20.0;
    }
    Tensor<double> x({4, 3});
    RandomSource rng(48);
    fill_uniform(x, rng);
    std::vector<ModalityTag> tags{ModalityTag::language, ModalityTag::vision, ModalityTag::vision,
                                  ModalityTag::language};
    std::array<const ExpertParams<double>*, kNumModalities> experts{&fx.block.experts[0],
                                                                    &fx.block.experts[1]};
    Tensor<double> out = route_ffn(x, tags, experts);
    for (int r = 0; r < 4; ++r) {
        const double want = tags[static_cast<size_t>(r)] == ModalityTag::vision ? 10.0 : 20.0;
        for (int j = 0; j < 3; ++j) CHECK(out.at(r * 3 + j) == want);
    }
}

TEST_CASE("route_ffn validates tags and experts") {
    BlockFixture fx(3, 4, 49);
    Tensor<double> x({2, 3});
    RandomSource rng(50);
    fill_uniform(x, rng);
    std::array<const ExpertParams<double>*, kNumModalities> no_lang{&fx.block.experts[0], nullptr};
    CHECK_THROWS_WITH_AS(
        route_ffn(x, std::vector<ModalityTag>{ModalityTag::language, ModalityTag::vision}, no_lang),
        doctest::Contains("language"), std::invalid_argument);
    CHECK_THROWS_AS(route_ffn(x, std::vector<ModalityTag>{ModalityTag::vision}, no_lang),
                    std::invalid_argument);
}

TEST_CASE("routing exclusivity: perturbing one expert never touches the other modality") {
    const int d = 8, Tk = 6, B = 2;
    TokenSequence<double> seq = make_sequence(B, Tk, d, 51, alternating_tags(Tk));

    BlockFixture fx(d, 16, 52);
    Tensor<double> before = block_forward(seq, fx.block, 2, kEps).features;

    fx.block.experts[modality_index(ModalityTag::language)].w1->tensor.at(5) += 0.37;
    Tensor<double> after = block_forward(seq, fx.block, 2, kEps).features;

    bool language_changed = false;
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < Tk; ++t) {
            const std::int64_t off = (static_cast<std::int64_t>(b) * Tk + t) * d;
            const bool same = std::memcmp(before.data() + off, after.data() + off,
                                          sizeof(double) * d) == 0;
            if (seq.tags[static_cast<size_t>(t)] == ModalityTag::vision) {
                CHECK(same);  // vision rows must be bitwise untouched
            } else if (!same) {
                language_changed = true;
            }
        }
    CHECK(language_changed);
}

TEST_CASE("attention parameters are shared: one perturbation moves both modalities") {
    const int d = 8, Tk = 4, B = 1;
    TokenSequence<double> seq = make_sequence(B, Tk, d, 53, alternating_tags(Tk));
    BlockFixture fx(d, 16, 54);
    Tensor<double> before = block_forward(seq, fx.block, 2, kEps).features;
    fx.block.wq->tensor.at(3) += 0.5;
    Tensor<double> after = block_forward(seq, fx.block, 2, kEps).features;

    bool vision_moved = false, language_moved = false;
    for (int t = 0; t < Tk; ++t) {
        const std::int64_t off = static_cast<std::int64_t>(t) * d;
        const bool same = std::memcmp(before.data() + off, after.data() + off, sizeof(double) * d) == 0;
        if (!same) {
            (seq.tags[static_cast<size_t>(t)] == ModalityTag::vision ? vision_moved : language_moved) =
                true;
        }
    }
    CHECK(vision_moved);
    CHECK(language_moved);
}

TEST_CASE("all-zero weights make the block an identity map") {
    const int d = 6, Tk = 5, B = 2;
    TokenSequence<double> seq = make_sequence(B, Tk, d, 55, alternating_tags(Tk));
    BlockFixture fx(d, 10, 56, /*zero_weights=*/true);
    Tensor<double> out = block_forward(seq, fx.block, 2, kEps).features;
    REQUIRE(out.numel() == seq.features.numel());
    CHECK(std::memcmp(out.data(), seq.features.data(), sizeof(double) * static_cast<size_t>(out.numel())) == 0);
}

TEST_CASE("zero up-projections make the adapted block bitwise equal to the plain block") {
    const int d = 8, Tk = 6, B = 2;
    TokenSequence<double> seq = make_sequence(B, Tk, d, 57, alternating_tags(Tk));

    BlockFixture plain(d, 16, 58, false, /*random_ln=*/true);
    Tensor<double> base = block_forward(seq, plain.block, 2, kEps).features;

    BlockFixture adapted(d, 16, 58, false, /*random_ln=*/true);  // same seed, same weights
    RandomSource arng(59);
    adapted.block.ke[0] = adapted.add_bottleneck("ke.vision.", 2, false, arng, /*zero_up=*/true);
    adapted.block.ke[1] = adapted.add_bottleneck("ke.language.", 2, false, arng, /*zero_up=*/true);
    adapted.block.ae = adapted.add_bottleneck("ae.", 4, true, arng, /*zero_up=*/true);
    Tensor<double> with = block_forward(seq, adapted.block, 2, kEps).features;

    CHECK(std::memcmp(base.data(), with.data(), sizeof(double) * static_cast<size_t>(base.numel())) == 0);
}

TEST_CASE("block_forward matches the straight-line reference implementation") {
    for (int s = 0; s < 6; ++s) {
        const int d = 8, Tk = 5, B = 2, heads = 2, ke_mid = 3, ae_mid = 4;
        TokenSequence<double> seq =
            make_sequence(B, Tk, d, derive_seed(310, "block-x", static_cast<std::uint64_t>(s)),
                          alternating_tags(Tk));
        BlockFixture fx(d, 16, derive_seed(311, "block-w", static_cast<std::uint64_t>(s)), false,
                        /*random_ln=*/true);
        RandomSource arng(derive_seed(312, "block-a", static_cast<std::uint64_t>(s)));
        fx.block.ke[0] = fx.add_bottleneck("ke.vision.", ke_mid, false, arng, /*zero_up=*/false);
        fx.block.ke[1] = fx.add_bottleneck("ke.language.", ke_mid, false, arng, /*zero_up=*/false);
        fx.block.ae = fx.add_bottleneck("ae.", ae_mid, true, arng, /*zero_up=*/false);
        fx.block.ke_alpha = 0.7;
        fx.block.ae_alpha = 1.3;

        Tensor<double> got = block_forward(seq, fx.block, heads, kEps).features;
        std::vector<double> want = ref_block(fx, seq, heads, ke_mid, ae_mid, 0.7, 1.3);
        for (std::int64_t i = 0; i < got.numel(); ++i)
            CHECK(got.at(i) == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-10));
    }
}

TEST_CASE("block_forward validates its input") {
    BlockFixture fx(4, 8, 60);
    TokenSequence<double> bad = make_sequence(1, 3, 4, 61, alternating_tags(3));
    bad.tags.pop_back();
    CHECK_THROWS_AS(block_forward(bad, fx.block, 2, kEps), std::invalid_argument);

    TokenSequence<double> wrong_width = make_sequence(1, 3, 6, 62, alternating_tags(3));
    BlockFixture fx4(4, 8, 63);
    CHECK_THROWS_AS(block_forward(wrong_width, fx4.block, 2, kEps), std::invalid_argument);
}

TEST_CASE("encoded embeddings are unit-norm and deterministic") {
    Model<double> model(micro_config(), 77);
    Tensor<double> patches = random_patches(4, 5, 6, 78);
    Tensor<double> img1 = model.encode_images(patches);
    Tensor<double> img2 = model.encode_images(patches);
    REQUIRE(img1.shape() == Shape{4, 8});
    CHECK(std::memcmp(img1.data(), img2.data(), sizeof(double) * 32) == 0);
    for (int r = 0; r < 4; ++r) {
        double norm = 0;
        for (int c = 0; c < 8; ++c) norm += img1.at(r * 8 + c) * img1.at(r * 8 + c);
        CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
    }

    std::vector<std::int32_t> ids = random_ids(3 * 4, 64, 79);
    Tensor<double> txt = model.encode_texts(ids, 3, 4);
    REQUIRE(txt.shape() == Shape{3, 8});
    for (int r = 0; r < 3; ++r) {
        double norm = 0;
        for (int c = 0; c < 8; ++c) norm += txt.at(r * 8 + c) * txt.at(r * 8 + c);
        CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("a non-CLS token change moves the embedding") {
    Model<double> model(micro_config(), 80);
    std::vector<std::int32_t> ids = random_ids(5, 64, 81);
    Tensor<double> a = model.encode_texts(ids, 1, 5);
    ids[3] = (ids[3] + 17) % 64;
    Tensor<double> b = model.encode_texts(ids, 1, 5);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 8) != 0);
}

TEST_CASE("encoder input validation") {
    Model<double> model(micro_config(), 82);
    CHECK_THROWS_AS(model.encode_texts(random_ids(7, 64, 83), 1, 7), std::invalid_argument);  // > max_tokens
    std::vector<std::int32_t> bad = random_ids(4, 64, 84);
    bad[2] = 64;  // vocabulary is [0, 64)
    CHECK_THROWS_WITH_AS(model.encode_texts(bad, 1, 4), doctest::Contains("vocabulary"),
                         std::invalid_argument);
    CHECK_THROWS_AS(model.encode_images(random_patches(2, 3, 5, 85)), std::invalid_argument);  // width 5 ≠ 6
}

TEST_CASE("a text-only loss leaves every vision expert untouched") {
    Model<double> model(micro_config(), 86);
    std::vector<std::int32_t> ids = random_ids(2 * 3, 64, 87);
    zero_grads(model.params().all());
    {
        GradTape<double> tape;
        Tensor<double> emb = model.encode_texts(ids, 2, 3);
        tape.backward(sum_all(emb));
    }
    CHECK(model.params().find("block.0.ffn.language.w1")->tensor.has_grad());
    CHECK_FALSE(model.params().find("block.0.ffn.vision.w1")->tensor.has_grad());
    CHECK_FALSE(model.params().find("block.1.ffn.vision.w2")->tensor.has_grad());
    CHECK_FALSE(model.params().find("patch_embed.w")->tensor.has_grad());
    CHECK_FALSE(model.params().find("cls.vision")->tensor.has_grad());
}

TEST_CASE("whole-model gradients match central differences") {
    BackboneConfig cfg = micro_config();
    Model<double> model(cfg, 88);
    AdapterConfig acfg;
    acfg.ke_mid = 2;
    acfg.ae_mid = 3;
    model.attach_adapters(acfg);  // everything stays trainable: backbone + adapters

    const int B = 2, P = 3, L = 2;
    Tensor<double> patches = random_patches(B, P, cfg.patch_input_dim, 89);
    std::vector<std::int32_t> ids = random_ids(B * L, cfg.vocab_size, 90);
    auto loss = [&]() {
        Tensor<double> s = matmul_nt(model.encode_images(patches), model.encode_texts(ids, B, L));
        return mean_diag(log_softmax(scale(s, 1.0 / 0.07)));
    };
    // The 1/0.07 scale amplifies curvature; shrink the step so truncation error
    // stays well under the tolerance.
    GradCheckResult r = finite_diff_check(loss, model.params().all(), 1e-5);
    INFO("worst parameter: " << r.worst_param << " coord " << r.worst_coord);
    CHECK(r.max_rel_error <= 1e-5);
    CHECK(r.coords_checked > 2500);  // the whole micro model was exercised
}
