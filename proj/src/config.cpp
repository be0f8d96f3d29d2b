#include "mwa/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <unordered_map>

namespace mwa {

namespace {

struct ParseCtx {
    const std::string& origin;
    int line;
};

[[noreturn]] void fail(const ParseCtx& ctx, const std::string& msg) {
    throw ConfigError(ctx.origin + ":" + std::to_string(ctx.line) + ": " + msg);
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double to_double(const ParseCtx& ctx, const std::string& key, const std::string& val) {
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(val.c_str(), &end);
    if (errno != 0 || end == val.c_str() || *end != '\0')
        fail(ctx, "expected a number for '" + key + "', got '" + val + "'");
    return v;
}

std::int64_t to_int(const ParseCtx& ctx, const std::string& key, const std::string& val,
                    std::int64_t lo, std::int64_t hi) {
    errno = 0;
    char* end = nullptr;
    long long v = std::strtoll(val.c_str(), &end, 10);
    if (errno != 0 || end == val.c_str() || *end != '\0')
        fail(ctx, "expected an integer for '" + key + "', got '" + val + "'");
    if (v < lo || v > hi)
        fail(ctx, "'" + key + "' must be in [" + std::to_string(lo) + ", " + std::to_string(hi) +
                      "], got " + val);
    return v;
}

std::uint64_t to_u64(const ParseCtx& ctx, const std::string& key, const std::string& val) {
    errno = 0;
    char* end = nullptr;
    unsigned long long v = std::strtoull(val.c_str(), &end, 10);
    if (errno != 0 || end == val.c_str() || *end != '\0' || val[0] == '-')
        fail(ctx, "expected a non-negative integer for '" + key + "', got '" + val + "'");
    return v;
}

bool to_bool(const ParseCtx& ctx, const std::string& key, const std::string& val) {
    if (val == "true") return true;
    if (val == "false") return false;
    fail(ctx, "expected 'true' or 'false' for '" + key + "', got '" + val + "'");
}

OptimizerKind to_optimizer(const ParseCtx& ctx, const std::string& val) {
    if (val == "adamw") return OptimizerKind::adamw;
    if (val == "sgd") return OptimizerKind::sgd;
    fail(ctx, "expected 'adamw' or 'sgd' for 'train.optimizer', got '" + val + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const ParseCtx&)>;

const std::unordered_map<std::string, Setter>& setters() {
    static const std::unordered_map<std::string, Setter> table = {
        {"seed", [](auto& c, const auto& v, const auto& x) { c.seed = to_u64(x, "seed", v); }},
        {"out", [](auto& c, const auto& v, const auto&) { c.out_dir = v; }},
        {"model.d",
         [](auto& c, const auto& v, const auto& x) { c.model.d = (int)to_int(x, "model.d", v, 1, 8192); }},
        {"model.layers",
         [](auto& c, const auto& v, const auto& x) {
             c.model.layers = (int)to_int(x, "model.layers", v, 1, 256);
         }},
        {"model.heads",
         [](auto& c, const auto& v, const auto& x) {
             c.model.heads = (int)to_int(x, "model.heads", v, 1, 256);
         }},
        {"model.ffn_hidden",
         [](auto& c, const auto& v, const auto& x) {
             c.model.ffn_hidden = (int)to_int(x, "model.ffn_hidden", v, 1, 1 << 20);
         }},
        {"model.embed_dim",
         [](auto& c, const auto& v, const auto& x) {
             c.model.embed_dim_out = (int)to_int(x, "model.embed_dim", v, 1, 1 << 16);
         }},
        {"model.vocab_size",
         [](auto& c, const auto& v, const auto& x) {
             c.model.vocab_size = (int)to_int(x, "model.vocab_size", v, 1, 1 << 24);
         }},
        {"model.patch_dim",
         [](auto& c, const auto& v, const auto& x) {
             c.model.patch_input_dim = (int)to_int(x, "model.patch_dim", v, 1, 1 << 16);
         }},
        {"model.max_tokens",
         [](auto& c, const auto& v, const auto& x) {
             c.model.max_tokens = (int)to_int(x, "model.max_tokens", v, 1, 1 << 16);
         }},
        {"adapter.ke_mid",
         [](auto& c, const auto& v, const auto& x) {
             c.ke_mid = (int)to_int(x, "adapter.ke_mid", v, 0, 1 << 16);
         }},
        {"adapter.ae_mid",
         [](auto& c, const auto& v, const auto& x) {
             c.ae_mid = (int)to_int(x, "adapter.ae_mid", v, 0, 1 << 16);
         }},
        {"adapter.alpha",
         [](auto& c, const auto& v, const auto& x) { c.alpha = to_double(x, "adapter.alpha", v); }},
        {"adapter.ke_alpha",
         [](auto& c, const auto& v, const auto& x) { c.ke_alpha = to_double(x, "adapter.ke_alpha", v); }},
        {"adapter.ae_alpha",
         [](auto& c, const auto& v, const auto& x) { c.ae_alpha = to_double(x, "adapter.ae_alpha", v); }},
        {"train.epochs",
         [](auto& c, const auto& v, const auto& x) {
             c.train.epochs = (int)to_int(x, "train.epochs", v, 1, 1 << 20);
         }},
        {"train.batch_size",
         [](auto& c, const auto& v, const auto& x) {
             c.train.batch_size = (int)to_int(x, "train.batch_size", v, 2, 1 << 20);
         }},
        {"train.lr",
         [](auto& c, const auto& v, const auto& x) {
             c.train.lr = to_double(x, "train.lr", v);
             if (c.train.lr < 0) fail(x, "'train.lr' must be non-negative");
         }},
        {"train.weight_decay",
         [](auto& c, const auto& v, const auto& x) {
             c.train.weight_decay = to_double(x, "train.weight_decay", v);
             if (c.train.weight_decay < 0) fail(x, "'train.weight_decay' must be non-negative");
         }},
        {"train.temperature",
         [](auto& c, const auto& v, const auto& x) {
             c.train.temperature = to_double(x, "train.temperature", v);
             if (!(c.train.temperature > 0)) fail(x, "'train.temperature' must be positive");
         }},
        {"train.optimizer",
         [](auto& c, const auto& v, const auto& x) { c.train.optimizer = to_optimizer(x, v); }},
        {"train.cosine",
         [](auto& c, const auto& v, const auto& x) {
             c.train.cosine_schedule = to_bool(x, "train.cosine", v);
         }},
        {"data.examples",
         [](auto& c, const auto& v, const auto& x) {
             c.data_examples = (int)to_int(x, "data.examples", v, 1, 1 << 24);
         }},
        {"data.concepts",
         [](auto& c, const auto& v, const auto& x) {
             c.data_concepts = (int)to_int(x, "data.concepts", v, 2, 1 << 16);
         }},
        {"data.noise",
         [](auto& c, const auto& v, const auto& x) {
             c.data_noise = to_double(x, "data.noise", v);
             if (c.data_noise < 0) fail(x, "'data.noise' must be non-negative");
         }},
        {"data.variant_strength",
         [](auto& c, const auto& v, const auto& x) {
             c.data_variant_strength = to_double(x, "data.variant_strength", v);
         }},
        {"data.patches",
         [](auto& c, const auto& v, const auto& x) {
             c.data_patches = (int)to_int(x, "data.patches", v, 1, 1 << 16);
         }},
        {"data.text_len",
         [](auto& c, const auto& v, const auto& x) {
             c.data_text_len = (int)to_int(x, "data.text_len", v, 1, 1 << 16);
         }},
        {"data.synonyms",
         [](auto& c, const auto& v, const auto& x) {
             c.data_synonyms = (int)to_int(x, "data.synonyms", v, 2, 1 << 16);
         }},
        {"data.eval_per_concept",
         [](auto& c, const auto& v, const auto& x) {
             c.data_eval_per_concept = (int)to_int(x, "data.eval_per_concept", v, 1, 1 << 16);
         }},
        {"data.reserved_concepts",
         [](auto& c, const auto& v, const auto& x) {
             c.data_reserved_concepts = (int)to_int(x, "data.reserved_concepts", v, 1, 1 << 16);
         }},
    };
    return table;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    int line_no = 0;
    size_t start = 0;
    while (start <= text.size()) {
        size_t nl = text.find('\n', start);
        std::string raw = text.substr(start, nl == std::string::npos ? std::string::npos : nl - start);
        start = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        ParseCtx ctx{origin, line_no};
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) fail(ctx, "expected 'key = value', got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty()) fail(ctx, "missing key before '='");
        auto it = setters().find(key);
        if (it == setters().end()) fail(ctx, "unknown key '" + key + "'");
        if (!seen.insert(key).second) fail(ctx, "duplicate key '" + key + "'");
        it->second(cfg, val, ctx);
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text, path);
}

namespace {
std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace

std::string serialize_config(const ExperimentConfig& cfg) {
    std::string s;
    s += "seed = " + std::to_string(cfg.seed) + "\n";
    s += "out = " + cfg.out_dir + "\n";
    s += "model.d = " + std::to_string(cfg.model.d) + "\n";
    s += "model.layers = " + std::to_string(cfg.model.layers) + "\n";
    s += "model.heads = " + std::to_string(cfg.model.heads) + "\n";
    s += "model.ffn_hidden = " + std::to_string(cfg.model.ffn_hidden) + "\n";
    s += "model.embed_dim = " + std::to_string(cfg.model.embed_dim_out) + "\n";
    s += "model.vocab_size = " + std::to_string(cfg.model.vocab_size) + "\n";
    s += "model.patch_dim = " + std::to_string(cfg.model.patch_input_dim) + "\n";
    s += "model.max_tokens = " + std::to_string(cfg.model.max_tokens) + "\n";
    s += "adapter.ke_mid = " + std::to_string(cfg.ke_mid) + "\n";
    s += "adapter.ae_mid = " + std::to_string(cfg.ae_mid) + "\n";
    s += "adapter.alpha = " + fmt_double(cfg.alpha) + "\n";
    s += "adapter.ke_alpha = " + fmt_double(cfg.ke_alpha.value_or(cfg.alpha)) + "\n";
    s += "adapter.ae_alpha = " + fmt_double(cfg.ae_alpha.value_or(cfg.alpha)) + "\n";
    s += "train.epochs = " + std::to_string(cfg.train.epochs) + "\n";
    s += "train.batch_size = " + std::to_string(cfg.train.batch_size) + "\n";
    s += "train.lr = " + fmt_double(cfg.train.lr) + "\n";
    s += "train.weight_decay = " + fmt_double(cfg.train.weight_decay) + "\n";
    s += "train.temperature = " + fmt_double(cfg.train.temperature) + "\n";
    s += std::string("train.optimizer = ") +
         (cfg.train.optimizer == OptimizerKind::adamw ? "adamw" : "sgd") + "\n";
    s += std::string("train.cosine = ") + (cfg.train.cosine_schedule ? "true" : "false") + "\n";
    s += "data.examples = " + std::to_string(cfg.data_examples) + "\n";
    s += "data.concepts = " + std::to_string(cfg.data_concepts) + "\n";
    s += "data.noise = " + fmt_double(cfg.data_noise) + "\n";
    s += "data.variant_strength = " + fmt_double(cfg.data_variant_strength) + "\n";
    s += "data.patches = " + std::to_string(cfg.data_patches) + "\n";
    s += "data.text_len = " + std::to_string(cfg.data_text_len) + "\n";
    s += "data.synonyms = " + std::to_string(cfg.data_synonyms) + "\n";
    s += "data.eval_per_concept = " + std::to_string(cfg.data_eval_per_concept) + "\n";
    s += "data.reserved_concepts = " + std::to_string(cfg.data_reserved_concepts) + "\n";
    return s;
}

bool ExperimentConfig::is_reference_setup() const {
    const ExperimentConfig def;
    return seed == def.seed && model == def.model && ke_mid == def.ke_mid && ae_mid == def.ae_mid &&
           alpha == def.alpha && ke_alpha.value_or(alpha) == alpha &&
           ae_alpha.value_or(alpha) == alpha && train.epochs == def.train.epochs &&
           train.batch_size == def.train.batch_size && train.lr == def.train.lr &&
           train.weight_decay == def.train.weight_decay &&
           train.temperature == def.train.temperature && train.optimizer == def.train.optimizer &&
           train.cosine_schedule == def.train.cosine_schedule &&
           data_examples == def.data_examples && data_concepts == def.data_concepts &&
           data_noise == def.data_noise && data_variant_strength == def.data_variant_strength &&
           data_patches == def.data_patches && data_text_len == def.data_text_len &&
           data_synonyms == def.data_synonyms && data_eval_per_concept == def.data_eval_per_concept &&
           data_reserved_concepts == def.data_reserved_concepts;
}

}  // namespace mwa
