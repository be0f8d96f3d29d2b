#include "mwa/dataset.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <stdexcept>

#include "mwa/random.hpp"

namespace mwa {

namespace {

// Token ids 0..15 are reserved; concept vocabulary starts above them.
constexpr int kTokenBase = 16;
constexpr char kMagic[8] = {'M', 'W', 'A', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kFormatVersion = 1;

int concept_token(const DatasetParams& p, int concept_idx, int slot, int synonym) {
    return kTokenBase + (concept_idx * p.text_len + slot) * p.synonyms_per_slot + synonym;
}

void validate(const DatasetParams& p) {
    if (p.n_concepts < 2) throw std::invalid_argument("dataset: need at least 2 concepts");
    if (p.n_examples <= 0 || p.n_examples % p.n_concepts != 0)
        throw std::invalid_argument("dataset: n_examples (" + std::to_string(p.n_examples) +
                                    ") must be a positive multiple of n_concepts (" +
                                    std::to_string(p.n_concepts) + ")");
    if (p.noise < 0) throw std::invalid_argument("dataset: noise must be non-negative");
    if (p.n_patches <= 0 || p.patch_dim <= 0) throw std::invalid_argument("dataset: bad patch geometry");
    if (p.text_len < 1 || p.synonyms_per_slot < 2)
        throw std::invalid_argument("dataset: captions need at least 1 slot and 2 synonyms per slot");
    if (p.reserved_concepts < 1 || p.reserved_concepts >= p.n_concepts)
        throw std::invalid_argument("dataset: reserved_concepts must be in [1, n_concepts)");
    const int per_concept = p.n_examples / p.n_concepts;
    if (p.eval_per_concept < 1 || p.eval_per_concept >= per_concept)
        throw std::invalid_argument("dataset: eval_per_concept must be in [1, examples per concept)");
    const int top_token = concept_token(p, p.n_concepts - 1, p.text_len - 1, p.synonyms_per_slot - 1);
    if (top_token >= p.vocab_size)
        throw std::invalid_argument("dataset: vocabulary of " + std::to_string(p.vocab_size) +
                                    " cannot hold " + std::to_string(p.n_concepts) + " concepts (needs " +
                                    std::to_string(top_token + 1) + " tokens)");
    double combos = std::pow(static_cast<double>(p.synonyms_per_slot), p.text_len);
    if (static_cast<double>(per_concept) > combos)
        throw std::invalid_argument("dataset: cannot draw " + std::to_string(per_concept) +
                                    " distinct captions per concept from the caption space");
}

Tensor<float> concept_signature(const DatasetParams& p, int concept_idx) {
    RandomSource rng(derive_seed(p.seed, "concept-visual", static_cast<std::uint64_t>(concept_idx)));
    struct Component {
        double amp, freq_p, freq_d, phase;
    };
    Component comp[3];
    for (auto& c : comp) {
        c.amp = rng.uniform(0.5, 1.1);
        c.freq_p = rng.uniform(0.25, 2.2);
        c.freq_d = rng.uniform(0.05, 0.7);
        c.phase = rng.uniform(0.0, 6.283185307179586);
    }
    Tensor<float> sig({p.n_patches, p.patch_dim});
    float* out = sig.data();
    for (int row = 0; row < p.n_patches; ++row)
        for (int col = 0; col < p.patch_dim; ++col) {
            double v = 0.0;
            for (const auto& c : comp) v += c.amp * std::cos(c.freq_p * row + c.freq_d * col + c.phase);
            out[static_cast<std::int64_t>(row) * p.patch_dim + col] = static_cast<float>(v);
        }
    return sig;
}

std::vector<std::vector<int>> concept_attributes(const DatasetParams& p, int concept_idx, int count) {
    RandomSource rng(derive_seed(p.seed, "caption-attrs", static_cast<std::uint64_t>(concept_idx)));
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> attrs;
    attrs.reserve(static_cast<size_t>(count));
    while (static_cast<int>(attrs.size()) < count) {
        std::vector<int> a(static_cast<size_t>(p.text_len));
        for (int s = 0; s < p.text_len; ++s)
            a[static_cast<size_t>(s)] =
                static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p.synonyms_per_slot)));
        if (seen.insert(a).second) attrs.push_back(std::move(a));
    }
    return attrs;
}

}  // namespace

DatasetSplit generate_dataset(const DatasetParams& params) {
    validate(params);
    const int per_concept = params.n_examples / params.n_concepts;
    const int first_reserved = params.n_concepts - params.reserved_concepts;

    // Caption-linked image structure: one fixed pattern per (slot, synonym),
    // shared by all concepts so the caption→appearance mapping transfers to
    // concepts never seen in training.
    std::vector<Tensor<float>> variants(
        static_cast<size_t>(params.text_len) * params.synonyms_per_slot);
    for (int s = 0; s < params.text_len; ++s)
        for (int v = 0; v < params.synonyms_per_slot; ++v) {
            RandomSource rng(derive_seed(params.seed, "variant-pattern",
                                         static_cast<std::uint64_t>(s * params.synonyms_per_slot + v)));
            Tensor<float> t({params.n_patches, params.patch_dim});
            for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<float>(rng.normal());
            variants[static_cast<size_t>(s * params.synonyms_per_slot + v)] = std::move(t);
        }

    DatasetSplit split;
    split.params = params;
    for (int c = 0; c < params.n_concepts; ++c) {
        Tensor<float> sig = concept_signature(params, c);
        std::vector<std::vector<int>> attrs = concept_attributes(params, c, per_concept);
        for (int i = 0; i < per_concept; ++i) {
            PairedExample ex;
            ex.id = static_cast<std::uint64_t>(c) * per_concept + i;
            ex.concept_id = static_cast<std::uint32_t>(c);
            const std::vector<int>& attr = attrs[static_cast<size_t>(i)];

            RandomSource img_rng(derive_seed(params.seed, "image-noise", ex.id));
            ex.image = Tensor<float>({params.n_patches, params.patch_dim});
            float* img = ex.image.data();
            const float* base = sig.data();
            for (std::int64_t j = 0; j < ex.image.numel(); ++j) {
                double structured = 0.0;
                for (int s = 0; s < params.text_len; ++s)
                    structured += variants[static_cast<size_t>(
                        s * params.synonyms_per_slot + attr[static_cast<size_t>(s)])].data()[j];
                img[j] = base[j] + static_cast<float>(params.noise * (params.variant_strength * structured +
                                                                     img_rng.normal()));
            }

            ex.tokens.resize(static_cast<size_t>(params.text_len));
            for (int s = 0; s < params.text_len; ++s)
                ex.tokens[static_cast<size_t>(s)] = static_cast<std::int32_t>(
                    concept_token(params, c, s, attr[static_cast<size_t>(s)]));
            RandomSource txt_rng(derive_seed(params.seed, "caption-order", ex.id));
            txt_rng.shuffle(ex.tokens);

            if (c >= first_reserved)
                split.heldout.push_back(std::move(ex));
            else if (i >= per_concept - params.eval_per_concept)
                split.eval.push_back(std::move(ex));
            else
                split.train.push_back(std::move(ex));
        }
    }
    return split;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string build_manifest(const DatasetSplit& split) {
    const DatasetParams& p = split.params;
    std::string m;
    m += "format_version=" + std::to_string(kFormatVersion) + "\n";
    m += "seed=" + std::to_string(p.seed) + "\n";
    m += "n_examples=" + std::to_string(p.n_examples) + "\n";
    m += "n_concepts=" + std::to_string(p.n_concepts) + "\n";
    m += "noise=" + fmt_double(p.noise) + "\n";
    m += "n_patches=" + std::to_string(p.n_patches) + "\n";
    m += "patch_dim=" + std::to_string(p.patch_dim) + "\n";
    m += "text_len=" + std::to_string(p.text_len) + "\n";
    m += "synonyms_per_slot=" + std::to_string(p.synonyms_per_slot) + "\n";
    m += "vocab_size=" + std::to_string(p.vocab_size) + "\n";
    m += "reserved_concepts=" + std::to_string(p.reserved_concepts) + "\n";
    m += "eval_per_concept=" + std::to_string(p.eval_per_concept) + "\n";
    m += "variant_strength=" + fmt_double(p.variant_strength) + "\n";
    m += "train_count=" + std::to_string(split.train.size()) + "\n";
    m += "eval_count=" + std::to_string(split.eval.size()) + "\n";
    m += "heldout_count=" + std::to_string(split.heldout.size()) + "\n";
    return m;
}

void append_example(std::string& out, const PairedExample& ex) {
    put_u64(out, ex.id);
    put_u32(out, ex.concept_id);
    put_u32(out, static_cast<std::uint32_t>(ex.image.ndim()));
    for (int i = 0; i < ex.image.ndim(); ++i) put_u32(out, static_cast<std::uint32_t>(ex.image.dim(i)));
    const float* data = ex.image.data();
    for (std::int64_t i = 0; i < ex.image.numel(); ++i) put_f32(out, data[i]);
    put_u32(out, static_cast<std::uint32_t>(ex.tokens.size()));
    for (std::int32_t t : ex.tokens) put_u32(out, static_cast<std::uint32_t>(t));
}

/// Sequential reader over an in-memory file image; every failure reports the
/// byte offset it happened at.
class Cursor {
public:
    Cursor(const std::vector<char>& buf, const std::string& path) : buf_(buf), path_(path) {}

    size_t offset() const { return pos_; }

    const char* take(size_t n, const char* what) {
        if (pos_ + n > buf_.size())
            throw std::runtime_error(path_ + ": truncated while reading " + std::string(what) +
                                     " at byte " + std::to_string(pos_));
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::uint32_t u32(const char* what) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4, what));
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }

    std::uint64_t u64(const char* what) {
        std::uint64_t lo = u32(what);
        std::uint64_t hi = u32(what);
        return lo | (hi << 32);
    }

    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }

    bool at_end() const { return pos_ == buf_.size(); }

private:
    const std::vector<char>& buf_;
    std::string path_;
    size_t pos_ = 0;
};

std::uint64_t parse_u64_field(const std::string& path, const std::string& key, const std::string& val) {
    errno = 0;
    char* end = nullptr;
    std::uint64_t v = std::strtoull(val.c_str(), &end, 10);
    if (errno != 0 || end == val.c_str() || *end != '\0')
        throw std::runtime_error(path + ": manifest key '" + key + "' has invalid integer value '" + val +
                                 "'");
    return v;
}

double parse_double_field(const std::string& path, const std::string& key, const std::string& val) {
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(val.c_str(), &end);
    if (errno != 0 || end == val.c_str() || *end != '\0')
        throw std::runtime_error(path + ": manifest key '" + key + "' has invalid numeric value '" + val +
                                 "'");
    return v;
}

PairedExample read_example(Cursor& cur, const DatasetParams& p, const std::string& path) {
    PairedExample ex;
    ex.id = cur.u64("example id");
    ex.concept_id = cur.u32("concept id");
    std::uint32_t ndim = cur.u32("image rank");
    if (ndim != 2)
        throw std::runtime_error(path + ": image rank " + std::to_string(ndim) + " at byte " +
                                 std::to_string(cur.offset()) + " (expected 2)");
    int rows = static_cast<int>(cur.u32("image rows"));
    int cols = static_cast<int>(cur.u32("image cols"));
    if (rows != p.n_patches || cols != p.patch_dim)
        throw std::runtime_error(path + ": image shape " + std::to_string(rows) + "×" +
                                 std::to_string(cols) + " does not match manifest " +
                                 std::to_string(p.n_patches) + "×" + std::to_string(p.patch_dim));
    ex.image = Tensor<float>({rows, cols});
    for (std::int64_t i = 0; i < ex.image.numel(); ++i) ex.image.data()[i] = cur.f32("image data");
    std::uint32_t n_tokens = cur.u32("token count");
    ex.tokens.resize(n_tokens);
    for (std::uint32_t i = 0; i < n_tokens; ++i) {
        std::uint32_t t = cur.u32("token id");
        if (t >= static_cast<std::uint32_t>(p.vocab_size))
            throw std::runtime_error(path + ": token id " + std::to_string(t) + " at byte " +
                                     std::to_string(cur.offset()) + " exceeds vocabulary " +
                                     std::to_string(p.vocab_size));
        ex.tokens[i] = static_cast<std::int32_t>(t);
    }
    return ex;
}

}  // namespace

void save_dataset(const DatasetSplit& split, const std::string& path) {
    std::string out;
    out.append(kMagic, sizeof kMagic);
    std::string manifest = build_manifest(split);
    put_u32(out, static_cast<std::uint32_t>(manifest.size()));
    out += manifest;
    for (const auto* part : {&split.train, &split.eval, &split.heldout})
        for (const PairedExample& ex : *part) append_example(out, ex);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) throw std::runtime_error("write to " + path + " failed");
}

DatasetSplit load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for reading");
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Cursor cur(buf, path);
    const char* magic = cur.take(sizeof kMagic, "magic");
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error(path + ": not a dataset file (bad magic at byte 0)");
    std::uint32_t manifest_len = cur.u32("manifest length");
    std::string manifest(cur.take(manifest_len, "manifest"), manifest_len);

    DatasetParams p;
    std::uint64_t version = 0;
    std::uint64_t train_count = 0, eval_count = 0, heldout_count = 0;
    std::set<std::string> seen;
    size_t line_start = 0;
    while (line_start < manifest.size()) {
        size_t nl = manifest.find('\n', line_start);
        if (nl == std::string::npos)
            throw std::runtime_error(path + ": manifest line without newline terminator");
        std::string line = manifest.substr(line_start, nl - line_start);
        line_start = nl + 1;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ": malformed manifest line '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (!seen.insert(key).second)
            throw std::runtime_error(path + ": duplicate manifest key '" + key + "'");
        if (key == "format_version") version = parse_u64_field(path, key, val);
        else if (key == "seed") p.seed = parse_u64_field(path, key, val);
        else if (key == "n_examples") p.n_examples = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "n_concepts") p.n_concepts = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "noise") p.noise = parse_double_field(path, key, val);
        else if (key == "n_patches") p.n_patches = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "patch_dim") p.patch_dim = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "text_len") p.text_len = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "synonyms_per_slot")
            p.synonyms_per_slot = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "vocab_size") p.vocab_size = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "reserved_concepts")
            p.reserved_concepts = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "eval_per_concept")
            p.eval_per_concept = static_cast<int>(parse_u64_field(path, key, val));
        else if (key == "variant_strength") p.variant_strength = parse_double_field(path, key, val);
        else if (key == "train_count") train_count = parse_u64_field(path, key, val);
        else if (key == "eval_count") eval_count = parse_u64_field(path, key, val);
        else if (key == "heldout_count") heldout_count = parse_u64_field(path, key, val);
        else throw std::runtime_error(path + ": unknown manifest key '" + key + "'");
    }
    if (!seen.count("format_version"))
        throw std::runtime_error(path + ": manifest is missing format_version");
    if (version != kFormatVersion)
        throw std::runtime_error(path + ": dataset format version " + std::to_string(version) +
                                 " is not supported (this reader handles version " +
                                 std::to_string(kFormatVersion) + ")");
    if (train_count + eval_count + heldout_count != static_cast<std::uint64_t>(p.n_examples))
        throw std::runtime_error(path + ": split counts do not sum to n_examples");

    DatasetSplit split;
    split.params = p;
    for (std::uint64_t i = 0; i < train_count; ++i) split.train.push_back(read_example(cur, p, path));
    for (std::uint64_t i = 0; i < eval_count; ++i) split.eval.push_back(read_example(cur, p, path));
    for (std::uint64_t i = 0; i < heldout_count; ++i) split.heldout.push_back(read_example(cur, p, path));
    if (!cur.at_end())
        throw std::runtime_error(path + ": trailing data at byte " + std::to_string(cur.offset()));
    return split;
}

std::vector<std::vector<int>> make_batches(int n_items, int batch_size, std::uint64_t epoch_seed) {
    if (batch_size < 2)
        throw std::invalid_argument("make_batches: batch_size must be ≥ 2 (contrastive training needs "
                                    "in-batch negatives)");
    std::vector<int> order(static_cast<size_t>(n_items));
    for (int i = 0; i < n_items; ++i) order[static_cast<size_t>(i)] = i;
    RandomSource rng(epoch_seed);
    rng.shuffle(order);
    std::vector<std::vector<int>> out;
    for (size_t start = 0; start + static_cast<size_t>(batch_size) <= order.size();
         start += static_cast<size_t>(batch_size))
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
    return out;
}

}  // namespace mwa
