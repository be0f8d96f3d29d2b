#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mwa/tensor.hpp"

namespace mwa {

/// Generation knobs. A dataset is a pure function of this struct, and the
/// struct is persisted verbatim as the file manifest.
struct DatasetParams {
    std::uint64_t seed = 7;
    int n_examples = 256;
    int n_concepts = 8;
    double noise = 0.1;
    int n_patches = 16;
    int patch_dim = 48;
    int text_len = 4;           // token slots per caption
    int synonyms_per_slot = 3;  // interchangeable tokens per slot
    int vocab_size = 512;
    int reserved_concepts = 2;  // concepts held out of train/eval entirely
    int eval_per_concept = 4;
    double variant_strength = 2.5;  // weight of caption-linked image structure

    bool operator==(const DatasetParams&) const = default;
};

/// One image-caption pair. The image is a patch grid; the caption is a short
/// token-id sequence. Both are derived from the same concept and the same
/// per-example attribute draw, so exact pairing (not just concept identity)
/// is recoverable across modalities.
struct PairedExample {
    std::uint64_t id = 0;
    std::uint32_t concept_id = 0;
    Tensor<float> image;  // [n_patches × patch_dim]
    std::vector<std::int32_t> tokens;
};

/// Disjoint example lists: train and eval share concepts; heldout consists
/// exclusively of the reserved concepts never seen in training — the
/// unseen-distribution probe.
struct DatasetSplit {
    DatasetParams params;
    std::vector<PairedExample> train;
    std::vector<PairedExample> eval;
    std::vector<PairedExample> heldout;
};

DatasetSplit generate_dataset(const DatasetParams& params);

inline DatasetSplit generate_dataset(std::uint64_t seed, int n_examples, int n_concepts, double noise) {
    DatasetParams p;
    p.seed = seed;
    p.n_examples = n_examples;
    p.n_concepts = n_concepts;
    p.noise = noise;
    return generate_dataset(p);
}

void save_dataset(const DatasetSplit& split, const std::string& path);
DatasetSplit load_dataset(const std::string& path);

/// Seeded epoch batching: shuffled index batches of exactly batch_size
/// (the trailing short batch is dropped).
std::vector<std::vector<int>> make_batches(int n_items, int batch_size, std::uint64_t epoch_seed);

}  // namespace mwa
