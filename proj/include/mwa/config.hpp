#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "mwa/adapters.hpp"
#include "mwa/dataset.hpp"
#include "mwa/model.hpp"
#include "mwa/trainer.hpp"

namespace mwa {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Everything that determines a run. Parsed from a flat key=value file where
/// every key has a default, so an empty (or absent) file is a valid config.
struct ExperimentConfig {
    std::uint64_t seed = 7;
    std::string out_dir = "out";

    BackboneConfig model;

    int ke_mid = 8;
    int ae_mid = 16;
    double alpha = 1.0;
    std::optional<double> ke_alpha;
    std::optional<double> ae_alpha;

    TrainHyper train;

    int data_examples = 256;
    int data_concepts = 8;
    double data_noise = 0.1;
    double data_variant_strength = 2.5;
    int data_patches = 16;
    int data_text_len = 4;
    int data_synonyms = 3;
    int data_eval_per_concept = 4;
    int data_reserved_concepts = 2;

    AdapterConfig adapter_config() const {
        AdapterConfig a;
        a.ke_mid = ke_mid;
        a.ae_mid = ae_mid;
        a.alpha = alpha;
        a.ke_alpha = ke_alpha;
        a.ae_alpha = ae_alpha;
        return a;
    }

    DatasetParams dataset_params() const {
        DatasetParams d;
        d.seed = seed;
        d.n_examples = data_examples;
        d.n_concepts = data_concepts;
        d.noise = data_noise;
        d.variant_strength = data_variant_strength;
        d.n_patches = data_patches;
        d.patch_dim = model.patch_input_dim;
        d.text_len = data_text_len;
        d.synonyms_per_slot = data_synonyms;
        d.vocab_size = model.vocab_size;
        d.eval_per_concept = data_eval_per_concept;
        d.reserved_concepts = data_reserved_concepts;
        return d;
    }

    /// True when seed and every behavioral field sit at their defaults —
    /// the pinned setup whose experiment trends are hard-asserted.
    bool is_reference_setup() const;
};

/// Parse config text. `origin` names the source (file path) in error
/// messages, which carry 1-based line numbers.
ExperimentConfig parse_config(const std::string& text, const std::string& origin);

ExperimentConfig load_config_file(const std::string& path);

/// Canonical serialization: every key, fixed order, reparses to an
/// equivalent config.
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace mwa
