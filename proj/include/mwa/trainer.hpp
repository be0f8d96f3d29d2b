#pragma once

#include <cstdint>
#include <vector>

#include "mwa/dataset.hpp"
#include "mwa/model.hpp"
#include "mwa/optimizer.hpp"
#include "mwa/retrieval.hpp"

namespace mwa {

struct TrainHyper {
    int epochs = 20;
    int batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double temperature = 0.07;
    OptimizerKind optimizer = OptimizerKind::adamw;
    bool cosine_schedule = true;
};

struct TrainResult {
    std::vector<RetrievalMetrics> per_epoch;  // eval-split metrics after each epoch
    RetrievalMetrics final_metrics;
    double wall_seconds = 0;
};

/// Stack selected examples into one [n × patches × patch_dim] tensor and one
/// flat token-id buffer (all captions must share one length, returned in len).
Tensor<float> stack_images(const std::vector<PairedExample>& pool, const std::vector<int>& idx);
std::vector<std::int32_t> stack_tokens(const std::vector<PairedExample>& pool,
                                       const std::vector<int>& idx, int& len);

/// Encode every example of a split (in fixed-size chunks) and return the
/// unit-norm image and text embedding matrices, aligned row-for-row.
std::pair<Tensor<float>, Tensor<float>> encode_split(const Model<float>& model,
                                                     const std::vector<PairedExample>& part);

/// Full-split retrieval evaluation (all images × all texts).
RetrievalMetrics evaluate_split(const Model<float>& model, const std::vector<PairedExample>& part);

struct DriftStats {
    double image = 0;
    double text = 0;
    double overall = 0;  // mean over both modalities
};

/// How far model_b's embeddings moved from model_a's on the given examples.
DriftStats embedding_drift(const Model<float>& model_a, const Model<float>& model_b,
                           const std::vector<PairedExample>& part);

/// Seeded contrastive fine-tuning: shuffled epochs of in-batch InfoNCE with
/// cosine-decayed AdamW (or plain SGD), evaluating on the eval split after
/// every epoch. Deterministic: one (model, data, hyper, seed) tuple yields
/// bitwise-identical parameters and metrics on every run.
TrainResult train_model(Model<float>& model, const DatasetSplit& data, const TrainHyper& hyper,
                        std::uint64_t seed);

}  // namespace mwa
