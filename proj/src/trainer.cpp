#include "mwa/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "mwa/random.hpp"

namespace mwa {

namespace {
constexpr int kEvalChunk = 32;
}

Tensor<float> stack_images(const std::vector<PairedExample>& pool, const std::vector<int>& idx) {
    if (idx.empty()) throw std::invalid_argument("stack_images: empty selection");
    const Tensor<float>& first = pool[static_cast<size_t>(idx[0])].image;
    const int patches = first.dim(0);
    const int width = first.dim(1);
    Tensor<float> out({static_cast<int>(idx.size()), patches, width});
    for (size_t i = 0; i < idx.size(); ++i) {
        const Tensor<float>& img = pool[static_cast<size_t>(idx[i])].image;
        if (img.dim(0) != patches || img.dim(1) != width)
            throw std::invalid_argument("stack_images: examples have differing patch geometry");
        std::memcpy(out.data() + static_cast<std::int64_t>(i) * patches * width, img.data(),
                    sizeof(float) * static_cast<size_t>(patches) * width);
    }
    return out;
}

std::vector<std::int32_t> stack_tokens(const std::vector<PairedExample>& pool,
                                       const std::vector<int>& idx, int& len) {
    if (idx.empty()) throw std::invalid_argument("stack_tokens: empty selection");
    len = static_cast<int>(pool[static_cast<size_t>(idx[0])].tokens.size());
    std::vector<std::int32_t> out;
    out.reserve(idx.size() * static_cast<size_t>(len));
    for (int i : idx) {
        const auto& toks = pool[static_cast<size_t>(i)].tokens;
        if (static_cast<int>(toks.size()) != len)
            throw std::invalid_argument("stack_tokens: examples have differing caption lengths");
        out.insert(out.end(), toks.begin(), toks.end());
    }
    return out;
}

std::pair<Tensor<float>, Tensor<float>> encode_split(const Model<float>& model,
                                                     const std::vector<PairedExample>& part) {
    if (part.empty()) throw std::invalid_argument("encode_split: empty example list");
    const int n = static_cast<int>(part.size());
    const int width = model.config().embed_dim_out;
    Tensor<float> img_emb({n, width});
    Tensor<float> txt_emb({n, width});
    for (int start = 0; start < n; start += kEvalChunk) {
        const int count = std::min(kEvalChunk, n - start);
        std::vector<int> idx(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
        int len = 0;
        std::vector<std::int32_t> toks = stack_tokens(part, idx, len);
        Tensor<float> iv = model.encode_images(stack_images(part, idx));
        Tensor<float> tv = model.encode_texts(toks, count, len);
        std::memcpy(img_emb.data() + static_cast<std::int64_t>(start) * width, iv.data(),
                    sizeof(float) * static_cast<size_t>(count) * width);
        std::memcpy(txt_emb.data() + static_cast<std::int64_t>(start) * width, tv.data(),
                    sizeof(float) * static_cast<size_t>(count) * width);
    }
    return {img_emb, txt_emb};
}

RetrievalMetrics evaluate_split(const Model<float>& model, const std::vector<PairedExample>& part) {
    auto [img_emb, txt_emb] = encode_split(model, part);
    return evaluate_similarity(matmul_nt(img_emb, txt_emb));
}

DriftStats embedding_drift(const Model<float>& model_a, const Model<float>& model_b,
                           const std::vector<PairedExample>& part) {
    if (!(model_a.config() == model_b.config()))
        throw std::invalid_argument("embedding_drift: models have different architectures");
    auto [img_a, txt_a] = encode_split(model_a, part);
    auto [img_b, txt_b] = encode_split(model_b, part);
    DriftStats d;
    d.image = mean_row_distance(img_a, img_b);
    d.text = mean_row_distance(txt_a, txt_b);
    d.overall = 0.5 * (d.image + d.text);
    return d;
}

TrainResult train_model(Model<float>& model, const DatasetSplit& data, const TrainHyper& hyper,
                        std::uint64_t seed) {
    if (hyper.epochs < 1) throw std::invalid_argument("train: epochs must be positive");
    if (data.eval.empty()) throw std::invalid_argument("train: eval split is empty");
    const int n_train = static_cast<int>(data.train.size());
    if (n_train < hyper.batch_size)
        throw std::invalid_argument("train: training split (" + std::to_string(n_train) +
                                    ") is smaller than one batch (" + std::to_string(hyper.batch_size) +
                                    ")");

    std::vector<Parameter<float>*> trainable = model.params().trainable();
    OptimizerHyper oh;
    oh.kind = hyper.optimizer;
    oh.lr = hyper.lr;
    oh.weight_decay = hyper.weight_decay;
    Optimizer<float> opt(trainable, oh);

    const int batches_per_epoch = n_train / hyper.batch_size;
    const std::int64_t total_steps = static_cast<std::int64_t>(hyper.epochs) * batches_per_epoch;
    const float temperature = static_cast<float>(hyper.temperature);

    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();
    std::int64_t global_step = 0;
    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        auto batches = make_batches(n_train, hyper.batch_size,
                                    derive_seed(seed, "epoch-shuffle", static_cast<std::uint64_t>(epoch)));
        double loss_sum = 0.0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            zero_grads(trainable);
            GradTape<float> tape;
            int len = 0;
            std::vector<std::int32_t> toks = stack_tokens(data.train, batches[bi], len);
            Tensor<float> iv = model.encode_images(stack_images(data.train, batches[bi]));
            Tensor<float> tv =
                model.encode_texts(toks, static_cast<int>(batches[bi].size()), len);
            Tensor<float> loss = info_nce_loss(iv, tv, temperature);
            const double loss_v = static_cast<double>(loss.value());
            if (!std::isfinite(loss_v))
                throw std::runtime_error("training aborted: non-finite loss at step " +
                                         std::to_string(global_step) + " (epoch " +
                                         std::to_string(epoch) + ", batch " + std::to_string(bi) + ")");
            tape.backward(loss);
            opt.step(hyper.cosine_schedule ? cosine_decay(global_step, total_steps) : 1.0);
            loss_sum += loss_v;
            ++global_step;
        }
        RetrievalMetrics m = evaluate_split(model, data.eval);
        m.loss = loss_sum / static_cast<double>(batches.size());
        result.per_epoch.push_back(m);
    }
    result.final_metrics = result.per_epoch.back();
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace mwa
