#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwa/dataset.hpp"
#include "mwa/model.hpp"
#include "mwa/trainer.hpp"

using namespace mwa;

namespace {

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

DatasetParams micro_data(int n_examples = 40, int reserved = 1) {
    DatasetParams p;
    p.seed = 21;
    p.n_examples = n_examples;
    p.n_concepts = 4;
    p.noise = 0.1;
    p.n_patches = 3;
    p.patch_dim = 6;
    p.text_len = 4;
    p.synonyms_per_slot = 3;
    p.vocab_size = 64;
    p.reserved_concepts = reserved;
    p.eval_per_concept = 2;
    return p;
}

TrainHyper quick_hyper() {
    TrainHyper h;
    h.epochs = 2;
    h.batch_size = 8;
    return h;
}

bool params_bitwise_equal(const Model<float>& a, const Model<float>& b) {
    if (a.params().size() != b.params().size()) return false;
    for (size_t i = 0; i < a.params().size(); ++i) {
        const auto& pa = a.params().at(i);
        const auto& pb = b.params().at(i);
        if (pa.name != pb.name) return false;
        if (std::memcmp(pa.tensor.data(), pb.tensor.data(),
                        static_cast<size_t>(pa.tensor.numel()) * sizeof(float)) != 0)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("zero learning rate trains to exactly the starting model") {
    DatasetSplit data = generate_dataset(micro_data());
    Model<float> model(micro_config(), 7);
    Model<float> reference(micro_config(), 7);
    RetrievalMetrics zero_shot = evaluate_split(reference, data.eval);

    TrainHyper h = quick_hyper();
    h.lr = 0.0;
    TrainResult r = train_model(model, data, h, 7);

    CHECK(params_bitwise_equal(model, reference));
    CHECK(r.final_metrics.ir1 == zero_shot.ir1);
    CHECK(r.final_metrics.ir5 == zero_shot.ir5);
    CHECK(r.final_metrics.tr1 == zero_shot.tr1);
    CHECK(r.final_metrics.tr5 == zero_shot.tr5);
    CHECK(static_cast<int>(r.per_epoch.size()) == h.epochs);
}

TEST_CASE("training is bitwise reproducible run to run") {
    DatasetSplit data = generate_dataset(micro_data());
    TrainHyper h = quick_hyper();

    Model<float> a(micro_config(), 7);
    TrainResult ra = train_model(a, data, h, 11);
    Model<float> b(micro_config(), 7);
    TrainResult rb = train_model(b, data, h, 11);

    CHECK(params_bitwise_equal(a, b));
    REQUIRE(ra.per_epoch.size() == rb.per_epoch.size());
    for (size_t e = 0; e < ra.per_epoch.size(); ++e) {
        CHECK(ra.per_epoch[e].loss == rb.per_epoch[e].loss);
        CHECK(ra.per_epoch[e].ir1 == rb.per_epoch[e].ir1);
        CHECK(ra.per_epoch[e].tr1 == rb.per_epoch[e].tr1);
    }

    // A different training seed reshuffles batches and lands elsewhere.
    Model<float> c(micro_config(), 7);
    train_model(c, data, h, 12);
    CHECK_FALSE(params_bitwise_equal(a, c));
}

TEST_CASE("the schedule and optimizer switches change the trajectory") {
    DatasetSplit data = generate_dataset(micro_data());
    TrainHyper h = quick_hyper();

    Model<float> base(micro_config(), 7);
    train_model(base, data, h, 11);

    TrainHyper no_cosine = h;
    no_cosine.cosine_schedule = false;
    Model<float> flat(micro_config(), 7);
    train_model(flat, data, no_cosine, 11);
    CHECK_FALSE(params_bitwise_equal(base, flat));

    TrainHyper sgd = h;
    sgd.optimizer = OptimizerKind::sgd;
    Model<float> plain(micro_config(), 7);
    train_model(plain, data, sgd, 11);
    CHECK_FALSE(params_bitwise_equal(base, plain));
}

TEST_CASE("non-finite loss aborts with the step location") {
    DatasetSplit data = generate_dataset(micro_data());
    Model<float> model(micro_config(), 7);
    TrainHyper h = quick_hyper();
    h.temperature = 1e-40;  // similarity scale overflows float, loss goes NaN
    CHECK_THROWS_WITH_AS(train_model(model, data, h, 7),
                         doctest::Contains("training aborted: non-finite loss at step 0 (epoch 1, batch 0)"),
                         std::runtime_error);
}

TEST_CASE("training rejects impossible setups") {
    DatasetSplit data = generate_dataset(micro_data());
    Model<float> model(micro_config(), 7);

    TrainHyper too_big = quick_hyper();
    too_big.batch_size = 32;  // only 24 training examples
    CHECK_THROWS_WITH_AS(train_model(model, data, too_big, 7),
                         doctest::Contains("smaller than one batch"), std::invalid_argument);

    TrainHyper no_epochs = quick_hyper();
    no_epochs.epochs = 0;
    CHECK_THROWS_AS(train_model(model, data, no_epochs, 7), std::invalid_argument);

    DatasetSplit no_eval = data;
    no_eval.eval.clear();
    CHECK_THROWS_WITH_AS(train_model(model, no_eval, quick_hyper(), 7),
                         doctest::Contains("eval split is empty"), std::invalid_argument);
}

TEST_CASE("stacking validates selections") {
    DatasetSplit data = generate_dataset(micro_data());
    std::vector<PairedExample> pool;
    pool.push_back(data.train[0]);
    pool.push_back(data.train[1]);
    pool[1].tokens.push_back(17);  // now one caption is longer
    int len = 0;
    CHECK_THROWS_WITH_AS(stack_tokens(pool, {0, 1}, len),
                         doctest::Contains("differing caption lengths"), std::invalid_argument);

    pool[1] = data.train[1];
    pool[1].image = Tensor<float>({4, 6});
    CHECK_THROWS_WITH_AS(stack_images(pool, {0, 1}),
                         doctest::Contains("differing patch geometry"), std::invalid_argument);

    CHECK_THROWS_WITH_AS(stack_images(pool, {}), doctest::Contains("empty selection"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(stack_tokens(pool, {}, len), doctest::Contains("empty selection"),
                         std::invalid_argument);
}

TEST_CASE("chunked split encoding matches one whole-split pass") {
    // 40 heldout examples force a 32 + 8 chunking inside encode_split.
    DatasetSplit data = generate_dataset(micro_data(80, 2));
    REQUIRE(data.heldout.size() == 40);
    Model<float> model(micro_config(), 7);

    auto [img, txt] = encode_split(model, data.heldout);
    std::vector<int> all_idx(40);
    for (int i = 0; i < 40; ++i) all_idx[static_cast<size_t>(i)] = i;
    int len = 0;
    std::vector<std::int32_t> toks = stack_tokens(data.heldout, all_idx, len);
    Tensor<float> img_whole = model.encode_images(stack_images(data.heldout, all_idx));
    Tensor<float> txt_whole = model.encode_texts(toks, 40, len);

    REQUIRE(img.shape() == img_whole.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        CHECK(img.at(i) == doctest::Approx(img_whole.at(i)).epsilon(1e-6));
        CHECK(txt.at(i) == doctest::Approx(txt_whole.at(i)).epsilon(1e-6));
    }
}

TEST_CASE("embedding drift agrees with direct row distances") {
    DatasetSplit data = generate_dataset(micro_data());
    Model<float> a(micro_config(), 7);
    Model<float> b(micro_config(), 8);

    DriftStats self = embedding_drift(a, a, data.eval);
    CHECK(self.image == 0.0);
    CHECK(self.text == 0.0);
    CHECK(self.overall == 0.0);

    DriftStats d = embedding_drift(a, b, data.eval);
    auto [img_a, txt_a] = encode_split(a, data.eval);
    auto [img_b, txt_b] = encode_split(b, data.eval);
    CHECK(d.image == mean_row_distance(img_a, img_b));
    CHECK(d.text == mean_row_distance(txt_a, txt_b));
    CHECK(d.overall == doctest::Approx(0.5 * (d.image + d.text)).epsilon(1e-15));
    CHECK(d.image > 0.0);

    BackboneConfig other = micro_config();
    other.layers = 1;
    Model<float> smaller(other, 7);
    CHECK_THROWS_WITH_AS(embedding_drift(a, smaller, data.eval),
                         doctest::Contains("different architectures"), std::invalid_argument);
}

TEST_CASE("training with a positive learning rate moves the parameters") {
    DatasetSplit data = generate_dataset(micro_data());
    Model<float> model(micro_config(), 7);
    Model<float> reference(micro_config(), 7);
    TrainResult r = train_model(model, data, quick_hyper(), 7);
    CHECK_FALSE(params_bitwise_equal(model, reference));
    for (const RetrievalMetrics& m : r.per_epoch) CHECK(std::isfinite(m.loss));
}
