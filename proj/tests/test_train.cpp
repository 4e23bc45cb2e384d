#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rrg/train.hpp"

using namespace rrg;
using rrg::testing::exhaustive_best;
using rrg::testing::greedy_decode;
using rrg::testing::table_step;

namespace {

std::vector<std::vector<double>> random_table(Rng& rng, std::size_t rows, std::size_t vocab) {
    std::vector<std::vector<double>> table(rows, std::vector<double>(vocab));
    for (auto& row : table)
        for (auto& v : row) v = rng.normal(0.0, 1.5);
    return table;
}

ModelConfig smoke_config(std::size_t vocab_size) {
    ModelConfig c;
    c.d_model = 32;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = 64;
    c.dropout_p = 0.0;
    c.vocab_size = vocab_size;
    c.max_len = 16;
    c.d_f = 8;
    return c;
}

std::vector<TrainItem> smoke_corpus(std::size_t d_f) {
    const std::vector<std::string> reports{
        "the heart is normal in size",
        "no pleural effusion is seen",
        "lungs are clear without consolidation",
        "there is mild cardiomegaly",
        "no acute bony abnormality",
        "degenerative changes of the spine",
    };
    std::vector<TrainItem> items;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const std::string id = "tr" + std::to_string(i);
        items.push_back({id, reports[i], "train", extract_stub(id, d_f, 2, 5)});
    }
    return items;
}

} // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ModelParams<double> params;
    params.tensors.emplace("x", Tensord(1, 3, {1.0, -2.0, 3.0}));
    auto state = AdamState<double>::init(params);
    std::map<std::string, Tensord> grads;
    grads.emplace("x", Tensord(1, 3));
    AdamConfig cfg;
    adam_step(params, grads, state, cfg);
    CHECK(params.at("x").data() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam: first step with unit gradient moves by about lr") {
    ModelParams<double> params;
    params.tensors.emplace("w", Tensord::scalar(0.7));
    auto state = AdamState<double>::init(params);
    std::map<std::string, Tensord> grads;
    grads.emplace("w", Tensord::scalar(1.0));
    AdamConfig cfg;
    adam_step(params, grads, state, cfg);
    // bias-corrected first step: lr * g / (|g| + eps) ~ lr
    CHECK(params.at("w")[0] == doctest::Approx(0.7 - cfg.lr_main).epsilon(1e-6));
}

TEST_CASE("adam: constant gradient converges to -sign(g)*lr steps") {
    ModelParams<double> params;
    params.tensors.emplace("w", Tensord::scalar(0.0));
    auto state = AdamState<double>::init(params);
    std::map<std::string, Tensord> grads;
    grads.emplace("w", Tensord::scalar(-2.5));
    AdamConfig cfg;
    double before = 0.0;
    for (int i = 0; i < 2000; ++i) {
        before = params.at("w")[0];
        adam_step(params, grads, state, cfg);
    }
    const double step_delta = params.at("w")[0] - before;
    CHECK(step_delta == doctest::Approx(cfg.lr_main).epsilon(0.01)); // moving up against g<0
}

TEST_CASE("adam: lr 0 leaves parameters bitwise unchanged") {
    Rng rng(20);
    ModelConfig c = smoke_config(10);
    auto params = ModelParams<double>::init(c, rng);
    const auto snapshot = params.tensors;

    std::map<std::string, Tensord> grads;
    for (const auto& [name, t] : params.tensors)
        grads.emplace(name, Tensord::filled_normal(t.rows(), t.cols(), rng));
    auto state = AdamState<double>::init(params);
    AdamConfig cfg;
    cfg.lr_main = 0.0;
    cfg.lr_extractor = 0.0;
    adam_step(params, grads, state, cfg);
    for (const auto& [name, t] : snapshot) CHECK(params.at(name).data() == t.data());
}

TEST_CASE("adam: extractor projection uses its own learning rate") {
    CHECK(is_extractor_param("img.proj"));
    CHECK_FALSE(is_extractor_param("head.w"));

    ModelParams<double> params;
    params.tensors.emplace("img.proj", Tensord::scalar(1.0));
    params.tensors.emplace("head.w", Tensord::scalar(1.0));
    auto state = AdamState<double>::init(params);
    std::map<std::string, Tensord> grads;
    grads.emplace("img.proj", Tensord::scalar(1.0));
    grads.emplace("head.w", Tensord::scalar(1.0));
    AdamConfig cfg;
    adam_step(params, grads, state, cfg);
    CHECK(params.at("img.proj")[0] == doctest::Approx(1.0 - cfg.lr_extractor).epsilon(1e-6));
    CHECK(params.at("head.w")[0] == doctest::Approx(1.0 - cfg.lr_main).epsilon(1e-6));
}

TEST_CASE("adam: non-finite gradient raises a training error naming the parameter") {
    ModelParams<double> params;
    params.tensors.emplace("bad.param", Tensord::scalar(1.0));
    auto state = AdamState<double>::init(params);
    std::map<std::string, Tensord> grads;
    grads.emplace("bad.param", Tensord::scalar(std::nan("")));
    AdamConfig cfg;
    CHECK_THROWS_WITH_AS(adam_step(params, grads, state, cfg), doctest::Contains("bad.param"),
                         NumericError);
}

TEST_CASE("beam=1 equals greedy decoding on random models") {
    Rng rng(2121);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t vocab = 5, max_len = 6;
        const auto step = table_step(random_table(rng, max_len, vocab));
        const auto beam1 = beam_search(step, 1, max_len, /*eos=*/0);
        CHECK(beam1.ids == greedy_decode(step, max_len, 0));
    }
}

TEST_CASE("wide beam equals exhaustive enumeration (beam >= vocab^max_len)") {
    Rng rng(3232);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t vocab = 3, max_len = 3;
        const auto step = table_step(random_table(rng, max_len, vocab));
        const auto wide = beam_search(step, 27, max_len, 0);
        const auto oracle = exhaustive_best(step, max_len, 0, vocab);
        CHECK(wide.ids == oracle.ids);
        CHECK(wide.score() == doctest::Approx(oracle.score()).epsilon(1e-12));
    }
}

TEST_CASE("beam=3 on a fixed-logit model matches exhaustive search") {
    // constant logits each step: vocab 4, max_len 5
    const std::vector<std::vector<double>> table{{0.4, 1.9, 0.3, -0.8}};
    const auto step = table_step(table);
    const auto got = beam_search(step, 3, 5, /*eos=*/0);
    const auto oracle = exhaustive_best(step, 5, 0, 4);
    CHECK(got.ids == oracle.ids);
    CHECK(got.score() == doctest::Approx(oracle.score()).epsilon(1e-12));
}

TEST_CASE("immediate EOS argmax yields an empty-content hypothesis") {
    const std::vector<std::vector<double>> table{{5.0, 0.0, 0.0}};
    const auto got = beam_search(table_step(table), 3, 6, /*eos=*/0);
    CHECK(got.ids == std::vector<int>{0});
}

TEST_CASE("increasing beam never lowers the returned score on fixed logits") {
    Rng rng(4343);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> table{std::vector<double>(4)};
        for (auto& v : table[0]) v = rng.normal(0.0, 1.0);
        const auto step = table_step(table);
        double prev = -std::numeric_limits<double>::infinity();
        for (std::size_t beam = 1; beam <= 6; ++beam) {
            const double s = beam_search(step, beam, 4, 0).score();
            CHECK(s >= prev - 1e-12);
            prev = s;
        }
    }
}

TEST_CASE("beam search rejects a zero beam") {
    const std::vector<std::vector<double>> table{{0.0, 1.0}};
    CHECK_THROWS_AS(beam_search(table_step(table), 0, 4, 0), UsageError);
}

TEST_CASE("training rejects an empty train split") {
    ModelConfig c = smoke_config(8);
    std::vector<TrainItem> items{{"v0", "some text", "val", extract_stub("v0", c.d_f, 2, 5)}};
    Vocab vocab = Vocab::build({"some text"}, 1);
    TrainOptions opts;
    opts.epochs = 1;
    CHECK_THROWS_AS(train_model<float>(items, vocab, c, opts), UsageError);
}

TEST_CASE("training loss trace is reproducible run to run") {
    auto items = smoke_corpus(8);
    std::vector<std::string> reports;
    for (const auto& i : items) reports.push_back(i.report);
    Vocab vocab = Vocab::build(reports, 1);
    ModelConfig c = smoke_config(vocab.size());

    TrainOptions opts;
    opts.epochs = 3;
    opts.seed = 11;
    auto a = train_model<float>(items, vocab, c, opts);
    auto b = train_model<float>(items, vocab, c, opts);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t e = 0; e < a.log.size(); ++e) {
        CHECK(a.log[e].train_loss == b.log[e].train_loss); // exact
    }
    for (const auto& [name, t] : a.params.tensors)
        CHECK(t.data() == b.params.tensors.at(name).data()); // bitwise
}

TEST_CASE("a tiny corpus is memorized and regenerated") {
    auto items = smoke_corpus(8);
    std::vector<std::string> reports;
    for (const auto& i : items) reports.push_back(i.report);
    Vocab vocab = Vocab::build(reports, 1);
    ModelConfig c = smoke_config(vocab.size());

    TrainOptions opts;
    opts.epochs = 120;
    opts.seed = 3;
    auto out = train_model<float>(items, vocab, c, opts);
    CHECK(out.log.back().train_loss < 0.2);
    CHECK(out.log.back().train_loss < out.log.front().train_loss);

    auto index = build_train_index(items);
    auto generated = generate_reports(out.params, vocab, items, &index, 3, 1,
                                      /*exclude_self=*/true);
    std::size_t exact = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        CHECK(generated[i].first == items[i].id);
        if (generated[i].second == normalize(items[i].report)) ++exact;
    }
    CHECK(exact >= items.size() - 1);
}

TEST_CASE("generation is identical across thread counts") {
    auto items = smoke_corpus(8);
    std::vector<std::string> reports;
    for (const auto& i : items) reports.push_back(i.report);
    Vocab vocab = Vocab::build(reports, 1);
    ModelConfig c = smoke_config(vocab.size());

    Rng rng(77);
    auto params = ModelParams<float>::init(c, rng); // untrained params suffice
    auto index = build_train_index(items);
    const auto serial = generate_reports(params, vocab, items, &index, 3, 1);
    const auto threaded = generate_reports(params, vocab, items, &index, 3, 3);
    CHECK(serial == threaded);
}

TEST_CASE("validation loss appears when a val split exists") {
    auto items = smoke_corpus(8);
    items.push_back({"v0", "the heart is normal in size", "val", extract_stub("v0", 8, 2, 5)});
    std::vector<std::string> reports;
    for (const auto& i : items) reports.push_back(i.report);
    Vocab vocab = Vocab::build(reports, 1);
    ModelConfig c = smoke_config(vocab.size());

    TrainOptions opts;
    opts.epochs = 2;
    opts.seed = 1;
    auto out = train_model<float>(items, vocab, c, opts);
    for (const auto& e : out.log) CHECK(e.val_loss.has_value());
}
