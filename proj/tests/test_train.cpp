#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "photondfa/dataset.hpp"
#include "photondfa/train.hpp"

using namespace photondfa;

namespace {

SyntheticDigitsOptions tiny_options() {
    SyntheticDigitsOptions opts;
    opts.canvas = 8;
    opts.upscale = 1;
    opts.max_shift = 1;
    return opts;
}

Dataset tiny_dataset(std::uint64_t seed = 5) {
    return make_synthetic_digits(600, 200, seed, tiny_options());
}

TrainConfig quick_config(TrainAlgorithm alg, std::size_t epochs = 2) {
    TrainConfig cfg;
    cfg.algorithm = alg;
    cfg.batch_size = 50;
    cfg.epochs = epochs;
    cfg.optimizer.kind = OptimizerKind::sgd_momentum;
    cfg.optimizer.learning_rate = 0.01;
    cfg.optimizer.momentum = 0.9;
    cfg.seed = 12;
    cfg.record_wall_time = false;
    return cfg;
}

}  // namespace

TEST_CASE("zero epochs: only the initial validation record, model untouched") {
    Dataset ds = tiny_dataset();
    MlpModel model = make_mlp({64, 32, 10}, ActivationKind::tanh, 1);
    const MlpModel before = model;
    TrainConfig cfg = quick_config(TrainAlgorithm::bp, 0);
    const TrainingTrace trace = train(model, ds, cfg);
    REQUIRE(trace.records.size() == 1);
    CHECK(trace.records[0].split == "val");
    CHECK(trace.records[0].step == 0);
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
        CHECK(model.weights[l].values() == before.weights[l].values());
    }
}

TEST_CASE("training runs are deterministic given config and seed") {
    Dataset ds = tiny_dataset();
    for (TrainAlgorithm alg : {TrainAlgorithm::bp, TrainAlgorithm::dfa, TrainAlgorithm::tdfa,
                               TrainAlgorithm::shlw}) {
        MlpModel m1 = make_mlp({64, 24, 10}, ActivationKind::tanh, 3);
        MlpModel m2 = make_mlp({64, 24, 10}, ActivationKind::tanh, 3);
        TrainConfig cfg = quick_config(alg, 1);
        const TrainingTrace t1 = train(m1, ds, cfg);
        const TrainingTrace t2 = train(m2, ds, cfg);
        std::ostringstream c1, c2;
        t1.to_csv(c1);
        t2.to_csv(c2);
        CHECK(c1.str() == c2.str());
        for (std::size_t l = 0; l < m1.layer_count(); ++l) {
            CHECK(m1.weights[l].values() == m2.weights[l].values());
        }
    }
}

TEST_CASE("invalid configs are rejected before any step") {
    Dataset ds = tiny_dataset();
    MlpModel model = make_mlp({64, 16, 10}, ActivationKind::tanh, 4);
    TrainConfig cfg = quick_config(TrainAlgorithm::odfa, 1);
    CHECK_THROWS_AS(train(model, ds, cfg), std::invalid_argument);  // no session

    TrainConfig bad_dims = quick_config(TrainAlgorithm::bp, 1);
    MlpModel wrong = make_mlp({32, 16, 10}, ActivationKind::tanh, 4);
    CHECK_THROWS_AS(train(wrong, ds, bad_dims), std::invalid_argument);

    TrainConfig zero_batch = quick_config(TrainAlgorithm::bp, 1);
    zero_batch.batch_size = 0;
    CHECK_THROWS_AS(train(model, ds, zero_batch), std::invalid_argument);
}

TEST_CASE("odfa trace accounting: one projection per step in per_batch mode") {
    Dataset ds = tiny_dataset();
    MlpModel model = make_mlp({64, 20, 10}, ActivationKind::tanh, 6);
    OpuSession session(20, 10, 61, 62);
    TrainConfig cfg = quick_config(TrainAlgorithm::odfa, 1);
    cfg.batch_size = 90;  // 540 usable -> 6 steps per epoch
    const TrainingTrace trace = train(model, ds, cfg, &session);
    std::size_t train_steps = 0;
    for (const auto& r : trace.records) train_steps += r.split == "train" ? 1 : 0;
    CHECK(session.step_counter() == train_steps);
    CHECK(session.optical_seconds() ==
          static_cast<double>(train_steps) * 4.0 * (1.0 / 340.0));
}

TEST_CASE("odfa per_sample accounting: batch_size projections per step") {
    Dataset ds = make_synthetic_digits(60, 30, 7, tiny_options());
    MlpModel model = make_mlp({64, 12, 10}, ActivationKind::tanh, 8);
    OpuSession session(12, 10, 81, 82);
    TrainConfig cfg = quick_config(TrainAlgorithm::odfa, 1);
    cfg.batch_size = 18;  // 54 usable -> 3 steps
    cfg.granularity = ProjectionGranularity::per_sample;
    const TrainingTrace trace = train(model, ds, cfg, &session);
    std::size_t train_steps = 0;
    for (const auto& r : trace.records) train_steps += r.split == "train" ? 1 : 0;
    CHECK(train_steps == 3);
    CHECK(session.step_counter() == 54);
}

TEST_CASE("feedback set is constant for noiseless runs and drifts under drift") {
    Dataset ds = tiny_dataset();
    {
        MlpModel model = make_mlp({64, 18, 10}, ActivationKind::tanh, 9);
        FeedbackMatrixSet fb = FeedbackMatrixSet::gaussian(model.dims, 10);
        const FeedbackMatrixSet before = fb;
        TrainConfig cfg = quick_config(TrainAlgorithm::dfa, 1);
        train(model, ds, cfg, nullptr, &fb);
        REQUIRE(fb.per_layer.size() == before.per_layer.size());
        CHECK(fb.per_layer[0].values() == before.per_layer[0].values());
    }
    {
        MlpModel model = make_mlp({64, 18, 10}, ActivationKind::tanh, 9);
        FeedbackMatrixSet fb = FeedbackMatrixSet::gaussian(model.dims, 10);
        const FeedbackMatrixSet before = fb;
        TrainConfig cfg = quick_config(TrainAlgorithm::dfa, 1);
        cfg.noise = NoiseSpec{NoiseKind::drift, 0.01, 11};
        train(model, ds, cfg, nullptr, &fb);
        CHECK(fb.per_layer[0].values() != before.per_layer[0].values());
    }
}

TEST_CASE("digital noise with sigma zero matches noise kind none bit for bit") {
    Dataset ds = tiny_dataset();
    for (NoiseKind kind : {NoiseKind::tm_noise, NoiseKind::measurement_noise, NoiseKind::drift}) {
        MlpModel m1 = make_mlp({64, 14, 10}, ActivationKind::tanh, 13);
        MlpModel m2 = make_mlp({64, 14, 10}, ActivationKind::tanh, 13);
        TrainConfig clean = quick_config(TrainAlgorithm::dfa, 1);
        TrainConfig zeroed = clean;
        zeroed.noise = NoiseSpec{kind, 0.0, 123};
        const TrainingTrace t1 = train(m1, ds, clean);
        const TrainingTrace t2 = train(m2, ds, zeroed);
        for (std::size_t l = 0; l < m1.layer_count(); ++l) {
            CHECK(m1.weights[l].values() == m2.weights[l].values());
        }
        std::ostringstream c1, c2;
        t1.to_csv(c1);
        t2.to_csv(c2);
        CHECK(c1.str() == c2.str());
    }
}

TEST_CASE("shlw only trains the last layer") {
    Dataset ds = tiny_dataset();
    MlpModel model = make_mlp({64, 22, 10}, ActivationKind::tanh, 14);
    const MlpModel before = model;
    TrainConfig cfg = quick_config(TrainAlgorithm::shlw, 1);
    train(model, ds, cfg);
    CHECK(model.weights[0].values() == before.weights[0].values());
    CHECK(model.biases[0].values() == before.biases[0].values());
    CHECK(model.weights[1].values() != before.weights[1].values());
}

TEST_CASE("csv export carries the config hash and fixed columns") {
    Dataset ds = make_synthetic_digits(120, 40, 15, tiny_options());
    MlpModel model = make_mlp({64, 8, 10}, ActivationKind::tanh, 16);
    TrainConfig cfg = quick_config(TrainAlgorithm::dfa, 1);
    cfg.batch_size = 30;
    cfg.config_hash = "deadbeef01234567";
    const TrainingTrace trace = train(model, ds, cfg);
    std::ostringstream os;
    trace.to_csv(os);
    const std::string csv = os.str();
    CHECK(csv.find("# config_hash=deadbeef01234567") == 0);
    CHECK(csv.find("step,split,loss,accuracy,align_l1,optical_seconds,wall_seconds") !=
          std::string::npos);
    CHECK(csv.find("\nval") == std::string::npos);  // every record starts with a step number
}
