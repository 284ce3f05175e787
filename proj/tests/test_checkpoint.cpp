#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "photondfa/checkpoint.hpp"
#include "photondfa/model_io.hpp"
#include "photondfa/rng.hpp"

using namespace photondfa;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("photondfa_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

}  // namespace

TEST_CASE("checkpoint round trip preserves tensors and metadata") {
    TempDir dir;
    Checkpoint ckpt;
    Tensor a({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor b({4}, {0.5, -0.25, 1e-300, 12345.678});
    ckpt.tensors.push_back({"a", a});
    ckpt.tensors.push_back({"b", b});
    ckpt.metadata = {{"purpose", "test"}, {"value", 42}};
    const std::string path = dir.file("ckpt.bin");
    save_checkpoint(path, ckpt);

    const Checkpoint loaded = load_checkpoint(path);
    REQUIRE(loaded.tensors.size() == 2);
    CHECK(loaded.tensors[0].name == "a");
    CHECK(loaded.require("a").values() == a.values());
    CHECK(loaded.require("b").values() == b.values());
    CHECK(loaded.require("a").shape() == a.shape());
    CHECK(loaded.metadata.at("value").get<int>() == 42);
    CHECK(loaded.find("missing") == nullptr);
}

TEST_CASE("float32 storage keeps values to single precision") {
    TempDir dir;
    Checkpoint ckpt;
    Tensor t({3}, {1.0, 1.0 / 3.0, -2.5});
    ckpt.tensors.push_back({"t", t});
    const std::string path = dir.file("f32.bin");
    save_checkpoint(path, ckpt, true);
    const Checkpoint loaded = load_checkpoint(path);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(loaded.require("t")[i] ==
              static_cast<double>(static_cast<float>(t[i])));
    }
}

TEST_CASE("corrupt checkpoints are rejected") {
    TempDir dir;
    const std::string path = dir.file("bad.bin");
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOTMAGIC and then some";
    }
    CHECK_THROWS_AS(load_checkpoint(path), checkpoint_error);

    Checkpoint ckpt;
    ckpt.tensors.push_back({"x", Tensor({8}, std::vector<double>(8, 1.0))});
    const std::string good = dir.file("good.bin");
    save_checkpoint(good, ckpt);
    // truncate mid-data
    std::string bytes;
    {
        std::ifstream f(good, std::ios::binary);
        bytes.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    }
    const std::string cut = dir.file("cut.bin");
    {
        std::ofstream f(cut, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(cut), checkpoint_error);
    CHECK_THROWS_AS(load_checkpoint(dir.file("does_not_exist.bin")), checkpoint_error);
}

TEST_CASE("opu session round trip preserves drifted state and counters") {
    TempDir dir;
    OpuSession session(16, 12, 201, 202, NoiseSpec{NoiseKind::drift, 0.05, 203});
    session.set_threshold(0.31);
    Tensor e({12});
    fill_gaussian(e.values(), 204);
    for (int i = 0; i < 3; ++i) session.project_feedback(e);

    const std::string path = dir.file("session.bin");
    save_opu_session(path, session);
    OpuSession restored = load_opu_session(path);

    CHECK(restored.tm().real_part.values() == session.tm().real_part.values());
    CHECK(restored.tm().imag_part.values() == session.tm().imag_part.values());
    CHECK(restored.anchor().r.values() == session.anchor().r.values());
    CHECK(restored.threshold() == session.threshold());
    CHECK(restored.step_counter() == session.step_counter());
    CHECK(restored.optical_seconds() == session.optical_seconds());

    // continuing both sessions produces identical signals
    const Tensor a = session.project_feedback(e);
    const Tensor b = restored.project_feedback(e);
    CHECK(a.values() == b.values());
}

TEST_CASE("mlp checkpoint round trip") {
    TempDir dir;
    MlpModel model = make_mlp({6, 5, 4}, ActivationKind::tanh, 42);
    const std::string path = dir.file("mlp.bin");
    save_mlp(path, model, {{"note", "unit"}});
    auto [loaded, extra] = load_mlp(path);
    CHECK(loaded.dims == model.dims);
    CHECK(loaded.hidden_activation == model.hidden_activation);
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
        CHECK(loaded.weights[l].values() == model.weights[l].values());
        CHECK(loaded.biases[l].values() == model.biases[l].values());
    }
    CHECK(extra.at("note").get<std::string>() == "unit");
}
