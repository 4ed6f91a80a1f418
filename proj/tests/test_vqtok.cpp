// Vector-quantized tokenizer: quantization oracles, straight-through
// gradients against finite differences, training, and the disk formats.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "dr/envs.hpp"
#include "dr/vqtok.hpp"

using namespace dr;
using namespace dr::vqtok;
namespace fs = std::filesystem;

namespace {

TokenizerConfig tiny_cfg() {
    TokenizerConfig c;
    c.frame_size = 8;
    c.grid = 2;
    c.codebook_size = 5;
    c.code_dim = 6;
    c.hidden = 12;
    c.epochs = 3;
    c.batch_frames = 4;
    c.seed = 1;
    return c;
}

std::vector<Frame> synthetic_frames(int n, int size, uint64_t seed) {
    std::vector<Frame> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Frame f(size, size, static_cast<uint8_t>(rng.uniform_int(40)));
        int x = rng.uniform_int(size - 2), y = rng.uniform_int(size - 2);
        f.fill_rect(y, x, 2, 2, {static_cast<uint8_t>(150 + rng.uniform_int(100)), 60, 200});
        out.push_back(f);
    }
    return out;
}

std::string tmpdir(const std::string& leaf) {
    auto d = fs::temp_directory_path() / "dreward_vqtok_test" / leaf;
    fs::remove_all(d);
    fs::create_directories(d);
    return d.string();
}

}  // namespace

TEST_CASE("config presets carry the reference values") {
    auto paper = TokenizerConfig::paper();
    CHECK(paper.codebook_size == 1024);
    CHECK(paper.code_dim == 64);
    CHECK(paper.commitment_beta == 0.25);
    auto fast = TokenizerConfig::fast();
    CHECK(fast.frame_size % fast.grid == 0);
    CHECK(fast.n_tokens() == fast.grid * fast.grid);
}

TEST_CASE("uninitialized tokenizer rejects calls") {
    Tokenizer t;
    Frame f(8, 8);
    CHECK_THROWS_AS(t.encode(f), UninitializedModelError);
    CHECK_THROWS_AS(t.decode(TokenGrid(2, 2)), UninitializedModelError);
}

TEST_CASE("quantize picks the nearest entry; ties break to the lowest index") {
    Tokenizer t(tiny_cfg());
    auto& cb = t.codebook();
    cb.value.setZero();
    cb.value(0, 0) = 1.0;
    cb.value(1, 0) = -1.0;
    cb.value(2, 0) = 3.0;
    cb.value(3, 0) = 1.0;  // duplicate of entry 0: tie
    nn::Mat feats(3, tiny_cfg().code_dim);
    feats.setZero();
    feats(0, 0) = 0.9;   // nearest: entry 0
    feats(1, 0) = -0.8;  // nearest: entry 1
    feats(2, 0) = 1.0;   // exact tie between 0 and 3 -> lowest index
    auto idx = t.quantize(feats);
    CHECK(idx == std::vector<int>{0, 1, 0});
}

TEST_CASE("one-entry codebook maps every frame to token 0") {
    auto cfg = tiny_cfg();
    cfg.codebook_size = 1;
    Tokenizer t(cfg);
    auto grid = t.encode(synthetic_frames(1, cfg.frame_size, 2)[0]);
    for (int v : grid.idx) CHECK(v == 0);
}

TEST_CASE("patch round-trip is lossless up to quantization of pixel values") {
    auto cfg = tiny_cfg();
    Tokenizer t(cfg);
    Frame f = synthetic_frames(1, cfg.frame_size, 3)[0];
    nn::Mat patches = t.frame_to_patches(f);
    CHECK(patches.rows() == cfg.n_tokens());
    CHECK(patches.cols() == cfg.patch_dim());
    Frame back = t.patches_to_frame(patches);
    CHECK(back == f);
}

TEST_CASE("train_step gradients match the straight-through semantics") {
    // The quantizer is non-differentiable, so the estimator is *defined* by
    // the surrogate: decoder input e + stopgrad(zq - e), codebook/commitment
    // terms with constant counterparts. Finite differences of those exact
    // surrogates are the oracle; for decoder params the true loss works too.
    auto cfg = tiny_cfg();
    auto frames = synthetic_frames(2, cfg.frame_size, 4);
    std::vector<const Frame*> batch{&frames[0], &frames[1]};

    Tokenizer t(cfg);
    nn::Mat P(2 * cfg.n_tokens(), cfg.patch_dim());
    P.topRows(cfg.n_tokens()) = t.frame_to_patches(frames[0]);
    P.bottomRows(cfg.n_tokens()) = t.frame_to_patches(frames[1]);

    auto mse = [](const nn::Mat& a, const nn::Mat& b) {
        return (a - b).squaredNorm() / static_cast<double>(a.size());
    };

    // freeze the base-point quantization
    nn::Mat e0 = t.encode_patch_features(P);
    std::vector<int> idx0 = t.quantize(e0);
    nn::Mat zq0(e0.rows(), cfg.code_dim);
    for (int r = 0; r < e0.rows(); ++r) zq0.row(r) = t.codebook().value.row(idx0[r]);
    nn::Mat offset0 = zq0 - e0;

    // populate analytic grads without changing weights
    nn::Adam noop(0.0);
    double base_loss = t.train_step(batch, noop);
    double direct = mse(t.decode_features(zq0), P) + mse(zq0, e0) +
                    cfg.commitment_beta * mse(e0, zq0);
    CHECK(base_loss == doctest::Approx(direct).epsilon(1e-9));

    auto surrogate = [&](const nn::Param* p) {
        if (p->name.rfind("dec", 0) == 0)  // decoder: true loss is smooth
            return mse(t.decode_features(e0 + offset0), P);
        if (p->name == "codebook") {
            nn::Mat rows(e0.rows(), cfg.code_dim);
            for (int r = 0; r < e0.rows(); ++r) rows.row(r) = t.codebook().value.row(idx0[r]);
            return mse(rows, e0);
        }
        // encoder: straight-through recon path + commitment, zq frozen
        nn::Mat e = t.encode_patch_features(P);
        return mse(t.decode_features(e + offset0), P) +
               cfg.commitment_beta * mse(e, zq0);
    };

    const double h = 1e-5;
    int checked = 0;
    for (nn::Param* p : t.params()) {
        nn::Mat analytic = p->grad;
        for (int probe = 0; probe < 4; ++probe) {
            int i = (probe * 3) % static_cast<int>(p->value.rows());
            int j = (probe * 7) % static_cast<int>(p->value.cols());
            double orig = p->value(i, j);
            p->value(i, j) = orig + h;
            double lp = surrogate(p);
            p->value(i, j) = orig - h;
            double lm = surrogate(p);
            p->value(i, j) = orig;
            double fd = (lp - lm) / (2 * h);
            CAPTURE(p->name);
            CHECK(std::abs(fd - analytic(i, j)) <= 1e-5 * (1.0 + std::abs(fd)));
            ++checked;
        }
    }
    CHECK(checked > 0);
}

TEST_CASE("training reduces the loss and reconstructions beat a gray screen") {
    auto cfg = tiny_cfg();
    cfg.frame_size = 16;
    cfg.grid = 4;
    cfg.epochs = 8;
    auto frames = synthetic_frames(24, cfg.frame_size, 5);
    Tokenizer t(cfg);
    auto report = t.train(frames);
    CHECK(report.last_epoch_mean < report.first_epoch_mean);

    Frame gray(cfg.frame_size, cfg.frame_size, 128);
    double recon_mse = 0.0, gray_mse = 0.0;
    for (const auto& f : frames) {
        recon_mse += frame_mse(t.decode(t.encode(f)), f);
        gray_mse += frame_mse(gray, f);
    }
    CHECK(recon_mse < gray_mse);
}

TEST_CASE("empty training set is rejected") {
    Tokenizer t(tiny_cfg());
    CHECK_THROWS_AS(t.train({}), EmptyInputError);
}

TEST_CASE("checkpoint round-trip preserves weights, hash, and outputs") {
    auto cfg = tiny_cfg();
    auto frames = synthetic_frames(8, cfg.frame_size, 6);
    Tokenizer t(cfg);
    t.train(frames);
    std::string dir = tmpdir("ckpt");
    t.save(dir);
    Tokenizer t2 = Tokenizer::load(dir);
    CHECK(t2.weights_hash() == t.weights_hash());
    CHECK(t2.encode(frames[0]) == t.encode(frames[0]));
    CHECK(t2.decode(t.encode(frames[1])) == t.decode(t.encode(frames[1])));
}

TEST_CASE("token video cache round-trips and records the tokenizer hash") {
    auto cfg = tiny_cfg();
    Tokenizer t(cfg);
    auto frames = synthetic_frames(5, cfg.frame_size, 7);
    std::vector<TokenGrid> grids;
    for (const auto& f : frames) grids.push_back(t.encode(f));
    std::string dir = tmpdir("tokens");
    save_token_video(dir, grids, t.weights_hash());
    auto [loaded, hash] = load_token_video(dir);
    CHECK(hash == t.weights_hash());
    REQUIRE(loaded.size() == grids.size());
    for (size_t i = 0; i < grids.size(); ++i) CHECK(loaded[i] == grids[i]);
}

TEST_CASE("encode/decode work on rendered environment frames") {
    auto task = envs::seen_tasks(6, 32).front();
    auto roll = envs::epsilon_noisy_rollout(task, 0.0, 1);
    auto cfg = TokenizerConfig::fast();
    Tokenizer t(cfg);
    auto grid = t.encode(roll.frames[0]);
    CHECK(grid.h == cfg.grid);
    CHECK(grid.w == cfg.grid);
    for (int v : grid.idx) {
        CHECK(v >= 0);
        CHECK(v < cfg.codebook_size);
    }
    Frame dec = t.decode(grid);
    CHECK(dec.h == 32);
}
