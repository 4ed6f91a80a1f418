// Reward stack: standardization algebra, novelty-bonus behavior, composite
// weighting, expert-statistics fitting, and checkpoint integrity.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dr/reward.hpp"

using namespace dr;
using namespace dr::reward;
namespace fs = std::filesystem;

namespace {

vqtok::TokenizerConfig tiny_tok_cfg() {
    vqtok::TokenizerConfig c;
    c.frame_size = 8;
    c.grid = 2;
    c.codebook_size = 4;
    c.code_dim = 4;
    c.hidden = 8;
    c.seed = 3;
    return c;
}

diffusion::DenoiserConfig tiny_den_cfg() {
    diffusion::DenoiserConfig c;
    c.K = 4;
    c.n_tokens = 4;
    c.context = 2;
    c.T = 4;
    c.width = 8;
    c.blocks = 1;
    c.heads = 2;
    c.mlp_mult = 2;
    c.seed = 5;
    return c;
}

RewardModelBundle tiny_bundle() {
    RewardModelBundle b;
    b.tokenizer = vqtok::Tokenizer(tiny_tok_cfg());
    b.model = diffusion::DiffusionModel(tiny_den_cfg(), diffusion::NoiseSchedule::linear(4, 4));
    b.cfg.context = 2;
    b.cfg.M = 1;
    b.cfg.denoise_steps = 2;
    b.cfg.noise_scale = 1.0;
    RndConfig rc;
    rc.in_dim = 8 * 8 * 3;
    rc.width = 16;
    rc.feat_dim = 8;
    rc.seed = 7;
    b.rnd = RndState(rc);
    return b;
}

Frame noise_frame(int size, uint64_t seed) {
    Frame f(size, size);
    Rng rng(seed);
    for (auto& p : f.px) p = static_cast<uint8_t>(rng.uniform() * 255.0);
    return f;
}

std::string tmpdir(const std::string& leaf) {
    auto d = fs::temp_directory_path() / "dreward_reward_test" / leaf;
    fs::remove_all(d);
    fs::create_directories(d);
    return d.string();
}

}  // namespace

TEST_CASE("standardize subtracts the mean and divides by the std") {
    RewardStats st;
    st.mean = 3.0;
    st.std = 2.0;
    st.fitted = true;
    CHECK(standardize(3.0, st) == doctest::Approx(0.0));
    CHECK(standardize(7.0, st) == doctest::Approx(2.0));
    CHECK(standardize(0.0, st) == doctest::Approx(-1.5));
}

TEST_CASE("reward config validation") {
    RewardConfig c;
    c.denoise_steps = 4;
    CHECK_NOTHROW(c.validate(4));
    auto bad = [&](auto&& mutate) {
        RewardConfig b = c;
        mutate(b);
        CHECK_THROWS_AS(b.validate(4), ConfigError);
    };
    bad([](RewardConfig& b) { b.alpha = -0.1; });
    bad([](RewardConfig& b) { b.alpha = 1.1; });
    bad([](RewardConfig& b) { b.beta = -1.0; });
    bad([](RewardConfig& b) { b.M = 0; });
    bad([](RewardConfig& b) { b.denoise_steps = 5; });
    bad([](RewardConfig& b) { b.denoise_steps = 0; });
    bad([](RewardConfig& b) { b.noise_scale = -0.5; });
    bad([](RewardConfig& b) { b.context = 0; });
}

TEST_CASE("novelty bonus: bounds, training decay, frozen target") {
    CHECK(RndConfig().width == 512);  // reference preset

    RndConfig rc;
    rc.in_dim = 8 * 8 * 3;
    rc.width = 16;
    rc.feat_dim = 8;
    rc.seed = 1;
    RndState rnd(rc);

    std::vector<Frame> seen;
    for (int i = 0; i < 8; ++i) seen.push_back(noise_frame(8, 100 + i));

    for (const auto& f : seen) {
        double r = rnd.reward(f);
        CHECK(r >= 0.0);
        CHECK(r <= 10.0);
        CHECK(rnd.raw_error(f) >= 0.0);
    }

    std::string tgt = rnd.target_hash();
    double before = 0.0;
    for (const auto& f : seen) before += rnd.raw_error(f);
    for (int i = 0; i < 200; ++i) rnd.update(seen);
    double after = 0.0;
    for (const auto& f : seen) after += rnd.raw_error(f);
    CHECK(after < 0.1 * before);            // predictor learns the seen frames
    CHECK(rnd.target_hash() == tgt);        // target never moves
    CHECK(rnd.update_count() == 200);
    CHECK(rnd.running_std() > 0.0);

    // an unseen frame stays more novel than the training set
    Frame unseen = noise_frame(8, 999);
    double seen_raw = rnd.raw_error(seen[0]);
    CHECK(rnd.raw_error(unseen) > seen_raw);

    CHECK_THROWS_AS(rnd.reward(Frame(4, 4)), InvalidInputError);
    CHECK_THROWS_AS(rnd.update({}), EmptyInputError);
    RndState blank;
    CHECK_THROWS_AS(blank.reward(seen[0]), UninitializedModelError);
    CHECK_THROWS_AS(RndState(RndConfig{}), ConfigError);  // in_dim unset

    auto path = tmpdir("rnd") + "/rnd.bin";
    rnd.save(path);
    RndState back = RndState::load(path);
    CHECK(back.target_hash() == tgt);
    CHECK(back.update_count() == 200);
    for (const auto& f : seen)
        CHECK(back.reward(f) == doctest::Approx(rnd.reward(f)).epsilon(1e-12));
}

TEST_CASE("history encoding pads short histories with the first frame") {
    auto bundle = tiny_bundle();
    Frame a = noise_frame(8, 1), b = noise_frame(8, 2), c = noise_frame(8, 3);

    auto w1 = encode_history({a}, bundle);
    CHECK(w1.frames == 2);
    auto ga = bundle.tokenizer.encode(a);
    for (int i = 0; i < 4; ++i) {
        CHECK(w1.flat[i] == ga.idx[i]);       // padded copy
        CHECK(w1.flat[4 + i] == ga.idx[i]);   // the frame itself
    }

    auto w3 = encode_history({a, b, c}, bundle);  // only the last two are kept
    auto gb = bundle.tokenizer.encode(b);
    auto gc = bundle.tokenizer.encode(c);
    for (int i = 0; i < 4; ++i) {
        CHECK(w3.flat[i] == gb.idx[i]);
        CHECK(w3.flat[4 + i] == gc.idx[i]);
    }

    CHECK_THROWS_AS(encode_history({}, bundle), EmptyInputError);
    RewardModelBundle blank;
    CHECK_THROWS_AS(encode_history({a}, blank), UninitializedModelError);
}

TEST_CASE("entropy reward averages M per-trajectory bounds") {
    auto bundle = tiny_bundle();
    std::vector<Frame> hist{noise_frame(8, 1), noise_frame(8, 2)};

    // [DERIVED] oracle: replay the same RNG through the sampler directly
    bundle.cfg.M = 3;
    Rng r1(42), r2(42);
    double got = entropy_reward(hist, bundle, r1);
    auto cond = encode_history(hist, bundle);
    double want = 0.0;
    for (int m = 0; m < 3; ++m)
        want += bundle.model.sample(cond, bundle.cfg.denoise_steps, 1.0, r2).bound;
    want /= 3.0;
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
    CHECK(std::isfinite(got));

    // deterministic sampling ignores the RNG entirely
    bundle.cfg.noise_scale = 0.0;
    Rng ra(1), rb(999);
    CHECK(entropy_reward(hist, bundle, ra) ==
          doctest::Approx(entropy_reward(hist, bundle, rb)).epsilon(1e-15));
}

TEST_CASE("log-likelihood reward is a deterministic function of its inputs") {
    auto bundle = tiny_bundle();
    std::vector<Frame> hist{noise_frame(8, 1), noise_frame(8, 2)};
    Frame next = noise_frame(8, 3);
    double v1 = loglik_reward(hist, next, bundle);
    double v2 = loglik_reward(hist, next, bundle);
    CHECK(v1 == v2);
    CHECK(std::isfinite(v1));
    CHECK(v1 < 0.0);
}

TEST_CASE("fit_stats pools every timestep and normalizes to mean 0 / std 1") {
    auto bundle = tiny_bundle();
    bundle.cfg.noise_scale = 0.0;  // deterministic scoring so the oracle can replay it
    std::vector<std::vector<Frame>> vids;
    for (int v = 0; v < 3; ++v) {
        std::vector<Frame> vid;
        for (int f = 0; f < 4; ++f) vid.push_back(noise_frame(8, 10 * v + f));
        vids.push_back(vid);
    }
    Rng rng(0);
    RewardStats st = fit_stats(vids, bundle, rng);
    CHECK(st.fitted);
    CHECK(st.n == 12);
    CHECK(bundle.stats.mean == doctest::Approx(st.mean));

    // [DERIVED] re-score every prefix and check the standardized pool
    std::vector<double> zs;
    Rng rr(0);
    for (const auto& vid : vids) {
        std::vector<Frame> hist;
        for (const auto& f : vid) {
            hist.push_back(f);
            zs.push_back(standardize(entropy_reward(hist, bundle, rr), st));
        }
    }
    double mean = 0.0, var = 0.0;
    for (double z : zs) mean += z;
    mean /= zs.size();
    for (double z : zs) var += (z - mean) * (z - mean);
    var /= (zs.size() - 1);
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-9));

    // constant rewards hit the std floor instead of dividing by zero
    auto flat = tiny_bundle();
    flat.cfg.noise_scale = 0.0;
    std::vector<std::vector<Frame>> same{{noise_frame(8, 1), noise_frame(8, 1)},
                                         {noise_frame(8, 1), noise_frame(8, 1)}};
    Rng r2(0);
    RewardStats fs2 = fit_stats(same, flat, r2);
    CHECK(fs2.std == doctest::Approx(1e-6));

    RewardModelBundle one = tiny_bundle();
    Rng r3(0);
    CHECK_THROWS_AS(fit_stats({{noise_frame(8, 1)}}, one, r3), InsufficientDataError);
}

TEST_CASE("composite reward reduces to its parts at the alpha extremes") {
    auto bundle = tiny_bundle();
    bundle.cfg.noise_scale = 0.0;
    bundle.stats = RewardStats{0.5, 2.0, 10, true};
    std::vector<Frame> hist{noise_frame(8, 1), noise_frame(8, 2)};
    Frame obs = noise_frame(8, 3);
    Rng rng(0);

    bundle.cfg.alpha = 1.0;
    bundle.cfg.beta = 0.25;
    double pure_rnd = diffusion_reward(hist, obs, 1, bundle, rng);
    CHECK(pure_rnd == doctest::Approx(rnd_reward(obs, bundle.rnd) + 0.25).epsilon(1e-12));

    bundle.cfg.alpha = 0.0;
    bundle.cfg.beta = 0.0;
    double pure_ent = diffusion_reward(hist, obs, 0, bundle, rng);
    Rng r2(0);
    CHECK(pure_ent ==
          doctest::Approx(standardize(entropy_reward(hist, bundle, r2), bundle.stats))
              .epsilon(1e-12));

    // the general mix is the affine combination of the two parts
    bundle.cfg.alpha = 0.6;
    bundle.cfg.beta = 2.0;
    Rng r3(0);
    double mix = diffusion_reward(hist, obs, 1, bundle, r3);
    CHECK(mix == doctest::Approx(0.4 * pure_ent + 0.6 * rnd_reward(obs, bundle.rnd) + 2.0)
                     .epsilon(1e-9));

    CHECK_THROWS_AS(diffusion_reward(hist, obs, 2, bundle, rng), InvalidInputError);
    bundle.stats.fitted = false;
    CHECK_THROWS_AS(diffusion_reward(hist, obs, 0, bundle, rng), InsufficientDataError);
}

TEST_CASE("fps measurement guards its inputs and returns a positive rate") {
    auto bundle = tiny_bundle();
    bundle.cfg.noise_scale = 0.0;
    bundle.stats = RewardStats{0.0, 1.0, 10, true};
    std::vector<Frame> hist{noise_frame(8, 1), noise_frame(8, 2)};
    Rng rng(0);
    CHECK_THROWS_AS(measure_fps(bundle, 0, hist, rng), InvalidInputError);
    CHECK(measure_fps(bundle, 3, hist, rng) > 0.0);
}

TEST_CASE("bundle roundtrip preserves scoring; tampered manifests are rejected") {
    auto bundle = tiny_bundle();
    bundle.cfg.alpha = 0.8;
    bundle.cfg.beta = 0.5;
    bundle.cfg.denoise_steps = 3;
    bundle.stats = RewardStats{1.5, 0.7, 42, true};
    auto dir = tmpdir("bundle");
    bundle.save(dir);

    RewardModelBundle back = RewardModelBundle::load(dir);
    CHECK(back.cfg.alpha == doctest::Approx(0.8));
    CHECK(back.cfg.beta == doctest::Approx(0.5));
    CHECK(back.cfg.denoise_steps == 3);
    CHECK(back.stats.mean == doctest::Approx(1.5));
    CHECK(back.stats.n == 42);
    CHECK(back.stats.fitted);
    std::vector<Frame> hist{noise_frame(8, 1), noise_frame(8, 2)};
    Frame next = noise_frame(8, 3);
    CHECK(loglik_reward(hist, next, back) ==
          doctest::Approx(loglik_reward(hist, next, bundle)).epsilon(1e-15));

    // corrupt the recorded diffusion hash
    std::ifstream in(dir + "/manifest.json");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    auto pos = text.find(back.model.weights_hash());
    REQUIRE(pos != std::string::npos);
    text[pos] = text[pos] == '0' ? '1' : '0';
    std::ofstream(dir + "/manifest.json") << text;
    CHECK_THROWS_AS(RewardModelBundle::load(dir), ConfigError);

    CHECK_THROWS_AS(RewardModelBundle::load(tmpdir("nothing")), IoError);
}

TEST_CASE("reward curve csv roundtrip") {
    std::vector<RewardCurveRow> rows{
        {"vid-a", 0, -1.25, 0.5, 3.0, 0, 2.5},
        {"vid-a", 1, -0.75, 1.0, 2.0, 1, 3.0},
        {"vid-b", 0, -2.0, -0.25, 0.125, 0, -0.1},
    };
    auto path = tmpdir("csv") + "/curve.csv";
    write_reward_curve_csv(path, rows);
    auto back = read_reward_curve_csv(path);
    REQUIRE(back.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].video_id == rows[i].video_id);
        CHECK(back[i].step == rows[i].step);
        CHECK(back[i].r_ce == doctest::Approx(rows[i].r_ce).epsilon(1e-12));
        CHECK(back[i].r_ce_std == doctest::Approx(rows[i].r_ce_std).epsilon(1e-12));
        CHECK(back[i].r_rnd == doctest::Approx(rows[i].r_rnd).epsilon(1e-12));
        CHECK(back[i].sparse == rows[i].sparse);
        CHECK(back[i].r_diff == doctest::Approx(rows[i].r_diff).epsilon(1e-12));
    }
    CHECK_THROWS_AS(read_reward_curve_csv(path + ".missing"), IoError);
}
