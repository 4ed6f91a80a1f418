#pragma once

#include <string>
#include <vector>

#include "dr/diffusion.hpp"
#include "dr/image.hpp"
#include "dr/nn.hpp"
#include "dr/rng.hpp"
#include "dr/vqtok.hpp"

namespace dr::reward {

struct RewardConfig {
    double alpha = 0.95;   // weight on the novelty bonus; 1-alpha on the entropy term
    double beta = 1.0;     // weight on the sparse task reward
    int M = 1;             // reverse trajectories averaged per reward call
    int denoise_steps = 10;
    double noise_scale = 1.0;
    int context = 2;       // conditioning frames

    void validate(int schedule_T) const;
};

struct RewardStats {
    double mean = 0.0;
    double std = 1.0;
    long n = 0;
    bool fitted = false;
};

double standardize(double r_ce, const RewardStats& stats);

struct RndConfig {
    int in_dim = 0;      // flattened RGB size; set from the frame shape
    int width = 512;     // hidden width (paper preset)
    int feat_dim = 64;
    double lr = 1e-3;
    uint64_t seed = 0;
};

// Random network distillation: squared predictor/target feature error,
// normalized by a running std of the raw bonus and clipped to [0, 10].
class RndState {
public:
    RndState() = default;
    explicit RndState(RndConfig cfg);

    bool initialized() const { return initialized_; }
    const RndConfig& config() const { return cfg_; }

    double reward(const Frame& obs) const;      // normalized, in [0, 10]
    double raw_error(const Frame& obs) const;   // unnormalized squared error
    // One predictor gradient step on the batch; updates running statistics.
    // Returns the batch loss before the step.
    double update(const std::vector<Frame>& batch);

    long update_count() const { return updates_; }
    double running_std() const;
    std::string target_hash() const;

    void save(const std::string& path) const;
    static RndState load(const std::string& path);

private:
    Eigen::VectorXd flatten(const Frame& obs) const;
    Eigen::VectorXd target_features(const Eigen::VectorXd& x) const;

    RndConfig cfg_;
    bool initialized_ = false;
    // frozen target
    nn::Mat tgt_w1_, tgt_w2_;
    Eigen::VectorXd tgt_b1_, tgt_b2_;
    // trainable predictor
    mutable std::vector<std::unique_ptr<nn::Param>> pred_;
    nn::Adam opt_;
    // running variance of the raw bonus (Welford)
    long updates_ = 0;
    long stat_n_ = 0;
    double stat_mean_ = 0.0;
    double stat_m2_ = 0.0;
};

// Frozen tokenizer + diffusion model + reward coefficients + expert stats +
// novelty state. Everything needed to score a transition online.
struct RewardModelBundle {
    vqtok::Tokenizer tokenizer;
    diffusion::DiffusionModel model;
    RewardConfig cfg;
    RewardStats stats;
    RndState rnd;

    void save(const std::string& dir) const;
    static RewardModelBundle load(const std::string& dir);
};

// Conditioning window from the last cfg.context frames; shorter histories are
// left-padded by repeating the earliest frame.
diffusion::ConditionWindow encode_history(const std::vector<Frame>& history,
                                          const RewardModelBundle& bundle);

// Mean per-trajectory variational bound over M strided reverse chains (nats).
double entropy_reward(const std::vector<Frame>& history, const RewardModelBundle& bundle,
                      Rng& rng);

// ELBO of the observed next frame given the history window (nats).
// Deterministic: the evaluation RNG is seeded from the inputs and weights.
double loglik_reward(const std::vector<Frame>& history, const Frame& next,
                     const RewardModelBundle& bundle);

double rnd_reward(const Frame& obs, const RndState& rnd);
void rnd_update(const std::vector<Frame>& batch, RndState& rnd);

// Pooled mean/std of entropy_reward over every timestep of every expert
// video. Also stores the result in bundle.stats.
RewardStats fit_stats(const std::vector<std::vector<Frame>>& expert_videos,
                      RewardModelBundle& bundle, Rng& rng);

// Composite reward: (1-alpha) * standardized entropy + alpha * novelty +
// beta * sparse.
double diffusion_reward(const std::vector<Frame>& history, const Frame& obs, int sparse,
                        const RewardModelBundle& bundle, Rng& rng);

// Wall-clock rewards/second of diffusion_reward on the given history.
double measure_fps(const RewardModelBundle& bundle, int n_calls,
                   const std::vector<Frame>& history, Rng& rng);

struct RewardCurveRow {
    std::string video_id;
    int step = 0;
    double r_ce = 0.0;
    double r_ce_std = 0.0;
    double r_rnd = 0.0;
    int sparse = 0;
    double r_diff = 0.0;
};

void write_reward_curve_csv(const std::string& path, const std::vector<RewardCurveRow>& rows);
std::vector<RewardCurveRow> read_reward_curve_csv(const std::string& path);

}  // namespace dr::reward
