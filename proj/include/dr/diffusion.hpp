#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "dr/nn.hpp"
#include "dr/rng.hpp"
#include "dr/vqtok.hpp"

namespace dr::diffusion {

using vqtok::TokenGrid;

// Mask-and-replace transition parameters over T steps. Token vocabulary is
// K real codes plus one MASK symbol (index K). At step t each non-mask token
// is kept w.p. alpha_t, resampled uniformly over the K codes w.p. K*beta_t,
// or masked w.p. gamma_t; MASK is absorbing.
struct NoiseSchedule {
    int T = 0;
    int K = 0;
    Eigen::VectorXd alpha, beta, gamma;              // per-step, index t in 1..T
    Eigen::VectorXd alpha_bar, beta_bar, gamma_bar;  // cumulative, index 0..T

    int mask_token() const { return K; }
    int vocab() const { return K + 1; }

    // Default preset: gamma_bar rises linearly 0 -> gamma_end, alpha_bar
    // falls linearly 1 -> alpha_end, beta_bar = (1 - alpha_bar - gamma_bar)/K.
    static NoiseSchedule linear(int T, int K, double gamma_end = 0.9, double alpha_end = 0.01);

    // Composed keep/uniform/mask parameters for the segment s -> t (s < t).
    struct Seg {
        double a = 1.0, b = 0.0, g = 0.0;
    };
    Seg segment(int s, int t) const;

    // q(z_t = j | z_0 = code) for all j, as a vocab-sized vector.
    Eigen::VectorXd marginal(int t, int z0) const;
    // Model prior at T: MASK w.p. gamma_bar_T, uniform over codes otherwise.
    Eigen::VectorXd prior() const;
};

// Transition probability from -> to under a composed segment.
double seg_trans_prob(const NoiseSchedule::Seg& seg, int K, int from, int to);

// Closed-form Bayes posterior q(z_s = j | z_t = zt, z_0 = z0) over the vocab.
Eigen::VectorXd posterior_vec(const NoiseSchedule& sched, int s, int t, int zt, int z0);

// Posterior rows for every candidate z0 (K x vocab), used to marginalize the
// predicted x0 distribution through the closed form.
nn::Mat posterior_mix_matrix(const NoiseSchedule& sched, int s, int t, int zt);

// Corrupts z0 to timestep t by sampling the cumulative marginal per token.
// t = 0 returns the input unchanged.
TokenGrid forward_sample(const TokenGrid& z0, int t, const NoiseSchedule& sched, Rng& rng);

// The last `context` token grids, flattened oldest-first. MASK never appears.
struct ConditionWindow {
    std::vector<int> flat;
    int frames = 0;
    int tokens_per_frame = 0;

    ConditionWindow() = default;
    ConditionWindow(const std::vector<TokenGrid>& grids, int vocab_codes);
};

struct DenoiserConfig {
    int K = 128;        // real codes (mask token is implicit)
    int n_tokens = 64;  // tokens per frame
    int context = 2;    // conditioning frames (paper default 2)
    int T = 100;        // training timesteps
    int width = 128;
    int blocks = 4;
    int heads = 4;
    int mlp_mult = 4;
    uint64_t seed = 0;

    static DenoiserConfig desk();
    static DenoiserConfig fast();  // matches TokenizerConfig::fast()
    int seq_len() const { return context * n_tokens + n_tokens; }
};

// Transformer over [condition tokens ; noisy target tokens] predicting, per
// target position, a categorical distribution over the K real codes.
class Denoiser {
public:
    Denoiser() = default;
    explicit Denoiser(DenoiserConfig cfg);

    bool initialized() const { return initialized_; }
    const DenoiserConfig& config() const { return cfg_; }

    // Training-mode forward; logits node lives in the caller's graph.
    nn::Node* forward_logits(nn::Graph& g, const std::vector<int>& zt, int t,
                             const ConditionWindow& cond) const;
    // Inference: per-token probability rows (n_tokens x K).
    nn::Mat forward_probs(const std::vector<int>& zt, int t, const ConditionWindow& cond) const;

    std::vector<nn::Param*> params() const;

private:
    DenoiserConfig cfg_;
    bool initialized_ = false;
    mutable std::vector<std::unique_ptr<nn::Param>> params_;
    nn::Param* p(const std::string& name) const;
    void add_param(const std::string& name, int rows, int cols);
};

struct DiffusionTrajectory {
    std::vector<TokenGrid> grids;    // z at timesteps.front() .. 0
    std::vector<int> timesteps;      // strided steps, descending, ending conceptually at 0
    // Per-trajectory variational bound over the strided chain, in nats:
    // recon - sum KL(posterior || model) - prior KL.
    double bound = 0.0;
};

struct TrainConfig {
    int epochs = 20;
    int batch = 8;
    double lr = 1e-3;
    double aux_weight = 1e-3;  // auxiliary x0 cross-entropy weight
    uint64_t seed = 0;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    int windows_used = 0;
    int videos_skipped = 0;
};

// Frozen tokenizer + schedule + denoiser. Frozen-model operations build
// per-call graphs and only read parameters, so concurrent calls are safe.
class DiffusionModel {
public:
    DiffusionModel() = default;
    DiffusionModel(DenoiserConfig cfg, NoiseSchedule sched)
        : denoiser_(cfg), sched_(std::move(sched)) {}

    const NoiseSchedule& schedule() const { return sched_; }
    const Denoiser& denoiser() const { return denoiser_; }
    Denoiser& denoiser() { return denoiser_; }

    // p_theta(z_s | z_t, cond) per token (n_tokens x vocab), from the
    // x0-parameterization marginalized through the closed-form posterior.
    nn::Mat reverse_dist(const TokenGrid& zt, int t, int s, const ConditionWindow& cond) const;

    // One reverse step t -> s. noise_scale 0 takes the argmax (deterministic);
    // scale 1 is exact categorical sampling via Gumbel noise on log-probs.
    TokenGrid reverse_step(const TokenGrid& zt, int t, int s, const ConditionWindow& cond,
                           double noise_scale, Rng& rng) const;

    // Strided reverse chain from an all-MASK grid; `steps` of the T trained
    // timesteps are visited (steps = T is the full chain). Also evaluates the
    // per-trajectory bound used by the entropy reward.
    DiffusionTrajectory sample(const ConditionWindow& cond, int steps, double noise_scale,
                               Rng& rng) const;

    enum class ElboMode {
        kFull,        // sum all timesteps; z_t sampled from q(z_t|z0)
        kExhaustive,  // exact expectation by chain enumeration (tiny models)
    };
    double elbo(const TokenGrid& z0, const ConditionWindow& cond, ElboMode mode, Rng& rng) const;

    // Negative-ELBO training with auxiliary x0 cross-entropy. Videos shorter
    // than context+1 frames are skipped with a warning.
    TrainReport train(const std::vector<std::vector<TokenGrid>>& token_videos,
                      const TrainConfig& tc);

    void save(const std::string& dir, const std::string& tokenizer_hash) const;
    static DiffusionModel load(const std::string& dir, std::string* tokenizer_hash = nullptr);
    std::string weights_hash() const;

private:
    double chain_bound(const std::vector<int>& timesteps,
                       const std::vector<TokenGrid>& grids,
                       const std::vector<nn::Mat>& probs_per_step,
                       const ConditionWindow& cond) const;

    Denoiser denoiser_;
    NoiseSchedule sched_;
};

// Uniformly strided timestep subset of [T..1], descending, `steps` entries.
std::vector<int> strided_timesteps(int T, int steps);

}  // namespace dr::diffusion
