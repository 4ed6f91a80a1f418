#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dr/diffusion.hpp"
#include "dr/envs.hpp"
#include "dr/reward.hpp"
#include "dr/rl.hpp"
#include "dr/vqtok.hpp"

namespace dr::harness {

// One experiment = one JSON config. Presets fill every field; a config file
// names a preset and overrides individual keys.
struct ExperimentConfig {
    std::string preset = "desk";
    std::string out_dir = "out";
    int grid = 6;
    int render_size = 64;
    int n_per_task = 20;
    std::vector<uint64_t> seeds{0, 1, 2};

    vqtok::TokenizerConfig tokenizer;
    diffusion::DenoiserConfig denoiser;
    diffusion::TrainConfig diffusion_train;
    reward::RewardConfig reward_cfg;
    int rnd_width = 512;
    rl::AgentConfig agent;
    long rl_budget = 12000;

    static ExperimentConfig named_preset(const std::string& name);  // desk | fast | paper
    static ExperimentConfig from_json_file(const std::string& path);
    void to_json_file(const std::string& path) const;
};

// Writes <dir>/run_manifest.json recording the producing command, config and
// input hashes, enough to re-run the stage.
void write_run_manifest(const std::string& dir, const std::string& command,
                        const ExperimentConfig& cfg,
                        const std::vector<std::pair<std::string, std::string>>& input_hashes);

// ---- generative-diversity table (pairwise similarity of M continuations)
struct DiversityGroup {
    double eps = 0.0;
    double mean_pairwise_ssim = 0.0;
    double mean_pairwise_psnr = 0.0;
    int windows = 0;
};
struct DiversityReport {
    int m_samples = 0;
    std::vector<DiversityGroup> groups;
};

// groups: (eps, videos). Every valid conditioning window (stride `window_stride`)
// contributes M generated continuations; single-frame videos are skipped.
DiversityReport analyze_diversity(
    const reward::RewardModelBundle& bundle,
    const std::vector<std::pair<double, std::vector<std::vector<Frame>>>>& groups,
    int m_samples, Rng& rng, int window_stride = 4);

void write_diversity_csv(const std::string& path, const DiversityReport& report);

// ---- per-step reward curves for labeled video groups
struct RewardGroupSummary {
    std::string label;
    double mean_r_ce_std = 0.0;
    int steps = 0;
};
struct RewardCurveReport {
    std::vector<reward::RewardCurveRow> rows;
    std::vector<RewardGroupSummary> groups;
};

RewardCurveReport reward_curve_report(
    const reward::RewardModelBundle& bundle,
    const std::vector<std::pair<std::string, std::vector<std::vector<Frame>>>>& labeled_groups,
    Rng& rng);

// ---- generalization gap with a permutation test
struct GapReport {
    double expert_mean = 0.0;
    double random_mean = 0.0;
    double gap = 0.0;       // expert - random, in standardized units
    double p_value = 1.0;   // one-sided permutation p for gap > 0
    double shuffled_gap = 0.0;
    double shuffled_p = 1.0;  // same test after label shuffling (negative control)
    int n_expert = 0;
    int n_random = 0;
};

GapReport gap_report(const std::vector<double>& expert_rewards,
                     const std::vector<double>& random_rewards, Rng& rng,
                     int n_permutations = 2000);

// Scores every timestep of every video with the standardized entropy reward.
std::vector<double> score_videos(const reward::RewardModelBundle& bundle,
                                 const std::vector<std::vector<Frame>>& videos, Rng& rng);

// ---- minimal PNG line plots
struct Series {
    std::string label;
    std::vector<double> x, y;
};

void plot_lines(const std::string& path, const std::vector<Series>& series, int width = 640,
                int height = 400);

}  // namespace dr::harness
