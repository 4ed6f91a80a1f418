#include "dr/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dr::harness {

namespace {

json tokenizer_to_json(const vqtok::TokenizerConfig& c) {
    return json{{"frame_size", c.frame_size}, {"grid", c.grid},
                {"codebook_size", c.codebook_size}, {"code_dim", c.code_dim},
                {"hidden", c.hidden}, {"commitment_beta", c.commitment_beta},
                {"epochs", c.epochs}, {"batch_frames", c.batch_frames},
                {"lr", c.lr}, {"seed", c.seed}};
}

void tokenizer_from_json(const json& j, vqtok::TokenizerConfig& c) {
    c.frame_size = j.value("frame_size", c.frame_size);
    c.grid = j.value("grid", c.grid);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.code_dim = j.value("code_dim", c.code_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.commitment_beta = j.value("commitment_beta", c.commitment_beta);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_frames = j.value("batch_frames", c.batch_frames);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
}

json denoiser_to_json(const diffusion::DenoiserConfig& c) {
    return json{{"K", c.K}, {"n_tokens", c.n_tokens}, {"context", c.context},
                {"T", c.T}, {"width", c.width}, {"blocks", c.blocks},
                {"heads", c.heads}, {"mlp_mult", c.mlp_mult}, {"seed", c.seed}};
}

void denoiser_from_json(const json& j, diffusion::DenoiserConfig& c) {
    c.K = j.value("K", c.K);
    c.n_tokens = j.value("n_tokens", c.n_tokens);
    c.context = j.value("context", c.context);
    c.T = j.value("T", c.T);
    c.width = j.value("width", c.width);
    c.blocks = j.value("blocks", c.blocks);
    c.heads = j.value("heads", c.heads);
    c.mlp_mult = j.value("mlp_mult", c.mlp_mult);
    c.seed = j.value("seed", c.seed);
}

}  // namespace

ExperimentConfig ExperimentConfig::named_preset(const std::string& name) {
    ExperimentConfig c;
    c.preset = name;
    if (name == "desk") {
        c.tokenizer = vqtok::TokenizerConfig::desk();
        c.denoiser = diffusion::DenoiserConfig::desk();
        c.render_size = 64;
        c.rnd_width = 256;
        c.rl_budget = 20000;
    } else if (name == "fast") {
        c.tokenizer = vqtok::TokenizerConfig::fast();
        c.denoiser = diffusion::DenoiserConfig::fast();
        c.render_size = 32;
        c.n_per_task = 12;
        c.rnd_width = 128;
        c.reward_cfg.denoise_steps = 5;
        c.rl_budget = 12000;
        c.diffusion_train.epochs = 10;
    } else if (name == "paper") {
        // Reference values from the source experiments; not sized for a desk run.
        c.tokenizer = vqtok::TokenizerConfig::paper();
        c.denoiser = diffusion::DenoiserConfig::desk();
        c.denoiser.K = c.tokenizer.codebook_size;
        c.denoiser.n_tokens = c.tokenizer.n_tokens();
        c.render_size = 64;
        c.rnd_width = 512;
        c.agent = rl::AgentConfig::paper();
        c.rl_budget = 1000000;
        c.reward_cfg.denoise_steps = 10;
    } else {
        throw ConfigError("unknown preset: " + name);
    }
    // keep the stages mutually consistent
    c.denoiser.K = c.tokenizer.codebook_size;
    c.denoiser.n_tokens = c.tokenizer.n_tokens();
    c.denoiser.context = c.reward_cfg.context;
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path);
    json j = json::parse(in);
    ExperimentConfig c = named_preset(j.value("preset", std::string("desk")));
    c.out_dir = j.value("out_dir", c.out_dir);
    c.grid = j.value("grid", c.grid);
    c.render_size = j.value("render_size", c.render_size);
    c.n_per_task = j.value("n_per_task", c.n_per_task);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("tokenizer")) tokenizer_from_json(j.at("tokenizer"), c.tokenizer);
    if (j.contains("denoiser")) denoiser_from_json(j.at("denoiser"), c.denoiser);
    if (j.contains("diffusion_train")) {
        const json& t = j.at("diffusion_train");
        c.diffusion_train.epochs = t.value("epochs", c.diffusion_train.epochs);
        c.diffusion_train.batch = t.value("batch", c.diffusion_train.batch);
        c.diffusion_train.lr = t.value("lr", c.diffusion_train.lr);
        c.diffusion_train.aux_weight = t.value("aux_weight", c.diffusion_train.aux_weight);
        c.diffusion_train.seed = t.value("seed", c.diffusion_train.seed);
    }
    if (j.contains("reward")) {
        const json& r = j.at("reward");
        c.reward_cfg.alpha = r.value("alpha", c.reward_cfg.alpha);
        c.reward_cfg.beta = r.value("beta", c.reward_cfg.beta);
        c.reward_cfg.M = r.value("M", c.reward_cfg.M);
        c.reward_cfg.denoise_steps = r.value("denoise_steps", c.reward_cfg.denoise_steps);
        c.reward_cfg.noise_scale = r.value("noise_scale", c.reward_cfg.noise_scale);
        c.reward_cfg.context = r.value("context", c.reward_cfg.context);
    }
    c.rnd_width = j.value("rnd_width", c.rnd_width);
    if (j.contains("agent")) {
        const json& a = j.at("agent");
        c.agent.gamma = a.value("gamma", c.agent.gamma);
        c.agent.n_step = a.value("n_step", c.agent.n_step);
        c.agent.batch = a.value("batch", c.agent.batch);
        c.agent.lr = a.value("lr", c.agent.lr);
        c.agent.update_freq = a.value("update_freq", c.agent.update_freq);
        c.agent.target_sync = a.value("target_sync", c.agent.target_sync);
        c.agent.replay_capacity = a.value("replay_capacity", c.agent.replay_capacity);
        c.agent.seed_frames = a.value("seed_frames", c.agent.seed_frames);
        c.agent.eps_decay_steps = a.value("eps_decay_steps", c.agent.eps_decay_steps);
        c.agent.hidden = a.value("hidden", c.agent.hidden);
        c.agent.max_shift = a.value("max_shift", c.agent.max_shift);
        c.agent.eval_episodes = a.value("eval_episodes", c.agent.eval_episodes);
    }
    c.rl_budget = j.value("rl_budget", c.rl_budget);
    c.denoiser.K = c.tokenizer.codebook_size;
    c.denoiser.n_tokens = c.tokenizer.n_tokens();
    c.denoiser.context = c.reward_cfg.context;
    return c;
}

void ExperimentConfig::to_json_file(const std::string& path) const {
    json j{{"preset", preset},
           {"out_dir", out_dir},
           {"grid", grid},
           {"render_size", render_size},
           {"n_per_task", n_per_task},
           {"seeds", seeds},
           {"tokenizer", tokenizer_to_json(tokenizer)},
           {"denoiser", denoiser_to_json(denoiser)},
           {"diffusion_train",
            {{"epochs", diffusion_train.epochs},
             {"batch", diffusion_train.batch},
             {"lr", diffusion_train.lr},
             {"aux_weight", diffusion_train.aux_weight},
             {"seed", diffusion_train.seed}}},
           {"reward",
            {{"alpha", reward_cfg.alpha},
             {"beta", reward_cfg.beta},
             {"M", reward_cfg.M},
             {"denoise_steps", reward_cfg.denoise_steps},
             {"noise_scale", reward_cfg.noise_scale},
             {"context", reward_cfg.context}}},
           {"rnd_width", rnd_width},
           {"agent",
            {{"gamma", agent.gamma},
             {"n_step", agent.n_step},
             {"batch", agent.batch},
             {"lr", agent.lr},
             {"update_freq", agent.update_freq},
             {"target_sync", agent.target_sync},
             {"replay_capacity", agent.replay_capacity},
             {"seed_frames", agent.seed_frames},
             {"eps_decay_steps", agent.eps_decay_steps},
             {"hidden", agent.hidden},
             {"max_shift", agent.max_shift},
             {"eval_episodes", agent.eval_episodes}}},
           {"rl_budget", rl_budget}};
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("cannot write config " + path);
}

void write_run_manifest(const std::string& dir, const std::string& command,
                        const ExperimentConfig& cfg,
                        const std::vector<std::pair<std::string, std::string>>& input_hashes) {
    fs::create_directories(dir);
    std::string cfg_path = dir + "/config.json";
    cfg.to_json_file(cfg_path);
    json hashes = json::object();
    for (const auto& [k, v] : input_hashes) hashes[k] = v;
    json manifest{{"command", command},
                  {"config", "config.json"},
                  {"seeds", cfg.seeds},
                  {"input_hashes", hashes}};
    std::ofstream out(dir + "/run_manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write run manifest in " + dir);
}

DiversityReport analyze_diversity(
    const reward::RewardModelBundle& bundle,
    const std::vector<std::pair<double, std::vector<std::vector<Frame>>>>& groups,
    int m_samples, Rng& rng, int window_stride) {
    if (m_samples < 2) throw InvalidInputError("pairwise diversity needs m_samples >= 2");
    if (window_stride < 1) throw InvalidInputError("window_stride must be >= 1");
    DiversityReport report;
    report.m_samples = m_samples;
    for (const auto& [eps, videos] : groups) {
        DiversityGroup grp;
        grp.eps = eps;
        double ssim_sum = 0.0, psnr_sum = 0.0;
        for (const auto& video : videos) {
            if (video.size() < 2) continue;  // nothing to condition on
            for (size_t k = 1; k < video.size(); k += window_stride) {
                std::vector<Frame> history(video.begin(), video.begin() + k);
                auto cond = reward::encode_history(history, bundle);
                std::vector<Frame> gen;
                for (int m = 0; m < m_samples; ++m) {
                    auto traj = bundle.model.sample(cond, bundle.cfg.denoise_steps,
                                                    bundle.cfg.noise_scale, rng);
                    gen.push_back(bundle.tokenizer.decode(traj.grids.back()));
                }
                double s = 0.0, p = 0.0;
                int pairs = 0;
                for (int i = 0; i < m_samples; ++i)
                    for (int j = i + 1; j < m_samples; ++j) {
                        s += ssim(gen[i], gen[j]);
                        p += psnr(gen[i], gen[j]);
                        ++pairs;
                    }
                ssim_sum += s / pairs;
                psnr_sum += p / pairs;
                ++grp.windows;
            }
        }
        if (grp.windows > 0) {
            grp.mean_pairwise_ssim = ssim_sum / grp.windows;
            grp.mean_pairwise_psnr = psnr_sum / grp.windows;
        }
        report.groups.push_back(grp);
    }
    return report;
}

void write_diversity_csv(const std::string& path, const DiversityReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "eps,mean_pairwise_ssim,mean_pairwise_psnr,windows,m_samples\n";
    out.precision(10);
    for (const auto& g : report.groups)
        out << g.eps << "," << g.mean_pairwise_ssim << "," << g.mean_pairwise_psnr << ","
            << g.windows << "," << report.m_samples << "\n";
    if (!out) throw IoError("failed writing " + path);
}

RewardCurveReport reward_curve_report(
    const reward::RewardModelBundle& bundle,
    const std::vector<std::pair<std::string, std::vector<std::vector<Frame>>>>& labeled_groups,
    Rng& rng) {
    if (!bundle.stats.fitted) throw InsufficientDataError("reward stats not fitted");
    RewardCurveReport report;
    for (const auto& [label, videos] : labeled_groups) {
        if (videos.empty()) {
            std::cerr << "warning: group '" << label << "' is empty; skipped\n";
            continue;
        }
        RewardGroupSummary summary;
        summary.label = label;
        double total = 0.0;
        for (size_t v = 0; v < videos.size(); ++v) {
            std::vector<Frame> hist;
            for (size_t k = 0; k < videos[v].size(); ++k) {
                hist.push_back(videos[v][k]);
                reward::RewardCurveRow row;
                row.video_id = label + "/" + std::to_string(v);
                row.step = static_cast<int>(k);
                row.r_ce = reward::entropy_reward(hist, bundle, rng);
                row.r_ce_std = reward::standardize(row.r_ce, bundle.stats);
                row.r_rnd = reward::rnd_reward(videos[v][k], bundle.rnd);
                row.sparse = 0;
                row.r_diff = (1.0 - bundle.cfg.alpha) * row.r_ce_std +
                             bundle.cfg.alpha * row.r_rnd;
                total += row.r_ce_std;
                ++summary.steps;
                report.rows.push_back(std::move(row));
            }
        }
        summary.mean_r_ce_std = total / summary.steps;
        report.groups.push_back(summary);
    }
    return report;
}

std::vector<double> score_videos(const reward::RewardModelBundle& bundle,
                                 const std::vector<std::vector<Frame>>& videos, Rng& rng) {
    std::vector<double> out;
    for (const auto& video : videos) {
        std::vector<Frame> hist;
        for (const auto& f : video) {
            hist.push_back(f);
            out.push_back(reward::standardize(reward::entropy_reward(hist, bundle, rng),
                                              bundle.stats));
        }
    }
    return out;
}

namespace {

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// One-sided permutation p for mean(a) - mean(b) > 0.
double permutation_p(const std::vector<double>& a, const std::vector<double>& b, Rng& rng,
                     int n_perm) {
    double observed = mean_of(a) - mean_of(b);
    std::vector<double> pool(a);
    pool.insert(pool.end(), b.begin(), b.end());
    int hits = 0;
    for (int p = 0; p < n_perm; ++p) {
        std::shuffle(pool.begin(), pool.end(), rng.engine());
        double ma = std::accumulate(pool.begin(), pool.begin() + a.size(), 0.0) / a.size();
        double mb = std::accumulate(pool.begin() + a.size(), pool.end(), 0.0) / b.size();
        if (ma - mb >= observed) ++hits;
    }
    return (1.0 + hits) / (1.0 + n_perm);
}

}  // namespace

GapReport gap_report(const std::vector<double>& expert_rewards,
                     const std::vector<double>& random_rewards, Rng& rng, int n_permutations) {
    if (expert_rewards.empty() || random_rewards.empty())
        throw EmptyInputError("gap report needs both groups nonempty");
    GapReport r;
    r.n_expert = static_cast<int>(expert_rewards.size());
    r.n_random = static_cast<int>(random_rewards.size());
    r.expert_mean = mean_of(expert_rewards);
    r.random_mean = mean_of(random_rewards);
    r.gap = r.expert_mean - r.random_mean;
    r.p_value = permutation_p(expert_rewards, random_rewards, rng, n_permutations);

    // Negative control: reassign labels at random, re-run the same test.
    std::vector<double> pool(expert_rewards);
    pool.insert(pool.end(), random_rewards.begin(), random_rewards.end());
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    std::vector<double> se(pool.begin(), pool.begin() + expert_rewards.size());
    std::vector<double> sr(pool.begin() + expert_rewards.size(), pool.end());
    r.shuffled_gap = mean_of(se) - mean_of(sr);
    r.shuffled_p = permutation_p(se, sr, rng, n_permutations);
    return r;
}

namespace {

const std::array<std::array<uint8_t, 3>, 6> kPalette{{{214, 69, 65},
                                                      {31, 119, 180},
                                                      {44, 160, 44},
                                                      {148, 103, 189},
                                                      {255, 127, 14},
                                                      {23, 190, 207}}};

void draw_line(Frame& img, int x0, int y0, int x1, int y1, std::array<uint8_t, 3> c) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        if (x0 >= 0 && x0 < img.w && y0 >= 0 && y0 < img.h)
            for (int ch = 0; ch < 3; ++ch) img.at(y0, x0, ch) = c[ch];
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace

void plot_lines(const std::string& path, const std::vector<Series>& series, int width,
                int height) {
    if (series.empty()) throw EmptyInputError("nothing to plot");
    Frame img(height, width, 255);
    const int margin = 40;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw InvalidInputError("series x/y size mismatch");
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (xmax <= xmin) xmax = xmin + 1.0;
    if (ymax <= ymin) ymax = ymin + 1.0;
    auto px = [&](double x) {
        return margin + static_cast<int>((x - xmin) / (xmax - xmin) * (width - 2 * margin));
    };
    auto py = [&](double y) {
        return height - margin -
               static_cast<int>((y - ymin) / (ymax - ymin) * (height - 2 * margin));
    };
    std::array<uint8_t, 3> axis{70, 70, 70};
    draw_line(img, margin, height - margin, width - margin, height - margin, axis);
    draw_line(img, margin, margin, margin, height - margin, axis);
    // light horizontal gridlines at quartiles
    for (int q = 1; q <= 3; ++q) {
        int y = py(ymin + (ymax - ymin) * q / 4.0);
        draw_line(img, margin, y, width - margin, y, {225, 225, 225});
    }
    for (size_t si = 0; si < series.size(); ++si) {
        auto c = kPalette[si % kPalette.size()];
        const auto& s = series[si];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), c);
        // legend swatch, one block per series, top-left
        img.fill_rect(margin / 2 + static_cast<int>(si) * 14, width - margin + 8, 10, 10, c);
    }
    save_png(img, path);
}

}  // namespace dr::harness
