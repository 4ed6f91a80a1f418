// Command-line driver for the full pipeline: dataset generation, tokenizer
// and diffusion pretraining, reward fitting, analyses, and RL runs.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dr/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dr;

namespace {

harness::ExperimentConfig load_config(const std::string& config_path,
                                      const std::string& preset, const std::string& out) {
    harness::ExperimentConfig cfg = config_path.empty()
                                        ? harness::ExperimentConfig::named_preset(preset)
                                        : harness::ExperimentConfig::from_json_file(config_path);
    if (!out.empty()) cfg.out_dir = out;
    return cfg;
}

std::vector<std::vector<Frame>> load_video_dir(const std::string& root) {
    std::vector<std::vector<Frame>> out;
    for (const auto& dir : envs::list_videos(root)) out.push_back(envs::load_video(dir).first);
    if (out.empty()) throw EmptyInputError("no videos under " + root);
    return out;
}

std::vector<envs::TaskSpec> all_seen(const harness::ExperimentConfig& cfg) {
    return envs::seen_tasks(cfg.grid, cfg.render_size);
}

reward::RewardModelBundle load_bundle(const harness::ExperimentConfig& cfg) {
    return reward::RewardModelBundle::load(cfg.out_dir + "/bundle");
}

void cmd_gen_data(const harness::ExperimentConfig& cfg, uint64_t seed,
                  const std::vector<double>& eps_groups) {
    auto seen = all_seen(cfg);
    auto unseen = envs::unseen_tasks(cfg.grid, cfg.render_size);
    envs::generate_dataset(seen, cfg.n_per_task, seed, cfg.out_dir + "/data/seen");
    envs::generate_dataset(unseen, cfg.n_per_task, seed + 1, cfg.out_dir + "/data/unseen");
    envs::write_task_registry(cfg.out_dir + "/data/tasks.json", seen, unseen);
    for (double eps : eps_groups) {
        std::string dir =
            cfg.out_dir + "/data/eps_" + std::to_string(eps).substr(0, 4);
        int idx = 0;
        for (const auto& task : seen) {
            for (int i = 0; i < cfg.n_per_task; ++i) {
                auto roll = envs::epsilon_noisy_rollout(task, eps,
                                                        seed + 1000 * (idx + 1) + i);
                envs::VideoMeta meta{task.id, 10.0, roll.success};
                envs::save_video(dir + "/" + task.id + "_" + std::to_string(i), roll.frames,
                                 meta);
            }
            ++idx;
        }
    }
    harness::write_run_manifest(cfg.out_dir + "/data", "gen-data", cfg, {});
    std::cout << "dataset written under " << cfg.out_dir << "/data\n";
}

void cmd_train_tokenizer(const harness::ExperimentConfig& cfg) {
    std::vector<Frame> frames;
    for (const auto& video : load_video_dir(cfg.out_dir + "/data/seen"))
        frames.insert(frames.end(), video.begin(), video.end());
    vqtok::Tokenizer tok(cfg.tokenizer);
    auto report = tok.train(frames);
    tok.save(cfg.out_dir + "/tokenizer");
    harness::write_run_manifest(cfg.out_dir + "/tokenizer", "train-tokenizer", cfg,
                                {{"weights", tok.weights_hash()}});
    std::cout << "tokenizer loss " << report.first_epoch_mean << " -> "
              << report.last_epoch_mean << "\n";
}

void cmd_train_diffusion(const harness::ExperimentConfig& cfg) {
    auto tok = vqtok::Tokenizer::load(cfg.out_dir + "/tokenizer");
    std::vector<std::vector<vqtok::TokenGrid>> token_videos;
    for (const auto& video : load_video_dir(cfg.out_dir + "/data/seen")) {
        std::vector<vqtok::TokenGrid> grids;
        for (const auto& f : video) grids.push_back(tok.encode(f));
        token_videos.push_back(std::move(grids));
    }
    auto sched = diffusion::NoiseSchedule::linear(cfg.denoiser.T, cfg.denoiser.K);
    diffusion::DiffusionModel model(cfg.denoiser, sched);
    auto report = model.train(token_videos, cfg.diffusion_train);
    model.save(cfg.out_dir + "/diffusion", tok.weights_hash());
    harness::write_run_manifest(cfg.out_dir + "/diffusion", "train-diffusion", cfg,
                                {{"tokenizer", tok.weights_hash()},
                                 {"weights", model.weights_hash()}});
    std::cout << "diffusion loss " << report.epoch_loss.front() << " -> "
              << report.epoch_loss.back() << " (" << report.windows_used << " windows)\n";
}

void cmd_fit_reward(const harness::ExperimentConfig& cfg, uint64_t seed) {
    reward::RewardModelBundle bundle;
    bundle.tokenizer = vqtok::Tokenizer::load(cfg.out_dir + "/tokenizer");
    std::string tok_hash;
    bundle.model = diffusion::DiffusionModel::load(cfg.out_dir + "/diffusion", &tok_hash);
    if (tok_hash != bundle.tokenizer.weights_hash())
        throw ConfigError("stale checkpoint: diffusion model was trained on a different "
                          "tokenizer");
    bundle.cfg = cfg.reward_cfg;
    reward::RndConfig rc;
    rc.in_dim = cfg.render_size * cfg.render_size * 3;
    rc.width = cfg.rnd_width;
    rc.seed = seed;
    bundle.rnd = reward::RndState(rc);
    Rng rng(seed);
    auto stats = reward::fit_stats(load_video_dir(cfg.out_dir + "/data/seen"), bundle, rng);
    bundle.save(cfg.out_dir + "/bundle");
    harness::write_run_manifest(cfg.out_dir + "/bundle", "fit-reward", cfg,
                                {{"tokenizer", bundle.tokenizer.weights_hash()},
                                 {"diffusion", bundle.model.weights_hash()}});
    std::cout << "fitted stats over " << stats.n << " samples: mean " << stats.mean
              << " std " << stats.std << "\n";
}

void cmd_eval_reward(const harness::ExperimentConfig& cfg, const std::string& videos_dir,
                     const std::string& out_csv, uint64_t seed) {
    auto bundle = load_bundle(cfg);
    Rng rng(seed);
    std::vector<std::pair<std::string, std::vector<std::vector<Frame>>>> groups{
        {fs::path(videos_dir).filename().string(), load_video_dir(videos_dir)}};
    auto report = harness::reward_curve_report(bundle, groups, rng);
    reward::write_reward_curve_csv(out_csv, report.rows);
    for (const auto& g : report.groups)
        std::cout << g.label << " mean standardized reward " << g.mean_r_ce_std << " over "
                  << g.steps << " steps\n";
}

void cmd_analyze_diversity(const harness::ExperimentConfig& cfg,
                           const std::vector<std::string>& group_dirs, int m_samples,
                           const std::string& out_csv, uint64_t seed) {
    auto bundle = load_bundle(cfg);
    std::vector<std::pair<double, std::vector<std::vector<Frame>>>> groups;
    for (const auto& dir : group_dirs) {
        std::string name = fs::path(dir).filename().string();
        auto pos = name.rfind('_');
        double eps = pos == std::string::npos ? 0.0 : std::stod(name.substr(pos + 1));
        groups.emplace_back(eps, load_video_dir(dir));
    }
    Rng rng(seed);
    auto report = harness::analyze_diversity(bundle, groups, m_samples, rng);
    harness::write_diversity_csv(out_csv, report);
    for (const auto& g : report.groups)
        std::cout << "eps " << g.eps << ": ssim " << g.mean_pairwise_ssim << " psnr "
                  << g.mean_pairwise_psnr << " (" << g.windows << " windows)\n";
}

rl::RewardFn make_reward_fn(const std::string& kind, reward::RewardModelBundle* bundle,
                            std::shared_ptr<Rng> rng) {
    if (kind == "sparse")
        return [beta = bundle ? bundle->cfg.beta : 1.0](const std::vector<Frame>&,
                                                        const Frame&, int sparse) {
            return beta * sparse;
        };
    if (!bundle) throw ConfigError("reward kind '" + kind + "' needs a fitted bundle");
    if (kind == "diffusion")
        return [bundle, rng](const std::vector<Frame>& hist, const Frame& obs, int sparse) {
            return reward::diffusion_reward(hist, obs, sparse, *bundle, *rng);
        };
    if (kind == "rnd")
        return [bundle](const std::vector<Frame>&, const Frame& obs, int sparse) {
            return reward::rnd_reward(obs, bundle->rnd) + bundle->cfg.beta * sparse;
        };
    if (kind == "loglik")
        return [bundle](const std::vector<Frame>& hist, const Frame& obs, int sparse) {
            if (hist.size() < 2) return bundle->cfg.beta * static_cast<double>(sparse);
            std::vector<Frame> past(hist.begin(), hist.end() - 1);
            double ll = reward::loglik_reward(past, obs, *bundle);
            double ll_std = reward::standardize(ll, bundle->stats);
            double r_rnd = reward::rnd_reward(obs, bundle->rnd);
            return (1.0 - bundle->cfg.alpha) * ll_std + bundle->cfg.alpha * r_rnd +
                   bundle->cfg.beta * sparse;
        };
    throw ConfigError("unknown reward kind: " + kind);
}

void cmd_train_rl(const harness::ExperimentConfig& cfg, const std::string& reward_kind,
                  const std::string& task_id, uint64_t seed, long budget) {
    auto task = envs::find_task(task_id, cfg.grid, cfg.render_size);
    if (!task) throw ConfigError("unknown task: " + task_id);
    std::optional<reward::RewardModelBundle> bundle;
    if (reward_kind != "sparse") bundle.emplace(load_bundle(cfg));
    auto rng = std::make_shared<Rng>(seed + 999);
    auto fn = make_reward_fn(reward_kind, bundle ? &*bundle : nullptr, rng);
    rl::BatchHook hook = nullptr;
    if (bundle && (reward_kind == "diffusion" || reward_kind == "rnd" ||
                   reward_kind == "loglik"))
        hook = [&](const std::vector<Frame>& batch) { bundle->rnd.update(batch); };
    envs::PushBlockEnv env(*task);
    long b = budget > 0 ? budget : cfg.rl_budget;
    auto result = rl::train_agent(env, fn, cfg.agent, b, seed, hook);
    std::string run_dir = cfg.out_dir + "/rl/" + reward_kind + "_" + task_id + "_s" +
                          std::to_string(seed);
    fs::create_directories(run_dir);
    rl::write_curve_csv(run_dir + "/curve.csv", result.curve);
    result.policy.save(run_dir + "/policy");
    harness::write_run_manifest(run_dir, "train-rl " + reward_kind, cfg, {});
    std::cout << "final eval success " << result.curve.back().success_rate << " ("
              << run_dir << ")\n";
}

void cmd_evaluate(const harness::ExperimentConfig& cfg, const std::string& policy_dir,
                  const std::string& task_id, int episodes, uint64_t seed) {
    auto task = envs::find_task(task_id, cfg.grid, cfg.render_size);
    if (!task) throw ConfigError("unknown task: " + task_id);
    auto policy = rl::QNetwork::load(policy_dir);
    std::cout << "success rate "
              << rl::evaluate(policy, *task, episodes, seed) << "\n";
}

void cmd_sweep(const harness::ExperimentConfig& cfg, const std::string& param,
               const std::vector<double>& values, const std::string& out_csv,
               uint64_t seed) {
    auto bundle = load_bundle(cfg);
    auto expert = load_video_dir(cfg.out_dir + "/data/seen");
    // random comparison rollouts, regenerated deterministically
    std::vector<std::vector<Frame>> random;
    for (const auto& task : all_seen(cfg))
        for (int i = 0; i < 4; ++i)
            random.push_back(envs::epsilon_noisy_rollout(task, 1.0, seed + i).frames);

    std::ofstream out(out_csv);
    if (!out) throw IoError("cannot write " + out_csv);
    out << "param,value,expert_mean,random_mean,gap_pooled_std\n";
    for (double v : values) {
        reward::RewardConfig rc = cfg.reward_cfg;
        if (param == "denoise_steps")
            rc.denoise_steps = static_cast<int>(v);
        else if (param == "noise_scale")
            rc.noise_scale = v;
        else if (param == "M")
            rc.M = static_cast<int>(v);
        else if (param == "alpha")
            rc.alpha = v;
        else
            throw ConfigError("unsupported sweep param: " + param);
        bundle.cfg = rc;
        Rng rng(seed);
        auto score = [&](const std::vector<std::vector<Frame>>& vids) {
            std::vector<double> rs;
            for (const auto& vid : vids) {
                std::vector<Frame> hist;
                for (const auto& f : vid) {
                    hist.push_back(f);
                    rs.push_back(reward::entropy_reward(hist, bundle, rng));
                }
            }
            return rs;
        };
        auto re = score(expert), rr = score(random);
        double me = 0, mr = 0;
        for (double r : re) me += r;
        me /= re.size();
        for (double r : rr) mr += r;
        mr /= rr.size();
        double var = 0;
        for (double r : re) var += (r - me) * (r - me);
        for (double r : rr) var += (r - mr) * (r - mr);
        double pooled = std::sqrt(var / (re.size() + rr.size() - 2));
        out << param << "," << v << "," << me << "," << mr << ","
            << (me - mr) / std::max(pooled, 1e-9) << "\n";
        std::cout << param << "=" << v << " gap " << (me - mr) / std::max(pooled, 1e-9)
                  << " pooled-std units\n";
    }
}

void cmd_plot(const std::string& csv_path, const std::string& out_png) {
    std::ifstream in(csv_path);
    if (!in) throw IoError("cannot read " + csv_path);
    std::string header;
    std::getline(in, header);
    std::vector<std::string> cols;
    {
        std::stringstream ss(header);
        std::string tok;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
    }
    std::vector<std::vector<double>> data(cols.size());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        for (size_t c = 0; c < cols.size() && std::getline(ss, tok, ','); ++c) {
            try {
                data[c].push_back(std::stod(tok));
            } catch (...) {
                data[c].push_back(static_cast<double>(data[c].size()));  // non-numeric
            }
        }
    }
    if (data[0].empty()) throw EmptyInputError("no rows in " + csv_path);
    std::vector<harness::Series> series;
    for (size_t c = 1; c < cols.size(); ++c)
        series.push_back({cols[c], data[0], data[c]});
    harness::plot_lines(out_png, series);
    std::cout << "wrote " << out_png << "\n";
}

void cmd_fps(const harness::ExperimentConfig& cfg, int calls, uint64_t seed) {
    auto bundle = load_bundle(cfg);
    auto videos = load_video_dir(cfg.out_dir + "/data/seen");
    std::vector<Frame> history(videos[0].begin(),
                               videos[0].begin() + std::min<size_t>(videos[0].size(), 3));
    std::cout << "hardware note: single-CPU build, wall-clock timing\n";
    for (int m = 1; m <= 4; ++m) {
        bundle.cfg.M = m;
        Rng rng(seed);
        std::cout << "M=" << m << ": "
                  << reward::measure_fps(bundle, calls, history, rng) << " rewards/s\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video-diffusion reward learning pipeline"};
    app.require_subcommand(1);

    std::string config_path, preset = "desk", out_override;
    app.add_option("--config", config_path, "experiment config JSON");
    app.add_option("--preset", preset, "preset when no config given (desk|fast|paper)");
    app.add_option("--out", out_override, "override output directory");

    uint64_t seed = 0;
    app.add_option("--seed", seed, "seed for the chosen subcommand");

    auto* gen = app.add_subcommand("gen-data", "generate expert + noisy datasets");
    std::vector<double> eps_groups{0.25, 0.5, 1.0};
    gen->add_option("--eps-groups", eps_groups, "extra epsilon-noisy rollout groups");

    app.add_subcommand("train-tokenizer", "train the frame tokenizer");
    app.add_subcommand("train-diffusion", "train the video diffusion model");
    app.add_subcommand("fit-reward", "fit reward stats and save the bundle");

    auto* evr = app.add_subcommand("eval-reward", "score a video directory");
    std::string videos_dir, out_csv = "rewards.csv";
    evr->add_option("--videos", videos_dir, "video directory")->required();
    evr->add_option("--csv", out_csv, "output CSV path");

    auto* div = app.add_subcommand("analyze-diversity", "pairwise-similarity table");
    std::vector<std::string> group_dirs;
    int m_samples = 4;
    std::string div_csv = "diversity.csv";
    div->add_option("--groups", group_dirs, "video directories, one per epsilon")->required();
    div->add_option("--samples", m_samples, "continuations per window");
    div->add_option("--csv", div_csv, "output CSV path");

    auto* trl = app.add_subcommand("train-rl", "train an agent with a chosen reward");
    std::string reward_kind = "diffusion", task_id = "push_red";
    long budget = 0;
    trl->add_option("--reward", reward_kind, "diffusion|sparse|rnd|loglik");
    trl->add_option("--task", task_id, "task id");
    trl->add_option("--budget", budget, "env steps (0 = config default)");

    auto* ev = app.add_subcommand("evaluate", "evaluate a saved policy");
    std::string policy_dir;
    int episodes = 100;
    ev->add_option("--policy", policy_dir, "policy checkpoint dir")->required();
    ev->add_option("--task", task_id, "task id");
    ev->add_option("--episodes", episodes, "episodes");

    auto* sw = app.add_subcommand("sweep", "reward-quality sweep over one parameter");
    std::string sweep_param = "denoise_steps", sweep_csv = "sweep.csv";
    std::vector<double> sweep_values{2, 5, 10};
    sw->add_option("--param", sweep_param, "denoise_steps|noise_scale|M|alpha");
    sw->add_option("--values", sweep_values, "values to sweep");
    sw->add_option("--csv", sweep_csv, "output CSV path");

    auto* pl = app.add_subcommand("plot", "render a CSV as a PNG line plot");
    std::string plot_csv, plot_png = "plot.png";
    pl->add_option("--csv", plot_csv, "input CSV")->required();
    pl->add_option("--png", plot_png, "output PNG");

    auto* fp = app.add_subcommand("fps", "reward throughput for M in 1..4");
    int fps_calls = 20;
    fp->add_option("--calls", fps_calls, "reward calls per measurement");

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = load_config(config_path, preset, out_override);
        if (gen->parsed()) cmd_gen_data(cfg, seed, eps_groups);
        if (app.got_subcommand("train-tokenizer")) cmd_train_tokenizer(cfg);
        if (app.got_subcommand("train-diffusion")) cmd_train_diffusion(cfg);
        if (app.got_subcommand("fit-reward")) cmd_fit_reward(cfg, seed);
        if (evr->parsed()) cmd_eval_reward(cfg, videos_dir, out_csv, seed);
        if (div->parsed()) cmd_analyze_diversity(cfg, group_dirs, m_samples, div_csv, seed);
        if (trl->parsed()) cmd_train_rl(cfg, reward_kind, task_id, seed, budget);
        if (ev->parsed()) cmd_evaluate(cfg, policy_dir, task_id, episodes, seed);
        if (sw->parsed()) cmd_sweep(cfg, sweep_param, sweep_values, sweep_csv, seed);
        if (pl->parsed()) cmd_plot(plot_csv, plot_png);
        if (fp->parsed()) cmd_fps(cfg, fps_calls, seed);
    } catch (const std::exception& e) {
        json err{{"error", e.what()}, {"command", argc > 1 ? argv[1] : ""}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
