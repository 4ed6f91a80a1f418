#include "dr/rl.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dr::nn;

namespace dr::rl {

void ReplayBuffer::push(Transition t) {
    if (!std::isfinite(t.reward) || !std::isfinite(t.n_reward))
        throw InvalidInputError("non-finite reward in transition");
    if (data_.size() < capacity_) {
        data_.push_back(std::move(t));
    } else {
        data_[next_] = std::move(t);
        next_ = (next_ + 1) % capacity_;
    }
}

std::vector<const Transition*> ReplayBuffer::sample(int batch, Rng& rng) const {
    if (static_cast<size_t>(batch) > data_.size())
        throw InsufficientDataError("replay buffer smaller than batch");
    std::vector<const Transition*> out(batch);
    for (int i = 0; i < batch; ++i)
        out[i] = &data_[rng.uniform_int(static_cast<int>(data_.size()))];
    return out;
}

void AgentConfig::validate() const {
    if (gamma <= 0.0 || gamma >= 1.0) throw ConfigError("gamma must be in (0,1)");
    if (n_step < 1) throw ConfigError("n_step must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (seed_frames < batch) throw ConfigError("warmup must cover at least one batch");
}

AgentConfig AgentConfig::desk() { return AgentConfig{}; }

AgentConfig AgentConfig::paper() {
    AgentConfig c;
    c.replay_capacity = 1000000;
    c.seed_frames = 4000;
    c.eps_decay_steps = 40000;
    return c;
}

Frame augment(const Frame& obs, int max_shift, Rng& rng) {
    int dy = rng.uniform_int(2 * max_shift + 1) - max_shift;
    int dx = rng.uniform_int(2 * max_shift + 1) - max_shift;
    Frame out(obs.h, obs.w);
    for (int y = 0; y < obs.h; ++y) {
        int sy = std::clamp(y + dy, 0, obs.h - 1);
        for (int x = 0; x < obs.w; ++x) {
            int sx = std::clamp(x + dx, 0, obs.w - 1);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = obs.at(sy, sx, c);
        }
    }
    return out;
}

QNetwork::QNetwork(int in_dim, int hidden, int n_actions, uint64_t seed)
    : in_dim_(in_dim), hidden_(hidden), n_actions_(n_actions) {
    Rng rng(seed);
    auto addp = [&](const std::string& name, int r, int c, bool zero) {
        params_.push_back(std::make_unique<Param>(name, r, c));
        if (zero)
            params_.back()->value.setZero();
        else
            params_.back()->init_uniform(rng, 1.0 / std::sqrt(static_cast<double>(r)));
    };
    addp("w1", in_dim, hidden, false);
    addp("b1", 1, hidden, true);
    addp("w2", hidden, hidden, false);
    addp("b2", 1, hidden, true);
    addp("w3", hidden, n_actions, false);
    addp("b3", 1, n_actions, true);
    initialized_ = true;
}

namespace {
Eigen::RowVectorXd flatten_frame(const Frame& f) {
    Eigen::RowVectorXd x(f.px.size());
    for (size_t i = 0; i < f.px.size(); ++i) x(static_cast<long>(i)) = f.px[i] / 255.0 - 0.5;
    return x;
}
}  // namespace

Node* QNetwork::forward(Graph& g, const Mat& obs_rows) const {
    if (!initialized_) throw UninitializedModelError("policy network not constructed");
    Node* h = relu(g, add_rowvec(g, matmul(g, g.leaf(obs_rows), g.param(*params_[0])),
                                 g.param(*params_[1])));
    h = relu(g, add_rowvec(g, matmul(g, h, g.param(*params_[2])), g.param(*params_[3])));
    return add_rowvec(g, matmul(g, h, g.param(*params_[4])), g.param(*params_[5]));
}

Eigen::VectorXd QNetwork::q_values(const Frame& obs) const {
    if (!initialized_) throw UninitializedModelError("policy network not constructed");
    Graph g;
    Mat row(1, in_dim_);
    row.row(0) = flatten_frame(obs);
    return forward(g, row)->val.row(0).transpose();
}

int QNetwork::greedy_action(const Frame& obs) const {
    Eigen::VectorXd q = q_values(obs);
    int a = 0;
    q.maxCoeff(&a);
    return a;
}

std::vector<Param*> QNetwork::params() const {
    std::vector<Param*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

void QNetwork::copy_from(const QNetwork& other) {
    if (params_.size() != other.params_.size())
        throw InvalidInputError("network shape mismatch in copy_from");
    for (size_t i = 0; i < params_.size(); ++i)
        if (params_[i]->value.rows() != other.params_[i]->value.rows() ||
            params_[i]->value.cols() != other.params_[i]->value.cols())
            throw InvalidInputError("network shape mismatch in copy_from");
    for (size_t i = 0; i < params_.size(); ++i) params_[i]->value = other.params_[i]->value;
}

void QNetwork::save(const std::string& dir) const {
    if (!initialized_) throw UninitializedModelError("nothing to save");
    fs::create_directories(dir);
    save_params(params(), dir + "/weights.bin");
    json manifest{{"version", 1},
                  {"kind", "q_network"},
                  {"in_dim", in_dim_},
                  {"hidden", hidden_},
                  {"n_actions", n_actions_},
                  {"weights_hash", params_hash(params())}};
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write policy manifest in " + dir);
}

QNetwork QNetwork::load(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("missing policy manifest in " + dir);
    json manifest = json::parse(in);
    QNetwork q(manifest.at("in_dim"), manifest.at("hidden"), manifest.at("n_actions"), 0);
    load_params(q.params(), dir + "/weights.bin");
    return q;
}

void flush_nstep(std::vector<Transition>& pending, int n_step, double gamma,
                 ReplayBuffer& buffer, bool episode_over) {
    while (!pending.empty() &&
           (episode_over || static_cast<int>(pending.size()) > n_step)) {
        Transition t = pending.front();
        pending.erase(pending.begin());
        double acc = t.reward;
        double disc = gamma;
        int len = 1;
        Frame look = t.next_obs;
        bool ended = t.done;
        for (size_t j = 0; j < pending.size() && len < n_step && !ended; ++j) {
            acc += disc * pending[j].reward;
            disc *= gamma;
            look = pending[j].next_obs;
            ended = pending[j].done;
            ++len;
        }
        t.n_reward = acc;
        t.n_obs = std::move(look);
        t.n_len = len;
        t.n_done = ended;
        buffer.push(std::move(t));
    }
}

TrainResult train_agent(envs::PushBlockEnv& env, const RewardFn& reward_fn,
                        const AgentConfig& cfg, long budget_steps, uint64_t seed,
                        const BatchHook& batch_hook) {
    cfg.validate();
    if (budget_steps <= cfg.seed_frames)
        throw InvalidInputError("budget must exceed the warmup frames");
    if (!reward_fn) throw InvalidInputError("reward function required");

    Rng rng(seed);
    Frame obs = env.reset(rng.next_u64());
    int in_dim = static_cast<int>(obs.px.size());
    QNetwork online(in_dim, cfg.hidden, envs::kNumActions, rng.next_u64());
    QNetwork target(in_dim, cfg.hidden, envs::kNumActions, rng.next_u64());
    target.copy_from(online);
    Adam opt(cfg.lr);
    ReplayBuffer buffer(cfg.replay_capacity);

    TrainResult result;
    long eval_every = std::max<long>(1, static_cast<long>(budget_steps * cfg.eval_every_frac));
    long learner_steps = 0;
    double episode_return = 0.0;
    double last_return = 0.0;
    std::vector<Frame> history{obs};
    std::vector<Transition> pending;
    auto t0 = std::chrono::steady_clock::now();

    for (long step = 1; step <= budget_steps; ++step) {
        double eps;
        if (step <= cfg.seed_frames) {
            eps = 1.0;
        } else {
            double frac = std::min(1.0, static_cast<double>(step - cfg.seed_frames) /
                                            cfg.eps_decay_steps);
            eps = cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start);
        }
        int action = rng.uniform() < eps ? rng.uniform_int(envs::kNumActions)
                                         : online.greedy_action(obs);
        auto res = env.step(static_cast<envs::Action>(action));
        history.push_back(res.obs);
        double r = reward_fn(history, res.obs, res.sparse);
        episode_return += r;

        Transition t;
        t.obs = obs;
        t.action = action;
        t.reward = r;
        t.next_obs = res.obs;
        // Time-limit-aware: only success is a true terminal. A k_max timeout
        // is an artifact of the episode cap, and the step counter is not in
        // the observation, so its value target must bootstrap as usual.
        t.done = res.done && env.state().succeeded;
        pending.push_back(std::move(t));
        flush_nstep(pending, cfg.n_step, cfg.gamma, buffer, res.done);

        if (res.done) {
            last_return = episode_return;
            episode_return = 0.0;
            obs = env.reset(rng.next_u64());
            history.assign(1, obs);
        } else {
            obs = res.obs;
        }

        bool can_learn = step > cfg.seed_frames &&
                         buffer.size() >= static_cast<size_t>(cfg.batch);
        if (can_learn && step % cfg.update_freq == 0) {
            auto batch = buffer.sample(cfg.batch, rng);
            Mat obs_rows(cfg.batch, in_dim), next_rows(cfg.batch, in_dim);
            std::vector<Frame> batch_frames;
            for (int i = 0; i < cfg.batch; ++i) {
                obs_rows.row(i) = flatten_frame(augment(batch[i]->obs, cfg.max_shift, rng));
                next_rows.row(i) = flatten_frame(augment(batch[i]->n_obs, cfg.max_shift, rng));
                batch_frames.push_back(batch[i]->obs);
            }
            // Double-Q target: online argmax, target evaluation.
            Mat q_next_online, q_next_target;
            {
                Graph g;
                q_next_online = online.forward(g, next_rows)->val;
            }
            {
                Graph g;
                q_next_target = target.forward(g, next_rows)->val;
            }
            Mat y(cfg.batch, 1);
            for (int i = 0; i < cfg.batch; ++i) {
                int astar = 0;
                q_next_online.row(i).maxCoeff(&astar);
                double boot = batch[i]->n_done
                                  ? 0.0
                                  : std::pow(cfg.gamma, batch[i]->n_len) *
                                        q_next_target(i, astar);
                y(i, 0) = batch[i]->n_reward + boot;
            }
            Graph g;
            for (Param* p : online.params()) p->zero_grad();
            Node* q_all = online.forward(g, obs_rows);
            std::vector<int> actions(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i) actions[i] = batch[i]->action;
            Node* q_taken = gather_cols_per_row(g, q_all, actions);
            Node* loss = mse_const(g, q_taken, y);
            g.backward(loss);
            opt.step(online.params());
            ++learner_steps;
            if (learner_steps % cfg.target_sync == 0) target.copy_from(online);
            if (batch_hook) batch_hook(batch_frames);
        }

        if (step % eval_every == 0 || step == budget_steps) {
            CurvePoint pt;
            pt.step = step;
            pt.episodic_return = last_return;
            pt.success_rate = evaluate(online, env.task(), cfg.eval_episodes, seed * 977 + step);
            pt.wallclock = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
            result.curve.push_back(pt);
        }
    }

    result.policy = std::move(online);
    result.env_steps = budget_steps;
    return result;
}

double evaluate(const QNetwork& policy, const envs::TaskSpec& task, int episodes,
                uint64_t seed) {
    envs::PushBlockEnv env(task);
    int successes = 0;
    for (int e = 0; e < episodes; ++e) {
        Frame obs = env.reset(seed + static_cast<uint64_t>(e) * 7919 + 13);
        while (true) {
            auto res = env.step(static_cast<envs::Action>(policy.greedy_action(obs)));
            if (res.done) {
                successes += env.state().succeeded ? 1 : 0;
                break;
            }
            obs = res.obs;
        }
    }
    return static_cast<double>(successes) / episodes;
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "step,return,success_rate,wallclock\n";
    out.precision(12);
    for (const auto& p : curve)
        out << p.step << "," << p.episodic_return << "," << p.success_rate << ","
            << p.wallclock << "\n";
    if (!out) throw IoError("failed writing " + path);
}

std::vector<CurvePoint> read_curve_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    std::getline(in, line);
    std::vector<CurvePoint> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        CurvePoint p;
        std::getline(ss, tok, ',');
        p.step = std::stol(tok);
        std::getline(ss, tok, ',');
        p.episodic_return = std::stod(tok);
        std::getline(ss, tok, ',');
        p.success_rate = std::stod(tok);
        std::getline(ss, tok, ',');
        p.wallclock = std::stod(tok);
        out.push_back(p);
    }
    return out;
}

}  // namespace dr::rl
