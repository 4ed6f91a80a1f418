#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "dr/envs.hpp"
#include "dr/image.hpp"
#include "dr/nn.hpp"
#include "dr/rng.hpp"

namespace dr::rl {

struct Transition {
    Frame obs;
    int action = 0;
    double reward = 0.0;
    Frame next_obs;
    bool done = false;
    // n-step lookahead, truncated at episode end
    double n_reward = 0.0;  // sum_{j<n_len} gamma^j r_{k+j}
    Frame n_obs;            // observation after n_len steps
    int n_len = 1;
    bool n_done = false;    // chain ended the episode (no bootstrap)
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {}

    void push(Transition t);
    size_t size() const { return data_.size(); }
    size_t capacity() const { return capacity_; }
    std::vector<const Transition*> sample(int batch, Rng& rng) const;

private:
    size_t capacity_;
    size_t next_ = 0;  // ring cursor once full
    std::vector<Transition> data_;
};

struct AgentConfig {
    double gamma = 0.99;
    int n_step = 3;
    int batch = 32;
    double lr = 1e-3;
    int update_freq = 2;
    int target_sync = 100;      // learner steps between target-network copies
    size_t replay_capacity = 100000;
    int seed_frames = 400;      // random-action warmup transitions
    double eps_start = 1.0;
    double eps_end = 0.05;
    int eps_decay_steps = 4000;
    int hidden = 128;
    int max_shift = 4;          // random-shift augmentation radius
    double eval_every_frac = 0.02;
    int eval_episodes = 20;

    void validate() const;
    static AgentConfig desk();   // paper warmup scaled down 10x
    static AgentConfig paper();  // reference preset, not run at desk scale
};

// Random translation up to +/-max_shift pixels per axis, edge-padded.
Frame augment(const Frame& obs, int max_shift, Rng& rng);

// Pops pending transitions whose n-step lookahead is complete (or whose
// episode is over), fills the n-step fields, and pushes them to the buffer.
// Chains truncate at done: no lookahead crosses an episode boundary.
void flush_nstep(std::vector<Transition>& pending, int n_step, double gamma,
                 ReplayBuffer& buffer, bool episode_over);

// Small fully connected state-action value net over flattened pixels.
class QNetwork {
public:
    QNetwork() = default;
    QNetwork(int in_dim, int hidden, int n_actions, uint64_t seed);

    bool initialized() const { return initialized_; }
    Eigen::VectorXd q_values(const Frame& obs) const;
    int greedy_action(const Frame& obs) const;
    nn::Node* forward(nn::Graph& g, const nn::Mat& obs_rows) const;

    std::vector<nn::Param*> params() const;
    void copy_from(const QNetwork& other);

    void save(const std::string& dir) const;
    static QNetwork load(const std::string& dir);

    int in_dim() const { return in_dim_; }
    int n_actions() const { return n_actions_; }
    int hidden() const { return hidden_; }

private:
    int in_dim_ = 0, hidden_ = 0, n_actions_ = 0;
    bool initialized_ = false;
    mutable std::vector<std::unique_ptr<nn::Param>> params_;
};

// Composite reward for the transition ending in `obs`; `history` holds the
// episode frames up to and including `obs`.
using RewardFn = std::function<double(const std::vector<Frame>& history, const Frame& obs,
                                      int sparse)>;
// Called with the observation batch after each learner step (novelty updates).
using BatchHook = std::function<void(const std::vector<Frame>& batch)>;

struct CurvePoint {
    long step = 0;
    double episodic_return = 0.0;
    double success_rate = 0.0;
    double wallclock = 0.0;
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    QNetwork policy;
    long env_steps = 0;
};

TrainResult train_agent(envs::PushBlockEnv& env, const RewardFn& reward_fn,
                        const AgentConfig& cfg, long budget_steps, uint64_t seed,
                        const BatchHook& batch_hook = nullptr);

// Greedy-policy success rate over `episodes` seeded episodes.
double evaluate(const QNetwork& policy, const envs::TaskSpec& task, int episodes, uint64_t seed);

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve);
std::vector<CurvePoint> read_curve_csv(const std::string& path);

}  // namespace dr::rl
