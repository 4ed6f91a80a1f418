#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dr/image.hpp"
#include "dr/rng.hpp"

namespace dr::envs {

enum class Action { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };
constexpr int kNumActions = 5;

struct TaskSpec {
    std::string id;
    std::array<uint8_t, 3> object_color{200, 60, 60};
    int goal_x = 0;
    int goal_y = 0;
    int grid = 6;           // grid cells per side
    int k_max = 40;         // episode step limit
    int render_size = 32;   // rendered frame is render_size x render_size
    bool unseen = false;
};

struct EnvState {
    int ax = 0, ay = 0;  // agent cell
    int ox = 0, oy = 0;  // object cell
    int step_count = 0;
    bool done = false;
    bool succeeded = false;
};

// Pure-function renderer: equal states give bit-equal frames.
Frame render_state(const TaskSpec& task, const EnvState& s);

// Push-block gridworld. The agent moves in four directions; walking into the
// object pushes it one cell if the destination is free. Sparse reward 1 is
// emitted exactly once, when the object enters the goal cell.
class PushBlockEnv {
public:
    explicit PushBlockEnv(TaskSpec spec);

    Frame reset(uint64_t seed);

    struct StepResult {
        Frame obs;
        int sparse = 0;
        bool done = false;
    };
    StepResult step(Action a);

    const EnvState& state() const { return st_; }
    const TaskSpec& task() const { return spec_; }
    bool in_episode() const { return in_episode_; }

    // Deterministic dynamics, exposed for planning.
    static EnvState apply(const TaskSpec& task, const EnvState& s, Action a);

    bool solvable(const EnvState& s) const;

private:
    int state_index(const EnvState& s) const;

    TaskSpec spec_;
    EnvState st_;
    std::vector<bool> solvable_;
    bool in_episode_ = false;
};

// Breadth-first planner over (agent, object) states. Plans the shortest push
// sequence from the current state; never emits Stay before success.
class ScriptedExpert {
public:
    explicit ScriptedExpert(TaskSpec spec) : spec_(std::move(spec)) {}
    Action act(const EnvState& s) const;
    // Full shortest plan from s (for length-bound checks).
    std::vector<Action> plan(const EnvState& s) const;

private:
    TaskSpec spec_;
};

std::vector<TaskSpec> seen_tasks(int grid = 6, int render_size = 32);
std::vector<TaskSpec> unseen_tasks(int grid = 6, int render_size = 32);
std::optional<TaskSpec> find_task(const std::string& id, int grid = 6, int render_size = 32);

// ---- dataset on disk: one directory per video, zero-padded PNGs + meta.json
struct VideoMeta {
    std::string task_id;
    double fps = 10.0;
    bool success = false;
};

void save_video(const std::string& dir, const std::vector<Frame>& frames, const VideoMeta& meta);
std::pair<std::vector<Frame>, VideoMeta> load_video(const std::string& dir);
// Sorted list of video directories (recursively) under root.
std::vector<std::string> list_videos(const std::string& root);

struct Rollout {
    std::vector<Frame> frames;  // initial obs + one frame per step
    bool success = false;
    int steps = 0;
};

// Expert rollout with eps-greedy action noise (eps=0: pure expert).
Rollout epsilon_noisy_rollout(const TaskSpec& task, double eps, uint64_t seed);

// Writes n_per_task successful expert episodes per task under out_root,
// resampling failed rollouts. Also writes a task registry JSON.
void generate_dataset(const std::vector<TaskSpec>& tasks, int n_per_task, uint64_t seed,
                      const std::string& out_root);

void write_task_registry(const std::string& path, const std::vector<TaskSpec>& seen,
                         const std::vector<TaskSpec>& unseen);

}  // namespace dr::envs
