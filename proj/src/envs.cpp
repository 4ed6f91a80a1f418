#include "dr/envs.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dr::envs {

namespace {
constexpr int kDx[4] = {0, 0, -1, 1};
constexpr int kDy[4] = {-1, 1, 0, 0};
const std::array<uint8_t, 3> kBackground{30, 30, 36};
const std::array<uint8_t, 3> kGoalColor{110, 110, 50};
const std::array<uint8_t, 3> kAgentColor{235, 235, 235};
}  // namespace

Frame render_state(const TaskSpec& t, const EnvState& s) {
    Frame f(t.render_size, t.render_size);
    f.fill_rect(0, 0, t.render_size, t.render_size, kBackground);
    int cs = t.render_size / t.grid;
    int margin = (t.render_size - cs * t.grid) / 2;
    auto cell = [&](int cx, int cy, std::array<uint8_t, 3> color) {
        f.fill_rect(margin + cy * cs, margin + cx * cs, cs, cs, color);
    };
    cell(t.goal_x, t.goal_y, kGoalColor);
    cell(s.ox, s.oy, t.object_color);
    cell(s.ax, s.ay, kAgentColor);
    return f;
}

EnvState PushBlockEnv::apply(const TaskSpec& t, const EnvState& s, Action a) {
    EnvState n = s;
    n.step_count = s.step_count + 1;
    if (a == Action::kStay) return n;
    int d = static_cast<int>(a);
    int nx = s.ax + kDx[d], ny = s.ay + kDy[d];
    if (nx < 0 || nx >= t.grid || ny < 0 || ny >= t.grid) return n;  // wall blocks agent
    if (nx == s.ox && ny == s.oy) {
        int px = s.ox + kDx[d], py = s.oy + kDy[d];
        if (px < 0 || px >= t.grid || py < 0 || py >= t.grid) return n;  // push into wall: no-op
        n.ox = px;
        n.oy = py;
    }
    n.ax = nx;
    n.ay = ny;
    return n;
}

int PushBlockEnv::state_index(const EnvState& s) const {
    int g = spec_.grid;
    return ((s.ay * g + s.ax) * g + s.oy) * g + s.ox;
}

PushBlockEnv::PushBlockEnv(TaskSpec spec) : spec_(std::move(spec)) {
    if (spec_.grid < 3) throw InvalidInputError("grid too small for push dynamics");
    if (spec_.goal_x < 0 || spec_.goal_x >= spec_.grid || spec_.goal_y < 0 ||
        spec_.goal_y >= spec_.grid)
        throw InvalidInputError("goal outside grid");

    // Backward reachability over (agent, object) states: a start is valid only
    // if the goal is reachable from it.
    int g = spec_.grid;
    int n = g * g * g * g;
    solvable_.assign(n, false);
    std::vector<std::vector<int>> rev(n);
    std::deque<int> frontier;
    for (int ay = 0; ay < g; ++ay)
        for (int ax = 0; ax < g; ++ax)
            for (int oy = 0; oy < g; ++oy)
                for (int ox = 0; ox < g; ++ox) {
                    if (ax == ox && ay == oy) continue;
                    if (ox == spec_.goal_x && oy == spec_.goal_y) continue;  // terminal
                    EnvState s{ax, ay, ox, oy, 0, false, false};
                    int si = state_index(s);
                    for (int a = 0; a < 4; ++a) {
                        EnvState ns = apply(spec_, s, static_cast<Action>(a));
                        if (ns.ox == spec_.goal_x && ns.oy == spec_.goal_y) {
                            if (!solvable_[si]) {
                                solvable_[si] = true;
                                frontier.push_back(si);
                            }
                        } else if (ns.ax != s.ax || ns.ay != s.ay || ns.ox != s.ox ||
                                   ns.oy != s.oy) {
                            rev[state_index(ns)].push_back(si);
                        }
                    }
                }
    while (!frontier.empty()) {
        int si = frontier.front();
        frontier.pop_front();
        for (int prev : rev[si]) {
            if (!solvable_[prev]) {
                solvable_[prev] = true;
                frontier.push_back(prev);
            }
        }
    }
    if (std::none_of(solvable_.begin(), solvable_.end(), [](bool b) { return b; }))
        throw InvalidInputError("task " + spec_.id + " has no solvable start state");
}

bool PushBlockEnv::solvable(const EnvState& s) const { return solvable_[state_index(s)]; }

Frame PushBlockEnv::reset(uint64_t seed) {
    Rng rng(seed);
    int g = spec_.grid;
    while (true) {
        EnvState s;
        s.ax = rng.uniform_int(g);
        s.ay = rng.uniform_int(g);
        s.ox = rng.uniform_int(g);
        s.oy = rng.uniform_int(g);
        if (s.ax == s.ox && s.ay == s.oy) continue;
        if (s.ox == spec_.goal_x && s.oy == spec_.goal_y) continue;  // never start solved
        if (!solvable_[state_index(s)]) continue;
        st_ = s;
        break;
    }
    in_episode_ = true;
    return render_state(spec_, st_);
}

PushBlockEnv::StepResult PushBlockEnv::step(Action a) {
    if (!in_episode_ || st_.done) throw InvalidInputError("step after episode finished");
    st_ = apply(spec_, st_, a);
    StepResult r;
    if (st_.ox == spec_.goal_x && st_.oy == spec_.goal_y) {
        r.sparse = 1;
        st_.succeeded = true;
        st_.done = true;
    } else if (st_.step_count >= spec_.k_max) {
        st_.done = true;
    }
    r.done = st_.done;
    r.obs = render_state(spec_, st_);
    return r;
}

std::vector<Action> ScriptedExpert::plan(const EnvState& start) const {
    int g = spec_.grid;
    auto index = [g](const EnvState& s) { return ((s.ay * g + s.ax) * g + s.oy) * g + s.ox; };
    int n = g * g * g * g;
    std::vector<int8_t> parent_action(n, -1);
    std::vector<int> parent_state(n, -1);
    std::vector<bool> seen(n, false);
    std::deque<int> frontier;
    std::vector<EnvState> states(n);

    int si = index(start);
    seen[si] = true;
    states[si] = start;
    frontier.push_back(si);
    int goal_state = -1;
    while (!frontier.empty() && goal_state < 0) {
        int cur = frontier.front();
        frontier.pop_front();
        for (int a = 0; a < 4; ++a) {  // Stay is never planned
            EnvState ns = PushBlockEnv::apply(spec_, states[cur], static_cast<Action>(a));
            int ni = index(ns);
            if (seen[ni]) continue;
            seen[ni] = true;
            states[ni] = ns;
            parent_action[ni] = static_cast<int8_t>(a);
            parent_state[ni] = cur;
            if (ns.ox == spec_.goal_x && ns.oy == spec_.goal_y) {
                goal_state = ni;
                break;
            }
            frontier.push_back(ni);
        }
    }
    if (goal_state < 0) throw InvalidInputError("no plan exists from this state");
    std::vector<Action> actions;
    for (int cur = goal_state; cur != si; cur = parent_state[cur])
        actions.push_back(static_cast<Action>(parent_action[cur]));
    std::reverse(actions.begin(), actions.end());
    return actions;
}

Action ScriptedExpert::act(const EnvState& s) const { return plan(s).front(); }

std::vector<TaskSpec> seen_tasks(int grid, int render_size) {
    std::vector<TaskSpec> tasks;
    auto mk = [&](const std::string& id, std::array<uint8_t, 3> color, int gx, int gy) {
        TaskSpec t;
        t.id = id;
        t.object_color = color;
        t.goal_x = gx;
        t.goal_y = gy;
        t.grid = grid;
        // Tight episode cap: the worst-case scripted plan is under 3*grid,
        // so this keeps episodes short without making any start unsolvable.
        t.k_max = 3 * grid + 2;
        t.render_size = render_size;
        return t;
    };
    tasks.push_back(mk("push_red", {200, 60, 60}, 0, 0));
    tasks.push_back(mk("push_green", {60, 200, 60}, grid - 1, 0));
    tasks.push_back(mk("push_blue", {70, 90, 220}, 0, grid - 1));
    tasks.push_back(mk("push_magenta", {200, 60, 200}, grid - 1, grid - 1));
    return tasks;
}

std::vector<TaskSpec> unseen_tasks(int grid, int render_size) {
    std::vector<TaskSpec> tasks;
    TaskSpec cyan;
    cyan.id = "push_cyan";  // novel object color, seen goal corner
    cyan.object_color = {60, 200, 200};
    cyan.goal_x = 0;
    cyan.goal_y = 0;
    cyan.grid = grid;
    cyan.k_max = 3 * grid + 2;
    cyan.render_size = render_size;
    cyan.unseen = true;
    tasks.push_back(cyan);

    TaskSpec edge;
    edge.id = "push_red_edge";  // seen color, novel goal position
    edge.object_color = {200, 60, 60};
    edge.goal_x = grid / 2;
    edge.goal_y = grid - 1;
    edge.grid = grid;
    edge.k_max = 3 * grid + 2;
    edge.render_size = render_size;
    edge.unseen = true;
    tasks.push_back(edge);
    return tasks;
}

std::optional<TaskSpec> find_task(const std::string& id, int grid, int render_size) {
    for (const auto& t : seen_tasks(grid, render_size))
        if (t.id == id) return t;
    for (const auto& t : unseen_tasks(grid, render_size))
        if (t.id == id) return t;
    return std::nullopt;
}

void save_video(const std::string& dir, const std::vector<Frame>& frames, const VideoMeta& meta) {
    fs::create_directories(dir);
    char name[32];
    for (size_t i = 0; i < frames.size(); ++i) {
        std::snprintf(name, sizeof(name), "%06zu.png", i);
        save_png(frames[i], dir + "/" + name);
    }
    json j{{"task_id", meta.task_id}, {"fps", meta.fps}, {"success", meta.success}};
    std::ofstream out(dir + "/meta.json");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("cannot write metadata in " + dir);
}

std::pair<std::vector<Frame>, VideoMeta> load_video(const std::string& dir) {
    std::ifstream in(dir + "/meta.json");
    if (!in) throw IoError("missing meta.json in " + dir);
    json j = json::parse(in);
    VideoMeta meta;
    meta.task_id = j.at("task_id").get<std::string>();
    meta.fps = j.at("fps").get<double>();
    meta.success = j.at("success").get<bool>();

    std::vector<std::string> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
    std::vector<Frame> frames;
    frames.reserve(paths.size());
    for (const auto& p : paths) frames.push_back(load_png(p));
    return {std::move(frames), meta};
}

std::vector<std::string> list_videos(const std::string& root) {
    std::vector<std::string> dirs;
    if (!fs::exists(root)) return dirs;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() == "meta.json")
            dirs.push_back(e.path().parent_path().string());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

Rollout epsilon_noisy_rollout(const TaskSpec& task, double eps, uint64_t seed) {
    PushBlockEnv env(task);
    ScriptedExpert expert(task);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    Rollout out;
    out.frames.push_back(env.reset(seed));
    while (!env.state().done) {
        Action a;
        if (eps > 0.0 && rng.uniform() < eps)
            a = static_cast<Action>(rng.uniform_int(kNumActions));
        else if (env.solvable(env.state()))
            a = expert.act(env.state());
        else  // noise pushed the object somewhere unrecoverable
            a = static_cast<Action>(rng.uniform_int(kNumActions));
        auto r = env.step(a);
        out.frames.push_back(std::move(r.obs));
        ++out.steps;
        if (r.sparse == 1) out.success = true;
    }
    return out;
}

void generate_dataset(const std::vector<TaskSpec>& tasks, int n_per_task, uint64_t seed,
                      const std::string& out_root) {
    fs::create_directories(out_root);
    for (const auto& task : tasks) {
        uint64_t episode_seed = seed;
        int kept = 0;
        while (kept < n_per_task) {
            Rollout r = epsilon_noisy_rollout(task, 0.0, episode_seed++);
            if (!r.success) continue;  // failed rollouts are discarded and resampled
            char name[32];
            std::snprintf(name, sizeof(name), "video_%04d", kept);
            VideoMeta meta{task.id, 10.0, true};
            save_video(out_root + "/" + task.id + "/" + name, r.frames, meta);
            ++kept;
        }
    }
}

void write_task_registry(const std::string& path, const std::vector<TaskSpec>& seen,
                         const std::vector<TaskSpec>& unseen) {
    auto to_json = [](const TaskSpec& t) {
        return json{{"id", t.id},
                    {"object_color", {t.object_color[0], t.object_color[1], t.object_color[2]}},
                    {"goal", {t.goal_x, t.goal_y}},
                    {"grid", t.grid},
                    {"k_max", t.k_max},
                    {"render_size", t.render_size},
                    {"unseen", t.unseen}};
    };
    json j;
    for (const auto& t : seen) j["seen"].push_back(to_json(t));
    for (const auto& t : unseen) j["unseen"].push_back(to_json(t));
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("cannot write task registry " + path);
}

}  // namespace dr::envs
