#include "dr/reward.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dr::nn;

namespace dr::reward {

namespace {

uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv1a_mat(const Mat& m, uint64_t h) {
    return fnv1a(m.data(), sizeof(double) * m.size(), h);
}

std::string hex(uint64_t h) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_mat(std::ofstream& out, const Mat& m) {
    int64_t r = m.rows(), c = m.cols();
    out.write(reinterpret_cast<const char*>(&r), sizeof(r));
    out.write(reinterpret_cast<const char*>(&c), sizeof(c));
    out.write(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
}

Mat read_mat(std::ifstream& in) {
    int64_t r = 0, c = 0;
    in.read(reinterpret_cast<char*>(&r), sizeof(r));
    in.read(reinterpret_cast<char*>(&c), sizeof(c));
    Mat m(r, c);
    in.read(reinterpret_cast<char*>(m.data()), sizeof(double) * m.size());
    if (!in) throw IoError("truncated matrix blob");
    return m;
}

}  // namespace

void RewardConfig::validate(int schedule_T) const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (M < 1) throw ConfigError("M must be >= 1");
    if (denoise_steps < 1 || denoise_steps > schedule_T)
        throw ConfigError("denoise_steps must be in [1, T]");
    if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
    if (context < 1) throw ConfigError("context must be >= 1");
}

double standardize(double r_ce, const RewardStats& stats) {
    return (r_ce - stats.mean) / std::max(stats.std, 1e-6);
}

RndState::RndState(RndConfig cfg) : cfg_(cfg), opt_(cfg.lr) {
    if (cfg_.in_dim < 1) throw ConfigError("rnd needs a positive input dim");
    Rng tr(cfg_.seed * 2654435761ull + 12345);
    auto randm = [&](int r, int c) {
        Mat m(r, c);
        double s = 1.0 / std::sqrt(static_cast<double>(r));
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = (tr.uniform() * 2.0 - 1.0) * s;
        return m;
    };
    tgt_w1_ = randm(cfg_.in_dim, cfg_.width);
    tgt_b1_ = Eigen::VectorXd::Zero(cfg_.width);
    tgt_w2_ = randm(cfg_.width, cfg_.feat_dim);
    tgt_b2_ = Eigen::VectorXd::Zero(cfg_.feat_dim);

    Rng pr(cfg_.seed + 7);
    auto addp = [&](const std::string& name, int r, int c, bool zero) {
        pred_.push_back(std::make_unique<Param>(name, r, c));
        if (zero)
            pred_.back()->value.setZero();
        else
            pred_.back()->init_uniform(pr, 1.0 / std::sqrt(static_cast<double>(r)));
    };
    addp("w1", cfg_.in_dim, cfg_.width, false);
    addp("b1", 1, cfg_.width, true);
    addp("w2", cfg_.width, cfg_.feat_dim, false);
    addp("b2", 1, cfg_.feat_dim, true);
    initialized_ = true;
}

Eigen::VectorXd RndState::flatten(const Frame& obs) const {
    if (static_cast<int>(obs.px.size()) != cfg_.in_dim)
        throw InvalidInputError("frame shape does not match rnd input dim");
    Eigen::VectorXd x(cfg_.in_dim);
    for (size_t i = 0; i < obs.px.size(); ++i) x(static_cast<long>(i)) = obs.px[i] / 255.0 - 0.5;
    return x;
}

Eigen::VectorXd RndState::target_features(const Eigen::VectorXd& x) const {
    Eigen::VectorXd h = (tgt_w1_.transpose() * x + tgt_b1_).cwiseMax(0.0);
    return tgt_w2_.transpose() * h + tgt_b2_;
}

double RndState::raw_error(const Frame& obs) const {
    if (!initialized_) throw UninitializedModelError("rnd state not constructed");
    Eigen::VectorXd x = flatten(obs);
    Eigen::VectorXd h =
        (pred_[0]->value.transpose() * x + pred_[1]->value.transpose()).cwiseMax(0.0);
    Eigen::VectorXd f = pred_[2]->value.transpose() * h + pred_[3]->value.transpose();
    return (f - target_features(x)).squaredNorm();
}

double RndState::running_std() const {
    if (stat_n_ < 2) return 1.0;
    return std::max(std::sqrt(stat_m2_ / (stat_n_ - 1)), 1e-6);
}

double RndState::reward(const Frame& obs) const {
    double r = raw_error(obs) / running_std();
    return std::min(std::max(r, 0.0), 10.0);
}

double RndState::update(const std::vector<Frame>& batch) {
    if (!initialized_) throw UninitializedModelError("rnd state not constructed");
    if (batch.empty()) throw EmptyInputError("rnd update needs a nonempty batch");
    int n = static_cast<int>(batch.size());
    Mat X(n, cfg_.in_dim), Y(n, cfg_.feat_dim);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd x = flatten(batch[i]);
        X.row(i) = x.transpose();
        Y.row(i) = target_features(x).transpose();
        // running stats over the raw per-frame bonus, pre-update
        double raw = raw_error(batch[i]);
        ++stat_n_;
        double d = raw - stat_mean_;
        stat_mean_ += d / stat_n_;
        stat_m2_ += d * (raw - stat_mean_);
    }
    Graph g;
    for (auto& p : pred_) p->zero_grad();
    Node* h = relu(g, add_rowvec(g, matmul(g, g.leaf(X), g.param(*pred_[0])), g.param(*pred_[1])));
    Node* f = add_rowvec(g, matmul(g, h, g.param(*pred_[2])), g.param(*pred_[3]));
    Node* loss = mse_const(g, f, Y);
    double before = loss->val(0, 0);
    g.backward(loss);
    std::vector<Param*> ps;
    for (auto& p : pred_) ps.push_back(p.get());
    opt_.step(ps);
    ++updates_;
    return before;
}

std::string RndState::target_hash() const {
    uint64_t h = fnv1a_mat(tgt_w1_, 1469598103934665603ull);
    h = fnv1a(tgt_b1_.data(), sizeof(double) * tgt_b1_.size(), h);
    h = fnv1a_mat(tgt_w2_, h);
    h = fnv1a(tgt_b2_.data(), sizeof(double) * tgt_b2_.size(), h);
    return hex(h);
}

void RndState::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    const uint64_t magic = 0x52444e4231ull;
    out.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
    int64_t meta[4] = {cfg_.in_dim, cfg_.width, cfg_.feat_dim,
                       static_cast<int64_t>(cfg_.seed)};
    out.write(reinterpret_cast<const char*>(meta), sizeof(meta));
    out.write(reinterpret_cast<const char*>(&cfg_.lr), sizeof(double));
    write_mat(out, tgt_w1_);
    write_mat(out, Mat(tgt_b1_.transpose()));
    write_mat(out, tgt_w2_);
    write_mat(out, Mat(tgt_b2_.transpose()));
    for (const auto& p : pred_) write_mat(out, p->value);
    int64_t st[2] = {updates_, stat_n_};
    out.write(reinterpret_cast<const char*>(st), sizeof(st));
    out.write(reinterpret_cast<const char*>(&stat_mean_), sizeof(double));
    out.write(reinterpret_cast<const char*>(&stat_m2_), sizeof(double));
    if (!out) throw IoError("failed writing " + path);
}

RndState RndState::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    uint64_t magic = 0;
    in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    if (magic != 0x52444e4231ull) throw IoError("bad rnd blob " + path);
    int64_t meta[4];
    in.read(reinterpret_cast<char*>(meta), sizeof(meta));
    RndConfig cfg;
    cfg.in_dim = static_cast<int>(meta[0]);
    cfg.width = static_cast<int>(meta[1]);
    cfg.feat_dim = static_cast<int>(meta[2]);
    cfg.seed = static_cast<uint64_t>(meta[3]);
    in.read(reinterpret_cast<char*>(&cfg.lr), sizeof(double));
    RndState s(cfg);
    s.tgt_w1_ = read_mat(in);
    s.tgt_b1_ = read_mat(in).transpose();
    s.tgt_w2_ = read_mat(in);
    s.tgt_b2_ = read_mat(in).transpose();
    for (auto& p : s.pred_) p->value = read_mat(in);
    int64_t st[2];
    in.read(reinterpret_cast<char*>(st), sizeof(st));
    s.updates_ = st[0];
    s.stat_n_ = st[1];
    in.read(reinterpret_cast<char*>(&s.stat_mean_), sizeof(double));
    in.read(reinterpret_cast<char*>(&s.stat_m2_), sizeof(double));
    if (!in) throw IoError("truncated rnd blob " + path);
    return s;
}

diffusion::ConditionWindow encode_history(const std::vector<Frame>& history,
                                          const RewardModelBundle& bundle) {
    if (history.empty()) throw EmptyInputError("history must contain at least one frame");
    if (!bundle.tokenizer.initialized() || !bundle.model.denoiser().initialized())
        throw UninitializedModelError("reward bundle missing pretrained checkpoints");
    int ell = bundle.cfg.context;
    std::vector<vqtok::TokenGrid> grids;
    for (int i = 0; i < ell; ++i) {
        int k = static_cast<int>(history.size()) - ell + i;
        const Frame& f = k < 0 ? history.front() : history[k];
        grids.push_back(bundle.tokenizer.encode(f));
    }
    return diffusion::ConditionWindow(grids, bundle.model.schedule().K);
}

double entropy_reward(const std::vector<Frame>& history, const RewardModelBundle& bundle,
                      Rng& rng) {
    bundle.cfg.validate(bundle.model.schedule().T);
    auto cond = encode_history(history, bundle);
    double total = 0.0;
    for (int m = 0; m < bundle.cfg.M; ++m)
        total += bundle.model
                     .sample(cond, bundle.cfg.denoise_steps, bundle.cfg.noise_scale, rng)
                     .bound;
    return total / bundle.cfg.M;
}

double loglik_reward(const std::vector<Frame>& history, const Frame& next,
                     const RewardModelBundle& bundle) {
    auto cond = encode_history(history, bundle);
    vqtok::TokenGrid z0 = bundle.tokenizer.encode(next);
    // Evaluation is made deterministic by deriving the marginal-sampling seed
    // from the inputs and the weights.
    uint64_t h = fnv1a(cond.flat.data(), sizeof(int) * cond.flat.size());
    h = fnv1a(z0.idx.data(), sizeof(int) * z0.idx.size(), h);
    std::string wh = bundle.model.weights_hash();
    h = fnv1a(wh.data(), wh.size(), h);
    Rng rng(h);
    return bundle.model.elbo(z0, cond, diffusion::DiffusionModel::ElboMode::kFull, rng);
}

double rnd_reward(const Frame& obs, const RndState& rnd) { return rnd.reward(obs); }

void rnd_update(const std::vector<Frame>& batch, RndState& rnd) { rnd.update(batch); }

RewardStats fit_stats(const std::vector<std::vector<Frame>>& expert_videos,
                      RewardModelBundle& bundle, Rng& rng) {
    std::vector<double> rs;
    for (const auto& video : expert_videos) {
        std::vector<Frame> hist;
        for (const auto& frame : video) {
            hist.push_back(frame);
            rs.push_back(entropy_reward(hist, bundle, rng));
        }
    }
    if (rs.size() < 2) throw InsufficientDataError("need at least 2 expert reward samples");
    double mean = 0.0;
    for (double r : rs) mean += r;
    mean /= static_cast<double>(rs.size());
    double var = 0.0;
    for (double r : rs) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rs.size() - 1);
    RewardStats st;
    st.mean = mean;
    st.std = std::sqrt(var);
    if (st.std < 1e-6) {
        std::cerr << "warning: expert rewards are (near-)constant; flooring std at 1e-6\n";
        st.std = 1e-6;
    }
    st.n = static_cast<long>(rs.size());
    st.fitted = true;
    bundle.stats = st;
    return st;
}

double diffusion_reward(const std::vector<Frame>& history, const Frame& obs, int sparse,
                        const RewardModelBundle& bundle, Rng& rng) {
    if (!bundle.stats.fitted) throw InsufficientDataError("reward stats not fitted");
    if (sparse != 0 && sparse != 1) throw InvalidInputError("sparse reward must be 0 or 1");
    const auto& c = bundle.cfg;
    double r_ce_std =
        c.alpha < 1.0 ? standardize(entropy_reward(history, bundle, rng), bundle.stats) : 0.0;
    double r_rnd = c.alpha > 0.0 ? rnd_reward(obs, bundle.rnd) : 0.0;
    return (1.0 - c.alpha) * r_ce_std + c.alpha * r_rnd + c.beta * sparse;
}

double measure_fps(const RewardModelBundle& bundle, int n_calls,
                   const std::vector<Frame>& history, Rng& rng) {
    if (n_calls < 1) throw InvalidInputError("fps measurement needs n_calls >= 1");
    const Frame& obs = history.back();
    auto t0 = std::chrono::steady_clock::now();
    volatile double sink = 0.0;
    for (int i = 0; i < n_calls; ++i) sink += diffusion_reward(history, obs, 0, bundle, rng);
    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();
    (void)sink;
    return n_calls / std::max(secs, 1e-9);
}

void RewardModelBundle::save(const std::string& dir) const {
    fs::create_directories(dir);
    tokenizer.save(dir + "/tokenizer");
    model.save(dir + "/diffusion", tokenizer.weights_hash());
    rnd.save(dir + "/rnd.bin");
    json manifest{{"version", 1},
                  {"tokenizer_hash", tokenizer.weights_hash()},
                  {"diffusion_hash", model.weights_hash()},
                  {"alpha", cfg.alpha},
                  {"beta", cfg.beta},
                  {"M", cfg.M},
                  {"denoise_steps", cfg.denoise_steps},
                  {"noise_scale", cfg.noise_scale},
                  {"context", cfg.context},
                  {"stats",
                   {{"mean", stats.mean},
                    {"std", stats.std},
                    {"n", stats.n},
                    {"fitted", stats.fitted}}}};
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write bundle manifest in " + dir);
}

RewardModelBundle RewardModelBundle::load(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("missing bundle manifest in " + dir);
    json manifest = json::parse(in);
    RewardModelBundle b;
    b.tokenizer = vqtok::Tokenizer::load(dir + "/tokenizer");
    std::string tok_hash;
    b.model = diffusion::DiffusionModel::load(dir + "/diffusion", &tok_hash);
    if (tok_hash != b.tokenizer.weights_hash())
        throw ConfigError("diffusion checkpoint was trained against a different tokenizer");
    if (manifest.at("tokenizer_hash").get<std::string>() != b.tokenizer.weights_hash() ||
        manifest.at("diffusion_hash").get<std::string>() != b.model.weights_hash())
        throw ConfigError("bundle manifest hashes do not match checkpoints");
    b.rnd = RndState::load(dir + "/rnd.bin");
    b.cfg.alpha = manifest.at("alpha");
    b.cfg.beta = manifest.at("beta");
    b.cfg.M = manifest.at("M");
    b.cfg.denoise_steps = manifest.at("denoise_steps");
    b.cfg.noise_scale = manifest.at("noise_scale");
    b.cfg.context = manifest.at("context");
    b.stats.mean = manifest.at("stats").at("mean");
    b.stats.std = manifest.at("stats").at("std");
    b.stats.n = manifest.at("stats").at("n");
    b.stats.fitted = manifest.at("stats").at("fitted");
    return b;
}

void write_reward_curve_csv(const std::string& path, const std::vector<RewardCurveRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "video_id,step,r_ce,r_ce_std,r_rnd,sparse,r_diff\n";
    out.precision(12);
    for (const auto& r : rows)
        out << r.video_id << "," << r.step << "," << r.r_ce << "," << r.r_ce_std << ","
            << r.r_rnd << "," << r.sparse << "," << r.r_diff << "\n";
    if (!out) throw IoError("failed writing " + path);
}

std::vector<RewardCurveRow> read_reward_curve_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    std::getline(in, line);  // header
    std::vector<RewardCurveRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        RewardCurveRow r;
        std::string tok;
        std::getline(ss, r.video_id, ',');
        std::getline(ss, tok, ',');
        r.step = std::stoi(tok);
        std::getline(ss, tok, ',');
        r.r_ce = std::stod(tok);
        std::getline(ss, tok, ',');
        r.r_ce_std = std::stod(tok);
        std::getline(ss, tok, ',');
        r.r_rnd = std::stod(tok);
        std::getline(ss, tok, ',');
        r.sparse = std::stoi(tok);
        std::getline(ss, tok, ',');
        r.r_diff = std::stod(tok);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace dr::reward
