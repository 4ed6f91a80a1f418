#include "dr/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dr::nn;

namespace dr::diffusion {

NoiseSchedule NoiseSchedule::linear(int T, int K, double gamma_end, double alpha_end) {
    if (T < 1) throw InvalidInputError("schedule needs T >= 1");
    if (K < 1) throw InvalidInputError("schedule needs K >= 1");
    NoiseSchedule s;
    s.T = T;
    s.K = K;
    s.alpha_bar.resize(T + 1);
    s.beta_bar.resize(T + 1);
    s.gamma_bar.resize(T + 1);
    s.alpha.resize(T + 1);
    s.beta.resize(T + 1);
    s.gamma.resize(T + 1);
    for (int t = 0; t <= T; ++t) {
        double frac = static_cast<double>(t) / T;
        s.alpha_bar(t) = 1.0 + (alpha_end - 1.0) * frac;
        s.gamma_bar(t) = gamma_end * frac;
        s.beta_bar(t) = (1.0 - s.alpha_bar(t) - s.gamma_bar(t)) / K;
        if (s.beta_bar(t) < -1e-12)
            throw InvalidScheduleError("preset yields negative uniform mass");
        s.beta_bar(t) = std::max(s.beta_bar(t), 0.0);
    }
    s.alpha(0) = 1.0;
    s.beta(0) = 0.0;
    s.gamma(0) = 0.0;
    for (int t = 1; t <= T; ++t) {
        s.alpha(t) = s.alpha_bar(t) / s.alpha_bar(t - 1);
        s.gamma(t) = (s.gamma_bar(t) - s.gamma_bar(t - 1)) / (1.0 - s.gamma_bar(t - 1));
        s.beta(t) = (1.0 - s.alpha(t) - s.gamma(t)) / K;
        if (s.beta(t) < -1e-12)
            throw InvalidScheduleError("preset yields negative per-step uniform mass");
        s.beta(t) = std::max(s.beta(t), 0.0);
    }
    return s;
}

NoiseSchedule::Seg NoiseSchedule::segment(int s, int t) const {
    if (s < 0 || t > T || s > t) throw InvalidInputError("invalid schedule segment");
    Seg seg;
    seg.a = alpha_bar(t) / alpha_bar(s);
    seg.g = (gamma_bar(t) - gamma_bar(s)) / (1.0 - gamma_bar(s));
    seg.b = (1.0 - seg.a - seg.g) / K;
    return seg;
}

double seg_trans_prob(const NoiseSchedule::Seg& seg, int K, int from, int to) {
    if (from == K) return to == K ? 1.0 : 0.0;  // mask is absorbing
    if (to == K) return seg.g;
    return (from == to ? seg.a : 0.0) + seg.b;
}

Eigen::VectorXd NoiseSchedule::marginal(int t, int z0) const {
    if (t < 0 || t > T) throw InvalidInputError("invalid timestep");
    if (z0 < 0 || z0 >= K) throw InvalidInputError("z0 must be a real code");
    Eigen::VectorXd v = Eigen::VectorXd::Constant(K + 1, beta_bar(t));
    v(z0) += alpha_bar(t);
    v(K) = gamma_bar(t);
    return v;
}

Eigen::VectorXd NoiseSchedule::prior() const {
    Eigen::VectorXd v = Eigen::VectorXd::Constant(K + 1, (1.0 - gamma_bar(T)) / K);
    v(K) = gamma_bar(T);
    return v;
}

Eigen::VectorXd posterior_vec(const NoiseSchedule& sched, int s, int t, int zt, int z0) {
    if (!(0 <= s && s < t && t <= sched.T)) throw InvalidInputError("posterior needs 0 <= s < t <= T");
    auto fwd = sched.segment(s, t);
    auto cum = sched.segment(0, s);
    int V = sched.vocab();
    Eigen::VectorXd out(V);
    for (int j = 0; j < V; ++j)
        out(j) = seg_trans_prob(fwd, sched.K, j, zt) * seg_trans_prob(cum, sched.K, z0, j);
    double z = out.sum();
    if (z <= 0.0) throw InvalidInputError("posterior conditioned on impossible event");
    return out / z;
}

nn::Mat posterior_mix_matrix(const NoiseSchedule& sched, int s, int t, int zt) {
    int V = sched.vocab();
    nn::Mat m(sched.K, V);
    for (int i = 0; i < sched.K; ++i) m.row(i) = posterior_vec(sched, s, t, zt, i).transpose();
    return m;
}

TokenGrid forward_sample(const TokenGrid& z0, int t, const NoiseSchedule& sched, Rng& rng) {
    if (t < 0 || t > sched.T) throw InvalidInputError("invalid timestep");
    if (t == 0) return z0;
    TokenGrid out = z0;
    double keep = sched.alpha_bar(t);
    double unif = sched.K * sched.beta_bar(t);
    for (int i = 0; i < out.size(); ++i) {
        double u = rng.uniform();
        if (u < keep) continue;
        if (u < keep + unif)
            out.idx[i] = rng.uniform_int(sched.K);
        else
            out.idx[i] = sched.mask_token();
    }
    return out;
}

ConditionWindow::ConditionWindow(const std::vector<TokenGrid>& grids, int vocab_codes) {
    if (grids.empty()) throw InvalidInputError("condition window needs at least one frame");
    frames = static_cast<int>(grids.size());
    tokens_per_frame = grids[0].size();
    for (const auto& g : grids) {
        if (g.size() != tokens_per_frame) throw InvalidInputError("ragged condition window");
        for (int v : g.idx) {
            if (v < 0 || v >= vocab_codes)
                throw InvalidInputError("MASK or out-of-range token in condition window");
            flat.push_back(v);
        }
    }
}

DenoiserConfig DenoiserConfig::desk() { return DenoiserConfig{}; }

DenoiserConfig DenoiserConfig::fast() {
    DenoiserConfig c;
    c.K = 64;
    c.n_tokens = 16;
    c.T = 20;
    c.width = 64;
    c.blocks = 2;
    c.heads = 2;
    return c;
}

void Denoiser::add_param(const std::string& name, int rows, int cols) {
    params_.push_back(std::make_unique<Param>(name, rows, cols));
}

Param* Denoiser::p(const std::string& name) const {
    for (const auto& q : params_)
        if (q->name == name) return q.get();
    throw Error("unknown param " + name);
}

Denoiser::Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
    int W = cfg_.width;
    add_param("tok_embed", cfg_.K + 1, W);
    add_param("cond_embed", cfg_.K, W);
    add_param("pos", cfg_.seq_len(), W);
    add_param("time_embed", cfg_.T, W);
    for (int b = 0; b < cfg_.blocks; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        add_param(pre + "ln1_g", 1, W);
        add_param(pre + "ln1_b", 1, W);
        add_param(pre + "wq", W, W);
        add_param(pre + "wk", W, W);
        add_param(pre + "wv", W, W);
        add_param(pre + "wo", W, W);
        add_param(pre + "bo", 1, W);
        add_param(pre + "ln2_g", 1, W);
        add_param(pre + "ln2_b", 1, W);
        add_param(pre + "w1", W, cfg_.mlp_mult * W);
        add_param(pre + "b1", 1, cfg_.mlp_mult * W);
        add_param(pre + "w2", cfg_.mlp_mult * W, W);
        add_param(pre + "b2", 1, W);
    }
    add_param("lnf_g", 1, W);
    add_param("lnf_b", 1, W);
    add_param("head_w", W, cfg_.K);
    add_param("head_b", 1, cfg_.K);

    Rng rng(cfg_.seed);
    for (auto& q : params_) {
        if (q->name.find("ln") != std::string::npos && q->name.back() == 'g')
            q->value.setOnes();
        else if (q->name.back() == 'b' && q->name.find("embed") == std::string::npos &&
                 q->name != "pos")
            q->value.setZero();
        else
            q->init_uniform(rng, 1.0 / std::sqrt(static_cast<double>(q->value.rows())));
    }
    initialized_ = true;
}

std::vector<Param*> Denoiser::params() const {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (const auto& q : params_) out.push_back(q.get());
    return out;
}

Node* Denoiser::forward_logits(Graph& g, const std::vector<int>& zt, int t,
                               const ConditionWindow& cond) const {
    if (!initialized_) throw UninitializedModelError("denoiser not trained or constructed");
    if (static_cast<int>(zt.size()) != cfg_.n_tokens)
        throw InvalidInputError("target token count mismatch");
    if (static_cast<int>(cond.flat.size()) != cfg_.context * cfg_.n_tokens)
        throw InvalidInputError("condition token count mismatch");
    if (t < 1 || t > cfg_.T) throw InvalidInputError("invalid timestep");
    for (int v : zt)
        if (v < 0 || v > cfg_.K) throw InvalidInputError("target token out of range");

    int W = cfg_.width, n = cfg_.n_tokens, cn = cfg_.context * n;
    Node* ce = gather_rows(g, g.param(*p("cond_embed")), cond.flat);
    Node* te = gather_rows(g, g.param(*p("tok_embed")), zt);
    Node* time_row = gather_rows(g, g.param(*p("time_embed")), {t - 1});
    te = add_rowvec(g, te, time_row);
    Node* x = add(g, concat_rows(g, {ce, te}), g.param(*p("pos")));

    int dh = W / cfg_.heads;
    for (int b = 0; b < cfg_.blocks; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        Node* h = layernorm(g, x, g.param(*p(pre + "ln1_g")), g.param(*p(pre + "ln1_b")));
        Node* q = matmul(g, h, g.param(*p(pre + "wq")));
        Node* k = matmul(g, h, g.param(*p(pre + "wk")));
        Node* v = matmul(g, h, g.param(*p(pre + "wv")));
        std::vector<Node*> head_out;
        for (int hh = 0; hh < cfg_.heads; ++hh) {
            Node* qh = slice_cols(g, q, hh * dh, dh);
            Node* kh = slice_cols(g, k, hh * dh, dh);
            Node* vh = slice_cols(g, v, hh * dh, dh);
            Node* att = softmax_rows(g, scale(g, matmul_nt(g, qh, kh), 1.0 / std::sqrt(dh)));
            head_out.push_back(matmul(g, att, vh));
        }
        Node* o = add_rowvec(g, matmul(g, concat_cols(g, head_out), g.param(*p(pre + "wo"))),
                             g.param(*p(pre + "bo")));
        x = add(g, x, o);
        Node* h2 = layernorm(g, x, g.param(*p(pre + "ln2_g")), g.param(*p(pre + "ln2_b")));
        Node* m = gelu(g, add_rowvec(g, matmul(g, h2, g.param(*p(pre + "w1"))),
                                     g.param(*p(pre + "b1"))));
        m = add_rowvec(g, matmul(g, m, g.param(*p(pre + "w2"))), g.param(*p(pre + "b2")));
        x = add(g, x, m);
    }
    Node* ht = slice_rows(g, x, cn, n);
    ht = layernorm(g, ht, g.param(*p("lnf_g")), g.param(*p("lnf_b")));
    return add_rowvec(g, matmul(g, ht, g.param(*p("head_w"))), g.param(*p("head_b")));
}

Mat Denoiser::forward_probs(const std::vector<int>& zt, int t, const ConditionWindow& cond) const {
    Graph g;
    Mat logits = forward_logits(g, zt, t, cond)->val;
    for (int r = 0; r < logits.rows(); ++r) {
        double m = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - m).exp();
        logits.row(r) /= logits.row(r).sum();
    }
    return logits;
}

Mat DiffusionModel::reverse_dist(const TokenGrid& zt, int t, int s,
                                 const ConditionWindow& cond) const {
    Mat probs = denoiser_.forward_probs(zt.idx, t, cond);
    int n = zt.size(), V = sched_.vocab();
    Mat out(n, V);
    if (s == 0) {
        out.setZero();
        out.leftCols(sched_.K) = probs;
        return out;
    }
    // Cache mixes per distinct z_t value: tokens sharing a value share the map.
    std::map<int, Mat> mix;
    for (int i = 0; i < n; ++i) {
        auto it = mix.find(zt.idx[i]);
        if (it == mix.end())
            it = mix.emplace(zt.idx[i], posterior_mix_matrix(sched_, s, t, zt.idx[i])).first;
        out.row(i) = probs.row(i) * it->second;
    }
    return out;
}

namespace {
int sample_from_row(const Eigen::RowVectorXd& probs, double noise_scale, Rng& rng) {
    if (noise_scale == 0.0) {
        int arg = 0;
        probs.maxCoeff(&arg);
        return arg;
    }
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int j = 0; j < probs.size(); ++j) {
        double lp = probs(j) > 0.0 ? std::log(probs(j)) : -1e300;
        double v = lp + noise_scale * rng.gumbel();
        if (v > best) {
            best = v;
            arg = j;
        }
    }
    return arg;
}
}  // namespace

TokenGrid DiffusionModel::reverse_step(const TokenGrid& zt, int t, int s,
                                       const ConditionWindow& cond, double noise_scale,
                                       Rng& rng) const {
    Mat dist = reverse_dist(zt, t, s, cond);
    TokenGrid out = zt;
    for (int i = 0; i < out.size(); ++i) out.idx[i] = sample_from_row(dist.row(i), noise_scale, rng);
    return out;
}

std::vector<int> strided_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw InvalidInputError("invalid stride: need 1 <= steps <= T");
    std::vector<int> ts(steps);
    for (int i = 1; i <= steps; ++i)
        ts[i - 1] = static_cast<int>(std::lround(static_cast<double>(T) * i / steps));
    // enforce strictly increasing (ascending) before reversing to descending
    for (int i = 1; i < steps; ++i) ts[i] = std::max(ts[i], ts[i - 1] + 1);
    std::reverse(ts.begin(), ts.end());
    return ts;
}

DiffusionTrajectory DiffusionModel::sample(const ConditionWindow& cond, int steps,
                                           double noise_scale, Rng& rng) const {
    const auto& cfg = denoiser_.config();
    int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cfg.n_tokens))));
    DiffusionTrajectory traj;
    traj.timesteps = strided_timesteps(sched_.T, steps);

    TokenGrid z(side, side, sched_.mask_token());
    traj.grids.push_back(z);
    std::vector<Mat> probs_store;
    for (int i = 0; i < steps; ++i) {
        int t = traj.timesteps[i];
        int s = (i + 1 < steps) ? traj.timesteps[i + 1] : 0;
        Mat probs = denoiser_.forward_probs(z.idx, t, cond);
        probs_store.push_back(probs);
        Mat dist(z.size(), sched_.vocab());
        if (s == 0) {
            dist.setZero();
            dist.leftCols(sched_.K) = probs;
        } else {
            std::map<int, Mat> mix;
            for (int tok = 0; tok < z.size(); ++tok) {
                auto it = mix.find(z.idx[tok]);
                if (it == mix.end())
                    it = mix.emplace(z.idx[tok], posterior_mix_matrix(sched_, s, t, z.idx[tok]))
                             .first;
                dist.row(tok) = probs.row(tok) * it->second;
            }
        }
        TokenGrid nz = z;
        for (int tok = 0; tok < z.size(); ++tok)
            nz.idx[tok] = sample_from_row(dist.row(tok), noise_scale, rng);
        traj.grids.push_back(nz);
        z = nz;
    }
    traj.bound = chain_bound(traj.timesteps, traj.grids, probs_store, cond);
    return traj;
}

double DiffusionModel::chain_bound(const std::vector<int>& timesteps,
                                   const std::vector<TokenGrid>& grids,
                                   const std::vector<Mat>& probs_per_step,
                                   const ConditionWindow& cond) const {
    (void)cond;
    int steps = static_cast<int>(timesteps.size());
    const TokenGrid& z0 = grids.back();
    double bound = 0.0;

    // Reconstruction: log p_theta(z0 | z at the last strided step, cond).
    const Mat& last = probs_per_step.back();
    for (int tok = 0; tok < z0.size(); ++tok)
        bound += std::log(std::max(last(tok, z0.idx[tok]), 1e-300));

    // KL terms between strided endpoints, with the trajectory's own z0.
    for (int i = 0; i + 1 < steps; ++i) {
        int t = timesteps[i], s = timesteps[i + 1];
        const TokenGrid& zt = grids[i];
        std::map<int, Mat> mix;
        for (int tok = 0; tok < zt.size(); ++tok) {
            auto it = mix.find(zt.idx[tok]);
            if (it == mix.end())
                it = mix.emplace(zt.idx[tok], posterior_mix_matrix(sched_, s, t, zt.idx[tok])).first;
            Eigen::VectorXd q = posterior_vec(sched_, s, t, zt.idx[tok], z0.idx[tok]);
            Eigen::RowVectorXd pp = probs_per_step[i].row(tok) * it->second;
            for (int j = 0; j < q.size(); ++j)
                if (q(j) > 0.0)
                    bound -= q(j) * (std::log(q(j)) - std::log(std::max(pp(j), 1e-300)));
        }
    }

    // Prior: KL(q(z_topstep | z0) || p(z_T)) per token, closed form.
    int top = timesteps.front();
    auto cum = sched_.segment(0, top);
    Eigen::VectorXd prior = sched_.prior();
    for (int tok = 0; tok < z0.size(); ++tok) {
        for (int j = 0; j < sched_.vocab(); ++j) {
            double qj = seg_trans_prob(cum, sched_.K, z0.idx[tok], j);
            if (qj > 0.0)
                bound -= qj * (std::log(qj) - std::log(std::max(prior(j), 1e-300)));
        }
    }
    return bound;
}

double DiffusionModel::elbo(const TokenGrid& z0, const ConditionWindow& cond, ElboMode mode,
                            Rng& rng) const {
    if (!denoiser_.initialized()) throw UninitializedModelError("denoiser not initialized");
    for (int v : z0.idx)
        if (v < 0 || v >= sched_.K) throw InvalidInputError("z0 must contain real codes only");

    if (mode == ElboMode::kExhaustive) {
        int n = z0.size(), V = sched_.vocab(), T = sched_.T;
        double configs = std::pow(static_cast<double>(V), static_cast<double>(n) * T);
        if (configs > 2e5)
            throw InvalidInputError("exhaustive ELBO is only feasible for tiny models");
        int per_level = static_cast<int>(std::lround(std::pow(V, n)));
        auto decode_grid = [&](int code) {
            TokenGrid g = z0;
            for (int i = 0; i < n; ++i) {
                g.idx[i] = code % V;
                code /= V;
            }
            return g;
        };
        std::map<std::pair<int, std::vector<int>>, Mat> dist_cache;
        auto reverse_cached = [&](const TokenGrid& zt, int t, int s) -> const Mat& {
            auto key = std::make_pair(t, zt.idx);
            auto it = dist_cache.find(key);
            if (it == dist_cache.end()) it = dist_cache.emplace(key, reverse_dist(zt, t, s, cond)).first;
            return it->second;
        };

        // Enumerate chains z^1..z^T; weight by q(chain | z0).
        std::vector<int> chain(T, 0);
        double total = 0.0;
        std::function<void(int, double)> recurse = [&](int level, double qw) {
            if (qw == 0.0) return;
            if (level > T) {
                std::vector<TokenGrid> grids(T + 1);
                grids[0] = z0;
                for (int t = 1; t <= T; ++t) grids[t] = decode_grid(chain[t - 1]);
                double logp = 0.0;
                for (int i = 0; i < n; ++i)
                    logp += std::log(std::max(sched_.prior()(grids[T].idx[i]), 1e-300));
                for (int t = T; t >= 1; --t) {
                    const Mat& dist = reverse_cached(grids[t], t, t - 1);
                    for (int i = 0; i < n; ++i)
                        logp += std::log(std::max(dist(i, grids[t - 1].idx[i]), 1e-300));
                }
                total += qw * (logp - std::log(qw));
                return;
            }
            for (int code = 0; code < per_level; ++code) {
                chain[level - 1] = code;
                TokenGrid zt = decode_grid(code);
                TokenGrid prev = level == 1 ? z0 : decode_grid(chain[level - 2]);
                auto seg = sched_.segment(level - 1, level);
                double w = 1.0;
                for (int i = 0; i < n; ++i)
                    w *= seg_trans_prob(seg, sched_.K, prev.idx[i], zt.idx[i]);
                recurse(level + 1, qw * w);
            }
        };
        recurse(1, 1.0);
        return total;
    }

    // kFull: exact sum over timesteps, z_t sampled from the forward marginal.
    double bound = 0.0;
    TokenGrid z1 = forward_sample(z0, 1, sched_, rng);
    Mat probs1 = denoiser_.forward_probs(z1.idx, 1, cond);
    for (int tok = 0; tok < z0.size(); ++tok)
        bound += std::log(std::max(probs1(tok, z0.idx[tok]), 1e-300));

    for (int t = 2; t <= sched_.T; ++t) {
        TokenGrid zt = forward_sample(z0, t, sched_, rng);
        Mat dist = reverse_dist(zt, t, t - 1, cond);
        for (int tok = 0; tok < z0.size(); ++tok) {
            Eigen::VectorXd q = posterior_vec(sched_, t - 1, t, zt.idx[tok], z0.idx[tok]);
            for (int j = 0; j < q.size(); ++j)
                if (q(j) > 0.0)
                    bound -= q(j) * (std::log(q(j)) - std::log(std::max(dist(tok, j), 1e-300)));
        }
    }

    Eigen::VectorXd prior = sched_.prior();
    for (int tok = 0; tok < z0.size(); ++tok) {
        Eigen::VectorXd q = sched_.marginal(sched_.T, z0.idx[tok]);
        for (int j = 0; j < q.size(); ++j)
            if (q(j) > 0.0)
                bound -= q(j) * (std::log(q(j)) - std::log(std::max(prior(j), 1e-300)));
    }
    return bound;
}

TrainReport DiffusionModel::train(const std::vector<std::vector<TokenGrid>>& token_videos,
                                  const TrainConfig& tc) {
    const auto& cfg = denoiser_.config();
    TrainReport report;
    std::vector<std::pair<int, int>> windows;  // (video, target frame)
    for (size_t v = 0; v < token_videos.size(); ++v) {
        if (static_cast<int>(token_videos[v].size()) < cfg.context + 1) {
            std::cerr << "warning: skipping video " << v << " shorter than context+1 frames\n";
            ++report.videos_skipped;
            continue;
        }
        for (int k = cfg.context; k < static_cast<int>(token_videos[v].size()); ++k)
            windows.emplace_back(static_cast<int>(v), k);
    }
    if (windows.empty()) throw EmptyInputError("no usable training windows");
    report.windows_used = static_cast<int>(windows.size());

    Rng rng(tc.seed + 17);
    Adam opt(tc.lr);
    auto params = denoiser_.params();

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::shuffle(windows.begin(), windows.end(), rng.engine());
        double total = 0.0;
        long count = 0;
        for (size_t w0 = 0; w0 < windows.size(); w0 += tc.batch) {
            for (Param* p : params) p->zero_grad();
            size_t w1 = std::min(windows.size(), w0 + tc.batch);
            double inv_b = 1.0 / static_cast<double>(w1 - w0);
            for (size_t wi = w0; wi < w1; ++wi) {
                const auto& video = token_videos[windows[wi].first];
                int k = windows[wi].second;
                std::vector<TokenGrid> hist(video.begin() + (k - cfg.context),
                                            video.begin() + k);
                ConditionWindow cond(hist, cfg.K);
                const TokenGrid& z0 = video[k];

                int t = 1 + rng.uniform_int(sched_.T);
                TokenGrid zt = forward_sample(z0, t, sched_, rng);

                Graph g;
                Node* logits = denoiser_.forward_logits(g, zt.idx, t, cond);
                Node* aux = cross_entropy_rows(g, logits, z0.idx);
                Node* main;
                if (t == 1) {
                    main = scale(g, cross_entropy_rows(g, logits, z0.idx),
                                 static_cast<double>(cfg.n_tokens));
                } else {
                    Node* probs = softmax_rows(g, logits);
                    std::vector<Mat> mats(cfg.n_tokens);
                    Mat q(cfg.n_tokens, sched_.vocab());
                    std::map<int, Mat> mix;
                    for (int tok = 0; tok < cfg.n_tokens; ++tok) {
                        auto it = mix.find(zt.idx[tok]);
                        if (it == mix.end())
                            it = mix.emplace(zt.idx[tok],
                                             posterior_mix_matrix(sched_, t - 1, t, zt.idx[tok]))
                                     .first;
                        mats[tok] = it->second;
                        q.row(tok) =
                            posterior_vec(sched_, t - 1, t, zt.idx[tok], z0.idx[tok]).transpose();
                    }
                    main = kl_const_q(g, per_row_linear(g, probs, mats), q);
                }
                Node* loss = scale(
                    g,
                    add(g, main,
                        scale(g, aux, tc.aux_weight * static_cast<double>(cfg.n_tokens))),
                    inv_b);
                g.backward(loss);
                total += loss->val(0, 0) * (w1 - w0);
                ++count;
            }
            opt.step(params);
        }
        report.epoch_loss.push_back(total / static_cast<double>(count));
    }
    return report;
}

void DiffusionModel::save(const std::string& dir, const std::string& tokenizer_hash) const {
    if (!denoiser_.initialized()) throw UninitializedModelError("nothing to save");
    fs::create_directories(dir);
    save_params(denoiser_.params(), dir + "/weights.bin");
    const auto& cfg = denoiser_.config();
    json manifest{{"version", 1},
                  {"kind", "discrete_diffusion"},
                  {"config",
                   {{"K", cfg.K},
                    {"n_tokens", cfg.n_tokens},
                    {"context", cfg.context},
                    {"T", cfg.T},
                    {"width", cfg.width},
                    {"blocks", cfg.blocks},
                    {"heads", cfg.heads},
                    {"mlp_mult", cfg.mlp_mult},
                    {"seed", cfg.seed}}},
                  {"schedule",
                   {{"T", sched_.T},
                    {"K", sched_.K},
                    {"alpha_bar", std::vector<double>(sched_.alpha_bar.data(),
                                                      sched_.alpha_bar.data() + sched_.T + 1)},
                    {"gamma_bar", std::vector<double>(sched_.gamma_bar.data(),
                                                      sched_.gamma_bar.data() + sched_.T + 1)}}},
                  {"tokenizer_hash", tokenizer_hash},
                  {"weights_hash", weights_hash()}};
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write diffusion manifest in " + dir);
}

DiffusionModel DiffusionModel::load(const std::string& dir, std::string* tokenizer_hash) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("missing diffusion manifest in " + dir);
    json manifest = json::parse(in);
    const auto& c = manifest.at("config");
    DenoiserConfig cfg;
    cfg.K = c.at("K");
    cfg.n_tokens = c.at("n_tokens");
    cfg.context = c.at("context");
    cfg.T = c.at("T");
    cfg.width = c.at("width");
    cfg.blocks = c.at("blocks");
    cfg.heads = c.at("heads");
    cfg.mlp_mult = c.at("mlp_mult");
    cfg.seed = c.at("seed");

    const auto& sj = manifest.at("schedule");
    NoiseSchedule sched;
    sched.T = sj.at("T");
    sched.K = sj.at("K");
    auto ab = sj.at("alpha_bar").get<std::vector<double>>();
    auto gb = sj.at("gamma_bar").get<std::vector<double>>();
    sched.alpha_bar = Eigen::Map<Eigen::VectorXd>(ab.data(), static_cast<long>(ab.size()));
    sched.gamma_bar = Eigen::Map<Eigen::VectorXd>(gb.data(), static_cast<long>(gb.size()));
    sched.beta_bar.resize(sched.T + 1);
    sched.alpha.resize(sched.T + 1);
    sched.beta.resize(sched.T + 1);
    sched.gamma.resize(sched.T + 1);
    sched.alpha(0) = 1.0;
    sched.beta(0) = 0.0;
    sched.gamma(0) = 0.0;
    for (int t = 0; t <= sched.T; ++t)
        sched.beta_bar(t) = (1.0 - sched.alpha_bar(t) - sched.gamma_bar(t)) / sched.K;
    for (int t = 1; t <= sched.T; ++t) {
        sched.alpha(t) = sched.alpha_bar(t) / sched.alpha_bar(t - 1);
        sched.gamma(t) = (sched.gamma_bar(t) - sched.gamma_bar(t - 1)) / (1.0 - sched.gamma_bar(t - 1));
        sched.beta(t) = (1.0 - sched.alpha(t) - sched.gamma(t)) / sched.K;
    }

    DiffusionModel model(cfg, sched);
    load_params(model.denoiser_.params(), dir + "/weights.bin");
    if (tokenizer_hash) *tokenizer_hash = manifest.at("tokenizer_hash").get<std::string>();
    return model;
}

std::string DiffusionModel::weights_hash() const { return params_hash(denoiser_.params()); }

}  // namespace dr::diffusion
