#include "dr/vqtok.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dr::nn;

namespace dr::vqtok {

TokenizerConfig TokenizerConfig::paper() {
    TokenizerConfig c;
    c.frame_size = 64;
    c.grid = 8;
    c.codebook_size = 1024;
    c.code_dim = 64;
    c.hidden = 256;
    c.epochs = 200;
    return c;
}

TokenizerConfig TokenizerConfig::desk() { return TokenizerConfig{}; }

TokenizerConfig TokenizerConfig::fast() {
    TokenizerConfig c;
    c.frame_size = 32;
    c.grid = 4;
    c.codebook_size = 64;
    c.code_dim = 16;
    c.hidden = 64;
    c.epochs = 25;
    return c;
}

Tokenizer::Tokenizer(TokenizerConfig cfg) : cfg_(cfg) {
    if (cfg_.codebook_size < 1) throw InvalidInputError("codebook needs at least one entry");
    if (cfg_.frame_size % cfg_.grid != 0)
        throw InvalidInputError("frame_size must be divisible by grid");
    Rng rng(cfg_.seed);
    int pd = cfg_.patch_dim();
    enc_w1_ = Param("enc_w1", pd, cfg_.hidden);
    enc_b1_ = Param("enc_b1", 1, cfg_.hidden);
    enc_w2_ = Param("enc_w2", cfg_.hidden, cfg_.code_dim);
    enc_b2_ = Param("enc_b2", 1, cfg_.code_dim);
    dec_w1_ = Param("dec_w1", cfg_.code_dim, cfg_.hidden);
    dec_b1_ = Param("dec_b1", 1, cfg_.hidden);
    dec_w2_ = Param("dec_w2", cfg_.hidden, pd);
    dec_b2_ = Param("dec_b2", 1, pd);
    codebook_ = Param("codebook", cfg_.codebook_size, cfg_.code_dim);
    enc_w1_.init_uniform(rng, 1.0 / std::sqrt(pd));
    enc_w2_.init_uniform(rng, 1.0 / std::sqrt(cfg_.hidden));
    dec_w1_.init_uniform(rng, 1.0 / std::sqrt(cfg_.code_dim));
    dec_w2_.init_uniform(rng, 1.0 / std::sqrt(cfg_.hidden));
    codebook_.init_uniform(rng, 0.5);
    usage_.assign(cfg_.codebook_size, 0);
    initialized_ = true;
}

std::vector<Param*> Tokenizer::params() {
    return {&enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_,
            &dec_w1_, &dec_b1_, &dec_w2_, &dec_b2_, &codebook_};
}

Mat Tokenizer::frame_to_patches(const Frame& frame) const {
    if (frame.h != cfg_.frame_size || frame.w != cfg_.frame_size)
        throw InvalidInputError("frame dims do not match tokenizer config");
    int p = cfg_.patch(), n = cfg_.n_tokens();
    Mat out(n, cfg_.patch_dim());
    for (int gy = 0; gy < cfg_.grid; ++gy)
        for (int gx = 0; gx < cfg_.grid; ++gx) {
            int row = gy * cfg_.grid + gx, k = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int c = 0; c < 3; ++c)
                        out(row, k++) = frame.at(gy * p + y, gx * p + x, c) / 255.0 - 0.5;
        }
    return out;
}

Frame Tokenizer::patches_to_frame(const Mat& patches) const {
    int p = cfg_.patch();
    Frame f(cfg_.frame_size, cfg_.frame_size);
    for (int gy = 0; gy < cfg_.grid; ++gy)
        for (int gx = 0; gx < cfg_.grid; ++gx) {
            int row = gy * cfg_.grid + gx, k = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int c = 0; c < 3; ++c) {
                        double v = (patches(row, k++) + 0.5) * 255.0;
                        f.at(gy * p + y, gx * p + x, c) =
                            static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                    }
        }
    return f;
}

Node* Tokenizer::encoder_forward(Graph& g, Node* patches) const {
    Node* h = tanh_op(g, add_rowvec(g, matmul(g, patches, g.param(enc_w1_)), g.param(enc_b1_)));
    return add_rowvec(g, matmul(g, h, g.param(enc_w2_)), g.param(enc_b2_));
}

Node* Tokenizer::decoder_forward(Graph& g, Node* codes) const {
    Node* h = tanh_op(g, add_rowvec(g, matmul(g, codes, g.param(dec_w1_)), g.param(dec_b1_)));
    return add_rowvec(g, matmul(g, h, g.param(dec_w2_)), g.param(dec_b2_));
}

Mat Tokenizer::encode_features(const Frame& frame) const {
    if (!initialized_) throw UninitializedModelError("tokenizer not trained or constructed");
    Graph g;
    return encoder_forward(g, g.leaf(frame_to_patches(frame)))->val;
}

Mat Tokenizer::decode_features(const Mat& features) const {
    if (!initialized_) throw UninitializedModelError("tokenizer not trained or constructed");
    Graph g;
    return decoder_forward(g, g.leaf(features))->val;
}

Mat Tokenizer::encode_patch_features(const Mat& patches) const {
    if (!initialized_) throw UninitializedModelError("tokenizer not trained or constructed");
    Graph g;
    return encoder_forward(g, g.leaf(patches))->val;
}

std::vector<int> Tokenizer::quantize(const Mat& features) const {
    if (!initialized_) throw UninitializedModelError("tokenizer not trained or constructed");
    std::vector<int> idx(features.rows());
    for (int r = 0; r < features.rows(); ++r) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int k = 0; k < codebook_.value.rows(); ++k) {
            double d = (features.row(r) - codebook_.value.row(k)).squaredNorm();
            if (d < best) {
                best = d;
                arg = k;
            }
        }
        idx[r] = arg;
    }
    return idx;
}

TokenGrid Tokenizer::encode(const Frame& frame) const {
    Mat feats = encode_features(frame);
    TokenGrid t(cfg_.grid, cfg_.grid);
    t.idx = quantize(feats);
    return t;
}

Frame Tokenizer::decode(const TokenGrid& tokens) const {
    if (!initialized_) throw UninitializedModelError("tokenizer not trained or constructed");
    if (tokens.h != cfg_.grid || tokens.w != cfg_.grid)
        throw InvalidInputError("token grid shape mismatch");
    Mat codes(tokens.size(), cfg_.code_dim);
    for (int i = 0; i < tokens.size(); ++i) {
        int k = tokens.idx[i];
        if (k < 0 || k >= cfg_.codebook_size) throw InvalidInputError("token index out of range");
        codes.row(i) = codebook_.value.row(k);
    }
    Graph g;
    return patches_to_frame(decoder_forward(g, g.leaf(codes))->val);
}

double Tokenizer::train_step(const std::vector<const Frame*>& batch, Adam& opt) {
    int n = cfg_.n_tokens();
    Mat patches(static_cast<int>(batch.size()) * n, cfg_.patch_dim());
    for (size_t b = 0; b < batch.size(); ++b)
        patches.middleRows(static_cast<int>(b) * n, n) = frame_to_patches(*batch[b]);

    Graph g;
    Node* x = g.leaf(patches);
    Node* e = encoder_forward(g, x);
    std::vector<int> idx = quantize(e->val);
    for (int i : idx) ++usage_[i];
    Mat zq(e->val.rows(), cfg_.code_dim);
    for (int r = 0; r < e->val.rows(); ++r) zq.row(r) = codebook_.value.row(idx[r]);

    // Straight-through: decode e + stopgrad(zq - e).
    Node* st = add(g, e, g.leaf(zq - e->val));
    Node* recon = decoder_forward(g, st);
    Node* loss_rec = mse_const(g, recon, patches);
    Node* cb_rows = gather_rows(g, g.param(codebook_), idx);
    Node* loss_cb = mse_const(g, cb_rows, e->val);      // moves codebook toward encoder
    Node* loss_commit = mse_const(g, e, zq);            // commits encoder to codebook
    Node* loss =
        add(g, loss_rec, add(g, loss_cb, scale(g, loss_commit, cfg_.commitment_beta)));

    for (Param* p : params()) p->zero_grad();
    g.backward(loss);
    opt.step(params());
    return loss->val(0, 0);
}

TrainReport Tokenizer::train(const std::vector<Frame>& frames) {
    if (!initialized_) throw UninitializedModelError("construct the tokenizer before training");
    if (frames.empty()) throw EmptyInputError("empty tokenizer training set");
    Rng rng(cfg_.seed + 1);
    Adam opt(cfg_.lr);
    TrainReport report;
    std::vector<int> order(frames.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        std::fill(usage_.begin(), usage_.end(), 0L);
        double total = 0.0;
        int steps = 0;
        for (size_t i = 0; i < order.size(); i += cfg_.batch_frames) {
            std::vector<const Frame*> batch;
            for (size_t j = i; j < std::min(order.size(), i + cfg_.batch_frames); ++j)
                batch.push_back(&frames[order[j]]);
            total += train_step(batch, opt);
            ++steps;
        }
        report.epoch_loss.push_back(total / steps);

        // Re-seed codebook entries unused for a full epoch from random
        // encoder outputs, preventing collapse.
        for (int k = 0; k < cfg_.codebook_size; ++k) {
            if (usage_[k] > 0) continue;
            const Frame& f = frames[rng.uniform_int(static_cast<int>(frames.size()))];
            Mat feats = encode_features(f);
            codebook_.value.row(k) = feats.row(rng.uniform_int(static_cast<int>(feats.rows())));
        }
    }
    report.first_epoch_mean = report.epoch_loss.front();
    report.last_epoch_mean = report.epoch_loss.back();
    return report;
}

void Tokenizer::save(const std::string& dir) const {
    if (!initialized_) throw UninitializedModelError("nothing to save");
    fs::create_directories(dir);
    auto ps = const_cast<Tokenizer*>(this)->params();
    save_params(ps, dir + "/weights.bin");
    json manifest{{"version", 1},
                  {"kind", "vq_tokenizer"},
                  {"config",
                   {{"frame_size", cfg_.frame_size},
                    {"grid", cfg_.grid},
                    {"codebook_size", cfg_.codebook_size},
                    {"code_dim", cfg_.code_dim},
                    {"hidden", cfg_.hidden},
                    {"commitment_beta", cfg_.commitment_beta},
                    {"epochs", cfg_.epochs},
                    {"batch_frames", cfg_.batch_frames},
                    {"lr", cfg_.lr},
                    {"seed", cfg_.seed}}},
                  {"codebook_shape", {cfg_.codebook_size, cfg_.code_dim}},
                  {"weights_hash", weights_hash()}};
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write tokenizer manifest in " + dir);
}

Tokenizer Tokenizer::load(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("missing tokenizer manifest in " + dir);
    json manifest = json::parse(in);
    const auto& c = manifest.at("config");
    TokenizerConfig cfg;
    cfg.frame_size = c.at("frame_size");
    cfg.grid = c.at("grid");
    cfg.codebook_size = c.at("codebook_size");
    cfg.code_dim = c.at("code_dim");
    cfg.hidden = c.at("hidden");
    cfg.commitment_beta = c.at("commitment_beta");
    cfg.epochs = c.at("epochs");
    cfg.batch_frames = c.at("batch_frames");
    cfg.lr = c.at("lr");
    cfg.seed = c.at("seed");
    Tokenizer t(cfg);
    load_params(t.params(), dir + "/weights.bin");
    return t;
}

std::string Tokenizer::weights_hash() const {
    if (!initialized_) throw UninitializedModelError("no weights to hash");
    return params_hash(const_cast<Tokenizer*>(this)->params());
}

void save_token_video(const std::string& dir, const std::vector<TokenGrid>& tokens,
                      const std::string& tokenizer_hash) {
    if (tokens.empty()) throw EmptyInputError("no token grids to save");
    fs::create_directories(dir);
    std::ofstream out(dir + "/tokens.bin", std::ios::binary);
    if (!out) throw IoError("cannot write token cache in " + dir);
    int32_t header[3] = {static_cast<int32_t>(tokens.size()), tokens[0].h, tokens[0].w};
    out.write(reinterpret_cast<char*>(header), sizeof(header));
    for (const auto& t : tokens) {
        std::vector<int32_t> row(t.idx.begin(), t.idx.end());
        out.write(reinterpret_cast<char*>(row.data()),
                  static_cast<std::streamsize>(sizeof(int32_t) * row.size()));
    }
    json meta{{"tokenizer_hash", tokenizer_hash}, {"frames", tokens.size()}};
    std::ofstream m(dir + "/meta.json");
    m << meta.dump(2) << "\n";
    if (!m) throw IoError("cannot write token cache metadata in " + dir);
}

std::pair<std::vector<TokenGrid>, std::string> load_token_video(const std::string& dir) {
    std::ifstream m(dir + "/meta.json");
    if (!m) throw IoError("missing token cache metadata in " + dir);
    json meta = json::parse(m);
    std::ifstream in(dir + "/tokens.bin", std::ios::binary);
    if (!in) throw IoError("missing tokens.bin in " + dir);
    int32_t header[3];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    std::vector<TokenGrid> out;
    out.reserve(header[0]);
    for (int i = 0; i < header[0]; ++i) {
        TokenGrid t(header[1], header[2]);
        std::vector<int32_t> row(t.size());
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(sizeof(int32_t) * row.size()));
        t.idx.assign(row.begin(), row.end());
        out.push_back(std::move(t));
    }
    if (!in) throw IoError("token cache truncated in " + dir);
    return {std::move(out), meta.at("tokenizer_hash").get<std::string>()};
}

}  // namespace dr::vqtok
