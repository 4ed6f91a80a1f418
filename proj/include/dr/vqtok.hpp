#pragma once

#include <string>
#include <vector>

#include "dr/image.hpp"
#include "dr/nn.hpp"
#include "dr/rng.hpp"

namespace dr::vqtok {

struct TokenizerConfig {
    int frame_size = 64;     // H = W
    int grid = 8;            // token grid is grid x grid
    int codebook_size = 128; // K
    int code_dim = 32;       // d
    int hidden = 96;
    double commitment_beta = 0.25;
    int epochs = 30;
    int batch_frames = 16;
    double lr = 1e-3;
    uint64_t seed = 0;

    int patch() const { return frame_size / grid; }
    int patch_dim() const { return 3 * patch() * patch(); }
    int n_tokens() const { return grid * grid; }

    // Paper-scale values, recorded for reference runs.
    static TokenizerConfig paper();
    // Default desk-scale preset (64x64 -> 8x8 grid).
    static TokenizerConfig desk();
    // Small/fast preset for CI and acceptance runs (32x32 -> 4x4 grid).
    static TokenizerConfig fast();
};

struct TokenGrid {
    int h = 0;
    int w = 0;
    std::vector<int> idx;  // row-major, values in [0, K)

    TokenGrid() = default;
    TokenGrid(int hh, int ww, int fill = 0) : h(hh), w(ww), idx(static_cast<size_t>(hh) * ww, fill) {}
    int size() const { return h * w; }
    bool operator==(const TokenGrid& o) const { return h == o.h && w == o.w && idx == o.idx; }
};

struct TrainReport {
    std::vector<double> epoch_loss;
    double first_epoch_mean = 0.0;
    double last_epoch_mean = 0.0;
};

// Patch-MLP vector-quantized autoencoder. Each patch is encoded to a
// code_dim feature, snapped to the nearest codebook entry, and decoded back.
class Tokenizer {
public:
    Tokenizer() = default;  // uninitialized; encode/decode reject calls
    explicit Tokenizer(TokenizerConfig cfg);

    bool initialized() const { return initialized_; }
    const TokenizerConfig& config() const { return cfg_; }

    TokenGrid encode(const Frame& frame) const;
    Frame decode(const TokenGrid& tokens) const;

    // Pre-quantization encoder features, one row per token cell.
    nn::Mat encode_features(const Frame& frame) const;
    // Pure forward passes on feature/patch matrices, exposed so tests can
    // evaluate the straight-through surrogate loss independently.
    nn::Mat decode_features(const nn::Mat& features) const;
    nn::Mat encode_patch_features(const nn::Mat& patches) const;
    // Nearest-codebook-entry (Euclidean) index per feature row.
    std::vector<int> quantize(const nn::Mat& features) const;

    TrainReport train(const std::vector<Frame>& frames);

    // One gradient step on a batch of frames; returns the total loss.
    // Exposed so tests can check the straight-through gradient directly.
    double train_step(const std::vector<const Frame*>& batch, nn::Adam& opt);

    void save(const std::string& dir) const;
    static Tokenizer load(const std::string& dir);
    // Content hash of the serialized weights.
    std::string weights_hash() const;

    std::vector<nn::Param*> params();
    nn::Param& codebook() { return codebook_; }
    const nn::Param& codebook() const { return codebook_; }

    nn::Mat frame_to_patches(const Frame& frame) const;  // n_tokens x patch_dim, in [-0.5, 0.5]
    Frame patches_to_frame(const nn::Mat& patches) const;

private:
    nn::Node* encoder_forward(nn::Graph& g, nn::Node* patches) const;
    nn::Node* decoder_forward(nn::Graph& g, nn::Node* codes) const;

    TokenizerConfig cfg_;
    bool initialized_ = false;
    // encoder
    mutable nn::Param enc_w1_, enc_b1_, enc_w2_, enc_b2_;
    // decoder
    mutable nn::Param dec_w1_, dec_b1_, dec_w2_, dec_b2_;
    mutable nn::Param codebook_;
    std::vector<long> usage_;  // per-entry usage count within the current epoch
};

// Disk cache of tokenized videos: tokens.bin of shape (frames, h, w) int32
// plus meta.json recording the producing tokenizer hash.
void save_token_video(const std::string& dir, const std::vector<TokenGrid>& tokens,
                      const std::string& tokenizer_hash);
std::pair<std::vector<TokenGrid>, std::string> load_token_video(const std::string& dir);

}  // namespace dr::vqtok
