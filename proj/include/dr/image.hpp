#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dr/errors.hpp"

namespace dr {

// One RGB frame, 8-bit per channel, row-major.
struct Frame {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> px;  // size h*w*3

    Frame() = default;
    Frame(int height, int width, uint8_t fill = 0)
        : h(height), w(width), px(static_cast<size_t>(height) * width * 3, fill) {}

    uint8_t& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }

    void fill_rect(int y0, int x0, int hh, int ww, std::array<uint8_t, 3> color) {
        for (int y = y0; y < y0 + hh; ++y)
            for (int x = x0; x < x0 + ww; ++x)
                for (int c = 0; c < 3; ++c) at(y, x, c) = color[c];
    }

    bool same_shape(const Frame& o) const { return h == o.h && w == o.w; }
    bool operator==(const Frame& o) const { return h == o.h && w == o.w && px == o.px; }
};

// PNG I/O (RGB only).
Frame load_png(const std::string& path);
void save_png(const Frame& f, const std::string& path);

// Mean squared error over 8-bit values.
double frame_mse(const Frame& a, const Frame& b);

// PSNR in dB; identical frames report the 99 dB sentinel cap.
double psnr(const Frame& a, const Frame& b);

// Gaussian-windowed SSIM averaged over the three channels, in [-1, 1].
double ssim(const Frame& a, const Frame& b);

struct ReconMetrics {
    double ssim = 0.0;
    double psnr = 0.0;
};

// Averages SSIM/PSNR over (original, reconstruction) pairs.
ReconMetrics reconstruction_metrics(const std::vector<Frame>& originals,
                                    const std::vector<Frame>& reconstructions);

}  // namespace dr
