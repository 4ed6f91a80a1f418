#include <cmath>

#include "dr/image.hpp"

namespace dr {

double frame_mse(const Frame& a, const Frame& b) {
    if (!a.same_shape(b)) throw InvalidInputError("frame shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) {
        double d = static_cast<double>(a.px[i]) - static_cast<double>(b.px[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.px.size());
}

double psnr(const Frame& a, const Frame& b) {
    double mse = frame_mse(a, b);
    if (mse <= 0.0) return 99.0;  // sentinel cap for identical inputs
    double v = 10.0 * std::log10(255.0 * 255.0 / mse);
    return std::min(v, 99.0);
}

namespace {

// 11x11 Gaussian window, sigma 1.5 (the standard SSIM choice).
constexpr int kWin = 11;

const std::vector<double>& gaussian_window() {
    static const std::vector<double> win = [] {
        std::vector<double> w(kWin * kWin);
        const double sigma = 1.5;
        double sum = 0.0;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) {
                double dy = y - kWin / 2, dx = x - kWin / 2;
                double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                w[y * kWin + x] = v;
                sum += v;
            }
        for (double& v : w) v /= sum;
        return w;
    }();
    return win;
}

double ssim_channel(const Frame& a, const Frame& b, int c) {
    const double c1 = (0.01 * 255) * (0.01 * 255);
    const double c2 = (0.03 * 255) * (0.03 * 255);
    const auto& win = gaussian_window();
    double total = 0.0;
    int count = 0;
    for (int y0 = 0; y0 + kWin <= a.h; ++y0) {
        for (int x0 = 0; x0 + kWin <= a.w; ++x0) {
            double mu_a = 0, mu_b = 0;
            for (int y = 0; y < kWin; ++y)
                for (int x = 0; x < kWin; ++x) {
                    double wv = win[y * kWin + x];
                    mu_a += wv * a.at(y0 + y, x0 + x, c);
                    mu_b += wv * b.at(y0 + y, x0 + x, c);
                }
            double var_a = 0, var_b = 0, cov = 0;
            for (int y = 0; y < kWin; ++y)
                for (int x = 0; x < kWin; ++x) {
                    double wv = win[y * kWin + x];
                    double da = a.at(y0 + y, x0 + x, c) - mu_a;
                    double db = b.at(y0 + y, x0 + x, c) - mu_b;
                    var_a += wv * da * da;
                    var_b += wv * db * db;
                    cov += wv * da * db;
                }
            double num = (2 * mu_a * mu_b + c1) * (2 * cov + c2);
            double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            ++count;
        }
    }
    return count > 0 ? total / count : 1.0;
}

}  // namespace

double ssim(const Frame& a, const Frame& b) {
    if (!a.same_shape(b)) throw InvalidInputError("frame shape mismatch");
    if (a.h < kWin || a.w < kWin) throw InvalidInputError("frame smaller than SSIM window");
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += ssim_channel(a, b, c);
    return s / 3.0;
}

ReconMetrics reconstruction_metrics(const std::vector<Frame>& originals,
                                    const std::vector<Frame>& reconstructions) {
    if (originals.size() != reconstructions.size() || originals.empty())
        throw InvalidInputError("need equally many originals and reconstructions");
    ReconMetrics m;
    for (size_t i = 0; i < originals.size(); ++i) {
        m.ssim += ssim(originals[i], reconstructions[i]);
        m.psnr += psnr(originals[i], reconstructions[i]);
    }
    m.ssim /= static_cast<double>(originals.size());
    m.psnr /= static_cast<double>(originals.size());
    return m;
}

}  // namespace dr
