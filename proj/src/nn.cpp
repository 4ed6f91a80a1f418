#include "dr/nn.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>

namespace dr::nn {

void accumulate(Node* n, const Mat& g) {
    if (!n->needs_grad) return;
    if (n->grad.size() == 0) n->grad = Mat::Zero(n->val.rows(), n->val.cols());
    n->grad += g;
}

void Graph::backward(Node* loss) {
    if (loss->val.rows() != 1 || loss->val.cols() != 1)
        throw InvalidInputError("backward expects a scalar loss node");
    loss->grad = Mat::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.param) n.param->grad += n.grad;
        if (n.back) n.back(n);
    }
}

namespace {
bool ng(Node* a) { return a->needs_grad; }
bool ng(Node* a, Node* b) { return a->needs_grad || b->needs_grad; }
}  // namespace

Node* matmul(Graph& g, Node* a, Node* b) {
    return g.make(a->val * b->val, ng(a, b), [a, b](Node& n) {
        accumulate(a, n.grad * b->val.transpose());
        accumulate(b, a->val.transpose() * n.grad);
    });
}

Node* matmul_nt(Graph& g, Node* a, Node* b) {
    return g.make(a->val * b->val.transpose(), ng(a, b), [a, b](Node& n) {
        accumulate(a, n.grad * b->val);
        accumulate(b, n.grad.transpose() * a->val);
    });
}

Node* add(Graph& g, Node* a, Node* b) {
    return g.make(a->val + b->val, ng(a, b), [a, b](Node& n) {
        accumulate(a, n.grad);
        accumulate(b, n.grad);
    });
}

Node* add_rowvec(Graph& g, Node* a, Node* b) {
    Mat v = a->val;
    v.rowwise() += b->val.row(0);
    return g.make(std::move(v), ng(a, b), [a, b](Node& n) {
        accumulate(a, n.grad);
        accumulate(b, n.grad.colwise().sum());
    });
}

Node* sub(Graph& g, Node* a, Node* b) {
    return g.make(a->val - b->val, ng(a, b), [a, b](Node& n) {
        accumulate(a, n.grad);
        accumulate(b, -n.grad);
    });
}

Node* scale(Graph& g, Node* a, double s) {
    return g.make(a->val * s, ng(a), [a, s](Node& n) { accumulate(a, n.grad * s); });
}

Node* hadamard(Graph& g, Node* a, Node* b) {
    return g.make(a->val.cwiseProduct(b->val), ng(a, b), [a, b](Node& n) {
        accumulate(a, n.grad.cwiseProduct(b->val));
        accumulate(b, n.grad.cwiseProduct(a->val));
    });
}

Node* relu(Graph& g, Node* a) {
    return g.make(a->val.cwiseMax(0.0), ng(a), [a](Node& n) {
        Mat m = (a->val.array() > 0.0).cast<double>();
        accumulate(a, n.grad.cwiseProduct(m));
    });
}

Node* gelu(Graph& g, Node* a) {
    // tanh approximation of GELU
    const double c = std::sqrt(2.0 / M_PI);
    Mat x = a->val;
    Mat inner = (c * (x.array() + 0.044715 * x.array().cube())).matrix();
    Mat t = inner.array().tanh().matrix();
    Mat out = (0.5 * x.array() * (1.0 + t.array())).matrix();
    return g.make(std::move(out), ng(a), [a, c, t](Node& n) {
        auto x = a->val.array();
        auto th = t.array();
        auto dinner = c * (1.0 + 3 * 0.044715 * x.square());
        Mat d = (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * dinner).matrix();
        accumulate(a, n.grad.cwiseProduct(d));
    });
}

Node* tanh_op(Graph& g, Node* a) {
    Mat t = a->val.array().tanh().matrix();
    return g.make(t, ng(a), [a, t](Node& n) {
        Mat d = (1.0 - t.array().square()).matrix();
        accumulate(a, n.grad.cwiseProduct(d));
    });
}

Node* softmax_rows(Graph& g, Node* a) {
    Mat out = a->val;
    for (int r = 0; r < out.rows(); ++r) {
        double m = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    return g.make(out, ng(a), [a, out](Node& n) {
        Mat d(out.rows(), out.cols());
        for (int r = 0; r < out.rows(); ++r) {
            double dot = n.grad.row(r).dot(out.row(r));
            d.row(r) = out.row(r).cwiseProduct((n.grad.row(r).array() - dot).matrix());
        }
        accumulate(a, d);
    });
}

Node* layernorm(Graph& g, Node* a, Node* gain, Node* bias) {
    const double eps = 1e-5;
    int R = static_cast<int>(a->val.rows()), C = static_cast<int>(a->val.cols());
    Mat xhat(R, C);
    Eigen::VectorXd inv_std(R);
    for (int r = 0; r < R; ++r) {
        double mu = a->val.row(r).mean();
        Eigen::RowVectorXd cent = a->val.row(r).array() - mu;
        double var = cent.squaredNorm() / C;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(r) = is;
        xhat.row(r) = cent * is;
    }
    Mat out = xhat;
    for (int r = 0; r < R; ++r)
        out.row(r) = out.row(r).cwiseProduct(gain->val.row(0)) + bias->val.row(0);
    return g.make(out, a->needs_grad || gain->needs_grad || bias->needs_grad,
                  [a, gain, bias, xhat, inv_std, C](Node& n) {
                      accumulate(bias, n.grad.colwise().sum());
                      accumulate(gain, n.grad.cwiseProduct(xhat).colwise().sum());
                      if (!a->needs_grad) return;
                      Mat da(n.grad.rows(), C);
                      for (int r = 0; r < n.grad.rows(); ++r) {
                          Eigen::RowVectorXd dy = n.grad.row(r).cwiseProduct(gain->val.row(0));
                          double m1 = dy.mean();
                          double m2 = dy.cwiseProduct(xhat.row(r)).mean();
                          da.row(r) = inv_std(r) * (dy.array() - m1 - xhat.row(r).array() * m2);
                      }
                      accumulate(a, da);
                  });
}

Node* slice_rows(Graph& g, Node* a, int r0, int n_rows) {
    return g.make(a->val.middleRows(r0, n_rows), ng(a), [a, r0, n_rows](Node& n) {
        Mat d = Mat::Zero(a->val.rows(), a->val.cols());
        d.middleRows(r0, n_rows) = n.grad;
        accumulate(a, d);
    });
}

Node* slice_cols(Graph& g, Node* a, int c0, int n_cols) {
    return g.make(a->val.middleCols(c0, n_cols), ng(a), [a, c0, n_cols](Node& n) {
        Mat d = Mat::Zero(a->val.rows(), a->val.cols());
        d.middleCols(c0, n_cols) = n.grad;
        accumulate(a, d);
    });
}

Node* concat_rows(Graph& g, const std::vector<Node*>& parts) {
    int rows = 0;
    for (Node* p : parts) rows += static_cast<int>(p->val.rows());
    Mat out(rows, parts[0]->val.cols());
    int r = 0;
    bool needs = false;
    for (Node* p : parts) {
        out.middleRows(r, p->val.rows()) = p->val;
        r += static_cast<int>(p->val.rows());
        needs = needs || p->needs_grad;
    }
    return g.make(std::move(out), needs, [parts](Node& n) {
        int r = 0;
        for (Node* p : parts) {
            accumulate(p, n.grad.middleRows(r, p->val.rows()));
            r += static_cast<int>(p->val.rows());
        }
    });
}

Node* concat_cols(Graph& g, const std::vector<Node*>& parts) {
    int cols = 0;
    for (Node* p : parts) cols += static_cast<int>(p->val.cols());
    Mat out(parts[0]->val.rows(), cols);
    int c = 0;
    bool needs = false;
    for (Node* p : parts) {
        out.middleCols(c, p->val.cols()) = p->val;
        c += static_cast<int>(p->val.cols());
        needs = needs || p->needs_grad;
    }
    return g.make(std::move(out), needs, [parts](Node& n) {
        int c = 0;
        for (Node* p : parts) {
            accumulate(p, n.grad.middleCols(c, p->val.cols()));
            c += static_cast<int>(p->val.cols());
        }
    });
}

Node* gather_rows(Graph& g, Node* table, const std::vector<int>& idx) {
    Mat out(static_cast<int>(idx.size()), table->val.cols());
    for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<int>(i)) = table->val.row(idx[i]);
    return g.make(std::move(out), ng(table), [table, idx](Node& n) {
        Mat d = Mat::Zero(table->val.rows(), table->val.cols());
        for (size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += n.grad.row(static_cast<int>(i));
        accumulate(table, d);
    });
}

Node* gather_cols_per_row(Graph& g, Node* a, const std::vector<int>& idx) {
    Mat out(static_cast<int>(idx.size()), 1);
    for (size_t i = 0; i < idx.size(); ++i) out(static_cast<int>(i), 0) = a->val(static_cast<int>(i), idx[i]);
    return g.make(std::move(out), ng(a), [a, idx](Node& n) {
        Mat d = Mat::Zero(a->val.rows(), a->val.cols());
        for (size_t i = 0; i < idx.size(); ++i) d(static_cast<int>(i), idx[i]) = n.grad(static_cast<int>(i), 0);
        accumulate(a, d);
    });
}

Node* sum_all(Graph& g, Node* a) {
    Mat s(1, 1);
    s(0, 0) = a->val.sum();
    return g.make(std::move(s), ng(a), [a](Node& n) {
        accumulate(a, Mat::Constant(a->val.rows(), a->val.cols(), n.grad(0, 0)));
    });
}

Node* mean_all(Graph& g, Node* a) {
    double inv = 1.0 / static_cast<double>(a->val.size());
    Mat s(1, 1);
    s(0, 0) = a->val.sum() * inv;
    return g.make(std::move(s), ng(a), [a, inv](Node& n) {
        accumulate(a, Mat::Constant(a->val.rows(), a->val.cols(), n.grad(0, 0) * inv));
    });
}

Node* cross_entropy_rows(Graph& g, Node* logits, const std::vector<int>& targets) {
    int R = static_cast<int>(logits->val.rows());
    if (static_cast<int>(targets.size()) != R)
        throw InvalidInputError("targets/logits row mismatch");
    Mat probs = logits->val;
    double loss = 0.0;
    for (int r = 0; r < R; ++r) {
        double m = probs.row(r).maxCoeff();
        probs.row(r) = (probs.row(r).array() - m).exp();
        probs.row(r) /= probs.row(r).sum();
        loss -= std::log(std::max(probs(r, targets[r]), 1e-300));
    }
    Mat out(1, 1);
    out(0, 0) = loss / R;
    return g.make(std::move(out), ng(logits), [logits, probs, targets, R](Node& n) {
        Mat d = probs;
        for (int r = 0; r < R; ++r) d(r, targets[r]) -= 1.0;
        accumulate(logits, d * (n.grad(0, 0) / R));
    });
}

Node* kl_const_q(Graph& g, Node* p, const Mat& q) {
    const double eps = 1e-12;
    double loss = 0.0;
    for (int r = 0; r < q.rows(); ++r)
        for (int c = 0; c < q.cols(); ++c)
            if (q(r, c) > 0.0)
                loss += q(r, c) * (std::log(q(r, c)) - std::log(p->val(r, c) + eps));
    Mat out(1, 1);
    out(0, 0) = loss;
    return g.make(std::move(out), ng(p), [p, q, eps](Node& n) {
        Mat d = Mat::Zero(q.rows(), q.cols());
        for (int r = 0; r < q.rows(); ++r)
            for (int c = 0; c < q.cols(); ++c)
                if (q(r, c) > 0.0) d(r, c) = -q(r, c) / (p->val(r, c) + eps);
        accumulate(p, d * n.grad(0, 0));
    });
}

Node* mse_const(Graph& g, Node* a, const Mat& target) {
    Mat diff = a->val - target;
    double inv = 1.0 / static_cast<double>(diff.size());
    Mat out(1, 1);
    out(0, 0) = diff.squaredNorm() * inv;
    return g.make(std::move(out), ng(a), [a, diff, inv](Node& n) {
        accumulate(a, diff * (2.0 * inv * n.grad(0, 0)));
    });
}

Node* per_row_linear(Graph& g, Node* probs, const std::vector<Mat>& mix) {
    int R = static_cast<int>(probs->val.rows());
    if (static_cast<int>(mix.size()) != R) throw InvalidInputError("mix/probs row mismatch");
    int out_cols = static_cast<int>(mix[0].cols());
    Mat out(R, out_cols);
    for (int r = 0; r < R; ++r) out.row(r) = probs->val.row(r) * mix[r];
    // mix is captured by value: the graph may outlive the caller's vector.
    return g.make(std::move(out), ng(probs), [probs, mix, R](Node& n) {
        Mat d(R, probs->val.cols());
        for (int r = 0; r < R; ++r) d.row(r) = n.grad.row(r) * mix[r].transpose();
        accumulate(probs, d);
    });
}

void Adam::step(const std::vector<Param*>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (Param* p : params) {
        p->adam_m = b1_ * p->adam_m + (1.0 - b1_) * p->grad;
        p->adam_v = b2_ * p->adam_v.array().matrix() +
                    (1.0 - b2_) * p->grad.cwiseProduct(p->grad);
        Mat mhat = p->adam_m / bc1;
        Mat vhat = p->adam_v / bc2;
        p->value -= lr_ * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps_).matrix());
    }
}

namespace {
void write_u64(std::ofstream& out, uint64_t v) { out.write(reinterpret_cast<char*>(&v), 8); }
uint64_t read_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
}  // namespace

void save_params(const std::vector<Param*>& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    write_u64(out, 0x44525742ULL);  // magic
    write_u64(out, params.size());
    for (Param* p : params) {
        write_u64(out, p->name.size());
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_u64(out, static_cast<uint64_t>(p->value.rows()));
        write_u64(out, static_cast<uint64_t>(p->value.cols()));
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(sizeof(double) * p->value.size()));
    }
    if (!out) throw IoError("write failed: " + path);
}

void load_params(const std::vector<Param*>& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    if (read_u64(in) != 0x44525742ULL) throw IoError("bad weight blob: " + path);
    uint64_t count = read_u64(in);
    if (count != params.size()) throw IoError("param count mismatch in " + path);
    for (Param* p : params) {
        uint64_t len = read_u64(in);
        std::string name(len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(len));
        if (name != p->name) throw IoError("param name mismatch: " + name + " vs " + p->name);
        auto rows = static_cast<int>(read_u64(in));
        auto cols = static_cast<int>(read_u64(in));
        if (rows != p->value.rows() || cols != p->value.cols())
            throw IoError("param shape mismatch for " + name);
        in.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * p->value.size()));
    }
    if (!in) throw IoError("read failed: " + path);
}

namespace {
void fnv_bytes(uint64_t& h, const void* data, size_t len) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
}
std::string fnv_hex(uint64_t h) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}
}  // namespace

std::string params_hash(const std::vector<Param*>& params) {
    uint64_t h = 1469598103934665603ULL;
    for (const Param* p : params) {
        fnv_bytes(h, p->name.data(), p->name.size());
        int64_t shape[2] = {p->value.rows(), p->value.cols()};
        fnv_bytes(h, shape, sizeof(shape));
        fnv_bytes(h, p->value.data(), sizeof(double) * p->value.size());
    }
    return fnv_hex(h);
}

std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    uint64_t h = 1469598103934665603ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<uint8_t>(buf[i]);
            h *= 1099511628211ULL;
        }
        if (!in) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

}  // namespace dr::nn
