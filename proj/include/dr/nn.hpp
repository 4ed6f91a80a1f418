#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dr/errors.hpp"
#include "dr/rng.hpp"

namespace dr::nn {

using Mat = Eigen::MatrixXd;

// A named trainable matrix with Adam state.
struct Param {
    std::string name;
    Mat value;
    Mat grad;
    Mat adam_m;
    Mat adam_v;

    Param() = default;
    Param(std::string n, int rows, int cols)
        : name(std::move(n)),
          value(Mat::Zero(rows, cols)),
          grad(Mat::Zero(rows, cols)),
          adam_m(Mat::Zero(rows, cols)),
          adam_v(Mat::Zero(rows, cols)) {}

    void init_uniform(Rng& rng, double scale) {
        for (int i = 0; i < value.rows(); ++i)
            for (int j = 0; j < value.cols(); ++j)
                value(i, j) = (rng.uniform() * 2.0 - 1.0) * scale;
    }
    void zero_grad() { grad.setZero(); }
};

struct Node;
using NodeFn = std::function<void(Node&)>;

// One tape entry. `val` is the forward value, `grad` accumulates upstream
// gradients during the backward sweep.
struct Node {
    Mat val;
    Mat grad;
    bool needs_grad = false;
    NodeFn back;               // pushes this->grad into parents / param
    Param* param = nullptr;    // set for parameter leaves
};

// Dynamic computation graph. Nodes are created in topological order, so the
// backward sweep is a reverse iteration.
class Graph {
public:
    Node* leaf(const Mat& v, bool needs_grad = false) {
        Node* n = alloc();
        n->val = v;
        n->needs_grad = needs_grad;
        return n;
    }

    Node* param(Param& p) {
        Node* n = alloc();
        n->val = p.value;
        n->needs_grad = true;
        n->param = &p;
        return n;
    }

    Node* make(Mat v, bool needs_grad, NodeFn back) {
        Node* n = alloc();
        n->val = std::move(v);
        n->needs_grad = needs_grad;
        n->back = std::move(back);
        return n;
    }

    // Backpropagate from a scalar (1x1) loss node.
    void backward(Node* loss);

    size_t size() const { return nodes_.size(); }

private:
    Node* alloc() {
        nodes_.push_back(std::make_unique<Node>());
        return nodes_.back().get();
    }
    std::vector<std::unique_ptr<Node>> nodes_;
};

void accumulate(Node* n, const Mat& g);

// ---- ops ----
Node* matmul(Graph& g, Node* a, Node* b);            // a*b
Node* matmul_nt(Graph& g, Node* a, Node* b);         // a*b^T
Node* add(Graph& g, Node* a, Node* b);               // same shape
Node* add_rowvec(Graph& g, Node* a, Node* b);        // b is 1xN, broadcast over rows
Node* sub(Graph& g, Node* a, Node* b);
Node* scale(Graph& g, Node* a, double s);
Node* hadamard(Graph& g, Node* a, Node* b);
Node* relu(Graph& g, Node* a);
Node* gelu(Graph& g, Node* a);
Node* tanh_op(Graph& g, Node* a);
Node* softmax_rows(Graph& g, Node* a);
Node* layernorm(Graph& g, Node* a, Node* gain, Node* bias);  // gain/bias 1xN
Node* slice_rows(Graph& g, Node* a, int r0, int n);
Node* slice_cols(Graph& g, Node* a, int c0, int n);
Node* concat_rows(Graph& g, const std::vector<Node*>& parts);
Node* concat_cols(Graph& g, const std::vector<Node*>& parts);
Node* gather_rows(Graph& g, Node* table, const std::vector<int>& idx);
// out(i, 0) = a(i, idx[i]) — one selected column per row.
Node* gather_cols_per_row(Graph& g, Node* a, const std::vector<int>& idx);
Node* sum_all(Graph& g, Node* a);
Node* mean_all(Graph& g, Node* a);

// Mean cross-entropy of row-wise logits against integer targets.
Node* cross_entropy_rows(Graph& g, Node* logits, const std::vector<int>& targets);

// Sum over rows of KL(q_row || p_row) where q is a constant probability
// matrix and `p` holds probabilities (not logits).
Node* kl_const_q(Graph& g, Node* p, const Mat& q);

// Mean squared error against a constant target.
Node* mse_const(Graph& g, Node* a, const Mat& target);

// p_out(row r) = mix[r]^T * probs(row r): per-row linear maps, used to push
// predicted x0 distributions through closed-form posteriors.
// mix[r] has shape (probs.cols() x out_cols).
Node* per_row_linear(Graph& g, Node* probs, const std::vector<Mat>& mix);

// Adam optimizer over a set of params.
class Adam {
public:
    explicit Adam(double lr = 1e-3, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(const std::vector<Param*>& params);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
};

// Flat named-parameter serialization (binary blob).
void save_params(const std::vector<Param*>& params, const std::string& path);
void load_params(const std::vector<Param*>& params, const std::string& path);

// FNV-1a content hash of a file, as hex. Used for checkpoint staleness checks.
std::string file_hash(const std::string& path);

// FNV-1a hash over the in-memory parameter values (names, shapes, data).
std::string params_hash(const std::vector<Param*>& params);

}  // namespace dr::nn
