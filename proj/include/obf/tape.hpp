// Reverse-mode automatic differentiation on Eigen matrices. A Tape records
// one forward pass as a sequence of nodes (creation order is topological);
// backward() walks the record in reverse. Recurrent cells, convolution,
// and the normalization layers are fused ops with analytic backward rules,
// which keeps tapes short enough to train sequence models at full length.
//
// Gradients flow into a caller-owned GradBuffer keyed by parameter index,
// so concurrent tapes over different samples never contend on parameters.

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace obf::nn {

using Mat = Eigen::MatrixXd;

struct Param {
    std::string name;
    Mat value;
    int index = -1;  // position in the owning registry
};

/// Ordered set of all trainable parameters of a model. Registration order
/// is the update order and the checkpoint order.
class ParamRegistry {
public:
    void add(Param& p) {
        p.index = static_cast<int>(params_.size());
        params_.push_back(&p);
    }
    /// Borrow another registry's parameters (their indices now point here;
    /// call reindex() on the owners when the session ends).
    void add_all(ParamRegistry& other) {
        for (Param* p : other.params_) add(*p);
    }
    /// Restore indices to this registry's own ordering.
    void reindex() {
        for (std::size_t i = 0; i < params_.size(); ++i)
            params_[i]->index = static_cast<int>(i);
    }
    const std::vector<Param*>& params() const { return params_; }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (auto* p : params_) n += static_cast<std::size_t>(p->value.size());
        return n;
    }

private:
    std::vector<Param*> params_;
};

struct GradBuffer {
    std::vector<Mat> g;

    void reset(const ParamRegistry& reg) {
        g.resize(reg.params().size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Mat& v = reg.params()[i]->value;
            g[i] = Mat::Zero(v.rows(), v.cols());
        }
    }
    void accumulate(const GradBuffer& other) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += other.g[i];
    }
    void scale(double s) {
        for (auto& m : g) m *= s;
    }
};

enum class Op : std::uint8_t {
    kLeaf,
    kParam,
    kAdd,
    kSub,
    kCMul,
    kScale,
    kAddColVec,
    kMatmul,
    kSigmoid,
    kTanh,
    kRelu,
    kLeakyRelu,
    kAbs,
    kLog,
    kSum,
    kSumSq,
    kConcatRows,
    kConcatCols,
    kGatherRows,
    kGatherCols,
    kSliceRows,
    kSliceCols,
    kPadRows,
    kSoftmaxRows,
    kConv1d,
    kAvgPool1d,
    kRnnCell,
    kGruCell,
    kLstmCell,
    kBatchNormTrain,
    kBatchNormEval,
    kLayerNormCols,
    kDropout,
    kSoftmaxCeCols,
    kBceLogitWSum,
};

struct NodeAux {
    virtual ~NodeAux() = default;
};

struct Node {
    Op op = Op::kLeaf;
    bool requires_grad = false;
    int i0 = 0, i1 = 0;
    double d0 = 0.0;
    Node* in[6] = {nullptr, nullptr, nullptr, nullptr, nullptr, nullptr};
    const Param* pref = nullptr;
    Mat value;
    Mat grad;  // lazily allocated during backward
    std::unique_ptr<NodeAux> aux;
};

class Tape {
public:
    /// With grads disabled the tape still evaluates, but marks every node
    /// constant; backward over such a tape is a no-op.
    bool grad_enabled = true;

    Node* leaf(Mat v);
    /// Differentiable leaf: backward leaves its gradient on the node so a
    /// caller can route it into another tape (checkpoint-style stitching).
    Node* input(Mat v);
    Node* param(const Param& p);

    Node* add(Node* a, Node* b);
    Node* sub(Node* a, Node* b);
    Node* cmul(Node* a, Node* b);
    Node* scale(Node* a, double s);
    Node* add_colvec(Node* x, Node* v);  // v broadcast over columns
    Node* matmul(Node* a, Node* b, bool ta = false, bool tb = false);
    Node* affine(const Param& w, Node* x, const Param& b);  // w*x + b (bias broadcast)

    Node* sigmoid(Node* a);
    Node* tanh_(Node* a);
    Node* relu(Node* a);
    Node* leaky_relu(Node* a, double slope);
    Node* abs_(Node* a);
    Node* log_(Node* a);

    Node* sum(Node* a);
    Node* sumsq(Node* a);
    Node* mean(Node* a);

    Node* concat_rows(Node* a, Node* b);
    Node* concat_cols(Node* a, Node* b);
    /// N-ary stacking; linear in total size (unlike a concat chain).
    Node* gather_rows(const std::vector<Node*>& parts);
    Node* gather_cols(const std::vector<Node*>& parts);
    Node* slice_rows(Node* a, int r0, int n);
    Node* slice_cols(Node* a, int c0, int n);
    Node* pad_rows(Node* a, int total_rows);  // zero rows appended below

    /// Row-wise softmax of (a + mask); mask may be null.
    Node* softmax_rows(Node* a, const Mat* additive_mask = nullptr);

    /// x: Cin x T, w: Cout x (Cin*k), same padding; kernel must be odd.
    Node* conv1d(Node* x, Node* w, Node* b, int kernel);
    Node* avg_pool1d(Node* x, int window);

    /// h' for a tanh RNN cell. wih: H x I, whh: H x H, biases H x 1.
    Node* rnn_cell(Node* x, Node* h, Node* wih, Node* whh, Node* bih, Node* bhh);
    /// Gate layout [r; z; n], PyTorch convention (two bias vectors).
    Node* gru_cell(Node* x, Node* h, Node* wih, Node* whh, Node* bih, Node* bhh);
    /// State is stacked [h; c] (2H x 1); gate layout [i; f; g; o].
    Node* lstm_cell(Node* x, Node* hc, Node* wih, Node* whh, Node* bih, Node* bhh);

    /// x: F x B, normalized per feature row over the batch. Batch mean/var
    /// are exposed via bn_batch_stats() for running-average updates.
    Node* batch_norm_train(Node* x, Node* gamma, Node* beta, double eps);
    Node* batch_norm_eval(Node* x, Node* gamma, Node* beta, const Mat& running_mean,
                          const Mat& running_var, double eps);
    static void bn_batch_stats(const Node* bn_node, Mat& mean_out, Mat& var_out);

    /// x: F x T, normalized per column over features.
    Node* layer_norm_cols(Node* x, Node* gamma, Node* beta, double eps);

    Node* dropout(Node* x, const Mat& keep_mask);  // mask entries 0 or 1/(1-p)

    /// logits: C x B; mean cross-entropy over columns against class labels.
    Node* softmax_ce_cols(Node* logits, std::vector<int> labels);

    /// sum_i w_i * [y_i*softplus(-z_i) + (1-y_i)*softplus(z_i)], stable BCE
    /// on logits. targets/weights must match z's shape.
    Node* bce_logit_wsum(Node* z, Mat targets, Mat weights);

    /// Seeds root with grad 1 and propagates in reverse creation order.
    /// Parameter gradients are accumulated into sink.
    void backward(Node* root, GradBuffer& sink);

    /// Propagates from an interior node seeded with an explicit gradient
    /// (used to continue a backward pass that crossed tape boundaries).
    void backward_from(Node* node, const Mat& seed, GradBuffer& sink);

    std::size_t size() const { return nodes_.size(); }

private:
    Node* make(Op op, Node* a = nullptr, Node* b = nullptr, Node* c = nullptr, Node* d = nullptr,
               Node* e = nullptr, Node* f = nullptr);
    void backward_node(Node* n, GradBuffer& sink);

    std::deque<Node> nodes_;
    std::unordered_map<const Param*, Node*> param_nodes_;
};

// Stable scalar helpers shared by ops and plain loss code.
double sigmoid_scalar(double x);
double softplus_scalar(double x);

}  // namespace obf::nn
