#include "obf/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "obf/errors.hpp"

namespace obf::nn {

double sigmoid_scalar(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_scalar(double x) {
    // log(1 + e^x) without overflow
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

namespace {

struct GruAux : NodeAux {
    Mat r, z, n, hn_pre;
};
struct LstmAux : NodeAux {
    Mat i, f, g, o, tc;
};
struct ConvAux : NodeAux {
    Mat im2col;
};
struct BnAux : NodeAux {
    Mat xhat, invstd, mean, var;
};
struct LnAux : NodeAux {
    Mat xhat, invstd;
};
struct DropAux : NodeAux {
    Mat mask;
};
struct CeAux : NodeAux {
    Mat probs;
    std::vector<int> labels;
};
struct GatherAux : NodeAux {
    std::vector<Node*> parts;
};
struct BceAux : NodeAux {
    Mat targets, weights;
};

void add_grad(Node* n, const Mat& m) {
    if (!n || !n->requires_grad) return;
    if (n->grad.size() == 0)
        n->grad = m;
    else
        n->grad += m;
}

Mat& ensure_grad(Node* n) {
    if (n->grad.size() == 0) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
    return n->grad;
}

Mat apply_sigmoid(const Mat& x) {
    return x.unaryExpr([](double v) { return sigmoid_scalar(v); });
}

}  // namespace

Node* Tape::make(Op op, Node* a, Node* b, Node* c, Node* d, Node* e, Node* f) {
    Node& n = nodes_.emplace_back();
    n.op = op;
    n.in[0] = a;
    n.in[1] = b;
    n.in[2] = c;
    n.in[3] = d;
    n.in[4] = e;
    n.in[5] = f;
    if (grad_enabled) {
        for (Node* in : n.in)
            if (in && in->requires_grad) {
                n.requires_grad = true;
                break;
            }
    }
    return &n;
}

Node* Tape::leaf(Mat v) {
    Node* n = make(Op::kLeaf);
    n->value = std::move(v);
    return n;
}

Node* Tape::input(Mat v) {
    Node* n = make(Op::kLeaf);
    n->value = std::move(v);
    n->requires_grad = grad_enabled;
    return n;
}

Node* Tape::param(const Param& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Node* n = make(Op::kParam);
    n->value = p.value;
    n->pref = &p;
    n->requires_grad = grad_enabled;
    param_nodes_.emplace(&p, n);
    return n;
}

Node* Tape::add(Node* a, Node* b) {
    Node* n = make(Op::kAdd, a, b);
    n->value = a->value + b->value;
    return n;
}

Node* Tape::sub(Node* a, Node* b) {
    Node* n = make(Op::kSub, a, b);
    n->value = a->value - b->value;
    return n;
}

Node* Tape::cmul(Node* a, Node* b) {
    Node* n = make(Op::kCMul, a, b);
    n->value = a->value.cwiseProduct(b->value);
    return n;
}

Node* Tape::scale(Node* a, double s) {
    Node* n = make(Op::kScale, a);
    n->d0 = s;
    n->value = a->value * s;
    return n;
}

Node* Tape::add_colvec(Node* x, Node* v) {
    Node* n = make(Op::kAddColVec, x, v);
    n->value = x->value.colwise() + Eigen::VectorXd(v->value.col(0));
    return n;
}

Node* Tape::matmul(Node* a, Node* b, bool ta, bool tb) {
    Node* n = make(Op::kMatmul, a, b);
    n->i0 = ta ? 1 : 0;
    n->i1 = tb ? 1 : 0;
    if (!ta && !tb)
        n->value.noalias() = a->value * b->value;
    else if (ta && !tb)
        n->value.noalias() = a->value.transpose() * b->value;
    else if (!ta && tb)
        n->value.noalias() = a->value * b->value.transpose();
    else
        n->value.noalias() = a->value.transpose() * b->value.transpose();
    return n;
}

Node* Tape::affine(const Param& w, Node* x, const Param& b) {
    return add_colvec(matmul(param(w), x), param(b));
}

Node* Tape::sigmoid(Node* a) {
    Node* n = make(Op::kSigmoid, a);
    n->value = apply_sigmoid(a->value);
    return n;
}

Node* Tape::tanh_(Node* a) {
    Node* n = make(Op::kTanh, a);
    n->value = a->value.array().tanh();
    return n;
}

Node* Tape::relu(Node* a) {
    Node* n = make(Op::kRelu, a);
    n->value = a->value.cwiseMax(0.0);
    return n;
}

Node* Tape::leaky_relu(Node* a, double slope) {
    Node* n = make(Op::kLeakyRelu, a);
    n->d0 = slope;
    n->value = a->value.unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
    return n;
}

Node* Tape::abs_(Node* a) {
    Node* n = make(Op::kAbs, a);
    n->value = a->value.cwiseAbs();
    return n;
}

Node* Tape::log_(Node* a) {
    Node* n = make(Op::kLog, a);
    n->value = a->value.array().log();
    return n;
}

Node* Tape::sum(Node* a) {
    Node* n = make(Op::kSum, a);
    n->value = Mat::Constant(1, 1, a->value.sum());
    return n;
}

Node* Tape::sumsq(Node* a) {
    Node* n = make(Op::kSumSq, a);
    n->value = Mat::Constant(1, 1, a->value.squaredNorm());
    return n;
}

Node* Tape::mean(Node* a) {
    return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

Node* Tape::concat_rows(Node* a, Node* b) {
    Node* n = make(Op::kConcatRows, a, b);
    n->value.resize(a->value.rows() + b->value.rows(), a->value.cols());
    n->value.topRows(a->value.rows()) = a->value;
    n->value.bottomRows(b->value.rows()) = b->value;
    return n;
}

Node* Tape::concat_cols(Node* a, Node* b) {
    Node* n = make(Op::kConcatCols, a, b);
    n->value.resize(a->value.rows(), a->value.cols() + b->value.cols());
    n->value.leftCols(a->value.cols()) = a->value;
    n->value.rightCols(b->value.cols()) = b->value;
    return n;
}

Node* Tape::gather_rows(const std::vector<Node*>& parts) {
    if (parts.empty()) throw NumericalError("gather_rows: no parts");
    Node* n = make(Op::kGatherRows);
    Eigen::Index rows = 0;
    for (Node* p : parts) rows += p->value.rows();
    n->value.resize(rows, parts[0]->value.cols());
    Eigen::Index r = 0;
    for (Node* p : parts) {
        n->value.middleRows(r, p->value.rows()) = p->value;
        r += p->value.rows();
        if (grad_enabled && p->requires_grad) n->requires_grad = true;
    }
    auto aux = std::make_unique<GatherAux>();
    aux->parts = parts;
    n->aux = std::move(aux);
    return n;
}

Node* Tape::gather_cols(const std::vector<Node*>& parts) {
    if (parts.empty()) throw NumericalError("gather_cols: no parts");
    Node* n = make(Op::kGatherCols);
    Eigen::Index cols = 0;
    for (Node* p : parts) cols += p->value.cols();
    n->value.resize(parts[0]->value.rows(), cols);
    Eigen::Index c = 0;
    for (Node* p : parts) {
        n->value.middleCols(c, p->value.cols()) = p->value;
        c += p->value.cols();
        if (grad_enabled && p->requires_grad) n->requires_grad = true;
    }
    auto aux = std::make_unique<GatherAux>();
    aux->parts = parts;
    n->aux = std::move(aux);
    return n;
}

Node* Tape::slice_rows(Node* a, int r0, int nrows) {
    Node* n = make(Op::kSliceRows, a);
    n->i0 = r0;
    n->i1 = nrows;
    n->value = a->value.middleRows(r0, nrows);
    return n;
}

Node* Tape::slice_cols(Node* a, int c0, int ncols) {
    Node* n = make(Op::kSliceCols, a);
    n->i0 = c0;
    n->i1 = ncols;
    n->value = a->value.middleCols(c0, ncols);
    return n;
}

Node* Tape::pad_rows(Node* a, int total_rows) {
    Node* n = make(Op::kPadRows, a);
    n->value = Mat::Zero(total_rows, a->value.cols());
    n->value.topRows(a->value.rows()) = a->value;
    return n;
}

Node* Tape::softmax_rows(Node* a, const Mat* additive_mask) {
    Node* n = make(Op::kSoftmaxRows, a);
    Mat z = a->value;
    if (additive_mask) z += *additive_mask;
    n->value.resize(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        Eigen::RowVectorXd e = (z.row(r).array() - m).exp();
        n->value.row(r) = e / e.sum();
    }
    return n;
}

Node* Tape::conv1d(Node* x, Node* w, Node* b, int kernel) {
    if (kernel % 2 == 0) throw NumericalError("conv1d kernel must be odd");
    const int cin = static_cast<int>(x->value.rows());
    const int t = static_cast<int>(x->value.cols());
    if (t < kernel) throw NumericalError("conv1d: sequence shorter than kernel");
    const int pad = (kernel - 1) / 2;

    Node* n = make(Op::kConv1d, x, w, b);
    n->i0 = kernel;
    auto aux = std::make_unique<ConvAux>();
    aux->im2col = Mat::Zero(cin * kernel, t);
    for (int j = 0; j < t; ++j)
        for (int kk = 0; kk < kernel; ++kk) {
            const int src = j - pad + kk;
            if (src < 0 || src >= t) continue;
            for (int ic = 0; ic < cin; ++ic)
                aux->im2col(ic * kernel + kk, j) = x->value(ic, src);
        }
    n->value.noalias() = w->value * aux->im2col;
    n->value.colwise() += Eigen::VectorXd(b->value.col(0));
    n->aux = std::move(aux);
    return n;
}

Node* Tape::avg_pool1d(Node* x, int window) {
    const int t = static_cast<int>(x->value.cols());
    const int out_t = t / window;
    if (out_t < 1) throw NumericalError("avg_pool1d: sequence shorter than window");
    Node* n = make(Op::kAvgPool1d, x);
    n->i0 = window;
    n->value = Mat::Zero(x->value.rows(), out_t);
    for (int j = 0; j < out_t; ++j) {
        for (int m = 0; m < window; ++m) n->value.col(j) += x->value.col(j * window + m);
        n->value.col(j) /= static_cast<double>(window);
    }
    return n;
}

Node* Tape::rnn_cell(Node* x, Node* h, Node* wih, Node* whh, Node* bih, Node* bhh) {
    Node* n = make(Op::kRnnCell, x, h, wih, whh, bih, bhh);
    n->value = (wih->value * x->value + bih->value + whh->value * h->value + bhh->value)
                   .array()
                   .tanh();
    return n;
}

Node* Tape::gru_cell(Node* x, Node* h, Node* wih, Node* whh, Node* bih, Node* bhh) {
    const int hid = static_cast<int>(h->value.rows());
    Node* n = make(Op::kGruCell, x, h, wih, whh, bih, bhh);
    auto aux = std::make_unique<GruAux>();

    Mat gi = wih->value * x->value + bih->value;  // 3H x 1
    Mat gh = whh->value * h->value + bhh->value;
    aux->r = apply_sigmoid(gi.topRows(hid) + gh.topRows(hid));
    aux->z = apply_sigmoid(gi.middleRows(hid, hid) + gh.middleRows(hid, hid));
    aux->hn_pre = gh.bottomRows(hid);
    aux->n = (gi.bottomRows(hid) + aux->r.cwiseProduct(aux->hn_pre)).array().tanh();
    n->value = (Mat::Ones(hid, 1) - aux->z).cwiseProduct(aux->n) + aux->z.cwiseProduct(h->value);
    n->aux = std::move(aux);
    return n;
}

Node* Tape::lstm_cell(Node* x, Node* hc, Node* wih, Node* whh, Node* bih, Node* bhh) {
    const int hid = static_cast<int>(hc->value.rows()) / 2;
    Node* n = make(Op::kLstmCell, x, hc, wih, whh, bih, bhh);
    auto aux = std::make_unique<LstmAux>();

    const Mat h = hc->value.topRows(hid);
    const Mat c = hc->value.bottomRows(hid);
    Mat pre = wih->value * x->value + bih->value + whh->value * h + bhh->value;  // 4H x 1
    aux->i = apply_sigmoid(pre.topRows(hid));
    aux->f = apply_sigmoid(pre.middleRows(hid, hid));
    aux->g = pre.middleRows(2 * hid, hid).array().tanh();
    aux->o = apply_sigmoid(pre.bottomRows(hid));
    Mat c_new = aux->f.cwiseProduct(c) + aux->i.cwiseProduct(aux->g);
    aux->tc = c_new.array().tanh();
    n->value.resize(2 * hid, 1);
    n->value.topRows(hid) = aux->o.cwiseProduct(aux->tc);
    n->value.bottomRows(hid) = c_new;
    n->aux = std::move(aux);
    return n;
}

Node* Tape::batch_norm_train(Node* x, Node* gamma, Node* beta, double eps) {
    const Eigen::Index b = x->value.cols();
    if (b < 2) throw NumericalError("batch_norm_train: batch size must be >= 2");
    Node* n = make(Op::kBatchNormTrain, x, gamma, beta);
    auto aux = std::make_unique<BnAux>();
    aux->mean = x->value.rowwise().mean();
    Mat centered = x->value.colwise() - Eigen::VectorXd(aux->mean.col(0));
    aux->var = centered.array().square().matrix().rowwise().mean();
    aux->invstd = (aux->var.array() + eps).rsqrt();
    aux->xhat = centered.array().colwise() * aux->invstd.col(0).array();
    n->value = (aux->xhat.array().colwise() * gamma->value.col(0).array()).matrix().colwise() +
               Eigen::VectorXd(beta->value.col(0));
    n->aux = std::move(aux);
    return n;
}

Node* Tape::batch_norm_eval(Node* x, Node* gamma, Node* beta, const Mat& running_mean,
                            const Mat& running_var, double eps) {
    Node* n = make(Op::kBatchNormEval, x, gamma, beta);
    auto aux = std::make_unique<BnAux>();
    aux->invstd = (running_var.array() + eps).rsqrt();
    Mat centered = x->value.colwise() - Eigen::VectorXd(running_mean.col(0));
    aux->xhat = centered.array().colwise() * aux->invstd.col(0).array();
    n->value = (aux->xhat.array().colwise() * gamma->value.col(0).array()).matrix().colwise() +
               Eigen::VectorXd(beta->value.col(0));
    n->aux = std::move(aux);
    return n;
}

void Tape::bn_batch_stats(const Node* bn_node, Mat& mean_out, Mat& var_out) {
    const auto* aux = dynamic_cast<const BnAux*>(bn_node->aux.get());
    if (!aux) throw NumericalError("bn_batch_stats: not a batch-norm node");
    mean_out = aux->mean;
    var_out = aux->var;
}

Node* Tape::layer_norm_cols(Node* x, Node* gamma, Node* beta, double eps) {
    Node* n = make(Op::kLayerNormCols, x, gamma, beta);
    auto aux = std::make_unique<LnAux>();
    Mat mean = x->value.colwise().mean();
    Mat centered = x->value.rowwise() - Eigen::RowVectorXd(mean.row(0));
    Mat var = centered.array().square().matrix().colwise().mean();
    aux->invstd = (var.array() + eps).rsqrt();
    aux->xhat = centered.array().rowwise() * aux->invstd.row(0).array();
    n->value = (aux->xhat.array().colwise() * gamma->value.col(0).array()).matrix().colwise() +
               Eigen::VectorXd(beta->value.col(0));
    n->aux = std::move(aux);
    return n;
}

Node* Tape::dropout(Node* x, const Mat& keep_mask) {
    Node* n = make(Op::kDropout, x);
    auto aux = std::make_unique<DropAux>();
    aux->mask = keep_mask;
    n->value = x->value.cwiseProduct(keep_mask);
    n->aux = std::move(aux);
    return n;
}

Node* Tape::softmax_ce_cols(Node* logits, std::vector<int> labels) {
    const Eigen::Index c = logits->value.rows();
    const Eigen::Index b = logits->value.cols();
    if (static_cast<Eigen::Index>(labels.size()) != b)
        throw NumericalError("softmax_ce_cols: label count mismatch");
    Node* n = make(Op::kSoftmaxCeCols, logits);
    auto aux = std::make_unique<CeAux>();
    aux->probs.resize(c, b);
    double loss = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
        const double m = logits->value.col(j).maxCoeff();
        Eigen::ArrayXd e = (logits->value.col(j).array() - m).exp();
        const double s = e.sum();
        aux->probs.col(j) = e / s;
        loss += m + std::log(s) - logits->value(labels[j], j);
    }
    n->value = Mat::Constant(1, 1, loss / static_cast<double>(b));
    aux->labels = std::move(labels);
    n->aux = std::move(aux);
    return n;
}

Node* Tape::bce_logit_wsum(Node* z, Mat targets, Mat weights) {
    Node* n = make(Op::kBceLogitWSum, z);
    auto aux = std::make_unique<BceAux>();
    double loss = 0.0;
    for (Eigen::Index j = 0; j < z->value.size(); ++j) {
        const double zv = z->value(j);
        const double y = targets(j);
        loss += weights(j) * (y * softplus_scalar(-zv) + (1.0 - y) * softplus_scalar(zv));
    }
    n->value = Mat::Constant(1, 1, loss);
    aux->targets = std::move(targets);
    aux->weights = std::move(weights);
    n->aux = std::move(aux);
    return n;
}

void Tape::backward(Node* root, GradBuffer& sink) {
    if (root->value.size() != 1) throw NumericalError("backward: root must be scalar");
    backward_from(root, Mat::Constant(1, 1, 1.0), sink);
}

void Tape::backward_from(Node* node, const Mat& seed, GradBuffer& sink) {
    if (!node->requires_grad) return;
    if (node->grad.size() == 0)
        node->grad = seed;
    else
        node->grad += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = &*it;
        if (!n->requires_grad || n->grad.size() == 0) continue;
        backward_node(n, sink);
    }
}

void Tape::backward_node(Node* n, GradBuffer& sink) {
    const Mat& g = n->grad;
    switch (n->op) {
        case Op::kLeaf:
            break;
        case Op::kParam:
            sink.g[static_cast<std::size_t>(n->pref->index)] += g;
            break;
        case Op::kAdd:
            add_grad(n->in[0], g);
            add_grad(n->in[1], g);
            break;
        case Op::kSub:
            add_grad(n->in[0], g);
            if (n->in[1] && n->in[1]->requires_grad) ensure_grad(n->in[1]) -= g;
            break;
        case Op::kCMul:
            add_grad(n->in[0], g.cwiseProduct(n->in[1]->value));
            add_grad(n->in[1], g.cwiseProduct(n->in[0]->value));
            break;
        case Op::kScale:
            add_grad(n->in[0], g * n->d0);
            break;
        case Op::kAddColVec:
            add_grad(n->in[0], g);
            add_grad(n->in[1], g.rowwise().sum());
            break;
        case Op::kMatmul: {
            Node* a = n->in[0];
            Node* b = n->in[1];
            const bool ta = n->i0, tb = n->i1;
            if (a->requires_grad) {
                Mat da;
                if (!ta)
                    da.noalias() = tb ? Mat(g * b->value) : Mat(g * b->value.transpose());
                else
                    da.noalias() = tb ? Mat(b->value.transpose() * g.transpose())
                                      : Mat(b->value * g.transpose());
                add_grad(a, da);
            }
            if (b->requires_grad) {
                Mat db;
                if (!tb)
                    db.noalias() = ta ? Mat(a->value * g) : Mat(a->value.transpose() * g);
                else
                    db.noalias() = ta ? Mat(g.transpose() * a->value.transpose())
                                      : Mat(g.transpose() * a->value);
                add_grad(b, db);
            }
            break;
        }
        case Op::kSigmoid:
            add_grad(n->in[0],
                     Mat(g.array() * n->value.array() * (1.0 - n->value.array())));
            break;
        case Op::kTanh:
            add_grad(n->in[0], g.cwiseProduct(Mat(1.0 - n->value.array().square())));
            break;
        case Op::kRelu:
            add_grad(n->in[0], g.cwiseProduct(Mat((n->in[0]->value.array() > 0.0).cast<double>())));
            break;
        case Op::kLeakyRelu: {
            const double slope = n->d0;
            Mat factor = n->in[0]->value.unaryExpr(
                [slope](double v) { return v > 0.0 ? 1.0 : slope; });
            add_grad(n->in[0], g.cwiseProduct(factor));
            break;
        }
        case Op::kAbs:
            add_grad(n->in[0], g.cwiseProduct(n->in[0]->value.unaryExpr([](double v) {
                return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            })));
            break;
        case Op::kLog:
            add_grad(n->in[0], g.cwiseQuotient(n->in[0]->value));
            break;
        case Op::kSum:
            if (n->in[0]->requires_grad)
                ensure_grad(n->in[0]).array() += g(0, 0);
            break;
        case Op::kSumSq:
            add_grad(n->in[0], 2.0 * g(0, 0) * n->in[0]->value);
            break;
        case Op::kConcatRows: {
            const Eigen::Index ra = n->in[0]->value.rows();
            const Eigen::Index rb = n->in[1]->value.rows();
            add_grad(n->in[0], g.topRows(ra));
            add_grad(n->in[1], g.bottomRows(rb));
            break;
        }
        case Op::kConcatCols: {
            const Eigen::Index ca = n->in[0]->value.cols();
            const Eigen::Index cb = n->in[1]->value.cols();
            add_grad(n->in[0], g.leftCols(ca));
            add_grad(n->in[1], g.rightCols(cb));
            break;
        }
        case Op::kGatherRows: {
            const auto* aux = static_cast<const GatherAux*>(n->aux.get());
            Eigen::Index r = 0;
            for (Node* p : aux->parts) {
                add_grad(p, g.middleRows(r, p->value.rows()));
                r += p->value.rows();
            }
            break;
        }
        case Op::kGatherCols: {
            const auto* aux = static_cast<const GatherAux*>(n->aux.get());
            Eigen::Index c = 0;
            for (Node* p : aux->parts) {
                add_grad(p, g.middleCols(c, p->value.cols()));
                c += p->value.cols();
            }
            break;
        }
        case Op::kSliceRows:
            if (n->in[0]->requires_grad)
                ensure_grad(n->in[0]).middleRows(n->i0, n->i1) += g;
            break;
        case Op::kSliceCols:
            if (n->in[0]->requires_grad)
                ensure_grad(n->in[0]).middleCols(n->i0, n->i1) += g;
            break;
        case Op::kPadRows:
            add_grad(n->in[0], g.topRows(n->in[0]->value.rows()));
            break;
        case Op::kSoftmaxRows: {
            if (!n->in[0]->requires_grad) break;
            Mat dx(n->value.rows(), n->value.cols());
            for (Eigen::Index r = 0; r < n->value.rows(); ++r) {
                const double dot = g.row(r).cwiseProduct(n->value.row(r)).sum();
                dx.row(r) = n->value.row(r).array() * (g.row(r).array() - dot);
            }
            add_grad(n->in[0], dx);
            break;
        }
        case Op::kConv1d: {
            const auto* aux = static_cast<const ConvAux*>(n->aux.get());
            Node* x = n->in[0];
            Node* w = n->in[1];
            Node* b = n->in[2];
            if (w->requires_grad) add_grad(w, Mat(g * aux->im2col.transpose()));
            if (b->requires_grad) add_grad(b, g.rowwise().sum());
            if (x->requires_grad) {
                const int kernel = n->i0;
                const int pad = (kernel - 1) / 2;
                const int cin = static_cast<int>(x->value.rows());
                const int t = static_cast<int>(x->value.cols());
                Mat dcol;
                dcol.noalias() = w->value.transpose() * g;  // (cin*k) x t
                Mat& dx = ensure_grad(x);
                for (int j = 0; j < t; ++j)
                    for (int kk = 0; kk < kernel; ++kk) {
                        const int src = j - pad + kk;
                        if (src < 0 || src >= t) continue;
                        for (int ic = 0; ic < cin; ++ic)
                            dx(ic, src) += dcol(ic * kernel + kk, j);
                    }
            }
            break;
        }
        case Op::kAvgPool1d: {
            if (!n->in[0]->requires_grad) break;
            const int window = n->i0;
            Mat& dx = ensure_grad(n->in[0]);
            for (Eigen::Index j = 0; j < n->value.cols(); ++j)
                for (int m = 0; m < window; ++m)
                    dx.col(j * window + m) += g.col(j) / static_cast<double>(window);
            break;
        }
        case Op::kRnnCell: {
            Node* x = n->in[0];
            Node* h = n->in[1];
            Node *wih = n->in[2], *whh = n->in[3], *bih = n->in[4], *bhh = n->in[5];
            Mat da = g.cwiseProduct(Mat(1.0 - n->value.array().square()));
            if (wih->requires_grad) add_grad(wih, Mat(da * x->value.transpose()));
            if (whh->requires_grad) add_grad(whh, Mat(da * h->value.transpose()));
            add_grad(bih, da);
            add_grad(bhh, da);
            if (x->requires_grad) add_grad(x, Mat(wih->value.transpose() * da));
            if (h->requires_grad) add_grad(h, Mat(whh->value.transpose() * da));
            break;
        }
        case Op::kGruCell: {
            const auto* aux = static_cast<const GruAux*>(n->aux.get());
            Node* x = n->in[0];
            Node* h = n->in[1];
            Node *wih = n->in[2], *whh = n->in[3], *bih = n->in[4], *bhh = n->in[5];
            const int hid = static_cast<int>(n->value.rows());
            const Mat ones = Mat::Ones(hid, 1);

            Mat dz = g.cwiseProduct(h->value - aux->n);
            Mat dn = g.cwiseProduct(ones - aux->z);
            Mat dn_raw = dn.cwiseProduct(Mat(1.0 - aux->n.array().square()));
            Mat dr = dn_raw.cwiseProduct(aux->hn_pre);
            Mat dhn = dn_raw.cwiseProduct(aux->r);
            Mat dz_raw = dz.cwiseProduct(aux->z).cwiseProduct(ones - aux->z);
            Mat dr_raw = dr.cwiseProduct(aux->r).cwiseProduct(ones - aux->r);

            Mat stack_i(3 * hid, 1), stack_h(3 * hid, 1);
            stack_i << dr_raw, dz_raw, dn_raw;
            stack_h << dr_raw, dz_raw, dhn;

            if (wih->requires_grad) add_grad(wih, Mat(stack_i * x->value.transpose()));
            if (whh->requires_grad) add_grad(whh, Mat(stack_h * h->value.transpose()));
            add_grad(bih, stack_i);
            add_grad(bhh, stack_h);
            if (x->requires_grad) add_grad(x, Mat(wih->value.transpose() * stack_i));
            if (h->requires_grad)
                add_grad(h, Mat(whh->value.transpose() * stack_h + g.cwiseProduct(aux->z)));
            break;
        }
        case Op::kLstmCell: {
            const auto* aux = static_cast<const LstmAux*>(n->aux.get());
            Node* x = n->in[0];
            Node* hc = n->in[1];
            Node *wih = n->in[2], *whh = n->in[3], *bih = n->in[4], *bhh = n->in[5];
            const int hid = static_cast<int>(n->value.rows()) / 2;
            const Mat ones = Mat::Ones(hid, 1);

            const Mat h_prev = hc->value.topRows(hid);
            const Mat c_prev = hc->value.bottomRows(hid);
            const Mat gh = g.topRows(hid);
            const Mat gc = g.bottomRows(hid);

            Mat do_ = gh.cwiseProduct(aux->tc);
            Mat dc_tot = gc + gh.cwiseProduct(aux->o).cwiseProduct(
                                  Mat(1.0 - aux->tc.array().square()));
            Mat df = dc_tot.cwiseProduct(c_prev);
            Mat dc_prev = dc_tot.cwiseProduct(aux->f);
            Mat di = dc_tot.cwiseProduct(aux->g);
            Mat dg = dc_tot.cwiseProduct(aux->i);

            Mat stack(4 * hid, 1);
            stack.topRows(hid) = di.cwiseProduct(aux->i).cwiseProduct(ones - aux->i);
            stack.middleRows(hid, hid) = df.cwiseProduct(aux->f).cwiseProduct(ones - aux->f);
            stack.middleRows(2 * hid, hid) = dg.cwiseProduct(Mat(1.0 - aux->g.array().square()));
            stack.bottomRows(hid) = do_.cwiseProduct(aux->o).cwiseProduct(ones - aux->o);

            if (wih->requires_grad) add_grad(wih, Mat(stack * x->value.transpose()));
            if (whh->requires_grad) add_grad(whh, Mat(stack * h_prev.transpose()));
            add_grad(bih, stack);
            add_grad(bhh, stack);
            if (x->requires_grad) add_grad(x, Mat(wih->value.transpose() * stack));
            if (hc->requires_grad) {
                Mat dhc(2 * hid, 1);
                dhc.topRows(hid) = whh->value.transpose() * stack;
                dhc.bottomRows(hid) = dc_prev;
                add_grad(hc, dhc);
            }
            break;
        }
        case Op::kBatchNormTrain: {
            const auto* aux = static_cast<const BnAux*>(n->aux.get());
            Node* x = n->in[0];
            Node* gamma = n->in[1];
            Node* beta = n->in[2];
            if (gamma->requires_grad)
                add_grad(gamma, g.cwiseProduct(aux->xhat).rowwise().sum());
            if (beta->requires_grad) add_grad(beta, g.rowwise().sum());
            if (x->requires_grad) {
                const double b = static_cast<double>(x->value.cols());
                Mat dxhat = g.array().colwise() * gamma->value.col(0).array();
                Mat sum_dxhat = dxhat.rowwise().sum();
                Mat sum_dxhat_xhat = dxhat.cwiseProduct(aux->xhat).rowwise().sum();
                Mat dx = (b * dxhat.array() - sum_dxhat.col(0).array().replicate(1, x->value.cols()) -
                          aux->xhat.array() *
                              sum_dxhat_xhat.col(0).array().replicate(1, x->value.cols()));
                dx = (dx.array().colwise() * aux->invstd.col(0).array() / b).matrix();
                add_grad(x, dx);
            }
            break;
        }
        case Op::kBatchNormEval: {
            const auto* aux = static_cast<const BnAux*>(n->aux.get());
            Node* x = n->in[0];
            Node* gamma = n->in[1];
            Node* beta = n->in[2];
            if (gamma->requires_grad)
                add_grad(gamma, g.cwiseProduct(aux->xhat).rowwise().sum());
            if (beta->requires_grad) add_grad(beta, g.rowwise().sum());
            if (x->requires_grad) {
                Mat dx = (g.array().colwise() *
                          (gamma->value.col(0).array() * aux->invstd.col(0).array()))
                             .matrix();
                add_grad(x, dx);
            }
            break;
        }
        case Op::kLayerNormCols: {
            const auto* aux = static_cast<const LnAux*>(n->aux.get());
            Node* x = n->in[0];
            Node* gamma = n->in[1];
            Node* beta = n->in[2];
            if (gamma->requires_grad)
                add_grad(gamma, g.cwiseProduct(aux->xhat).rowwise().sum());
            if (beta->requires_grad) add_grad(beta, g.rowwise().sum());
            if (x->requires_grad) {
                Mat dxhat = g.array().colwise() * gamma->value.col(0).array();
                Mat mean_dxhat = dxhat.colwise().mean();
                Mat mean_dx_xhat = dxhat.cwiseProduct(aux->xhat).colwise().mean();
                Mat dx = dxhat.rowwise() - Eigen::RowVectorXd(mean_dxhat.row(0));
                dx -= (aux->xhat.array().rowwise() * mean_dx_xhat.row(0).array()).matrix();
                dx = (dx.array().rowwise() * aux->invstd.row(0).array()).matrix();
                add_grad(x, dx);
            }
            break;
        }
        case Op::kDropout: {
            const auto* aux = static_cast<const DropAux*>(n->aux.get());
            add_grad(n->in[0], g.cwiseProduct(aux->mask));
            break;
        }
        case Op::kSoftmaxCeCols: {
            const auto* aux = static_cast<const CeAux*>(n->aux.get());
            if (!n->in[0]->requires_grad) break;
            Mat dz = aux->probs;
            for (std::size_t j = 0; j < aux->labels.size(); ++j)
                dz(aux->labels[j], static_cast<Eigen::Index>(j)) -= 1.0;
            dz *= g(0, 0) / static_cast<double>(aux->labels.size());
            add_grad(n->in[0], dz);
            break;
        }
        case Op::kBceLogitWSum: {
            const auto* aux = static_cast<const BceAux*>(n->aux.get());
            if (!n->in[0]->requires_grad) break;
            Mat dz(n->in[0]->value.rows(), n->in[0]->value.cols());
            for (Eigen::Index j = 0; j < dz.size(); ++j)
                dz(j) = aux->weights(j) * (sigmoid_scalar(n->in[0]->value(j)) - aux->targets(j));
            add_grad(n->in[0], Mat(dz * g(0, 0)));
            break;
        }
    }
}

}  // namespace obf::nn
