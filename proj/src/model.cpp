#include "obf/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "obf/csvio.hpp"
#include "obf/errors.hpp"
#include "obf/kv.hpp"

namespace obf {

using nn::Mat;
using nn::Node;
using nn::Param;
using nn::Tape;

namespace {
constexpr double kLeakySlope = 0.01;
constexpr double kNormEps = 1e-5;
}  // namespace

std::string backbone_name(Backbone b) {
    switch (b) {
        case Backbone::kRnn: return "RNN";
        case Backbone::kGru: return "GRU";
        case Backbone::kLstm: return "LSTM";
        case Backbone::kTransformer: return "TRANSFORMER";
    }
    return "GRU";
}

Backbone backbone_from_name(const std::string& name) {
    if (name == "RNN") return Backbone::kRnn;
    if (name == "GRU") return Backbone::kGru;
    if (name == "LSTM") return Backbone::kLstm;
    if (name == "TRANSFORMER") return Backbone::kTransformer;
    throw DataError("unknown backbone '" + name + "' (RNN, GRU, LSTM, TRANSFORMER)");
}

void ModelConfig::validate() const {
    if (n_layers < 1 || hidden < 1 || conv_kernel < 1 || conv_channels < 1 || pool < 1 ||
        cl_hidden < 1)
        throw DataError("model config counts must be positive");
    if (conv_kernel % 2 == 0) throw DataError("conv_kernel must be odd");
    if (backbone == Backbone::kTransformer) {
        if (hidden % tf_heads != 0)
            throw DataError("transformer hidden size must be divisible by tf_heads");
        if (tf_ff_factor < 1) throw DataError("tf_ff_factor must be positive");
    }
}

int ModelConfig::embedding_dim() const {
    const int base = n_layers * hidden;
    return backbone == Backbone::kLstm ? 2 * base : base;
}

// ---------------------------------------------------------------------------
// construction / initialization
// ---------------------------------------------------------------------------

struct ModelBuilder {
    ObfModel& m;
    Rng root;

    // Uniform fan-in initialization; fan_in is the input width of the map.
    void init_weight(Param& p, Rng& rng, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index i = 0; i < p.value.size(); ++i)
            p.value(i) = rng.uniform(-bound, bound);
    }

    void reg_w(Param& p, const std::string& name, int rows, int cols, Rng& rng, int fan_in = -1) {
        p.name = name;
        p.value = Mat::Zero(rows, cols);
        init_weight(p, rng, fan_in > 0 ? fan_in : cols);
        m.registry_.add(p);
    }
    void reg_zeros(Param& p, const std::string& name, int rows) {
        p.name = name;
        p.value = Mat::Zero(rows, 1);
        m.registry_.add(p);
    }
    void reg_ones(Param& p, const std::string& name, int rows) {
        p.name = name;
        p.value = Mat::Ones(rows, 1);
        m.registry_.add(p);
    }

    void build_recurrent_stack(detail::RecurrentStackP& stack, const std::string& prefix,
                               int input_dim, Rng& rng) {
        const ModelConfig& cfg = m.cfg_;
        const int gate_mult = cfg.backbone == Backbone::kGru    ? 3
                              : cfg.backbone == Backbone::kLstm ? 4
                                                                : 1;
        stack.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            const int in_d = l == 0 ? input_dim : cfg.hidden;
            auto& cell = stack.layers[static_cast<std::size_t>(l)];
            const std::string lp = prefix + ".l" + std::to_string(l);
            // Recurrent cells scale every matrix by the cell width (the
            // stacked-RNN convention), not per-matrix column counts.
            reg_w(cell.wih, lp + ".wih", gate_mult * cfg.hidden, in_d, rng, cfg.hidden);
            reg_w(cell.whh, lp + ".whh", gate_mult * cfg.hidden, cfg.hidden, rng, cfg.hidden);
            reg_zeros(cell.bih, lp + ".bih", gate_mult * cfg.hidden);
            reg_zeros(cell.bhh, lp + ".bhh", gate_mult * cfg.hidden);
        }
    }

    void build_attn(detail::AttnP& a, const std::string& prefix, Rng& rng) {
        const int d = m.cfg_.hidden;
        reg_w(a.wq, prefix + ".wq", d, d, rng);
        reg_zeros(a.bq, prefix + ".bq", d);
        reg_w(a.wk, prefix + ".wk", d, d, rng);
        reg_zeros(a.bk, prefix + ".bk", d);
        reg_w(a.wv, prefix + ".wv", d, d, rng);
        reg_zeros(a.bv, prefix + ".bv", d);
        reg_w(a.wo, prefix + ".wo", d, d, rng);
        reg_zeros(a.bo, prefix + ".bo", d);
    }

    void build_tf_encoder(detail::TfEncoderP& enc, int input_dim, Rng& rng) {
        const ModelConfig& cfg = m.cfg_;
        const int d = cfg.hidden;
        const int ff = cfg.tf_ff_factor * d;
        reg_w(enc.proj_w, "enc.tf.proj.w", d, input_dim, rng);
        reg_zeros(enc.proj_b, "enc.tf.proj.b", d);
        reg_w(enc.eos, "enc.tf.eos", d, 1, rng, d);
        enc.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& lay = enc.layers[static_cast<std::size_t>(l)];
            const std::string lp = "enc.tf.l" + std::to_string(l);
            build_attn(lay.attn, lp + ".attn", rng);
            reg_ones(lay.ln1_g, lp + ".ln1.g", d);
            reg_zeros(lay.ln1_b, lp + ".ln1.b", d);
            reg_w(lay.ff_w1, lp + ".ff.w1", ff, d, rng);
            reg_zeros(lay.ff_b1, lp + ".ff.b1", ff);
            reg_w(lay.ff_w2, lp + ".ff.w2", d, ff, rng);
            reg_zeros(lay.ff_b2, lp + ".ff.b2", d);
            reg_ones(lay.ln2_g, lp + ".ln2.g", d);
            reg_zeros(lay.ln2_b, lp + ".ln2.b", d);
        }
    }

    void build_tf_decoder(detail::TfDecoderP& dec, const std::string& prefix, Rng& rng) {
        const ModelConfig& cfg = m.cfg_;
        const int d = cfg.hidden;
        const int ff = cfg.tf_ff_factor * d;
        reg_w(dec.emb_w, prefix + ".emb.w", d, 2, rng);
        reg_zeros(dec.emb_b, prefix + ".emb.b", d);
        dec.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& lay = dec.layers[static_cast<std::size_t>(l)];
            const std::string lp = prefix + ".l" + std::to_string(l);
            build_attn(lay.self_attn, lp + ".self", rng);
            reg_ones(lay.ln1_g, lp + ".ln1.g", d);
            reg_zeros(lay.ln1_b, lp + ".ln1.b", d);
            build_attn(lay.cross_attn, lp + ".cross", rng);
            reg_ones(lay.ln2_g, lp + ".ln2.g", d);
            reg_zeros(lay.ln2_b, lp + ".ln2.b", d);
            reg_w(lay.ff_w1, lp + ".ff.w1", ff, d, rng);
            reg_zeros(lay.ff_b1, lp + ".ff.b1", ff);
            reg_w(lay.ff_w2, lp + ".ff.w2", d, ff, rng);
            reg_zeros(lay.ff_b2, lp + ".ff.b2", d);
            reg_ones(lay.ln3_g, lp + ".ln3.g", d);
            reg_zeros(lay.ln3_b, lp + ".ln3.b", d);
        }
    }

    void build_seq_decoder(std::unique_ptr<detail::SeqDecoderP>& dec, const std::string& prefix,
                           int out_dim, const char* tag) {
        dec = std::make_unique<detail::SeqDecoderP>();
        Rng rng = root.derive(tag);
        if (m.cfg_.backbone == Backbone::kTransformer) {
            dec->tf = std::make_unique<detail::TfDecoderP>();
            build_tf_decoder(*dec->tf, prefix + ".tf", rng);
        } else {
            build_recurrent_stack(dec->rnn, prefix + ".rnn", 2, rng);
        }
        reg_w(dec->out_w, prefix + ".out.w", out_dim, m.cfg_.hidden, rng);
        reg_zeros(dec->out_b, prefix + ".out.b", out_dim);
    }

    void build() {
        const ModelConfig& cfg = m.cfg_;
        Rng enc_rng = root.derive("init.encoder");
        int seq_input = 2;
        if (cfg.use_conv) {
            seq_input = cfg.conv_channels;
            reg_w(m.conv_.in_w, "enc.conv.in.w", cfg.conv_channels, 2 * cfg.conv_kernel, enc_rng);
            reg_zeros(m.conv_.in_b, "enc.conv.in.b", cfg.conv_channels);
            reg_w(m.conv_.mix_w, "enc.conv.mix.w", cfg.conv_channels, cfg.conv_channels * 3,
                  enc_rng);
            reg_zeros(m.conv_.mix_b, "enc.conv.mix.b", cfg.conv_channels);
        }
        if (cfg.backbone == Backbone::kTransformer)
            build_tf_encoder(m.enc_tf_, seq_input, enc_rng);
        else
            build_recurrent_stack(m.enc_rnn_, "enc.rnn", seq_input, enc_rng);
        m.encoder_param_count_ = m.registry_.total_size();

        if (m.tasks_.rc) build_seq_decoder(m.dec_rc_, "dec_rc", 2, "init.dec_rc");
        if (m.tasks_.pc) build_seq_decoder(m.dec_pc_, "dec_pc", 2, "init.dec_pc");
        if (m.tasks_.fi) build_seq_decoder(m.dec_fi_, "dec_fi", 1, "init.dec_fi");
        if (m.tasks_.cl) {
            m.cl_ = std::make_unique<detail::ClHeadP>();
            Rng rng = root.derive("init.cl");
            reg_w(m.cl_->w1, "cl.w1", m.cfg_.cl_hidden, m.cfg_.embedding_dim(), rng);
            reg_zeros(m.cl_->b1, "cl.b1", m.cfg_.cl_hidden);
            reg_ones(m.cl_->bn_g, "cl.bn.g", m.cfg_.cl_hidden);
            reg_zeros(m.cl_->bn_b, "cl.bn.b", m.cfg_.cl_hidden);
            reg_w(m.cl_->w2, "cl.w2", 1, m.cfg_.cl_hidden, rng);
            reg_zeros(m.cl_->b2, "cl.b2", 1);
            m.cl_->bn_rmean = Mat::Zero(m.cfg_.cl_hidden, 1);
            m.cl_->bn_rvar = Mat::Ones(m.cfg_.cl_hidden, 1);
        }
    }
};

ObfModel::ObfModel(const ModelConfig& cfg, const TaskSet& tasks, std::uint64_t seed)
    : cfg_(cfg), tasks_(tasks), seed_(seed) {
    cfg_.validate();
    ModelBuilder{*this, Rng(seed)}.build();
}

std::size_t ObfModel::encoder_parameter_count() const { return encoder_param_count_; }

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

namespace {

Mat sinusoidal_pe(int d, int t, int pos_offset = 0) {
    Mat pe(d, t);
    for (int j = 0; j < t; ++j) {
        const double pos = static_cast<double>(j + pos_offset);
        for (int i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
            pe(i, j) = std::sin(pos * freq);
            if (i + 1 < d) pe(i + 1, j) = std::cos(pos * freq);
        }
    }
    return pe;
}

Mat causal_mask(int t) {
    Mat m = Mat::Zero(t, t);
    for (int r = 0; r < t; ++r)
        for (int c = r + 1; c < t; ++c) m(r, c) = -1e30;
    return m;
}

// Multi-head attention: q_src (d x Tq) attends over kv_src (d x Tk).
Node* mha(Tape& t, Node* q_src, Node* kv_src, const detail::AttnP& p, int heads,
          const Mat* mask) {
    const int d = static_cast<int>(q_src->value.rows());
    const int dh = d / heads;
    Node* q = t.add_colvec(t.matmul(t.param(p.wq), q_src),
                           t.param(p.bq));
    Node* k = t.add_colvec(t.matmul(t.param(p.wk), kv_src),
                           t.param(p.bk));
    Node* v = t.add_colvec(t.matmul(t.param(p.wv), kv_src),
                           t.param(p.bv));
    std::vector<Node*> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Node* qh = t.slice_rows(q, h * dh, dh);
        Node* kh = t.slice_rows(k, h * dh, dh);
        Node* vh = t.slice_rows(v, h * dh, dh);
        Node* scores = t.scale(t.matmul(qh, kh, true, false),
                               1.0 / std::sqrt(static_cast<double>(dh)));  // Tq x Tk
        Node* attn = t.softmax_rows(scores, mask);
        head_outs.push_back(t.matmul(vh, attn, false, true));  // dh x Tq
    }
    Node* merged = t.gather_rows(head_outs);
    return t.add_colvec(t.matmul(t.param(p.wo), merged),
                        t.param(p.bo));
}

Node* tf_ffn(Tape& t, Node* x, const Param& w1, const Param& b1, const Param& w2,
             const Param& b2) {
    Node* h = t.relu(t.add_colvec(t.matmul(t.param(w1), x),
                                  t.param(b1)));
    return t.add_colvec(t.matmul(t.param(w2), h),
                        t.param(b2));
}

Node* layer_norm(Tape& t, Node* x, const Param& g, const Param& b) {
    return t.layer_norm_cols(x, t.param(g), t.param(b),
                             kNormEps);
}

}  // namespace

Node* ObfModel::conv_forward(Tape& t, Node* seq) const {
    Node* c1 = t.conv1d(seq, t.param(conv_.in_w), t.param(conv_.in_b), cfg_.conv_kernel);
    Node* a1 = t.leaky_relu(c1, kLeakySlope);
    Node* c2 = t.conv1d(a1, t.param(conv_.mix_w), t.param(conv_.mix_b), 3);
    Node* res = t.add(c2, t.pad_rows(seq, cfg_.conv_channels));
    return t.avg_pool1d(res, cfg_.pool);
}

Node* ObfModel::recurrent_forward(Tape& t, const detail::RecurrentStackP& stack,
                                  std::vector<Node*>& states, Node* x) const {
    Node* below = x;
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
        const auto& cell = stack.layers[l];
        Node* wih = t.param(cell.wih);
        Node* whh = t.param(cell.whh);
        Node* bih = t.param(cell.bih);
        Node* bhh = t.param(cell.bhh);
        Node* next = nullptr;
        switch (cfg_.backbone) {
            case Backbone::kRnn:
                next = t.rnn_cell(below, states[l], wih, whh, bih, bhh);
                below = next;
                break;
            case Backbone::kGru:
                next = t.gru_cell(below, states[l], wih, whh, bih, bhh);
                below = next;
                break;
            case Backbone::kLstm:
                next = t.lstm_cell(below, states[l], wih, whh, bih, bhh);
                below = t.slice_rows(next, 0, cfg_.hidden);
                break;
            case Backbone::kTransformer:
                throw NumericalError("recurrent_forward called for transformer");
        }
        states[l] = next;
    }
    return below;  // top-layer hidden state
}

ObfModel::Encoded ObfModel::encode(Tape& t, const Mat& x) const {
    if (x.rows() != 2) throw NumericalError("encode: input must be 2 x T");
    if (!x.allFinite()) throw NumericalError("encode: non-finite input");
    if (static_cast<int>(x.cols()) < cfg_.min_input_len())
        throw NumericalError("encode: segment shorter than the encoder minimum (" +
                             std::to_string(cfg_.min_input_len()) + ")");

    Encoded out;
    out.input_len = static_cast<int>(x.cols());

    Node* seq = t.leaf(x);
    if (cfg_.use_conv) seq = conv_forward(t, seq);

    if (cfg_.backbone == Backbone::kTransformer) {
        tf_encode_impl(t, seq, out);
        return out;
    }

    const int t_steps = static_cast<int>(seq->value.cols());
    const int state_rows = cfg_.backbone == Backbone::kLstm ? 2 * cfg_.hidden : cfg_.hidden;
    std::vector<Node*> states(static_cast<std::size_t>(cfg_.n_layers),
                              t.leaf(Mat::Zero(state_rows, 1)));
    std::vector<Node*> top_steps;
    top_steps.reserve(static_cast<std::size_t>(t_steps));
    for (int k = 0; k < t_steps; ++k) {
        Node* xk = t.slice_cols(seq, k, 1);
        top_steps.push_back(recurrent_forward(t, enc_rnn_, states, xk));
    }

    // Embedding: concatenated per-layer hidden states (plus cell states
    // for LSTM, appended after all hidden states).
    std::vector<Node*> parts;
    for (auto* s : states)
        parts.push_back(cfg_.backbone == Backbone::kLstm ? t.slice_rows(s, 0, cfg_.hidden) : s);
    if (cfg_.backbone == Backbone::kLstm)
        for (auto* s : states) parts.push_back(t.slice_rows(s, cfg_.hidden, cfg_.hidden));
    out.embedding = t.gather_rows(parts);
    out.latents = t.gather_cols(top_steps);
    return out;
}

Node* ObfModel::tf_encode_impl(Tape& t, Node* x, Encoded& out) const {
    const int d = cfg_.hidden;
    Node* proj = t.add_colvec(t.matmul(t.param(enc_tf_.proj_w), x),
                              t.param(enc_tf_.proj_b));
    const int t_in = static_cast<int>(proj->value.cols());
    // End-of-sequence marker appended at position t_in; its latent is the
    // embedding contribution of each layer.
    Node* seq = t.concat_cols(proj, t.param(enc_tf_.eos));
    seq = t.add(seq, t.leaf(sinusoidal_pe(d, t_in + 1)));

    std::vector<Node*> eos_parts;
    for (const auto& lay : enc_tf_.layers) {
        Node* a = mha(t, seq, seq, lay.attn, cfg_.tf_heads, nullptr);
        seq = layer_norm(t, t.add(seq, a), lay.ln1_g, lay.ln1_b);
        Node* f = tf_ffn(t, seq, lay.ff_w1, lay.ff_b1, lay.ff_w2, lay.ff_b2);
        seq = layer_norm(t, t.add(seq, f), lay.ln2_g, lay.ln2_b);
        eos_parts.push_back(t.slice_cols(seq, t_in, 1));
    }
    out.embedding = t.gather_rows(eos_parts);
    out.latents = seq;
    return seq;
}

// ---------------------------------------------------------------------------
// decoders
// ---------------------------------------------------------------------------

std::vector<Node*> ObfModel::decoder_init_states(Tape& t, const Encoded& e) const {
    std::vector<Node*> states;
    states.reserve(static_cast<std::size_t>(cfg_.n_layers));
    const int h = cfg_.hidden;
    for (int l = 0; l < cfg_.n_layers; ++l) {
        if (cfg_.backbone == Backbone::kLstm) {
            Node* hl = t.slice_rows(e.embedding, l * h, h);
            Node* cl = t.slice_rows(e.embedding, cfg_.n_layers * h + l * h, h);
            states.push_back(t.concat_rows(hl, cl));
        } else {
            states.push_back(t.slice_rows(e.embedding, l * h, h));
        }
    }
    return states;
}

Node* ObfModel::tf_decoder_forward(Tape& t, const detail::TfDecoderP& dec, Node* inputs,
                                   Node* latents, const Param& out_w, const Param& out_b) const {
    const int d = cfg_.hidden;
    const int len = static_cast<int>(inputs->value.cols());
    Node* seq = t.add_colvec(t.matmul(t.param(dec.emb_w), inputs),
                             t.param(dec.emb_b));
    seq = t.add(seq, t.leaf(sinusoidal_pe(d, len)));
    const Mat mask = causal_mask(len);
    for (const auto& lay : dec.layers) {
        Node* s = mha(t, seq, seq, lay.self_attn, cfg_.tf_heads, &mask);
        seq = layer_norm(t, t.add(seq, s), lay.ln1_g, lay.ln1_b);
        Node* c = mha(t, seq, latents, lay.cross_attn, cfg_.tf_heads, nullptr);
        seq = layer_norm(t, t.add(seq, c), lay.ln2_g, lay.ln2_b);
        Node* f = tf_ffn(t, seq, lay.ff_w1, lay.ff_b1, lay.ff_w2, lay.ff_b2);
        seq = layer_norm(t, t.add(seq, f), lay.ln3_g, lay.ln3_b);
    }
    return t.add_colvec(t.matmul(t.param(out_w), seq),
                        t.param(out_b));
}

Node* ObfModel::decode_seq(Tape& t, const detail::SeqDecoderP& dec, const Encoded& e, int t_out,
                           const nn::Mat* teacher, const nn::Mat* fixed_inputs) const {
    if (!e.embedding) throw NumericalError("decode: embedding missing");
    if (t_out < 1) throw NumericalError("decode: t_out must be positive");
    if (teacher && static_cast<int>(teacher->cols()) != t_out)
        throw NumericalError("decode: teacher length mismatch");
    if (fixed_inputs && static_cast<int>(fixed_inputs->cols()) != t_out)
        throw NumericalError("decode: input length mismatch");

    if (cfg_.backbone == Backbone::kTransformer) {
        if (!e.latents) throw NumericalError("decode: latents missing");
        if (fixed_inputs) {
            Node* inputs = t.leaf(*fixed_inputs);
            return tf_decoder_forward(t, *dec.tf, inputs, e.latents, dec.out_w, dec.out_b);
        }
        if (teacher) {
            Mat shifted = Mat::Zero(2, t_out);
            if (t_out > 1) shifted.rightCols(t_out - 1) = teacher->leftCols(t_out - 1);
            return tf_decoder_forward(t, *dec.tf, t.leaf(shifted), e.latents, dec.out_w,
                                      dec.out_b);
        }
        // Autoregressive evaluation: grow the input prefix step by step.
        Mat inputs = Mat::Zero(2, 1);
        Mat outputs(static_cast<int>(dec.out_w.value.rows()), t_out);
        for (int k = 0; k < t_out; ++k) {
            Node* y = tf_decoder_forward(t, *dec.tf, t.leaf(inputs), e.latents, dec.out_w,
                                         dec.out_b);
            outputs.col(k) = y->value.col(k);
            if (k + 1 < t_out) {
                inputs.conservativeResize(Eigen::NoChange, k + 2);
                inputs.col(k + 1) = outputs.col(k).topRows(2);
            }
        }
        return t.leaf(outputs);
    }

    std::vector<Node*> states = decoder_init_states(t, e);
    std::vector<Node*> outs;
    outs.reserve(static_cast<std::size_t>(t_out));
    Node* out_w = t.param(dec.out_w);
    Node* out_b = t.param(dec.out_b);
    for (int k = 0; k < t_out; ++k) {
        Node* input = nullptr;
        if (fixed_inputs) {
            input = t.leaf(fixed_inputs->col(k));
        } else if (k == 0) {
            input = t.leaf(Mat::Zero(2, 1));
        } else if (teacher) {
            input = t.leaf(teacher->col(k - 1));
        } else {
            input = t.leaf(outs.back()->value);  // feedback, evaluation only
        }
        Node* h_top = recurrent_forward(t, dec.rnn, states, input);
        outs.push_back(t.add(t.matmul(out_w, h_top), out_b));
    }
    return t.gather_cols(outs);
}

Node* ObfModel::decode_rc(Tape& t, const Encoded& e, int t_out, const Mat* teacher) const {
    if (!dec_rc_) throw NumericalError("RC decoder is disabled in this model");
    return decode_seq(t, *dec_rc_, e, t_out, teacher, nullptr);
}

Node* ObfModel::decode_pc(Tape& t, const Encoded& e, int t_out, const Mat* teacher) const {
    if (!dec_pc_) throw NumericalError("PC decoder is disabled in this model");
    return decode_seq(t, *dec_pc_, e, t_out, teacher, nullptr);
}

Node* ObfModel::decode_fi(Tape& t, const Encoded& e, const Mat& x) const {
    if (!dec_fi_) throw NumericalError("FI decoder is disabled in this model");
    if (x.cols() < 1 || static_cast<int>(x.cols()) != e.input_len)
        throw NumericalError("decode_fi: segment length mismatch with encode input");
    return decode_seq(t, *dec_fi_, e, static_cast<int>(x.cols()), nullptr, &x);
}

Node* ObfModel::cl_head_logits(Tape& t, Node* absdiff, bool train_mode,
                               Node** bn_node_out) const {
    if (!cl_) throw NumericalError("CL head is disabled in this model");
    if (absdiff->value.rows() != cfg_.embedding_dim())
        throw NumericalError("cl_head: embedding dimension mismatch");
    Node* h = t.sigmoid(t.affine(cl_->w1, absdiff, cl_->b1));
    Node* bn = nullptr;
    if (train_mode)
        bn = t.batch_norm_train(h, t.param(cl_->bn_g), t.param(cl_->bn_b), kNormEps);
    else
        bn = t.batch_norm_eval(h, t.param(cl_->bn_g), t.param(cl_->bn_b), cl_->bn_rmean,
                               cl_->bn_rvar, kNormEps);
    if (bn_node_out) *bn_node_out = bn;
    return t.affine(cl_->w2, bn, cl_->b2);
}

void ObfModel::cl_update_running_stats(const Node* bn_node, double momentum) {
    Mat mean, var;
    Tape::bn_batch_stats(bn_node, mean, var);
    cl_update_running_stats_values(mean, var, static_cast<int>(bn_node->value.cols()), momentum);
}

void ObfModel::cl_update_running_stats_values(const Mat& mean, const Mat& var, int batch_cols,
                                              double momentum) {
    if (!cl_) return;
    const double b = static_cast<double>(batch_cols);
    const double unbias = b > 1.5 ? b / (b - 1.0) : 1.0;
    cl_->bn_rmean = (1.0 - momentum) * cl_->bn_rmean + momentum * mean;
    cl_->bn_rvar = (1.0 - momentum) * cl_->bn_rvar + momentum * (var * unbias);
}

// ---------------------------------------------------------------------------
// no-grad conveniences
// ---------------------------------------------------------------------------

Mat ObfModel::embed(const Mat& x) const {
    Tape t;
    t.grad_enabled = false;
    return encode(t, x).embedding->value;
}

Mat ObfModel::conv_block_values(const Mat& x) const {
    if (!cfg_.use_conv) throw NumericalError("model was built without the conv block");
    if (static_cast<int>(x.cols()) < cfg_.conv_kernel)
        throw NumericalError("conv block: sequence shorter than the kernel");
    Tape t;
    t.grad_enabled = false;
    return conv_forward(t, t.leaf(x))->value;
}

Mat ObfModel::decode_rc_eval(const Mat& x, int t_out) const {
    Tape t;
    t.grad_enabled = false;
    Encoded e = encode(t, x);
    return decode_rc(t, e, t_out, nullptr)->value;
}

Mat ObfModel::decode_pc_eval(const Mat& x, int t_out) const {
    Tape t;
    t.grad_enabled = false;
    Encoded e = encode(t, x);
    return decode_pc(t, e, t_out, nullptr)->value;
}

std::vector<double> ObfModel::decode_fi_eval(const Mat& x) const {
    Tape t;
    t.grad_enabled = false;
    Encoded e = encode(t, x);
    Node* logits = decode_fi(t, e, x);
    std::vector<double> probs(static_cast<std::size_t>(logits->value.cols()));
    for (Eigen::Index j = 0; j < logits->value.cols(); ++j)
        probs[static_cast<std::size_t>(j)] = nn::sigmoid_scalar(logits->value(0, j));
    return probs;
}

double ObfModel::cl_probability(const Mat& e1, const Mat& e2) const {
    Tape t;
    t.grad_enabled = false;
    Node* d = t.leaf((e1 - e2).cwiseAbs());
    Node* logit = cl_head_logits(t, d, false);
    return nn::sigmoid_scalar(logit->value(0, 0));
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------
// Layout: magic "OBFCKPT1", u32 config text length, config text (key=value
// lines), u32 array count, then per array: u32 name length, name, u32 rows,
// u32 cols, rows*cols little-endian float32 values in column-major order.

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    out.append(b, 4);
}

std::uint32_t take_u32(const std::string& s, std::size_t& pos) {
    if (pos + 4 > s.size()) throw DataError("checkpoint truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(s.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void append_array(std::string& out, const std::string& name, const Mat& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const float f = static_cast<float>(m(i, j));
            static_assert(sizeof(float) == 4);
            char b[4];
            std::memcpy(b, &f, 4);
            out.append(b, 4);
        }
}

Mat take_array(const std::string& s, std::size_t& pos, std::string& name_out) {
    const std::uint32_t name_len = take_u32(s, pos);
    if (pos + name_len > s.size()) throw DataError("checkpoint truncated");
    name_out.assign(s, pos, name_len);
    pos += name_len;
    const std::uint32_t rows = take_u32(s, pos);
    const std::uint32_t cols = take_u32(s, pos);
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    if (pos + 4 * n > s.size()) throw DataError("checkpoint truncated");
    Mat m(rows, cols);
    for (std::uint32_t j = 0; j < cols; ++j)
        for (std::uint32_t i = 0; i < rows; ++i) {
            float f;
            std::memcpy(&f, s.data() + pos, 4);
            pos += 4;
            m(i, j) = static_cast<double>(f);
        }
    return m;
}

}  // namespace

void ObfModel::save_checkpoint(const std::string& path) const {
    std::string blob = "OBFCKPT1";

    std::ostringstream cfg;
    cfg << "model.backbone = " << backbone_name(cfg_.backbone) << "\n";
    cfg << "model.n_layers = " << cfg_.n_layers << "\n";
    cfg << "model.hidden = " << cfg_.hidden << "\n";
    cfg << "model.use_conv = " << (cfg_.use_conv ? "true" : "false") << "\n";
    cfg << "model.conv_kernel = " << cfg_.conv_kernel << "\n";
    cfg << "model.conv_channels = " << cfg_.conv_channels << "\n";
    cfg << "model.pool = " << cfg_.pool << "\n";
    cfg << "model.cl_hidden = " << cfg_.cl_hidden << "\n";
    cfg << "model.tf_heads = " << cfg_.tf_heads << "\n";
    cfg << "model.tf_ff_factor = " << cfg_.tf_ff_factor << "\n";
    cfg << "tasks.rc = " << (tasks_.rc ? "true" : "false") << "\n";
    cfg << "tasks.pc = " << (tasks_.pc ? "true" : "false") << "\n";
    cfg << "tasks.fi = " << (tasks_.fi ? "true" : "false") << "\n";
    cfg << "tasks.cl = " << (tasks_.cl ? "true" : "false") << "\n";
    cfg << "seed = " << seed_ << "\n";
    const std::string cfg_text = cfg.str();
    put_u32(blob, static_cast<std::uint32_t>(cfg_text.size()));
    blob.append(cfg_text);

    std::uint32_t n_arrays = static_cast<std::uint32_t>(registry_.params().size());
    if (cl_) n_arrays += 2;
    put_u32(blob, n_arrays);
    for (const Param* p : registry_.params()) append_array(blob, p->name, p->value);
    if (cl_) {
        append_array(blob, "cl.bn.rmean", cl_->bn_rmean);
        append_array(blob, "cl.bn.rvar", cl_->bn_rvar);
    }

    AtomicFileWriter w(path);
    w.write(blob);
    w.commit();
}

std::unique_ptr<ObfModel> ObfModel::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string blob = ss.str();
    if (blob.size() < 8 || blob.compare(0, 8, "OBFCKPT1") != 0)
        throw DataError("'" + path + "' is not an OBF checkpoint");

    std::size_t pos = 8;
    const std::uint32_t cfg_len = take_u32(blob, pos);
    if (pos + cfg_len > blob.size()) throw DataError("checkpoint truncated");
    const KvFile kv = parse_kv_text(blob.substr(pos, cfg_len), path);
    pos += cfg_len;

    ModelConfig cfg;
    cfg.backbone = backbone_from_name(kv.get("model.backbone"));
    cfg.n_layers = static_cast<int>(kv.get_long("model.n_layers"));
    cfg.hidden = static_cast<int>(kv.get_long("model.hidden"));
    cfg.use_conv = parse_bool_field("model.use_conv", kv.get("model.use_conv"));
    cfg.conv_kernel = static_cast<int>(kv.get_long("model.conv_kernel"));
    cfg.conv_channels = static_cast<int>(kv.get_long("model.conv_channels"));
    cfg.pool = static_cast<int>(kv.get_long("model.pool"));
    cfg.cl_hidden = static_cast<int>(kv.get_long("model.cl_hidden"));
    cfg.tf_heads = static_cast<int>(kv.get_long("model.tf_heads"));
    cfg.tf_ff_factor = static_cast<int>(kv.get_long("model.tf_ff_factor"));
    TaskSet tasks;
    tasks.rc = parse_bool_field("tasks.rc", kv.get("tasks.rc"));
    tasks.pc = parse_bool_field("tasks.pc", kv.get("tasks.pc"));
    tasks.fi = parse_bool_field("tasks.fi", kv.get("tasks.fi"));
    tasks.cl = parse_bool_field("tasks.cl", kv.get("tasks.cl"));
    const std::uint64_t seed = static_cast<std::uint64_t>(kv.get_long("seed"));

    auto model = std::make_unique<ObfModel>(cfg, tasks, seed);

    const std::uint32_t n_arrays = take_u32(blob, pos);
    std::size_t filled = 0;
    for (std::uint32_t a = 0; a < n_arrays; ++a) {
        std::string name;
        Mat m = take_array(blob, pos, name);
        bool matched = false;
        for (Param* p : model->registry_.params()) {
            if (p->name != name) continue;
            if (p->value.rows() != m.rows() || p->value.cols() != m.cols())
                throw DataError("checkpoint array '" + name + "' has unexpected shape");
            p->value = std::move(m);
            matched = true;
            ++filled;
            break;
        }
        if (!matched && model->cl_ && name == "cl.bn.rmean") {
            model->cl_->bn_rmean = std::move(m);
            matched = true;
        } else if (!matched && model->cl_ && name == "cl.bn.rvar") {
            model->cl_->bn_rvar = std::move(m);
            matched = true;
        }
        if (!matched) throw DataError("checkpoint array '" + name + "' does not match the model");
    }
    if (filled != model->registry_.params().size())
        throw DataError("checkpoint is missing parameter arrays");
    return model;
}

}  // namespace obf
