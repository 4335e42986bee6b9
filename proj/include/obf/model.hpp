// The scanpath encoder (optional convolutional block + sequential block)
// and the four pre-task decoders. One model instance is read-shareable for
// inference; training mutates parameters through the registry.

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "obf/rng.hpp"
#include "obf/tape.hpp"

namespace obf {

enum class Backbone { kRnn, kGru, kLstm, kTransformer };

std::string backbone_name(Backbone b);
Backbone backbone_from_name(const std::string& name);

struct ModelConfig {
    Backbone backbone = Backbone::kGru;
    int n_layers = 2;
    int hidden = 128;
    bool use_conv = true;
    int conv_kernel = 7;
    int conv_channels = 30;
    int pool = 2;
    int cl_hidden = 128;
    // Transformer internals: head count is parameter-neutral; the
    // feed-forward width is ff_factor * hidden.
    int tf_heads = 4;
    int tf_ff_factor = 3;

    void validate() const;
    int embedding_dim() const;
    /// Smallest segment the encoder accepts.
    int min_input_len() const { return use_conv ? std::max(conv_kernel, pool) : 1; }
};

/// Which pre-task decoders exist. A disabled task has no parameters.
struct TaskSet {
    bool rc = true;
    bool pc = true;
    bool fi = true;
    bool cl = true;
};

namespace detail {

struct CellP {
    nn::Param wih, whh, bih, bhh;
};
struct RecurrentStackP {
    std::vector<CellP> layers;
};
struct ConvBlockP {
    nn::Param in_w, in_b;    // 2 -> C, kernel k
    nn::Param mix_w, mix_b;  // C -> C, kernel 3
};
struct AttnP {
    nn::Param wq, bq, wk, bk, wv, bv, wo, bo;
};
struct TfEncLayerP {
    AttnP attn;
    nn::Param ln1_g, ln1_b;
    nn::Param ff_w1, ff_b1, ff_w2, ff_b2;
    nn::Param ln2_g, ln2_b;
};
struct TfDecLayerP {
    AttnP self_attn;
    nn::Param ln1_g, ln1_b;
    AttnP cross_attn;
    nn::Param ln2_g, ln2_b;
    nn::Param ff_w1, ff_b1, ff_w2, ff_b2;
    nn::Param ln3_g, ln3_b;
};
struct TfEncoderP {
    nn::Param proj_w, proj_b;  // input channels -> hidden
    nn::Param eos;             // learned end-of-sequence marker
    std::vector<TfEncLayerP> layers;
};
struct TfDecoderP {
    nn::Param emb_w, emb_b;  // 2 -> hidden
    std::vector<TfDecLayerP> layers;
};
struct SeqDecoderP {
    // exactly one of the two stacks is populated, per backbone
    RecurrentStackP rnn;
    std::unique_ptr<TfDecoderP> tf;
    nn::Param out_w, out_b;
};
struct ClHeadP {
    nn::Param w1, b1;
    nn::Param bn_g, bn_b;
    nn::Param w2, b2;
    nn::Mat bn_rmean, bn_rvar;  // running stats, not trained
};

}  // namespace detail

class ObfModel {
public:
    ObfModel(const ModelConfig& cfg, const TaskSet& tasks, std::uint64_t seed);
    ObfModel(const ObfModel&) = delete;
    ObfModel& operator=(const ObfModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const TaskSet& tasks() const { return tasks_; }
    nn::ParamRegistry& registry() { return registry_; }
    const nn::ParamRegistry& registry() const { return registry_; }

    std::size_t parameter_count() const { return registry_.total_size(); }
    std::size_t encoder_parameter_count() const;

    struct Encoded {
        nn::Node* embedding = nullptr;           // embedding_dim x 1
        nn::Node* latents = nullptr;             // hidden x T' per-step latents
        int input_len = 0;
    };

    /// x is a 2 x T segment (visual degrees). Throws on non-finite input
    /// or a segment shorter than the conv block allows.
    Encoded encode(nn::Tape& t, const nn::Mat& x) const;

    /// Reconstruction/prediction decoders. Output is a 2 x t_out matrix
    /// node. With `teacher` the decoder is teacher-forced (step-k input is
    /// teacher[k-1], step 0 a zero vector) and gradients flow; without it
    /// the decoder feeds back its own outputs (evaluation only — the
    /// feedback re-enters as data, so no gradient crosses steps).
    nn::Node* decode_rc(nn::Tape& t, const Encoded& e, int t_out, const nn::Mat* teacher) const;
    nn::Node* decode_pc(nn::Tape& t, const Encoded& e, int t_out, const nn::Mat* teacher) const;
    /// Per-timepoint fixation logits (1 x T) over the same raw segment
    /// given to encode.
    nn::Node* decode_fi(nn::Tape& t, const Encoded& e, const nn::Mat& x) const;

    /// Logits of the contrastive head over a batch of |e1-e2| columns.
    /// In train mode batch statistics are used and *bn_node_out receives
    /// the node for a later running-stats update.
    nn::Node* cl_head_logits(nn::Tape& t, nn::Node* absdiff, bool train_mode,
                             nn::Node** bn_node_out = nullptr) const;
    void cl_update_running_stats(const nn::Node* bn_node, double momentum = 0.1);
    /// Same update from already-extracted batch statistics (biased var).
    void cl_update_running_stats_values(const nn::Mat& mean, const nn::Mat& var, int batch_cols,
                                        double momentum = 0.1);

    // --- no-grad conveniences -------------------------------------------
    nn::Mat embed(const nn::Mat& x) const;
    /// Convolutional front end alone (channels x floor(T/pool)); errors
    /// when the model was built without it.
    nn::Mat conv_block_values(const nn::Mat& x) const;
    nn::Mat decode_rc_eval(const nn::Mat& x, int t_out) const;   // autoregressive
    nn::Mat decode_pc_eval(const nn::Mat& x, int t_out) const;
    std::vector<double> decode_fi_eval(const nn::Mat& x) const;  // probabilities
    double cl_probability(const nn::Mat& e1, const nn::Mat& e2) const;

    void save_checkpoint(const std::string& path) const;
    static std::unique_ptr<ObfModel> load_checkpoint(const std::string& path);

    std::uint64_t init_seed() const { return seed_; }

private:
    friend struct ModelBuilder;

    nn::Node* decode_seq(nn::Tape& t, const detail::SeqDecoderP& dec, const Encoded& e, int t_out,
                         const nn::Mat* teacher, const nn::Mat* fixed_inputs) const;
    nn::Node* conv_forward(nn::Tape& t, nn::Node* seq) const;
    nn::Node* recurrent_forward(nn::Tape& t, const detail::RecurrentStackP& stack,
                                std::vector<nn::Node*>& states, nn::Node* x) const;
    std::vector<nn::Node*> decoder_init_states(nn::Tape& t, const Encoded& e) const;
    nn::Node* tf_encode_impl(nn::Tape& t, nn::Node* x, Encoded& out) const;
    nn::Node* tf_decoder_forward(nn::Tape& t, const detail::TfDecoderP& dec, nn::Node* inputs,
                                 nn::Node* latents, const nn::Param& out_w,
                                 const nn::Param& out_b) const;

    ModelConfig cfg_;
    TaskSet tasks_;
    std::uint64_t seed_;
    nn::ParamRegistry registry_;

    detail::ConvBlockP conv_;
    detail::RecurrentStackP enc_rnn_;
    detail::TfEncoderP enc_tf_;
    std::unique_ptr<detail::SeqDecoderP> dec_rc_;
    std::unique_ptr<detail::SeqDecoderP> dec_pc_;
    std::unique_ptr<detail::SeqDecoderP> dec_fi_;
    std::unique_ptr<detail::ClHeadP> cl_;
    std::size_t encoder_param_count_ = 0;
};

}  // namespace obf
