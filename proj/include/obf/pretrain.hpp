// Segment sampling, the four pre-task losses, the combined objective, the
// optimization loop, and pre-task validation metrics.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "obf/fixation.hpp"
#include "obf/gaze.hpp"
#include "obf/model.hpp"
#include "obf/rng.hpp"
#include "obf/tape.hpp"

namespace obf {

struct PretrainConfig {
    int epochs = 500;
    double lr = 0.001;
    int lr_halving_every = 100;  // epochs
    double grad_clip = 0.5;      // per-parameter magnitude
    int batch = 64;
    double w_rc = 1.0, w_pc = 1.0, w_fi = 1.0, w_cl = 1.0;
    Range input_len_s{5.0, 10.0};
    double pc_horizon_ms = 500.0;
    Range cl_frac{0.2, 0.4};
    double train_frac = 0.8;
    std::uint64_t seed = 1;
    int threads = 1;
    bool augment_enabled = false;
    AugmentConfig augment;

    void validate() const;
    int input_min_samples() const;  // 300 at defaults
    int input_max_samples() const;  // 600
    int pc_samples() const;         // 30
    int min_scanpath_len() const;   // input_min + pc horizon = 330

    TaskSet task_set() const { return {w_rc != 0.0, w_pc != 0.0, w_fi != 0.0, w_cl != 0.0}; }
};

/// Training segment x with its immediately following 500 ms x', plus the
/// fixation ground truth and balancing mask for x.
struct SegmentPair {
    nn::Mat x;       // 2 x t, t in [300, 600]
    nn::Mat x_next;  // 2 x 30
    FixationLabels fi;
    SampleMask mask;
};

struct ClPair {
    nn::Mat x1, x2;
    int same_scanpath = 0;  // label S
};

struct PretaskMetrics {
    double rc_dist = std::numeric_limits<double>::quiet_NaN();
    double pc_dist = std::numeric_limits<double>::quiet_NaN();
    double fi_auc = std::numeric_limits<double>::quiet_NaN();
    double cl_acc = std::numeric_limits<double>::quiet_NaN();
};

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

nn::Mat scanpath_segment(const Scanpath& sp, std::size_t start, std::size_t len);

/// Uniform t in [300, min(600, len-30)], uniform start; fi/mask on x.
/// Throws DataError when the scanpath is shorter than 330 samples.
SegmentPair sample_segment_pair(const Scanpath& sp, const PretrainConfig& cfg, Rng& rng);

/// Pairs with S=1 (disjoint-start segments of one scanpath) and S=0
/// (segments of two distinct scanpaths), 50/50 in expectation; segment
/// lengths uniform in cl_frac of each source scanpath. The batch must be
/// single-source with at least two scanpaths.
std::vector<ClPair> sample_cl_pairs(const std::vector<const Scanpath*>& batch,
                                    const PretrainConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// losses (plain forms; the training graph mirrors these exactly)
// ---------------------------------------------------------------------------

double loss_rc(const nn::Mat& recon, const nn::Mat& x);      // ||r - x||_F^2 / (2t)
double loss_pc(const nn::Mat& pred, const nn::Mat& x_next);  // ... / (2t')
/// Binary cross-entropy over masked samples with 1/2-per-class weighting;
/// all-zero mask -> 0. Throws NumericalError on an unbalanced mask.
double loss_fi(const std::vector<double>& probs, const FixationLabels& labels,
               const SampleMask& mask);
double loss_cl(double p, int s_flag);  // p clipped to [1e-7, 1-1e-7]

struct LossParts {
    double rc = 0.0, pc = 0.0, fi = 0.0, cl = 0.0;
};
struct LossWeights {
    double rc = 1.0, pc = 1.0, fi = 1.0, cl = 1.0;
};
/// Weighted sum; throws NumericalError naming the offending task when a
/// part with nonzero weight is non-finite.
double total_loss(const LossParts& parts, const LossWeights& weights);

// ---------------------------------------------------------------------------
// batch objective, gradients, optimizer
// ---------------------------------------------------------------------------

/// Mean over the batch of the weighted per-pair losses, plus the CL head
/// over the whole batch (batch normalization couples CL pairs). When sink
/// is non-null the gradient of the batch objective is accumulated into it.
/// Returned parts are unweighted per-task means (NaN when task disabled).
/// bn_mean/bn_var, when requested, receive the CL head's batch statistics
/// for the running-average update.
LossParts batch_objective(const ObfModel& model, const std::vector<SegmentPair>& segs,
                          const std::vector<ClPair>& cl_pairs, const PretrainConfig& cfg,
                          nn::GradBuffer* sink, nn::Mat* bn_mean = nullptr,
                          nn::Mat* bn_var = nullptr);

/// Element-wise clip to [-clip, clip], then value -= lr * grad.
void sgd_apply(nn::ParamRegistry& reg, const nn::GradBuffer& grads, double lr, double clip);

double lr_at_epoch(const PretrainConfig& cfg, int epoch);  // epoch is 1-based

/// Central finite differences (step 1e-5) on >= n_params randomly chosen
/// parameters against the analytic gradient; returns max relative error.
double grad_check(const ObfModel& model, const std::vector<SegmentPair>& segs,
                  const std::vector<ClPair>& cl_pairs, const PretrainConfig& cfg, int n_params,
                  Rng& rng);

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    LossParts train;  // per-task means over the epoch (NaN when disabled)
    PretaskMetrics val;
};

struct TrainResult {
    std::unique_ptr<ObfModel> model;
    std::vector<EpochLog> log;
    std::vector<std::size_t> train_indices;  // into the filtered corpus view
    std::vector<std::size_t> val_indices;
};

/// 80/20 scanpath-level split, single-source batches of `batch` segment
/// pairs plus one CL pair each, per-parameter clipping, the halving lr
/// schedule. Fully reproducible from cfg.seed (thread count has no effect
/// on results).
TrainResult train(const std::vector<Scanpath>& corpus, const ModelConfig& mcfg,
                  const PretrainConfig& pcfg);

struct EvalSegments {
    std::vector<SegmentPair> segs;
    std::vector<ClPair> cl_pairs;
};

EvalSegments build_eval_segments(const std::vector<const Scanpath*>& valset,
                                 const PretrainConfig& cfg, Rng& rng);

/// rc/pc distances use autoregressive decoding (no teacher forcing);
/// fi_auc is rank-based over all labeled timepoints; cl_acc at 0.5 over
/// the given pairs. Metrics for disabled tasks (or undefined AUC) are NaN.
PretaskMetrics evaluate_on_segments(const ObfModel& model, const EvalSegments& ev, int threads);

PretaskMetrics evaluate_pretasks(const ObfModel& model,
                                 const std::vector<const Scanpath*>& valset,
                                 const PretrainConfig& cfg, Rng& rng);

/// CSV: epoch,lr,loss_rc,loss_pc,loss_fi,loss_cl,val_rc_dist,val_pc_dist,
/// val_fi_auc,val_cl_acc. NaN fields are written empty.
void write_training_log(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace obf
