// Downstream evaluation protocols: c-way k-shot stimulus prediction
// (supervised MLP head and prototypical-network meta-learning) and
// participant-level classification from concatenated embeddings with an
// L1-regularized linear classifier, plus the expert-feature baseline.

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "obf/fixation.hpp"
#include "obf/gaze.hpp"
#include "obf/model.hpp"
#include "obf/rng.hpp"

namespace obf {

/// Eval-mode embedding of a full scanpath (no segmentation).
nn::Mat extract_embedding(const ObfModel& model, const Scanpath& sp);

// ---------------------------------------------------------------------------
// stimulus prediction
// ---------------------------------------------------------------------------

enum class StimulusMode { kSupervised, kMetric };

struct StimulusTaskSpec {
    int c_ways = 10;
    int k_shots = 1;
    StimulusMode mode = StimulusMode::kSupervised;
    int episodes = 500;            // metric-mode evaluation episodes
    int query_per_class = 5;       // queries per class per episode
    int meta_train_stimuli = 200;  // reserved for meta-training
};

struct MlpHeadConfig {
    int h1 = 256;
    int h2 = 512;
    double dropout = 0.5;
    double lr = 0.05;
    int epochs = 200;
    int batch = 64;
    bool finetune_encoder = false;
    int proto_epochs = 20;       // metric mode: meta-training epochs
    int proto_iters = 25;        // episodes per meta-training epoch
    double proto_lr = 0.01;
    int proj_dim = 128;          // metric embedding space
};

struct StimulusEvalResult {
    double accuracy = 0.0;
    int n_correct = 0;
    int n_total = 0;
    int episodes = 0;  // metric mode
    std::uint64_t seed = 0;
};

/// k support users per stimulus train the head; all remaining users'
/// scanpaths for the chosen stimuli are the test set. Support and query
/// never share a (user, stimulus) pair.
StimulusEvalResult eval_stimulus_supervised(ObfModel& model, const std::vector<Scanpath>& corpus,
                                            const StimulusTaskSpec& spec,
                                            const MlpHeadConfig& head_cfg, Rng& rng);

/// Prototypical-network protocol: meta-train stimuli are reserved first;
/// evaluation samples episodes from the disjoint meta-test stimuli.
/// Throws DataError when the meta-test set would be empty (or smaller
/// than c_ways).
StimulusEvalResult eval_stimulus_metric(ObfModel& model, const std::vector<Scanpath>& corpus,
                                        const StimulusTaskSpec& spec,
                                        const MlpHeadConfig& head_cfg, Rng& rng);

/// Per-class means of class-major support projections (d x c*k -> d x c).
nn::Mat class_prototypes(const nn::Mat& support_proj, int c, int k);

/// Index of the squared-Euclidean-nearest prototype; exact ties resolve
/// to the lowest class index.
int nearest_prototype(const nn::Mat& prototypes, const nn::Mat& query);

// ---------------------------------------------------------------------------
// participant classification
// ---------------------------------------------------------------------------

struct ParticipantRecord {
    std::string participant_id;
    int label = 0;  // 1 = clinical/positive class
    std::map<std::string, const Scanpath*> by_stimulus;
};

/// Sorted unique stimulus ids; the fixed corpus-wide roster order.
std::vector<std::string> stimulus_roster(const std::vector<Scanpath>& corpus);

/// Embeddings concatenated in roster order; missing scanpaths contribute
/// zero blocks. Dimension = roster_size * embedding_dim.
nn::Mat participant_vector(const ObfModel& model, const ParticipantRecord& rec,
                           const std::vector<std::string>& roster);

/// Expert features (fixation-analysis module) concatenated across the
/// roster, zero-filled for missing scanpaths.
nn::Mat participant_expert_vector(const ParticipantRecord& rec,
                                  const std::vector<std::string>& roster);

struct FoldResult {
    double accuracy = 0.0, auc = 0.0, f1 = 0.0;
    int n_test = 0;
};

struct EvalReport {
    double accuracy = 0.0, auc = 0.0, f1 = 0.0;  // pooled over folds
    std::vector<FoldResult> folds;
    std::uint64_t seed = 0;
};

struct LassoConfig {
    int folds = 5;
    int inner_folds = 3;
    std::vector<double> lambda_grid;  // empty -> default log grid
    int max_iters = 800;
    double tol = 1e-7;
};

/// Stratified k-fold CV with an L1-regularized logistic-style linear
/// classifier; the regularization strength is chosen per fold by an inner
/// CV on the training fold. Throws when a fold would be single-class.
EvalReport lasso_cv(const std::vector<nn::Mat>& vectors, const std::vector<int>& labels,
                    const LassoConfig& cfg, std::uint64_t seed);

/// L1 path behavior probe: coefficients for one lambda (tests use this to
/// check shrinkage toward zero as lambda grows).
nn::Mat lasso_fit_coefficients(const std::vector<nn::Mat>& vectors,
                               const std::vector<int>& labels, double lambda, int max_iters = 800,
                               double tol = 1e-7);

/// Builds one record per participant from a canonical corpus plus binary
/// labels; every participant in `labels` must appear in the corpus.
std::vector<ParticipantRecord> build_participant_records(
    const std::vector<Scanpath>& corpus, const std::map<std::string, int>& labels);

EvalReport eval_participants(const ObfModel& model, const std::vector<ParticipantRecord>& records,
                             const std::vector<std::string>& roster, const LassoConfig& cfg,
                             std::uint64_t seed);

/// Identical CV protocol (same folds/seed) on the expert-feature vectors.
EvalReport expert_baseline(const std::vector<ParticipantRecord>& records,
                           const std::vector<std::string>& roster, const LassoConfig& cfg,
                           std::uint64_t seed);

}  // namespace obf
