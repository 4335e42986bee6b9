#include "obf/pretrain.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <thread>

#include "obf/csvio.hpp"
#include "obf/errors.hpp"
#include "obf/metrics.hpp"

namespace obf {

using nn::GradBuffer;
using nn::Mat;
using nn::Node;
using nn::Tape;

namespace {

constexpr std::size_t kChunk = 8;  // fixed reduction granularity, so results
                                   // do not depend on the thread count
constexpr double kClProbEps = 1e-7;

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

// Deterministic chunked parallel runner: chunk ci covers [ci*kChunk, end).
void run_chunked(std::size_t n, int threads,
                 const std::function<void(std::size_t ci, std::size_t b, std::size_t e)>& fn) {
    const std::size_t n_chunks = (n + kChunk - 1) / kChunk;
    if (n_chunks == 0) return;
    if (threads <= 1 || n_chunks == 1) {
        for (std::size_t ci = 0; ci < n_chunks; ++ci)
            fn(ci, ci * kChunk, std::min(n, (ci + 1) * kChunk));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t ci = next.fetch_add(1);
            if (ci >= n_chunks) return;
            try {
                fn(ci, ci * kChunk, std::min(n, (ci + 1) * kChunk));
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    const int n_workers = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(threads), n_chunks));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
    if (epochs < 1) throw DataError("pretrain.epochs must be >= 1");
    if (!(lr > 0)) throw DataError("pretrain.lr must be positive");
    if (lr_halving_every < 1) throw DataError("pretrain.lr_halving_every must be >= 1");
    if (!(grad_clip > 0)) throw DataError("pretrain.grad_clip must be positive");
    if (batch < 1) throw DataError("pretrain.batch must be >= 1");
    if (w_rc < 0 || w_pc < 0 || w_fi < 0 || w_cl < 0)
        throw DataError("pretrain task weights must be >= 0");
    if (w_rc == 0 && w_pc == 0 && w_fi == 0 && w_cl == 0)
        throw DataError("at least one pre-task weight must be nonzero");
    if (!(input_len_s.lo > 0) || !input_len_s.well_ordered())
        throw DataError("pretrain.input_len_s must be a positive ordered range");
    if (!(pc_horizon_ms > 0)) throw DataError("pretrain.pc_horizon_ms must be positive");
    if (!(cl_frac.lo > 0) || !(cl_frac.hi <= 1.0) || !cl_frac.well_ordered())
        throw DataError("pretrain.cl_frac must be an ordered range within (0,1]");
    if (!(train_frac > 0) || !(train_frac < 1))
        throw DataError("pretrain.train_frac must be in (0,1)");
    if (augment_enabled) augment.validate();
}

int PretrainConfig::input_min_samples() const {
    return static_cast<int>(std::llround(input_len_s.lo * kCanonicalHz));
}
int PretrainConfig::input_max_samples() const {
    return static_cast<int>(std::llround(input_len_s.hi * kCanonicalHz));
}
int PretrainConfig::pc_samples() const {
    return static_cast<int>(std::llround(pc_horizon_ms * kCanonicalHz / 1000.0));
}
int PretrainConfig::min_scanpath_len() const { return input_min_samples() + pc_samples(); }

double lr_at_epoch(const PretrainConfig& cfg, int epoch) {
    const int halvings = (epoch - 1) / cfg.lr_halving_every;
    return cfg.lr / std::pow(2.0, halvings);
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

nn::Mat scanpath_segment(const Scanpath& sp, std::size_t start, std::size_t len) {
    if (start + len > sp.points.size()) throw DataError("segment out of range");
    Mat m(2, static_cast<Eigen::Index>(len));
    for (std::size_t k = 0; k < len; ++k) {
        m(0, static_cast<Eigen::Index>(k)) = sp.points[start + k].x;
        m(1, static_cast<Eigen::Index>(k)) = sp.points[start + k].y;
    }
    return m;
}

SegmentPair sample_segment_pair(const Scanpath& sp, const PretrainConfig& cfg, Rng& rng) {
    const std::size_t len = sp.size();
    const int pc_n = cfg.pc_samples();
    if (len < static_cast<std::size_t>(cfg.min_scanpath_len()))
        throw DataError("scanpath too short for a segment pair (" + std::to_string(len) + " < " +
                        std::to_string(cfg.min_scanpath_len()) + " samples)");

    const int t_hi = std::min<int>(cfg.input_max_samples(), static_cast<int>(len) - pc_n);
    const int t = static_cast<int>(rng.uniform_int(cfg.input_min_samples(), t_hi));
    const int start = static_cast<int>(
        rng.uniform_int(0, static_cast<std::int64_t>(len) - t - pc_n));

    SegmentPair pair;
    pair.x = scanpath_segment(sp, static_cast<std::size_t>(start), static_cast<std::size_t>(t));
    pair.x_next = scanpath_segment(sp, static_cast<std::size_t>(start + t),
                                   static_cast<std::size_t>(pc_n));
    std::vector<Vec2> seg_points(sp.points.begin() + start, sp.points.begin() + start + t);
    pair.fi = ivt_labels(seg_points);
    pair.mask = balanced_mask(pair.fi, rng);
    return pair;
}

namespace {

Mat cut_cl_segment(const Scanpath& sp, const PretrainConfig& cfg, Rng& rng, int* start_out) {
    const auto len = static_cast<std::int64_t>(sp.size());
    const double frac = rng.uniform(cfg.cl_frac.lo, cfg.cl_frac.hi);
    const std::int64_t seg_len =
        std::clamp<std::int64_t>(std::llround(frac * static_cast<double>(len)), 1, len);
    const std::int64_t start = rng.uniform_int(0, len - seg_len);
    if (start_out) *start_out = static_cast<int>(start);
    return scanpath_segment(sp, static_cast<std::size_t>(start),
                            static_cast<std::size_t>(seg_len));
}

}  // namespace

std::vector<ClPair> sample_cl_pairs(const std::vector<const Scanpath*>& batch,
                                    const PretrainConfig& cfg, Rng& rng) {
    if (batch.size() < 2) throw DataError("sample_cl_pairs: batch must hold >= 2 scanpaths");
    for (const auto* sp : batch)
        if (sp->source_tag != batch.front()->source_tag)
            throw DataError("sample_cl_pairs: mixed sources in one batch");

    std::vector<ClPair> pairs;
    pairs.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        ClPair p;
        p.same_scanpath = rng.bernoulli(0.5) ? 1 : 0;
        if (p.same_scanpath) {
            int s1 = 0, s2 = 0;
            p.x1 = cut_cl_segment(*batch[i], cfg, rng, &s1);
            do {
                p.x2 = cut_cl_segment(*batch[i], cfg, rng, &s2);
            } while (s2 == s1);
        } else {
            std::size_t j = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(batch.size()) - 2));
            if (j >= i) ++j;
            p.x1 = cut_cl_segment(*batch[i], cfg, rng, nullptr);
            p.x2 = cut_cl_segment(*batch[j], cfg, rng, nullptr);
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

double loss_rc(const Mat& recon, const Mat& x) {
    if (recon.rows() != x.rows() || recon.cols() != x.cols())
        throw NumericalError("loss_rc: shape mismatch");
    return (recon - x).squaredNorm() / (2.0 * static_cast<double>(x.cols()));
}

double loss_pc(const Mat& pred, const Mat& x_next) {
    if (pred.rows() != x_next.rows() || pred.cols() != x_next.cols())
        throw NumericalError("loss_pc: shape mismatch");
    return (pred - x_next).squaredNorm() / (2.0 * static_cast<double>(x_next.cols()));
}

double loss_fi(const std::vector<double>& probs, const FixationLabels& labels,
               const SampleMask& mask) {
    if (probs.size() != labels.size() || mask.size() != labels.size())
        throw NumericalError("loss_fi: length mismatch");
    std::size_t n_fix = 0, n_sac = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) (labels[i] ? n_fix : n_sac)++;
    if (n_fix != n_sac) throw NumericalError("loss_fi: mask is not class-balanced");
    if (n_fix == 0) return 0.0;

    double fix_sum = 0.0, sac_sum = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        const double p = std::clamp(probs[i], kClProbEps, 1.0 - kClProbEps);
        if (labels[i])
            fix_sum += -std::log(p);
        else
            sac_sum += -std::log(1.0 - p);
    }
    return 0.5 * fix_sum / static_cast<double>(n_fix) + 0.5 * sac_sum / static_cast<double>(n_sac);
}

double loss_cl(double p, int s_flag) {
    const double pc = std::clamp(p, kClProbEps, 1.0 - kClProbEps);
    return s_flag ? -std::log(pc) : -std::log(1.0 - pc);
}

double total_loss(const LossParts& parts, const LossWeights& weights) {
    const struct {
        const char* name;
        double w, v;
    } items[] = {{"rc", weights.rc, parts.rc},
                 {"pc", weights.pc, parts.pc},
                 {"fi", weights.fi, parts.fi},
                 {"cl", weights.cl, parts.cl}};
    double sum = 0.0;
    for (const auto& it : items) {
        if (it.w == 0.0) continue;
        if (!std::isfinite(it.v))
            throw NumericalError(std::string("loss_") + it.name + " is non-finite");
        sum += it.w * it.v;
    }
    return sum;
}

// ---------------------------------------------------------------------------
// batch objective and gradient
// ---------------------------------------------------------------------------

namespace {

struct FiWeighting {
    Mat targets;  // 1 x t
    Mat weights;  // 1 x t; half weight per class over the masked samples
    bool any = false;
};

FiWeighting fi_weighting(const FixationLabels& labels, const SampleMask& mask) {
    FiWeighting w;
    const auto t = static_cast<Eigen::Index>(labels.size());
    w.targets = Mat::Zero(1, t);
    w.weights = Mat::Zero(1, t);
    std::size_t n_fix = 0, n_sac = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (mask[i]) (labels[i] ? n_fix : n_sac)++;
    if (n_fix != n_sac) throw NumericalError("fi mask is not class-balanced");
    if (n_fix == 0) return w;
    w.any = true;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        w.targets(0, static_cast<Eigen::Index>(i)) = labels[i] ? 1.0 : 0.0;
        if (mask[i])
            w.weights(0, static_cast<Eigen::Index>(i)) =
                labels[i] ? 0.5 / static_cast<double>(n_fix) : 0.5 / static_cast<double>(n_sac);
    }
    return w;
}

struct ClWork {
    std::unique_ptr<Tape> tape;
    Node* absdiff = nullptr;
};

}  // namespace

LossParts batch_objective(const ObfModel& model, const std::vector<SegmentPair>& segs,
                          const std::vector<ClPair>& cl_pairs, const PretrainConfig& cfg,
                          GradBuffer* sink, Mat* bn_mean, Mat* bn_var) {
    const TaskSet& tasks = model.tasks();
    const LossWeights w{cfg.w_rc, cfg.w_pc, cfg.w_fi, cfg.w_cl};
    const std::size_t b_seg = segs.size();
    const std::size_t b_cl = tasks.cl ? cl_pairs.size() : 0;
    if (b_seg == 0) throw DataError("batch_objective: empty batch");

    const std::size_t n_seg_chunks = (b_seg + kChunk - 1) / kChunk;
    const std::size_t n_cl_chunks = (b_cl + kChunk - 1) / kChunk;
    std::vector<GradBuffer> chunk_grads;
    if (sink) {
        chunk_grads.resize(std::max(n_seg_chunks, n_cl_chunks));
        for (auto& g : chunk_grads) g.reset(model.registry());
    }

    // Phase 1: per-pair tapes for the sequential tasks.
    std::vector<double> rc_vals(b_seg, 0.0), pc_vals(b_seg, 0.0), fi_vals(b_seg, 0.0);
    run_chunked(b_seg, cfg.threads, [&](std::size_t ci, std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const SegmentPair& seg = segs[i];
            Tape tape;
            tape.grad_enabled = sink != nullptr;
            auto enc = model.encode(tape, seg.x);
            Node* weighted = nullptr;
            auto add_part = [&](Node* part, double weight) {
                Node* scaled = tape.scale(part, weight / static_cast<double>(b_seg));
                weighted = weighted ? tape.add(weighted, scaled) : scaled;
            };
            if (tasks.rc) {
                Node* out = model.decode_rc(tape, enc, static_cast<int>(seg.x.cols()), &seg.x);
                Node* l = tape.scale(tape.sumsq(tape.sub(out, tape.leaf(seg.x))),
                                     1.0 / (2.0 * static_cast<double>(seg.x.cols())));
                rc_vals[i] = l->value(0, 0);
                add_part(l, w.rc);
            }
            if (tasks.pc) {
                Node* out = model.decode_pc(tape, enc, static_cast<int>(seg.x_next.cols()),
                                            &seg.x_next);
                Node* l = tape.scale(tape.sumsq(tape.sub(out, tape.leaf(seg.x_next))),
                                     1.0 / (2.0 * static_cast<double>(seg.x_next.cols())));
                pc_vals[i] = l->value(0, 0);
                add_part(l, w.pc);
            }
            if (tasks.fi) {
                FiWeighting fw = fi_weighting(seg.fi, seg.mask);
                if (fw.any) {
                    Node* logits = model.decode_fi(tape, enc, seg.x);
                    Node* l = tape.bce_logit_wsum(logits, fw.targets, fw.weights);
                    fi_vals[i] = l->value(0, 0);
                    add_part(l, w.fi);
                }
            }
            if (sink && weighted) tape.backward(weighted, chunk_grads[ci]);
        }
    });
    if (sink)
        for (std::size_t ci = 0; ci < n_seg_chunks; ++ci) sink->accumulate(chunk_grads[ci]);

    LossParts parts;
    parts.rc = tasks.rc ? 0.0 : nan_value();
    parts.pc = tasks.pc ? 0.0 : nan_value();
    parts.fi = tasks.fi ? 0.0 : nan_value();
    parts.cl = tasks.cl && b_cl > 0 ? 0.0 : nan_value();
    for (std::size_t i = 0; i < b_seg; ++i) {
        if (tasks.rc) parts.rc += rc_vals[i] / static_cast<double>(b_seg);
        if (tasks.pc) parts.pc += pc_vals[i] / static_cast<double>(b_seg);
        if (tasks.fi) parts.fi += fi_vals[i] / static_cast<double>(b_seg);
    }
    if (b_cl == 0) return parts;

    // Phase 2: CL encodes (tapes kept alive for the head backward).
    std::vector<ClWork> work(b_cl);
    run_chunked(b_cl, cfg.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t j = begin; j < end; ++j) {
            work[j].tape = std::make_unique<Tape>();
            Tape& tape = *work[j].tape;
            tape.grad_enabled = sink != nullptr;
            auto e1 = model.encode(tape, cl_pairs[j].x1);
            auto e2 = model.encode(tape, cl_pairs[j].x2);
            work[j].absdiff = tape.abs_(tape.sub(e1.embedding, e2.embedding));
        }
    });

    // Phase 3: Siamese head over the batch of |e1-e2| columns.
    Tape head;
    head.grad_enabled = sink != nullptr;
    Mat d(model.config().embedding_dim(), static_cast<Eigen::Index>(b_cl));
    Mat targets(1, static_cast<Eigen::Index>(b_cl));
    for (std::size_t j = 0; j < b_cl; ++j) {
        d.col(static_cast<Eigen::Index>(j)) = work[j].absdiff->value.col(0);
        targets(0, static_cast<Eigen::Index>(j)) = cl_pairs[j].same_scanpath ? 1.0 : 0.0;
    }
    Node* d_in = head.input(std::move(d));
    Node* bn_node = nullptr;
    Node* logits = model.cl_head_logits(head, d_in, /*train_mode=*/true, &bn_node);
    for (std::size_t j = 0; j < b_cl; ++j)
        parts.cl += loss_cl(nn::sigmoid_scalar(logits->value(0, static_cast<Eigen::Index>(j))),
                            cl_pairs[j].same_scanpath) /
                    static_cast<double>(b_cl);
    if (bn_mean && bn_var) Tape::bn_batch_stats(bn_node, *bn_mean, *bn_var);

    if (sink) {
        Node* head_loss = head.bce_logit_wsum(
            logits, targets, Mat::Constant(1, static_cast<Eigen::Index>(b_cl),
                                           w.cl / static_cast<double>(b_cl)));
        head.backward(head_loss, *sink);

        // Route the head's input gradient back into the per-pair tapes.
        for (auto& g : chunk_grads) g.reset(model.registry());
        const Mat& d_grad = d_in->grad;
        run_chunked(b_cl, cfg.threads, [&](std::size_t ci, std::size_t begin, std::size_t end) {
            for (std::size_t j = begin; j < end; ++j)
                work[j].tape->backward_from(work[j].absdiff,
                                            d_grad.col(static_cast<Eigen::Index>(j)),
                                            chunk_grads[ci]);
        });
        for (std::size_t ci = 0; ci < n_cl_chunks; ++ci) sink->accumulate(chunk_grads[ci]);
    }
    return parts;
}

void sgd_apply(nn::ParamRegistry& reg, const GradBuffer& grads, double lr, double clip) {
    const auto& params = reg.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Mat clipped = grads.g[i].cwiseMax(-clip).cwiseMin(clip);
        params[i]->value -= lr * clipped;
    }
}

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

namespace {

double objective_value(const ObfModel& model, const std::vector<SegmentPair>& segs,
                       const std::vector<ClPair>& cl_pairs, const PretrainConfig& cfg) {
    LossParts parts = batch_objective(model, segs, cl_pairs, cfg, nullptr);
    double total = 0.0;
    if (std::isfinite(parts.rc)) total += cfg.w_rc * parts.rc;
    if (std::isfinite(parts.pc)) total += cfg.w_pc * parts.pc;
    if (std::isfinite(parts.fi)) total += cfg.w_fi * parts.fi;
    if (std::isfinite(parts.cl)) total += cfg.w_cl * parts.cl;
    return total;
}

}  // namespace

double grad_check(const ObfModel& model, const std::vector<SegmentPair>& segs,
                  const std::vector<ClPair>& cl_pairs, const PretrainConfig& cfg, int n_params,
                  Rng& rng) {
    auto& mutable_model = const_cast<ObfModel&>(model);
    GradBuffer analytic;
    analytic.reset(model.registry());
    batch_objective(model, segs, cl_pairs, cfg, &analytic);

    // Flat index space over all parameters.
    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    for (std::size_t pi = 0; pi < model.registry().params().size(); ++pi)
        for (Eigen::Index k = 0; k < model.registry().params()[pi]->value.size(); ++k)
            coords.emplace_back(pi, k);
    const std::size_t total = coords.size();
    const std::size_t n_check = std::min<std::size_t>(static_cast<std::size_t>(n_params), total);
    // Partial shuffle to pick distinct coordinates.
    for (std::size_t k = 0; k < n_check; ++k) {
        const std::size_t j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(k), static_cast<std::int64_t>(total) - 1));
        std::swap(coords[k], coords[j]);
    }

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t k = 0; k < n_check; ++k) {
        auto [pi, off] = coords[k];
        nn::Param* p = mutable_model.registry().params()[pi];
        const double saved = p->value(off);
        p->value(off) = saved + h;
        const double lp = objective_value(model, segs, cl_pairs, cfg);
        p->value(off) = saved - h;
        const double lm = objective_value(model, segs, cl_pairs, cfg);
        p->value(off) = saved;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = analytic.g[pi](off);
        const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
        worst = std::max(worst, err);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalSegments build_eval_segments(const std::vector<const Scanpath*>& valset,
                                 const PretrainConfig& cfg, Rng& rng) {
    EvalSegments ev;
    for (const auto* sp : valset) ev.segs.push_back(sample_segment_pair(*sp, cfg, rng));

    // CL pairs per source with at least two validation scanpaths.
    std::map<std::string, std::vector<const Scanpath*>> by_source;
    for (const auto* sp : valset) by_source[sp->source_tag].push_back(sp);
    for (auto& [tag, group] : by_source) {
        if (group.size() < 2) continue;
        auto pairs = sample_cl_pairs(group, cfg, rng);
        ev.cl_pairs.insert(ev.cl_pairs.end(), pairs.begin(), pairs.end());
    }
    return ev;
}

PretaskMetrics evaluate_on_segments(const ObfModel& model, const EvalSegments& ev, int threads) {
    const TaskSet& tasks = model.tasks();
    PretaskMetrics m;
    const std::size_t n = ev.segs.size();
    if (n == 0) throw DataError("evaluate: empty validation set");

    struct ChunkAcc {
        double rc_dist = 0.0, pc_dist = 0.0;
        std::size_t rc_n = 0, pc_n = 0;
        std::vector<std::pair<double, int>> fi_scores;
    };
    std::vector<ChunkAcc> acc((n + kChunk - 1) / kChunk);

    run_chunked(n, threads, [&](std::size_t ci, std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const SegmentPair& seg = ev.segs[i];
            const int t = static_cast<int>(seg.x.cols());
            if (tasks.rc) {
                const Mat recon = model.decode_rc_eval(seg.x, t);
                for (int k = 0; k < t; ++k)
                    acc[ci].rc_dist += (recon.col(k) - seg.x.col(k)).norm();
                acc[ci].rc_n += static_cast<std::size_t>(t);
            }
            if (tasks.pc) {
                const int tn = static_cast<int>(seg.x_next.cols());
                const Mat pred = model.decode_pc_eval(seg.x, tn);
                for (int k = 0; k < tn; ++k)
                    acc[ci].pc_dist += (pred.col(k) - seg.x_next.col(k)).norm();
                acc[ci].pc_n += static_cast<std::size_t>(tn);
            }
            if (tasks.fi) {
                const auto probs = model.decode_fi_eval(seg.x);
                for (std::size_t k = 0; k < probs.size(); ++k)
                    acc[ci].fi_scores.emplace_back(probs[k], seg.fi[k] ? 1 : 0);
            }
        }
    });

    double rc_sum = 0.0, pc_sum = 0.0;
    std::size_t rc_n = 0, pc_n = 0;
    std::vector<std::pair<double, int>> fi_scores;
    for (const auto& a : acc) {
        rc_sum += a.rc_dist;
        pc_sum += a.pc_dist;
        rc_n += a.rc_n;
        pc_n += a.pc_n;
        fi_scores.insert(fi_scores.end(), a.fi_scores.begin(), a.fi_scores.end());
    }
    if (tasks.rc && rc_n) m.rc_dist = rc_sum / static_cast<double>(rc_n);
    if (tasks.pc && pc_n) m.pc_dist = pc_sum / static_cast<double>(pc_n);
    if (tasks.fi && !fi_scores.empty()) m.fi_auc = rank_auc(fi_scores);

    if (tasks.cl && !ev.cl_pairs.empty()) {
        const std::size_t nc = ev.cl_pairs.size();
        std::vector<int> correct((nc + kChunk - 1) / kChunk, 0);
        run_chunked(nc, threads, [&](std::size_t ci, std::size_t begin, std::size_t end) {
            for (std::size_t j = begin; j < end; ++j) {
                const nn::Mat e1 = model.embed(ev.cl_pairs[j].x1);
                const nn::Mat e2 = model.embed(ev.cl_pairs[j].x2);
                const double p = model.cl_probability(e1, e2);
                const int pred = p > 0.5 ? 1 : 0;
                if (pred == ev.cl_pairs[j].same_scanpath) correct[ci]++;
            }
        });
        std::size_t total_correct = 0;
        for (int c : correct) total_correct += static_cast<std::size_t>(c);
        m.cl_acc = static_cast<double>(total_correct) / static_cast<double>(nc);
    }
    return m;
}

PretaskMetrics evaluate_pretasks(const ObfModel& model,
                                 const std::vector<const Scanpath*>& valset,
                                 const PretrainConfig& cfg, Rng& rng) {
    EvalSegments ev = build_eval_segments(valset, cfg, rng);
    return evaluate_on_segments(model, ev, cfg.threads);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

TrainResult train(const std::vector<Scanpath>& corpus, const ModelConfig& mcfg,
                  const PretrainConfig& pcfg) {
    mcfg.validate();
    pcfg.validate();

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus[i].size() >= static_cast<std::size_t>(pcfg.min_scanpath_len()))
            usable.push_back(i);
    if (usable.size() < 2)
        throw DataError("pretraining needs >= 2 scanpaths of at least " +
                        std::to_string(pcfg.min_scanpath_len()) + " samples (" +
                        std::to_string(usable.size()) + " usable)");

    Rng root(pcfg.seed);

    // Scanpath-level split.
    {
        Rng split_rng = root.derive("split");
        for (std::size_t k = usable.size(); k > 1; --k) {
            const std::size_t j = static_cast<std::size_t>(
                split_rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            std::swap(usable[k - 1], usable[j]);
        }
    }
    const std::size_t n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(pcfg.train_frac * static_cast<double>(usable.size()))),
        1, usable.size() - 1);

    TrainResult result;
    result.train_indices.assign(usable.begin(), usable.begin() + static_cast<std::ptrdiff_t>(n_train));
    result.val_indices.assign(usable.begin() + static_cast<std::ptrdiff_t>(n_train), usable.end());

    const TaskSet tasks = pcfg.task_set();
    if (tasks.cl) {
        std::map<std::string, std::size_t> per_source;
        for (auto i : result.train_indices) per_source[corpus[i].source_tag]++;
        for (const auto& [tag, count] : per_source)
            if (count < 2)
                throw DataError("source '" + tag + "' has " + std::to_string(count) +
                                " training scanpath(s); the CL task needs >= 2 per source");
    }

    result.model = std::make_unique<ObfModel>(mcfg, tasks, pcfg.seed);
    ObfModel& model = *result.model;

    std::vector<const Scanpath*> val_ptrs;
    for (auto i : result.val_indices) val_ptrs.push_back(&corpus[i]);

    GradBuffer grads;
    std::size_t batch_counter = 0;
    for (int epoch = 1; epoch <= pcfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(pcfg, epoch);

        // Epoch order, then single-source batches in encounter order.
        std::vector<std::size_t> order = result.train_indices;
        {
            Rng order_rng = root.derive("order", static_cast<std::uint64_t>(epoch));
            for (std::size_t k = order.size(); k > 1; --k) {
                const std::size_t j = static_cast<std::size_t>(
                    order_rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
                std::swap(order[k - 1], order[j]);
            }
        }
        std::vector<std::string> source_order;
        std::map<std::string, std::vector<std::size_t>> by_source;
        for (auto idx : order) {
            auto& bucket = by_source[corpus[idx].source_tag];
            if (bucket.empty()) source_order.push_back(corpus[idx].source_tag);
            bucket.push_back(idx);
        }
        std::vector<std::vector<std::size_t>> batches;
        for (const auto& tag : source_order) {
            const auto& list = by_source[tag];
            std::vector<std::vector<std::size_t>> chunks;
            for (std::size_t b = 0; b < list.size(); b += static_cast<std::size_t>(pcfg.batch))
                chunks.emplace_back(
                    list.begin() + static_cast<std::ptrdiff_t>(b),
                    list.begin() + static_cast<std::ptrdiff_t>(
                                       std::min(list.size(), b + static_cast<std::size_t>(pcfg.batch))));
            // A singleton tail cannot form CL pairs; borrow from the
            // previous batch of the same source.
            if (tasks.cl && chunks.size() >= 2 && chunks.back().size() == 1 &&
                chunks[chunks.size() - 2].size() >= 2) {
                auto& prev = chunks[chunks.size() - 2];
                chunks.back().push_back(prev.back());
                prev.pop_back();
            }
            for (auto& c : chunks) batches.push_back(std::move(c));
        }

        LossParts epoch_sum;
        std::size_t epoch_pairs = 0;
        for (const auto& batch : batches) {
            std::vector<Scanpath> augmented;  // holds augment copies alive
            std::vector<const Scanpath*> batch_ptrs;
            batch_ptrs.reserve(batch.size());
            if (pcfg.augment_enabled) {
                augmented.reserve(batch.size());
                for (auto idx : batch) {
                    Rng aug_rng = root.derive("aug", static_cast<std::uint64_t>(epoch), idx);
                    augmented.push_back(augment(corpus[idx], pcfg.augment, aug_rng));
                    batch_ptrs.push_back(&augmented.back());
                }
            } else {
                for (auto idx : batch) batch_ptrs.push_back(&corpus[idx]);
            }

            std::vector<SegmentPair> segs;
            segs.reserve(batch.size());
            for (std::size_t k = 0; k < batch.size(); ++k) {
                Rng seg_rng = root.derive("seg", static_cast<std::uint64_t>(epoch), batch[k]);
                segs.push_back(sample_segment_pair(*batch_ptrs[k], pcfg, seg_rng));
            }
            std::vector<ClPair> cl_pairs;
            if (tasks.cl) {
                Rng cl_rng = root.derive("cl", static_cast<std::uint64_t>(epoch), batch_counter);
                cl_pairs = sample_cl_pairs(batch_ptrs, pcfg, cl_rng);
            }
            ++batch_counter;

            grads.reset(model.registry());
            Mat bn_mean, bn_var;
            LossParts parts = batch_objective(model, segs, cl_pairs, pcfg, &grads, &bn_mean,
                                              &bn_var);
            // Surfaces non-finite losses as a NumericalError naming the
            // task (disabled tasks carry weight 0 and are skipped).
            (void)total_loss(parts, LossWeights{pcfg.w_rc, pcfg.w_pc, pcfg.w_fi, pcfg.w_cl});
            if (tasks.cl && bn_mean.size() > 0)
                model.cl_update_running_stats_values(bn_mean, bn_var,
                                                     static_cast<int>(cl_pairs.size()));
            sgd_apply(model.registry(), grads, lr, pcfg.grad_clip);

            const double nb = static_cast<double>(batch.size());
            if (tasks.rc) epoch_sum.rc += parts.rc * nb;
            if (tasks.pc) epoch_sum.pc += parts.pc * nb;
            if (tasks.fi) epoch_sum.fi += parts.fi * nb;
            if (tasks.cl) epoch_sum.cl += parts.cl * nb;
            epoch_pairs += batch.size();
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr;
        const double np = static_cast<double>(epoch_pairs);
        entry.train.rc = tasks.rc ? epoch_sum.rc / np : nan_value();
        entry.train.pc = tasks.pc ? epoch_sum.pc / np : nan_value();
        entry.train.fi = tasks.fi ? epoch_sum.fi / np : nan_value();
        entry.train.cl = tasks.cl ? epoch_sum.cl / np : nan_value();

        Rng eval_rng = root.derive("eval", static_cast<std::uint64_t>(epoch));
        entry.val = evaluate_pretasks(model, val_ptrs, pcfg, eval_rng);
        result.log.push_back(entry);
    }
    return result;
}

void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
    auto field = [](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
    AtomicFileWriter w(path);
    w.write(
        "epoch,lr,loss_rc,loss_pc,loss_fi,loss_cl,val_rc_dist,val_pc_dist,val_fi_auc,val_cl_acc\n");
    for (const auto& e : log) {
        w.write(std::to_string(e.epoch) + "," + format_double(e.lr) + "," + field(e.train.rc) +
                "," + field(e.train.pc) + "," + field(e.train.fi) + "," + field(e.train.cl) + "," +
                field(e.val.rc_dist) + "," + field(e.val.pc_dist) + "," + field(e.val.fi_auc) +
                "," + field(e.val.cl_acc) + "\n");
    }
    w.commit();
}

}  // namespace obf
