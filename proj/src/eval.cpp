#include "obf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "obf/errors.hpp"
#include "obf/metrics.hpp"
#include "obf/pretrain.hpp"

namespace obf {

using nn::GradBuffer;
using nn::Mat;
using nn::Node;
using nn::Param;
using nn::ParamRegistry;
using nn::Tape;

nn::Mat extract_embedding(const ObfModel& model, const Scanpath& sp) {
    if (static_cast<int>(sp.size()) < model.config().min_input_len())
        throw DataError("scanpath too short to embed (" + std::to_string(sp.size()) + " samples)");
    return model.embed(scanpath_segment(sp, 0, sp.size()));
}

// ---------------------------------------------------------------------------
// MLP stack shared by the supervised head and the metric projection head
// ---------------------------------------------------------------------------

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

void init_uniform(Param& p, Rng& rng, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = rng.uniform(-bound, bound);
}

Mat dropout_mask(int rows, int cols, double p, Rng& rng) {
    Mat m(rows, cols);
    const double keep_scale = 1.0 / (1.0 - p);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            m(i, j) = rng.bernoulli(1.0 - p) ? keep_scale : 0.0;
    return m;
}

// Two hidden layers; each is linear -> dropout -> sigmoid -> batch norm.
class MlpStack {
public:
    MlpStack(int in_dim, int h1, int h2, int out_dim, std::uint64_t seed) {
        Rng rng(seed);
        auto make = [&](Param& p, const char* name, int r, int c) {
            p.name = name;
            p.value = Mat::Zero(r, c);
            init_uniform(p, rng, c);
            reg_.add(p);
        };
        auto make_vec = [&](Param& p, const char* name, int r, double fill) {
            p.name = name;
            p.value = Mat::Constant(r, 1, fill);
            reg_.add(p);
        };
        make(w1_, "head.w1", h1, in_dim);
        make_vec(b1_, "head.b1", h1, 0.0);
        make_vec(g1_, "head.bn1.g", h1, 1.0);
        make_vec(be1_, "head.bn1.b", h1, 0.0);
        make(w2_, "head.w2", h2, h1);
        make_vec(b2_, "head.b2", h2, 0.0);
        make_vec(g2_, "head.bn2.g", h2, 1.0);
        make_vec(be2_, "head.bn2.b", h2, 0.0);
        make(w3_, "head.w3", out_dim, h2);
        make_vec(b3_, "head.b3", out_dim, 0.0);
        rm1_ = Mat::Zero(h1, 1);
        rv1_ = Mat::Ones(h1, 1);
        rm2_ = Mat::Zero(h2, 1);
        rv2_ = Mat::Ones(h2, 1);
    }

    ParamRegistry& reg() { return reg_; }

    Node* forward(Tape& t, Node* x, bool train, double dropout, Rng* drop_rng) {
        Node* h = t.affine(w1_, x, b1_);
        h = layer_tail(t, h, train, dropout, drop_rng, g1_, be1_, rm1_, rv1_);
        h = t.affine(w2_, h, b2_);
        h = layer_tail(t, h, train, dropout, drop_rng, g2_, be2_, rm2_, rv2_);
        return t.affine(w3_, h, b3_);
    }

    Mat forward_eval(const Mat& x) {
        Tape t;
        t.grad_enabled = false;
        return forward(t, t.leaf(x), false, 0.0, nullptr)->value;
    }

private:
    Node* layer_tail(Tape& t, Node* h, bool train, double dropout, Rng* drop_rng, Param& g,
                     Param& be, Mat& rm, Mat& rv) {
        if (train && dropout > 0.0)
            h = t.dropout(h, dropout_mask(static_cast<int>(h->value.rows()),
                                          static_cast<int>(h->value.cols()), dropout, *drop_rng));
        h = t.sigmoid(h);
        if (train) {
            Node* bn = t.batch_norm_train(h, t.param(g), t.param(be), kBnEps);
            Mat mean, var;
            Tape::bn_batch_stats(bn, mean, var);
            const double b = static_cast<double>(h->value.cols());
            const double unbias = b > 1.5 ? b / (b - 1.0) : 1.0;
            rm = (1.0 - kBnMomentum) * rm + kBnMomentum * mean;
            rv = (1.0 - kBnMomentum) * rv + kBnMomentum * (var * unbias);
            return bn;
        }
        return t.batch_norm_eval(h, t.param(g), t.param(be), rm, rv, kBnEps);
    }

    Param w1_, b1_, g1_, be1_, w2_, b2_, g2_, be2_, w3_, b3_;
    Mat rm1_, rv1_, rm2_, rv2_;
    ParamRegistry reg_;
};

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t k = n; k > 1; --k) {
        const std::size_t j =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        std::swap(order[k - 1], order[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch))
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                             order.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(n, b + static_cast<std::size_t>(batch))));
    // batch norm needs >= 2 columns in train mode
    if (batches.size() >= 2 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back()[0]);
        batches.pop_back();
    }
    return batches;
}

}  // namespace

// ---------------------------------------------------------------------------
// supervised stimulus prediction
// ---------------------------------------------------------------------------

namespace {

struct StimulusSplit {
    std::vector<std::string> classes;                       // chosen stimulus ids
    std::vector<std::pair<const Scanpath*, int>> support;   // (scanpath, class)
    std::vector<std::pair<const Scanpath*, int>> query;
};

StimulusSplit split_stimulus_task(const std::vector<Scanpath>& corpus, int c_ways, int k_shots,
                                  Rng& rng) {
    std::map<std::string, std::map<std::string, std::vector<const Scanpath*>>> by_stim_user;
    for (const auto& sp : corpus) by_stim_user[sp.stimulus_id][sp.participant_id].push_back(&sp);

    std::vector<std::string> stimuli;
    for (const auto& [sid, users] : by_stim_user) stimuli.push_back(sid);
    if (static_cast<int>(stimuli.size()) < c_ways)
        throw DataError("corpus has " + std::to_string(stimuli.size()) + " stimuli, need " +
                        std::to_string(c_ways));
    for (std::size_t k = stimuli.size(); k > 1; --k) {
        const std::size_t j =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        std::swap(stimuli[k - 1], stimuli[j]);
    }
    stimuli.resize(static_cast<std::size_t>(c_ways));

    StimulusSplit split;
    split.classes = stimuli;
    for (int c = 0; c < c_ways; ++c) {
        auto& users = by_stim_user[stimuli[static_cast<std::size_t>(c)]];
        std::vector<std::string> user_ids;
        for (const auto& [uid, sps] : users) user_ids.push_back(uid);
        if (static_cast<int>(user_ids.size()) <= k_shots)
            throw DataError("stimulus '" + stimuli[static_cast<std::size_t>(c)] + "' has " +
                            std::to_string(user_ids.size()) + " users; k_shots must be smaller");
        for (std::size_t k = user_ids.size(); k > 1; --k) {
            const std::size_t j =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            std::swap(user_ids[k - 1], user_ids[j]);
        }
        for (std::size_t u = 0; u < user_ids.size(); ++u) {
            auto& dest = (u < static_cast<std::size_t>(k_shots)) ? split.support : split.query;
            for (const Scanpath* sp : users[user_ids[u]]) dest.emplace_back(sp, c);
        }
    }
    return split;
}

}  // namespace

StimulusEvalResult eval_stimulus_supervised(ObfModel& model, const std::vector<Scanpath>& corpus,
                                            const StimulusTaskSpec& spec,
                                            const MlpHeadConfig& head_cfg, Rng& rng) {
    StimulusSplit split = split_stimulus_task(corpus, spec.c_ways, spec.k_shots, rng);
    MlpStack head(model.config().embedding_dim(), head_cfg.h1, head_cfg.h2, spec.c_ways,
                  rng.derive("head-init").seed());
    Rng fit_rng = rng.derive("head-fit");

    const std::size_t n = split.support.size();
    std::vector<Mat> support_emb(n);
    if (!head_cfg.finetune_encoder)
        for (std::size_t i = 0; i < n; ++i)
            support_emb[i] = extract_embedding(model, *split.support[i].first);

    for (int epoch = 0; epoch < head_cfg.epochs; ++epoch) {
        for (const auto& batch : make_batches(n, head_cfg.batch, fit_rng)) {
            Tape tape;
            std::vector<Node*> cols;
            std::vector<int> labels;
            for (auto idx : batch) {
                if (head_cfg.finetune_encoder) {
                    const Scanpath& sp = *split.support[idx].first;
                    cols.push_back(
                        model.encode(tape, scanpath_segment(sp, 0, sp.size())).embedding);
                } else {
                    cols.push_back(tape.leaf(support_emb[idx]));
                }
                labels.push_back(split.support[idx].second);
            }
            Node* x = tape.gather_cols(cols);
            Node* logits = head.forward(tape, x, true, head_cfg.dropout, &fit_rng);
            Node* loss = tape.softmax_ce_cols(logits, labels);

            if (head_cfg.finetune_encoder) {
                ParamRegistry session;
                session.add_all(model.registry());
                session.add_all(head.reg());
                GradBuffer grads;
                grads.reset(session);
                tape.backward(loss, grads);
                sgd_apply(session, grads, head_cfg.lr, 1e30);
                model.registry().reindex();
                head.reg().reindex();
            } else {
                GradBuffer grads;
                grads.reset(head.reg());
                tape.backward(loss, grads);
                sgd_apply(head.reg(), grads, head_cfg.lr, 1e30);
            }
        }
    }

    StimulusEvalResult result;
    result.seed = rng.seed();
    for (const auto& [sp, label] : split.query) {
        const Mat emb = extract_embedding(model, *sp);
        const Mat logits = head.forward_eval(emb);
        int best = 0;
        for (int c = 1; c < spec.c_ways; ++c)
            if (logits(c, 0) > logits(best, 0)) best = c;
        if (best == label) ++result.n_correct;
        ++result.n_total;
    }
    result.accuracy =
        result.n_total ? static_cast<double>(result.n_correct) / result.n_total : 0.0;
    return result;
}

// ---------------------------------------------------------------------------
// metric-based stimulus prediction (prototypical network)
// ---------------------------------------------------------------------------

namespace {

struct EpisodePool {
    // stimulus id -> user id -> scanpaths
    std::map<std::string, std::map<std::string, std::vector<const Scanpath*>>> by_stim;
    std::vector<std::string> stimuli;  // stimuli with enough users
};

EpisodePool build_pool(const std::vector<Scanpath>& corpus, const std::set<std::string>& allowed,
                       int min_users) {
    EpisodePool pool;
    for (const auto& sp : corpus)
        if (allowed.count(sp.stimulus_id))
            pool.by_stim[sp.stimulus_id][sp.participant_id].push_back(&sp);
    for (const auto& [sid, users] : pool.by_stim)
        if (static_cast<int>(users.size()) >= min_users) pool.stimuli.push_back(sid);
    return pool;
}

struct Episode {
    std::vector<const Scanpath*> support;  // c*k, class-major
    std::vector<const Scanpath*> query;
    std::vector<int> query_labels;
    int c = 0, k = 0;
};

Episode sample_episode(const EpisodePool& pool, int c_ways, int k_shots, int query_per_class,
                       Rng& rng) {
    if (static_cast<int>(pool.stimuli.size()) < c_ways)
        throw DataError("episode pool has " + std::to_string(pool.stimuli.size()) +
                        " usable stimuli, need " + std::to_string(c_ways));
    std::vector<std::string> ids = pool.stimuli;
    for (std::size_t k = ids.size(); k > 1; --k) {
        const std::size_t j =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        std::swap(ids[k - 1], ids[j]);
    }
    Episode ep;
    ep.c = c_ways;
    ep.k = k_shots;
    for (int c = 0; c < c_ways; ++c) {
        const auto& users = pool.by_stim.at(ids[static_cast<std::size_t>(c)]);
        std::vector<std::string> user_ids;
        for (const auto& [uid, sps] : users) user_ids.push_back(uid);
        for (std::size_t k = user_ids.size(); k > 1; --k) {
            const std::size_t j =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            std::swap(user_ids[k - 1], user_ids[j]);
        }
        const int n_query = std::min<int>(query_per_class,
                                          static_cast<int>(user_ids.size()) - k_shots);
        for (int u = 0; u < k_shots; ++u)
            ep.support.push_back(users.at(user_ids[static_cast<std::size_t>(u)]).front());
        for (int u = 0; u < n_query; ++u) {
            ep.query.push_back(
                users.at(user_ids[static_cast<std::size_t>(k_shots + u)]).front());
            ep.query_labels.push_back(c);
        }
    }
    if (ep.query.empty()) throw DataError("episode has no query examples; reduce k_shots");
    return ep;
}

// Squared distances class-prototypes x queries as a graph node (c x nq).
Node* proto_sq_distances(Tape& t, Node* protos, Node* queries) {
    const int d = static_cast<int>(protos->value.rows());
    const int c = static_cast<int>(protos->value.cols());
    const int nq = static_cast<int>(queries->value.cols());
    Node* pn = t.matmul(t.cmul(protos, protos), t.leaf(Mat::Ones(d, 1)), true, false);  // c x 1
    Node* qn = t.matmul(t.leaf(Mat::Ones(1, d)), t.cmul(queries, queries));             // 1 x nq
    Node* cross = t.matmul(protos, queries, true, false);                               // c x nq
    Node* d2 = t.add(t.matmul(pn, t.leaf(Mat::Ones(1, nq))),
                     t.add(t.matmul(t.leaf(Mat::Ones(c, 1)), qn), t.scale(cross, -2.0)));
    return d2;
}

}  // namespace

StimulusEvalResult eval_stimulus_metric(ObfModel& model, const std::vector<Scanpath>& corpus,
                                        const StimulusTaskSpec& spec,
                                        const MlpHeadConfig& head_cfg, Rng& rng) {
    // Reserve meta-training stimuli; evaluation episodes draw from the rest.
    std::set<std::string> all_stimuli;
    for (const auto& sp : corpus) all_stimuli.insert(sp.stimulus_id);
    std::vector<std::string> ids(all_stimuli.begin(), all_stimuli.end());
    {
        Rng split_rng = rng.derive("meta-split");
        for (std::size_t k = ids.size(); k > 1; --k) {
            const std::size_t j = static_cast<std::size_t>(
                split_rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            std::swap(ids[k - 1], ids[j]);
        }
    }
    const std::size_t n_meta_train =
        std::min<std::size_t>(static_cast<std::size_t>(spec.meta_train_stimuli), ids.size());
    std::set<std::string> train_ids(ids.begin(),
                                    ids.begin() + static_cast<std::ptrdiff_t>(n_meta_train));
    std::set<std::string> test_ids(ids.begin() + static_cast<std::ptrdiff_t>(n_meta_train),
                                   ids.end());
    if (static_cast<int>(test_ids.size()) < spec.c_ways)
        throw DataError("meta-test set would hold " + std::to_string(test_ids.size()) +
                        " stimuli after reserving " + std::to_string(n_meta_train) +
                        " for meta-training; cannot run " + std::to_string(spec.c_ways) +
                        "-way episodes");

    const int min_users = spec.k_shots + 1;
    EpisodePool train_pool = build_pool(corpus, train_ids, min_users);
    EpisodePool test_pool = build_pool(corpus, test_ids, min_users);
    if (static_cast<int>(train_pool.stimuli.size()) < spec.c_ways)
        throw DataError("not enough meta-training stimuli with " + std::to_string(min_users) +
                        "+ users");

    MlpStack proj(model.config().embedding_dim(), head_cfg.h1, head_cfg.h2, head_cfg.proj_dim,
                  rng.derive("proto-init").seed());

    // Embeddings are extracted once (frozen encoder unless fine-tuning).
    std::map<const Scanpath*, Mat> emb_cache;
    auto embed_of = [&](const Scanpath* sp) -> const Mat& {
        auto it = emb_cache.find(sp);
        if (it == emb_cache.end())
            it = emb_cache.emplace(sp, extract_embedding(model, *sp)).first;
        return it->second;
    };

    Rng train_rng = rng.derive("proto-train");
    for (int epoch = 0; epoch < head_cfg.proto_epochs; ++epoch) {
        for (int iter = 0; iter < head_cfg.proto_iters; ++iter) {
            Episode ep = sample_episode(train_pool, spec.c_ways, spec.k_shots,
                                        spec.query_per_class, train_rng);
            Tape tape;
            std::vector<Node*> scols, qcols;
            for (const auto* sp : ep.support) {
                if (head_cfg.finetune_encoder)
                    scols.push_back(
                        model.encode(tape, scanpath_segment(*sp, 0, sp->size())).embedding);
                else
                    scols.push_back(tape.leaf(embed_of(sp)));
            }
            for (const auto* sp : ep.query) {
                if (head_cfg.finetune_encoder)
                    qcols.push_back(
                        model.encode(tape, scanpath_segment(*sp, 0, sp->size())).embedding);
                else
                    qcols.push_back(tape.leaf(embed_of(sp)));
            }
            Node* all = tape.gather_cols([&] {
                std::vector<Node*> v = scols;
                v.insert(v.end(), qcols.begin(), qcols.end());
                return v;
            }());
            Node* projected = proj.forward(tape, all, true, head_cfg.dropout, &train_rng);
            Node* sup = tape.slice_cols(projected, 0, static_cast<int>(scols.size()));
            Node* que = tape.slice_cols(projected, static_cast<int>(scols.size()),
                                        static_cast<int>(qcols.size()));
            // class-major support: averaging matrix folds k columns per class
            Mat avg = Mat::Zero(static_cast<Eigen::Index>(scols.size()), ep.c);
            for (int c = 0; c < ep.c; ++c)
                for (int k = 0; k < ep.k; ++k) avg(c * ep.k + k, c) = 1.0 / ep.k;
            Node* protos = tape.matmul(sup, tape.leaf(avg));
            Node* logits = tape.scale(proto_sq_distances(tape, protos, que), -1.0);
            Node* loss = tape.softmax_ce_cols(logits, ep.query_labels);

            GradBuffer grads;
            if (head_cfg.finetune_encoder) {
                ParamRegistry session;
                session.add_all(model.registry());
                session.add_all(proj.reg());
                grads.reset(session);
                tape.backward(loss, grads);
                sgd_apply(session, grads, head_cfg.proto_lr, 1e30);
                model.registry().reindex();
                proj.reg().reindex();
                emb_cache.clear();
            } else {
                grads.reset(proj.reg());
                tape.backward(loss, grads);
                sgd_apply(proj.reg(), grads, head_cfg.proto_lr, 1e30);
            }
        }
    }

    // Evaluation episodes on the disjoint meta-test stimuli.
    if (static_cast<int>(test_pool.stimuli.size()) < spec.c_ways)
        throw DataError("not enough meta-test stimuli with " + std::to_string(min_users) +
                        "+ users");
    Rng eval_rng = rng.derive("proto-eval");
    StimulusEvalResult result;
    result.seed = rng.seed();
    result.episodes = spec.episodes;
    for (int e = 0; e < spec.episodes; ++e) {
        Episode ep =
            sample_episode(test_pool, spec.c_ways, spec.k_shots, spec.query_per_class, eval_rng);
        Mat sup_proj(head_cfg.proj_dim, static_cast<Eigen::Index>(ep.support.size()));
        for (std::size_t i = 0; i < ep.support.size(); ++i)
            sup_proj.col(static_cast<Eigen::Index>(i)) = proj.forward_eval(embed_of(ep.support[i]));
        const Mat protos = class_prototypes(sup_proj, ep.c, ep.k);
        for (std::size_t q = 0; q < ep.query.size(); ++q) {
            const Mat qp = proj.forward_eval(embed_of(ep.query[q]));
            if (nearest_prototype(protos, qp) == ep.query_labels[q]) ++result.n_correct;
            ++result.n_total;
        }
    }
    result.accuracy =
        result.n_total ? static_cast<double>(result.n_correct) / result.n_total : 0.0;
    return result;
}

nn::Mat class_prototypes(const nn::Mat& support_proj, int c, int k) {
    if (support_proj.cols() != static_cast<Eigen::Index>(c) * k)
        throw DataError("class_prototypes: expected c*k support columns");
    Mat protos(support_proj.rows(), c);
    for (int cls = 0; cls < c; ++cls)
        protos.col(cls) = support_proj.middleCols(cls * k, k).rowwise().mean();
    return protos;
}

int nearest_prototype(const nn::Mat& prototypes, const nn::Mat& query) {
    int best = 0;
    double best_d = (query.col(0) - prototypes.col(0)).squaredNorm();
    for (Eigen::Index c = 1; c < prototypes.cols(); ++c) {
        const double d = (query.col(0) - prototypes.col(c)).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// participant classification
// ---------------------------------------------------------------------------

std::vector<std::string> stimulus_roster(const std::vector<Scanpath>& corpus) {
    std::set<std::string> ids;
    for (const auto& sp : corpus) ids.insert(sp.stimulus_id);
    return {ids.begin(), ids.end()};
}

nn::Mat participant_vector(const ObfModel& model, const ParticipantRecord& rec,
                           const std::vector<std::string>& roster) {
    const int d = model.config().embedding_dim();
    Mat out = Mat::Zero(static_cast<Eigen::Index>(roster.size()) * d, 1);
    for (std::size_t r = 0; r < roster.size(); ++r) {
        auto it = rec.by_stimulus.find(roster[r]);
        if (it == rec.by_stimulus.end()) continue;  // zero block
        out.middleRows(static_cast<Eigen::Index>(r) * d, d) =
            extract_embedding(model, *it->second);
    }
    return out;
}

nn::Mat participant_expert_vector(const ParticipantRecord& rec,
                                  const std::vector<std::string>& roster) {
    const int d = ExpertFeatures::kCount;
    Mat out = Mat::Zero(static_cast<Eigen::Index>(roster.size()) * d, 1);
    for (std::size_t r = 0; r < roster.size(); ++r) {
        auto it = rec.by_stimulus.find(roster[r]);
        if (it == rec.by_stimulus.end()) continue;
        const auto& sp = *it->second;
        const auto labels = ivt_labels(sp.points);
        const auto features = expert_features(sp.points, labels).as_vector();
        for (int k = 0; k < d; ++k)
            out(static_cast<Eigen::Index>(r) * d + k, 0) = features[static_cast<std::size_t>(k)];
    }
    return out;
}

std::vector<ParticipantRecord> build_participant_records(
    const std::vector<Scanpath>& corpus, const std::map<std::string, int>& labels) {
    std::map<std::string, ParticipantRecord> by_pid;
    for (const auto& sp : corpus) {
        auto it = labels.find(sp.participant_id);
        if (it == labels.end()) continue;
        auto& rec = by_pid[sp.participant_id];
        rec.participant_id = sp.participant_id;
        rec.label = it->second;
        rec.by_stimulus.emplace(sp.stimulus_id, &sp);  // first scanpath per stimulus
    }
    std::vector<ParticipantRecord> out;
    for (auto& [pid, rec] : by_pid) out.push_back(std::move(rec));
    if (out.empty()) throw DataError("no labeled participants found in the corpus");
    return out;
}

// ---------------------------------------------------------------------------
// L1-regularized linear classification with cross-validation
// ---------------------------------------------------------------------------

namespace {

struct Standardizer {
    Eigen::VectorXd mean, scale;

    void fit(const Mat& x) {  // x: d x n
        mean = x.rowwise().mean();
        Mat centered = x.colwise() - mean;
        Eigen::VectorXd var = centered.array().square().matrix().rowwise().mean();
        scale = (var.array() > 1e-12).select(var.array().sqrt(), 1.0);
    }
    Mat apply(const Mat& x) const {
        return ((x.colwise() - mean).array().colwise() / scale.array()).matrix();
    }
};

struct LinearModel {
    Eigen::VectorXd w;
    double b = 0.0;

    double prob(const Eigen::VectorXd& x) const { return nn::sigmoid_scalar(w.dot(x) + b); }
};

// FISTA proximal gradient on mean logistic loss + lambda*||w||_1.
LinearModel fit_l1_logistic(const Mat& x, const std::vector<int>& y, double lambda,
                            int max_iters, double tol) {
    const Eigen::Index d = x.rows();
    const Eigen::Index n = x.cols();
    Eigen::VectorXd signs(n);
    for (Eigen::Index j = 0; j < n; ++j) signs(j) = y[static_cast<std::size_t>(j)] ? 1.0 : -1.0;

    // Lipschitz bound via a few power iterations on X X^T / (4n).
    Eigen::VectorXd v = Eigen::VectorXd::Ones(d).normalized();
    for (int it = 0; it < 20; ++it) {
        v = x * (x.transpose() * v);
        const double norm = v.norm();
        if (norm < 1e-12) break;
        v /= norm;
    }
    const double sigma_sq = (x.transpose() * v).squaredNorm();
    const double lip = std::max(1e-8, sigma_sq / (4.0 * static_cast<double>(n)) + 0.25);
    const double step = 1.0 / lip;

    LinearModel m;
    m.w = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd z = m.w;
    double zb = 0.0, theta = 1.0;
    for (int it = 0; it < max_iters; ++it) {
        Eigen::VectorXd margins = (x.transpose() * z).array() + zb;
        Eigen::VectorXd g(n);
        for (Eigen::Index j = 0; j < n; ++j)
            g(j) = -signs(j) * nn::sigmoid_scalar(-signs(j) * margins(j));
        Eigen::VectorXd grad_w = x * g / static_cast<double>(n);
        const double grad_b = g.mean();

        Eigen::VectorXd w_new = z - step * grad_w;
        // soft threshold (intercept unpenalized)
        const double thr = step * lambda;
        for (Eigen::Index i = 0; i < d; ++i)
            w_new(i) = w_new(i) > thr ? w_new(i) - thr : (w_new(i) < -thr ? w_new(i) + thr : 0.0);
        const double b_new = zb - step * grad_b;

        const double theta_new = (1.0 + std::sqrt(1.0 + 4.0 * theta * theta)) / 2.0;
        const double mom = (theta - 1.0) / theta_new;
        z = w_new + mom * (w_new - m.w);
        zb = b_new + mom * (b_new - m.b);
        const double change = (w_new - m.w).cwiseAbs().maxCoeff() + std::abs(b_new - m.b);
        m.w = w_new;
        m.b = b_new;
        theta = theta_new;
        if (change < tol) break;
    }
    return m;
}

std::vector<int> stratified_fold_of(const std::vector<int>& labels, int folds, Rng& rng) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
    auto shuffle = [&](std::vector<std::size_t>& v) {
        for (std::size_t k = v.size(); k > 1; --k) {
            const std::size_t j =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            std::swap(v[k - 1], v[j]);
        }
    };
    shuffle(pos);
    shuffle(neg);
    std::vector<int> fold_of(labels.size(), 0);
    for (std::size_t i = 0; i < pos.size(); ++i) fold_of[pos[i]] = static_cast<int>(i % folds);
    for (std::size_t i = 0; i < neg.size(); ++i) fold_of[neg[i]] = static_cast<int>(i % folds);
    return fold_of;
}

std::vector<double> default_lambda_grid() {
    return {3.0, 1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001};
}

Mat columns_of(const std::vector<nn::Mat>& vectors, const std::vector<std::size_t>& idx) {
    Mat x(vectors[0].rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) x.col(static_cast<Eigen::Index>(j)) = vectors[idx[j]].col(0);
    return x;
}

}  // namespace

nn::Mat lasso_fit_coefficients(const std::vector<nn::Mat>& vectors,
                               const std::vector<int>& labels, double lambda, int max_iters,
                               double tol) {
    std::vector<std::size_t> all(vectors.size());
    std::iota(all.begin(), all.end(), 0);
    Mat x = columns_of(vectors, all);
    Standardizer st;
    st.fit(x);
    const LinearModel m = fit_l1_logistic(st.apply(x), labels, lambda, max_iters, tol);
    return m.w;
}

EvalReport lasso_cv(const std::vector<nn::Mat>& vectors, const std::vector<int>& labels,
                    const LassoConfig& cfg, std::uint64_t seed) {
    if (vectors.size() != labels.size() || vectors.empty())
        throw DataError("lasso_cv: vectors/labels size mismatch");
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y ? n_pos : n_neg)++;
    if (n_pos < 2 || n_neg < 2)
        throw DataError("lasso_cv: each class needs >= 2 participants so stratified folds keep "
                        "both classes in every training fold");

    Rng rng(mix_seed(seed, fnv1a64("lasso-folds")));
    const std::vector<int> fold_of = stratified_fold_of(labels, cfg.folds, rng);
    const std::vector<double> grid =
        cfg.lambda_grid.empty() ? default_lambda_grid() : cfg.lambda_grid;

    EvalReport report;
    report.seed = seed;
    std::vector<std::pair<double, int>> pooled_scores;
    BinaryCounts pooled;

    for (int f = 0; f < cfg.folds; ++f) {
        std::vector<std::size_t> train_idx, test_idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            (fold_of[i] == f ? test_idx : train_idx).push_back(i);
        if (test_idx.empty()) continue;
        std::vector<int> train_y, test_y;
        for (auto i : train_idx) train_y.push_back(labels[i]);
        for (auto i : test_idx) test_y.push_back(labels[i]);
        if (std::count(train_y.begin(), train_y.end(), 1) == 0 ||
            std::count(train_y.begin(), train_y.end(), 0) == 0)
            throw DataError("lasso_cv: fold " + std::to_string(f) +
                            " training set is single-class; stratify or add data");

        // Inner selection of lambda on the training fold.
        double best_lambda = grid[grid.size() / 2];
        {
            Rng inner_rng(mix_seed(seed, fnv1a64("lasso-inner") + static_cast<std::uint64_t>(f)));
            std::size_t tp = 0, tn = 0;
            for (int y : train_y) (y ? tp : tn)++;
            if (tp >= 2 && tn >= 2) {
                const std::vector<int> inner_fold =
                    stratified_fold_of(train_y, cfg.inner_folds, inner_rng);
                double best_acc = -1.0;
                for (double lam : grid) {
                    double correct = 0.0, total = 0.0;
                    for (int g = 0; g < cfg.inner_folds; ++g) {
                        std::vector<std::size_t> itr, ite;
                        for (std::size_t i = 0; i < train_idx.size(); ++i)
                            (inner_fold[i] == g ? ite : itr).push_back(train_idx[i]);
                        if (ite.empty() || itr.empty()) continue;
                        std::vector<int> itr_y, ite_y;
                        for (auto i : itr) itr_y.push_back(labels[i]);
                        for (auto i : ite) ite_y.push_back(labels[i]);
                        if (std::count(itr_y.begin(), itr_y.end(), 1) == 0 ||
                            std::count(itr_y.begin(), itr_y.end(), 0) == 0)
                            continue;
                        Mat xi = columns_of(vectors, itr);
                        Standardizer st;
                        st.fit(xi);
                        const LinearModel m =
                            fit_l1_logistic(st.apply(xi), itr_y, lam, cfg.max_iters, cfg.tol);
                        const Mat xe = st.apply(columns_of(vectors, ite));
                        for (std::size_t j = 0; j < ite.size(); ++j) {
                            const int pred =
                                m.prob(xe.col(static_cast<Eigen::Index>(j))) > 0.5 ? 1 : 0;
                            correct += pred == ite_y[j] ? 1.0 : 0.0;
                            total += 1.0;
                        }
                    }
                    const double acc = total > 0 ? correct / total : 0.0;
                    if (acc > best_acc + 1e-12) {
                        best_acc = acc;
                        best_lambda = lam;
                    }
                }
            }
        }

        Mat xtr = columns_of(vectors, train_idx);
        Standardizer st;
        st.fit(xtr);
        const LinearModel m =
            fit_l1_logistic(st.apply(xtr), train_y, best_lambda, cfg.max_iters, cfg.tol);
        const Mat xte = st.apply(columns_of(vectors, test_idx));

        FoldResult fr;
        fr.n_test = static_cast<int>(test_idx.size());
        BinaryCounts fold_counts;
        std::vector<std::pair<double, int>> fold_scores;
        for (std::size_t j = 0; j < test_idx.size(); ++j) {
            const double p = m.prob(xte.col(static_cast<Eigen::Index>(j)));
            const int pred = p > 0.5 ? 1 : 0;
            fold_counts.add(pred, test_y[j]);
            pooled.add(pred, test_y[j]);
            fold_scores.emplace_back(p, test_y[j]);
            pooled_scores.emplace_back(p, test_y[j]);
        }
        fr.accuracy = fold_counts.accuracy();
        fr.f1 = fold_counts.f1();
        fr.auc = rank_auc(fold_scores);
        report.folds.push_back(fr);
    }

    report.accuracy = pooled.accuracy();
    report.f1 = pooled.f1();
    report.auc = rank_auc(pooled_scores);
    return report;
}

EvalReport eval_participants(const ObfModel& model, const std::vector<ParticipantRecord>& records,
                             const std::vector<std::string>& roster, const LassoConfig& cfg,
                             std::uint64_t seed) {
    std::vector<Mat> vectors;
    std::vector<int> labels;
    for (const auto& rec : records) {
        vectors.push_back(participant_vector(model, rec, roster));
        labels.push_back(rec.label);
    }
    return lasso_cv(vectors, labels, cfg, seed);
}

EvalReport expert_baseline(const std::vector<ParticipantRecord>& records,
                           const std::vector<std::string>& roster, const LassoConfig& cfg,
                           std::uint64_t seed) {
    std::vector<Mat> vectors;
    std::vector<int> labels;
    for (const auto& rec : records) {
        vectors.push_back(participant_expert_vector(rec, roster));
        labels.push_back(rec.label);
    }
    return lasso_cv(vectors, labels, cfg, seed);
}

}  // namespace obf
