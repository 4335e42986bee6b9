#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "obf/corpus.hpp"
#include "obf/errors.hpp"
#include "obf/pretrain.hpp"

using namespace obf;
using nn::GradBuffer;
using nn::Mat;

namespace {

Mat random_walk(int t, std::uint64_t seed) {
    Rng rng(seed);
    Mat x(2, t);
    double px = rng.uniform(-5, 5), py = rng.uniform(-5, 5);
    for (int k = 0; k < t; ++k) {
        px += rng.normal(0, 0.4);
        py += rng.normal(0, 0.4);
        x(0, k) = px;
        x(1, k) = py;
    }
    return x;
}

SegmentPair manual_pair(int t, std::uint64_t seed) {
    Rng rng(seed);
    SegmentPair p;
    p.x = random_walk(t, seed);
    p.x_next = random_walk(6, seed + 1);
    p.fi.resize(static_cast<std::size_t>(t));
    for (auto& l : p.fi) l = rng.bernoulli(0.6) ? 1 : 0;
    p.mask = balanced_mask(p.fi, rng);
    return p;
}

ClPair manual_cl(int t, std::uint64_t seed, int same) {
    ClPair c;
    c.x1 = random_walk(t, seed);
    c.x2 = random_walk(t, seed + 7);
    c.same_scanpath = same;
    return c;
}

std::vector<Scanpath> small_corpus(int n, double duration_s, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.n_participants = n;
    cfg.n_stimuli = 1;
    cfg.scanpaths_per_pair = 1;
    cfg.duration_s = duration_s;
    cfg.seed = seed;
    std::vector<Scanpath> out;
    for (auto& s : make_synth_corpus(cfg)) out.push_back(std::move(s.scanpath));
    return out;
}

PretrainConfig tiny_train_cfg() {
    PretrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 16;
    cfg.threads = 2;
    cfg.seed = 9;
    return cfg;
}

ModelConfig tiny_model_cfg() {
    ModelConfig m;
    m.backbone = Backbone::kGru;
    m.n_layers = 1;
    m.hidden = 8;
    m.cl_hidden = 8;
    return m;
}

}  // namespace

TEST_CASE("loss_rc and loss_pc closed forms") {
    const Mat x = random_walk(50, 1);
    CHECK(loss_rc(x, x) == 0.0);
    CHECK(loss_pc(x, x) == 0.0);

    // +1 in every entry: ||1||_F^2 = 2t, so loss = 2t / (2t) = 1
    Mat off = x.array() + 1.0;
    CHECK(loss_rc(off, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(loss_pc(off, x) == doctest::Approx(1.0).epsilon(1e-12));

    // quadratic scaling: doubling the residual quadruples the loss
    Mat r1 = x.array() + 0.37;
    Mat r2 = x.array() + 0.74;
    CHECK(loss_rc(r2, x) == doctest::Approx(4.0 * loss_rc(r1, x)).epsilon(1e-12));

    CHECK_THROWS_AS(loss_rc(Mat::Zero(2, 3), Mat::Zero(2, 4)), NumericalError);
}

TEST_CASE("mean predictor loss matches the brute-force educated-guess oracle") {
    const Mat x = random_walk(200, 2);
    Mat mean_pred(2, 200);
    const double mx = x.row(0).mean(), my = x.row(1).mean();
    mean_pred.row(0).setConstant(mx);
    mean_pred.row(1).setConstant(my);

    // oracle: sum of squared deviations per coordinate over 2t
    double oracle = 0.0;
    for (int k = 0; k < 200; ++k)
        oracle += (x(0, k) - mx) * (x(0, k) - mx) + (x(1, k) - my) * (x(1, k) - my);
    oracle /= 2.0 * 200.0;
    CHECK(loss_rc(mean_pred, x) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("loss_fi identities") {
    FixationLabels labels{1, 1, 0, 0, 1, 0};
    SampleMask mask{1, 1, 1, 1, 0, 0};  // 2 fixation, 2 saccade -> balanced

    SUBCASE("probabilities equal to labels give a near-zero loss") {
        std::vector<double> probs;
        for (auto l : labels) probs.push_back(l ? 1.0 : 0.0);
        CHECK(loss_fi(probs, labels, mask) < 1e-6);
    }
    SUBCASE("uniform 0.5 gives ln 2 regardless of labels") {
        std::vector<double> probs(labels.size(), 0.5);
        CHECK(loss_fi(probs, labels, mask) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
        FixationLabels other{0, 1, 0, 1, 1, 1};
        SampleMask mask2{1, 1, 1, 1, 0, 0};  // still balanced for these labels
        CHECK(loss_fi(probs, other, mask2) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("all-zero mask short-circuits to zero") {
        std::vector<double> probs(labels.size(), 0.9);
        SampleMask zero(labels.size(), 0);
        CHECK(loss_fi(probs, labels, zero) == 0.0);
    }
    SUBCASE("unbalanced mask is rejected") {
        std::vector<double> probs(labels.size(), 0.5);
        SampleMask bad{1, 1, 1, 0, 0, 0};  // 2 fixation, 1 saccade
        CHECK_THROWS_AS(loss_fi(probs, labels, bad), NumericalError);
    }
}

TEST_CASE("loss_cl identities") {
    CHECK(loss_cl(0.5, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(loss_cl(0.5, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(loss_cl(1.0 - 1e-9, 1) < 1e-6);
    CHECK(loss_cl(0.0, 1) == doctest::Approx(-std::log(1e-7)));  // clipped, finite
    for (double p : {0.1, 0.33, 0.77}) {
        CHECK(loss_cl(p, 1) == doctest::Approx(loss_cl(1.0 - p, 0)).epsilon(1e-12));
    }
}

TEST_CASE("total_loss weights, ablations, and finiteness") {
    const LossParts parts{1.0, 2.0, 3.0, 4.0};
    CHECK(total_loss(parts, LossWeights{1, 1, 1, 1}) == 10.0);
    CHECK(total_loss(parts, LossWeights{1, 1, 0, 1}) == 7.0);  // FI excluded
    CHECK(total_loss(LossParts{}, LossWeights{1, 1, 1, 1}) == 0.0);

    LossParts bad = parts;
    bad.pc = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH_AS(total_loss(bad, LossWeights{1, 1, 1, 1}),
                         "loss_pc is non-finite", NumericalError);
    // zero weight silences the offending task
    CHECK(total_loss(bad, LossWeights{1, 0, 1, 1}) == 8.0);
}

TEST_CASE("graph losses agree with the plain loss functions") {
    ObfModel model(tiny_model_cfg(), TaskSet{}, 31);
    PretrainConfig cfg;
    cfg.threads = 1;
    std::vector<SegmentPair> segs{manual_pair(24, 50)};
    std::vector<ClPair> cls{manual_cl(10, 51, 1), manual_cl(10, 52, 0)};

    const LossParts parts = batch_objective(model, segs, cls, cfg, nullptr);

    // replicate RC/PC/FI through the public decode API
    nn::Tape t;
    t.grad_enabled = false;
    auto enc = model.encode(t, segs[0].x);
    const Mat rc = model.decode_rc(t, enc, static_cast<int>(segs[0].x.cols()), &segs[0].x)->value;
    CHECK(parts.rc == doctest::Approx(loss_rc(rc, segs[0].x)).epsilon(1e-12));
    const Mat pc =
        model.decode_pc(t, enc, static_cast<int>(segs[0].x_next.cols()), &segs[0].x_next)->value;
    CHECK(parts.pc == doctest::Approx(loss_pc(pc, segs[0].x_next)).epsilon(1e-12));
    const auto fi_probs = model.decode_fi_eval(segs[0].x);
    CHECK(parts.fi == doctest::Approx(loss_fi(fi_probs, segs[0].fi, segs[0].mask)).epsilon(1e-9));
    CHECK(std::isfinite(parts.cl));
    CHECK(parts.cl > 0.0);
}

TEST_CASE("sample_segment_pair respects the published windows") {
    SUBCASE("a 10.5 s scanpath always yields a valid pair") {
        auto corpus = small_corpus(1, 10.5, 5);
        PretrainConfig cfg;
        Rng rng(6);
        for (int trial = 0; trial < 50; ++trial) {
            const auto pair = sample_segment_pair(corpus[0], cfg, rng);
            const int t = static_cast<int>(pair.x.cols());
            CHECK(t >= 300);
            CHECK(t <= 600);
            CHECK(pair.x_next.cols() == 30);  // 500 ms at 60 Hz
            CHECK(pair.fi.size() == static_cast<std::size_t>(t));
            CHECK(pair.mask.size() == static_cast<std::size_t>(t));
        }
    }
    SUBCASE("a 5.4 s scanpath (324 samples) is too short") {
        Scanpath sp;
        sp.points.assign(324, Vec2{0, 0});
        PretrainConfig cfg;
        Rng rng(7);
        CHECK_THROWS_AS(sample_segment_pair(sp, cfg, rng), DataError);
    }
    SUBCASE("the following segment starts right after x") {
        Scanpath sp;
        for (int k = 0; k < 400; ++k)
            sp.points.push_back({static_cast<double>(k), 0.0});  // index ramp
        PretrainConfig cfg;
        Rng rng(8);
        const auto pair = sample_segment_pair(sp, cfg, rng);
        const double last_x = pair.x(0, pair.x.cols() - 1);
        CHECK(pair.x_next(0, 0) == last_x + 1.0);
    }
}

TEST_CASE("sample_cl_pairs contracts") {
    auto corpus = small_corpus(4, 6.0, 9);
    std::vector<const Scanpath*> batch;
    for (const auto& sp : corpus) batch.push_back(&sp);
    PretrainConfig cfg;
    Rng rng(10);
    const auto pairs = sample_cl_pairs(batch, cfg, rng);
    CHECK(pairs.size() == batch.size());
    for (const auto& p : pairs) {
        CHECK((p.same_scanpath == 0 || p.same_scanpath == 1));
        for (const Mat* seg : {&p.x1, &p.x2}) {
            const double frac =
                static_cast<double>(seg->cols()) / static_cast<double>(corpus[0].size());
            CHECK(frac >= 0.2 - 0.01);
            CHECK(frac <= 0.4 + 0.01);
        }
    }

    SUBCASE("mixed sources are rejected") {
        auto other = corpus;
        other[1].source_tag = "different";
        std::vector<const Scanpath*> bad{&other[0], &other[1]};
        CHECK_THROWS_AS(sample_cl_pairs(bad, cfg, rng), DataError);
    }
    SUBCASE("a single scanpath cannot form pairs") {
        std::vector<const Scanpath*> lone{&corpus[0]};
        CHECK_THROWS_AS(sample_cl_pairs(lone, cfg, rng), DataError);
    }
    SUBCASE("a 600-sample scanpath yields segments of 120 to 240 samples") {
        Scanpath sp;
        sp.points.assign(600, Vec2{0, 0});
        std::vector<const Scanpath*> two{&sp, &sp};
        Rng r2(11);
        for (const auto& p : sample_cl_pairs(two, cfg, r2)) {
            CHECK(p.x1.cols() >= 120);
            CHECK(p.x1.cols() <= 240);
        }
    }
}

TEST_CASE("learning rate halves every 100 epochs") {
    PretrainConfig cfg;
    cfg.lr = 0.001;
    CHECK(lr_at_epoch(cfg, 1) == 0.001);
    CHECK(lr_at_epoch(cfg, 100) == 0.001);
    CHECK(lr_at_epoch(cfg, 101) == 0.0005);
    CHECK(lr_at_epoch(cfg, 250) == doctest::Approx(0.001 / 4.0));
    CHECK(lr_at_epoch(cfg, 500) == doctest::Approx(0.001 / 16.0));
}

TEST_CASE("sgd_apply clips per-parameter gradients at the configured bound") {
    nn::Param p{"w", Mat::Zero(2, 2)};
    nn::ParamRegistry reg;
    reg.add(p);
    GradBuffer g;
    g.reset(reg);
    g.g[0] << 3.0, -2.0, 0.1, -0.1;
    sgd_apply(reg, g, 1.0, 0.5);
    CHECK(p.value(0, 0) == -0.5);  // clipped from 3.0
    CHECK(p.value(0, 1) == 0.5);
    CHECK(p.value(1, 0) == doctest::Approx(-0.1));
    CHECK(p.value(1, 1) == doctest::Approx(0.1));
}

TEST_CASE("analytic gradients match central finite differences on a sub-1k model") {
    ModelConfig mcfg;
    mcfg.backbone = Backbone::kGru;
    mcfg.n_layers = 1;
    mcfg.hidden = 6;
    mcfg.use_conv = false;
    mcfg.cl_hidden = 6;
    ObfModel model(mcfg, TaskSet{}, 33);
    REQUIRE(model.parameter_count() <= 1000);

    PretrainConfig cfg;
    cfg.threads = 1;
    std::vector<SegmentPair> segs{manual_pair(20, 60), manual_pair(16, 61)};
    std::vector<ClPair> cls{manual_cl(8, 62, 1), manual_cl(9, 63, 0)};
    Rng rng(64);
    const double err = grad_check(model, segs, cls, cfg, 60, rng);
    CAPTURE(err);
    CHECK(err < 1e-4);
}

TEST_CASE("an all-zero FI mask produces exactly zero FI-decoder gradient") {
    ObfModel model(tiny_model_cfg(), TaskSet{}, 34);
    PretrainConfig cfg;
    cfg.threads = 1;
    SegmentPair pair = manual_pair(24, 65);
    std::fill(pair.mask.begin(), pair.mask.end(), 0);
    std::vector<SegmentPair> segs{pair};
    std::vector<ClPair> cls{manual_cl(10, 66, 1), manual_cl(10, 67, 0)};

    GradBuffer g;
    g.reset(model.registry());
    batch_objective(model, segs, cls, cfg, &g);
    for (std::size_t i = 0; i < g.g.size(); ++i)
        if (model.registry().params()[i]->name.rfind("dec_fi", 0) == 0)
            CHECK(g.g[i].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients are identical for any thread count") {
    ObfModel model(tiny_model_cfg(), TaskSet{}, 35);
    std::vector<SegmentPair> segs;
    std::vector<ClPair> cls;
    for (int i = 0; i < 20; ++i) {
        segs.push_back(manual_pair(24, 100 + static_cast<std::uint64_t>(i)));
        cls.push_back(manual_cl(10, 200 + static_cast<std::uint64_t>(i), i % 2));
    }
    PretrainConfig c1;
    c1.threads = 1;
    PretrainConfig c2;
    c2.threads = 2;
    GradBuffer g1, g2;
    g1.reset(model.registry());
    g2.reset(model.registry());
    batch_objective(model, segs, cls, c1, &g1);
    batch_objective(model, segs, cls, c2, &g2);
    for (std::size_t i = 0; i < g1.g.size(); ++i)
        CHECK((g1.g[i] - g2.g[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("train smoke run: finite losses and a full log") {
    auto corpus = small_corpus(20, 6.5, 36);
    auto result = train(corpus, tiny_model_cfg(), tiny_train_cfg());
    REQUIRE(result.log.size() == 2);
    for (const auto& e : result.log) {
        CHECK(std::isfinite(e.train.rc));
        CHECK(std::isfinite(e.train.pc));
        CHECK(std::isfinite(e.train.fi));
        CHECK(std::isfinite(e.train.cl));
        CHECK(e.lr == doctest::Approx(0.001));
    }
    CHECK(result.train_indices.size() == 16);
    CHECK(result.val_indices.size() == 4);
    CHECK(result.model->parameter_count() > 0);
}

TEST_CASE("training is reproducible and thread-count independent") {
    auto corpus = small_corpus(12, 6.5, 37);
    PretrainConfig cfg = tiny_train_cfg();
    cfg.epochs = 2;

    auto r1 = train(corpus, tiny_model_cfg(), cfg);
    auto r2 = train(corpus, tiny_model_cfg(), cfg);
    PretrainConfig cfg_serial = cfg;
    cfg_serial.threads = 1;
    auto r3 = train(corpus, tiny_model_cfg(), cfg_serial);

    for (std::size_t e = 0; e < r1.log.size(); ++e) {
        CHECK(r1.log[e].train.rc == doctest::Approx(r2.log[e].train.rc).epsilon(1e-12));
        CHECK(r1.log[e].train.cl == doctest::Approx(r2.log[e].train.cl).epsilon(1e-12));
        CHECK(r1.log[e].train.rc == doctest::Approx(r3.log[e].train.rc).epsilon(1e-12));
        CHECK(r1.log[e].val.rc_dist == doctest::Approx(r3.log[e].val.rc_dist).epsilon(1e-12));
    }
    // identical parameters after identical runs
    for (std::size_t i = 0; i < r1.model->registry().params().size(); ++i)
        CHECK((r1.model->registry().params()[i]->value -
               r2.model->registry().params()[i]->value)
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
}

TEST_CASE("disabling a task leaves the other first-epoch losses unchanged") {
    auto corpus = small_corpus(10, 6.5, 38);  // one batch per epoch
    PretrainConfig cfg = tiny_train_cfg();
    cfg.epochs = 1;
    cfg.batch = 16;

    auto full = train(corpus, tiny_model_cfg(), cfg);
    PretrainConfig no_fi = cfg;
    no_fi.w_fi = 0.0;
    auto ablated = train(corpus, tiny_model_cfg(), no_fi);

    CHECK(!std::isfinite(ablated.log[0].train.fi));  // absent
    CHECK(ablated.log[0].train.rc == doctest::Approx(full.log[0].train.rc).epsilon(1e-12));
    CHECK(ablated.log[0].train.pc == doctest::Approx(full.log[0].train.pc).epsilon(1e-12));
    CHECK(ablated.log[0].train.cl == doctest::Approx(full.log[0].train.cl).epsilon(1e-12));
    for (auto* p : ablated.model->registry().params())
        CHECK(p->name.rfind("dec_fi", 0) != 0);
}

TEST_CASE("train runs with every backbone") {
    auto corpus = small_corpus(8, 6.5, 55);
    PretrainConfig cfg = tiny_train_cfg();
    cfg.epochs = 1;
    for (Backbone b : {Backbone::kLstm, Backbone::kTransformer}) {
        CAPTURE(backbone_name(b));
        ModelConfig m = tiny_model_cfg();
        m.backbone = b;
        m.tf_heads = 2;
        auto result = train(corpus, m, cfg);
        REQUIRE(result.log.size() == 1);
        CHECK(std::isfinite(result.log[0].train.rc));
        CHECK(std::isfinite(result.log[0].train.cl));
    }
}

TEST_CASE("train applies augmentation when enabled") {
    auto corpus = small_corpus(8, 6.5, 56);
    PretrainConfig cfg = tiny_train_cfg();
    cfg.epochs = 1;
    auto plain = train(corpus, tiny_model_cfg(), cfg);

    PretrainConfig aug_cfg = cfg;
    aug_cfg.augment_enabled = true;
    aug_cfg.augment.offset_deg = {-1.0, 1.0};
    aug_cfg.augment.rotation_rad = {-0.2, 0.2};
    auto augmented = train(corpus, tiny_model_cfg(), aug_cfg);

    CHECK(std::isfinite(augmented.log[0].train.rc));
    // augmentation changes the sampled inputs, so the losses move
    CHECK(augmented.log[0].train.rc != plain.log[0].train.rc);
}

TEST_CASE("train validates its corpus") {
    PretrainConfig cfg = tiny_train_cfg();
    CHECK_THROWS_AS(train({}, tiny_model_cfg(), cfg), DataError);

    // all scanpaths too short
    std::vector<Scanpath> shorties(3);
    for (auto& sp : shorties) {
        sp.points.assign(100, Vec2{0, 0});
        sp.source_tag = "s";
    }
    CHECK_THROWS_AS(train(shorties, tiny_model_cfg(), cfg), DataError);
}

TEST_CASE("evaluate_pretasks returns sane metrics for an untrained model") {
    auto corpus = small_corpus(40, 6.5, 39);
    std::vector<const Scanpath*> val;
    for (const auto& sp : corpus) val.push_back(&sp);
    ObfModel model(tiny_model_cfg(), TaskSet{}, 40);
    PretrainConfig cfg;
    cfg.threads = 2;
    Rng rng(41);
    const auto m = evaluate_pretasks(model, val, cfg, rng);
    CHECK(std::isfinite(m.rc_dist));
    CHECK(m.rc_dist >= 0.0);
    CHECK(std::isfinite(m.pc_dist));
    CHECK(m.fi_auc >= 0.15);
    CHECK(m.fi_auc <= 0.85);
    CHECK(m.cl_acc >= 0.2);
    CHECK(m.cl_acc <= 0.8);

    // deterministic under the same rng seed
    Rng rng2(41);
    const auto m2 = evaluate_pretasks(model, val, cfg, rng2);
    CHECK(m.rc_dist == m2.rc_dist);
    CHECK(m.fi_auc == m2.fi_auc);
}

TEST_CASE("fi_auc is reported absent when validation has one class") {
    // constant scanpaths: every timepoint is a fixation
    std::vector<Scanpath> corpus(3);
    for (auto& sp : corpus) {
        sp.points.assign(340, Vec2{1, 1});
        sp.source_tag = "s";
    }
    std::vector<const Scanpath*> val{&corpus[0], &corpus[1], &corpus[2]};
    ObfModel model(tiny_model_cfg(), TaskSet{}, 42);
    PretrainConfig cfg;
    Rng rng(43);
    const auto m = evaluate_pretasks(model, val, cfg, rng);
    CHECK(!std::isfinite(m.fi_auc));
}

TEST_CASE("training log file has the contracted columns and blanks NaNs") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "obf_train_log.csv").string();
    std::vector<EpochLog> log(2);
    log[0].epoch = 1;
    log[0].lr = 0.001;
    log[0].train = {1.0, 2.0, std::numeric_limits<double>::quiet_NaN(), 4.0};
    log[1].epoch = 2;
    log[1].lr = 0.0005;
    write_training_log(path, log);

    std::ifstream in(path);
    std::string header, row1;
    std::getline(in, header);
    std::getline(in, row1);
    CHECK(header ==
          "epoch,lr,loss_rc,loss_pc,loss_fi,loss_cl,val_rc_dist,val_pc_dist,val_fi_auc,val_cl_acc");
    CHECK(row1.substr(0, 2) == "1,");
    CHECK(row1.find(",2,") != std::string::npos);
    CHECK(row1.find(",,") != std::string::npos);  // blank NaN field
    fs::remove(path);
}
