#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "obf/errors.hpp"
#include "obf/model.hpp"
#include "obf/pretrain.hpp"

using namespace obf;
using nn::GradBuffer;
using nn::Mat;
using nn::Node;
using nn::Tape;

namespace {

Mat random_segment(int t, std::uint64_t seed) {
    Rng rng(seed);
    Mat x(2, t);
    for (int k = 0; k < t; ++k) {
        x(0, k) = rng.uniform(-15, 15);
        x(1, k) = rng.uniform(-10, 10);
    }
    return x;
}

ModelConfig cfg_for(Backbone b, int layers, int hidden, bool conv = true) {
    ModelConfig cfg;
    cfg.backbone = b;
    cfg.n_layers = layers;
    cfg.hidden = hidden;
    cfg.use_conv = conv;
    return cfg;
}

bool within_pct(std::size_t actual, double target, double pct) {
    return std::abs(static_cast<double>(actual) - target) <= pct / 100.0 * target;
}

}  // namespace

TEST_CASE("embedding dimensions follow the backbone rule") {
    CHECK(cfg_for(Backbone::kGru, 2, 128).embedding_dim() == 256);
    CHECK(cfg_for(Backbone::kRnn, 2, 128).embedding_dim() == 256);
    CHECK(cfg_for(Backbone::kLstm, 2, 128).embedding_dim() == 512);
    CHECK(cfg_for(Backbone::kTransformer, 2, 128).embedding_dim() == 256);
    CHECK(cfg_for(Backbone::kGru, 2, 32).embedding_dim() == 64);
}

TEST_CASE("encoder parameter counts stay within 5% of the published sizes") {
    struct Row {
        ModelConfig cfg;
        double target;
    };
    std::vector<Row> rows = {
        {cfg_for(Backbone::kGru, 2, 128), 163000.0},
        {cfg_for(Backbone::kRnn, 2, 128), 55000.0},
        {cfg_for(Backbone::kLstm, 2, 128), 217000.0},
        {cfg_for(Backbone::kTransformer, 2, 128), 343000.0},
        {cfg_for(Backbone::kGru, 2, 128, /*conv=*/false), 150000.0},
        {cfg_for(Backbone::kGru, 2, 32), 15000.0},
        {cfg_for(Backbone::kGru, 2, 64), 46000.0},
        {cfg_for(Backbone::kGru, 2, 256), 620000.0},
    };
    for (const auto& row : rows) {
        ObfModel model(row.cfg, TaskSet{}, 1);
        CAPTURE(backbone_name(row.cfg.backbone));
        CAPTURE(row.cfg.hidden);
        CAPTURE(model.encoder_parameter_count());
        CHECK(within_pct(model.encoder_parameter_count(), row.target, 5.0));
    }
}

TEST_CASE("embedding dimension is constant across input lengths") {
    for (Backbone b : {Backbone::kGru, Backbone::kLstm, Backbone::kTransformer}) {
        ObfModel model(cfg_for(b, 2, 16), TaskSet{}, 2);
        const Mat e300 = model.embed(random_segment(300, 11));
        const Mat e600 = model.embed(random_segment(600, 12));
        CHECK(e300.rows() == model.config().embedding_dim());
        CHECK(e600.rows() == e300.rows());
    }
}

TEST_CASE("conv block halves the time steps and emits 30 channels") {
    ObfModel model(cfg_for(Backbone::kGru, 1, 8), TaskSet{}, 3);
    const Mat out = model.conv_block_values(random_segment(600, 13));
    CHECK(out.rows() == 30);
    CHECK(out.cols() == 300);
    CHECK(model.embed(random_segment(601, 14)).allFinite());  // odd length floors

    // zero weights, zero input -> zero output
    ObfModel zero_model(cfg_for(Backbone::kGru, 1, 8), TaskSet{}, 4);
    for (auto* p : zero_model.registry().params())
        if (p->name.rfind("enc.conv", 0) == 0) p->value.setZero();
    const Mat z = zero_model.conv_block_values(Mat::Zero(2, 40));
    CHECK(z.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode is deterministic and rejects bad input") {
    ObfModel model(cfg_for(Backbone::kGru, 2, 16), TaskSet{}, 5);
    const Mat x = random_segment(330, 15);
    const Mat e1 = model.embed(x);
    const Mat e2 = model.embed(x);
    CHECK((e1 - e2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(e1.allFinite());

    Mat bad = x;
    bad(0, 5) = std::nan("");
    CHECK_THROWS_AS(model.embed(bad), NumericalError);
    CHECK_THROWS_AS(model.embed(Mat::Zero(2, 3)), NumericalError);  // shorter than kernel
}

TEST_CASE("sequence decoders produce the contracted shapes") {
    for (Backbone b : {Backbone::kGru, Backbone::kRnn, Backbone::kLstm, Backbone::kTransformer}) {
        CAPTURE(backbone_name(b));
        ObfModel model(cfg_for(b, 2, 16), TaskSet{}, 6);
        const Mat x = random_segment(64, 16);

        Tape t;
        t.grad_enabled = false;
        auto enc = model.encode(t, x);
        Node* rc = model.decode_rc(t, enc, 64, &x);
        CHECK(rc->value.rows() == 2);
        CHECK(rc->value.cols() == 64);

        const Mat teacher30 = random_segment(30, 17);
        Node* pc = model.decode_pc(t, enc, 30, &teacher30);
        CHECK(pc->value.rows() == 2);
        CHECK(pc->value.cols() == 30);

        Node* fi = model.decode_fi(t, enc, x);
        CHECK(fi->value.rows() == 1);
        CHECK(fi->value.cols() == 64);

        // teacher forcing consumes the target shifted by one step
        CHECK_THROWS_AS(model.decode_rc(t, enc, 10, &x), NumericalError);

        // autoregressive evaluation works and is finite
        const Mat rc_eval = model.decode_rc_eval(x, 40);
        CHECK(rc_eval.cols() == 40);
        CHECK(rc_eval.allFinite());
    }
}

TEST_CASE("fi probabilities live in (0,1) and zero logits give exactly 0.5") {
    ModelConfig cfg = cfg_for(Backbone::kGru, 1, 8);
    ObfModel model(cfg, TaskSet{}, 7);
    const Mat x = random_segment(48, 18);
    auto probs = model.decode_fi_eval(x);
    REQUIRE(probs.size() == 48);
    for (double p : probs) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
    for (auto* p : model.registry().params())
        if (p->name.rfind("dec_fi.out", 0) == 0) p->value.setZero();
    for (double p : model.decode_fi_eval(x)) CHECK(p == 0.5);
}

TEST_CASE("fi decoder length must match the encoded segment") {
    ObfModel model(cfg_for(Backbone::kGru, 1, 8), TaskSet{}, 8);
    Tape t;
    t.grad_enabled = false;
    const Mat x = random_segment(48, 19);
    auto enc = model.encode(t, x);
    const Mat other = random_segment(50, 20);
    CHECK_THROWS_AS(model.decode_fi(t, enc, other), NumericalError);
}

TEST_CASE("cl head is symmetric, bounded, and checks dimensions") {
    ObfModel model(cfg_for(Backbone::kGru, 2, 16), TaskSet{}, 9);
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        Mat e1(model.config().embedding_dim(), 1), e2(model.config().embedding_dim(), 1);
        for (Eigen::Index i = 0; i < e1.rows(); ++i) {
            e1(i, 0) = rng.normal();
            e2(i, 0) = rng.normal();
        }
        const double p12 = model.cl_probability(e1, e2);
        const double p21 = model.cl_probability(e2, e1);
        CHECK(p12 == p21);
        CHECK(p12 > 0.0);
        CHECK(p12 < 1.0);
    }
    // e1 == e2 -> all-zero distance vector, a constant output
    const Mat e = Mat::Ones(model.config().embedding_dim(), 1);
    const double p_same = model.cl_probability(e, e);
    const double p_same2 = model.cl_probability(Mat(2.0 * e), Mat(2.0 * e));
    CHECK(p_same == p_same2);

    Tape t;
    Node* wrong = t.leaf(Mat::Zero(model.config().embedding_dim() + 1, 2));
    CHECK_THROWS_AS(model.cl_head_logits(t, wrong, false), NumericalError);
}

TEST_CASE("every decoder output reaches encoder parameters with nonzero gradient") {
    for (Backbone b : {Backbone::kGru, Backbone::kLstm, Backbone::kTransformer}) {
        CAPTURE(backbone_name(b));
        ObfModel model(cfg_for(b, 1, 8), TaskSet{}, 10);
        const Mat x = random_segment(40, 22);

        auto encoder_grad_norm = [&](const std::function<Node*(Tape&, const ObfModel::Encoded&)>& f) {
            Tape t;
            auto enc = model.encode(t, x);
            Node* loss = f(t, enc);
            GradBuffer g;
            g.reset(model.registry());
            t.backward(loss, g);
            double norm = 0.0;
            for (std::size_t i = 0; i < g.g.size(); ++i)
                if (model.registry().params()[i]->name.rfind("enc.", 0) == 0)
                    norm += g.g[i].squaredNorm();
            return norm;
        };

        CHECK(encoder_grad_norm([&](Tape& t, const ObfModel::Encoded& e) {
                  return t.sumsq(model.decode_rc(t, e, 40, &x));
              }) > 0.0);
        const Mat teacher = random_segment(30, 23);
        CHECK(encoder_grad_norm([&](Tape& t, const ObfModel::Encoded& e) {
                  return t.sumsq(model.decode_pc(t, e, 30, &teacher));
              }) > 0.0);
        CHECK(encoder_grad_norm([&](Tape& t, const ObfModel::Encoded& e) {
                  return t.sumsq(model.decode_fi(t, e, x));
              }) > 0.0);
        CHECK(encoder_grad_norm([&](Tape& t, const ObfModel::Encoded& e) {
                  auto e2 = model.encode(t, Mat(x * 0.5));
                  Node* d = t.abs_(t.sub(e.embedding, e2.embedding));
                  Node* dd = t.concat_cols(d, t.scale(d, 0.9));  // batch of 2 for BN
                  return t.sumsq(model.cl_head_logits(t, dd, true));
              }) > 0.0);
    }
}

TEST_CASE("checkpoints round-trip through 32-bit storage") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "obf_test_ckpt.bin").string();

    ModelConfig cfg = cfg_for(Backbone::kLstm, 2, 12);
    TaskSet tasks;
    tasks.pc = false;  // disabled decoder must stay absent after reload
    ObfModel model(cfg, tasks, 11);
    model.save_checkpoint(path);

    auto loaded = ObfModel::load_checkpoint(path);
    CHECK(loaded->config().hidden == 12);
    CHECK(loaded->tasks().pc == false);
    CHECK(loaded->tasks().rc == true);
    CHECK(loaded->parameter_count() == model.parameter_count());

    // float32 storage: parameters match to single precision
    for (std::size_t i = 0; i < model.registry().params().size(); ++i) {
        const auto& a = model.registry().params()[i]->value;
        const auto& b = loaded->registry().params()[i]->value;
        CHECK(a.rows() == b.rows());
        for (Eigen::Index k = 0; k < a.size(); ++k)
            CHECK(b(k) == static_cast<double>(static_cast<float>(a(k))));
    }

    // embeddings of the reloaded model agree to float32 precision
    const Mat x = random_segment(128, 24);
    const Mat e1 = model.embed(x);
    const Mat e2 = loaded->embed(x);
    CHECK((e1 - e2).cwiseAbs().maxCoeff() < 1e-4);

    // a reloaded checkpoint saves byte-identically
    const std::string path2 = path + ".2";
    loaded->save_checkpoint(path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("checkpoint loading rejects damaged files") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "obf_bad_ckpt.bin").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOTACKPT garbage";
    }
    CHECK_THROWS_AS(ObfModel::load_checkpoint(path), DataError);
    fs::remove(path);
    CHECK_THROWS_AS(ObfModel::load_checkpoint(path), DataError);  // missing file
}

TEST_CASE("disabled decoders have no parameters and cannot be called") {
    TaskSet only_rc;
    only_rc.pc = only_rc.fi = only_rc.cl = false;
    ObfModel model(cfg_for(Backbone::kGru, 1, 8), only_rc, 12);
    for (auto* p : model.registry().params()) {
        CHECK(p->name.rfind("dec_pc", 0) != 0);
        CHECK(p->name.rfind("dec_fi", 0) != 0);
        CHECK(p->name.rfind("cl.", 0) != 0);
    }
    Tape t;
    t.grad_enabled = false;
    const Mat x = random_segment(40, 25);
    auto enc = model.encode(t, x);
    CHECK_THROWS_AS(model.decode_pc(t, enc, 30, nullptr), NumericalError);
    CHECK_THROWS_AS(model.decode_fi(t, enc, x), NumericalError);
}

TEST_CASE("identical seeds build identical models, different seeds differ") {
    ModelConfig cfg = cfg_for(Backbone::kGru, 1, 8);
    ObfModel a(cfg, TaskSet{}, 77);
    ObfModel b(cfg, TaskSet{}, 77);
    ObfModel c(cfg, TaskSet{}, 78);
    const Mat x = random_segment(40, 26);
    CHECK((a.embed(x) - b.embed(x)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.embed(x) - c.embed(x)).cwiseAbs().maxCoeff() > 0.0);
}
