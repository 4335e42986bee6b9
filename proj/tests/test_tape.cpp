// Finite-difference oracle checks for every autodiff op. Each test builds
// a small graph ending in a scalar, computes analytic input/parameter
// gradients, and compares them against central differences of the same
// forward computation.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "obf/rng.hpp"
#include "obf/tape.hpp"

using namespace obf;
using namespace obf::nn;

namespace {

Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-scale, scale);
    return m;
}

struct Check {
    ParamRegistry reg;
    std::vector<Param*> params;

    void add(Param& p) {
        reg.add(p);
        params.push_back(&p);
    }

    // builder(tape) must construct the scalar loss node from live params.
    double max_rel_err(const std::function<Node*(Tape&)>& builder, double h = 1e-5) {
        Tape tape;
        Node* loss = builder(tape);
        GradBuffer analytic;
        analytic.reset(reg);
        tape.backward(loss, analytic);

        double worst = 0.0;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Param& p = *params[pi];
            for (Eigen::Index k = 0; k < p.value.size(); ++k) {
                const double saved = p.value(k);
                p.value(k) = saved + h;
                Tape tp;
                const double lp = builder(tp)->value(0, 0);
                p.value(k) = saved - h;
                Tape tm;
                const double lm = builder(tm)->value(0, 0);
                p.value(k) = saved;
                const double fd = (lp - lm) / (2.0 * h);
                const double an = analytic.g[pi](k);
                const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
                worst = std::max(worst, err);
            }
        }
        return worst;
    }
};

}  // namespace

TEST_CASE("elementwise and matmul gradients match finite differences") {
    Rng rng(7);
    Param a{"a", random_mat(3, 4, rng)};
    Param b{"b", random_mat(3, 4, rng)};
    Param w{"w", random_mat(5, 3, rng)};
    Check c;
    c.add(a);
    c.add(b);
    c.add(w);

    auto builder = [&](Tape& t) {
        Node* na = t.param(a);
        Node* nb = t.param(b);
        Node* nw = t.param(w);
        Node* mix = t.add(t.cmul(na, nb), t.scale(t.sub(na, nb), 0.7));
        Node* prod = t.matmul(nw, mix);                       // 5x4
        Node* acts = t.add(t.sigmoid(prod), t.tanh_(prod));   // 5x4
        Node* lk = t.leaky_relu(acts, 0.01);
        Node* ab = t.abs_(t.sub(lk, t.leaf(Mat::Constant(5, 4, 0.3))));
        return t.sumsq(ab);
    };
    CHECK(c.max_rel_err(builder) < 1e-6);
}

TEST_CASE("matmul transpose flags match finite differences") {
    Rng rng(8);
    Param a{"a", random_mat(4, 3, rng)};
    Param b{"b", random_mat(5, 4, rng)};
    Check c;
    c.add(a);
    c.add(b);
    auto builder = [&](Tape& t) {
        Node* na = t.param(a);
        Node* nb = t.param(b);
        Node* m1 = t.matmul(na, nb, true, true);   // 3x5
        Node* m2 = t.matmul(nb, na);               // 5x3
        return t.add(t.sumsq(m1), t.sumsq(m2));
    };
    CHECK(c.max_rel_err(builder) < 1e-6);
}

TEST_CASE("concat, slice, pad gradients match finite differences") {
    Rng rng(9);
    Param a{"a", random_mat(3, 4, rng)};
    Param b{"b", random_mat(2, 4, rng)};
    Check c;
    c.add(a);
    c.add(b);
    auto builder = [&](Tape& t) {
        Node* na = t.param(a);
        Node* nb = t.param(b);
        Node* cat = t.concat_rows(na, nb);          // 5x4
        Node* s1 = t.slice_rows(cat, 1, 3);
        Node* s2 = t.slice_cols(cat, 0, 2);
        Node* pad = t.pad_rows(s2, 6);
        Node* cc = t.concat_cols(s1, t.slice_cols(pad, 0, 1));
        return t.add(t.sumsq(cc), t.sum(pad));
    };
    CHECK(c.max_rel_err(builder) < 1e-6);
}

TEST_CASE("softmax rows with mask matches finite differences") {
    Rng rng(10);
    Param a{"a", random_mat(4, 4, rng)};
    Check c;
    c.add(a);
    Mat mask = Mat::Zero(4, 4);
    for (int r = 0; r < 4; ++r)
        for (int col = r + 1; col < 4; ++col) mask(r, col) = -1e30;  // causal
    Mat wfix = random_mat(4, 4, rng);
    auto builder = [&](Tape& t) {
        Node* s = t.softmax_rows(t.param(a), &mask);
        return t.sumsq(t.cmul(s, t.leaf(wfix)));
    };
    CHECK(c.max_rel_err(builder) < 1e-6);
}

TEST_CASE("conv1d and avg_pool1d match finite differences") {
    Rng rng(11);
    const int cin = 2, cout = 3, k = 3, tlen = 8;
    Param x{"x", random_mat(cin, tlen, rng)};
    Param w{"w", random_mat(cout, cin * k, rng)};
    Param b{"b", random_mat(cout, 1, rng)};
    Check c;
    c.add(x);
    c.add(w);
    c.add(b);
    auto builder = [&](Tape& t) {
        Node* y = t.conv1d(t.param(x), t.param(w), t.param(b), k);
        Node* p = t.avg_pool1d(y, 2);
        return t.sumsq(p);
    };
    CHECK(c.max_rel_err(builder) < 1e-6);
}

TEST_CASE("recurrent cells match finite differences") {
    Rng rng(12);
    const int in_d = 3, hid = 4;

    SUBCASE("rnn") {
        Param x{"x", random_mat(in_d, 1, rng)};
        Param wih{"wih", random_mat(hid, in_d, rng)};
        Param whh{"whh", random_mat(hid, hid, rng)};
        Param bih{"bih", random_mat(hid, 1, rng)};
        Param bhh{"bhh", random_mat(hid, 1, rng)};
        Check c;
        c.add(x);
        c.add(wih);
        c.add(whh);
        c.add(bih);
        c.add(bhh);
        auto builder = [&](Tape& t) {
            Node* h0 = t.leaf(Mat::Zero(hid, 1));
            Node* h1 = t.rnn_cell(t.param(x), h0, t.param(wih), t.param(whh), t.param(bih),
                                  t.param(bhh));
            Node* h2 = t.rnn_cell(t.param(x), h1, t.param(wih), t.param(whh), t.param(bih),
                                  t.param(bhh));
            return t.sumsq(h2);
        };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }

    SUBCASE("gru two steps") {
        Param x{"x", random_mat(in_d, 1, rng)};
        Param wih{"wih", random_mat(3 * hid, in_d, rng)};
        Param whh{"whh", random_mat(3 * hid, hid, rng)};
        Param bih{"bih", random_mat(3 * hid, 1, rng)};
        Param bhh{"bhh", random_mat(3 * hid, 1, rng)};
        Check c;
        c.add(x);
        c.add(wih);
        c.add(whh);
        c.add(bih);
        c.add(bhh);
        auto builder = [&](Tape& t) {
            Node* h0 = t.leaf(Mat::Zero(hid, 1));
            Node* h1 = t.gru_cell(t.param(x), h0, t.param(wih), t.param(whh), t.param(bih),
                                  t.param(bhh));
            Node* h2 = t.gru_cell(t.param(x), h1, t.param(wih), t.param(whh), t.param(bih),
                                  t.param(bhh));
            return t.sumsq(h2);
        };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }

    SUBCASE("lstm two steps") {
        Param x{"x", random_mat(in_d, 1, rng)};
        Param wih{"wih", random_mat(4 * hid, in_d, rng)};
        Param whh{"whh", random_mat(4 * hid, hid, rng)};
        Param bih{"bih", random_mat(4 * hid, 1, rng)};
        Param bhh{"bhh", random_mat(4 * hid, 1, rng)};
        Param hc0{"hc0", random_mat(2 * hid, 1, rng, 0.5)};
        Check c;
        c.add(x);
        c.add(wih);
        c.add(whh);
        c.add(bih);
        c.add(bhh);
        c.add(hc0);
        auto builder = [&](Tape& t) {
            Node* hc1 = t.lstm_cell(t.param(x), t.param(hc0), t.param(wih), t.param(whh),
                                    t.param(bih), t.param(bhh));
            Node* hc2 = t.lstm_cell(t.param(x), hc1, t.param(wih), t.param(whh), t.param(bih),
                                    t.param(bhh));
            return t.sumsq(t.slice_rows(hc2, 0, hid));
        };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }
}

TEST_CASE("batch norm (train and eval) matches finite differences") {
    Rng rng(13);
    const int f = 3, b = 5;
    Param x{"x", random_mat(f, b, rng)};
    Param gamma{"gamma", random_mat(f, 1, rng, 0.5)};
    Param beta{"beta", random_mat(f, 1, rng, 0.5)};
    Check c;
    c.add(x);
    c.add(gamma);
    c.add(beta);

    SUBCASE("train mode") {
        auto builder = [&](Tape& t) {
            Node* y = t.batch_norm_train(t.param(x), t.param(gamma), t.param(beta), 1e-5);
            return t.sumsq(y);
        };
        CHECK(c.max_rel_err(builder) < 1e-5);
    }
    SUBCASE("eval mode") {
        Mat rm = random_mat(f, 1, rng, 0.3);
        Mat rv = random_mat(f, 1, rng, 0.3).cwiseAbs() + Mat::Constant(f, 1, 0.5);
        auto builder = [&](Tape& t) {
            Node* y = t.batch_norm_eval(t.param(x), t.param(gamma), t.param(beta), rm, rv, 1e-5);
            return t.sumsq(y);
        };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }
}

TEST_CASE("layer norm matches finite differences") {
    Rng rng(14);
    const int f = 5, tlen = 3;
    Param x{"x", random_mat(f, tlen, rng)};
    Param gamma{"gamma", random_mat(f, 1, rng, 0.5)};
    Param beta{"beta", random_mat(f, 1, rng, 0.5)};
    Check c;
    c.add(x);
    c.add(gamma);
    c.add(beta);
    auto builder = [&](Tape& t) {
        Node* y = t.layer_norm_cols(t.param(x), t.param(gamma), t.param(beta), 1e-5);
        return t.sumsq(y);
    };
    CHECK(c.max_rel_err(builder) < 1e-5);
}

TEST_CASE("loss heads match finite differences") {
    Rng rng(15);

    SUBCASE("softmax cross entropy") {
        Param z{"z", random_mat(4, 3, rng)};
        Check c;
        c.add(z);
        std::vector<int> labels{2, 0, 3};
        auto builder = [&](Tape& t) { return t.softmax_ce_cols(t.param(z), labels); };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }

    SUBCASE("bce on logits") {
        Param z{"z", random_mat(1, 6, rng, 2.0)};
        Check c;
        c.add(z);
        Mat y(1, 6), w(1, 6);
        for (int j = 0; j < 6; ++j) {
            y(0, j) = (j % 2 == 0) ? 1.0 : 0.0;
            w(0, j) = 0.1 + 0.1 * j;
        }
        auto builder = [&](Tape& t) { return t.bce_logit_wsum(t.param(z), y, w); };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }

    SUBCASE("log op") {
        Param z{"z", Mat(random_mat(2, 3, rng).cwiseAbs() + Mat::Constant(2, 3, 0.5))};
        Check c;
        c.add(z);
        auto builder = [&](Tape& t) { return t.sum(t.log_(t.param(z))); };
        CHECK(c.max_rel_err(builder) < 1e-6);
    }
}

TEST_CASE("dropout applies mask and routes gradient through kept entries") {
    Rng rng(16);
    Param x{"x", random_mat(3, 3, rng)};
    Mat mask = Mat::Zero(3, 3);
    mask(0, 0) = 2.0;  // keep prob 0.5 -> 1/(1-p) = 2
    mask(1, 2) = 2.0;
    Check c;
    c.add(x);
    auto builder = [&](Tape& t) { return t.sumsq(t.dropout(t.param(x), mask)); };
    CHECK(c.max_rel_err(builder) < 1e-6);
}

TEST_CASE("grad-disabled tape evaluates but produces no gradients") {
    Rng rng(17);
    Param x{"x", random_mat(2, 2, rng)};
    ParamRegistry reg;
    reg.add(x);
    Tape t;
    t.grad_enabled = false;
    Node* y = t.sumsq(t.sigmoid(t.param(x)));
    CHECK(y->value(0, 0) > 0.0);
    GradBuffer gb;
    gb.reset(reg);
    t.backward(y, gb);
    CHECK(gb.g[0].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("add_colvec broadcasts bias over columns") {
    Rng rng(18);
    Param x{"x", random_mat(3, 4, rng)};
    Param v{"v", random_mat(3, 1, rng)};
    Check c;
    c.add(x);
    c.add(v);
    auto builder = [&](Tape& t) { return t.sumsq(t.add_colvec(t.param(x), t.param(v))); };
    CHECK(c.max_rel_err(builder) < 1e-6);
}
