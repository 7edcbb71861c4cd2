#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <functional>
#include <vector>

#include "unilex/rng.hpp"
#include "unilex/tape.hpp"

using unilex::Mat;
using unilex::Pool;
using unilex::Reduction;
using unilex::Rng;
using unilex::Tape;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

using Builder = std::function<int(Tape&, const std::vector<int>&)>;

double eval_scalar(const Builder& build, const std::vector<Mat>& inputs) {
    Tape t;
    std::vector<int> ids;
    for (const auto& m : inputs) ids.push_back(t.leaf(m, false));
    return t.value(build(t, ids))(0, 0);
}

/// Central-difference check of the analytic gradient of a scalar-valued
/// tape program w.r.t. every element of every input.
void check_grads(const Builder& build, std::vector<Mat> inputs, double eps = 1e-5,
                 double tol = 1e-6) {
    Tape t;
    std::vector<int> ids;
    for (const auto& m : inputs) ids.push_back(t.leaf(m, true));
    const int root = build(t, ids);
    t.backward(root);
    std::vector<Mat> analytic;
    for (const int id : ids) analytic.push_back(t.grad(id));

    for (size_t k = 0; k < inputs.size(); ++k) {
        for (Eigen::Index i = 0; i < inputs[k].rows(); ++i) {
            for (Eigen::Index j = 0; j < inputs[k].cols(); ++j) {
                auto plus = inputs;
                auto minus = inputs;
                plus[k](i, j) += eps;
                minus[k](i, j) -= eps;
                const double fd = (eval_scalar(build, plus) - eval_scalar(build, minus)) /
                                  (2.0 * eps);
                const double an = analytic[k](i, j);
                const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
                INFO("input ", k, " element (", i, ",", j, "): analytic=", an, " fd=", fd);
                CHECK(std::abs(fd - an) / denom < tol);
            }
        }
    }
}

/// Reduces an arbitrary output node to a scalar via a fixed random weighting,
/// so gradient information is not washed out by plain summation.
int weighted_sum(Tape& t, int node, uint64_t seed) {
    Rng rng(seed);
    const Mat& v = t.value(node);
    const int w = t.leaf(random_mat(rng, static_cast<int>(v.rows()),
                                    static_cast<int>(v.cols()), 0.1, 1.0));
    return t.sum_all(t.hadamard(node, w));
}

}  // namespace

TEST_CASE("matmul gradients") {
    Rng rng(1);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.matmul(in[0], in[1]), 11);
        },
        {random_mat(rng, 3, 4), random_mat(rng, 4, 5)});
}

TEST_CASE("matmul_nt and transpose gradients") {
    Rng rng(2);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            const int a = t.matmul_nt(in[0], in[1]);
            return weighted_sum(t, t.matmul(t.transpose(a), in[2]), 12);
        },
        {random_mat(rng, 3, 4), random_mat(rng, 5, 4), random_mat(rng, 3, 2)});
}

TEST_CASE("elementwise op gradients") {
    Rng rng(3);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            const int s = t.sub(t.add(in[0], in[1]), t.scale(in[2], 0.7));
            return weighted_sum(t, t.hadamard(s, in[0]), 13);
        },
        {random_mat(rng, 4, 3), random_mat(rng, 4, 3), random_mat(rng, 4, 3)});
}

TEST_CASE("add_rowvec gradients") {
    Rng rng(4);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.add_rowvec(in[0], in[1]), 14);
        },
        {random_mat(rng, 5, 3), random_mat(rng, 1, 3)});
}

TEST_CASE("relu gradient away from kink") {
    Rng rng(5);
    Mat x = random_mat(rng, 4, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.1;
    check_grads(
        [](Tape& t, const std::vector<int>& in) { return weighted_sum(t, t.relu(in[0]), 15); },
        {x});
}

TEST_CASE("gelu gradients") {
    Rng rng(6);
    check_grads(
        [](Tape& t, const std::vector<int>& in) { return weighted_sum(t, t.gelu(in[0]), 16); },
        {random_mat(rng, 4, 5, -2.0, 2.0)});
}

TEST_CASE("layer_norm gradients") {
    Rng rng(7);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.layer_norm(in[0], in[1], in[2]), 17);
        },
        {random_mat(rng, 4, 6), random_mat(rng, 1, 6, 0.5, 1.5), random_mat(rng, 1, 6)},
        1e-5, 1e-5);
}

TEST_CASE("embedding and gather_rows gradients") {
    Rng rng(8);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            const int e = t.embedding(in[0], {2, 0, 2, 1});
            return weighted_sum(t, t.gather_rows(e, {3, 1, 1}), 18);
        },
        {random_mat(rng, 3, 4)});
}

TEST_CASE("l2_normalize_rows gradients") {
    Rng rng(9);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.l2_normalize_rows(in[0]), 19);
        },
        {random_mat(rng, 4, 5, 0.2, 1.0)});
}

TEST_CASE("segment_pool gradients (max and sum)") {
    Rng rng(10);
    const std::vector<std::pair<int, int>> segs{{0, 3}, {3, 7}};
    check_grads(
        [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.segment_pool(in[0], segs, Pool::Max), 20);
        },
        {random_mat(rng, 7, 4)});
    check_grads(
        [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.segment_pool(in[0], segs, Pool::Sum), 21);
        },
        {random_mat(rng, 7, 4)});
}

TEST_CASE("attention gradients, full and masked") {
    Rng rng(11);
    const int batch = 2, seq = 4, d = 6, heads = 2;
    auto build_full = [=](Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.attention(in[0], in[1], in[2], heads, batch, seq), 22);
    };
    check_grads(build_full,
                {random_mat(rng, batch * seq, d), random_mat(rng, batch * seq, d),
                 random_mat(rng, batch * seq, d)},
                1e-5, 1e-5);

    auto build_masked = [=](Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.attention(in[0], in[1], in[2], heads, batch, seq, {3, 4}),
                            23);
    };
    check_grads(build_masked,
                {random_mat(rng, batch * seq, d), random_mat(rng, batch * seq, d),
                 random_mat(rng, batch * seq, d)},
                1e-5, 1e-5);
}

TEST_CASE("attention masking zeroes masked key columns") {
    Rng rng(12);
    const int seq = 4, d = 4;
    Mat q = random_mat(rng, seq, d), k = random_mat(rng, seq, d), v = random_mat(rng, seq, d);
    Mat v2 = v;
    v2.row(3).setConstant(99.0);  // content at a masked position must not matter
    Tape t1, t2;
    const int o1 = t1.attention(t1.leaf(q), t1.leaf(k), t1.leaf(v), 2, 1, seq, {3});
    const int o2 = t2.attention(t2.leaf(q), t2.leaf(k), t2.leaf(v2), 2, 1, seq, {3});
    CHECK((t1.value(o1).topRows(3) - t2.value(o2).topRows(3)).cwiseAbs().maxCoeff() ==
          doctest::Approx(0.0));
}

TEST_CASE("softmax_xent gradients") {
    Rng rng(13);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return t.softmax_xent(in[0], {1, 0, 3}, 0.5, Reduction::Mean);
        },
        {random_mat(rng, 3, 4)});
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return t.softmax_xent(in[0], {2, 2, 0}, 1.0, Reduction::Sum);
        },
        {random_mat(rng, 3, 4)});
}

TEST_CASE("kl_softmax_rows gradients flow to both sides") {
    Rng rng(14);
    check_grads(
        [](Tape& t, const std::vector<int>& in) {
            return t.kl_softmax_rows(in[0], in[1], 0.7);
        },
        {random_mat(rng, 3, 5), random_mat(rng, 3, 5)});
}

TEST_CASE("detach blocks gradient flow") {
    Rng rng(15);
    Tape t;
    const int a = t.leaf(random_mat(rng, 3, 3), true);
    const int b = t.detach(a);
    const int root = t.sum_all(t.hadamard(b, b));
    CHECK_FALSE(t.requires_grad(root));
    CHECK_THROWS_AS(t.backward(root), std::invalid_argument);
}

TEST_CASE("col_mean_sq_sum gradients") {
    Rng rng(16);
    check_grads(
        [](Tape& t, const std::vector<int>& in) { return t.col_mean_sq_sum(in[0]); },
        {random_mat(rng, 4, 3, 0.0, 2.0)});
}

TEST_CASE("parameter binding accumulates gradients across uses") {
    unilex::Parameter p("w", Mat::Ones(2, 2));
    Tape t;
    const int w1 = t.param(p);
    const int w2 = t.param(p);
    CHECK(w1 == w2);  // memoized: one node per parameter
    const int root = t.sum_all(t.add(t.matmul(w1, w1), w2));
    t.backward(root);
    // d/dW sum(W*W + W) at W=ones: 2*2 (from the product, both sides) + 1 = 5.
    CHECK(p.grad(0, 0) == doctest::Approx(5.0));
}

TEST_CASE("frozen parameters receive no gradient") {
    unilex::Parameter p("w", Mat::Ones(2, 2));
    unilex::Parameter q("f", Mat::Ones(2, 2));
    Tape t;
    const int a = t.param(p, true);
    const int b = t.param(q, false);
    t.backward(t.sum_all(t.matmul(a, b)));
    CHECK(p.grad.cwiseAbs().sum() > 0.0);
    CHECK(q.grad.cwiseAbs().sum() == 0.0);
}

TEST_CASE("composite transformer-style block matches finite differences") {
    Rng rng(17);
    const int batch = 2, seq = 3, d = 4, heads = 2;
    // x -> layernorm -> qkv projections -> attention -> residual -> pooled scalar
    check_grads(
        [=](Tape& t, const std::vector<int>& in) {
            const int x = in[0];
            const int ln = t.layer_norm(x, in[1], in[2]);
            const int q = t.matmul(ln, in[3]);
            const int k = t.matmul(ln, in[4]);
            const int v = t.matmul(ln, in[5]);
            const int att = t.attention(q, k, v, heads, batch, seq, {seq, 2});
            const int res = t.add(x, att);
            const int pooled = t.segment_pool(res, {{0, seq}, {seq, 2 * seq}}, Pool::Max);
            const int norm = t.l2_normalize_rows(pooled);
            return weighted_sum(t, t.gelu(norm), 24);
        },
        {random_mat(rng, batch * seq, d), random_mat(rng, 1, d, 0.5, 1.5),
         random_mat(rng, 1, d), random_mat(rng, d, d), random_mat(rng, d, d),
         random_mat(rng, d, d)},
        1e-5, 1e-4);
}
