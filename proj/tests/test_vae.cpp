#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <numeric>
#include <random>

#include "dismesh/grad_check.hpp"
#include "dismesh/laplacian.hpp"
#include "dismesh/vae.hpp"
#include "test_support.hpp"

using namespace dismesh;
using T64 = ag::Tensor<double>;
namespace dtest = dismesh::testing;

namespace {

T64 random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(r * c);
    for (auto& x : v) x = u(rng);
    return T64::from_values(r, c, std::move(v), grad);
}

// y = sum_k U T_k(Lambda) U^T x theta_k + bias through a dense eigendecomposition.
Eigen::MatrixXd spectral_filter(const Eigen::MatrixXd& lap, const Eigen::MatrixXd& x,
                                const std::vector<Eigen::MatrixXd>& theta, const Eigen::RowVectorXd& bias) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lap);
    const auto& lam = eig.eigenvalues();
    const auto& u = eig.eigenvectors();
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), theta[0].cols());
    Eigen::VectorXd t_prev = Eigen::VectorXd::Ones(lam.size()), t_cur = lam;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        Eigen::VectorXd tk;
        if (k == 0) tk = t_prev;
        else if (k == 1) tk = t_cur;
        else {
            tk = (2.0 * lam.array() * t_cur.array() - t_prev.array()).matrix();
            t_prev = t_cur;
            t_cur = tk;
        }
        y += u * tk.asDiagonal() * u.transpose() * x * theta[k];
    }
    return y.rowwise() + bias;
}

ChebLayerParams<double> random_cheb(std::size_t k, std::size_t cin, std::size_t cout, std::mt19937_64& rng) {
    return {random_tensor(k * cin, cout, rng), random_tensor(1, cout, rng)};
}

Eigen::MatrixXd as_eigen(const T64& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
    return m;
}

struct Micro {
    std::shared_ptr<const MeshHierarchy> hierarchy;
    ModelConfig config;
};

// 16-vertex grid with a single 0.5 decimation: two levels.
Micro micro_setup() {
    Micro m;
    m.hierarchy = std::make_shared<const MeshHierarchy>(build_hierarchy(dtest::planar_grid(4, 4), {0.5}));
    m.config.ratios = {0.5};
    m.config.channels = {3};
    m.config.cheb_order = {3};
    m.config.hidden = 4;
    m.config.d_shape = 2;
    m.config.d_pose = 2;
    return m;
}

PairedBatch<double> micro_batch(std::size_t n, std::mt19937_64& rng) {
    PairedBatch<double> b;
    b.vertices = random_tensor(2 * n, 3, rng, 1.0, false);
    b.shape_targets = random_tensor(2, kShapeFactorDim, rng, 1.0, false);
    b.pose_targets = random_tensor(2, kPoseFactorDim, rng, 1.0, false);
    b.same_subject = {{0, 1}};
    b.same_pose = {{1, 0}};
    return b;
}

void randomize(const MeshVAE<double>& model, std::mt19937_64& rng, double scale) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& [name, p] : model.parameters()) {
        auto v = p.mutable_value();
        for (auto& x : v) x = u(rng);
    }
}

}  // namespace

TEST(ChebConv, OrderOneIsPlainAffine) {
    std::mt19937_64 rng(1);
    const auto lap = scaled_laplacian(dtest::adjacency_from_edges(5, dtest::random_graph_edges(5, rng)));
    auto x = random_tensor(5, 2, rng);
    auto p = random_cheb(1, 2, 3, rng);
    auto y = cheb_conv(x, lap, p);
    auto ref = ag::add(ag::matmul(x, p.theta), p.bias);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y.value()[i], ref.value()[i]);
}

TEST(ChebConv, OrderTwoAddsOneLaplacianTerm) {
    std::mt19937_64 rng(2);
    const auto lap = scaled_laplacian(dtest::adjacency_from_edges(6, dtest::random_graph_edges(6, rng)));
    auto x = random_tensor(6, 2, rng);
    auto p = random_cheb(2, 2, 3, rng);
    p.bias = T64::zeros(1, 3);
    auto y = as_eigen(cheb_conv(x, lap, p));
    auto th = as_eigen(p.theta);
    Eigen::MatrixXd ref = as_eigen(x) * th.topRows(2) + dtest::to_eigen(lap) * as_eigen(x) * th.bottomRows(2);
    EXPECT_LT((y - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ChebConv, MatchesSpectralOracleOnSmallGraphs) {
    std::mt19937_64 rng(3);
    double worst = 0.0;
    for (std::size_t n = 2; n <= 12; ++n)
        for (std::size_t k = 1; k <= 6; ++k) {
            const auto edges = dtest::random_graph_edges(n, rng);
            const auto lap = scaled_laplacian(dtest::adjacency_from_edges(n, edges));
            const std::size_t cin = 2, cout = 3;
            auto x = random_tensor(n, cin, rng);
            auto p = random_cheb(k, cin, cout, rng);
            std::vector<Eigen::MatrixXd> theta;
            auto th = as_eigen(p.theta);
            for (std::size_t j = 0; j < k; ++j) theta.push_back(th.middleRows(static_cast<Eigen::Index>(j * cin), cin));
            auto ref = spectral_filter(dtest::dense_scaled_laplacian(n, edges), as_eigen(x), theta, as_eigen(p.bias).row(0));
            worst = std::max(worst, (as_eigen(cheb_conv(x, lap, p)) - ref).cwiseAbs().maxCoeff());
        }
    EXPECT_LT(worst, 1e-6);
}

TEST(ChebConv, PermutationEquivariant) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 10;
        const auto edges = dtest::random_graph_edges(n, rng);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::pair<std::size_t, std::size_t>> permuted;
        for (auto [a, b] : edges) permuted.push_back({perm[a], perm[b]});
        const auto lap = scaled_laplacian(dtest::adjacency_from_edges(n, edges));
        const auto lap_p = scaled_laplacian(dtest::adjacency_from_edges(n, permuted));
        auto x = random_tensor(n, 3, rng);
        // (P x)[perm[i]] = x[i]
        std::vector<std::size_t> inverse(n);
        for (std::size_t i = 0; i < n; ++i) inverse[perm[i]] = i;
        auto px = ag::select_rows(x, inverse);
        auto p = random_cheb(5, 3, 4, rng);
        auto y = cheb_conv(x, lap, p);
        auto yp = cheb_conv(px, lap_p, p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < 4; ++ch) {
                const double expected = y(i, ch), got = yp(perm[i], ch);
                EXPECT_NEAR(got, expected, 1e-9);
            }
    }
}

TEST(ChebConv, RejectsDimensionMismatch) {
    const auto lap = SparseMatrix::identity(4);
    std::mt19937_64 rng(5);
    auto p = random_cheb(2, 3, 2, rng);
    EXPECT_THROW(cheb_conv(T64::zeros(5, 3), lap, p), ValidationError);
    EXPECT_THROW(cheb_conv(T64::zeros(4, 4), lap, p), ValidationError);
}

TEST(Reparameterize, ZeroNoiseAndUnitNoise) {
    auto mu = T64::from_values(1, 3, {0.5, -1.0, 2.0});
    GaussianPosterior<double> post{mu, T64::zeros(1, 3)};
    auto z0 = reparameterize(post, T64::zeros(1, 3));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(z0.value()[i], mu.value()[i]);
    auto z1 = reparameterize(post, T64::from_values(1, 3, {0.0, 1.0, 0.0}));
    EXPECT_EQ(z1(0, 1), 0.0);
    EXPECT_EQ(z1(0, 0), 0.5);
}

TEST(Reparameterize, MonteCarloMean) {
    const std::size_t draws = 100000, d = 4;
    const std::vector<double> mu{0.3, -1.2, 2.0, 0.0}, logvar{0.0, -2.0, 1.0, 0.5};
    std::vector<double> mu_rows, lv_rows, eps;
    std::mt19937_64 rng(6);
    std::normal_distribution<double> normal;
    for (std::size_t i = 0; i < draws; ++i) {
        mu_rows.insert(mu_rows.end(), mu.begin(), mu.end());
        lv_rows.insert(lv_rows.end(), logvar.begin(), logvar.end());
        for (std::size_t j = 0; j < d; ++j) eps.push_back(normal(rng));
    }
    GaussianPosterior<double> post{T64::from_values(draws, d, mu_rows), T64::from_values(draws, d, lv_rows)};
    auto z = reparameterize(post, T64::from_values(draws, d, eps));
    auto mean = ag::mean_rows(z);
    for (std::size_t j = 0; j < d; ++j) {
        const double sigma = std::exp(logvar[j] / 2.0);
        EXPECT_LT(std::abs(mean(0, j) - mu[j]), 3.0 * sigma / std::sqrt(double(draws))) << "coordinate " << j;
    }
}

TEST(LatentCode, SplitConcatRoundTrip) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-3, 3);
    for (std::size_t ds = 0; ds <= 5; ++ds) {
        std::vector<double> z(5);
        for (auto& v : z) v = u(rng);
        auto code = LatentCode::split(z, ds);
        EXPECT_EQ(code.z_shape.size(), ds);
        EXPECT_EQ(code.concat(), z);
    }
    EXPECT_THROW(LatentCode::split({1.0}, 2), ValidationError);
}

TEST(KlDivergence, ClosedFormValues) {
    GaussianPosterior<double> prior{T64::zeros(1, 4), T64::zeros(1, 4)};
    EXPECT_EQ(kl_divergence(prior).item(), 0.0);
    GaussianPosterior<double> one{T64::from_values(1, 1, {1.0}), T64::zeros(1, 1)};
    EXPECT_NEAR(kl_divergence(one).item(), 0.5, 1e-15);
}

TEST(KlDivergence, ZeroOnlyAtPrior) {
    const std::vector<double> grid{-1.0, -1e-3, 0.0, 1e-3, 1.0};
    for (double m : grid)
        for (double lv : grid) {
            GaussianPosterior<double> p{T64::from_values(1, 1, {m}), T64::from_values(1, 1, {lv})};
            const double kl = kl_divergence(p).item();
            EXPECT_GE(kl, 0.0);
            EXPECT_EQ(kl < 1e-12, m == 0.0 && lv == 0.0) << "mu=" << m << " logvar=" << lv << " kl=" << kl;
        }
}

TEST(KlDivergence, MatchesMonteCarlo) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1, 1);
    const std::size_t d = 8;
    std::vector<double> mu(d), lv(d);
    for (std::size_t i = 0; i < d; ++i) {
        mu[i] = u(rng);
        lv[i] = u(rng);
    }
    GaussianPosterior<double> post{T64::from_values(1, d, mu), T64::from_values(1, d, lv)};
    const double closed = kl_divergence(post).item();
    std::normal_distribution<double> normal;
    const std::size_t draws = 1000000;
    double acc = 0.0;
    for (std::size_t s = 0; s < draws; ++s) {
        double log_ratio = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double e = normal(rng);
            const double z = mu[i] + std::exp(lv[i] / 2.0) * e;
            log_ratio += -0.5 * lv[i] - 0.5 * e * e + 0.5 * z * z;
        }
        acc += log_ratio;
    }
    EXPECT_NEAR(acc / double(draws), closed, 1e-2);
}

TEST(CrossCovariance, HandExample) {
    auto zs = T64::from_values(2, 1, {1.0, -1.0});
    auto zp = T64::from_values(2, 1, {1.0, -1.0});
    EXPECT_DOUBLE_EQ(cross_covariance_penalty(zs, zp).item(), 0.5);
    auto constant = T64::from_values(2, 1, {0.7, 0.7});
    EXPECT_EQ(cross_covariance_penalty(zs, constant).item(), 0.0);
}

TEST(MeshVae, ShapeContractsOverConfigGrid) {
    auto tube = tube_template();
    for (std::size_t d_s : {1, 8})
        for (std::size_t d_p : {1, 3})
            for (std::size_t k : {1, 3}) {
                ModelConfig cfg;
                cfg.ratios = {0.5, 0.5};
                cfg.channels = {4, 5};
                cfg.cheb_order = {k, k};
                cfg.hidden = 6;
                cfg.d_shape = d_s;
                cfg.d_pose = d_p;
                auto h = std::make_shared<const MeshHierarchy>(build_hierarchy(tube, cfg.ratios));
                MeshVAE<double> model(cfg, h, 1);
                std::mt19937_64 rng(9);
                auto x = random_tensor(2 * tube.vertex_count(), 3, rng, 1.0, false);
                auto post = model.encode(x);
                EXPECT_EQ(post.mu.rows(), 2u);
                EXPECT_EQ(post.mu.cols(), d_s + d_p);
                EXPECT_EQ(post.logvar.cols(), d_s + d_p);
                auto y = model.decode(random_tensor(2, d_s + d_p, rng, 1.0, false));
                EXPECT_EQ(y.rows(), 2 * tube.vertex_count());
                EXPECT_EQ(y.cols(), 3u);
            }
}

TEST(MeshVae, ZeroFinalAffineGivesPriorPosterior) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 3);
    auto post = model.encode(T64::zeros(16, 3));
    for (double v : post.mu.value()) EXPECT_EQ(v, 0.0);
    for (double v : post.logvar.value()) EXPECT_EQ(v, 0.0);
}

TEST(MeshVae, DeterministicEncodeDecode) {
    auto m = micro_setup();
    MeshVAE<double> a(m.config, m.hierarchy, 11), b(m.config, m.hierarchy, 11);
    std::mt19937_64 rng(10);
    randomize(a, rng, 0.5);
    rng.seed(10);
    randomize(b, rng, 0.5);
    auto x = random_tensor(16, 3, rng, 1.0, false);
    auto p1 = a.encode(x), p2 = a.encode(x), p3 = b.encode(x);
    EXPECT_TRUE(std::equal(p1.mu.value().begin(), p1.mu.value().end(), p2.mu.value().begin()));
    EXPECT_TRUE(std::equal(p1.mu.value().begin(), p1.mu.value().end(), p3.mu.value().begin()));
    auto z = random_tensor(1, 4, rng, 1.0, false);
    auto y1 = a.decode(z), y2 = a.decode(z);
    EXPECT_TRUE(std::equal(y1.value().begin(), y1.value().end(), y2.value().begin()));
}

TEST(MeshVae, BatchedMatchesPerSample) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 4);
    std::mt19937_64 rng(21);
    randomize(model, rng, 0.5);
    const std::size_t batch = 3;
    auto x = random_tensor(16 * batch, 3, rng, 1.0, false);
    auto z = random_tensor(batch, 4, rng, 1.0, false);
    auto joint = model.encode(x);
    auto y = model.decode(z);
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<std::size_t> rows(16);
        std::iota(rows.begin(), rows.end(), b * 16);
        auto single = model.encode(ag::select_rows(x, rows));
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_NEAR(single.mu(0, j), joint.mu(b, j), 1e-12);
            EXPECT_NEAR(single.logvar(0, j), joint.logvar(b, j), 1e-12);
        }
        auto ys = model.decode(ag::select_rows(z, {b}));
        for (std::size_t v = 0; v < 16; ++v)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(ys(v, c), y(b * 16 + v, c), 1e-12);
    }
}

TEST(MeshVae, SameSeedSameInit) {
    auto m = micro_setup();
    MeshVAE<float> a(m.config, m.hierarchy, 5), b(m.config, m.hierarchy, 5), c(m.config, m.hierarchy, 6);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].first, pb[i].first);
        EXPECT_TRUE(std::equal(pa[i].second.value().begin(), pa[i].second.value().end(), pb[i].second.value().begin()));
        any_diff |= !std::equal(pa[i].second.value().begin(), pa[i].second.value().end(), pc[i].second.value().begin());
    }
    EXPECT_TRUE(any_diff);
}

TEST(MeshVae, RejectsWrongVertexCountAndCodeSize) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 1);
    EXPECT_THROW(model.encode(T64::zeros(15, 3)), ValidationError);
    EXPECT_THROW(model.decode(T64::zeros(1, 5)), ValidationError);
    auto bad = m.config;
    bad.channels = {3, 4};
    EXPECT_THROW(MeshVAE<double>(bad, m.hierarchy, 1), ValidationError);
}

TEST(Losses, SwapOfIdenticalPairIsReconstruction) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 2);
    std::mt19937_64 rng(12);
    randomize(model, rng, 0.5);
    auto single = random_tensor(16, 3, rng, 1.0, false);
    PairedBatch<double> b;
    b.vertices = ag::concat_rows<double>({single, single});
    b.shape_targets = T64::zeros(2, kShapeFactorDim);
    b.pose_targets = T64::zeros(2, kPoseFactorDim);
    b.same_subject = {{0, 1}};
    b.same_pose = {{1, 0}};
    auto losses = disentangle_losses(b, model);
    auto recon = vertex_l1(model.decode(model.encode(single).mu), single);
    EXPECT_NEAR(losses.swap.item(), recon.item(), 1e-12);
    EXPECT_GE(losses.reg.item(), 0.0);
    EXPECT_GE(losses.xcov.item(), 0.0);
}

TEST(Losses, RequiresBothPairTypes) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 2);
    std::mt19937_64 rng(13);
    auto b = micro_batch(16, rng);
    b.same_pose.clear();
    EXPECT_THROW(disentangle_losses(b, model), ValidationError);
}

TEST(TotalLoss, ReconOnlyEqualsL1) {
    auto m = micro_setup();
    m.config.weights = {1.0, 0.0, 0.0, 0.0, 0.0};
    MeshVAE<double> model(m.config, m.hierarchy, 4);
    std::mt19937_64 rng(14);
    randomize(model, rng, 0.5);
    auto b = micro_batch(16, rng);
    auto noise = random_tensor(2, 4, rng, 1.0, false);
    auto out = total_loss(b, model, 3, 10, noise);
    auto l1 = vertex_l1(model.decode(reparameterize(model.encode(b.vertices), noise)), b.vertices);
    EXPECT_EQ(out.total_value(), l1.item());
    EXPECT_EQ(out.swap, 0.0);
}

TEST(TotalLoss, BetaIsZeroAtEpochZero) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 4);
    std::mt19937_64 rng(15);
    randomize(model, rng, 0.5);
    auto b = micro_batch(16, rng);
    auto noise = random_tensor(2, 4, rng, 1.0, false);
    auto out = total_loss(b, model, 0, 10, noise);
    EXPECT_EQ(out.beta, 0.0);
    EXPECT_GT(out.kl, 0.0);
    EXPECT_EQ(out.w_kl, 0.0);
    EXPECT_DOUBLE_EQ(beta_schedule(1, 10, 0.2), 0.5);
    EXPECT_DOUBLE_EQ(beta_schedule(7, 10, 0.2), 1.0);
}

TEST(TotalLoss, BreakdownSumsToTotal) {
    auto m = micro_setup();
    MeshVAE<double> model(m.config, m.hierarchy, 4);
    std::mt19937_64 rng(16);
    randomize(model, rng, 0.5);
    auto b = micro_batch(16, rng);
    auto out = total_loss(b, model, 1, 10, random_tensor(2, 4, rng, 1.0, false));
    const double sum = out.w_recon + out.w_kl + out.w_swap + out.w_reg + out.w_xcov;
    EXPECT_LE(std::abs(sum - out.total_value()), 1e-6 * std::abs(out.total_value()));
    for (double t : {out.recon, out.kl, out.swap, out.reg, out.xcov}) EXPECT_GE(t, 0.0);
}

TEST(TotalLoss, EndToEndGradCheck) {
    auto m = micro_setup();
    ASSERT_EQ(m.hierarchy->levels.size(), 2u);
    ASSERT_EQ(m.hierarchy->levels[0].vertex_count, 16u);
    MeshVAE<double> model(m.config, m.hierarchy, 7);
    std::mt19937_64 rng(17);
    randomize(model, rng, 0.4);
    auto b = micro_batch(16, rng);
    auto noise = random_tensor(2, 4, rng, 1.0, false);
    std::vector<T64> params;
    std::vector<std::string> names;
    for (auto& [name, p] : model.parameters()) {
        params.push_back(p);
        names.push_back(name);
    }
    auto report = ag::grad_check([&](const std::vector<T64>&) { return total_loss(b, model, 5, 10, noise).total; },
                                 params, 1e-5, 1e-4);
    for (std::size_t i = 0; i < names.size(); ++i)
        EXPECT_LE(report.max_rel_error[i], 1e-4) << names[i] << " worst at " << report.worst_index[i];
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
    ModelConfig c;
    c.d_pose = 5;
    c.weights.xcov = 0.25;
    EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
    auto j = c.to_json();
    j["bogus"] = 1;
    try {
        ModelConfig::from_json(j);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
    }
    auto w = c.to_json();
    w["weights"]["kl"] = -1.0;
    EXPECT_THROW(ModelConfig::from_json(w), ValidationError);
    auto lens = c.to_json();
    lens["channels"] = {16};
    EXPECT_THROW(ModelConfig::from_json(lens), ValidationError);
}
