#include "doctest.h"

#include "../support/oracles.hpp"

#include "fdemand/error.hpp"
#include "fdemand/gmm.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace fdemand;
using namespace fdemand::gmm;

namespace {

RowMatrix sample_data(int n, int d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    RowMatrix m(n, d);
    for (int i = 0; i < n; ++i) {
        const double shift = (i % 3) * 3.0;
        for (int j = 0; j < d; ++j) m(i, j) = z(rng) * (1.0 + 0.3 * j) + shift * (j % 2 == 0 ? 1.0 : -0.5);
    }
    return m;
}

RowMatrix sample_resp(int n, int k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    RowMatrix r(n, k);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < k; ++j) s += r(i, j) = u(rng);
        r.row(i) /= s;
    }
    return r;
}

double normal_pdf_1d(double y, double mu, double var) {
    return std::exp(-0.5 * (y - mu) * (y - mu) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

bool is_diagonal(const Eigen::MatrixXd& m, double tol) {
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j)
            if (i != j && std::abs(m(i, j)) > tol) return false;
    return true;
}

} // namespace

TEST_CASE("model codes") {
    CHECK(all_models().size() == 14);
    CHECK(implemented_models().size() == 6);
    for (auto m : all_models()) {
        CHECK(parse_model(code(m)) == m);
        const std::string c(code(m));
        const bool expected = c == "EII" || c == "EEI" || c == "EVI" || c == "EEE" || c == "EEV" || c == "VVV";
        CHECK(is_implemented(m) == expected);
    }
    CHECK_FALSE(parse_model("XYZ").has_value());
    CHECK(model_order(CovarianceModel::EII) < model_order(CovarianceModel::VII));
    CHECK(model_order(CovarianceModel::EEV) < model_order(CovarianceModel::VVV));
}

TEST_CASE("feature matrix validation and standardization") {
    CHECK_THROWS_AS(FeatureMatrix(RowMatrix(0, 2), {}), ContractViolation);
    RowMatrix bad(2, 1);
    bad << 1.0, std::nan("");
    CHECK_THROWS_AS(FeatureMatrix(bad, {"a"}), ContractViolation);
    CHECK_THROWS_AS(FeatureMatrix(RowMatrix::Ones(3, 2), {"a"}), ContractViolation);
    CHECK_THROWS_AS(FeatureMatrix(RowMatrix::Ones(3, 1), {"a"}).standardized(), ContractViolation);

    const FeatureMatrix z = FeatureMatrix(sample_data(200, 3, 1), {}).standardized();
    REQUIRE(z.standardization().has_value());
    for (int c = 0; c < 3; ++c) {
        const double mean = z.values().col(c).mean();
        const double var = (z.values().col(c).array() - mean).square().mean();
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
    }
}

TEST_CASE("component density") {
    Eigen::VectorXd y(1), mu(1);
    y << 0;
    mu << 0;
    CHECK(component_density(y, mu, Eigen::MatrixXd::Identity(1, 1)) ==
          doctest::Approx(1.0 / std::sqrt(2.0 * std::numbers::pi)).epsilon(1e-14));

    Eigen::VectorXd mu2(2), y2(2);
    mu2 << 1, 2;
    y2 << 0, 0;
    Eigen::MatrixXd s(2, 2);
    s << 2, 0.5, 0.5, 1;
    // Closed form with an explicit 2x2 inverse and determinant.
    const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
    const double i00 = s(1, 1) / det, i11 = s(0, 0) / det, i01 = -s(0, 1) / det;
    const double d0 = y2(0) - mu2(0), d1 = y2(1) - mu2(1);
    const double q = i00 * d0 * d0 + 2 * i01 * d0 * d1 + i11 * d1 * d1;
    const double oracle = std::exp(-0.5 * q) / (2.0 * std::numbers::pi * std::sqrt(det));
    CHECK(std::abs(component_density(y2, mu2, s) - oracle) <= 1e-12 * oracle);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    const double at_mode = component_density(mu2, mu2, s);
    for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd p(2);
        p << z(rng), z(rng);
        CHECK(component_density(p, mu2, s) <= at_mode);
    }

    Eigen::MatrixXd singular(2, 2);
    singular << 1, 1, 1, 1;
    CHECK_THROWS_AS(component_density(y2, mu2, singular), NumericalFailure);
}

TEST_CASE("e-step arithmetic") {
    const double var_a = std::pow(1.0 / (0.2 * std::sqrt(2.0 * std::numbers::pi)), 2);
    const double var_b = std::pow(1.0 / (0.1 * std::sqrt(2.0 * std::numbers::pi)), 2);
    RowMatrix y(1, 1);
    y << 4.0;
    const FeatureMatrix data(y, {"y"});
    std::vector<GaussianComponent> comps(2);
    comps[0] = {0.3, Eigen::VectorXd::Constant(1, 4.0), Eigen::MatrixXd::Constant(1, 1, var_a)};
    comps[1] = {0.7, Eigen::VectorXd::Constant(1, 4.0), Eigen::MatrixXd::Constant(1, 1, var_b)};
    const RowMatrix g = e_step(data, comps);
    CHECK(std::abs(g(0, 0) - 0.06 / 0.13) < 1e-12);
    CHECK(std::abs(g(0, 1) - 0.07 / 0.13) < 1e-12);

    // Symmetric components around a midpoint.
    comps[0] = {0.5, Eigen::VectorXd::Constant(1, 2.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    comps[1] = {0.5, Eigen::VectorXd::Constant(1, 6.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    const RowMatrix h = e_step(data, comps);
    CHECK(h(0, 0) == doctest::Approx(0.5).epsilon(1e-15));

    std::vector<GaussianComponent> one = {{1.0, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)}};
    const RowMatrix r1 = e_step(FeatureMatrix(sample_data(20, 2, 5), {}), one);
    CHECK((r1.array() == 1.0).all());
}

TEST_CASE("responsibility rows sum to one") {
    const FeatureMatrix data(sample_data(300, 3, 11), {});
    auto comps = m_step(data, sample_resp(300, 4, 12), CovarianceModel::VVV);
    const RowMatrix g = e_step(data, comps);
    for (int i = 0; i < g.rows(); ++i) CHECK(std::abs(g.row(i).sum() - 1.0) < 1e-12);
}

TEST_CASE("m-step reductions") {
    const RowMatrix y = sample_data(50, 3, 21);
    const FeatureMatrix data(y, {});
    const RowMatrix uniform = RowMatrix::Constant(50, 3, 1.0 / 3.0);
    const Eigen::VectorXd grand = y.colwise().mean().transpose();
    for (auto model : implemented_models()) {
        const auto comps = m_step(data, uniform, model);
        for (const auto& c : comps) CHECK((c.mean - grand).norm() < 1e-12);
    }
    const auto single = m_step(data, RowMatrix::Ones(50, 1), CovarianceModel::VVV);
    const RowMatrix centered = y.rowwise() - grand.transpose();
    const Eigen::MatrixXd sample_cov = centered.transpose() * centered / 50.0;
    CHECK((single[0].covariance - sample_cov).cwiseAbs().maxCoeff() < 1e-12);

    RowMatrix empty = RowMatrix::Zero(50, 2);
    empty.col(0).setOnes();
    try {
        m_step(data, empty, CovarianceModel::VVV);
        FAIL("expected DegenerateComponent");
    } catch (const DegenerateComponent& e) {
        CHECK(e.component() == 2);
    }
    CHECK_THROWS_AS(m_step(data, uniform, CovarianceModel::VEV), ContractViolation);
}

TEST_CASE("EII volume equals the scalar-variance MLE") {
    const RowMatrix y = sample_data(10, 2, 31);
    const FeatureMatrix data(y, {});
    RowMatrix hard = RowMatrix::Zero(10, 2);
    for (int i = 0; i < 10; ++i) hard(i, i < 4 ? 0 : 1) = 1.0;
    const auto comps = m_step(data, hard, CovarianceModel::EII);

    // Brute force: with hard labels the scalar-variance MLE is the pooled mean
    // squared deviation per coordinate.
    double mean_a[2] = {0, 0}, mean_b[2] = {0, 0};
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 2; ++j) (i < 4 ? mean_a : mean_b)[j] += y(i, j) / (i < 4 ? 4.0 : 6.0);
    double ss = 0;
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 2; ++j) {
            const double m = (i < 4 ? mean_a : mean_b)[j];
            ss += (y(i, j) - m) * (y(i, j) - m);
        }
    const double lambda = ss / (10.0 * 2.0);
    for (const auto& c : comps) {
        CHECK(std::abs(c.covariance(0, 0) - lambda) < 1e-12 * lambda);
        CHECK(std::abs(c.covariance(1, 1) - lambda) < 1e-12 * lambda);
        CHECK(c.covariance(0, 1) == 0.0);
    }
}

TEST_CASE("log-likelihood") {
    RowMatrix zero(1, 1);
    zero << 0.0;
    std::vector<GaussianComponent> std_normal = {{1.0, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)}};
    CHECK(log_likelihood(FeatureMatrix(zero, {}), std_normal) == doctest::Approx(-0.9189385332046727).epsilon(1e-14));

    RowMatrix pts(5, 1);
    pts << -1.2, 0.3, 2.5, 4.1, 7.0;
    std::vector<GaussianComponent> two = {
        {0.4, Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.5)},
        {0.6, Eigen::VectorXd::Constant(1, 5.0), Eigen::MatrixXd::Constant(1, 1, 2.0)}};
    double oracle = 0;
    for (int i = 0; i < 5; ++i) {
        oracle += std::log(0.4 * normal_pdf_1d(pts(i, 0), 0.0, 1.5) + 0.6 * normal_pdf_1d(pts(i, 0), 5.0, 2.0));
    }
    const double ll = log_likelihood(FeatureMatrix(pts, {}), two);
    CHECK(std::abs(ll - oracle) <= 1e-10 * std::abs(oracle));

    RowMatrix doubled(10, 1);
    doubled << pts, pts;
    CHECK(log_likelihood(FeatureMatrix(doubled, {}), two) == doctest::Approx(2 * ll).epsilon(1e-13));

    std::vector<GaussianComponent> swapped = {two[1], two[0]};
    CHECK(log_likelihood(FeatureMatrix(pts, {}), swapped) == doctest::Approx(ll).epsilon(1e-14));
}

TEST_CASE("constraint conformance after m-step") {
    const FeatureMatrix data(sample_data(120, 3, 41), {});
    for (int trial = 0; trial < 5; ++trial) {
        const RowMatrix r = sample_resp(120, 3, 100 + trial);
        for (auto model : implemented_models()) {
            const auto comps = m_step(data, r, model, 1e-6);
            double wsum = 0;
            for (const auto& c : comps) {
                wsum += c.weight;
                CHECK(c.weight > 0.0);
                CHECK((c.covariance - c.covariance.transpose()).cwiseAbs().maxCoeff() < 1e-12);
            }
            CHECK(std::abs(wsum - 1.0) < 1e-12);
            const Eigen::MatrixXd& s0 = comps[0].covariance;
            switch (model) {
            case CovarianceModel::EII:
                for (const auto& c : comps)
                    CHECK((c.covariance - s0(0, 0) * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
                break;
            case CovarianceModel::EEI:
                for (const auto& c : comps) CHECK((c.covariance - s0).cwiseAbs().maxCoeff() < 1e-12);
                CHECK(is_diagonal(s0, 0.0));
                break;
            case CovarianceModel::EVI: {
                for (const auto& c : comps) {
                    CHECK(is_diagonal(c.covariance, 0.0));
                    CHECK(c.covariance.determinant() == doctest::Approx(s0.determinant()).epsilon(1e-10));
                }
                break;
            }
            case CovarianceModel::EEE:
                for (const auto& c : comps) CHECK((c.covariance - s0).cwiseAbs().maxCoeff() == 0.0);
                break;
            case CovarianceModel::EEV: {
                Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e0(s0);
                for (const auto& c : comps) {
                    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e(c.covariance);
                    CHECK((e.eigenvalues() - e0.eigenvalues()).cwiseAbs().maxCoeff() < 1e-8);
                }
                break;
            }
            default:
                break;
            }
        }
    }
}

TEST_CASE("fit_em single component converges to the sample moments") {
    const RowMatrix y = sample_data(200, 3, 51);
    const FeatureMatrix data(y, {});
    EmOptions opt;
    opt.k = 1;
    opt.model = CovarianceModel::VVV;
    opt.ridge_factor = 0.0;
    const MixtureFit fit = fit_em(data, opt);
    CHECK(fit.converged);
    CHECK(fit.iterations <= 2);
    const Eigen::VectorXd grand = y.colwise().mean().transpose();
    const RowMatrix centered = y.rowwise() - grand.transpose();
    CHECK((fit.components[0].mean - grand).norm() < 1e-12);
    CHECK((fit.components[0].covariance - centered.transpose() * centered / 200.0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fit_em recovers two separated blobs") {
    std::mt19937_64 rng(61);
    std::normal_distribution<double> z;
    RowMatrix y(1000, 1);
    for (int i = 0; i < 1000; ++i) y(i, 0) = (i % 2 ? 5.0 : -5.0) + z(rng);
    const FeatureMatrix data(y, {"x"});
    for (auto init : {InitStrategy::KMeansPlusPlus, InitStrategy::RandomResponsibilities}) {
        EmOptions opt;
        opt.k = 2;
        opt.model = CovarianceModel::VVV;
        opt.init = init;
        opt.seed = 7;
        const MixtureFit fit = fit_em(data, opt);
        CHECK(fit.converged);
        const MixtureFit again = fit_em(data, opt);
        CHECK(again.loglik_trace == fit.loglik_trace);
        if (init != InitStrategy::KMeansPlusPlus) continue;
        double lo = std::min(fit.components[0].mean(0), fit.components[1].mean(0));
        double hi = std::max(fit.components[0].mean(0), fit.components[1].mean(0));
        CHECK(std::abs(lo + 5.0) < 0.2);
        CHECK(std::abs(hi - 5.0) < 0.2);
    }
}

TEST_CASE("fit_em traces are monotone") {
    for (auto model : implemented_models()) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const FeatureMatrix data(sample_data(150, 3, 1000 + seed), {});
            EmOptions opt;
            opt.k = 3;
            opt.model = model;
            opt.seed = seed;
            opt.init = seed % 2 ? InitStrategy::RandomResponsibilities : InitStrategy::KMeansPlusPlus;
            const MixtureFit fit = fit_em(data, opt);
            for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i) {
                CHECK(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-8);
            }
        }
    }
}

TEST_CASE("eigenvalue floor on degenerate data") {
    // The third coordinate is constant, so every unfloored covariance is singular.
    RowMatrix y = sample_data(200, 3, 71);
    y.col(2).setConstant(1.0);
    const FeatureMatrix data(y, {});
    const double floor = 1e-6 * data.mean_variance();
    for (auto model : implemented_models()) {
        INFO(code(model));
        EmOptions opt;
        opt.k = 2;
        opt.model = model;
        opt.seed = 5;
        const MixtureFit fit = fit_em(data, opt);
        for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i) {
            CHECK(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-8);
        }
        for (const auto& c : fit.components) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e(c.covariance);
            CHECK(e.eigenvalues()(0) >= floor * (1.0 - 1e-9));
        }
        CHECK(oracle::constraint_violation(model, fit.components) < 1e-10);
    }
}

TEST_CASE("fit_em preconditions") {
    const FeatureMatrix data(sample_data(5, 2, 1), {});
    EmOptions opt;
    opt.k = 5;
    CHECK_THROWS_AS(fit_em(data, opt), ContractViolation);
    opt.k = 0;
    CHECK_THROWS_AS(fit_em(data, opt), ContractViolation);
    opt.k = 2;
    opt.model = CovarianceModel::VVE;
    CHECK_THROWS_AS(fit_em(data, opt), ContractViolation);
}

TEST_CASE("hard assignment") {
    RowMatrix g(3, 2);
    g << 0.9, 0.1, 0.5, 0.5, 0.2, 0.8;
    CHECK(hard_assign(g) == std::vector<int>{1, 1, 2});
    RowMatrix scaled = (g.array() * 3.0 + 0.0).matrix();
    CHECK(hard_assign(scaled) == hard_assign(g));
    RowMatrix logged = g.array().log().matrix();
    CHECK(hard_assign(logged) == hard_assign(g));
}

TEST_CASE("mixture fit serializes") {
    const FeatureMatrix data = FeatureMatrix(sample_data(60, 2, 71), {"a", "b"}).standardized();
    EmOptions opt;
    opt.k = 2;
    opt.model = CovarianceModel::EEV;
    opt.seed = 3;
    const auto j = to_json(fit_em(data, opt));
    CHECK(j["model"] == "EEV");
    CHECK(j["K"] == 2);
    CHECK(j["components"].size() == 2);
    CHECK(j["components"][0]["covariance"].size() == 4);
    CHECK(j["standardization"]["sd"].size() == 2);
    CHECK(j["seed"] == 3);
}
