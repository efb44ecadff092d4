#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace fdemand::gmm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Covariance parameterizations of Gaussian mixtures, in the conventional
/// volume/shape/orientation order (E = equal, V = variable, I = identity axes).
enum class CovarianceModel { EII, VII, EEI, VEI, EVI, VVI, EEE, EVE, VEE, VVE, EEV, VEV, EVV, VVV };

std::string_view code(CovarianceModel model) noexcept;
std::optional<CovarianceModel> parse_model(std::string_view code) noexcept;
bool is_implemented(CovarianceModel model) noexcept;
/// Position in the canonical ordering; used for deterministic tie-breaks.
int model_order(CovarianceModel model) noexcept;
std::span<const CovarianceModel> all_models() noexcept;
std::span<const CovarianceModel> implemented_models() noexcept;

struct Standardization {
    std::vector<double> mean;
    std::vector<double> sd;
};

/// N x d matrix of finite observations with named columns.
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    FeatureMatrix(RowMatrix values, std::vector<std::string> names);

    /// Z-scores each column; throws ContractViolation on a constant column.
    FeatureMatrix standardized() const;

    const RowMatrix& values() const noexcept { return values_; }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::optional<Standardization>& standardization() const noexcept { return standardization_; }
    Eigen::Index rows() const noexcept { return values_.rows(); }
    Eigen::Index cols() const noexcept { return values_.cols(); }

    /// Mean of the per-column (population) variances.
    double mean_variance() const;

private:
    RowMatrix values_;
    std::vector<std::string> names_;
    std::optional<Standardization> standardization_;
};

struct GaussianComponent {
    double weight = 0.0;
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
};

struct MixtureFit {
    CovarianceModel model = CovarianceModel::VVV;
    std::vector<GaussianComponent> components;
    RowMatrix responsibilities;
    std::vector<double> loglik_trace;
    bool converged = false;
    int iterations = 0;
    std::uint64_t seed = 0;
    int restarts = 0;
    std::vector<std::string> feature_names;
    std::optional<Standardization> standardization;

    int k() const noexcept { return static_cast<int>(components.size()); }
    double loglik() const { return loglik_trace.empty() ? 0.0 : loglik_trace.back(); }
};

enum class InitStrategy {
    /// k-means++ seeding refined by a few Lloyd iterations; covariances from the
    /// within-cluster scatter.
    KMeansPlusPlus,
    /// Dirichlet(1) random responsibilities followed by one M-step.
    RandomResponsibilities,
};

struct EmOptions {
    int k = 1;
    CovarianceModel model = CovarianceModel::VVV;
    InitStrategy init = InitStrategy::KMeansPlusPlus;
    double tol = 1e-6;
    int max_iter = 500;
    std::uint64_t seed = 0;
    int max_restarts = 3;
    /// Eigenvalue floor for every covariance, as a multiple of the mean feature
    /// variance. Inactive M-steps are plain EM updates.
    double ridge_factor = 1e-6;
    /// Components whose effective size drops below this are degenerate.
    double min_component_mass = 1.0;
    /// Lloyd iterations after k-means++ seeding; 0 partitions by nearest seed.
    int kmeans_iterations = 0;
    /// Number of initializations tried. Each candidate runs EM (at most
    /// `candidate_iterations` steps) on a random subsample of `candidate_sample` rows
    /// (0 = all rows); the candidate with the highest subsample log-likelihood seeds
    /// the full-data run, whose trace starts at that candidate's parameters.
    int candidates = 10;
    int candidate_iterations = 40;
    int candidate_sample = 500;
};

/// Multivariate normal density. Throws NumericalFailure if sigma is not positive definite.
double component_density(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma);
double log_component_density(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma);

/// Posterior membership probabilities, computed with log-sum-exp.
RowMatrix e_step(const FeatureMatrix& data, std::span<const GaussianComponent> components);

/// Weighted ML update projected onto the model's covariance constraint. `ridge` is
/// added to every covariance diagonal (applied to the scatter before projection, so
/// the constraint holds exactly). Throws DegenerateComponent when a component's mass
/// falls below `min_mass`.
std::vector<GaussianComponent> m_step(const FeatureMatrix& data, const RowMatrix& responsibilities,
                                      CovarianceModel model, double ridge = 0.0,
                                      double min_mass = 1e-10);

double log_likelihood(const FeatureMatrix& data, std::span<const GaussianComponent> components);

MixtureFit fit_em(const FeatureMatrix& data, const EmOptions& options);

/// argmax responsibilities, 1-based; ties go to the lowest component index.
std::vector<int> hard_assign(const MixtureFit& fit);
std::vector<int> hard_assign(const RowMatrix& responsibilities);

nlohmann::json to_json(const MixtureFit& fit);

} // namespace fdemand::gmm
