#pragma once

#include "fdemand/wrangle.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace fdemand::predict {

/// Gam and Bart are reserved names; fitting them raises ContractViolation.
enum class Family { Glm, Mars, Rf, Gam, Bart };

std::string_view code(Family family);
std::optional<Family> parse_family(std::string_view text);
bool is_implemented(Family family);
const std::vector<Family>& implemented_families();

enum class AgencyEncoding { Frequency, None };

struct EncodingOptions {
    /// Adds share_2..share_K and modal_2..modal_K (cluster 1 is the reference level).
    bool cluster_features = false;
    AgencyEncoding agency = AgencyEncoding::Frequency;
    /// Adds `trend` = year - first year of the reference rows.
    bool trend = false;
};

struct DesignMatrix {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::vector<std::string> names;
};

/// Column layout: dow_2..dow_7, woy, doy, moy_2..moy_12, agency_freq, [trend],
/// [cluster columns]. Agency frequency is the agency's share of reference rows;
/// agencies absent from the reference encode as 0.
class Encoder {
public:
    Encoder(const std::vector<wrangle::DemandRecord>& reference, const EncodingOptions& options);

    /// y is the total demand column.
    DesignMatrix transform(const std::vector<wrangle::DemandRecord>& rows) const;
    const std::vector<std::string>& names() const { return names_; }

private:
    EncodingOptions options_;
    std::map<std::string, double> frequency_;
    int base_year_ = 0;
    int k_ = 0;
    std::vector<std::string> names_;
};

DesignMatrix build_design(const std::vector<wrangle::DemandRecord>& rows, const EncodingOptions& options = {});

struct GlmOptions {
    /// AIC penalty per parameter; 2 is classical AIC.
    double aic_penalty = 2.0;
    bool stepwise = true;
};

struct MarsOptions {
    /// Maximum number of basis functions including the intercept.
    int max_terms = 21;
    /// Forward pass stops when R^2 improves by less than this.
    double threshold = 0.001;
    int nfold = 10;
    int ncross = 5;
};

struct RfOptions {
    std::vector<int> ntree_grid = {50, 100, 200, 500};
    /// 0 means max(1, p / 3).
    int mtry = 0;
    int nodesize = 5;
    /// Split candidates per feature; features with fewer distinct values use all midpoints.
    int max_bins = 128;
};

struct FitOptions {
    GlmOptions glm;
    MarsOptions mars;
    RfOptions rf;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

/// sign +1: max(0, x - knot); sign -1: max(0, knot - x).
struct HingeTerm {
    int var = 0;
    double knot = 0.0;
    int sign = 1;
};

double hinge(double x, const HingeTerm& term);

struct TreeNode {
    /// -1 marks a leaf.
    int var = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

using Tree = std::vector<TreeNode>;

double tree_predict(const Tree& tree, const double* row, Eigen::Index stride = 1);

struct TrainedModel {
    Family family = Family::Glm;
    std::vector<std::string> feature_names;
    double intercept = 0.0;
    /// GLM: one coefficient per feature, 0 for dropped features.
    Eigen::VectorXd coefficients;
    std::vector<int> selected;
    bool ridge = false;
    /// MARS basis (excluding the intercept) and its coefficients.
    std::vector<HingeTerm> terms;
    Eigen::VectorXd term_coefficients;
    /// RF trees in growth order.
    std::vector<Tree> trees;
    nlohmann::json tuning = nlohmann::json::object();

    /// Predictors used by the fit (adjusted R^2 denominator).
    int effective_parameters() const;
};

TrainedModel fit_glm(const DesignMatrix& data, const GlmOptions& options = {});
TrainedModel fit_mars(const DesignMatrix& data, const MarsOptions& options, std::uint64_t seed);
TrainedModel fit_rf(const DesignMatrix& data, const RfOptions& options, std::uint64_t seed, unsigned threads = 1);
TrainedModel fit(Family family, const DesignMatrix& data, const FitOptions& options);

Eigen::VectorXd predict(const TrainedModel& model, const Eigen::MatrixXd& x);

/// Gaussian AIC up to a constant: n ln(RSS / n) + penalty * parameters.
double aic(double rss, Eigen::Index n, int parameters, double penalty = 2.0);

/// 1 - (1 - R^2)(N - 1) / (N - p - 1); requires N > p + 1.
double adjusted_r2(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted, int p);

struct Metrics {
    double rmse = 0.0;
    double mae = 0.0;
};

Metrics metrics(const Eigen::VectorXd& residuals);
/// RMSE is the square root of the mean per-split MSE; MAE is the mean per-split MAE.
Metrics pooled_metrics(const std::vector<Eigen::VectorXd>& residuals_per_split);

struct HoldoutOptions {
    double test_fraction = 0.3;
    int splits = 10;
    std::uint64_t seed = 0;
    /// Redraws allowed when a training split has constant y.
    int max_resamples = 10;
};

/// Test-set row indices (sorted) for each split.
std::vector<std::vector<Eigen::Index>> holdout_splits(const Eigen::VectorXd& y, const HoldoutOptions& options);

struct EvalReport {
    Family family = Family::Glm;
    bool cluster_features = false;
    nlohmann::json tuning = nlohmann::json::object();
    double r2_adj = 0.0;
    Metrics in_sample;
    Metrics out_of_sample;
    Metrics null_out_of_sample;
    double imp_rmse_pct = 0.0;
    double imp_mae_pct = 0.0;
    int splits = 0;
    double test_fraction = 0.0;
    std::uint64_t seed = 0;
};

/// Fits on all rows for the in-sample figures, then repeats fit-and-score over
/// the holdout splits for the model and for the training-mean null model.
/// Splits run on `options.threads` workers.
EvalReport holdout_eval(Family family, const DesignMatrix& data, const FitOptions& options,
                        const HoldoutOptions& holdout);

nlohmann::json to_json(const EvalReport& report);
/// `family,r2_adj,in_rmse,in_mae,out_rmse,out_mae,imp_rmse_pct,imp_mae_pct`; the
/// family field carries a `+clusters` suffix for reports fitted with cluster features.
void write_comparison_csv(std::ostream& out, const std::vector<EvalReport>& reports);

nlohmann::json to_json(const TrainedModel& model);
TrainedModel model_from_json(const nlohmann::json& j);

} // namespace fdemand::predict
