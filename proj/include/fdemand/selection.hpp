#pragma once

#include "fdemand/gmm.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace fdemand::selection {

using gmm::CovarianceModel;

/// Number of free parameters of a K-component mixture in d dimensions.
/// Throws ContractViolation for unimplemented models or K, d < 1.
long long free_params(CovarianceModel model, int k, int d);

enum class Penalty {
    /// L - (M/2) ln N.
    LogN,
    /// L - (M/2) ln ln N, the literal reading of the printed formula.
    LogLogN,
};

/// Larger is better.
double bic(double loglik, long long m, long long n, Penalty penalty = Penalty::LogN);

enum class Metric { Euclidean, Manhattan };

struct Silhouette {
    std::vector<double> values;
    double mean = 0.0;
};

/// Exact O(N^2) silhouette. Singleton clusters score 0, as do points with a = b = 0.
/// Throws UndefinedSilhouette if fewer than two distinct labels are present.
Silhouette silhouette(const gmm::RowMatrix& data, const std::vector<int>& labels, Metric metric = Metric::Euclidean);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

enum class Criterion { Bic, Silhouette };

enum class SilhouetteMode {
    None,
    /// Only the best-BIC cell at each K.
    PerK,
    All,
};

struct SweepOptions {
    int k_min = 1;
    int k_max = 8;
    std::vector<CovarianceModel> models = {gmm::implemented_models().begin(), gmm::implemented_models().end()};
    /// EM starts per cell; the best log-likelihood is kept.
    int starts = 1;
    std::uint64_t seed = 0;
    Criterion criterion = Criterion::Bic;
    SilhouetteMode silhouette = SilhouetteMode::PerK;
    Metric metric = Metric::Euclidean;
    Penalty penalty = Penalty::LogN;
    unsigned threads = 1;
    /// Template for every fit; k, model and seed are overwritten per cell.
    gmm::EmOptions em;
};

struct GridCell {
    CovarianceModel model = CovarianceModel::VVV;
    int k = 1;
    std::uint64_t seed = 0;
    double loglik = 0.0;
    long long m = 0;
    double bic = 0.0;
    std::optional<double> mean_silhouette;
    bool converged = false;
    int iterations = 0;
    std::string error;
};

struct SelectionReport {
    std::vector<GridCell> grid;
    CovarianceModel winner_model = CovarianceModel::VVV;
    int winner_k = 1;
    Criterion criterion = Criterion::Bic;
    Penalty penalty = Penalty::LogN;
    long long n = 0;
    int d = 0;
    std::vector<std::string> feature_names;

    const GridCell& winner() const;
};

struct SweepResult {
    SelectionReport report;
    gmm::MixtureFit winner_fit;
};

/// Fits every (model, K) cell and picks the winner among converged cells by the
/// criterion. Ties go to smaller K, then to the earlier model in canonical order.
/// Throws NumericalFailure if no cell converged.
SweepResult sweep(const gmm::FeatureMatrix& data, const SweepOptions& options);

/// Winner over the converged cells of an existing grid (same rules as sweep).
std::size_t pick_winner(const std::vector<GridCell>& grid, Criterion criterion);

nlohmann::json to_json(const SelectionReport& report);
/// Inverse of to_json; throws ContractViolation on malformed input.
SelectionReport report_from_json(const nlohmann::json& j);
/// `model,K,bic` with one row per grid cell.
void write_bic_csv(std::ostream& out, const SelectionReport& report);
/// `K,mean_silhouette` for each K with a silhouette (best one per K).
void write_silhouette_csv(std::ostream& out, const SelectionReport& report);

std::string_view to_string(Criterion c) noexcept;
std::optional<Criterion> parse_criterion(std::string_view text) noexcept;
std::optional<SilhouetteMode> parse_silhouette_mode(std::string_view text) noexcept;
std::optional<Penalty> parse_penalty(std::string_view text) noexcept;

} // namespace fdemand::selection
