#pragma once

#include "fdemand/families.hpp"
#include "fdemand/predict.hpp"
#include "fdemand/selection.hpp"
#include "fdemand/wrangle.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace fdemand::report {

struct ProfileRow {
    /// "1".."K" or "total".
    std::string cluster;
    long long families = 0;
    long long adults = 0;
    long long children = 0;
    long long seniors = 0;
    long long people = 0;
    double avg_adults = 0.0;
    double avg_children = 0.0;
    double avg_seniors = 0.0;
    double avg_people = 0.0;
    /// Distinct tracts; present only when families carry tract ids.
    std::optional<long long> n_tracts;
    double avg_distance_miles = 0.0;
    /// Share of all families in this cluster.
    double coverage_pct = 0.0;
    double pct_poor = 0.0;
    double pct_rich = 0.0;
    /// Share of the cluster's families living within `within_miles` of their agency.
    double served_within_mile_pct = 0.0;
};

struct ClusterProfile {
    std::vector<ProfileRow> clusters;
    ProfileRow total;
};

struct ProfileOptions {
    /// Families with county income below this count as poor.
    double poor_threshold = 50000.0;
    double within_miles = 1.0;
};

/// Household counts come from each family's composition; labels must cover every
/// family and lie in [1, k].
ClusterProfile cluster_profile(const std::vector<families::FamilySummary>& families, const families::LabelMap& labels,
                               int k, const ProfileOptions& options = {});

void write_profile_csv(std::ostream& out, const ClusterProfile& profile);
nlohmann::json to_json(const ClusterProfile& profile);

enum class Grain { Annual, Monthly };

struct ForecastRow {
    std::string person_type;
    /// 0 for an annual row, else the month 1..12.
    int period = 0;
    double actual = 0.0;
    double forecast = 0.0;
    double variance_pct = 0.0;
    double next_forecast = 0.0;
    /// variance_pct >= 10.
    bool flagged = false;
};

struct ForecastTable {
    Grain grain = Grain::Annual;
    /// The last complete calendar year; next_forecast refers to the year after.
    int year = 0;
    std::string family;
    std::vector<ForecastRow> rows;
};

struct ForecastOptions {
    predict::Family family = predict::Family::Glm;
    predict::FitOptions fit;
    bool cluster_features = false;
    /// Adds a year trend column when the history spans more than one year.
    bool trend = true;
};

struct Forecasts {
    ForecastTable annual;
    ForecastTable monthly;
};

inline constexpr double kVarianceFlagPct = 10.0;

/// 100 |forecast - actual| / actual.
double variance_pct(double actual, double forecast);

/// Fits one model per person type on all rows up to the last year with data in
/// every month, predicts that year's rows (compared against actuals) and the same
/// agency-days moved 52 weeks ahead, weekday preserved. Annual figures are the
/// sums of the monthly figures. Throws InsufficientHistory when no year covers
/// all twelve months.
Forecasts forecast(const std::vector<wrangle::DemandRecord>& history, const ForecastOptions& options);
ForecastTable annual_forecast(const std::vector<wrangle::DemandRecord>& history, const ForecastOptions& options);
ForecastTable monthly_forecast(const std::vector<wrangle::DemandRecord>& history, const ForecastOptions& options);

/// Family with the lowest out-of-sample RMSE; ties keep the earlier report.
predict::Family best_family(const std::vector<predict::EvalReport>& reports);

void write_forecast_csv(std::ostream& out, const ForecastTable& table);
nlohmann::json to_json(const ForecastTable& table);

/// `family_id,family_lat,family_lon,agency_lat,agency_lon,cluster`, one row per family.
void write_scatter_csv(std::ostream& out, const std::vector<families::FamilySummary>& families,
                       const families::LabelMap& labels);

struct PlotInputs {
    const std::vector<families::FamilySummary>* families = nullptr;
    const families::LabelMap* labels = nullptr;
    const selection::SelectionReport* selection = nullptr;
    const std::vector<wrangle::DemandRecord>* demand = nullptr;
};

/// Writes whichever series its inputs allow and returns the file paths in write order:
/// scatter.csv, distance_histogram.csv, distance_ecdf.csv (per cluster),
/// bic.csv, silhouette.csv, demand_histogram.csv, demand_ecdf.csv.
std::vector<std::filesystem::path> export_plots(const std::filesystem::path& dir, const PlotInputs& inputs);

} // namespace fdemand::report
