#pragma once

#include "fdemand/ingest.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace fdemand::synth {

struct ClusterSpec {
    double weight = 0.25;
    /// Family-agency distance: normal around `distance_mean`, truncated to [lo, hi].
    double distance_mean = 1.0;
    double distance_sd = 0.1;
    double distance_lo = 0.5;
    double distance_hi = 1.5;
    /// County median incomes of this cluster's counties are drawn from N(mean, sd).
    double income_mean = 50000.0;
    double income_sd = 2500.0;
    /// Household composition: a correlated latent normal per family, rounded and
    /// clipped at zero.
    double adults_mean = 1.5;
    double children_mean = 1.5;
    double seniors_mean = 1.2;
    /// Multiplies the base visit rate of this cluster's families.
    double demand_effect = 1.0;
};

struct SynthConfig {
    std::uint64_t seed = 1;
    int n_families = 10000;
    int n_agencies = 60;
    int start_year = 2018;
    int years = 1;
    double center_lat = 41.4993;
    double center_lon = -81.6944;
    /// Agencies lie within agency_radius_miles of the center; every distance band
    /// must fit inside region_radius_miles.
    double agency_radius_miles = 15.0;
    double region_radius_miles = 30.0;
    /// Probability that a family belongs to an agency whose dominant cluster is its own.
    double agency_affinity = 0.7;
    int counties_per_cluster = 250;
    std::array<double, 3> composition_sd = {0.6, 0.7, 0.5};
    /// Latent correlations (adult-child, adult-senior, child-senior).
    std::array<double, 3> composition_corr = {0.5, 0.3, 0.3};
    /// Expected visits per family per year before the cluster demand effect.
    double base_visits = 6.0;
    /// Relative yearly growth of visit rates.
    double annual_drift = 0.0;
    std::array<double, 12> season_profile = {0.85, 0.85, 0.95, 0.95, 1.0, 1.0,
                                             1.05, 1.1, 1.45, 1.05, 1.0, 0.95};
    /// Monday first.
    std::array<double, 7> weekday_profile = {1.0, 1.0, 1.0, 1.0, 1.0, 0.6, 0.2};
    std::vector<ClusterSpec> clusters = default_clusters();

    static std::vector<ClusterSpec> default_clusters();
    int k_true() const noexcept { return static_cast<int>(clusters.size()); }

    /// Throws ContractViolation on invalid values and on infeasible geometry.
    void validate() const;

    /// Missing keys keep their defaults; unknown keys are rejected.
    static SynthConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct Agency {
    std::string agency_id;
    GeoPoint location;
    int dominant_cluster = 1;
};

struct Family {
    std::string family_id;
    int cluster = 1;
    int agency = 0;
    std::string county;
    int adults = 0;
    int children = 0;
    int seniors = 0;
    GeoPoint location;
};

struct SynthOutput {
    SynthConfig config;
    std::vector<Agency> agencies;
    std::vector<Family> families;
    /// Sorted by (date, family_id).
    std::vector<ingest::ServiceRecord> services;
    /// county -> median income, in county order.
    std::vector<std::pair<std::string, double>> incomes;

    nlohmann::json truth() const;
    std::string services_csv() const;
    std::string income_csv() const;
};

SynthOutput generate(const SynthConfig& config);

/// Writes services.csv, income.csv and truth.json into `dir`.
void write(const SynthOutput& output, const std::filesystem::path& dir);

} // namespace fdemand::synth
