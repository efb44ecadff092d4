#pragma once

#include "fdemand/gmm.hpp"
#include "fdemand/ingest.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fdemand::families {

/// One family collapsed over all of its services.
struct FamilySummary {
    std::string family_id;
    /// Household composition from the family's earliest service (ties by input order).
    int adults = 0;
    int children = 0;
    int seniors = 0;
    double mean_distance_miles = 0.0;
    double county_income = 0.0;
    std::string county;
    std::string tract;
    GeoPoint family_loc;
    GeoPoint agency_loc;
    std::size_t services = 0;
    long long people_served = 0;

    int people() const noexcept { return adults + children + seniors; }
};

/// Families sorted by family_id.
std::vector<FamilySummary> summarize(const std::vector<ingest::AggregatedRecord>& records);

inline const std::vector<std::string>& default_features() {
    static const std::vector<std::string> names = {"distance_miles", "count_adult", "count_child",
                                                   "count_senior", "county_income"};
    return names;
}

struct FeatureOptions {
    std::vector<std::string> features = default_features();
    bool standardize = true;
    /// Standard deviation of Gaussian noise added to integer count features before
    /// clustering; 0 disables it.
    double count_jitter_sd = 0.5;
    std::uint64_t seed = 0;
};

/// Known names: distance_miles, count_adult, count_child, count_senior, people,
/// county_income, family_lat, family_lon, services.
gmm::FeatureMatrix family_features(const std::vector<FamilySummary>& families, const FeatureOptions& options);

/// family_id -> 1-based cluster label.
using LabelMap = std::map<std::string, int>;

LabelMap label_map(const std::vector<FamilySummary>& families, const std::vector<int>& labels);

} // namespace fdemand::families
