#include "fdemand/families.hpp"

#include "fdemand/error.hpp"
#include "fdemand/random.hpp"

#include <algorithm>
#include <random>

namespace fdemand::families {

namespace {

struct Accumulator {
    FamilySummary summary;
    Date first_date{};
    double distance_sum = 0.0;
};

bool is_count_feature(const std::string& name) {
    return name == "count_adult" || name == "count_child" || name == "count_senior" || name == "people" ||
           name == "services";
}

double feature_value(const FamilySummary& f, const std::string& name) {
    if (name == "distance_miles") return f.mean_distance_miles;
    if (name == "count_adult") return f.adults;
    if (name == "count_child") return f.children;
    if (name == "count_senior") return f.seniors;
    if (name == "people") return f.people();
    if (name == "county_income") return f.county_income;
    if (name == "family_lat") return f.family_loc.lat;
    if (name == "family_lon") return f.family_loc.lon;
    if (name == "services") return static_cast<double>(f.services);
    throw ContractViolation("unknown clustering feature '" + name + "'");
}

} // namespace

std::vector<FamilySummary> summarize(const std::vector<ingest::AggregatedRecord>& records) {
    std::map<std::string, Accumulator> by_family;
    for (const auto& r : records) {
        auto [it, inserted] = by_family.try_emplace(r.family_id);
        Accumulator& acc = it->second;
        if (inserted || r.date < acc.first_date) {
            acc.first_date = r.date;
            acc.summary.adults = r.count_adult;
            acc.summary.children = r.count_child;
            acc.summary.seniors = r.count_senior;
            acc.summary.county = r.county;
            acc.summary.tract = r.tract;
            acc.summary.county_income = r.county_income;
            acc.summary.family_loc = r.family_loc;
            acc.summary.agency_loc = r.agency_loc;
        }
        acc.summary.family_id = r.family_id;
        acc.distance_sum += r.distance_miles;
        ++acc.summary.services;
        acc.summary.people_served += r.people();
    }
    std::vector<FamilySummary> out;
    out.reserve(by_family.size());
    for (auto& [id, acc] : by_family) {
        acc.summary.mean_distance_miles = acc.distance_sum / static_cast<double>(acc.summary.services);
        out.push_back(std::move(acc.summary));
    }
    return out;
}

gmm::FeatureMatrix family_features(const std::vector<FamilySummary>& families, const FeatureOptions& options) {
    if (families.empty()) throw ContractViolation("no families to cluster");
    if (options.features.empty()) throw ContractViolation("clustering feature list is empty");
    if (!(options.count_jitter_sd >= 0.0)) throw ContractViolation("count jitter must be nonnegative");
    const auto n = static_cast<Eigen::Index>(families.size());
    const auto d = static_cast<Eigen::Index>(options.features.size());
    gmm::RowMatrix x(n, d);
    Rng rng(derive_seed(options.seed, "count-jitter"));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (Eigen::Index c = 0; c < d; ++c) {
        const std::string& name = options.features[c];
        const bool jitter = options.count_jitter_sd > 0.0 && is_count_feature(name);
        for (Eigen::Index i = 0; i < n; ++i) {
            x(i, c) = feature_value(families[i], name);
            if (jitter) x(i, c) += options.count_jitter_sd * noise(rng);
        }
    }
    gmm::FeatureMatrix m(std::move(x), options.features);
    return options.standardize ? m.standardized() : m;
}

LabelMap label_map(const std::vector<FamilySummary>& families, const std::vector<int>& labels) {
    if (families.size() != labels.size()) throw ContractViolation("one label per family is required");
    LabelMap out;
    for (std::size_t i = 0; i < families.size(); ++i) out[families[i].family_id] = labels[i];
    return out;
}

} // namespace fdemand::families
