#pragma once

#include "fdemand/calendar.hpp"
#include "fdemand/families.hpp"
#include "fdemand/ingest.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace fdemand::wrangle {

struct ClusterFeatures {
    int modal_cluster = 1;
    /// share_k for k = 1..K, over the distinct families an agency served.
    std::vector<double> shares;
};

/// People served by one agency on one day.
struct DemandRecord {
    /// 0 when unknown (rows read back from a demand CSV carry no year).
    int year = 0;
    int dow = 1;
    int woy = 1;
    int doy = 1;
    int moy = 1;
    std::string agency_id;
    long long demand = 0;
    long long adults = 0;
    long long children = 0;
    long long seniors = 0;
    std::optional<ClusterFeatures> cluster;
};

/// One row per (date, agency), ordered by date then agency id. Throws
/// ContractViolation on empty input.
std::vector<DemandRecord> to_demand_dataset(const std::vector<ingest::AggregatedRecord>& aggregated);

/// Per-agency label shares over the whole period, attached to every row of that
/// agency. Labels must lie in [1, k]. Throws ContractViolation listing families
/// without a label.
std::vector<DemandRecord> attach_cluster_features(const std::vector<DemandRecord>& demand,
                                                  const families::LabelMap& labels,
                                                  const std::vector<ingest::AggregatedRecord>& aggregated, int k);

/// Type-7 (linear interpolation) quantile of sorted data, p in [0, 1].
double quantile(const std::vector<double>& sorted, double p);

struct HistogramBin {
    double lo = 0.0;
    double hi = 0.0;
    long long count = 0;
};

/// Freedman-Diaconis bins; a single bin when the IQR or range is zero. The last
/// bin is closed on the right.
std::vector<HistogramBin> histogram(const std::vector<double>& values);

struct EcdfPoint {
    double value = 0.0;
    double cumulative = 0.0;
};

/// Sorted (value, rank / n) pairs, one per observation.
std::vector<EcdfPoint> ecdf(const std::vector<double>& values);

struct DemandSummary {
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double mean = 0.0;
    double q3 = 0.0;
    double max = 0.0;
    long long n = 0;
    std::vector<HistogramBin> bins;
    std::vector<EcdfPoint> ecdf_points;
};

DemandSummary describe(const std::vector<double>& values);
DemandSummary descriptive_stats(const std::vector<DemandRecord>& demand);

nlohmann::json to_json(const DemandSummary& summary);
void write_histogram_csv(std::ostream& out, const std::vector<HistogramBin>& bins);
void write_ecdf_csv(std::ostream& out, const std::vector<EcdfPoint>& points);

/// `dow,woy,doy,moy,agency_id,demand[,modal_cluster,share_1..share_K]`.
void write_demand_csv(std::ostream& out, const std::vector<DemandRecord>& demand);
std::vector<DemandRecord> read_demand_csv(const std::filesystem::path& path);
std::vector<DemandRecord> parse_demand_text(std::string_view text);

} // namespace fdemand::wrangle
