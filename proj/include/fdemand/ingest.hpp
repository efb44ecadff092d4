#pragma once

#include "fdemand/calendar.hpp"
#include "fdemand/geo.hpp"

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace fdemand::ingest {

/// Maps logical service-record fields to CSV header names.
struct ColumnMap {
    std::string date = "date";
    std::string family_id = "family_id";
    std::string city = "city";
    std::string state = "state";
    std::string zip = "zip";
    std::string county = "county";
    std::string count_adult = "count_adult";
    std::string count_child = "count_child";
    std::string count_senior = "count_senior";
    std::string agency_id = "agency_id";
    std::string family_lat = "family_lat";
    std::string family_lon = "family_lon";
    std::string agency_lat = "agency_lat";
    std::string agency_lon = "agency_lon";
    /// Optional; empty means "no tract column".
    std::string tract = "tract";
    /// std::get_time pattern tried when a date is not ISO-8601.
    std::string date_fallback_pattern;

    /// Reads overrides from JSON; unknown keys are rejected.
    static ColumnMap from_json(const nlohmann::json& j);
    static ColumnMap from_file(const std::filesystem::path& path);
};

struct ServiceRecord {
    Date date{};
    std::string family_id;
    std::string city;
    std::string state;
    std::string zip;
    std::string county;
    std::string tract;
    int count_adult = 0;
    int count_child = 0;
    int count_senior = 0;
    std::string agency_id;
    GeoPoint family_loc;
    GeoPoint agency_loc;
    /// 1-based line number in the source file (0 when synthesized in memory).
    std::size_t source_row = 0;

    int people() const noexcept { return count_adult + count_child + count_senior; }
};

struct AggregatedRecord : ServiceRecord {
    double county_income = 0.0;
    double distance_miles = 0.0;
    bool low_access = false;
};

struct Reject {
    std::size_t row = 0;
    std::string reason;
};

template <class Record>
struct Parsed {
    std::vector<Record> records;
    std::vector<Reject> rejects;
};

/// Income lookup; tract-level values win over county values when both exist.
struct IncomeTable {
    std::map<std::string, double> by_county;
    std::map<std::string, double> by_tract;

    std::optional<double> lookup(const std::string& county, const std::string& tract) const;
};

inline constexpr double kDefaultLowAccessMiles = 1.0;

/// One record per data row; malformed rows become rejects citing their line number.
/// Throws IoError for a missing file and ContractViolation for a missing mapped column.
Parsed<ServiceRecord> parse_service_csv(const std::filesystem::path& path, const ColumnMap& schema = {});
Parsed<ServiceRecord> parse_service_text(std::string_view text, const ColumnMap& schema = {});

/// Reads `county,income[,tract]`.
IncomeTable parse_income_csv(const std::filesystem::path& path);
IncomeTable parse_income_text(std::string_view text);

/// True iff distance strictly exceeds the threshold. Negative inputs throw ContractViolation.
bool flag_low_access(double distance_miles, double threshold_miles = kDefaultLowAccessMiles);

/// Joins income and computes family-agency distance. Records whose county (and tract)
/// are missing from the income table become rejects.
Parsed<AggregatedRecord> build_aggregated(const std::vector<ServiceRecord>& records,
                                          const IncomeTable& income,
                                          double threshold_miles = kDefaultLowAccessMiles);

void write_aggregated_csv(std::ostream& out, const std::vector<AggregatedRecord>& records);
void write_rejects_csv(std::ostream& out, const std::vector<Reject>& rejects);

/// Reads back a file produced by write_aggregated_csv.
std::vector<AggregatedRecord> read_aggregated_csv(const std::filesystem::path& path);

} // namespace fdemand::ingest
