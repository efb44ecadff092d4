#include "fdemand/ingest.hpp"

#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"

#include <charconv>
#include <cmath>
#include <ostream>
#include <sstream>

namespace fdemand::ingest {

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size() && std::isfinite(out);
}

bool parse_count(std::string_view s, int& out) {
    s = trim(s);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size() && out >= 0;
}

struct ServiceColumns {
    std::size_t date, family_id, city, state, zip, county, adult, child, senior, agency;
    std::size_t family_lat, family_lon, agency_lat, agency_lon;
    std::optional<std::size_t> tract;
};

ServiceColumns resolve(const csv::Table& table, const ColumnMap& m) {
    ServiceColumns c{};
    c.date = table.require(m.date);
    c.family_id = table.require(m.family_id);
    c.city = table.require(m.city);
    c.state = table.require(m.state);
    c.zip = table.require(m.zip);
    c.county = table.require(m.county);
    c.adult = table.require(m.count_adult);
    c.child = table.require(m.count_child);
    c.senior = table.require(m.count_senior);
    c.agency = table.require(m.agency_id);
    c.family_lat = table.require(m.family_lat);
    c.family_lon = table.require(m.family_lon);
    c.agency_lat = table.require(m.agency_lat);
    c.agency_lon = table.require(m.agency_lon);
    if (!m.tract.empty()) c.tract = table.find(m.tract);
    return c;
}

// Returns an empty string on success, otherwise the reject reason.
std::string parse_row(const csv::Row& row, const ServiceColumns& c, const ColumnMap& m,
                      ServiceRecord& rec) {
    const std::size_t needed =
        std::max({c.date, c.family_id, c.city, c.state, c.zip, c.county, c.adult, c.child, c.senior,
                  c.agency, c.family_lat, c.family_lon, c.agency_lat, c.agency_lon,
                  c.tract.value_or(0)}) + 1;
    if (row.size() < needed) return "expected at least " + std::to_string(needed) + " fields";

    try {
        rec.date = parse_date(trim(row[c.date]), m.date_fallback_pattern);
    } catch (const ContractViolation& e) {
        return e.what();
    }
    rec.family_id = std::string(trim(row[c.family_id]));
    if (rec.family_id.empty()) return "empty family id";
    rec.agency_id = std::string(trim(row[c.agency]));
    if (rec.agency_id.empty()) return "empty agency id";
    rec.city = row[c.city];
    rec.state = row[c.state];
    rec.zip = row[c.zip];
    rec.county = std::string(trim(row[c.county]));
    if (c.tract) rec.tract = std::string(trim(row[*c.tract]));

    const std::pair<std::size_t, int*> counts[] = {
        {c.adult, &rec.count_adult}, {c.child, &rec.count_child}, {c.senior, &rec.count_senior}};
    const char* names[] = {"count_adult", "count_child", "count_senior"};
    for (int i = 0; i < 3; ++i) {
        if (!parse_count(row[counts[i].first], *counts[i].second)) {
            return std::string("unparseable ") + names[i] + " '" + row[counts[i].first] + "'";
        }
    }
    if (rec.people() < 1) return "service with zero people";

    double flat = 0, flon = 0, alat = 0, alon = 0;
    if (!parse_double(row[c.family_lat], flat) || !parse_double(row[c.family_lon], flon)) {
        return "unparseable family coordinate";
    }
    if (!parse_double(row[c.agency_lat], alat) || !parse_double(row[c.agency_lon], alon)) {
        return "unparseable agency coordinate";
    }
    rec.family_loc = GeoPoint{flat, flon};
    rec.agency_loc = GeoPoint{alat, alon};
    if (!rec.family_loc.valid()) return "family coordinate out of bounds";
    if (!rec.agency_loc.valid()) return "agency coordinate out of bounds";
    return {};
}

Parsed<ServiceRecord> parse_table(const csv::Table& table, const ColumnMap& schema) {
    const ServiceColumns cols = resolve(table, schema);
    Parsed<ServiceRecord> out;
    out.records.reserve(table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        ServiceRecord rec;
        rec.source_row = table.line_numbers[i];
        std::string reason = parse_row(table.rows[i], cols, schema, rec);
        if (reason.empty()) {
            out.records.push_back(std::move(rec));
        } else {
            out.rejects.push_back({table.line_numbers[i], std::move(reason)});
        }
    }
    return out;
}

IncomeTable parse_income_table(const csv::Table& table) {
    const std::size_t county = table.require("county");
    const std::size_t income = table.require("income");
    const auto tract = table.find("tract");
    IncomeTable out;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        double value = 0;
        if (row.size() <= std::max(county, income) || !parse_double(row[income], value)) {
            throw ContractViolation("income table line " + std::to_string(table.line_numbers[i]) +
                                    ": unparseable income");
        }
        std::string tract_id = tract && *tract < row.size() ? std::string(trim(row[*tract])) : "";
        if (!tract_id.empty()) {
            out.by_tract[tract_id] = value;
        } else {
            out.by_county[std::string(trim(row[county]))] = value;
        }
    }
    return out;
}

} // namespace

ColumnMap ColumnMap::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ContractViolation("column map must be a JSON object");
    ColumnMap m;
    const std::pair<const char*, std::string*> fields[] = {
        {"date", &m.date},
        {"family_id", &m.family_id},
        {"city", &m.city},
        {"state", &m.state},
        {"zip", &m.zip},
        {"county", &m.county},
        {"count_adult", &m.count_adult},
        {"count_child", &m.count_child},
        {"count_senior", &m.count_senior},
        {"agency_id", &m.agency_id},
        {"family_lat", &m.family_lat},
        {"family_lon", &m.family_lon},
        {"agency_lat", &m.agency_lat},
        {"agency_lon", &m.agency_lon},
        {"tract", &m.tract},
        {"date_fallback_pattern", &m.date_fallback_pattern},
    };
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const auto& [name, target] : fields) {
            if (key == name) {
                if (!value.is_string()) throw ContractViolation("column map '" + key + "' must be a string");
                *target = value.get<std::string>();
                known = true;
            }
        }
        if (!known) throw ContractViolation("unknown column map key '" + key + "'");
    }
    return m;
}

ColumnMap ColumnMap::from_file(const std::filesystem::path& path) {
    try {
        return from_json(nlohmann::json::parse(csv::read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("column map '" + path.string() + "': " + e.what());
    }
}

std::optional<double> IncomeTable::lookup(const std::string& county, const std::string& tract) const {
    if (!tract.empty()) {
        if (auto it = by_tract.find(tract); it != by_tract.end()) return it->second;
    }
    if (auto it = by_county.find(county); it != by_county.end()) return it->second;
    return std::nullopt;
}

Parsed<ServiceRecord> parse_service_csv(const std::filesystem::path& path, const ColumnMap& schema) {
    if (!std::filesystem::exists(path)) throw IoError("service file '" + path.string() + "' does not exist");
    return parse_table(csv::read(path), schema);
}

Parsed<ServiceRecord> parse_service_text(std::string_view text, const ColumnMap& schema) {
    return parse_table(csv::parse(text), schema);
}

IncomeTable parse_income_csv(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("income file '" + path.string() + "' does not exist");
    return parse_income_table(csv::read(path));
}

IncomeTable parse_income_text(std::string_view text) {
    return parse_income_table(csv::parse(text));
}

bool flag_low_access(double distance_miles, double threshold_miles) {
    if (!(distance_miles >= 0.0) || !(threshold_miles >= 0.0)) {
        throw ContractViolation("low-access check needs nonnegative distance and threshold");
    }
    return distance_miles > threshold_miles;
}

Parsed<AggregatedRecord> build_aggregated(const std::vector<ServiceRecord>& records,
                                          const IncomeTable& income, double threshold_miles) {
    Parsed<AggregatedRecord> out;
    out.records.reserve(records.size());
    for (const auto& rec : records) {
        auto value = income.lookup(rec.county, rec.tract);
        if (!value) {
            out.rejects.push_back({rec.source_row, "county '" + rec.county + "' missing from income table"});
            continue;
        }
        AggregatedRecord agg;
        static_cast<ServiceRecord&>(agg) = rec;
        agg.county_income = *value;
        agg.distance_miles = haversine_miles(rec.family_loc, rec.agency_loc);
        agg.low_access = flag_low_access(agg.distance_miles, threshold_miles);
        out.records.push_back(std::move(agg));
    }
    return out;
}

void write_aggregated_csv(std::ostream& out, const std::vector<AggregatedRecord>& records) {
    csv::Writer w(out);
    w.row({"date", "family_id", "city", "state", "zip", "county", "count_adult", "count_child",
           "count_senior", "agency_id", "family_lat", "family_lon", "agency_lat", "agency_lon",
           "tract", "county_income", "distance_miles", "low_access"});
    for (const auto& r : records) {
        w.field(format_date(r.date)).field(r.family_id).field(r.city).field(r.state).field(r.zip)
            .field(r.county).field(r.count_adult).field(r.count_child).field(r.count_senior)
            .field(r.agency_id).field(r.family_loc.lat).field(r.family_loc.lon)
            .field(r.agency_loc.lat).field(r.agency_loc.lon).field(r.tract).field(r.county_income)
            .field(r.distance_miles).field(std::string_view(r.low_access ? "true" : "false"));
        w.end_row();
    }
}

void write_rejects_csv(std::ostream& out, const std::vector<Reject>& rejects) {
    csv::Writer w(out);
    w.row({"row", "reason"});
    for (const auto& r : rejects) {
        w.field(r.row).field(r.reason);
        w.end_row();
    }
}

std::vector<AggregatedRecord> read_aggregated_csv(const std::filesystem::path& path) {
    const csv::Table table = csv::read(path);
    ColumnMap m;
    const ServiceColumns cols = resolve(table, m);
    const std::size_t income = table.require("county_income");
    const std::size_t distance = table.require("distance_miles");
    const std::size_t low = table.require("low_access");
    std::vector<AggregatedRecord> out;
    out.reserve(table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        AggregatedRecord rec;
        rec.source_row = table.line_numbers[i];
        const std::string reason = parse_row(table.rows[i], cols, m, rec);
        const auto& row = table.rows[i];
        if (!reason.empty() || row.size() <= std::max({income, distance, low}) ||
            !parse_double(row[income], rec.county_income) ||
            !parse_double(row[distance], rec.distance_miles)) {
            throw ContractViolation("aggregated file line " + std::to_string(rec.source_row) +
                                    " is malformed" + (reason.empty() ? "" : ": " + reason));
        }
        rec.low_access = trim(row[low]) == "true";
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace fdemand::ingest
