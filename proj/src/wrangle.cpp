#include "fdemand/wrangle.hpp"

#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <tuple>

namespace fdemand::wrangle {

namespace {

template <class T>
bool parse_number(std::string_view s, T& out) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

using DayKey = std::tuple<int, unsigned, unsigned, std::string>;

DayKey day_key(const Date& date, const std::string& agency) {
    return {static_cast<int>(date.year()), static_cast<unsigned>(date.month()), static_cast<unsigned>(date.day()),
            agency};
}

} // namespace

std::vector<DemandRecord> to_demand_dataset(const std::vector<ingest::AggregatedRecord>& aggregated) {
    if (aggregated.empty()) throw ContractViolation("demand dataset needs at least one service record");
    std::map<DayKey, DemandRecord> days;
    for (const auto& rec : aggregated) {
        auto [it, inserted] = days.try_emplace(day_key(rec.date, rec.agency_id));
        DemandRecord& d = it->second;
        if (inserted) {
            const CalendarFeatures cal = calendar_features(rec.date);
            d.year = static_cast<int>(rec.date.year());
            d.dow = cal.dow;
            d.woy = cal.woy;
            d.doy = cal.doy;
            d.moy = cal.moy;
            d.agency_id = rec.agency_id;
        }
        d.adults += rec.count_adult;
        d.children += rec.count_child;
        d.seniors += rec.count_senior;
        d.demand += rec.people();
    }
    std::vector<DemandRecord> out;
    out.reserve(days.size());
    for (auto& [key, rec] : days) out.push_back(std::move(rec));
    return out;
}

std::vector<DemandRecord> attach_cluster_features(const std::vector<DemandRecord>& demand,
                                                  const families::LabelMap& labels,
                                                  const std::vector<ingest::AggregatedRecord>& aggregated, int k) {
    if (k < 1) throw ContractViolation("cluster count must be at least 1");
    std::map<std::string, std::set<std::string>> served;
    std::set<std::string> missing;
    for (const auto& rec : aggregated) {
        if (!labels.count(rec.family_id)) missing.insert(rec.family_id);
        served[rec.agency_id].insert(rec.family_id);
    }
    if (!missing.empty()) {
        std::string ids;
        int listed = 0;
        for (const auto& id : missing) {
            if (listed++ == 10) {
                ids += ", ...";
                break;
            }
            ids += (ids.empty() ? "" : ", ") + id;
        }
        throw ContractViolation(std::to_string(missing.size()) + " families have no cluster label: " + ids);
    }

    std::map<std::string, ClusterFeatures> by_agency;
    for (const auto& [agency, fams] : served) {
        std::vector<long long> counts(static_cast<std::size_t>(k), 0);
        for (const auto& id : fams) {
            const int label = labels.at(id);
            if (label < 1 || label > k) {
                throw ContractViolation("family '" + id + "' has label " + std::to_string(label) + " outside 1.." +
                                        std::to_string(k));
            }
            ++counts[static_cast<std::size_t>(label - 1)];
        }
        ClusterFeatures f;
        f.shares.resize(counts.size());
        const double total = static_cast<double>(fams.size());
        for (std::size_t j = 0; j < counts.size(); ++j) f.shares[j] = static_cast<double>(counts[j]) / total;
        f.modal_cluster = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin()) + 1;
        by_agency.emplace(agency, std::move(f));
    }

    std::vector<DemandRecord> out = demand;
    for (auto& rec : out) {
        auto it = by_agency.find(rec.agency_id);
        if (it == by_agency.end()) {
            throw ContractViolation("agency '" + rec.agency_id + "' has no served families");
        }
        rec.cluster = it->second;
    }
    return out;
}

double quantile(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw ContractViolation("quantile of an empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw ContractViolation("quantile probability must lie in [0, 1]");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::vector<HistogramBin> histogram(const std::vector<double>& values) {
    if (values.empty()) return {};
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const double lo = sorted.front(), hi = sorted.back();
    const double iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    const double width = 2.0 * iqr / std::cbrt(static_cast<double>(sorted.size()));
    std::size_t nbins = 1;
    if (width > 0.0 && hi > lo) nbins = static_cast<std::size_t>(std::max(1.0, std::ceil((hi - lo) / width)));
    const double step = nbins == 1 ? hi - lo : width;
    std::vector<HistogramBin> bins(nbins);
    for (std::size_t b = 0; b < nbins; ++b) {
        bins[b].lo = lo + static_cast<double>(b) * step;
        bins[b].hi = b + 1 == nbins ? hi : lo + static_cast<double>(b + 1) * step;
    }
    for (double v : sorted) {
        std::size_t b = step > 0.0 ? static_cast<std::size_t>((v - lo) / step) : 0;
        b = std::min(b, nbins - 1);
        ++bins[b].count;
    }
    return bins;
}

std::vector<EcdfPoint> ecdf(const std::vector<double>& values) {
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    std::vector<EcdfPoint> out(sorted.size());
    const double n = static_cast<double>(sorted.size());
    for (std::size_t i = 0; i < sorted.size(); ++i) out[i] = {sorted[i], static_cast<double>(i + 1) / n};
    return out;
}

DemandSummary describe(const std::vector<double>& values) {
    if (values.empty()) throw ContractViolation("descriptive statistics need at least one value");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    DemandSummary s;
    s.n = static_cast<long long>(sorted.size());
    s.min = sorted.front();
    s.max = sorted.back();
    s.q1 = quantile(sorted, 0.25);
    s.median = quantile(sorted, 0.5);
    s.q3 = quantile(sorted, 0.75);
    double sum = 0.0;
    for (double v : sorted) sum += v;
    s.mean = sum / static_cast<double>(sorted.size());
    s.bins = histogram(sorted);
    s.ecdf_points = ecdf(sorted);
    return s;
}

DemandSummary descriptive_stats(const std::vector<DemandRecord>& demand) {
    std::vector<double> values;
    values.reserve(demand.size());
    for (const auto& d : demand) values.push_back(static_cast<double>(d.demand));
    return describe(values);
}

nlohmann::json to_json(const DemandSummary& s) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : s.bins) bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}});
    return {{"n", s.n},       {"min", s.min}, {"q1", s.q1},       {"median", s.median},
            {"mean", s.mean}, {"q3", s.q3},   {"max", s.max},     {"histogram", bins}};
}

void write_histogram_csv(std::ostream& out, const std::vector<HistogramBin>& bins) {
    csv::Writer w(out);
    w.row({"bin_lo", "bin_hi", "count"});
    for (const auto& b : bins) w.field(b.lo).field(b.hi).field(b.count).end_row();
}

void write_ecdf_csv(std::ostream& out, const std::vector<EcdfPoint>& points) {
    csv::Writer w(out);
    w.row({"value", "cum_prob"});
    for (const auto& p : points) w.field(p.value).field(p.cumulative).end_row();
}

void write_demand_csv(std::ostream& out, const std::vector<DemandRecord>& demand) {
    std::size_t k = 0;
    for (const auto& d : demand) {
        if (d.cluster) k = std::max(k, d.cluster->shares.size());
    }
    csv::Writer w(out);
    w.field("dow").field("woy").field("doy").field("moy").field("agency_id").field("demand");
    if (k > 0) {
        w.field("modal_cluster");
        for (std::size_t j = 1; j <= k; ++j) w.field("share_" + std::to_string(j));
    }
    w.end_row();
    for (const auto& d : demand) {
        w.field(d.dow).field(d.woy).field(d.doy).field(d.moy).field(d.agency_id).field(d.demand);
        if (k > 0) {
            if (!d.cluster || d.cluster->shares.size() != k) {
                throw ContractViolation("demand rows mix different cluster feature widths");
            }
            w.field(d.cluster->modal_cluster);
            for (double s : d.cluster->shares) w.field(s);
        }
        w.end_row();
    }
}

std::vector<DemandRecord> parse_demand_text(std::string_view text) {
    const csv::Table table = csv::parse(text);
    const std::size_t dow = table.require("dow"), woy = table.require("woy"), doy = table.require("doy"),
                      moy = table.require("moy"), agency = table.require("agency_id"),
                      demand = table.require("demand");
    const auto modal = table.find("modal_cluster");
    std::vector<std::size_t> shares;
    for (std::size_t j = 1; auto c = table.find("share_" + std::to_string(j)); ++j) shares.push_back(*c);
    if (modal.has_value() != !shares.empty()) {
        throw ContractViolation("demand table must carry both modal_cluster and share_k columns, or neither");
    }

    std::vector<DemandRecord> out;
    out.reserve(table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        auto fail = [&](const std::string& what) {
            return ContractViolation("demand table line " + std::to_string(table.line_numbers[i]) + ": " + what);
        };
        if (row.size() != table.header.size()) throw fail("wrong number of fields");
        DemandRecord d;
        if (!parse_number(row[dow], d.dow) || !parse_number(row[woy], d.woy) || !parse_number(row[doy], d.doy) ||
            !parse_number(row[moy], d.moy) || !parse_number(row[demand], d.demand)) {
            throw fail("unparseable number");
        }
        if (d.dow < 1 || d.dow > 7 || d.woy < 1 || d.woy > 53 || d.doy < 1 || d.doy > 366 || d.moy < 1 ||
            d.moy > 12 || d.demand < 0) {
            throw fail("calendar field or demand out of range");
        }
        d.agency_id = row[agency];
        if (modal) {
            ClusterFeatures f;
            if (!parse_number(row[*modal], f.modal_cluster)) throw fail("unparseable modal_cluster");
            f.shares.resize(shares.size());
            for (std::size_t j = 0; j < shares.size(); ++j) {
                if (!parse_number(row[shares[j]], f.shares[j])) throw fail("unparseable share");
            }
            d.cluster = std::move(f);
        }
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<DemandRecord> read_demand_csv(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("demand file '" + path.string() + "' does not exist");
    return parse_demand_text(csv::read_file(path));
}

} // namespace fdemand::wrangle
