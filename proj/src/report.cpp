#include "fdemand/report.hpp"

#include "fdemand/calendar.hpp"
#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"
#include "fdemand/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace fdemand::report {

namespace {

struct Accumulator {
    long long families = 0, adults = 0, children = 0, seniors = 0, poor = 0, within = 0;
    double distance = 0.0;
    std::set<std::string> tracts;

    void add(const families::FamilySummary& f, const ProfileOptions& opt) {
        ++families;
        adults += f.adults;
        children += f.children;
        seniors += f.seniors;
        distance += f.mean_distance_miles;
        poor += f.county_income < opt.poor_threshold;
        within += f.mean_distance_miles <= opt.within_miles;
        if (!f.tract.empty()) tracts.insert(f.tract);
    }

    ProfileRow row(const std::string& name, long long all_families, bool with_tracts) const {
        ProfileRow r;
        r.cluster = name;
        r.families = families;
        r.adults = adults;
        r.children = children;
        r.seniors = seniors;
        r.people = adults + children + seniors;
        if (with_tracts) r.n_tracts = static_cast<long long>(tracts.size());
        if (families > 0) {
            const double f = static_cast<double>(families);
            r.avg_adults = static_cast<double>(adults) / f;
            r.avg_children = static_cast<double>(children) / f;
            r.avg_seniors = static_cast<double>(seniors) / f;
            r.avg_people = static_cast<double>(r.people) / f;
            r.avg_distance_miles = distance / f;
            r.pct_poor = 100.0 * static_cast<double>(poor) / f;
            r.pct_rich = 100.0 - r.pct_poor;
            r.served_within_mile_pct = 100.0 * static_cast<double>(within) / f;
        }
        if (all_families > 0) r.coverage_pct = 100.0 * static_cast<double>(families) / static_cast<double>(all_families);
        return r;
    }
};

nlohmann::json row_json(const ProfileRow& r) {
    nlohmann::json j = {{"cluster", r.cluster},
                        {"families", r.families},
                        {"adults", r.adults},
                        {"children", r.children},
                        {"seniors", r.seniors},
                        {"people", r.people},
                        {"avg_adults", r.avg_adults},
                        {"avg_children", r.avg_children},
                        {"avg_seniors", r.avg_seniors},
                        {"avg_people", r.avg_people},
                        {"avg_distance_miles", r.avg_distance_miles},
                        {"coverage_pct", r.coverage_pct},
                        {"pct_poor", r.pct_poor},
                        {"pct_rich", r.pct_rich},
                        {"served_within_mile_pct", r.served_within_mile_pct}};
    if (r.n_tracts) j["n_tracts"] = *r.n_tracts;
    return j;
}

constexpr std::array<const char*, 3> kTypes = {"adults", "children", "seniors"};

long long type_count(const wrangle::DemandRecord& r, std::size_t t) {
    return t == 0 ? r.adults : t == 1 ? r.children : r.seniors;
}

std::array<double, 12> monthly_sums(const std::vector<wrangle::DemandRecord>& rows, const Eigen::VectorXd& values) {
    std::array<double, 12> out{};
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<std::size_t>(rows[i].moy - 1)] += values(static_cast<Eigen::Index>(i));
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text, std::vector<std::filesystem::path>& written) {
    csv::write_file(path, text);
    written.push_back(path);
}

} // namespace

ClusterProfile cluster_profile(const std::vector<families::FamilySummary>& families, const families::LabelMap& labels,
                               int k, const ProfileOptions& options) {
    if (k < 1) throw ContractViolation("cluster profile needs k >= 1");
    std::vector<Accumulator> acc(static_cast<std::size_t>(k));
    Accumulator total;
    bool with_tracts = false;
    for (const auto& f : families) {
        const auto it = labels.find(f.family_id);
        if (it == labels.end()) throw ContractViolation("family '" + f.family_id + "' has no cluster label");
        if (it->second < 1 || it->second > k) {
            throw ContractViolation("family '" + f.family_id + "' has label outside 1.." + std::to_string(k));
        }
        acc[static_cast<std::size_t>(it->second - 1)].add(f, options);
        total.add(f, options);
        with_tracts |= !f.tract.empty();
    }
    ClusterProfile p;
    for (int c = 0; c < k; ++c) {
        p.clusters.push_back(acc[static_cast<std::size_t>(c)].row(std::to_string(c + 1), total.families, with_tracts));
    }
    p.total = total.row("total", total.families, with_tracts);
    return p;
}

void write_profile_csv(std::ostream& out, const ClusterProfile& profile) {
    const bool tracts = profile.total.n_tracts.has_value();
    csv::Writer w(out);
    csv::Row header = {"cluster", "families", "adults", "children", "seniors", "people",
                       "avg_adults", "avg_children", "avg_seniors", "avg_people"};
    if (tracts) header.push_back("n_tracts");
    for (const char* h : {"avg_distance_miles", "coverage_pct", "pct_poor", "pct_rich", "served_within_mile_pct"}) {
        header.push_back(h);
    }
    w.row(header);
    auto emit = [&](const ProfileRow& r) {
        w.field(r.cluster).field(r.families).field(r.adults).field(r.children).field(r.seniors).field(r.people);
        w.field(r.avg_adults).field(r.avg_children).field(r.avg_seniors).field(r.avg_people);
        if (tracts) w.field(r.n_tracts.value_or(0));
        w.field(r.avg_distance_miles).field(r.coverage_pct).field(r.pct_poor).field(r.pct_rich);
        w.field(r.served_within_mile_pct).end_row();
    };
    for (const auto& r : profile.clusters) emit(r);
    emit(profile.total);
}

nlohmann::json to_json(const ClusterProfile& profile) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : profile.clusters) rows.push_back(row_json(r));
    return {{"clusters", rows}, {"total", row_json(profile.total)}};
}

double variance_pct(double actual, double forecast) {
    if (actual == 0.0) return forecast == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return 100.0 * std::abs(forecast - actual) / std::abs(actual);
}

Forecasts forecast(const std::vector<wrangle::DemandRecord>& history, const ForecastOptions& options) {
    if (history.empty()) throw InsufficientHistory("forecasting needs demand history");
    std::map<int, std::set<int>> months;
    for (const auto& r : history) {
        if (r.year <= 0) throw InsufficientHistory("forecasting needs rows with a known year");
        months[r.year].insert(r.moy);
    }
    int current = 0;
    for (const auto& [year, seen] : months) {
        if (seen.size() == 12) current = year;
    }
    if (current == 0) throw InsufficientHistory("no calendar year of history covers all twelve months");

    std::vector<wrangle::DemandRecord> fit_rows, this_year, next_year;
    for (const auto& r : history) {
        if (r.year > current) continue;
        fit_rows.push_back(r);
        if (r.year != current) continue;
        this_year.push_back(r);
        // 52 weeks ahead keeps the weekday; the few early-January days that stay in
        // the current year move another 52 weeks, into late December.
        const auto day = std::chrono::sys_days{date_from_doy(r.year, r.doy)};
        Date moved{day + std::chrono::days{364}};
        if (static_cast<int>(moved.year()) == current) moved = Date{day + std::chrono::days{728}};
        const CalendarFeatures cal = calendar_features(moved);
        wrangle::DemandRecord n = r;
        n.year = current + 1;
        n.dow = cal.dow;
        n.woy = cal.woy;
        n.doy = cal.doy;
        n.moy = cal.moy;
        next_year.push_back(std::move(n));
    }

    predict::EncodingOptions enc;
    enc.cluster_features = options.cluster_features;
    enc.trend = options.trend && months.begin()->first < current;

    Forecasts out;
    out.annual.grain = Grain::Annual;
    out.monthly.grain = Grain::Monthly;
    out.annual.year = out.monthly.year = current;
    out.annual.family = out.monthly.family = std::string(predict::code(options.family));
    for (std::size_t t = 0; t < kTypes.size(); ++t) {
        auto typed = [t](std::vector<wrangle::DemandRecord> rows) {
            for (auto& r : rows) r.demand = type_count(r, t);
            return rows;
        };
        const auto train = typed(fit_rows);
        const auto now = typed(this_year);
        const predict::Encoder encoder(train, enc);
        predict::FitOptions fo = options.fit;
        fo.seed = derive_seed(options.fit.seed, kTypes[t]);
        const predict::TrainedModel model = predict::fit(options.family, encoder.transform(train), fo);
        const predict::DesignMatrix now_design = encoder.transform(now);
        const auto actual = monthly_sums(now, now_design.y);
        const auto predicted = monthly_sums(now, predict::predict(model, now_design.x));
        std::array<double, 12> ahead{};
        if (!next_year.empty()) {
            const auto later = typed(next_year);
            ahead = monthly_sums(later, predict::predict(model, encoder.transform(later).x));
        }
        ForecastRow annual;
        annual.person_type = kTypes[t];
        for (int m = 0; m < 12; ++m) {
            ForecastRow row;
            row.person_type = kTypes[t];
            row.period = m + 1;
            row.actual = actual[static_cast<std::size_t>(m)];
            row.forecast = predicted[static_cast<std::size_t>(m)];
            row.next_forecast = ahead[static_cast<std::size_t>(m)];
            row.variance_pct = variance_pct(row.actual, row.forecast);
            row.flagged = !(row.variance_pct < kVarianceFlagPct);
            annual.actual += row.actual;
            annual.forecast += row.forecast;
            annual.next_forecast += row.next_forecast;
            out.monthly.rows.push_back(row);
        }
        annual.variance_pct = variance_pct(annual.actual, annual.forecast);
        annual.flagged = !(annual.variance_pct < kVarianceFlagPct);
        out.annual.rows.push_back(annual);
    }
    return out;
}

ForecastTable annual_forecast(const std::vector<wrangle::DemandRecord>& history, const ForecastOptions& options) {
    return forecast(history, options).annual;
}

ForecastTable monthly_forecast(const std::vector<wrangle::DemandRecord>& history, const ForecastOptions& options) {
    return forecast(history, options).monthly;
}

predict::Family best_family(const std::vector<predict::EvalReport>& reports) {
    if (reports.empty()) throw ContractViolation("no evaluation reports to choose a family from");
    std::size_t best = 0;
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].out_of_sample.rmse < reports[best].out_of_sample.rmse) best = i;
    }
    return reports[best].family;
}

void write_forecast_csv(std::ostream& out, const ForecastTable& table) {
    csv::Writer w(out);
    w.row({"person_type", "period", "actual", "forecast", "variance_pct", "next_forecast", "flagged"});
    for (const auto& r : table.rows) {
        w.field(r.person_type)
            .field(r.period)
            .field(csv::format_fixed(r.actual, 0))
            .field(csv::format_fixed(r.forecast, 0))
            .field(csv::format_fixed(r.variance_pct, 1))
            .field(csv::format_fixed(r.next_forecast, 0))
            .field(std::string_view(r.flagged ? "true" : "false"))
            .end_row();
    }
}

nlohmann::json to_json(const ForecastTable& table) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : table.rows) {
        rows.push_back({{"person_type", r.person_type},
                        {"period", r.period},
                        {"actual", r.actual},
                        {"forecast", r.forecast},
                        {"variance_pct", std::isfinite(r.variance_pct) ? nlohmann::json(r.variance_pct) : nlohmann::json(nullptr)},
                        {"next_forecast", r.next_forecast},
                        {"flagged", r.flagged}});
    }
    return {{"grain", table.grain == Grain::Annual ? "annual" : "monthly"},
            {"year", table.year},
            {"next_year", table.year + 1},
            {"family", table.family},
            {"rows", rows}};
}

void write_scatter_csv(std::ostream& out, const std::vector<families::FamilySummary>& families,
                       const families::LabelMap& labels) {
    csv::Writer w(out);
    w.row({"family_id", "family_lat", "family_lon", "agency_lat", "agency_lon", "cluster"});
    for (const auto& f : families) {
        const auto it = labels.find(f.family_id);
        if (it == labels.end()) throw ContractViolation("family '" + f.family_id + "' has no cluster label");
        w.field(f.family_id)
            .field(f.family_loc.lat)
            .field(f.family_loc.lon)
            .field(f.agency_loc.lat)
            .field(f.agency_loc.lon)
            .field(it->second)
            .end_row();
    }
}

std::vector<std::filesystem::path> export_plots(const std::filesystem::path& dir, const PlotInputs& inputs) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    if (inputs.families && inputs.labels) {
        std::ostringstream scatter;
        write_scatter_csv(scatter, *inputs.families, *inputs.labels);
        write_text(dir / "scatter.csv", scatter.str(), written);

        std::map<int, std::vector<double>> distances;
        for (const auto& f : *inputs.families) distances[inputs.labels->at(f.family_id)].push_back(f.mean_distance_miles);
        std::ostringstream hist, ecdf;
        csv::Writer hw(hist), ew(ecdf);
        hw.row({"cluster", "bin_lo", "bin_hi", "count"});
        ew.row({"cluster", "value", "cum_prob"});
        for (const auto& [cluster, values] : distances) {
            for (const auto& b : wrangle::histogram(values)) hw.field(cluster).field(b.lo).field(b.hi).field(b.count).end_row();
            for (const auto& p : wrangle::ecdf(values)) ew.field(cluster).field(p.value).field(p.cumulative).end_row();
        }
        write_text(dir / "distance_histogram.csv", hist.str(), written);
        write_text(dir / "distance_ecdf.csv", ecdf.str(), written);
    }
    if (inputs.selection) {
        std::ostringstream bic, sil;
        selection::write_bic_csv(bic, *inputs.selection);
        selection::write_silhouette_csv(sil, *inputs.selection);
        write_text(dir / "bic.csv", bic.str(), written);
        write_text(dir / "silhouette.csv", sil.str(), written);
    }
    if (inputs.demand && !inputs.demand->empty()) {
        const auto summary = wrangle::descriptive_stats(*inputs.demand);
        std::ostringstream hist, ecdf;
        wrangle::write_histogram_csv(hist, summary.bins);
        wrangle::write_ecdf_csv(ecdf, summary.ecdf_points);
        write_text(dir / "demand_histogram.csv", hist.str(), written);
        write_text(dir / "demand_ecdf.csv", ecdf.str(), written);
    }
    return written;
}

} // namespace fdemand::report
