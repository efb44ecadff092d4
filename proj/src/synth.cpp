#include "fdemand/synth.hpp"

#include "fdemand/calendar.hpp"
#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"
#include "fdemand/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace fdemand::synth {

namespace {

double round_to(double x, double scale) {
    return std::round(x * scale) / scale;
}

std::string padded(char prefix, int value, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%0*d", prefix, width, value);
    return buf;
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& target) {
    if (auto it = j.find(key); it != j.end()) target = it->get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, const char* what) {
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ContractViolation(std::string("unknown ") + what + " key '" + key + "'");
        }
    }
}

ClusterSpec cluster_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ContractViolation("cluster spec must be a JSON object");
    reject_unknown(j,
                   {"weight", "distance_mean", "distance_sd", "distance_lo", "distance_hi", "income_mean",
                    "income_sd", "adults_mean", "children_mean", "seniors_mean", "demand_effect"},
                   "cluster spec");
    ClusterSpec c;
    read_field(j, "weight", c.weight);
    read_field(j, "distance_mean", c.distance_mean);
    read_field(j, "distance_sd", c.distance_sd);
    read_field(j, "distance_lo", c.distance_lo);
    read_field(j, "distance_hi", c.distance_hi);
    read_field(j, "income_mean", c.income_mean);
    read_field(j, "income_sd", c.income_sd);
    read_field(j, "adults_mean", c.adults_mean);
    read_field(j, "children_mean", c.children_mean);
    read_field(j, "seniors_mean", c.seniors_mean);
    read_field(j, "demand_effect", c.demand_effect);
    return c;
}

nlohmann::json cluster_to_json(const ClusterSpec& c) {
    return {{"weight", c.weight},           {"distance_mean", c.distance_mean}, {"distance_sd", c.distance_sd},
            {"distance_lo", c.distance_lo}, {"distance_hi", c.distance_hi},     {"income_mean", c.income_mean},
            {"income_sd", c.income_sd},     {"adults_mean", c.adults_mean},     {"children_mean", c.children_mean},
            {"seniors_mean", c.seniors_mean}, {"demand_effect", c.demand_effect}};
}

int poisson(Rng& rng, double mean) {
    if (!(mean > 0.0)) return 0;
    std::poisson_distribution<int> p(mean);
    return p(rng);
}

} // namespace

std::vector<ClusterSpec> SynthConfig::default_clusters() {
    std::vector<ClusterSpec> c(4);
    const double means[4] = {0.42, 1.45, 4.63, 19.47};
    const double halves[4] = {0.37, 0.45, 1.23, 5.47};
    const double weights[4] = {0.3, 0.3, 0.3, 0.1};
    const double incomes[4] = {35000, 45000, 55000, 65000};
    const double adults[4] = {1.3, 2.3, 1.8, 2.6};
    const double children[4] = {1.3, 2.6, 1.5, 2.2};
    const double seniors[4] = {2.2, 1.2, 1.5, 1.9};
    const double effects[4] = {1.0, 1.5, 2.0, 3.0};
    for (int k = 0; k < 4; ++k) {
        c[k].weight = weights[k];
        c[k].distance_mean = means[k];
        c[k].distance_lo = means[k] - halves[k];
        c[k].distance_hi = means[k] + halves[k];
        c[k].distance_sd = 2.0 * halves[k] / 7.0;
        c[k].income_mean = incomes[k];
        c[k].income_sd = 2500.0;
        c[k].adults_mean = adults[k];
        c[k].children_mean = children[k];
        c[k].seniors_mean = seniors[k];
        c[k].demand_effect = effects[k];
    }
    return c;
}

void SynthConfig::validate() const {
    if (n_families < 0) throw ContractViolation("n_families must be nonnegative");
    if (n_agencies < 1) throw ContractViolation("n_agencies must be at least 1");
    if (years < 1) throw ContractViolation("years must be at least 1");
    if (clusters.empty()) throw ContractViolation("k_true must be at least 1");
    if (!(agency_affinity >= 0.0 && agency_affinity <= 1.0)) throw ContractViolation("agency_affinity must be in [0, 1]");
    if (counties_per_cluster < 1) throw ContractViolation("counties_per_cluster must be at least 1");
    if (!(base_visits > 0.0)) throw ContractViolation("base_visits must be positive");
    if (!(annual_drift > -1.0)) throw ContractViolation("annual_drift must exceed -1");
    if (!make_geo_point(center_lat, center_lon).valid()) throw ContractViolation("invalid region center");
    if (!(agency_radius_miles >= 0.0) || !(region_radius_miles > 0.0)) {
        throw ContractViolation("region radii must be nonnegative");
    }
    for (double m : season_profile) {
        if (!(m > 0.0)) throw ContractViolation("season multipliers must be positive");
    }
    for (double m : weekday_profile) {
        if (!(m > 0.0)) throw ContractViolation("weekday multipliers must be positive");
    }
    for (double s : composition_sd) {
        if (!(s >= 0.0)) throw ContractViolation("composition sd must be nonnegative");
    }
    double total_weight = 0.0;
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        const ClusterSpec& c = clusters[k];
        const std::string name = "cluster " + std::to_string(k + 1);
        if (!(c.weight > 0.0)) throw ContractViolation(name + " weight must be positive");
        if (!(c.demand_effect > 0.0)) throw ContractViolation(name + " demand effect must be positive");
        if (!(c.distance_lo >= 0.0 && c.distance_lo < c.distance_hi && c.distance_mean >= c.distance_lo &&
              c.distance_mean <= c.distance_hi && c.distance_sd > 0.0)) {
            throw ContractViolation(name + " has an invalid distance band");
        }
        if (k > 0 && !(c.distance_lo > clusters[k - 1].distance_hi)) {
            throw ContractViolation("distance bands must be disjoint and ordered");
        }
        if (c.distance_hi > region_radius_miles) {
            throw ContractViolation(name + " distance band exceeds the region radius (infeasible geometry)");
        }
        if (!(c.income_mean > 0.0) || !(c.income_sd >= 0.0)) throw ContractViolation(name + " income is invalid");
        total_weight += c.weight;
    }
    if (!(total_weight > 0.0)) throw ContractViolation("cluster weights must sum to a positive value");
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ContractViolation("synth config must be a JSON object");
    reject_unknown(j,
                   {"seed", "n_families", "n_agencies", "start_year", "years", "center_lat", "center_lon",
                    "agency_radius_miles", "region_radius_miles", "agency_affinity", "counties_per_cluster",
                    "composition_sd", "composition_corr", "base_visits", "annual_drift", "season_profile",
                    "weekday_profile", "clusters", "k_true"},
                   "synth config");
    SynthConfig c;
    try {
        read_field(j, "seed", c.seed);
        read_field(j, "n_families", c.n_families);
        read_field(j, "n_agencies", c.n_agencies);
        read_field(j, "start_year", c.start_year);
        read_field(j, "years", c.years);
        read_field(j, "center_lat", c.center_lat);
        read_field(j, "center_lon", c.center_lon);
        read_field(j, "agency_radius_miles", c.agency_radius_miles);
        read_field(j, "region_radius_miles", c.region_radius_miles);
        read_field(j, "agency_affinity", c.agency_affinity);
        read_field(j, "counties_per_cluster", c.counties_per_cluster);
        read_field(j, "composition_sd", c.composition_sd);
        read_field(j, "composition_corr", c.composition_corr);
        read_field(j, "base_visits", c.base_visits);
        read_field(j, "annual_drift", c.annual_drift);
        read_field(j, "season_profile", c.season_profile);
        read_field(j, "weekday_profile", c.weekday_profile);
        if (auto it = j.find("clusters"); it != j.end()) {
            if (!it->is_array()) throw ContractViolation("clusters must be an array");
            c.clusters.clear();
            for (const auto& item : *it) c.clusters.push_back(cluster_from_json(item));
        }
        if (auto it = j.find("k_true"); it != j.end() && it->get<int>() != c.k_true()) {
            throw ContractViolation("k_true does not match the number of cluster specs");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json SynthConfig::to_json() const {
    nlohmann::json clusters_json = nlohmann::json::array();
    for (const auto& c : clusters) clusters_json.push_back(cluster_to_json(c));
    return {{"seed", seed},
            {"n_families", n_families},
            {"n_agencies", n_agencies},
            {"start_year", start_year},
            {"years", years},
            {"center_lat", center_lat},
            {"center_lon", center_lon},
            {"agency_radius_miles", agency_radius_miles},
            {"region_radius_miles", region_radius_miles},
            {"agency_affinity", agency_affinity},
            {"counties_per_cluster", counties_per_cluster},
            {"composition_sd", composition_sd},
            {"composition_corr", composition_corr},
            {"base_visits", base_visits},
            {"annual_drift", annual_drift},
            {"season_profile", season_profile},
            {"weekday_profile", weekday_profile},
            {"k_true", k_true()},
            {"clusters", clusters_json}};
}

SynthOutput generate(const SynthConfig& config) {
    config.validate();
    SynthOutput out;
    out.config = config;
    Rng rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const GeoPoint center{config.center_lat, config.center_lon};
    const int K = config.k_true();

    for (int a = 0; a < config.n_agencies; ++a) {
        Agency ag;
        ag.agency_id = padded('A', a + 1, 3);
        const double r = config.agency_radius_miles * std::sqrt(unit(rng));
        const GeoPoint p = destination_point(center, 2.0 * std::numbers::pi * unit(rng), r);
        ag.location = GeoPoint{round_to(p.lat, 1000.0), round_to(p.lon, 1000.0)};
        ag.dominant_cluster = a % K + 1;
        out.agencies.push_back(std::move(ag));
    }
    std::vector<std::vector<int>> agencies_by_cluster(static_cast<std::size_t>(K));
    for (int a = 0; a < config.n_agencies; ++a) agencies_by_cluster[out.agencies[a].dominant_cluster - 1].push_back(a);

    std::vector<double> county_income(static_cast<std::size_t>(K * config.counties_per_cluster));
    for (int k = 0; k < K; ++k) {
        for (int i = 0; i < config.counties_per_cluster; ++i) {
            const int idx = k * config.counties_per_cluster + i;
            const double v = config.clusters[k].income_mean + config.clusters[k].income_sd * normal(rng);
            county_income[idx] = std::max(1.0, std::round(v));
            out.incomes.emplace_back(padded('C', idx + 1, 4), county_income[idx]);
        }
    }

    // Cholesky factor of the latent composition correlation.
    const auto [r_ac, r_as, r_cs] = config.composition_corr;
    const double l11 = std::sqrt(std::max(0.0, 1.0 - r_ac * r_ac));
    const double l21 = r_as;
    const double l22 = l11 > 0.0 ? (r_cs - r_as * r_ac) / l11 : 0.0;
    const double l33 = std::sqrt(std::max(0.0, 1.0 - l21 * l21 - l22 * l22));

    std::discrete_distribution<int> pick_cluster = [&] {
        std::vector<double> w;
        for (const auto& c : config.clusters) w.push_back(c.weight);
        return std::discrete_distribution<int>(w.begin(), w.end());
    }();
    std::uniform_int_distribution<int> pick_agency(0, config.n_agencies - 1);
    std::uniform_int_distribution<int> pick_county(0, config.counties_per_cluster - 1);

    for (int f = 0; f < config.n_families; ++f) {
        Family fam;
        fam.family_id = padded('F', f + 1, 6);
        const int k = pick_cluster(rng);
        fam.cluster = k + 1;
        const ClusterSpec& spec = config.clusters[k];
        const auto& own = agencies_by_cluster[k];
        if (!own.empty() && unit(rng) < config.agency_affinity) {
            fam.agency = own[std::uniform_int_distribution<std::size_t>(0, own.size() - 1)(rng)];
        } else {
            fam.agency = pick_agency(rng);
        }
        fam.county = out.incomes[k * config.counties_per_cluster + pick_county(rng)].first;

        const double z1 = normal(rng), z2 = normal(rng), z3 = normal(rng);
        const double la = z1;
        const double lc = r_ac * z1 + l11 * z2;
        const double ls = l21 * z1 + l22 * z2 + l33 * z3;
        fam.adults = static_cast<int>(std::max(0.0, std::round(spec.adults_mean + config.composition_sd[0] * la)));
        fam.children = static_cast<int>(std::max(0.0, std::round(spec.children_mean + config.composition_sd[1] * lc)));
        fam.seniors = static_cast<int>(std::max(0.0, std::round(spec.seniors_mean + config.composition_sd[2] * ls)));
        if (fam.adults + fam.children + fam.seniors == 0) fam.adults = 1;

        // Place the family on the (3-decimal) coordinate grid inside its band.
        const GeoPoint home = out.agencies[fam.agency].location;
        for (int attempt = 0;; ++attempt) {
            double dist = 0.0;
            do {
                dist = spec.distance_mean + spec.distance_sd * normal(rng);
            } while (dist < spec.distance_lo || dist > spec.distance_hi);
            const GeoPoint p = destination_point(home, 2.0 * std::numbers::pi * unit(rng), dist);
            const GeoPoint q{round_to(p.lat, 1000.0), round_to(p.lon, 1000.0)};
            const double actual = haversine_miles(q, home);
            if ((actual >= spec.distance_lo && actual <= spec.distance_hi) || attempt >= 1000) {
                fam.location = q;
                break;
            }
        }
        out.families.push_back(std::move(fam));
    }

    // Visit dates: month by season x month length, day by weekday weight.
    const double max_weekday = *std::max_element(config.weekday_profile.begin(), config.weekday_profile.end());
    for (const Family& fam : out.families) {
        const ClusterSpec& spec = config.clusters[fam.cluster - 1];
        const Agency& ag = out.agencies[fam.agency];
        std::vector<Date> dates;
        for (int y = 0; y < config.years; ++y) {
            const int year = config.start_year + y;
            const double rate = config.base_visits * spec.demand_effect * std::pow(1.0 + config.annual_drift, y);
            int visits = poisson(rng, y == 0 ? rate - 1.0 : rate);
            if (y == 0) visits += 1;
            std::vector<double> month_weight(12);
            for (int m = 0; m < 12; ++m) {
                const unsigned dim = static_cast<unsigned>(
                    (std::chrono::year{year} / std::chrono::month{static_cast<unsigned>(m + 1)} / std::chrono::last)
                        .day());
                month_weight[m] = config.season_profile[m] * dim;
            }
            std::discrete_distribution<int> pick_month(month_weight.begin(), month_weight.end());
            for (int v = 0; v < visits; ++v) {
                const int m = pick_month(rng) + 1;
                const unsigned dim = static_cast<unsigned>(
                    (std::chrono::year{year} / std::chrono::month{static_cast<unsigned>(m)} / std::chrono::last).day());
                std::uniform_int_distribution<unsigned> pick_day(1, dim);
                Date d;
                for (;;) {
                    d = Date{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(m)},
                             std::chrono::day{pick_day(rng)}};
                    const int dow = calendar_features(d).dow;
                    if (unit(rng) * max_weekday < config.weekday_profile[dow - 1]) break;
                }
                dates.push_back(d);
            }
        }
        for (const Date& d : dates) {
            ingest::ServiceRecord rec;
            rec.date = d;
            rec.family_id = fam.family_id;
            rec.city = "Synthville";
            rec.state = "OH";
            rec.zip = "44" + padded('0', fam.agency + 1, 3).substr(1);
            rec.county = fam.county;
            rec.count_adult = fam.adults;
            rec.count_child = fam.children;
            rec.count_senior = fam.seniors;
            rec.agency_id = ag.agency_id;
            rec.family_loc = fam.location;
            rec.agency_loc = ag.location;
            out.services.push_back(std::move(rec));
        }
    }
    std::vector<std::size_t> order(out.services.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& x = out.services[a];
        const auto& y = out.services[b];
        if (x.date != y.date) return x.date < y.date;
        return x.family_id < y.family_id;
    });
    std::vector<ingest::ServiceRecord> sorted;
    sorted.reserve(order.size());
    for (std::size_t i : order) {
        sorted.push_back(std::move(out.services[i]));
        sorted.back().source_row = sorted.size() + 1;
    }
    out.services = std::move(sorted);
    return out;
}

nlohmann::json SynthOutput::truth() const {
    nlohmann::json fams = nlohmann::json::array();
    for (const auto& f : families) {
        fams.push_back({{"family_id", f.family_id},
                        {"cluster", f.cluster},
                        {"agency_id", agencies[f.agency].agency_id},
                        {"county", f.county}});
    }
    nlohmann::json ags = nlohmann::json::array();
    for (const auto& a : agencies) {
        ags.push_back({{"agency_id", a.agency_id},
                       {"dominant_cluster", a.dominant_cluster},
                       {"lat", a.location.lat},
                       {"lon", a.location.lon}});
    }
    return {{"config", config.to_json()}, {"families", fams}, {"agencies", ags}};
}

std::string SynthOutput::services_csv() const {
    std::ostringstream out;
    csv::Writer w(out);
    w.row({"date", "family_id", "city", "state", "zip", "county", "count_adult", "count_child", "count_senior",
           "agency_id", "family_lat", "family_lon", "agency_lat", "agency_lon"});
    for (const auto& r : services) {
        w.field(format_date(r.date)).field(r.family_id).field(r.city).field(r.state).field(r.zip).field(r.county)
            .field(r.count_adult).field(r.count_child).field(r.count_senior).field(r.agency_id)
            .field(r.family_loc.lat).field(r.family_loc.lon).field(r.agency_loc.lat).field(r.agency_loc.lon);
        w.end_row();
    }
    return out.str();
}

std::string SynthOutput::income_csv() const {
    std::ostringstream out;
    csv::Writer w(out);
    w.row({"county", "income"});
    for (const auto& [county, income] : incomes) {
        w.field(county).field(income);
        w.end_row();
    }
    return out.str();
}

void write(const SynthOutput& output, const std::filesystem::path& dir) {
    csv::write_file(dir / "services.csv", output.services_csv());
    csv::write_file(dir / "income.csv", output.income_csv());
    csv::write_file(dir / "truth.json", output.truth().dump(2) + "\n");
}

} // namespace fdemand::synth
