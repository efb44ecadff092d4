#include "doctest.h"

#include "fdemand/error.hpp"
#include "fdemand/families.hpp"
#include "fdemand/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>

using namespace fdemand;

namespace {

ingest::AggregatedRecord service(const std::string& family, const std::string& day, int a, int c, int s,
                                 double distance, double income) {
    ingest::AggregatedRecord r;
    r.family_id = family;
    r.date = parse_date(day);
    r.count_adult = a;
    r.count_child = c;
    r.count_senior = s;
    r.distance_miles = distance;
    r.county_income = income;
    r.county = "C1";
    r.agency_id = "A1";
    return r;
}

synth::SynthConfig small_config(std::uint64_t seed) {
    synth::SynthConfig cfg;
    cfg.seed = seed;
    cfg.n_families = 400;
    cfg.n_agencies = 8;
    return cfg;
}

} // namespace

TEST_CASE("family summaries") {
    const std::vector<ingest::AggregatedRecord> recs = {
        service("F2", "2018-03-01", 2, 1, 0, 3.0, 40000),
        service("F1", "2018-02-01", 1, 0, 1, 0.5, 30000),
        service("F2", "2018-01-15", 1, 2, 1, 5.0, 40000),
    };
    const auto fams = families::summarize(recs);
    REQUIRE(fams.size() == 2);
    CHECK(fams[0].family_id == "F1");
    CHECK(fams[1].family_id == "F2");
    // Composition comes from the earliest service.
    CHECK(fams[1].adults == 1);
    CHECK(fams[1].children == 2);
    CHECK(fams[1].seniors == 1);
    CHECK(fams[1].mean_distance_miles == doctest::Approx(4.0));
    CHECK(fams[1].services == 2);
    CHECK(fams[1].people_served == 7);

    families::FeatureOptions raw;
    raw.standardize = false;
    raw.count_jitter_sd = 0.0;
    const auto x = families::family_features(fams, raw);
    CHECK(x.names() == families::default_features());
    CHECK(x.values()(1, 0) == 4.0);
    CHECK(x.values()(1, 2) == 2.0);
    CHECK(x.values()(0, 4) == 30000.0);

    raw.count_jitter_sd = 0.5;
    const auto jittered = families::family_features(fams, raw);
    CHECK(jittered.values()(1, 0) == 4.0);
    CHECK(jittered.values()(1, 4) == 40000.0);
    CHECK(jittered.values()(1, 2) != 2.0);

    raw.features = {"people", "bogus"};
    CHECK_THROWS_AS(families::family_features(fams, raw), ContractViolation);

    const auto labels = families::label_map(fams, {2, 1});
    CHECK(labels.at("F1") == 2);
    CHECK(labels.at("F2") == 1);
    CHECK_THROWS_AS(families::label_map(fams, {1}), ContractViolation);
}

TEST_CASE("standardized family features") {
    const auto out = synth::generate(small_config(3));
    ingest::IncomeTable income;
    for (const auto& [county, value] : out.incomes) income.by_county[county] = value;
    const auto agg = ingest::build_aggregated(out.services, income);
    CHECK(agg.rejects.empty());
    const auto fams = families::summarize(agg.records);
    CHECK(fams.size() == 400);
    const auto x = families::family_features(fams, {});
    REQUIRE(x.standardization());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double mean = x.values().col(c).mean();
        const double var = (x.values().col(c).array() - mean).square().mean();
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
    }
}

TEST_CASE("synth with no families has headers only") {
    synth::SynthConfig cfg;
    cfg.n_families = 0;
    const auto out = synth::generate(cfg);
    CHECK(out.services.empty());
    const std::string text = out.services_csv();
    CHECK(std::count(text.begin(), text.end(), '\n') == 1);
    CHECK(text.rfind("date,family_id,", 0) == 0);
    const auto parsed = ingest::parse_service_text(text);
    CHECK(parsed.records.empty());
    CHECK(parsed.rejects.empty());
}

TEST_CASE("synth is deterministic") {
    const auto a = synth::generate(small_config(9));
    const auto b = synth::generate(small_config(9));
    const auto c = synth::generate(small_config(10));
    CHECK(a.services_csv() == b.services_csv());
    CHECK(a.income_csv() == b.income_csv());
    CHECK(a.truth().dump() == b.truth().dump());
    CHECK(a.services_csv() != c.services_csv());

    const auto dir = std::filesystem::temp_directory_path() / "fdemand_synth_test";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    synth::write(a, dir);
    CHECK(std::filesystem::exists(dir / "services.csv"));
    CHECK(std::filesystem::exists(dir / "income.csv"));
    CHECK(std::filesystem::exists(dir / "truth.json"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("synth round trip reproduces the distance bands") {
    synth::SynthConfig cfg;
    cfg.seed = 21;
    const auto out = synth::generate(cfg);
    const auto parsed = ingest::parse_service_text(out.services_csv());
    CHECK(parsed.rejects.empty());
    CHECK(parsed.records.size() == out.services.size());
    const auto agg = ingest::build_aggregated(parsed.records, ingest::parse_income_text(out.income_csv()));
    CHECK(agg.rejects.empty());

    std::map<std::string, int> truth;
    for (const auto& f : out.families) truth[f.family_id] = f.cluster;
    const auto fams = families::summarize(agg.records);
    CHECK(fams.size() == static_cast<std::size_t>(cfg.n_families));
    std::vector<double> sum(cfg.clusters.size(), 0.0), count(cfg.clusters.size(), 0.0);
    for (const auto& f : fams) {
        const int k = truth.at(f.family_id) - 1;
        sum[k] += f.mean_distance_miles;
        count[k] += 1.0;
        const auto& spec = cfg.clusters[k];
        CHECK(f.mean_distance_miles >= spec.distance_lo - 0.1);
        CHECK(f.mean_distance_miles <= spec.distance_hi + 0.1);
    }
    for (std::size_t k = 0; k < cfg.clusters.size(); ++k) {
        const double mean = sum[k] / count[k];
        CHECK(std::abs(mean - cfg.clusters[k].distance_mean) <= 0.1 * cfg.clusters[k].distance_mean);
    }
}

TEST_CASE("synth seasonality and drift") {
    synth::SynthConfig cfg = small_config(4);
    cfg.n_families = 2000;
    cfg.years = 2;
    cfg.annual_drift = 0.05;
    const auto out = synth::generate(cfg);
    std::array<long long, 12> by_month{};
    std::array<long long, 2> by_year{};
    for (const auto& s : out.services) {
        ++by_month[static_cast<unsigned>(s.date.month()) - 1];
        ++by_year[static_cast<int>(s.date.year()) - cfg.start_year];
    }
    CHECK(std::max_element(by_month.begin(), by_month.end()) - by_month.begin() == 8);
    CHECK(by_year[1] > by_year[0]);
}

TEST_CASE("synth config validation") {
    synth::SynthConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto overlapping = cfg;
    overlapping.clusters[1].distance_lo = 0.5;
    CHECK_THROWS_AS(overlapping.validate(), ContractViolation);
    auto too_far = cfg;
    too_far.clusters[3].distance_hi = 45.0;
    CHECK_THROWS_AS(too_far.validate(), ContractViolation);
    auto bad_season = cfg;
    bad_season.season_profile[0] = 0.0;
    CHECK_THROWS_AS(bad_season.validate(), ContractViolation);

    const auto round = synth::SynthConfig::from_json(cfg.to_json());
    CHECK(round.to_json() == cfg.to_json());
    CHECK(synth::SynthConfig::from_json({{"n_families", 5}}).n_families == 5);
    CHECK_THROWS_AS(synth::SynthConfig::from_json({{"n_famlies", 5}}), ContractViolation);
    CHECK_THROWS_AS(synth::SynthConfig::from_json({{"k_true", 3}}), ContractViolation);
}
