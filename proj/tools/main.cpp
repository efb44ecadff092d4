#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"
#include "fdemand/families.hpp"
#include "fdemand/gmm.hpp"
#include "fdemand/ingest.hpp"
#include "fdemand/predict.hpp"
#include "fdemand/random.hpp"
#include "fdemand/report.hpp"
#include "fdemand/selection.hpp"
#include "fdemand/synth.hpp"
#include "fdemand/wrangle.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#ifndef FDEMAND_VERSION
#define FDEMAND_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fdemand;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

json default_config() {
    json models = json::array();
    for (auto m : gmm::implemented_models()) models.push_back(std::string(gmm::code(m)));
    return {
        {"seed", 1},
        {"threads", 1},
        {"out", "out"},
        {"inputs", {{"services", ""}, {"income", ""}, {"schema", ""}}},
        {"synth", json::object()},
        {"ingest", {{"low_access_miles", ingest::kDefaultLowAccessMiles}}},
        {"cluster",
         {{"features", families::default_features()}, {"count_jitter_sd", 0.5}, {"k", 4}, {"model", "VVV"}}},
        {"select",
         {{"k_min", 1},
          {"k_max", 8},
          {"models", models},
          {"starts", 1},
          {"criterion", "bic"},
          {"silhouette", "per_k"},
          {"penalty", "log_n"}}},
        {"predict",
         {{"families", {"glm", "mars", "rf"}},
          {"family", "glm"},
          {"splits", 10},
          {"test_fraction", 0.3},
          {"with_clusters", true},
          {"without_clusters", true},
          {"glm", {{"aic_penalty", 2.0}, {"stepwise", true}}},
          {"mars", {{"max_terms", 21}, {"threshold", 0.001}, {"nfold", 10}, {"ncross", 5}}},
          {"rf", {{"ntree_grid", {50, 100, 200, 500}}, {"mtry", 0}, {"nodesize", 5}, {"max_bins", 128}}}}},
        {"report", {{"family", "best"}, {"cluster_features", false}, {"poor_income", 50000.0}, {"within_miles", 1.0}}},
    };
}

// Sections hold fixed keys; `synth` is validated by SynthConfig itself.
void merge(json& base, const json& over, const std::string& where) {
    if (!over.is_object()) throw UsageError("config " + (where.empty() ? "root" : where) + " must be an object");
    for (const auto& [key, value] : over.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw UsageError("unknown config key '" + path + "'");
        json& slot = base[key];
        if (slot.is_object() && path != "synth") {
            merge(slot, value, path);
        } else {
            slot = value;
        }
    }
}

template <class T>
T get(const json& cfg, const json::json_pointer& ptr) {
    try {
        return cfg.at(ptr).get<T>();
    } catch (const json::exception&) {
        throw UsageError("config value '" + ptr.to_string() + "' has the wrong type");
    }
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct Context {
    std::string command;
    json cfg;
    fs::path out;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    json inputs = json::array();
    std::vector<std::string> artifacts;

    json at(const std::string& pointer) const { return cfg.at(json::json_pointer(pointer)); }
    template <class T>
    T value(const std::string& pointer) const {
        return get<T>(cfg, json::json_pointer(pointer));
    }
    std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(seed, stage); }

    // Paths inside the output directory are recorded relative to it.
    std::string display(const fs::path& p) const {
        const fs::path rel = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(out));
        if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
        return p.generic_string();
    }
    void input(const fs::path& p) {
        const std::string name = display(p);
        for (const auto& i : inputs) {
            if (i.at("path") == name) return;
        }
        inputs.push_back({{"path", name}, {"fnv1a", hex(fnv1a(csv::read_file(p)))}});
    }
    fs::path file(const std::string& name) const { return out / name; }
    fs::path input_or(const std::string& pointer, const std::string& fallback) const {
        const auto given = value<std::string>(pointer);
        return given.empty() ? file(fallback) : fs::path(given);
    }
    void write(const std::string& name, std::string_view content) {
        const fs::path p = file(name);
        fs::create_directories(p.parent_path());
        csv::write_file(p, content);
        artifacts.push_back(name);
    }
};

template <class Fn>
std::string render(Fn&& fn) {
    std::ostringstream os;
    fn(os);
    return os.str();
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void summary(const std::string& stage, const std::string& text) { std::cout << stage << ": " << text << "\n"; }

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> items;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        if (!item.empty()) items.push_back(item);
    }
    return items;
}

gmm::CovarianceModel model_of(const std::string& text) {
    const auto m = gmm::parse_model(text);
    if (!m || !gmm::is_implemented(*m)) throw UsageError("unknown or unimplemented covariance model '" + text + "'");
    return *m;
}

predict::Family family_of(const std::string& text) {
    const auto f = predict::parse_family(text);
    if (!f || !predict::is_implemented(*f)) throw UsageError("unknown or unimplemented model family '" + text + "'");
    return *f;
}

std::vector<ingest::AggregatedRecord> load_aggregated(Context& ctx) {
    const fs::path p = ctx.file("aggregated.csv");
    ctx.input(p);
    return ingest::read_aggregated_csv(p);
}

void write_labels(Context& ctx, const families::LabelMap& labels) {
    ctx.write("labels.csv", render([&](std::ostream& os) {
        csv::Writer w(os);
        w.row({"family_id", "cluster"});
        for (const auto& [id, label] : labels) w.field(id).field(label).end_row();
    }));
}

struct Labels {
    families::LabelMap map;
    int k = 0;
};

Labels load_labels(Context& ctx) {
    const fs::path fit_path = ctx.file("cluster_fit.json");
    const fs::path labels_path = ctx.file("labels.csv");
    if (!fs::exists(fit_path) || !fs::exists(labels_path)) {
        throw ContractViolation("cluster labels not found in " + ctx.out.generic_string() + "; run cluster or select first");
    }
    ctx.input(fit_path);
    ctx.input(labels_path);
    Labels l;
    l.k = json::parse(csv::read_file(fit_path)).at("K").get<int>();
    const csv::Table t = csv::read(labels_path);
    const std::size_t id = t.require("family_id");
    const std::size_t cl = t.require("cluster");
    for (const auto& row : t.rows) l.map[row.at(id)] = std::stoi(row.at(cl));
    return l;
}

gmm::FeatureMatrix cluster_features(const Context& ctx, const std::vector<families::FamilySummary>& fams) {
    families::FeatureOptions fo;
    fo.features = ctx.value<std::vector<std::string>>("/cluster/features");
    fo.count_jitter_sd = ctx.value<double>("/cluster/count_jitter_sd");
    fo.seed = ctx.stage_seed("features");
    return families::family_features(fams, fo);
}

std::vector<wrangle::DemandRecord> load_demand(Context& ctx, bool with_clusters) {
    const auto agg = load_aggregated(ctx);
    auto demand = wrangle::to_demand_dataset(agg);
    if (!with_clusters) return demand;
    const Labels l = load_labels(ctx);
    return wrangle::attach_cluster_features(demand, l.map, agg, l.k);
}

predict::FitOptions fit_options(const Context& ctx, std::uint64_t seed) {
    predict::FitOptions o;
    o.glm.aic_penalty = ctx.value<double>("/predict/glm/aic_penalty");
    o.glm.stepwise = ctx.value<bool>("/predict/glm/stepwise");
    o.mars.max_terms = ctx.value<int>("/predict/mars/max_terms");
    o.mars.threshold = ctx.value<double>("/predict/mars/threshold");
    o.mars.nfold = ctx.value<int>("/predict/mars/nfold");
    o.mars.ncross = ctx.value<int>("/predict/mars/ncross");
    o.rf.ntree_grid = ctx.value<std::vector<int>>("/predict/rf/ntree_grid");
    o.rf.mtry = ctx.value<int>("/predict/rf/mtry");
    o.rf.nodesize = ctx.value<int>("/predict/rf/nodesize");
    o.rf.max_bins = ctx.value<int>("/predict/rf/max_bins");
    o.seed = seed;
    o.threads = ctx.threads;
    return o;
}

std::string model_file(predict::Family f, bool clusters) {
    return "model_" + std::string(predict::code(f)) + (clusters ? "_clusters" : "") + ".json";
}

std::string eval_file(bool clusters) { return clusters ? "eval_with_clusters.json" : "eval_without_clusters.json"; }

void run_synth(Context& ctx) {
    synth::SynthConfig sc;
    try {
        sc = synth::SynthConfig::from_json(ctx.at("/synth"));
    } catch (const ContractViolation& e) {
        throw UsageError(e.what());
    }
    sc.seed = ctx.stage_seed("synth");
    const synth::SynthOutput out = synth::generate(sc);
    fs::create_directories(ctx.out);
    ctx.write("services.csv", out.services_csv());
    ctx.write("income.csv", out.income_csv());
    ctx.write("truth.json", dump(out.truth()));
    summary("synth", std::to_string(out.families.size()) + " families, " + std::to_string(out.agencies.size()) +
                         " agencies, " + std::to_string(out.services.size()) + " services, K=" +
                         std::to_string(sc.k_true()));
}

void run_ingest(Context& ctx) {
    const fs::path services = ctx.input_or("/inputs/services", "services.csv");
    const fs::path income = ctx.input_or("/inputs/income", "income.csv");
    const auto schema_path = ctx.value<std::string>("/inputs/schema");
    ingest::ColumnMap schema;
    if (!schema_path.empty()) {
        schema = ingest::ColumnMap::from_file(schema_path);
        ctx.input(schema_path);
    }
    auto parsed = ingest::parse_service_csv(services, schema);
    const auto table = ingest::parse_income_csv(income);
    ctx.input(services);
    ctx.input(income);
    auto agg = ingest::build_aggregated(parsed.records, table, ctx.value<double>("/ingest/low_access_miles"));
    std::vector<ingest::Reject> rejects = std::move(parsed.rejects);
    rejects.insert(rejects.end(), agg.rejects.begin(), agg.rejects.end());
    ctx.write("aggregated.csv", render([&](std::ostream& os) { ingest::write_aggregated_csv(os, agg.records); }));
    ctx.write("rejects.csv", render([&](std::ostream& os) { ingest::write_rejects_csv(os, rejects); }));
    long long low = 0;
    for (const auto& r : agg.records) low += r.low_access ? 1 : 0;
    summary("ingest", std::to_string(agg.records.size()) + " records, " + std::to_string(rejects.size()) +
                          " rejects, " + std::to_string(low) + " low-access");
}

void run_cluster(Context& ctx) {
    const int k = ctx.value<int>("/cluster/k");
    if (k < 1) throw UsageError("cluster: K must be at least 1 (got " + std::to_string(k) + ")");
    gmm::EmOptions em;
    em.k = k;
    em.model = model_of(ctx.value<std::string>("/cluster/model"));
    em.seed = ctx.stage_seed("cluster");
    const auto fams = families::summarize(load_aggregated(ctx));
    const gmm::MixtureFit fit = gmm::fit_em(cluster_features(ctx, fams), em);
    ctx.write("cluster_fit.json", dump(gmm::to_json(fit)));
    write_labels(ctx, families::label_map(fams, gmm::hard_assign(fit)));
    summary("cluster", std::string(gmm::code(fit.model)) + " K=" + std::to_string(fit.k()) + " on " +
                           std::to_string(fams.size()) + " families, loglik " + csv::format_fixed(fit.loglik(), 2) +
                           (fit.converged ? ", converged" : ", not converged"));
}

selection::SweepOptions sweep_options(const Context& ctx) {
    selection::SweepOptions so;
    so.k_min = ctx.value<int>("/select/k_min");
    so.k_max = ctx.value<int>("/select/k_max");
    if (so.k_min < 1 || so.k_max < so.k_min) {
        throw UsageError("select: need 1 <= k_min <= k_max (got " + std::to_string(so.k_min) + ".." +
                         std::to_string(so.k_max) + ")");
    }
    so.models.clear();
    for (const auto& m : ctx.value<std::vector<std::string>>("/select/models")) so.models.push_back(model_of(m));
    if (so.models.empty()) throw UsageError("select: no covariance models given");
    so.starts = ctx.value<int>("/select/starts");
    if (so.starts < 1) throw UsageError("select: starts must be at least 1");
    const auto crit = selection::parse_criterion(ctx.value<std::string>("/select/criterion"));
    const auto sil = selection::parse_silhouette_mode(ctx.value<std::string>("/select/silhouette"));
    const auto pen = selection::parse_penalty(ctx.value<std::string>("/select/penalty"));
    if (!crit) throw UsageError("select: criterion must be bic or silhouette");
    if (!sil) throw UsageError("select: silhouette must be none, per_k or all");
    if (!pen) throw UsageError("select: penalty must be log_n or log_log_n");
    so.criterion = *crit;
    so.silhouette = *sil;
    so.penalty = *pen;
    so.seed = ctx.stage_seed("select");
    so.threads = ctx.threads;
    return so;
}

void run_select(Context& ctx) {
    const selection::SweepOptions so = sweep_options(ctx);
    const auto fams = families::summarize(load_aggregated(ctx));
    const selection::SweepResult res = selection::sweep(cluster_features(ctx, fams), so);
    const auto& rep = res.report;
    ctx.write("selection.json", dump(selection::to_json(rep)));
    ctx.write("bic.csv", render([&](std::ostream& os) { selection::write_bic_csv(os, rep); }));
    ctx.write("silhouette.csv", render([&](std::ostream& os) { selection::write_silhouette_csv(os, rep); }));
    ctx.write("cluster_fit.json", dump(gmm::to_json(res.winner_fit)));
    write_labels(ctx, families::label_map(fams, gmm::hard_assign(res.winner_fit)));
    const auto& w = rep.winner();
    summary("select", std::to_string(rep.grid.size()) + " cells, winner " + std::string(gmm::code(w.model)) +
                          " K=" + std::to_string(w.k) + " by " + std::string(selection::to_string(rep.criterion)) +
                          ", bic " + csv::format_fixed(w.bic, 2));
}

void run_wrangle(Context& ctx) {
    const bool clusters = fs::exists(ctx.file("labels.csv")) && fs::exists(ctx.file("cluster_fit.json"));
    const auto demand = load_demand(ctx, clusters);
    ctx.write("demand.csv", render([&](std::ostream& os) { wrangle::write_demand_csv(os, demand); }));
    const auto stats = wrangle::descriptive_stats(demand);
    ctx.write("demand_summary.json", dump(wrangle::to_json(stats)));
    summary("wrangle", std::to_string(demand.size()) + " agency-days" +
                           (clusters ? " with cluster features" : " without cluster features"));
}

void run_fit(Context& ctx, predict::Family family, bool clusters) {
    const auto demand = load_demand(ctx, clusters);
    predict::EncodingOptions enc;
    enc.cluster_features = clusters;
    const auto design = predict::build_design(demand, enc);
    const auto model = predict::fit(family, design, fit_options(ctx, ctx.stage_seed("fit")));
    const std::string name = model_file(family, clusters);
    ctx.write(name, dump(predict::to_json(model)));
    summary("fit", std::string(predict::code(family)) + (clusters ? "+clusters" : "") + " on " +
                       std::to_string(design.x.rows()) + " rows, " + std::to_string(model.effective_parameters()) +
                       " effective parameters");
}

std::vector<predict::EvalReport> run_evaluate(Context& ctx) {
    std::vector<predict::Family> fams;
    for (const auto& f : ctx.value<std::vector<std::string>>("/predict/families")) fams.push_back(family_of(f));
    if (fams.empty()) throw UsageError("evaluate: no model families given");
    std::vector<bool> variants;
    if (ctx.value<bool>("/predict/without_clusters")) variants.push_back(false);
    if (ctx.value<bool>("/predict/with_clusters")) variants.push_back(true);
    if (variants.empty()) throw UsageError("evaluate: enable with_clusters and/or without_clusters");
    predict::HoldoutOptions ho;
    ho.splits = ctx.value<int>("/predict/splits");
    ho.test_fraction = ctx.value<double>("/predict/test_fraction");
    ho.seed = ctx.stage_seed("evaluate");
    const auto fo = fit_options(ctx, ho.seed);

    std::vector<predict::EvalReport> all;
    for (bool clusters : variants) {
        const auto demand = load_demand(ctx, clusters);
        predict::EncodingOptions enc;
        enc.cluster_features = clusters;
        const auto design = predict::build_design(demand, enc);
        json arr = json::array();
        for (auto f : fams) {
            all.push_back(predict::holdout_eval(f, design, fo, ho));
            arr.push_back(predict::to_json(all.back()));
        }
        ctx.write(eval_file(clusters), dump(arr));
    }
    ctx.write("comparison.csv", render([&](std::ostream& os) { predict::write_comparison_csv(os, all); }));
    std::size_t best = 0;
    for (std::size_t i = 1; i < all.size(); ++i) {
        if (all[i].out_of_sample.rmse < all[best].out_of_sample.rmse) best = i;
    }
    summary("evaluate", std::to_string(all.size()) + " reports, best " + std::string(predict::code(all[best].family)) +
                            (all[best].cluster_features ? "+clusters" : "") + " out-of-sample rmse " +
                            csv::format_fixed(all[best].out_of_sample.rmse, 3));
    return all;
}

std::optional<predict::EvalReport> best_report(Context& ctx) {
    std::vector<predict::EvalReport> reports;
    for (bool clusters : {false, true}) {
        const fs::path p = ctx.file(eval_file(clusters));
        if (!fs::exists(p)) continue;
        ctx.input(p);
        for (const auto& j : json::parse(csv::read_file(p))) {
            predict::EvalReport r;
            r.family = family_of(j.at("family").get<std::string>());
            r.cluster_features = j.at("cluster_features").get<bool>();
            r.out_of_sample.rmse = j.at("out_of_sample").at("rmse").get<double>();
            reports.push_back(r);
        }
    }
    if (reports.empty()) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].out_of_sample.rmse < reports[best].out_of_sample.rmse) best = i;
    }
    return reports[best];
}

// Family and cluster setting for forecasting: the evaluation winner under "best".
std::pair<predict::Family, bool> forecast_model(Context& ctx) {
    const auto name = ctx.value<std::string>("/report/family");
    if (name == "best") {
        if (const auto r = best_report(ctx)) return {r->family, r->cluster_features};
        return {predict::Family::Glm, false};
    }
    return {family_of(name), ctx.value<bool>("/report/cluster_features")};
}

void run_report(Context& ctx) {
    const auto agg = load_aggregated(ctx);
    const auto fams = families::summarize(agg);
    const Labels labels = load_labels(ctx);

    report::ProfileOptions po;
    po.poor_threshold = ctx.value<double>("/report/poor_income");
    po.within_miles = ctx.value<double>("/report/within_miles");
    const auto profile = report::cluster_profile(fams, labels.map, labels.k, po);
    ctx.write("profile.csv", render([&](std::ostream& os) { report::write_profile_csv(os, profile); }));
    ctx.write("profile.json", dump(report::to_json(profile)));

    const auto [family, clusters] = forecast_model(ctx);
    auto demand = wrangle::to_demand_dataset(agg);
    if (clusters) demand = wrangle::attach_cluster_features(demand, labels.map, agg, labels.k);
    report::ForecastOptions fo;
    fo.family = family;
    fo.cluster_features = clusters;
    fo.fit = fit_options(ctx, ctx.stage_seed("report"));
    const auto fc = report::forecast(demand, fo);
    ctx.write("forecast_annual.csv", render([&](std::ostream& os) { report::write_forecast_csv(os, fc.annual); }));
    ctx.write("forecast_monthly.csv", render([&](std::ostream& os) { report::write_forecast_csv(os, fc.monthly); }));
    ctx.write("forecast.json", dump({{"annual", report::to_json(fc.annual)}, {"monthly", report::to_json(fc.monthly)}}));

    std::optional<selection::SelectionReport> sel;
    const fs::path sel_path = ctx.file("selection.json");
    if (fs::exists(sel_path)) {
        ctx.input(sel_path);
        sel = selection::report_from_json(json::parse(csv::read_file(sel_path)));
    }
    report::PlotInputs pi;
    pi.families = &fams;
    pi.labels = &labels.map;
    pi.selection = sel ? &*sel : nullptr;
    pi.demand = &demand;
    const auto plots = report::export_plots(ctx.file("plots"), pi);
    for (const auto& p : plots) ctx.artifacts.push_back(ctx.display(p));

    int flagged = 0;
    for (const auto& r : fc.annual.rows) flagged += r.flagged ? 1 : 0;
    summary("report", std::to_string(labels.k) + " cluster profiles, " + std::string(predict::code(family)) +
                          (clusters ? "+clusters" : "") + " forecast for " + std::to_string(fc.annual.year) + ", " +
                          std::to_string(flagged) + " annual rows flagged, " + std::to_string(plots.size()) +
                          " plot series");
}

void run_pipeline(Context& ctx) {
    if (ctx.value<std::string>("/inputs/services").empty()) run_synth(ctx);
    run_ingest(ctx);
    run_select(ctx);
    run_wrangle(ctx);
    const auto reports = run_evaluate(ctx);
    std::size_t best = 0;
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].out_of_sample.rmse < reports[best].out_of_sample.rmse) best = i;
    }
    run_fit(ctx, reports[best].family, reports[best].cluster_features);
    run_report(ctx);
}

void write_manifest(Context& ctx) {
    json hashed = ctx.cfg;
    hashed.erase("out");
    hashed.erase("threads");
    json artifacts = json::array();
    for (const auto& name : ctx.artifacts) {
        artifacts.push_back({{"path", name}, {"fnv1a", hex(fnv1a(csv::read_file(ctx.file(name))))}});
    }
    const json manifest = {{"tool", "fdemand"},
                           {"version", FDEMAND_VERSION},
                           {"command", ctx.command},
                           {"seed", ctx.seed},
                           {"config_hash", hex(fnv1a(hashed.dump()))},
                           {"config", hashed},
                           {"inputs", ctx.inputs},
                           {"artifacts", artifacts}};
    const std::string name = "manifest_" + ctx.command + ".json";
    csv::write_file(ctx.file(name), dump(manifest));
}

std::string error_type(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e)) return "usage";
    if (dynamic_cast<const InsufficientHistory*>(&e)) return "insufficient_history";
    if (dynamic_cast<const UndefinedSilhouette*>(&e)) return "undefined_silhouette";
    if (dynamic_cast<const DegenerateComponent*>(&e)) return "degenerate_component";
    if (dynamic_cast<const ContractViolation*>(&e)) return "contract_violation";
    if (dynamic_cast<const IoError*>(&e)) return "io_error";
    if (dynamic_cast<const NumericalFailure*>(&e)) return "numerical_failure";
    return "error";
}

void report_error(const std::string& command, const std::exception& e) {
    const json err = {{"error", {{"command", command}, {"type", error_type(e)}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
}

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> out;
    std::vector<std::pair<std::string, json>> values;
};

// Binds `--flag` to a config pointer; the value lands in the config only when given.
template <class T>
void bind_option(CLI::App* app, Overrides& o, std::vector<std::function<void()>>& apply, const std::string& flag,
          const std::string& pointer, const std::string& help) {
    auto slot = std::make_shared<std::optional<T>>();
    app->add_option(flag, *slot, help);
    apply.push_back([slot, pointer, &o] {
        if (*slot) o.values.emplace_back(pointer, json(**slot));
    });
}

void bind_list(CLI::App* app, Overrides& o, std::vector<std::function<void()>>& apply, const std::string& flag,
               const std::string& pointer, const std::string& help) {
    auto slot = std::make_shared<std::optional<std::string>>();
    app->add_option(flag, *slot, help + " (comma separated)");
    apply.push_back([slot, pointer, &o] {
        if (*slot) o.values.emplace_back(pointer, json(split_list(**slot)));
    });
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage food-demand estimation: clustering, demand modelling and forecasting"};
    app.set_version_flag("--version", FDEMAND_VERSION);
    app.require_subcommand(1);

    Overrides o;
    std::vector<std::function<void()>> apply;
    bool with_clusters = false;
    bool without_clusters = false;

    const auto common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "Base seed; every stage seed is derived from it");
        sub->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
        sub->add_option("-o,--out", o.out, "Output directory");
        return sub;
    };
    const auto synth_flags = [&](CLI::App* sub) {
        bind_option<int>(sub, o, apply, "--families", "/synth/n_families", "Synthetic families");
        bind_option<int>(sub, o, apply, "--agencies", "/synth/n_agencies", "Synthetic agencies");
        bind_option<int>(sub, o, apply, "--years", "/synth/years", "Synthetic years of history");
    };
    const auto input_flags = [&](CLI::App* sub) {
        bind_option<std::string>(sub, o, apply, "--services", "/inputs/services", "Service records CSV");
        bind_option<std::string>(sub, o, apply, "--income", "/inputs/income", "County income CSV");
        bind_option<std::string>(sub, o, apply, "--schema", "/inputs/schema", "Column mapping JSON");
        bind_option<double>(sub, o, apply, "--low-access-miles", "/ingest/low_access_miles", "Low-access distance threshold");
    };
    const auto feature_flags = [&](CLI::App* sub) {
        bind_list(sub, o, apply, "--features", "/cluster/features", "Clustering features");
    };

    auto* synth_cmd = common(app.add_subcommand("synth", "Generate synthetic service and income data"));
    synth_flags(synth_cmd);
    auto* ingest_cmd = common(app.add_subcommand("ingest", "Validate, join income and compute distances"));
    input_flags(ingest_cmd);
    auto* cluster_cmd = common(app.add_subcommand("cluster", "Fit one Gaussian mixture and label families"));
    feature_flags(cluster_cmd);
    bind_option<int>(cluster_cmd, o, apply, "-k,--k", "/cluster/k", "Number of components");
    bind_option<std::string>(cluster_cmd, o, apply, "--model", "/cluster/model", "Covariance model");
    auto* select_cmd = common(app.add_subcommand("select", "Sweep K and covariance models, keep the winner"));
    feature_flags(select_cmd);
    bind_option<int>(select_cmd, o, apply, "--k-min", "/select/k_min", "Smallest K");
    bind_option<int>(select_cmd, o, apply, "--k-max", "/select/k_max", "Largest K");
    bind_list(select_cmd, o, apply, "--models", "/select/models", "Covariance models");
    bind_option<int>(select_cmd, o, apply, "--starts", "/select/starts", "EM starts per cell");
    bind_option<std::string>(select_cmd, o, apply, "--criterion", "/select/criterion", "bic or silhouette");
    common(app.add_subcommand("wrangle", "Build the agency-day demand dataset"));
    auto* fit_cmd = common(app.add_subcommand("fit", "Fit one demand model on all rows"));
    bind_option<std::string>(fit_cmd, o, apply, "--family", "/predict/family", "Model family: glm, mars or rf");
    fit_cmd->add_flag("--with-clusters", with_clusters, "Use cluster features");
    auto* eval_cmd = common(app.add_subcommand("evaluate", "Repeated holdout evaluation of demand models"));
    bind_list(eval_cmd, o, apply, "--families", "/predict/families", "Model families");
    bind_option<int>(eval_cmd, o, apply, "--splits", "/predict/splits", "Holdout splits");
    eval_cmd->add_flag("--with-clusters", with_clusters, "Evaluate with cluster features");
    eval_cmd->add_flag("--without-clusters", without_clusters, "Evaluate without cluster features");
    auto* report_cmd = common(app.add_subcommand("report", "Cluster profiles, forecasts and plot data"));
    bind_option<std::string>(report_cmd, o, apply, "--family", "/report/family", "Forecast family or 'best'");
    bind_option<double>(report_cmd, o, apply, "--poor-income", "/report/poor_income", "Income threshold for poor families");
    auto* pipeline_cmd = common(app.add_subcommand("pipeline", "Run every stage end to end"));
    synth_flags(pipeline_cmd);
    input_flags(pipeline_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    Context ctx;
    ctx.command = sub->get_name();
    try {
        ctx.cfg = default_config();
        if (!o.config.empty()) {
            json file;
            try {
                file = json::parse(csv::read_file(o.config));
            } catch (const json::parse_error& e) {
                throw UsageError("config " + o.config + ": " + e.what());
            }
            merge(ctx.cfg, file, "");
        }
        for (auto& fn : apply) fn();
        for (const auto& [pointer, value] : o.values) ctx.cfg[json::json_pointer(pointer)] = value;
        if (o.seed) ctx.cfg["seed"] = *o.seed;
        if (o.threads) ctx.cfg["threads"] = *o.threads;
        if (o.out) ctx.cfg["out"] = *o.out;
        if (ctx.command == "evaluate" && (with_clusters || without_clusters)) {
            ctx.cfg["predict"]["with_clusters"] = with_clusters;
            ctx.cfg["predict"]["without_clusters"] = without_clusters;
        }
        ctx.seed = ctx.value<std::uint64_t>("/seed");
        ctx.threads = std::max(1u, ctx.value<unsigned>("/threads"));
        ctx.out = ctx.value<std::string>("/out");
        fs::create_directories(ctx.out);

        if (ctx.command == "synth") run_synth(ctx);
        else if (ctx.command == "ingest") run_ingest(ctx);
        else if (ctx.command == "cluster") run_cluster(ctx);
        else if (ctx.command == "select") run_select(ctx);
        else if (ctx.command == "wrangle") run_wrangle(ctx);
        else if (ctx.command == "fit") {
            run_fit(ctx, family_of(ctx.value<std::string>("/predict/family")), with_clusters);
        } else if (ctx.command == "evaluate") run_evaluate(ctx);
        else if (ctx.command == "report") run_report(ctx);
        else run_pipeline(ctx);
        write_manifest(ctx);
    } catch (const UsageError& e) {
        report_error(ctx.command, e);
        std::cerr << sub->help();
        return kExitUsage;
    } catch (const std::exception& e) {
        report_error(ctx.command, e);
        return kExitFailure;
    }
    return 0;
}
