#include "fdemand/selection.hpp"

#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"
#include "fdemand/parallel.hpp"
#include "fdemand/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

namespace fdemand::selection {

long long free_params(CovarianceModel model, int k, int d) {
    if (k < 1 || d < 1) throw ContractViolation("free_params needs K >= 1 and d >= 1");
    const long long K = k, D = d;
    const long long base = K * D + (K - 1);
    switch (model) {
    case CovarianceModel::EII: return base + 1;
    case CovarianceModel::EEI: return base + D;
    case CovarianceModel::EVI: return base + 1 + K * (D - 1);
    case CovarianceModel::EEE: return base + D * (D + 1) / 2;
    case CovarianceModel::EEV: return base + K * D * (D - 1) / 2 + D;
    case CovarianceModel::VVV: return base + K * D * (D + 1) / 2;
    default:
        throw ContractViolation("covariance model " + std::string(gmm::code(model)) + " is not implemented");
    }
}

double bic(double loglik, long long m, long long n, Penalty penalty) {
    if (n < 1) throw ContractViolation("BIC needs N >= 1");
    const double log_n = std::log(static_cast<double>(n));
    const double factor = penalty == Penalty::LogN ? log_n : std::log(log_n);
    if (m == 0) return loglik;
    return loglik - 0.5 * static_cast<double>(m) * factor;
}

Silhouette silhouette(const gmm::RowMatrix& data, const std::vector<int>& labels, Metric metric) {
    const Eigen::Index n = data.rows();
    const Eigen::Index d = data.cols();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw ContractViolation("one label per row is required");

    std::map<int, int> index;
    for (int l : labels) index.emplace(l, 0);
    if (index.size() < 2) throw UndefinedSilhouette("silhouette needs at least two clusters");
    int next = 0;
    for (auto& [label, idx] : index) idx = next++;
    const int c = next;
    std::vector<int> cl(static_cast<std::size_t>(n));
    std::vector<double> size(static_cast<std::size_t>(c), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
        cl[i] = index[labels[i]];
        size[cl[i]] += 1.0;
    }

    // sums[c * n + i] accumulates distances from i to members of cluster c in
    // ascending j order (contributions with j < i arrive while processing row j).
    std::vector<double> sums(static_cast<std::size_t>(n) * c, 0.0);
    std::vector<double> row_sums(static_cast<std::size_t>(c));
    const Eigen::MatrixXd x = data;
    std::vector<double> dist(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index m = n - i - 1;
        double* __restrict out = dist.data();
        for (Eigen::Index t = 0; t < d; ++t) {
            const double* __restrict col = x.col(t).data() + i + 1;
            const double xi = x(i, t);
            if (metric == Metric::Euclidean) {
                if (t == 0) {
                    for (Eigen::Index j = 0; j < m; ++j) out[j] = (xi - col[j]) * (xi - col[j]);
                } else {
                    for (Eigen::Index j = 0; j < m; ++j) out[j] += (xi - col[j]) * (xi - col[j]);
                }
            } else {
                if (t == 0) {
                    for (Eigen::Index j = 0; j < m; ++j) out[j] = std::abs(xi - col[j]);
                } else {
                    for (Eigen::Index j = 0; j < m; ++j) out[j] += std::abs(xi - col[j]);
                }
            }
        }
        if (metric == Metric::Euclidean) {
            for (Eigen::Index j = 0; j < m; ++j) out[j] = std::sqrt(out[j]);
        }
        for (int k = 0; k < c; ++k) row_sums[k] = sums[k * n + i];
        const int* __restrict later = cl.data() + i + 1;
        for (Eigen::Index j = 0; j < m; ++j) row_sums[later[j]] += out[j];
        for (int k = 0; k < c; ++k) sums[k * n + i] = row_sums[k];
        double* __restrict mirror = sums.data() + cl[i] * n + i + 1;
        for (Eigen::Index j = 0; j < m; ++j) mirror[j] += out[j];
    }

    Silhouette out;
    out.values.resize(static_cast<std::size_t>(n));
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int own = cl[i];
        double s = 0.0;
        if (size[own] > 1.0) {
            const double a = sums[own * n + i] / (size[own] - 1.0);
            double b = std::numeric_limits<double>::infinity();
            for (int k = 0; k < c; ++k) {
                if (k != own) b = std::min(b, sums[k * n + i] / size[k]);
            }
            const double denom = std::max(a, b);
            s = denom > 0.0 ? (b - a) / denom : 0.0;
        }
        out.values[i] = s;
        total += s;
    }
    out.mean = total / static_cast<double>(n);
    return out;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size() || a.empty()) throw ContractViolation("label vectors must be nonempty and equal length");
    std::map<std::pair<int, int>, long long> joint;
    std::map<int, long long> ra, rb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++joint[{a[i], b[i]}];
        ++ra[a[i]];
        ++rb[b[i]];
    }
    auto choose2 = [](long long x) { return static_cast<double>(x) * static_cast<double>(x - 1) / 2.0; };
    double index = 0.0, sa = 0.0, sb = 0.0;
    for (const auto& [key, count] : joint) index += choose2(count);
    for (const auto& [key, count] : ra) sa += choose2(count);
    for (const auto& [key, count] : rb) sb += choose2(count);
    const double total = choose2(static_cast<long long>(a.size()));
    const double expected = total > 0.0 ? sa * sb / total : 0.0;
    const double max_index = 0.5 * (sa + sb);
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

const GridCell& SelectionReport::winner() const {
    for (const auto& cell : grid) {
        if (cell.model == winner_model && cell.k == winner_k) return cell;
    }
    throw ContractViolation("winner is not in the grid");
}

std::size_t pick_winner(const std::vector<GridCell>& grid, Criterion criterion) {
    std::optional<std::size_t> best;
    auto score = [&](const GridCell& c) -> std::optional<double> {
        if (!c.converged) return std::nullopt;
        if (criterion == Criterion::Bic) return c.bic;
        return c.mean_silhouette;
    };
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto s = score(grid[i]);
        if (!s || !std::isfinite(*s)) continue;
        if (!best) {
            best = i;
            continue;
        }
        const GridCell& cur = grid[*best];
        const double bs = *score(cur);
        const bool better = *s > bs ||
                            (*s == bs && (grid[i].k < cur.k ||
                                          (grid[i].k == cur.k && gmm::model_order(grid[i].model) <
                                                                     gmm::model_order(cur.model))));
        if (better) best = i;
    }
    if (!best) throw NumericalFailure("no grid cell is eligible for selection");
    return *best;
}

SweepResult sweep(const gmm::FeatureMatrix& data, const SweepOptions& opt) {
    if (opt.models.empty()) throw ContractViolation("sweep needs at least one model");
    if (opt.k_min < 1 || opt.k_max < opt.k_min) throw ContractViolation("invalid K range");
    if (opt.k_max >= data.rows()) throw ContractViolation("K range must stay below N");
    if (opt.criterion == Criterion::Silhouette && opt.k_min < 2) {
        throw ContractViolation("silhouette selection needs K >= 2");
    }
    if (opt.criterion == Criterion::Silhouette && opt.silhouette == SilhouetteMode::None) {
        throw ContractViolation("silhouette selection needs silhouettes to be computed");
    }
    if (opt.starts < 1) throw ContractViolation("sweep needs at least one start per cell");
    for (auto m : opt.models) {
        if (!gmm::is_implemented(m)) {
            throw ContractViolation("covariance model " + std::string(gmm::code(m)) + " is not implemented");
        }
    }

    struct Job {
        CovarianceModel model;
        int k;
    };
    std::vector<Job> jobs;
    for (auto m : opt.models) {
        for (int k = opt.k_min; k <= opt.k_max; ++k) jobs.push_back({m, k});
    }
    std::vector<GridCell> grid(jobs.size());
    std::vector<std::optional<gmm::MixtureFit>> fits(jobs.size());
    const auto n = data.rows();
    const int d = static_cast<int>(data.cols());

    parallel_for(jobs.size(), opt.threads, [&](std::size_t idx) {
        const Job& job = jobs[idx];
        GridCell& cell = grid[idx];
        cell.model = job.model;
        cell.k = job.k;
        cell.m = free_params(job.model, job.k, d);
        std::optional<gmm::MixtureFit> best;
        for (int s = 0; s < opt.starts; ++s) {
            gmm::EmOptions em = opt.em;
            em.k = job.k;
            em.model = job.model;
            em.seed = derive_seed(opt.seed, std::string(gmm::code(job.model)) + "/" + std::to_string(job.k) + "/" +
                                                 std::to_string(s));
            try {
                gmm::MixtureFit fit = gmm::fit_em(data, em);
                if (!best || (fit.converged && !best->converged) ||
                    (fit.converged == best->converged && fit.loglik() > best->loglik())) {
                    best = std::move(fit);
                }
            } catch (const NumericalFailure& e) {
                cell.error = e.what();
            }
        }
        if (!best) {
            cell.loglik = -std::numeric_limits<double>::infinity();
            cell.bic = -std::numeric_limits<double>::infinity();
            return;
        }
        cell.error.clear();
        cell.seed = best->seed;
        cell.loglik = best->loglik();
        cell.converged = best->converged;
        cell.iterations = best->iterations;
        cell.bic = bic(cell.loglik, cell.m, n, opt.penalty);
        fits[idx] = std::move(best);
    });

    // Silhouettes on hard labels, after all fits so the set of cells is known.
    std::vector<std::size_t> targets;
    if (opt.silhouette == SilhouetteMode::All) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (fits[i] && grid[i].k >= 2) targets.push_back(i);
        }
    } else if (opt.silhouette == SilhouetteMode::PerK) {
        for (int k = std::max(2, opt.k_min); k <= opt.k_max; ++k) {
            std::optional<std::size_t> best;
            for (std::size_t i = 0; i < grid.size(); ++i) {
                if (grid[i].k != k || !fits[i] || !grid[i].converged) continue;
                if (!best || grid[i].bic > grid[*best].bic) best = i;
            }
            if (best) targets.push_back(*best);
        }
    }
    parallel_for(targets.size(), opt.threads, [&](std::size_t t) {
        const std::size_t i = targets[t];
        try {
            grid[i].mean_silhouette = silhouette(data.values(), gmm::hard_assign(*fits[i]), opt.metric).mean;
        } catch (const UndefinedSilhouette&) {
            grid[i].mean_silhouette.reset();
        }
    });

    SweepResult result;
    SelectionReport& rep = result.report;
    rep.criterion = opt.criterion;
    rep.penalty = opt.penalty;
    rep.n = n;
    rep.d = d;
    rep.feature_names = data.names();
    const std::size_t w = pick_winner(grid, opt.criterion);
    rep.winner_model = grid[w].model;
    rep.winner_k = grid[w].k;
    result.winner_fit = std::move(*fits[w]);
    rep.grid = std::move(grid);
    return result;
}

std::string_view to_string(Criterion c) noexcept {
    return c == Criterion::Bic ? "bic" : "silhouette";
}

std::optional<Criterion> parse_criterion(std::string_view text) noexcept {
    if (text == "bic") return Criterion::Bic;
    if (text == "silhouette") return Criterion::Silhouette;
    return std::nullopt;
}

std::optional<SilhouetteMode> parse_silhouette_mode(std::string_view text) noexcept {
    if (text == "none") return SilhouetteMode::None;
    if (text == "per_k") return SilhouetteMode::PerK;
    if (text == "all") return SilhouetteMode::All;
    return std::nullopt;
}

std::optional<Penalty> parse_penalty(std::string_view text) noexcept {
    if (text == "log_n") return Penalty::LogN;
    if (text == "log_log_n") return Penalty::LogLogN;
    return std::nullopt;
}

nlohmann::json to_json(const SelectionReport& rep) {
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& c : rep.grid) {
        nlohmann::json j;
        j["model"] = std::string(gmm::code(c.model));
        j["K"] = c.k;
        j["seed"] = c.seed;
        j["loglik"] = std::isfinite(c.loglik) ? nlohmann::json(c.loglik) : nlohmann::json(nullptr);
        j["M"] = c.m;
        j["bic"] = std::isfinite(c.bic) ? nlohmann::json(c.bic) : nlohmann::json(nullptr);
        j["mean_silhouette"] = c.mean_silhouette ? nlohmann::json(*c.mean_silhouette) : nlohmann::json(nullptr);
        j["converged"] = c.converged;
        j["iterations"] = c.iterations;
        if (!c.error.empty()) j["error"] = c.error;
        grid.push_back(std::move(j));
    }
    return {{"grid", grid},
            {"winner", {{"model", std::string(gmm::code(rep.winner_model))}, {"K", rep.winner_k}}},
            {"criterion", std::string(to_string(rep.criterion))},
            {"penalty", rep.penalty == Penalty::LogN ? "log_n" : "log_log_n"},
            {"N", rep.n},
            {"d", rep.d},
            {"features", rep.feature_names}};
}

SelectionReport report_from_json(const nlohmann::json& j) {
    const auto model_of = [](const nlohmann::json& v) {
        const auto m = gmm::parse_model(v.get<std::string>());
        if (!m) throw ContractViolation("unknown covariance model '" + v.get<std::string>() + "'");
        return *m;
    };
    const auto number = [](const nlohmann::json& v) {
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    try {
        SelectionReport rep;
        for (const auto& c : j.at("grid")) {
            GridCell cell;
            cell.model = model_of(c.at("model"));
            cell.k = c.at("K").get<int>();
            cell.seed = c.at("seed").get<std::uint64_t>();
            cell.loglik = number(c.at("loglik"));
            cell.m = c.at("M").get<long long>();
            cell.bic = number(c.at("bic"));
            if (!c.at("mean_silhouette").is_null()) cell.mean_silhouette = c.at("mean_silhouette").get<double>();
            cell.converged = c.at("converged").get<bool>();
            cell.iterations = c.at("iterations").get<int>();
            if (c.contains("error")) cell.error = c.at("error").get<std::string>();
            rep.grid.push_back(std::move(cell));
        }
        rep.winner_model = model_of(j.at("winner").at("model"));
        rep.winner_k = j.at("winner").at("K").get<int>();
        const auto crit = parse_criterion(j.at("criterion").get<std::string>());
        const auto pen = parse_penalty(j.at("penalty").get<std::string>());
        if (!crit || !pen) throw ContractViolation("selection report: unknown criterion or penalty");
        rep.criterion = *crit;
        rep.penalty = *pen;
        rep.n = j.at("N").get<long long>();
        rep.d = j.at("d").get<int>();
        rep.feature_names = j.at("features").get<std::vector<std::string>>();
        return rep;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("selection report: ") + e.what());
    }
}

void write_bic_csv(std::ostream& out, const SelectionReport& rep) {
    csv::Writer w(out);
    w.row({"model", "K", "bic"});
    for (const auto& c : rep.grid) {
        w.field(gmm::code(c.model)).field(c.k);
        if (std::isfinite(c.bic)) {
            w.field(c.bic);
        } else {
            w.empty_field();
        }
        w.end_row();
    }
}

void write_silhouette_csv(std::ostream& out, const SelectionReport& rep) {
    std::map<int, double> best;
    for (const auto& c : rep.grid) {
        if (!c.mean_silhouette) continue;
        auto [it, inserted] = best.try_emplace(c.k, *c.mean_silhouette);
        if (!inserted) it->second = std::max(it->second, *c.mean_silhouette);
    }
    csv::Writer w(out);
    w.row({"K", "mean_silhouette"});
    for (const auto& [k, s] : best) {
        w.field(k).field(s);
        w.end_row();
    }
}

} // namespace fdemand::selection
