#include "fdemand/predict.hpp"

#include "fdemand/csv.hpp"
#include "fdemand/error.hpp"
#include "fdemand/parallel.hpp"
#include "fdemand/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

namespace fdemand::predict {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::pair<Family, std::string_view> kFamilies[] = {
    {Family::Glm, "glm"}, {Family::Mars, "mars"}, {Family::Rf, "rf"}, {Family::Gam, "gam"}, {Family::Bart, "bart"},
};

void check_data(const DesignMatrix& data) {
    if (data.x.rows() != data.y.size()) throw ContractViolation("design matrix and response differ in length");
    if (data.x.rows() < 2) throw ContractViolation("model fitting needs at least two rows");
    if (!data.x.allFinite() || !data.y.allFinite()) throw ContractViolation("design matrix has non-finite values");
    if (!data.names.empty() && static_cast<Eigen::Index>(data.names.size()) != data.x.cols()) {
        throw ContractViolation("design matrix names do not match its columns");
    }
}

DesignMatrix take_rows(const DesignMatrix& data, const std::vector<Eigen::Index>& rows) {
    DesignMatrix out;
    out.names = data.names;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.x.row(static_cast<Eigen::Index>(i)) = data.x.row(rows[i]);
        out.y(static_cast<Eigen::Index>(i)) = data.y(rows[i]);
    }
    return out;
}

// Least squares on centered columns through the Gram matrix. Subsets are index
// lists into the columns; singular subsets get a small ridge.
class GramSolver {
public:
    GramSolver(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
        const Eigen::Index n = x.rows();
        mean_ = x.colwise().mean().transpose();
        ymean_ = y.mean();
        scale_.resize(x.cols());
        Eigen::MatrixXd z = x.rowwise() - mean_.transpose();
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double s = z.col(j).norm();
            scale_(j) = s > 1e-12 * (1.0 + std::abs(mean_(j))) * std::sqrt(static_cast<double>(n)) ? s : 0.0;
            if (scale_(j) > 0.0) z.col(j) /= scale_(j);
        }
        const Eigen::VectorXd yc = y.array() - ymean_;
        gram_ = z.transpose() * z;
        cross_ = z.transpose() * yc;
        yy_ = yc.squaredNorm();
    }

    bool usable(Eigen::Index j) const { return scale_(j) > 0.0; }

    // Standardized coefficients of a subset; sets `ridged` when regularization was needed.
    Eigen::VectorXd solve(const std::vector<int>& subset, bool& ridged) const {
        const auto m = static_cast<Eigen::Index>(subset.size());
        ridged = false;
        if (m == 0) return {};
        Eigen::MatrixXd g(m, m);
        Eigen::VectorXd c(m);
        for (Eigen::Index a = 0; a < m; ++a) {
            c(a) = cross_(subset[a]);
            for (Eigen::Index b = 0; b < m; ++b) g(a, b) = gram_(subset[a], subset[b]);
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
        const Eigen::VectorXd d = ldlt.vectorD();
        if (ldlt.info() == Eigen::Success && d.minCoeff() > 1e-10 * std::max(1.0, d.maxCoeff())) {
            return ldlt.solve(c);
        }
        ridged = true;
        const double lambda = 1e-8 * std::max(1.0, g.trace() / static_cast<double>(m));
        g.diagonal().array() += lambda;
        return g.ldlt().solve(c);
    }

    double rss(const std::vector<int>& subset, const Eigen::VectorXd& b) const {
        double r = yy_;
        for (std::size_t a = 0; a < subset.size(); ++a) {
            r -= 2.0 * b(static_cast<Eigen::Index>(a)) * cross_(subset[a]);
            for (std::size_t c = 0; c < subset.size(); ++c) {
                r += b(static_cast<Eigen::Index>(a)) * gram_(subset[a], subset[c]) * b(static_cast<Eigen::Index>(c));
            }
        }
        return std::max(r, 0.0);
    }

    double rss(const std::vector<int>& subset) const {
        bool ridged = false;
        return rss(subset, solve(subset, ridged));
    }

    // Coefficients on the original scale and the matching intercept.
    void unscale(const std::vector<int>& subset, const Eigen::VectorXd& b, Eigen::VectorXd& beta,
                 double& intercept) const {
        beta.setZero(mean_.size());
        intercept = ymean_;
        for (std::size_t a = 0; a < subset.size(); ++a) {
            const int j = subset[a];
            beta(j) = b(static_cast<Eigen::Index>(a)) / scale_(j);
            intercept -= beta(j) * mean_(j);
        }
    }

    double yy() const { return yy_; }

private:
    Eigen::VectorXd mean_, scale_, cross_;
    Eigen::MatrixXd gram_;
    double ymean_ = 0.0, yy_ = 0.0;
};

// ---------------------------------------------------------------- MARS

struct MarsBasis {
    std::vector<HingeTerm> terms;
    /// subsets[s] holds the indices of the terms kept at size s.
    std::vector<std::vector<int>> subsets;
};

Eigen::MatrixXd term_columns(const Eigen::MatrixXd& x, const std::vector<HingeTerm>& terms) {
    Eigen::MatrixXd t(x.rows(), static_cast<Eigen::Index>(terms.size()));
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto c = static_cast<Eigen::Index>(k);
        for (Eigen::Index i = 0; i < x.rows(); ++i) t(i, c) = hinge(x(i, terms[k].var), terms[k]);
    }
    return t;
}

std::vector<HingeTerm> mars_forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const MarsOptions& opt,
                                    std::vector<double>* rss_trace = nullptr) {
    const Eigen::Index n = x.rows(), p = x.cols();
    const int cap = std::max(1, opt.max_terms);
    RowMajor q(n, cap);
    q.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
    Eigen::Index m = 1;
    Eigen::VectorXd r = y.array() - y.mean();
    const double tss = r.squaredNorm();
    std::vector<HingeTerm> terms;
    if (tss <= 0.0) return terms;

    std::vector<std::vector<Eigen::Index>> order(static_cast<std::size_t>(p));
    for (Eigen::Index v = 0; v < p; ++v) {
        auto& o = order[static_cast<std::size_t>(v)];
        o.resize(static_cast<std::size_t>(n));
        std::iota(o.begin(), o.end(), Eigen::Index{0});
        std::stable_sort(o.begin(), o.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a, v) > x(b, v); });
    }

    auto append = [&](const Eigen::VectorXd& column) {
        Eigen::VectorXd c = column;
        const double norm0 = c.squaredNorm();
        if (norm0 <= 0.0) return false;
        for (int pass = 0; pass < 2; ++pass) {
            const Eigen::VectorXd proj = q.leftCols(m).transpose() * c;
            c.noalias() -= q.leftCols(m) * proj;
        }
        const double norm = c.squaredNorm();
        if (norm <= 1e-10 * norm0) return false;
        q.col(m) = c / std::sqrt(norm);
        r -= q.col(m) * q.col(m).dot(r);
        ++m;
        return true;
    };

    std::vector<double> sq, sqx;
    double rss = tss;
    if (rss_trace) rss_trace->assign(1, rss);
    while (static_cast<int>(terms.size()) + 1 < cap) {
        double best_gain = 0.0;
        int best_var = -1;
        double best_knot = 0.0;
        for (Eigen::Index v = 0; v < p; ++v) {
            const Eigen::VectorXd xv = x.col(v);
            const Eigen::VectorXd proj = q.leftCols(m).transpose() * xv;
            const Eigen::VectorXd xperp = xv - q.leftCols(m) * proj;
            const double xx = xperp.squaredNorm();
            const double rx = r.dot(xv);
            const double centered = (xv.array() - xv.mean()).matrix().squaredNorm();
            const bool x_in_span = xx <= 1e-10 * std::max(centered, 1e-300);

            double cnt = 0, sx = 0, sxx = 0, sr = 0, srx = 0, sxp = 0, sxpx = 0;
            sq.assign(static_cast<std::size_t>(m), 0.0);
            sqx.assign(static_cast<std::size_t>(m), 0.0);
            const auto& o = order[static_cast<std::size_t>(v)];
            std::size_t i = 0;
            while (i < o.size()) {
                const double c = x(o[i], v);
                if (i > 0) {
                    const double hh = sxx - 2.0 * c * sx + c * c * cnt;
                    const double rh = srx - c * sr;
                    double aa = 0.0;
                    for (Eigen::Index j = 0; j < m; ++j) {
                        const double a = sqx[j] - c * sq[j];
                        aa += a * a;
                    }
                    const double hp = hh - aa;
                    if (hp > 1e-9 * hh) {
                        double gain;
                        if (x_in_span) {
                            gain = rh * rh / hp;
                        } else {
                            const double xh = sxpx - c * sxp;
                            const double det = xx * hp - xh * xh;
                            gain = det > 1e-9 * xx * hp ? (hp * rx * rx - 2.0 * xh * rx * rh + xx * rh * rh) / det
                                                        : rx * rx / xx;
                        }
                        if (gain > best_gain) {
                            best_gain = gain;
                            best_var = static_cast<int>(v);
                            best_knot = c;
                        }
                    }
                }
                for (; i < o.size() && x(o[i], v) == c; ++i) {
                    const Eigen::Index row = o[i];
                    const double xi = x(row, v), ri = r(row), pi = xperp(row);
                    cnt += 1.0;
                    sx += xi;
                    sxx += xi * xi;
                    sr += ri;
                    srx += ri * xi;
                    sxp += pi;
                    sxpx += pi * xi;
                    const double* qrow = q.data() + row * cap;
                    for (Eigen::Index j = 0; j < m; ++j) {
                        sq[j] += qrow[j];
                        sqx[j] += qrow[j] * xi;
                    }
                }
            }
        }
        if (best_var < 0 || best_gain / tss < opt.threshold) break;
        bool added = false;
        for (int sign : {1, -1}) {
            if (static_cast<int>(terms.size()) + 1 >= cap) break;
            const HingeTerm term{best_var, best_knot, sign};
            Eigen::VectorXd col(n);
            for (Eigen::Index i = 0; i < n; ++i) col(i) = hinge(x(i, best_var), term);
            if (append(col)) {
                terms.push_back(term);
                added = true;
            }
        }
        if (!added) break;
        rss = r.squaredNorm();
        if (rss_trace) rss_trace->push_back(rss);
        if (rss / tss < 1e-3) break;
    }
    return terms;
}

MarsBasis mars_backward(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<HingeTerm> terms) {
    MarsBasis out;
    out.terms = std::move(terms);
    const int t = static_cast<int>(out.terms.size());
    out.subsets.resize(static_cast<std::size_t>(t + 1));
    if (t == 0) return out;
    const GramSolver solver(term_columns(x, out.terms), y);
    std::vector<int> current(static_cast<std::size_t>(t));
    std::iota(current.begin(), current.end(), 0);
    out.subsets[static_cast<std::size_t>(t)] = current;
    while (!current.empty()) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t drop = 0;
        for (std::size_t a = 0; a < current.size(); ++a) {
            std::vector<int> trial = current;
            trial.erase(trial.begin() + static_cast<std::ptrdiff_t>(a));
            const double rss = solver.rss(trial);
            if (rss < best) {
                best = rss;
                drop = a;
            }
        }
        current.erase(current.begin() + static_cast<std::ptrdiff_t>(drop));
        out.subsets[current.size()] = current;
    }
    return out;
}

// Intercept and coefficients for the terms listed in `subset`.
void mars_coefficients(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const MarsBasis& basis,
                       const std::vector<int>& subset, double& intercept, Eigen::VectorXd& coef) {
    std::vector<HingeTerm> kept;
    for (int k : subset) kept.push_back(basis.terms[static_cast<std::size_t>(k)]);
    if (kept.empty()) {
        intercept = y.mean();
        coef.resize(0);
        return;
    }
    const Eigen::MatrixXd cols = term_columns(x, kept);
    const GramSolver solver(cols, y);
    std::vector<int> all(kept.size());
    std::iota(all.begin(), all.end(), 0);
    bool ridged = false;
    solver.unscale(all, solver.solve(all, ridged), coef, intercept);
}

Eigen::VectorXd mars_eval(const Eigen::MatrixXd& x, const std::vector<HingeTerm>& terms, double intercept,
                          const Eigen::VectorXd& coef) {
    Eigen::VectorXd out = Eigen::VectorXd::Constant(x.rows(), intercept);
    for (std::size_t k = 0; k < terms.size(); ++k) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            out(i) += coef(static_cast<Eigen::Index>(k)) * hinge(x(i, terms[k].var), terms[k]);
        }
    }
    return out;
}

// ---------------------------------------------------------------- random forest

struct Binned {
    std::vector<std::vector<double>> thresholds;
    /// Column-major bin indices: bins[j * n + i].
    std::vector<std::uint16_t> bins;
    Eigen::Index n = 0;
};

Binned bin_features(const Eigen::MatrixXd& x, int max_bins) {
    Binned b;
    b.n = x.rows();
    const Eigen::Index p = x.cols();
    const int limit = std::clamp(max_bins, 2, 65535);
    b.thresholds.resize(static_cast<std::size_t>(p));
    b.bins.resize(static_cast<std::size_t>(p * b.n));
    std::vector<double> sorted(static_cast<std::size_t>(b.n));
    for (Eigen::Index j = 0; j < p; ++j) {
        for (Eigen::Index i = 0; i < b.n; ++i) sorted[static_cast<std::size_t>(i)] = x(i, j);
        std::sort(sorted.begin(), sorted.end());
        std::vector<double> unique = sorted;
        unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
        auto& thr = b.thresholds[static_cast<std::size_t>(j)];
        if (static_cast<int>(unique.size()) <= limit) {
            for (std::size_t u = 0; u + 1 < unique.size(); ++u) thr.push_back(0.5 * (unique[u] + unique[u + 1]));
        } else {
            for (int q = 1; q < limit; ++q) {
                const double v = sorted[static_cast<std::size_t>(q) * sorted.size() / static_cast<std::size_t>(limit)];
                auto next = std::upper_bound(unique.begin(), unique.end(), v);
                if (next == unique.end()) break;
                const double t = 0.5 * (v + *next);
                if (thr.empty() || t > thr.back()) thr.push_back(t);
            }
        }
        for (Eigen::Index i = 0; i < b.n; ++i) {
            const auto bin = std::lower_bound(thr.begin(), thr.end(), x(i, j)) - thr.begin();
            b.bins[static_cast<std::size_t>(j * b.n + i)] = static_cast<std::uint16_t>(bin);
        }
    }
    return b;
}

struct GrownTree {
    Tree tree;
    std::vector<char> inbag;
};

GrownTree grow_tree(const Binned& binned, const Eigen::VectorXd& y, int mtry, int nodesize, std::uint64_t seed) {
    const Eigen::Index n = binned.n;
    const int p = static_cast<int>(binned.thresholds.size());
    Rng rng(seed);
    GrownTree out;
    out.inbag.assign(static_cast<std::size_t>(n), 0);
    std::vector<Eigen::Index> sample(static_cast<std::size_t>(n));
    std::uniform_int_distribution<Eigen::Index> draw(0, n - 1);
    for (auto& s : sample) {
        s = draw(rng);
        out.inbag[static_cast<std::size_t>(s)] = 1;
    }

    std::size_t max_bins = 1;
    for (const auto& t : binned.thresholds) max_bins = std::max(max_bins, t.size() + 1);
    std::vector<double> hsum(max_bins);
    std::vector<double> hcnt(max_bins);
    std::vector<int> features(static_cast<std::size_t>(p));
    std::iota(features.begin(), features.end(), 0);

    struct Pending {
        int node;
        std::size_t begin, end;
    };
    out.tree.emplace_back();
    std::vector<Pending> stack{{0, 0, sample.size()}};
    while (!stack.empty()) {
        const Pending cur = stack.back();
        stack.pop_back();
        const std::size_t count = cur.end - cur.begin;
        double total = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t s = cur.begin; s < cur.end; ++s) {
            const double v = y(sample[s]);
            total += v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        out.tree[static_cast<std::size_t>(cur.node)].value = total / static_cast<double>(count);
        if (count <= static_cast<std::size_t>(nodesize) || hi == lo) continue;

        const double parent = total * total / static_cast<double>(count);
        double best_score = parent + 1e-12 * std::abs(parent);
        int best_var = -1;
        std::size_t best_bin = 0;
        for (int t = 0; t < mtry; ++t) {
            std::uniform_int_distribution<int> pick(t, p - 1);
            std::swap(features[static_cast<std::size_t>(t)], features[static_cast<std::size_t>(pick(rng))]);
            const int j = features[static_cast<std::size_t>(t)];
            const std::size_t nb = binned.thresholds[static_cast<std::size_t>(j)].size() + 1;
            if (nb < 2) continue;
            std::fill(hsum.begin(), hsum.begin() + static_cast<std::ptrdiff_t>(nb), 0.0);
            std::fill(hcnt.begin(), hcnt.begin() + static_cast<std::ptrdiff_t>(nb), 0.0);
            const std::uint16_t* col = binned.bins.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(n);
            for (std::size_t s = cur.begin; s < cur.end; ++s) {
                const std::uint16_t b = col[sample[s]];
                hsum[b] += y(sample[s]);
                hcnt[b] += 1.0;
            }
            double sl = 0.0, nl = 0.0;
            for (std::size_t b = 0; b + 1 < nb; ++b) {
                sl += hsum[b];
                nl += hcnt[b];
                if (nl == 0.0) continue;
                const double nr = static_cast<double>(count) - nl;
                if (nr == 0.0) break;
                const double sr = total - sl;
                const double score = sl * sl / nl + sr * sr / nr;
                if (score > best_score) {
                    best_score = score;
                    best_var = j;
                    best_bin = b;
                }
            }
        }
        if (best_var < 0) continue;

        const std::uint16_t* col = binned.bins.data() + static_cast<std::size_t>(best_var) * static_cast<std::size_t>(n);
        const auto mid = std::partition(sample.begin() + static_cast<std::ptrdiff_t>(cur.begin),
                                        sample.begin() + static_cast<std::ptrdiff_t>(cur.end),
                                        [&](Eigen::Index s) { return col[s] <= best_bin; });
        const auto split = static_cast<std::size_t>(mid - sample.begin());
        const int left = static_cast<int>(out.tree.size());
        out.tree.emplace_back();
        out.tree.emplace_back();
        TreeNode& node = out.tree[static_cast<std::size_t>(cur.node)];
        node.var = best_var;
        node.threshold = binned.thresholds[static_cast<std::size_t>(best_var)][best_bin];
        node.left = left;
        node.right = left + 1;
        stack.push_back({left + 1, split, cur.end});
        stack.push_back({left, cur.begin, split});
    }
    return out;
}

double forest_predict(const std::vector<Tree>& trees, const double* row, Eigen::Index stride) {
    double sum = 0.0;
    for (const auto& t : trees) sum += tree_predict(t, row, stride);
    return sum / static_cast<double>(trees.size());
}

std::vector<std::string> selected_names(const TrainedModel& m) {
    std::vector<std::string> out;
    for (int j : m.selected) {
        out.push_back(j < static_cast<int>(m.feature_names.size()) ? m.feature_names[static_cast<std::size_t>(j)]
                                                                    : "x" + std::to_string(j));
    }
    return out;
}

std::vector<std::string> default_names(const DesignMatrix& data) {
    if (!data.names.empty()) return data.names;
    std::vector<std::string> out;
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) out.push_back("x" + std::to_string(j + 1));
    return out;
}

} // namespace

std::string_view code(Family family) {
    for (const auto& [f, name] : kFamilies) {
        if (f == family) return name;
    }
    return "unknown";
}

std::optional<Family> parse_family(std::string_view text) {
    for (const auto& [f, name] : kFamilies) {
        if (name == text) return f;
    }
    return std::nullopt;
}

bool is_implemented(Family family) {
    return family == Family::Glm || family == Family::Mars || family == Family::Rf;
}

const std::vector<Family>& implemented_families() {
    static const std::vector<Family> all = {Family::Glm, Family::Mars, Family::Rf};
    return all;
}

// ---------------------------------------------------------------- encoding

Encoder::Encoder(const std::vector<wrangle::DemandRecord>& reference, const EncodingOptions& options)
    : options_(options) {
    if (reference.empty()) throw ContractViolation("encoder needs at least one reference row");
    for (const auto& r : reference) frequency_[r.agency_id] += 1.0;
    for (auto& [agency, f] : frequency_) f /= static_cast<double>(reference.size());
    if (options.trend) {
        base_year_ = std::numeric_limits<int>::max();
        for (const auto& r : reference) {
            if (r.year <= 0) throw ContractViolation("trend encoding needs rows with a known year");
            base_year_ = std::min(base_year_, r.year);
        }
    }
    if (options.cluster_features) {
        if (!reference.front().cluster) throw ContractViolation("cluster features requested but rows carry none");
        k_ = static_cast<int>(reference.front().cluster->shares.size());
        if (k_ < 1) throw ContractViolation("cluster features have no shares");
    }
    for (int d = 2; d <= 7; ++d) names_.push_back("dow_" + std::to_string(d));
    names_.push_back("woy");
    names_.push_back("doy");
    for (int m = 2; m <= 12; ++m) names_.push_back("moy_" + std::to_string(m));
    if (options.agency == AgencyEncoding::Frequency) names_.push_back("agency_freq");
    if (options.trend) names_.push_back("trend");
    for (int k = 2; k <= k_; ++k) names_.push_back("share_" + std::to_string(k));
    for (int k = 2; k <= k_; ++k) names_.push_back("modal_" + std::to_string(k));
}

DesignMatrix Encoder::transform(const std::vector<wrangle::DemandRecord>& rows) const {
    DesignMatrix out;
    out.names = names_;
    const auto n = static_cast<Eigen::Index>(rows.size());
    out.x.setZero(n, static_cast<Eigen::Index>(names_.size()));
    out.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        Eigen::Index c = 0;
        if (r.dow > 1) out.x(i, c + r.dow - 2) = 1.0;
        c += 6;
        out.x(i, c++) = r.woy;
        out.x(i, c++) = r.doy;
        if (r.moy > 1) out.x(i, c + r.moy - 2) = 1.0;
        c += 11;
        if (options_.agency == AgencyEncoding::Frequency) {
            const auto it = frequency_.find(r.agency_id);
            out.x(i, c++) = it == frequency_.end() ? 0.0 : it->second;
        }
        if (options_.trend) {
            if (r.year <= 0) throw ContractViolation("trend encoding needs rows with a known year");
            out.x(i, c++) = r.year - base_year_;
        }
        if (k_ > 0) {
            if (!r.cluster || static_cast<int>(r.cluster->shares.size()) != k_) {
                throw ContractViolation("row for agency '" + r.agency_id + "' lacks matching cluster features");
            }
            for (int k = 2; k <= k_; ++k) out.x(i, c++) = r.cluster->shares[static_cast<std::size_t>(k - 1)];
            for (int k = 2; k <= k_; ++k) out.x(i, c++) = r.cluster->modal_cluster == k ? 1.0 : 0.0;
        }
        out.y(i) = static_cast<double>(r.demand);
    }
    return out;
}

DesignMatrix build_design(const std::vector<wrangle::DemandRecord>& rows, const EncodingOptions& options) {
    return Encoder(rows, options).transform(rows);
}

// ---------------------------------------------------------------- fitting

double hinge(double x, const HingeTerm& term) {
    const double v = term.sign > 0 ? x - term.knot : term.knot - x;
    return v > 0.0 ? v : 0.0;
}

double tree_predict(const Tree& tree, const double* row, Eigen::Index stride) {
    int node = 0;
    while (tree[static_cast<std::size_t>(node)].var >= 0) {
        const TreeNode& t = tree[static_cast<std::size_t>(node)];
        node = row[t.var * stride] <= t.threshold ? t.left : t.right;
    }
    return tree[static_cast<std::size_t>(node)].value;
}

int TrainedModel::effective_parameters() const {
    switch (family) {
    case Family::Glm: return static_cast<int>(selected.size());
    case Family::Mars: return static_cast<int>(terms.size());
    default: return static_cast<int>(feature_names.size());
    }
}

double aic(double rss, Eigen::Index n, int parameters, double penalty) {
    const double nn = static_cast<double>(n);
    return nn * std::log(std::max(rss, 1e-300) / nn) + penalty * parameters;
}

TrainedModel fit_glm(const DesignMatrix& data, const GlmOptions& options) {
    check_data(data);
    const Eigen::Index n = data.x.rows();
    const GramSolver solver(data.x, data.y);
    std::vector<int> active;
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) {
        if (solver.usable(j)) active.push_back(static_cast<int>(j));
    }
    auto score = [&](const std::vector<int>& s) {
        return aic(solver.rss(s), n, static_cast<int>(s.size()) + 1, options.aic_penalty);
    };
    double current = score(active);
    while (options.stepwise && !active.empty()) {
        double best = current;
        int drop = -1;
        for (std::size_t a = 0; a < active.size(); ++a) {
            std::vector<int> trial = active;
            trial.erase(trial.begin() + static_cast<std::ptrdiff_t>(a));
            const double s = score(trial);
            if (s < best) {
                best = s;
                drop = static_cast<int>(a);
            }
        }
        if (drop < 0) break;
        active.erase(active.begin() + drop);
        current = best;
    }

    TrainedModel m;
    m.family = Family::Glm;
    m.feature_names = default_names(data);
    m.selected = active;
    bool ridged = false;
    const Eigen::VectorXd b = solver.solve(active, ridged);
    m.ridge = ridged;
    solver.unscale(active, b, m.coefficients, m.intercept);
    if (!ridged && !active.empty()) {
        // Final coefficients from a QR solve for accuracy.
        Eigen::MatrixXd xs(n, static_cast<Eigen::Index>(active.size()) + 1);
        xs.col(0).setOnes();
        for (std::size_t a = 0; a < active.size(); ++a) xs.col(static_cast<Eigen::Index>(a) + 1) = data.x.col(active[a]);
        const Eigen::VectorXd beta = xs.colPivHouseholderQr().solve(data.y);
        if (beta.allFinite()) {
            m.intercept = beta(0);
            for (std::size_t a = 0; a < active.size(); ++a) m.coefficients(active[a]) = beta(static_cast<Eigen::Index>(a) + 1);
        }
    }
    m.tuning = {{"selected", selected_names(m)}, {"aic", current}, {"ridge", ridged}, {"aic_penalty", options.aic_penalty}};
    return m;
}

TrainedModel fit_mars(const DesignMatrix& data, const MarsOptions& options, std::uint64_t seed) {
    check_data(data);
    if (options.nfold < 2 || options.ncross < 1) throw ContractViolation("MARS needs nfold >= 2 and ncross >= 1");
    if (options.max_terms < 1) throw ContractViolation("MARS max_terms must be at least 1");
    const Eigen::Index n = data.x.rows();
    if (n < 10 * options.nfold) throw ContractViolation("MARS cross-validation needs at least 10 * nfold rows");

    const std::size_t sizes = static_cast<std::size_t>(options.max_terms);
    std::vector<double> rsq_sum(sizes, 0.0);
    int folds_used = 0;
    for (int rep = 0; rep < options.ncross; ++rep) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(rep)));
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int f = 0; f < options.nfold; ++f) {
            std::vector<Eigen::Index> train, test;
            for (std::size_t pos = 0; pos < perm.size(); ++pos) {
                (static_cast<int>(pos % static_cast<std::size_t>(options.nfold)) == f ? test : train).push_back(perm[pos]);
            }
            std::sort(train.begin(), train.end());
            std::sort(test.begin(), test.end());
            const DesignMatrix tr = take_rows(data, train), te = take_rows(data, test);
            const double tss = (te.y.array() - te.y.mean()).matrix().squaredNorm();
            if (tss <= 0.0) continue;
            const MarsBasis basis = mars_backward(tr.x, tr.y, mars_forward(tr.x, tr.y, options));
            double last = 0.0;
            for (std::size_t s = 0; s < sizes; ++s) {
                if (s < basis.subsets.size()) {
                    double intercept = 0.0;
                    Eigen::VectorXd coef;
                    mars_coefficients(tr.x, tr.y, basis, basis.subsets[s], intercept, coef);
                    std::vector<HingeTerm> kept;
                    for (int k : basis.subsets[s]) kept.push_back(basis.terms[static_cast<std::size_t>(k)]);
                    const Eigen::VectorXd resid = te.y - mars_eval(te.x, kept, intercept, coef);
                    last = 1.0 - resid.squaredNorm() / tss;
                }
                rsq_sum[s] += last;
            }
            ++folds_used;
        }
    }

    std::vector<double> trace;
    const MarsBasis basis = mars_backward(data.x, data.y, mars_forward(data.x, data.y, options, &trace));
    std::size_t chosen = 0;
    for (std::size_t s = 1; s < basis.subsets.size(); ++s) {
        if (rsq_sum[s] > rsq_sum[chosen]) chosen = s;
    }
    TrainedModel m;
    m.family = Family::Mars;
    m.feature_names = default_names(data);
    Eigen::VectorXd coef;
    mars_coefficients(data.x, data.y, basis, basis.subsets[chosen], m.intercept, coef);
    for (int k : basis.subsets[chosen]) m.terms.push_back(basis.terms[static_cast<std::size_t>(k)]);
    m.term_coefficients = coef;
    m.tuning = {{"forward_terms", basis.terms.size()},
                {"terms", m.terms.size()},
                {"cv_rsq", folds_used > 0 ? rsq_sum[chosen] / folds_used : 0.0},
                {"nfold", options.nfold},
                {"ncross", options.ncross},
                {"max_terms", options.max_terms},
                {"forward_rss", trace}};
    return m;
}

TrainedModel fit_rf(const DesignMatrix& data, const RfOptions& options, std::uint64_t seed, unsigned threads) {
    check_data(data);
    std::vector<int> grid = options.ntree_grid;
    if (grid.empty()) throw ContractViolation("random forest needs a non-empty ntree grid");
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    if (grid.front() < 1) throw ContractViolation("ntree values must be positive");
    if (options.nodesize < 1) throw ContractViolation("nodesize must be at least 1");
    const Eigen::Index n = data.x.rows();
    const int p = static_cast<int>(data.x.cols());
    if (p < 1) throw ContractViolation("random forest needs at least one feature");
    const int mtry = options.mtry > 0 ? std::min(options.mtry, p) : std::max(1, p / 3);

    const Binned binned = bin_features(data.x, options.max_bins);
    const int ntree = grid.back();
    std::vector<GrownTree> grown(static_cast<std::size_t>(ntree));
    parallel_for(grown.size(), threads, [&](std::size_t t) {
        grown[t] = grow_tree(binned, data.y, mtry, options.nodesize, derive_seed(seed, static_cast<std::uint64_t>(t)));
    });

    std::vector<double> oob_sum(static_cast<std::size_t>(n), 0.0), oob_cnt(static_cast<std::size_t>(n), 0.0);
    nlohmann::json oob = nlohmann::json::object();
    std::vector<double> oob_mse;
    std::size_t next = 0;
    for (int t = 0; t < ntree; ++t) {
        const auto& g = grown[static_cast<std::size_t>(t)];
        for (Eigen::Index i = 0; i < n; ++i) {
            if (g.inbag[static_cast<std::size_t>(i)]) continue;
            oob_sum[static_cast<std::size_t>(i)] += tree_predict(g.tree, data.x.data() + i, n);
            oob_cnt[static_cast<std::size_t>(i)] += 1.0;
        }
        if (t + 1 == grid[next]) {
            double sse = 0.0, cnt = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (oob_cnt[static_cast<std::size_t>(i)] == 0.0) continue;
                const double e = oob_sum[static_cast<std::size_t>(i)] / oob_cnt[static_cast<std::size_t>(i)] - data.y(i);
                sse += e * e;
                cnt += 1.0;
            }
            const double mse = cnt > 0.0 ? sse / cnt : std::numeric_limits<double>::quiet_NaN();
            oob_mse.push_back(mse);
            oob[std::to_string(grid[next])] = cnt > 0.0 ? nlohmann::json(mse) : nlohmann::json(nullptr);
            ++next;
        }
    }
    std::size_t best = grid.size() - 1;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        if (std::isfinite(oob_mse[g]) && (!std::isfinite(oob_mse[best]) || oob_mse[g] < oob_mse[best])) best = g;
    }

    TrainedModel m;
    m.family = Family::Rf;
    m.feature_names = default_names(data);
    m.trees.reserve(static_cast<std::size_t>(grid[best]));
    for (int t = 0; t < grid[best]; ++t) m.trees.push_back(std::move(grown[static_cast<std::size_t>(t)].tree));
    m.tuning = {{"ntree", grid[best]},         {"mtry", mtry},       {"nodesize", options.nodesize},
                {"max_bins", options.max_bins}, {"oob_mse", oob}};
    return m;
}

TrainedModel fit(Family family, const DesignMatrix& data, const FitOptions& options) {
    switch (family) {
    case Family::Glm: return fit_glm(data, options.glm);
    case Family::Mars: return fit_mars(data, options.mars, options.seed);
    case Family::Rf: return fit_rf(data, options.rf, options.seed, options.threads);
    default: throw ContractViolation("model family '" + std::string(code(family)) + "' is not implemented");
    }
}

Eigen::VectorXd predict(const TrainedModel& model, const Eigen::MatrixXd& x) {
    if (x.cols() != static_cast<Eigen::Index>(model.feature_names.size())) {
        throw ContractViolation("prediction matrix has " + std::to_string(x.cols()) + " columns, model expects " +
                                std::to_string(model.feature_names.size()));
    }
    switch (model.family) {
    case Family::Glm: return (x * model.coefficients).array() + model.intercept;
    case Family::Mars: return mars_eval(x, model.terms, model.intercept, model.term_coefficients);
    case Family::Rf: {
        if (model.trees.empty()) throw ContractViolation("random forest has no trees");
        Eigen::VectorXd out(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = forest_predict(model.trees, x.data() + i, x.rows());
        return out;
    }
    default: throw ContractViolation("model family '" + std::string(code(model.family)) + "' is not implemented");
    }
}

// ---------------------------------------------------------------- evaluation

double adjusted_r2(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted, int p) {
    const Eigen::Index n = y.size();
    if (fitted.size() != n) throw ContractViolation("adjusted R^2: length mismatch");
    if (n <= p + 1) throw ContractViolation("adjusted R^2 needs N > p + 1");
    const double tss = (y.array() - y.mean()).matrix().squaredNorm();
    if (tss <= 0.0) throw ContractViolation("adjusted R^2 is undefined for constant y");
    const double r2 = 1.0 - (y - fitted).squaredNorm() / tss;
    return 1.0 - (1.0 - r2) * static_cast<double>(n - 1) / static_cast<double>(n - p - 1);
}

Metrics metrics(const Eigen::VectorXd& residuals) {
    if (residuals.size() == 0) throw ContractViolation("metrics of an empty residual vector");
    const double n = static_cast<double>(residuals.size());
    return {std::sqrt(residuals.squaredNorm() / n), residuals.cwiseAbs().sum() / n};
}

Metrics pooled_metrics(const std::vector<Eigen::VectorXd>& residuals_per_split) {
    if (residuals_per_split.empty()) throw ContractViolation("pooled metrics need at least one split");
    double mse = 0.0, mae = 0.0;
    for (const auto& r : residuals_per_split) {
        const Metrics m = metrics(r);
        mse += m.rmse * m.rmse;
        mae += m.mae;
    }
    const double k = static_cast<double>(residuals_per_split.size());
    return {std::sqrt(mse / k), mae / k};
}

std::vector<std::vector<Eigen::Index>> holdout_splits(const Eigen::VectorXd& y, const HoldoutOptions& options) {
    const Eigen::Index n = y.size();
    if (options.splits < 1) throw ContractViolation("holdout needs at least one split");
    if (!(options.test_fraction > 0.0 && options.test_fraction < 1.0)) {
        throw ContractViolation("holdout fraction must lie in (0, 1)");
    }
    const auto n_test = static_cast<Eigen::Index>(std::llround(options.test_fraction * static_cast<double>(n)));
    if (n_test < 10 || n - n_test < 2) throw ContractViolation("too few rows for the requested holdout split");
    Rng rng(derive_seed(options.seed, "holdout"));
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    std::vector<std::vector<Eigen::Index>> out;
    for (int s = 0; s < options.splits; ++s) {
        for (int attempt = 0;; ++attempt) {
            std::iota(perm.begin(), perm.end(), Eigen::Index{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (std::size_t i = static_cast<std::size_t>(n_test); i < perm.size(); ++i) {
                lo = std::min(lo, y(perm[i]));
                hi = std::max(hi, y(perm[i]));
            }
            if (hi > lo) break;
            if (attempt >= options.max_resamples) {
                throw NumericalFailure("every holdout draw left a constant training response");
            }
        }
        std::vector<Eigen::Index> test(perm.begin(), perm.begin() + n_test);
        std::sort(test.begin(), test.end());
        out.push_back(std::move(test));
    }
    return out;
}

EvalReport holdout_eval(Family family, const DesignMatrix& data, const FitOptions& options,
                        const HoldoutOptions& holdout) {
    check_data(data);
    EvalReport report;
    report.family = family;
    report.splits = holdout.splits;
    report.test_fraction = holdout.test_fraction;
    report.seed = holdout.seed;
    for (const auto& name : data.names) report.cluster_features |= name.rfind("share_", 0) == 0;

    const auto splits = holdout_splits(data.y, holdout);
    std::vector<Eigen::VectorXd> model_resid(splits.size()), null_resid(splits.size());
    parallel_for(splits.size(), options.threads, [&](std::size_t s) {
        std::vector<char> is_test(static_cast<std::size_t>(data.y.size()), 0);
        for (Eigen::Index i : splits[s]) is_test[static_cast<std::size_t>(i)] = 1;
        std::vector<Eigen::Index> train;
        for (Eigen::Index i = 0; i < data.y.size(); ++i) {
            if (!is_test[static_cast<std::size_t>(i)]) train.push_back(i);
        }
        const DesignMatrix tr = take_rows(data, train), te = take_rows(data, splits[s]);
        FitOptions local = options;
        local.seed = derive_seed(options.seed, static_cast<std::uint64_t>(s));
        local.threads = 1;
        model_resid[s] = te.y - predict(fit(family, tr, local), te.x);
        null_resid[s] = te.y.array() - tr.y.mean();
    });
    report.out_of_sample = pooled_metrics(model_resid);
    report.null_out_of_sample = pooled_metrics(null_resid);

    FitOptions full_opts = options;
    full_opts.seed = derive_seed(options.seed, "full");
    const TrainedModel full = fit(family, data, full_opts);
    const Eigen::VectorXd fitted = predict(full, data.x);
    report.in_sample = metrics(data.y - fitted);
    report.tuning = full.tuning;
    const int p = full.effective_parameters();
    const double tss = (data.y.array() - data.y.mean()).matrix().squaredNorm();
    report.r2_adj = data.y.size() > p + 1 && tss > 0.0 ? adjusted_r2(data.y, fitted, p)
                                                       : std::numeric_limits<double>::quiet_NaN();
    auto improvement = [](double null, double model) { return null > 0.0 ? 100.0 * (null - model) / null : 0.0; };
    report.imp_rmse_pct = improvement(report.null_out_of_sample.rmse, report.out_of_sample.rmse);
    report.imp_mae_pct = improvement(report.null_out_of_sample.mae, report.out_of_sample.mae);
    return report;
}

nlohmann::json to_json(const EvalReport& r) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"family", code(r.family)},
            {"cluster_features", r.cluster_features},
            {"tuning", r.tuning},
            {"r2_adj", num(r.r2_adj)},
            {"in_sample", {{"rmse", r.in_sample.rmse}, {"mae", r.in_sample.mae}}},
            {"out_of_sample", {{"rmse", r.out_of_sample.rmse}, {"mae", r.out_of_sample.mae}}},
            {"null_out_of_sample", {{"rmse", r.null_out_of_sample.rmse}, {"mae", r.null_out_of_sample.mae}}},
            {"imp_rmse_pct", r.imp_rmse_pct},
            {"imp_mae_pct", r.imp_mae_pct},
            {"splits", r.splits},
            {"test_fraction", r.test_fraction},
            {"seed", r.seed}};
}

void write_comparison_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
    csv::Writer w(out);
    w.row({"family", "r2_adj", "in_rmse", "in_mae", "out_rmse", "out_mae", "imp_rmse_pct", "imp_mae_pct"});
    for (const auto& r : reports) {
        w.field(std::string(code(r.family)) + (r.cluster_features ? "+clusters" : ""))
            .field(r.r2_adj)
            .field(r.in_sample.rmse)
            .field(r.in_sample.mae)
            .field(r.out_of_sample.rmse)
            .field(r.out_of_sample.mae)
            .field(r.imp_rmse_pct)
            .field(r.imp_mae_pct)
            .end_row();
    }
}

nlohmann::json to_json(const TrainedModel& m) {
    nlohmann::json j = {{"family", code(m.family)}, {"features", m.feature_names}, {"intercept", m.intercept},
                        {"tuning", m.tuning}};
    switch (m.family) {
    case Family::Glm:
        j["coefficients"] = std::vector<double>(m.coefficients.data(), m.coefficients.data() + m.coefficients.size());
        j["selected"] = m.selected;
        j["ridge"] = m.ridge;
        break;
    case Family::Mars: {
        nlohmann::json terms = nlohmann::json::array();
        for (std::size_t k = 0; k < m.terms.size(); ++k) {
            terms.push_back({{"var", m.terms[k].var},
                             {"knot", m.terms[k].knot},
                             {"sign", m.terms[k].sign},
                             {"coefficient", m.term_coefficients(static_cast<Eigen::Index>(k))}});
        }
        j["terms"] = terms;
        break;
    }
    case Family::Rf: {
        nlohmann::json trees = nlohmann::json::array();
        for (const auto& t : m.trees) {
            nlohmann::json nodes = nlohmann::json::array();
            for (const auto& node : t) nodes.push_back({node.var, node.threshold, node.left, node.right, node.value});
            trees.push_back(std::move(nodes));
        }
        j["trees"] = std::move(trees);
        break;
    }
    default: break;
    }
    return j;
}

TrainedModel model_from_json(const nlohmann::json& j) {
    try {
        TrainedModel m;
        const auto family = parse_family(j.at("family").get<std::string>());
        if (!family || !is_implemented(*family)) throw ContractViolation("model JSON has an unsupported family");
        m.family = *family;
        m.feature_names = j.at("features").get<std::vector<std::string>>();
        m.intercept = j.at("intercept").get<double>();
        m.tuning = j.value("tuning", nlohmann::json::object());
        const auto p = static_cast<int>(m.feature_names.size());
        auto check_var = [p](int v) {
            if (v < 0 || v >= p) throw ContractViolation("model JSON references feature " + std::to_string(v));
        };
        if (m.family == Family::Glm) {
            const auto c = j.at("coefficients").get<std::vector<double>>();
            if (static_cast<int>(c.size()) != p) throw ContractViolation("model JSON coefficient count mismatch");
            m.coefficients = Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
            m.selected = j.at("selected").get<std::vector<int>>();
            m.ridge = j.value("ridge", false);
        } else if (m.family == Family::Mars) {
            const auto& terms = j.at("terms");
            m.term_coefficients.resize(static_cast<Eigen::Index>(terms.size()));
            for (std::size_t k = 0; k < terms.size(); ++k) {
                HingeTerm t{terms[k].at("var").get<int>(), terms[k].at("knot").get<double>(), terms[k].at("sign").get<int>()};
                check_var(t.var);
                m.terms.push_back(t);
                m.term_coefficients(static_cast<Eigen::Index>(k)) = terms[k].at("coefficient").get<double>();
            }
        } else {
            for (const auto& tree : j.at("trees")) {
                Tree t;
                for (const auto& node : tree) {
                    t.push_back({node.at(0).get<int>(), node.at(1).get<double>(), node.at(2).get<int>(),
                                 node.at(3).get<int>(), node.at(4).get<double>()});
                }
                const int size = static_cast<int>(t.size());
                for (const auto& node : t) {
                    if (node.var < 0) continue;
                    check_var(node.var);
                    if (node.left <= 0 || node.left >= size || node.right <= 0 || node.right >= size) {
                        throw ContractViolation("model JSON tree has an invalid child index");
                    }
                }
                if (t.empty()) throw ContractViolation("model JSON has an empty tree");
                m.trees.push_back(std::move(t));
            }
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("malformed model JSON: ") + e.what());
    }
}

} // namespace fdemand::predict
