#include "fdemand/gmm.hpp"

#include "fdemand/error.hpp"
#include "fdemand/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace fdemand::gmm {

namespace {

constexpr std::array<CovarianceModel, 14> kAllModels = {
    CovarianceModel::EII, CovarianceModel::VII, CovarianceModel::EEI, CovarianceModel::VEI,
    CovarianceModel::EVI, CovarianceModel::VVI, CovarianceModel::EEE, CovarianceModel::EVE,
    CovarianceModel::VEE, CovarianceModel::VVE, CovarianceModel::EEV, CovarianceModel::VEV,
    CovarianceModel::EVV, CovarianceModel::VVV};

constexpr std::array<CovarianceModel, 6> kImplemented = {
    CovarianceModel::EII, CovarianceModel::EEI, CovarianceModel::EVI,
    CovarianceModel::EEE, CovarianceModel::EEV, CovarianceModel::VVV};

constexpr std::array<std::string_view, 14> kCodes = {"EII", "VII", "EEI", "VEI", "EVI", "VVI", "EEE",
                                                     "EVE", "VEE", "VVE", "EEV", "VEV", "EVV", "VVV"};

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Per-component quantities reused for every observation: the inverse Cholesky
// factor (lower triangular, row-major) and log(alpha) + log normalizer.
struct Prepared {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> inv_chol;
    Eigen::VectorXd mean;
    Eigen::VectorXd shift;
    double log_norm = 0.0;
    double log_weight = 0.0;
};

Prepared prepare(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma, int index) {
    const Eigen::Index d = mu.size();
    if (sigma.rows() != d || sigma.cols() != d) {
        throw ContractViolation("covariance dimension does not match mean");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) {
        throw NumericalFailure("covariance of component " + std::to_string(index) +
                               " is not positive definite");
    }
    const Eigen::MatrixXd L = llt.matrixL();
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
        if (!(L(i, i) > 0.0) || !std::isfinite(L(i, i))) {
            throw NumericalFailure("covariance of component " + std::to_string(index) + " is singular");
        }
        log_det += 2.0 * std::log(L(i, i));
    }
    Prepared p;
    p.inv_chol = L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(d, d));
    p.mean = mu;
    p.shift = p.inv_chol * mu;
    p.log_norm = -0.5 * (static_cast<double>(d) * kLog2Pi + log_det);
    return p;
}

std::vector<Prepared> prepare_all(std::span<const GaussianComponent> comps) {
    std::vector<Prepared> out;
    out.reserve(comps.size());
    for (std::size_t k = 0; k < comps.size(); ++k) {
        Prepared p = prepare(comps[k].mean, comps[k].covariance, static_cast<int>(k) + 1);
        if (!(comps[k].weight > 0.0)) {
            throw NumericalFailure("component " + std::to_string(k + 1) + " has nonpositive weight");
        }
        p.log_weight = std::log(comps[k].weight);
        out.push_back(std::move(p));
    }
    return out;
}

double log_density_row(const Eigen::VectorXd& y, const Prepared& p) {
    const Eigen::VectorXd z = p.inv_chol * (y - p.mean);
    return p.log_norm - 0.5 * z.squaredNorm();
}

// Row-block size for the E-step; keeps the per-block work arrays cache resident.
constexpr Eigen::Index kBlock = 256;

// Scratch for one block: the block's columns, Mahalanobis terms and the b x K
// log-density table (row-major).
struct BlockScratch {
    std::vector<double> cols, maha, z, logp;
};

double expectation_block(const RowMatrix& Y, Eigen::Index j0, Eigen::Index b, const std::vector<Prepared>& prep,
                         BlockScratch& w, RowMatrix* resp) {
    const Eigen::Index d = Y.cols();
    const std::size_t K = prep.size();
    for (Eigen::Index r = 0; r < b; ++r) {
        const double* y = Y.data() + (j0 + r) * d;
        for (Eigen::Index c = 0; c < d; ++c) w.cols[c * b + r] = y[c];
    }
    for (std::size_t k = 0; k < K; ++k) {
        const Prepared& p = prep[k];
        double* __restrict maha = w.maha.data();
        double* __restrict z = w.z.data();
        std::fill(maha, maha + b, 0.0);
        for (Eigen::Index i = 0; i < d; ++i) {
            const double* L = p.inv_chol.data() + i * d;
            const double s0 = -p.shift(i);
            std::fill(z, z + b, s0);
            for (Eigen::Index c = 0; c <= i; ++c) {
                const double l = L[c];
                const double* __restrict x = w.cols.data() + c * b;
                for (Eigen::Index r = 0; r < b; ++r) z[r] += l * x[r];
            }
            for (Eigen::Index r = 0; r < b; ++r) maha[r] += z[r] * z[r];
        }
        const double offset = p.log_weight + p.log_norm;
        for (Eigen::Index r = 0; r < b; ++r) w.logp[r * K + k] = offset - 0.5 * maha[r];
    }
    double total = 0.0;
    for (Eigen::Index r = 0; r < b; ++r) {
        double* t = w.logp.data() + r * K;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) best = std::max(best, t[k]);
        if (!std::isfinite(best)) {
            throw NumericalFailure("observation " + std::to_string(j0 + r + 1) +
                                   " has zero density under every component");
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            t[k] = std::exp(t[k] - best);
            sum += t[k];
        }
        total += best + std::log(sum);
        if (resp) {
            double* out = resp->data() + (j0 + r) * static_cast<Eigen::Index>(K);
            for (std::size_t k = 0; k < K; ++k) out[k] = t[k] / sum;
        }
    }
    return total;
}

// Fills responsibilities (if requested) and returns the log-likelihood.
double expectation(const RowMatrix& Y, std::span<const GaussianComponent> comps, RowMatrix* resp) {
    if (comps.empty()) throw ContractViolation("mixture needs at least one component");
    const std::vector<Prepared> prep = prepare_all(comps);
    if (comps.front().mean.size() != Y.cols()) throw ContractViolation("component dimension does not match data");
    if (resp) resp->resize(Y.rows(), static_cast<Eigen::Index>(comps.size()));
    const auto rows = static_cast<std::size_t>(std::min(kBlock, Y.rows()));
    const auto d = static_cast<std::size_t>(Y.cols());
    BlockScratch scratch{std::vector<double>(rows * d), std::vector<double>(rows),
                         std::vector<double>(rows), std::vector<double>(rows * comps.size())};
    double total = 0.0;
    for (Eigen::Index j0 = 0; j0 < Y.rows(); j0 += kBlock) {
        total += expectation_block(Y, j0, std::min(kBlock, Y.rows() - j0), prep, scratch, resp);
    }
    if (!std::isfinite(total)) throw NumericalFailure("log-likelihood is not finite");
    return total;
}

// Weighted means and centered scatter matrices of every component, accumulated
// over row blocks held column-major.
void weighted_moments(const RowMatrix& Y, const RowMatrix& resp, const Eigen::VectorXd& mass,
                      std::vector<Eigen::VectorXd>& means, std::vector<Eigen::MatrixXd>& scatter) {
    const Eigen::Index n = Y.rows();
    const Eigen::Index d = Y.cols();
    const Eigen::Index K = resp.cols();
    Eigen::MatrixXd yb(kBlock, d), gb(kBlock, K), x(kBlock, d), wx(kBlock, d);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(d, K);
    for (Eigen::Index j0 = 0; j0 < n; j0 += kBlock) {
        const Eigen::Index b = std::min(kBlock, n - j0);
        yb.topRows(b) = Y.middleRows(j0, b);
        gb.topRows(b) = resp.middleRows(j0, b);
        for (Eigen::Index k = 0; k < K; ++k) {
            for (Eigen::Index c = 0; c < d; ++c) sums(c, k) += yb.col(c).head(b).dot(gb.col(k).head(b));
        }
    }
    means.assign(static_cast<std::size_t>(K), Eigen::VectorXd());
    scatter.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(d, d));
    for (Eigen::Index k = 0; k < K; ++k) means[k] = sums.col(k) / mass(k);
    for (Eigen::Index j0 = 0; j0 < n; j0 += kBlock) {
        const Eigen::Index b = std::min(kBlock, n - j0);
        yb.topRows(b) = Y.middleRows(j0, b);
        gb.topRows(b) = resp.middleRows(j0, b);
        for (Eigen::Index k = 0; k < K; ++k) {
            const double* __restrict g = gb.col(k).data();
            for (Eigen::Index c = 0; c < d; ++c) {
                const double m = means[k](c);
                const double* __restrict src = yb.col(c).data();
                double* __restrict xc = x.col(c).data();
                double* __restrict wc = wx.col(c).data();
                for (Eigen::Index r = 0; r < b; ++r) {
                    xc[r] = src[r] - m;
                    wc[r] = g[r] * xc[r];
                }
            }
            Eigen::MatrixXd& S = scatter[k];
            for (Eigen::Index r = 0; r < d; ++r) {
                for (Eigen::Index c = r; c < d; ++c) S(r, c) += x.col(r).head(b).dot(wx.col(c).head(b));
            }
        }
    }
    for (auto& S : scatter) S.triangularView<Eigen::StrictlyLower>() = S.transpose();
}

// Sorted (ascending) eigen-decomposition of a symmetric matrix.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigen_sym(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw NumericalFailure("eigendecomposition failed");
    return es;
}

RowMatrix one_hot(const std::vector<int>& labels, int k) {
    RowMatrix r = RowMatrix::Zero(static_cast<Eigen::Index>(labels.size()), k);
    for (std::size_t i = 0; i < labels.size(); ++i) r(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    return r;
}

double squared_distance(const double* a, const double* b, Eigen::Index d) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
        const double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

// k-means++ seeding followed by Lloyd refinement. Returns 0-based labels.
std::vector<int> kmeans_labels(const RowMatrix& Y, int k, int iterations, Rng& rng) {
    const Eigen::Index n = Y.rows();
    const Eigen::Index d = Y.cols();
    RowMatrix centers(k, d);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    centers.row(0) = Y.row(pick(rng));
    std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            dist[j] = std::min(dist[j], squared_distance(Y.data() + j * d, centers.data() + (c - 1) * d, d));
            total += dist[j];
        }
        Eigen::Index chosen = pick(rng);
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng);
            for (Eigen::Index j = 0; j < n; ++j) {
                target -= dist[j];
                if (target <= 0.0) {
                    chosen = j;
                    break;
                }
            }
        }
        centers.row(c) = Y.row(chosen);
    }

    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    for (int it = 0; it <= iterations; ++it) {
        bool changed = false;
        for (Eigen::Index j = 0; j < n; ++j) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dd = squared_distance(Y.data() + j * d, centers.data() + c * d, d);
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            if (labels[j] != best || it == 0) changed = changed || labels[j] != best;
            labels[j] = best;
        }
        if (it == iterations || (!changed && it > 0)) break;
        RowMatrix sums = RowMatrix::Zero(k, d);
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index j = 0; j < n; ++j) {
            sums.row(labels[j]) += Y.row(j);
            ++counts[labels[j]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) centers.row(c) = sums.row(c) / counts[c];
        }
    }
    return labels;
}

Eigen::MatrixXd clip_eigenvalues(const Eigen::MatrixXd& s, double floor) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
    const Eigen::MatrixXd& v = eig.eigenvectors();
    const Eigen::MatrixXd out = v * eig.eigenvalues().cwiseMax(floor).asDiagonal() * v.transpose();
    return 0.5 * (out + out.transpose());
}

// True when every eigenvalue of s is above the floor.
bool above_floor(const Eigen::MatrixXd& s, double floor) {
    const Eigen::LLT<Eigen::MatrixXd> llt(s - floor * Eigen::MatrixXd::Identity(s.rows(), s.cols()));
    return llt.info() == Eigen::Success;
}

// M-step under the eigenvalue floor. For EII, EEI, EEE and VVV, clipping the
// unconstrained update at the floor is the constrained maximizer. EVI and EEV
// redo the step with a ridge on every scatter, doubled until the floor holds,
// and report the step as inexact.
std::vector<GaussianComponent> regularized_m_step(const FeatureMatrix& data, const RowMatrix& resp,
                                                  const EmOptions& opt, double floor, bool* inexact = nullptr) {
    if (inexact) *inexact = false;
    if (floor <= 0.0) return m_step(data, resp, opt.model, 0.0, opt.min_component_mass);
    const bool shared = opt.model == CovarianceModel::EII || opt.model == CovarianceModel::EEI ||
                        opt.model == CovarianceModel::EEE;
    const auto below_floor = [&](const std::vector<GaussianComponent>& cs) {
        for (std::size_t k = 0; k < (shared ? std::size_t{1} : cs.size()); ++k) {
            if (!above_floor(cs[k].covariance, floor)) return true;
        }
        return false;
    };
    const auto ridged = [&] {
        if (inexact) *inexact = true;
        std::vector<GaussianComponent> cs;
        double ridge = floor;
        for (int i = 0; i < 64; ++i, ridge *= 2.0) {
            cs = m_step(data, resp, opt.model, ridge, opt.min_component_mass);
            if (!below_floor(cs)) break;
        }
        return cs;
    };
    std::vector<GaussianComponent> comps;
    try {
        comps = m_step(data, resp, opt.model, 0.0, opt.min_component_mass);
    } catch (const DegenerateComponent&) {
        throw;
    } catch (const NumericalFailure&) {
        return ridged();
    }
    if (!below_floor(comps)) return comps;

    switch (opt.model) {
    case CovarianceModel::EII:
    case CovarianceModel::EEI: {
        Eigen::MatrixXd shared = comps[0].covariance;
        for (Eigen::Index i = 0; i < shared.rows(); ++i) shared(i, i) = std::max(shared(i, i), floor);
        for (auto& c : comps) c.covariance = shared;
        return comps;
    }
    case CovarianceModel::EEE: {
        const Eigen::MatrixXd shared = clip_eigenvalues(comps[0].covariance, floor);
        for (auto& c : comps) c.covariance = shared;
        return comps;
    }
    case CovarianceModel::VVV:
        for (auto& c : comps) c.covariance = clip_eigenvalues(c.covariance, floor);
        return comps;
    default:
        return ridged();
    }
}

std::vector<GaussianComponent> initialize(const FeatureMatrix& data, const EmOptions& opt, double ridge, Rng& rng) {
    const Eigen::Index n = data.rows();
    RowMatrix resp;
    if (opt.init == InitStrategy::RandomResponsibilities) {
        resp.resize(n, opt.k);
        std::exponential_distribution<double> e(1.0);
        for (Eigen::Index j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < opt.k; ++k) {
                resp(j, k) = e(rng);
                s += resp(j, k);
            }
            resp.row(j) /= s;
        }
    } else {
        resp = one_hot(kmeans_labels(data.values(), opt.k, opt.kmeans_iterations, rng), opt.k);
    }
    return regularized_m_step(data, resp, opt, ridge);
}

} // namespace

std::string_view code(CovarianceModel model) noexcept {
    return kCodes[static_cast<std::size_t>(model)];
}

std::optional<CovarianceModel> parse_model(std::string_view text) noexcept {
    for (std::size_t i = 0; i < kCodes.size(); ++i) {
        if (kCodes[i] == text) return kAllModels[i];
    }
    return std::nullopt;
}

bool is_implemented(CovarianceModel model) noexcept {
    return std::find(kImplemented.begin(), kImplemented.end(), model) != kImplemented.end();
}

int model_order(CovarianceModel model) noexcept {
    return static_cast<int>(model);
}

std::span<const CovarianceModel> all_models() noexcept {
    return kAllModels;
}

std::span<const CovarianceModel> implemented_models() noexcept {
    return kImplemented;
}

FeatureMatrix::FeatureMatrix(RowMatrix values, std::vector<std::string> names)
    : values_(std::move(values)), names_(std::move(names)) {
    if (values_.rows() < 1 || values_.cols() < 1) {
        throw ContractViolation("feature matrix needs at least one row and one column");
    }
    if (names_.empty()) {
        for (Eigen::Index c = 0; c < values_.cols(); ++c) names_.push_back("x" + std::to_string(c + 1));
    }
    if (static_cast<Eigen::Index>(names_.size()) != values_.cols()) {
        throw ContractViolation("feature name count does not match column count");
    }
    if (!values_.allFinite()) throw ContractViolation("feature matrix contains non-finite values");
}

FeatureMatrix FeatureMatrix::standardized() const {
    const Eigen::Index n = rows();
    const Eigen::Index d = cols();
    Standardization st;
    RowMatrix z(n, d);
    for (Eigen::Index c = 0; c < d; ++c) {
        const double mean = values_.col(c).mean();
        const double var = (values_.col(c).array() - mean).square().sum() / static_cast<double>(n);
        const double sd = std::sqrt(var);
        if (!(sd > 0.0)) throw ContractViolation("feature '" + names_[c] + "' is constant");
        z.col(c) = (values_.col(c).array() - mean) / sd;
        st.mean.push_back(mean);
        st.sd.push_back(sd);
    }
    FeatureMatrix out(std::move(z), names_);
    out.standardization_ = std::move(st);
    return out;
}

double FeatureMatrix::mean_variance() const {
    const double n = static_cast<double>(rows());
    double total = 0.0;
    for (Eigen::Index c = 0; c < cols(); ++c) {
        const double mean = values_.col(c).mean();
        total += (values_.col(c).array() - mean).square().sum() / n;
    }
    return total / static_cast<double>(cols());
}

double log_component_density(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    if (y.size() != mu.size()) throw ContractViolation("observation and mean differ in dimension");
    return log_density_row(y, prepare(mu, sigma, 1));
}

double component_density(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    return std::exp(log_component_density(y, mu, sigma));
}

RowMatrix e_step(const FeatureMatrix& data, std::span<const GaussianComponent> components) {
    RowMatrix resp;
    expectation(data.values(), components, &resp);
    return resp;
}

double log_likelihood(const FeatureMatrix& data, std::span<const GaussianComponent> components) {
    return expectation(data.values(), components, nullptr);
}

std::vector<GaussianComponent> m_step(const FeatureMatrix& data, const RowMatrix& resp,
                                      CovarianceModel model, double ridge, double min_mass) {
    if (!is_implemented(model)) {
        throw ContractViolation("covariance model " + std::string(code(model)) + " is not implemented");
    }
    const RowMatrix& Y = data.values();
    const Eigen::Index n = Y.rows();
    const Eigen::Index d = Y.cols();
    const Eigen::Index K = resp.cols();
    if (resp.rows() != n || K < 1) throw ContractViolation("responsibility matrix has the wrong shape");

    const Eigen::VectorXd mass = resp.colwise().sum().transpose();
    for (Eigen::Index k = 0; k < K; ++k) {
        if (!(mass(k) >= min_mass) || !(mass(k) > 0.0)) {
            throw DegenerateComponent(static_cast<int>(k) + 1, mass(k));
        }
    }
    const double total = mass.sum();

    std::vector<GaussianComponent> comps(static_cast<std::size_t>(K));
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> scatter;
    weighted_moments(Y, resp, mass, means, scatter);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
    for (Eigen::Index k = 0; k < K; ++k) {
        auto& c = comps[k];
        c.weight = mass(k) / total;
        c.mean = std::move(means[k]);
        scatter[k] += mass(k) * ridge * I;
    }

    const double dd = static_cast<double>(d);
    switch (model) {
    case CovarianceModel::EII: {
        double tr = 0.0;
        for (const auto& W : scatter) tr += W.trace();
        const double lambda = tr / (total * dd);
        for (auto& c : comps) c.covariance = lambda * I;
        break;
    }
    case CovarianceModel::EEI: {
        Eigen::VectorXd diag = Eigen::VectorXd::Zero(d);
        for (const auto& W : scatter) diag += W.diagonal();
        const Eigen::MatrixXd sigma = (diag / total).asDiagonal();
        for (auto& c : comps) c.covariance = sigma;
        break;
    }
    case CovarianceModel::EVI: {
        double lambda_sum = 0.0;
        std::vector<Eigen::VectorXd> shapes;
        for (const auto& W : scatter) {
            const Eigen::VectorXd diag = W.diagonal();
            const double scale = std::exp(diag.array().log().sum() / dd);
            if (!(scale > 0.0) || !std::isfinite(scale)) throw NumericalFailure("EVI scatter is singular");
            shapes.push_back(diag / scale);
            lambda_sum += scale;
        }
        const double lambda = lambda_sum / total;
        for (std::size_t k = 0; k < comps.size(); ++k) {
            comps[k].covariance = (lambda * shapes[k]).asDiagonal();
        }
        break;
    }
    case CovarianceModel::EEE: {
        Eigen::MatrixXd W = Eigen::MatrixXd::Zero(d, d);
        for (const auto& S : scatter) W += S;
        const Eigen::MatrixXd sigma = W / total;
        for (auto& c : comps) c.covariance = sigma;
        break;
    }
    case CovarianceModel::EEV: {
        // Shared (volume x shape) eigenvalues pooled over components; each component
        // keeps its own eigenvectors. Eigenvalues are paired in ascending order.
        Eigen::VectorXd pooled = Eigen::VectorXd::Zero(d);
        std::vector<Eigen::MatrixXd> vectors;
        for (const auto& W : scatter) {
            auto es = eigen_sym(W);
            pooled += es.eigenvalues();
            vectors.push_back(es.eigenvectors());
        }
        const Eigen::VectorXd shared = pooled / total;
        for (std::size_t k = 0; k < comps.size(); ++k) {
            const Eigen::MatrixXd& D = vectors[k];
            Eigen::MatrixXd sigma = D * shared.asDiagonal() * D.transpose();
            comps[k].covariance = 0.5 * (sigma + sigma.transpose());
        }
        break;
    }
    case CovarianceModel::VVV: {
        for (std::size_t k = 0; k < comps.size(); ++k) comps[k].covariance = scatter[k] / mass(k);
        break;
    }
    default:
        throw ContractViolation("covariance model " + std::string(code(model)) + " is not implemented");
    }
    return comps;
}

namespace {

struct Run {
    std::vector<GaussianComponent> components;
    RowMatrix responsibilities;
    std::vector<double> trace;
    int iterations = 0;
    bool converged = false;
};

// Runs up to `steps` further EM iterations (M-step then E-step).
void advance(const FeatureMatrix& data, Run& run, const EmOptions& opt, double ridge, int steps) {
    for (int s = 0; s < steps && !run.converged; ++s) {
        bool inexact = false;
        auto next = regularized_m_step(data, run.responsibilities, opt, ridge, &inexact);
        RowMatrix resp;
        const double current = expectation(data.values(), next, &resp);
        const double previous = run.trace.back();
        if (inexact && current < previous) {
            run.converged = true;
            break;
        }
        run.components = std::move(next);
        run.responsibilities = std::move(resp);
        run.trace.push_back(current);
        ++run.iterations;
        if (std::abs(current - previous) / (std::abs(current) + 1.0) < opt.tol) run.converged = true;
    }
}

Run start_run(const FeatureMatrix& data, const EmOptions& opt, double ridge, Rng& rng) {
    Run run;
    run.components = initialize(data, opt, ridge, rng);
    run.trace.push_back(expectation(data.values(), run.components, &run.responsibilities));
    return run;
}

} // namespace

MixtureFit fit_em(const FeatureMatrix& data, const EmOptions& opt) {
    if (opt.k < 1) throw ContractViolation("K must be at least 1");
    if (data.rows() <= opt.k) throw ContractViolation("need more observations than components");
    if (!is_implemented(opt.model)) {
        throw ContractViolation("covariance model " + std::string(code(opt.model)) + " is not implemented");
    }
    if (opt.max_iter < 1 || !(opt.tol > 0.0)) throw ContractViolation("invalid EM stopping rule");
    if (opt.candidates < 1 || opt.candidate_iterations < 0) throw ContractViolation("invalid candidate settings");

    const double ridge = opt.ridge_factor * data.mean_variance();
    std::optional<NumericalFailure> last_failure;
    int last_component = 0;
    double last_mass = 0.0;
    bool last_degenerate = false;
    auto record = [&](const NumericalFailure& e) {
        if (const auto* dc = dynamic_cast<const DegenerateComponent*>(&e)) {
            last_degenerate = true;
            last_component = dc->component();
            last_mass = dc->mass();
        } else {
            last_degenerate = false;
        }
        last_failure.emplace(e.what());
    };

    for (int attempt = 0; attempt <= opt.max_restarts; ++attempt) {
        const std::uint64_t seed = attempt == 0 ? opt.seed : derive_seed(opt.seed, static_cast<std::uint64_t>(attempt));
        Rng rng(seed);
        try {
            std::optional<Run> best;
            if (opt.candidates == 1) {
                best = start_run(data, opt, ridge, rng);
            } else {
                const Eigen::Index n = data.rows();
                const bool subsample = opt.candidate_sample > opt.k && opt.candidate_sample < n;
                std::optional<std::vector<GaussianComponent>> chosen;
                double chosen_ll = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < opt.candidates; ++c) {
                    try {
                        FeatureMatrix sample_data;
                        const FeatureMatrix* target = &data;
                        if (subsample) {
                            std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
                            std::iota(idx.begin(), idx.end(), Eigen::Index{0});
                            for (int i = 0; i < opt.candidate_sample; ++i) {
                                std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
                                std::swap(idx[i], idx[pick(rng)]);
                            }
                            std::sort(idx.begin(), idx.begin() + opt.candidate_sample);
                            RowMatrix rows(opt.candidate_sample, data.cols());
                            for (int i = 0; i < opt.candidate_sample; ++i) rows.row(i) = data.values().row(idx[i]);
                            sample_data = FeatureMatrix(std::move(rows), data.names());
                            target = &sample_data;
                        }
                        Run run = start_run(*target, opt, ridge, rng);
                        advance(*target, run, opt, ridge, opt.candidate_iterations);
                        if (run.trace.back() > chosen_ll) {
                            chosen_ll = run.trace.back();
                            chosen = std::move(run.components);
                        }
                    } catch (const NumericalFailure& e) {
                        record(e);
                    }
                }
                if (!chosen) continue;
                Run run;
                run.components = std::move(*chosen);
                run.trace.push_back(expectation(data.values(), run.components, &run.responsibilities));
                best = std::move(run);
            }
            advance(data, *best, opt, ridge, opt.max_iter - best->iterations);

            MixtureFit fit;
            fit.model = opt.model;
            fit.seed = opt.seed;
            fit.restarts = attempt;
            fit.feature_names = data.names();
            fit.standardization = data.standardization();
            fit.components = std::move(best->components);
            fit.responsibilities = std::move(best->responsibilities);
            fit.loglik_trace = std::move(best->trace);
            fit.iterations = best->iterations;
            fit.converged = best->converged;
            return fit;
        } catch (const NumericalFailure& e) {
            record(e);
        }
    }
    if (last_degenerate) throw DegenerateComponent(last_component, last_mass, opt.max_restarts);
    throw NumericalFailure(std::string(last_failure ? last_failure->what() : "EM failed") + " after " +
                           std::to_string(opt.max_restarts) + " restarts");
}

std::vector<int> hard_assign(const RowMatrix& resp) {
    std::vector<int> labels(static_cast<std::size_t>(resp.rows()));
    for (Eigen::Index j = 0; j < resp.rows(); ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < resp.cols(); ++k) {
            if (resp(j, k) > resp(j, best)) best = k;
        }
        labels[j] = static_cast<int>(best) + 1;
    }
    return labels;
}

std::vector<int> hard_assign(const MixtureFit& fit) {
    return hard_assign(fit.responsibilities);
}

nlohmann::json to_json(const MixtureFit& fit) {
    nlohmann::json j;
    j["model"] = std::string(code(fit.model));
    j["K"] = fit.k();
    j["feature_names"] = fit.feature_names;
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : fit.components) {
        std::vector<double> cov;
        for (Eigen::Index r = 0; r < c.covariance.rows(); ++r) {
            for (Eigen::Index s = 0; s < c.covariance.cols(); ++s) cov.push_back(c.covariance(r, s));
        }
        comps.push_back({{"weight", c.weight},
                         {"mean", std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size())},
                         {"covariance", cov}});
    }
    j["components"] = comps;
    if (fit.standardization) {
        j["standardization"] = {{"mean", fit.standardization->mean}, {"sd", fit.standardization->sd}};
    } else {
        j["standardization"] = nullptr;
    }
    j["loglik_trace"] = fit.loglik_trace;
    j["converged"] = fit.converged;
    j["iterations"] = fit.iterations;
    j["seed"] = fit.seed;
    j["restarts"] = fit.restarts;
    return j;
}

} // namespace fdemand::gmm
