#include "attnmerge/cmaes.hpp"

#include <cmath>

#include "attnmerge/errors.hpp"

namespace attnmerge {

namespace {

constexpr double kEigenFloor = 1e-12;

void refresh_eigen(CmaState& s) {
    s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
    if (!s.cov.allFinite()) throw data_error("CMA-ES covariance became non-finite; search aborted");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(s.cov);
    if (solver.info() != Eigen::Success)
        throw data_error("CMA-ES eigendecomposition failed; search aborted");
    Eigen::VectorXd vals = solver.eigenvalues();
    bool floored = false;
    for (Eigen::Index i = 0; i < vals.size(); ++i) {
        if (vals[i] < kEigenFloor) {
            vals[i] = kEigenFloor;
            floored = true;
        }
    }
    s.basis = solver.eigenvectors();
    s.scales = vals.cwiseSqrt();
    if (floored) s.cov = s.basis * vals.asDiagonal() * s.basis.transpose();
    s.evals_since_eigen = 0;
}

}  // namespace

int default_pop_size(int dim) {
    if (dim < 1) throw usage_error("dimension must be >= 1");
    return 4 + static_cast<int>(std::floor(3.0 * std::log(static_cast<double>(dim))));
}

CmaState CmaState::init(const CmaConfig& cfg) {
    if (cfg.dim < 1) throw usage_error("dimension must be >= 1");
    CmaState s;
    s.dim = cfg.dim;
    s.pop_size = cfg.pop_size > 0 ? cfg.pop_size : default_pop_size(cfg.dim);
    if (s.pop_size < 2) throw usage_error("population size must be >= 2");
    s.parent_count = cfg.parent_count > 0 ? cfg.parent_count : s.pop_size / 2;
    if (s.parent_count < 1 || s.parent_count > s.pop_size)
        throw usage_error("parent count must lie in [1, pop_size]");

    s.weights.resize(s.parent_count);
    for (int i = 0; i < s.parent_count; ++i)
        s.weights[i] = std::log(s.parent_count + 0.5) - std::log(static_cast<double>(i + 1));
    s.weights /= s.weights.sum();
    s.mu_eff = 1.0 / s.weights.squaredNorm();

    const double n = static_cast<double>(s.dim);
    s.c_sigma = (s.mu_eff + 2.0) / (n + s.mu_eff + 5.0);
    s.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mu_eff - 1.0) / (n + 1.0)) - 1.0) + s.c_sigma;
    s.c_cov = (4.0 + s.mu_eff / n) / (n + 4.0 + 2.0 * s.mu_eff / n);
    s.c_one = 2.0 / ((n + 1.3) * (n + 1.3) + s.mu_eff);
    s.c_mu = std::min(1.0 - s.c_one,
                      2.0 * (s.mu_eff - 2.0 + 1.0 / s.mu_eff) / ((n + 2.0) * (n + 2.0) + s.mu_eff));
    s.expected_norm = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

    s.mean = cfg.init_mean.size() > 0 ? cfg.init_mean : Eigen::VectorXd::Constant(cfg.dim, 0.5);
    if (s.mean.size() != cfg.dim) throw usage_error("initial mean has the wrong dimension");
    s.mean = s.mean.cwiseMax(0.0).cwiseMin(1.0);
    s.sigma = cfg.sigma0;
    if (!(s.sigma > 0.0)) throw usage_error("sigma0 must be positive");
    s.cov = Eigen::MatrixXd::Identity(cfg.dim, cfg.dim);
    s.path_sigma = Eigen::VectorXd::Zero(cfg.dim);
    s.path_cov = Eigen::VectorXd::Zero(cfg.dim);
    s.gauss = NormalSampler(splitmix64(cfg.seed ^ 0x9e3779b97f4a7c15ULL));
    refresh_eigen(s);
    return s;
}

std::vector<Eigen::VectorXd> ask(CmaState& s) {
    // Lazy refresh: O(dim^3) decomposition amortized over updates.
    const double lazy_gap = 1.0 / ((s.c_one + s.c_mu) * s.dim * 10.0);
    if (s.evals_since_eigen > static_cast<long>(lazy_gap)) refresh_eigen(s);
    std::vector<Eigen::VectorXd> out;
    out.reserve(static_cast<std::size_t>(s.pop_size));
    for (int i = 0; i < s.pop_size; ++i) {
        Eigen::VectorXd z(s.dim);
        for (int j = 0; j < s.dim; ++j) z[j] = s.gauss.next();
        Eigen::VectorXd x = s.mean + s.sigma * (s.basis * (s.scales.asDiagonal() * z));
        out.push_back(x.cwiseMax(0.0).cwiseMin(1.0));
    }
    return out;
}

void tell(CmaState& s, const std::vector<std::pair<Eigen::VectorXd, double>>& ranked) {
    if (static_cast<int>(ranked.size()) != s.pop_size)
        throw usage_error("tell() needs exactly pop_size ranked candidates");
    for (const auto& [x, f] : ranked) {
        if (x.size() != s.dim) throw usage_error("ranked candidate has the wrong dimension");
        if (!std::isfinite(f)) throw data_error("non-finite fitness value passed to tell()");
    }
    for (std::size_t i = 1; i < ranked.size(); ++i)
        if (ranked[i - 1].second < ranked[i].second)
            throw usage_error("tell() expects candidates sorted by fitness, best first");

    const Eigen::VectorXd old_mean = s.mean;
    Eigen::VectorXd new_mean = Eigen::VectorXd::Zero(s.dim);
    for (int i = 0; i < s.parent_count; ++i)
        new_mean += s.weights[i] * ranked[static_cast<std::size_t>(i)].first;
    s.mean = new_mean;

    const Eigen::VectorXd shift = (s.mean - old_mean) / s.sigma;

    // C^(-1/2) * shift through the cached decomposition.
    const Eigen::VectorXd whitened =
        s.basis * (s.scales.cwiseInverse().asDiagonal() * (s.basis.transpose() * shift));
    s.path_sigma = (1.0 - s.c_sigma) * s.path_sigma +
                   std::sqrt(s.c_sigma * (2.0 - s.c_sigma) * s.mu_eff) * whitened;

    const double ps_norm = s.path_sigma.norm();
    const double denom =
        std::sqrt(1.0 - std::pow(1.0 - s.c_sigma, 2.0 * static_cast<double>(s.generation + 1)));
    const bool hsig =
        ps_norm / denom < (1.4 + 2.0 / (s.dim + 1.0)) * s.expected_norm;

    s.path_cov = (1.0 - s.c_cov) * s.path_cov;
    if (hsig) s.path_cov += std::sqrt(s.c_cov * (2.0 - s.c_cov) * s.mu_eff) * shift;

    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(s.dim, s.dim);
    for (int i = 0; i < s.parent_count; ++i) {
        const Eigen::VectorXd y = (ranked[static_cast<std::size_t>(i)].first - old_mean) / s.sigma;
        rank_mu.noalias() += s.weights[i] * (y * y.transpose());
    }
    const double hsig_correction = hsig ? 0.0 : s.c_cov * (2.0 - s.c_cov);
    s.cov = (1.0 - s.c_one - s.c_mu) * s.cov +
            s.c_one * (s.path_cov * s.path_cov.transpose() + hsig_correction * s.cov) +
            s.c_mu * rank_mu;
    s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();

    s.sigma *= std::exp((s.c_sigma / s.d_sigma) * (ps_norm / s.expected_norm - 1.0));
    ++s.generation;
    ++s.evals_since_eigen;
}

RunResult cma_run(const CmaConfig& cfg, const std::function<double(const Eigen::VectorXd&)>& fitness,
                  const std::function<void(const GenerationStats&)>& on_generation) {
    CmaState state = CmaState::init(cfg);
    RunResult result;

    const auto consider = [&](const Eigen::VectorXd& x, double f) {
        if (f > result.best_f) {
            result.best_f = f;
            result.best = x;
        }
    };

    // The starting point always gets one evaluation so even a zero budget
    // reports a well-defined best.
    try {
        const Eigen::VectorXd start = state.mean.cwiseMax(0.0).cwiseMin(1.0);
        const double f = fitness(start);
        result.evals = 1;
        consider(start, f);
    } catch (const std::exception& e) {
        result.reason = StopReason::fitness_error;
        result.error = e.what();
        return result;
    }

    int stagnant = 0;
    double stagnation_ref = result.best_f;
    while (result.evals < cfg.max_evals) {
        std::vector<Eigen::VectorXd> candidates;
        try {
            candidates = ask(state);
        } catch (const std::exception& e) {
            result.reason = StopReason::fitness_error;
            result.error = e.what();
            return result;
        }
        std::vector<std::pair<Eigen::VectorXd, double>> scored;
        scored.reserve(candidates.size());
        bool partial = false;
        for (const auto& x : candidates) {
            if (result.evals >= cfg.max_evals) {
                partial = true;
                break;
            }
            double f;
            try {
                f = fitness(x);
            } catch (const std::exception& e) {
                result.reason = StopReason::fitness_error;
                result.error = e.what();
                return result;
            }
            ++result.evals;
            consider(x, f);
            scored.emplace_back(x, f);
        }
        if (partial) {
            result.reason = StopReason::max_evals;
            break;
        }

        std::stable_sort(scored.begin(), scored.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        tell(state, scored);
        ++result.generations;

        double mean_f = 0;
        for (const auto& [_, f] : scored) mean_f += f;
        mean_f /= static_cast<double>(scored.size());
        const GenerationStats stats{state.generation, result.best_f, mean_f, state.sigma,
                                    result.evals};
        result.trace.push_back(stats);
        if (on_generation) on_generation(stats);

        if (result.best_f > stagnation_ref + cfg.stagnation_tol) {
            stagnation_ref = result.best_f;
            stagnant = 0;
        } else if (++stagnant >= cfg.stagnation_generations) {
            result.reason = StopReason::stagnation;
            return result;
        }
    }
    result.reason = StopReason::max_evals;
    return result;
}

}  // namespace attnmerge
