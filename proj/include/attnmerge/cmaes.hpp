#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnmerge/util.hpp"

namespace attnmerge {

/// CMA-ES over the unit box [0,1]^dim, maximizing. Sampled candidates are
/// clamped into the box before evaluation and the clamped vectors feed the
/// update, so only the threshold sign downstream ever sees a boundary.
struct CmaConfig {
    int dim = 0;
    int pop_size = 0;      // 0 = 4 + floor(3 ln dim)
    int parent_count = 0;  // 0 = pop_size / 2
    Eigen::VectorXd init_mean;  // empty = 0.5 everywhere
    double sigma0 = 0.3;
    long max_evals = 1600;
    std::uint64_t seed = 0;
    // Stop when the best-ever value has not improved by more than
    // stagnation_tol for stagnation_generations consecutive generations.
    double stagnation_tol = 1e-12;
    int stagnation_generations = 30;
};

/// 4 + floor(3 ln dim); 28 -> 13, 36 -> 14, 1 -> 4.
int default_pop_size(int dim);

class CmaState {
  public:
    static CmaState init(const CmaConfig& cfg);

    // Search distribution.
    Eigen::VectorXd mean;
    double sigma = 0.3;
    Eigen::MatrixXd cov;     // symmetric positive definite
    Eigen::VectorXd path_sigma, path_cov;
    long generation = 0;

    // Strategy constants, fixed at init:
    //   weights_i ~ ln(mu+1/2) - ln(i), normalized to sum 1
    //   mu_eff    = 1 / sum weights_i^2
    //   c_sigma   = (mu_eff+2) / (dim+mu_eff+5)
    //   d_sigma   = 1 + 2 max(0, sqrt((mu_eff-1)/(dim+1)) - 1) + c_sigma
    //   c_cov     = (4+mu_eff/dim) / (dim+4+2 mu_eff/dim)
    //   c_one     = 2 / ((dim+1.3)^2 + mu_eff)
    //   c_mu      = min(1-c_one, 2 (mu_eff-2+1/mu_eff) / ((dim+2)^2 + mu_eff))
    int dim = 0;
    int pop_size = 0;
    int parent_count = 0;
    Eigen::VectorXd weights;
    double mu_eff = 0, c_sigma = 0, d_sigma = 0, c_cov = 0, c_one = 0, c_mu = 0;
    double expected_norm = 0;  // E||N(0,I)||

    // Eigendecomposition cache of cov (cov = basis * diag(scales^2) * basis^T)
    // refreshed lazily; evals_since_eigen counts tells since the last refresh.
    Eigen::MatrixXd basis;
    Eigen::VectorXd scales;
    long evals_since_eigen = 0;

    NormalSampler gauss{0};
};

/// pop_size fresh candidates, clamp(mean + sigma * B * D * z), deterministic
/// given the state. Throws on a non-finite covariance.
std::vector<Eigen::VectorXd> ask(CmaState& state);

/// Standard update from one generation ranked best-first (maximization):
/// weighted recombination of the top parent_count into the mean, cumulative
/// step-size adaptation, rank-one plus rank-mu covariance update. The
/// covariance is re-symmetrized and its eigenvalues floored at 1e-12.
void tell(CmaState& state, const std::vector<std::pair<Eigen::VectorXd, double>>& ranked);

enum class StopReason { max_evals, stagnation, fitness_error };

struct GenerationStats {
    long generation = 0;
    double best_f = 0;     // best-ever after this generation
    double mean_f = 0;     // mean fitness of the generation
    double sigma = 0;
    long evals = 0;
};

struct RunResult {
    Eigen::VectorXd best;
    double best_f = -std::numeric_limits<double>::infinity();
    long evals = 0;
    long generations = 0;
    StopReason reason = StopReason::max_evals;
    std::string error;  // set when reason == fitness_error
    std::vector<GenerationStats> trace;
};

/// ask/tell loop with best-ever tracking. The initial mean is evaluated first
/// (one evaluation), then generations run until the evaluation cap or
/// stagnation; a partial final generation evaluates only the remaining budget
/// and skips the distribution update. Exceptions from the fitness function
/// stop the run and are reported in the result with the best-so-far intact.
RunResult cma_run(const CmaConfig& cfg, const std::function<double(const Eigen::VectorXd&)>& fitness,
                  const std::function<void(const GenerationStats&)>& on_generation = {});

}  // namespace attnmerge
