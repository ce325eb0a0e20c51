#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attnmerge/cmaes.hpp"
#include "attnmerge/evaluator.hpp"
#include "attnmerge/objective.hpp"
#include "attnmerge/recipe.hpp"

namespace attnmerge {

struct SearchConfig {
    std::vector<double> alpha_set{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    long budget_per_alpha = 1600;  // evaluator invocations per alpha run
    double lambda = 1.0;
    std::uint64_t seed = 0;
    int pop_size = 0;    // 0 = 4 + floor(3 ln L)
    double sigma0 = 0.3;
    bool parallel_alphas = false;
    std::string out_dir;           // empty = no files written
    std::string command_echo;      // embedded in every produced file
    std::string config_echo_json;  // full CLI config echo for the manifest
};

struct AlphaOutcome {
    double alpha = 1.0;
    RecipeRecord best;
    long invocations = 0;
    bool degenerate = false;  // alpha == 0.5: objective is gate-independent
    bool ok = false;
    std::string error;
    std::string recipe_file, trace_file;
};

struct SearchResult {
    std::vector<AlphaOutcome> per_alpha;
    RecipeRecord global_best;
    TaskAccuracies base;  // the unmerged M through the same evaluator
    long total_invocations = 0;
    double elapsed_seconds = 0.0;
    std::string manifest_path, cache_path, best_recipe_path;
};

/// Per-alpha evolutionary search: fixed alpha, CMA-ES over the continuous
/// gates, fitness = objective of the thresholded recipe through the cache.
/// The per-alpha seed is derived from cfg.seed and alpha. Stops on budget
/// exhaustion or stagnation; evaluator failures propagate.
RecipeRecord search_alpha(double alpha, const SearchConfig& cfg, const Checkpoint& m,
                          const Checkpoint& n, Evaluator& evaluator, EvalCache& cache,
                          const ObjectiveConfig& objective_cfg, long* invocations_out = nullptr,
                          const std::string& trace_path = "");

/// The full procedure: measure the base accuracies once (as the identity
/// recipe at alpha = 1, so the score lands in the shared cache), run one
/// search per alpha, pick the global best by the recipe ordering, persist
/// recipes, traces, cache and manifest under cfg.out_dir. Per-alpha failures
/// are recorded; it throws only if every alpha fails.
SearchResult search_all(const SearchConfig& cfg, const Checkpoint& m, const Checkpoint& n,
                        Evaluator& evaluator, EvalCache& cache);

/// Deterministic continuation: load the persisted cache (validating the gate
/// dimension) and rerun; every previously evaluated recipe is a cache hit, so
/// the evaluator is only consulted for genuinely new work and the final
/// result equals the uninterrupted run's.
SearchResult resume_search(const SearchConfig& cfg, const Checkpoint& m, const Checkpoint& n,
                           Evaluator& evaluator, const std::string& cache_path);

/// Manifest location for a given output directory.
std::string manifest_path_for(const std::string& out_dir);
std::string cache_path_for(const std::string& out_dir);

}  // namespace attnmerge
