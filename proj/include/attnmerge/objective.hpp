#pragma once

#include <map>
#include <mutex>
#include <string>

#include "attnmerge/recipe.hpp"

namespace attnmerge {

class Evaluator;

struct TaskAccuracies {
    double acc_tp = 0.0;
    double acc_tr = 0.0;
    // Exact counts when the evaluator reports ratios of a finite task set
    // (-1 = unavailable). Kept so small search sets stay audit-exact.
    long tp_correct = -1, tp_total = -1;
    long tr_correct = -1, tr_total = -1;
};

struct ObjectiveConfig {
    double lambda = 1.0;  // penalty weight on TP degradation
    double base_tp = 0.0; // TP accuracy of the unmerged M, measured once
};

/// max(0, base_tp - acc_tp): how much temporal perception dropped below the
/// unmerged model; never negative.
double tp_degradation(const ObjectiveConfig& cfg, double acc_tp);

/// acc_tr - lambda * tp_degradation.
double objective_score(const ObjectiveConfig& cfg, const TaskAccuracies& a);

/// Total order used wherever equal objective values need a winner: higher F,
/// then fewer N-dominated layers, then lexicographically smaller gate string,
/// then smaller alpha.
bool recipe_better(double f_a, const DiscreteRecipe& a, double f_b, const DiscreteRecipe& b);

struct CacheEntry {
    TaskAccuracies acc;
    double objective = 0.0;
};

/// Results of already-evaluated discrete recipes, keyed by (alpha quantized
/// to 0.01, gate bitstring). A hit never reaches the evaluator. Entries can
/// stream to a TSV file so interrupted searches resume for free.
class EvalCache {
  public:
    using Key = std::pair<int, std::string>;

    static int quantize_alpha(double alpha);
    static Key make_key(const DiscreteRecipe& r);

    bool lookup(const Key& key, CacheEntry& out) const;
    void insert(const Key& key, const CacheEntry& entry);
    std::size_t size() const;

    /// Every insert is appended (and flushed) to this file from now on.
    void persist_to(const std::string& path);
    /// Merges records from a cache file; lines with a gate string of the
    /// wrong length raise a dimension mismatch. Missing file = empty cache.
    void load(const std::string& path, int expected_layers);

  private:
    mutable std::mutex mu_;
    std::map<Key, CacheEntry> entries_;
    std::string persist_path_;
};

/// One search's evaluation bookkeeping: cache in front of an evaluator, an
/// invocation budget, and the objective configuration. evaluate() is the
/// fitness the optimizer sees.
class ObjectiveEngine {
  public:
    ObjectiveEngine(Evaluator& evaluator, const Checkpoint& m, const Checkpoint& n, EvalCache& cache,
                    const ObjectiveConfig& cfg, long budget);

    /// Cache hit: stored result, no evaluator call, budget untouched.
    /// Miss: applies the recipe, evaluates TP and TR, stores the result and
    /// counts one invocation. Throws BudgetExhausted when a miss would pass
    /// the cap.
    CacheEntry evaluate(const DiscreteRecipe& r);

    long invocations() const { return invocations_; }
    long budget() const { return budget_; }
    const ObjectiveConfig& config() const { return cfg_; }

  private:
    Evaluator& evaluator_;
    const Checkpoint& m_;
    const Checkpoint& n_;
    EvalCache& cache_;
    ObjectiveConfig cfg_;
    long budget_;
    long invocations_ = 0;
    std::mutex mu_;
};

}  // namespace attnmerge
