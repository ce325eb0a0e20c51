#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "attnmerge/tensor_store.hpp"

namespace attnmerge {

/// Continuous per-layer gates in [0,1]^L. Out-of-range samples are clamped at
/// ingestion (clamp01), never rejected.
using GatingVector = Eigen::VectorXd;

GatingVector clamp01(const GatingVector& g);

/// Thresholded gates plus the interpolation weight. gates[l] == 1 biases
/// layer l toward the first parent (M), 0 toward the second (N).
struct DiscreteRecipe {
    std::vector<std::uint8_t> gates;
    double alpha = 1.0;

    int layer_count() const { return static_cast<int>(gates.size()); }
    std::string bitstring() const;
};

/// gates[l] = 1 iff g[l] >= 0.5.
std::vector<std::uint8_t> threshold(const GatingVector& g);
DiscreteRecipe threshold_recipe(const GatingVector& g, double alpha);

/// Directional interpolation of one layer group: with w = alpha when the gate
/// is set and 1-alpha otherwise, every element becomes w*m + (1-w)*n. The
/// blend is computed in double and rounded once to F32.
LayerParamGroup merge_layer(const LayerParamGroup& theta_m, const LayerParamGroup& theta_n,
                            bool gate, double alpha);

/// Merged checkpoint: layer groups blended per merge_layer, every other
/// tensor byte-identical to M. When all layer tensors are already F32 the
/// output reuses M's exact buffer layout; otherwise tensors are repacked and
/// non-F32 layer tensors are normalized to F32.
Checkpoint apply_recipe(const Checkpoint& m, const Checkpoint& n, const DiscreteRecipe& r);

/// Layers whose merged parameters differ from M for generic parents:
/// {l : gate == 0} at alpha == 1.0, every layer for alpha in [0.5, 1.0).
std::set<int> modified_layers(const DiscreteRecipe& r);

/// {l : gate == 0}; the layers biased toward N and the set reported as
/// "selected layers" in recipe summaries.
std::set<int> n_dominated_layers(const DiscreteRecipe& r);

DiscreteRecipe all_layer_recipe(int layer_count, double alpha);

/// Exactly k gates cleared, chosen uniformly without replacement from a
/// seeded generator; same (L, k, alpha, seed) always yields the same recipe.
DiscreteRecipe random_k_recipe(int layer_count, int k, double alpha, std::uint64_t seed);

/// A search outcome: the discrete recipe plus the scores that produced it.
/// objective == acc_tr - lambda * max(0, base_tp - acc_tp) whenever all four
/// numbers are present.
struct RecipeRecord {
    DiscreteRecipe recipe;
    std::optional<GatingVector> continuous_gates;
    double objective = std::numeric_limits<double>::quiet_NaN();
    double acc_tp = std::numeric_limits<double>::quiet_NaN();
    double acc_tr = std::numeric_limits<double>::quiet_NaN();
    double lambda = std::numeric_limits<double>::quiet_NaN();
    double base_tp = std::numeric_limits<double>::quiet_NaN();
    long evals_used = 0;
    std::uint64_t seed = 0;
};

void write_recipe_file(const RecipeRecord& rec, const std::string& path,
                       const std::string& command_echo = "");
RecipeRecord read_recipe_file(const std::string& path);

}  // namespace attnmerge
