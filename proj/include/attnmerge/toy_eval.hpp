#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <set>
#include <vector>

#include "attnmerge/objective.hpp"
#include "attnmerge/tensor_store.hpp"
#include "attnmerge/toy_model.hpp"

namespace attnmerge {

/// Closed-form fitness surrogate with a known optimal layer subset. Parents
/// hold one flat F32 vector per layer under the template "blk.{i}.attn".
/// For a merged checkpoint:
///   acc_tr = mean over planted layers    of exp(-||theta_l - n_l||^2 / tau)
///   acc_tp = mean over the complement    of exp(-||theta_l - m_l||^2 / tau)
/// With parents that differ in every layer, the unique argmax of the
/// objective clears exactly the planted gates at alpha = 1.
struct PlantedLandscape {
    int layer_count = 0;
    std::set<int> planted;
    double tau = 1.0;
    Checkpoint m, n;
};

inline constexpr const char* kLandscapeTemplate = "blk.{i}.attn";

/// Landscape with independently sampled parents (distinct in every layer).
PlantedLandscape make_planted_landscape(std::uint64_t seed, int layer_count,
                                        const std::set<int>& planted, int dim = 16,
                                        double tau = 1.0);

/// Landscape over existing parents (e.g. from make_parent_pair). Validates
/// the planted set and dimensions only; coincident layers are permitted and
/// simply make the optimum a tie resolved by the recipe ordering.
PlantedLandscape landscape_from_parents(Checkpoint m, Checkpoint n, const std::set<int>& planted,
                                        double tau = 1.0);

TaskAccuracies landscape_eval(const Checkpoint& merged, const PlantedLandscape& land);

/// Parent pair modeling adaptation damage: N is sampled fresh, M equals N
/// except the `corrupted` layers, which receive additive noise.
std::pair<Checkpoint, Checkpoint> make_parent_pair(std::uint64_t seed, int layer_count,
                                                   const std::set<int>& corrupted,
                                                   double noise_scale = 0.5, int dim = 16);

// ---------------------------------------------------------------------------
// Proxy task suites for the attention toy model.

/// One multiple-choice instance: a token sequence ending in the query token,
/// answered by one of the option tokens.
struct ProxyInstance {
    std::vector<int> tokens;
    int label = 0;
};

/// TP proxy: name the majority marker. TR proxy: did marker A appear before
/// marker B. Both answer with option tokens {1, 2}; labels are balanced to
/// within one instance and generation is fully seeded.
struct ProxyTaskSuite {
    std::vector<ProxyInstance> tp;
    std::vector<ProxyInstance> tr;
    std::vector<int> option_tokens{1, 2};
    int vocab = 32;
    int seq_len = 24;
    std::uint64_t seed = 0;
};

ProxyTaskSuite make_proxy_suite(std::uint64_t seed, int tp_count = 55, int tr_count = 177,
                                int vocab = 32, int seq_len = 24);

/// Accuracy = correct/total per task, from the argmax of the final-position
/// logits restricted to the option tokens. Exact counts are filled in.
TaskAccuracies proxy_eval(const ToyAttentionModel& model, const ProxyTaskSuite& suite);

/// Same contract with an arbitrary scoring function (final-position logits
/// for a token sequence); lets tests plug in oracle models.
using LogitsFn = std::function<Eigen::VectorXd(std::span<const int>)>;
TaskAccuracies proxy_eval_fn(const LogitsFn& logits_fn, const ProxyTaskSuite& suite);

/// Accuracy on one instance list.
double proxy_accuracy(const LogitsFn& logits_fn, const std::vector<ProxyInstance>& instances,
                      const std::vector<int>& option_tokens, long* correct_out = nullptr);

/// Experimental: plain full-batch gradient descent of the binary option
/// cross-entropy on one task, using the model's reverse-mode gradients.
/// Returns the final loss. Not part of any acceptance path.
double fit_toy_model(ToyAttentionModel& model, const std::vector<ProxyInstance>& instances,
                     const std::vector<int>& option_tokens, int steps, double learning_rate);

}  // namespace attnmerge
