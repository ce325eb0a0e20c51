#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "attnmerge/toy_model.hpp"

namespace attnmerge {

/// A decision to attribute: frame embeddings followed by a teacher-forced
/// prefix, a candidate option set and the chosen option. The margin and the
/// gradients are taken at the final prefix position.
struct AttributionQuery {
    const ToyAttentionModel* model = nullptr;
    Eigen::MatrixXd frames;          // (frame_count * tokens_per_frame) x width
    int frame_count = 0;             // T
    int tokens_per_frame = 0;        // K
    std::vector<int> prefix_tokens;  // generated prefix ending before the answer
    std::vector<int> options;        // candidate answer tokens, >= 2
    int chosen = -1;                 // must be one of options
};

/// Frame embeddings sourced from token ids through the model's table.
Eigen::MatrixXd embed_frames(const ToyAttentionModel& model, std::span<const int> frame_tokens);

/// Logit gap at the answer position between the chosen option and its
/// strongest alternative; negative when the model actually preferred an
/// alternative.
double decision_margin(const AttributionQuery& q);

enum class GradMode { reverse, finite_difference };

/// Raw importance per frame: sum over the frame's embedding entries of
/// |d margin / d entry * entry|. Reverse mode backpropagates through the
/// network; finite-difference mode uses central differences with step h.
Eigen::VectorXd frame_importance(const AttributionQuery& q, GradMode mode, double h = 1e-3);

/// Min-max to [0,1]; a constant profile maps to all zeros by convention.
Eigen::VectorXd normalize_importance(const Eigen::VectorXd& raw);

/// Centered moving average with an odd window, truncated (and renormalized)
/// at the boundaries.
Eigen::VectorXd smooth_importance(const Eigen::VectorXd& raw, int window);

struct AttributionOptions {
    GradMode mode = GradMode::reverse;
    double fd_step = 1e-3;
    int window = 5;
    bool smooth_before_normalize = true;
};

struct AttributionResult {
    double margin = 0.0;
    Eigen::VectorXd raw;
    Eigen::VectorXd smoothed;
    Eigen::VectorXd normalized;
    std::vector<int> ranked_frames;  // by normalized importance, descending
    AttributionOptions options;
};

/// margin -> frame_importance -> smooth -> normalize (order configurable).
AttributionResult attribute(const AttributionQuery& q, const AttributionOptions& opts = {});

/// Report: margin, config echo and one row per frame (raw, smoothed,
/// normalized), plus the ranked frame list.
void write_attribution_report(const AttributionResult& result, const std::string& path,
                              const std::string& command_echo);

}  // namespace attnmerge
