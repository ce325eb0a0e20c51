#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "attnmerge/tensor_store.hpp"
#include "attnmerge/toy_model.hpp"

namespace attnmerge {

/// Scale the listed attention sublayers' outputs by kappa (post output
/// projection, before the residual add). kappa = 1 is the identity, kappa = 0
/// leaves only the residual pass-through.
struct MaskSpec {
    std::set<int> layers;
    double kappa = 1.0;
};

/// Forward with masking; kappa = 1 reproduces toy_forward bit for bit.
Eigen::MatrixXd masked_forward(const ToyAttentionModel& model, const MaskSpec& spec,
                               std::span<const int> tokens);

/// (score_1 - score_k) / score_1; negative when masking helps. score_1 must
/// be positive.
double degradation(double score_1, double score_k);

struct DegradationCurve {
    std::vector<double> kappas;
    struct Series {
        std::string metric;
        std::vector<double> scores;
        std::vector<double> deltas;
    };
    std::vector<Series> series;
};

/// A metric evaluated at one masking strength.
using MetricFn = std::function<double(double kappa)>;

inline const std::vector<double> kDefaultKappaGrid{1.0, 0.8, 0.6, 0.4, 0.2, 0.0};

/// One score per (metric, kappa) plus the relative degradation against the
/// kappa = 1 reference (evaluated separately when the grid omits 1.0). With
/// two or more metrics besides `reasoning_metric`, an "Others" series (their
/// unweighted mean) is appended.
DegradationCurve mask_sweep(const std::vector<std::pair<std::string, MetricFn>>& metrics,
                            const std::vector<double>& kappas = kDefaultKappaGrid,
                            const std::string& reasoning_metric = "TR");

/// Metric closures for the builtin path: proxy accuracies of the toy model
/// masked over `layers`.
struct ProxyTaskSuite;
std::vector<std::pair<std::string, MetricFn>> toy_mask_metrics(const ToyAttentionModel& model,
                                                               const std::set<int>& layers,
                                                               const ProxyTaskSuite& suite);

/// Masking as a checkpoint transform for external evaluators: within each
/// listed layer group, tensors whose name contains one of the |-separated
/// `out_proj_patterns` alternatives are scaled by kappa. Scaling the output
/// projection scales the sublayer output, which is the same intervention the
/// toy path applies directly.
Checkpoint mask_checkpoint(const Checkpoint& ck, const std::set<int>& layers, double kappa,
                           const std::string& out_proj_patterns = "wo|o_proj|out_proj");

/// "metric,kappa,score,delta" rows plus a long-format companion for plotting.
void write_curve_files(const DegradationCurve& curve, const std::string& csv_path,
                       const std::string& long_path, const std::string& command_echo);

}  // namespace attnmerge
