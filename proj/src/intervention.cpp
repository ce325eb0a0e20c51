#include "attnmerge/intervention.hpp"

#include <cmath>
#include <fstream>

#include "attnmerge/errors.hpp"
#include "attnmerge/toy_eval.hpp"
#include "attnmerge/util.hpp"

namespace attnmerge {

Eigen::MatrixXd masked_forward(const ToyAttentionModel& model, const MaskSpec& spec,
                               std::span<const int> tokens) {
    if (!(spec.kappa >= 0.0 && spec.kappa <= 1.0))
        throw usage_error("kappa must lie in [0,1], got " + format_double(spec.kappa));
    std::vector<double> scales(static_cast<std::size_t>(model.cfg.layers), 1.0);
    for (const int l : spec.layers) {
        if (l < 0 || l >= model.cfg.layers)
            throw usage_error("mask layer index out of range: " + std::to_string(l));
        scales[static_cast<std::size_t>(l)] = spec.kappa;
    }
    return toy_forward_embedded(model, model.embed(tokens), scales).logits;
}

double degradation(double score_1, double score_k) {
    if (!(score_1 > 0.0))
        throw data_error("relative degradation undefined: reference score is not positive");
    return (score_1 - score_k) / score_1;
}

DegradationCurve mask_sweep(const std::vector<std::pair<std::string, MetricFn>>& metrics,
                            const std::vector<double>& kappas,
                            const std::string& reasoning_metric) {
    if (metrics.empty()) throw usage_error("mask sweep needs at least one metric");
    if (kappas.empty()) throw usage_error("mask sweep needs at least one kappa");

    DegradationCurve curve;
    curve.kappas = kappas;
    std::vector<double> references;  // score at kappa = 1 per metric
    for (const auto& [name, fn] : metrics) {
        DegradationCurve::Series series;
        series.metric = name;
        double reference = std::numeric_limits<double>::quiet_NaN();
        for (const double k : kappas) {
            const double score = fn(k);
            series.scores.push_back(score);
            if (k == 1.0) reference = score;
        }
        if (std::isnan(reference)) reference = fn(1.0);
        references.push_back(reference);
        for (const double score : series.scores)
            series.deltas.push_back(degradation(reference, score));
        curve.series.push_back(std::move(series));
    }

    // "Others": unweighted mean of the non-reasoning metrics, when there are
    // at least two of them to aggregate.
    std::vector<std::size_t> non_reasoning;
    for (std::size_t i = 0; i < curve.series.size(); ++i)
        if (curve.series[i].metric != reasoning_metric) non_reasoning.push_back(i);
    if (non_reasoning.size() >= 2) {
        DegradationCurve::Series others;
        others.metric = "Others";
        double reference = 0;
        for (const std::size_t i : non_reasoning) reference += references[i];
        reference /= static_cast<double>(non_reasoning.size());
        for (std::size_t k = 0; k < kappas.size(); ++k) {
            double sum = 0;
            for (const std::size_t i : non_reasoning) sum += curve.series[i].scores[k];
            others.scores.push_back(sum / static_cast<double>(non_reasoning.size()));
            others.deltas.push_back(degradation(reference, others.scores.back()));
        }
        curve.series.push_back(std::move(others));
    }
    return curve;
}

std::vector<std::pair<std::string, MetricFn>> toy_mask_metrics(const ToyAttentionModel& model,
                                                               const std::set<int>& layers,
                                                               const ProxyTaskSuite& suite) {
    const auto accuracy_at = [&model, layers](const std::vector<ProxyInstance>& instances,
                                              const std::vector<int>& options, double kappa) {
        const MaskSpec spec{layers, kappa};
        return proxy_accuracy(
            [&](std::span<const int> tokens) {
                const Eigen::MatrixXd logits = masked_forward(model, spec, tokens);
                return Eigen::VectorXd(logits.row(logits.rows() - 1));
            },
            instances, options);
    };
    return {
        {"TP", [&suite, accuracy_at](double k) { return accuracy_at(suite.tp, suite.option_tokens, k); }},
        {"TR", [&suite, accuracy_at](double k) { return accuracy_at(suite.tr, suite.option_tokens, k); }},
    };
}

Checkpoint mask_checkpoint(const Checkpoint& ck, const std::set<int>& layers, double kappa,
                           const std::string& out_proj_patterns) {
    if (!(kappa >= 0.0 && kappa <= 1.0)) throw usage_error("kappa must lie in [0,1]");
    const auto patterns = split(out_proj_patterns, '|');
    Checkpoint out = ck;
    for (const int l : layers) {
        const auto group = layer_params(ck, l);  // range-checks l
        bool scaled_any = false;
        for (const auto& t : group.tensors) {
            const bool is_out_proj = std::any_of(patterns.begin(), patterns.end(), [&](const std::string& p) {
                return !p.empty() && t.name.find(p) != std::string::npos;
            });
            if (!is_out_proj) continue;
            Eigen::VectorXf scaled = ck.tensor_f32(t.name);
            scaled *= static_cast<float>(kappa);
            out.set_f32(t.name, {scaled.data(), static_cast<std::size_t>(scaled.size())});
            scaled_any = true;
        }
        if (!scaled_any)
            throw data_error("layer " + std::to_string(l) + " has no tensor matching the output " +
                             "projection patterns '" + out_proj_patterns + "'");
    }
    return out;
}

void write_curve_files(const DegradationCurve& curve, const std::string& csv_path,
                       const std::string& long_path, const std::string& command_echo) {
    {
        std::ofstream out(csv_path, std::ios::trunc);
        if (!out) throw data_error("cannot open curve file: " + csv_path);
        if (!command_echo.empty()) out << "# " << command_echo << "\n";
        out << "metric,kappa,score,delta\n";
        for (const auto& s : curve.series)
            for (std::size_t i = 0; i < curve.kappas.size(); ++i)
                out << s.metric << ',' << format_double(curve.kappas[i]) << ','
                    << format_double(s.scores[i]) << ',' << format_double(s.deltas[i]) << '\n';
    }
    {
        std::ofstream out(long_path, std::ios::trunc);
        if (!out) throw data_error("cannot open curve file: " + long_path);
        if (!command_echo.empty()) out << "# " << command_echo << "\n";
        out << "metric,kappa,quantity,value\n";
        for (const auto& s : curve.series)
            for (std::size_t i = 0; i < curve.kappas.size(); ++i) {
                out << s.metric << ',' << format_double(curve.kappas[i]) << ",score,"
                    << format_double(s.scores[i]) << '\n';
                out << s.metric << ',' << format_double(curve.kappas[i]) << ",delta,"
                    << format_double(s.deltas[i]) << '\n';
            }
    }
}

}  // namespace attnmerge
