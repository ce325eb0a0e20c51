#include "attnmerge/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"

namespace attnmerge {

namespace {

void check_query(const AttributionQuery& q) {
    if (!q.model) throw usage_error("attribution query has no model");
    if (q.frame_count < 1 || q.tokens_per_frame < 1)
        throw usage_error("attribution needs frame_count >= 1 and tokens_per_frame >= 1");
    if (q.frames.rows() != static_cast<Eigen::Index>(q.frame_count) * q.tokens_per_frame)
        throw usage_error("frame embedding rows do not equal frame_count * tokens_per_frame");
    if (q.frames.cols() != q.model->cfg.width)
        throw usage_error("frame embedding width does not match the model");
    if (q.options.size() < 2) throw usage_error("attribution needs at least 2 candidate options");
    for (const int c : q.options)
        if (c < 0 || c >= q.model->cfg.vocab)
            throw usage_error("option token " + std::to_string(c) + " outside the vocabulary");
    if (std::find(q.options.begin(), q.options.end(), q.chosen) == q.options.end())
        throw usage_error("chosen option is not among the candidates");
}

Eigen::MatrixXd assemble_input(const AttributionQuery& q, const Eigen::MatrixXd& frames) {
    if (q.prefix_tokens.empty()) return frames;
    const Eigen::MatrixXd prefix = q.model->embed(q.prefix_tokens);
    Eigen::MatrixXd input(frames.rows() + prefix.rows(), frames.cols());
    input.topRows(frames.rows()) = frames;
    input.bottomRows(prefix.rows()) = prefix;
    return input;
}

// Margin at the final position plus the index of the strongest alternative.
double margin_from_logits(const Eigen::MatrixXd& logits, const AttributionQuery& q,
                          int* alt_out = nullptr) {
    const Eigen::Index last = logits.rows() - 1;
    double best_alt = -std::numeric_limits<double>::infinity();
    int alt = -1;
    for (const int c : q.options) {
        if (c == q.chosen) continue;
        if (logits(last, c) > best_alt) {
            best_alt = logits(last, c);
            alt = c;
        }
    }
    if (alt_out) *alt_out = alt;
    return logits(last, q.chosen) - best_alt;
}

}  // namespace

Eigen::MatrixXd embed_frames(const ToyAttentionModel& model, std::span<const int> frame_tokens) {
    return model.embed(frame_tokens);
}

double decision_margin(const AttributionQuery& q) {
    check_query(q);
    const auto trace = toy_forward_embedded(*q.model, assemble_input(q, q.frames));
    return margin_from_logits(trace.logits, q);
}

Eigen::VectorXd frame_importance(const AttributionQuery& q, GradMode mode, double h) {
    check_query(q);
    const Eigen::Index k = q.tokens_per_frame;
    Eigen::VectorXd importance = Eigen::VectorXd::Zero(q.frame_count);

    if (mode == GradMode::reverse) {
        const auto trace = toy_forward_embedded(*q.model, assemble_input(q, q.frames));
        int alt = -1;
        margin_from_logits(trace.logits, q, &alt);
        Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(trace.logits.rows(), trace.logits.cols());
        dlogits(trace.logits.rows() - 1, q.chosen) = 1.0;
        dlogits(trace.logits.rows() - 1, alt) = -1.0;
        const Eigen::MatrixXd dinput = toy_backward_to_input(*q.model, trace, dlogits);
        for (int t = 0; t < q.frame_count; ++t) {
            const auto grad_block = dinput.middleRows(static_cast<Eigen::Index>(t) * k, k);
            const auto act_block = q.frames.middleRows(static_cast<Eigen::Index>(t) * k, k);
            importance[t] = grad_block.cwiseProduct(act_block).array().abs().sum();
        }
        return importance;
    }

    if (!(h > 0.0)) throw usage_error("finite-difference step must be positive");
    Eigen::MatrixXd frames = q.frames;
    for (int t = 0; t < q.frame_count; ++t) {
        double sum = 0.0;
        for (Eigen::Index r = 0; r < k; ++r) {
            const Eigen::Index row = static_cast<Eigen::Index>(t) * k + r;
            for (Eigen::Index j = 0; j < frames.cols(); ++j) {
                const double saved = frames(row, j);
                frames(row, j) = saved + h;
                const double up =
                    margin_from_logits(toy_forward_embedded(*q.model, assemble_input(q, frames)).logits, q);
                frames(row, j) = saved - h;
                const double down =
                    margin_from_logits(toy_forward_embedded(*q.model, assemble_input(q, frames)).logits, q);
                frames(row, j) = saved;
                const double grad = (up - down) / (2.0 * h);
                if (!std::isfinite(grad)) throw data_error("non-finite finite-difference gradient");
                sum += std::abs(grad * saved);
            }
        }
        importance[t] = sum;
    }
    return importance;
}

Eigen::VectorXd normalize_importance(const Eigen::VectorXd& raw) {
    if (raw.size() < 1) throw usage_error("cannot normalize an empty profile");
    const double lo = raw.minCoeff();
    const double hi = raw.maxCoeff();
    if (hi == lo) return Eigen::VectorXd::Zero(raw.size());
    return (raw.array() - lo) / (hi - lo);
}

Eigen::VectorXd smooth_importance(const Eigen::VectorXd& raw, int window) {
    if (window < 1 || window % 2 == 0)
        throw usage_error("smoothing window must be odd and >= 1, got " + std::to_string(window));
    if (window == 1) return raw;
    const Eigen::Index n = raw.size();
    const Eigen::Index radius = window / 2;
    Eigen::VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, i - radius);
        const Eigen::Index hi = std::min(n - 1, i + radius);
        out[i] = raw.segment(lo, hi - lo + 1).mean();
    }
    return out;
}

AttributionResult attribute(const AttributionQuery& q, const AttributionOptions& opts) {
    AttributionResult result;
    result.options = opts;
    result.margin = decision_margin(q);
    result.raw = frame_importance(q, opts.mode, opts.fd_step);
    result.smoothed = smooth_importance(result.raw, opts.window);
    result.normalized = opts.smooth_before_normalize
                            ? normalize_importance(result.smoothed)
                            : smooth_importance(normalize_importance(result.raw), opts.window);
    result.ranked_frames.resize(static_cast<std::size_t>(q.frame_count));
    std::iota(result.ranked_frames.begin(), result.ranked_frames.end(), 0);
    std::stable_sort(result.ranked_frames.begin(), result.ranked_frames.end(),
                     [&](int a, int b) { return result.normalized[a] > result.normalized[b]; });
    return result;
}

void write_attribution_report(const AttributionResult& result, const std::string& path,
                              const std::string& command_echo) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot open attribution report: " + path);
    if (!command_echo.empty()) out << "# " << command_echo << "\n";
    out << "# margin " << format_double(result.margin) << "\n";
    out << "# window " << result.options.window << " mode "
        << (result.options.mode == GradMode::reverse ? "reverse" : "finite-difference")
        << " smooth_before_normalize " << (result.options.smooth_before_normalize ? 1 : 0) << "\n";
    out << "frame,raw,smoothed,normalized\n";
    for (Eigen::Index t = 0; t < result.raw.size(); ++t)
        out << t << ',' << format_double(result.raw[t]) << ',' << format_double(result.smoothed[t])
            << ',' << format_double(result.normalized[t]) << '\n';
    out << "# ranked";
    for (const int t : result.ranked_frames) out << ' ' << t;
    out << "\n";
}

}  // namespace attnmerge
