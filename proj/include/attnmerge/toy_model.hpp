#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "attnmerge/tensor_store.hpp"

namespace attnmerge {

/// Single-head attention-only network used as the desk-scale substrate:
/// per-layer q/k/v/output maps with a residual connection, a token embedding
/// table and a linear readout to vocabulary logits. Position information is
/// added to the attention scores only (queries and keys see x + pos), so the
/// residual stream itself stays position-free and a zero-weight model reduces
/// to an embedding->readout lookup. Weights are stored as F32 in checkpoints;
/// all arithmetic runs in double.
struct ToyModelConfig {
    int layers = 12;
    int width = 16;
    int vocab = 32;
};

class ToyAttentionModel {
  public:
    ToyModelConfig cfg;
    Eigen::MatrixXd tok_embed;  // vocab x d
    struct Layer {
        Eigen::MatrixXd wq, wk, wv, wo;  // d x d
    };
    std::vector<Layer> layers;
    Eigen::MatrixXd readout;  // d x vocab

    static constexpr const char* kLayerTemplate = "blk.{i}.attn.{p}";

    static ToyAttentionModel zeros(const ToyModelConfig& cfg);
    static ToyAttentionModel random(const ToyModelConfig& cfg, std::uint64_t seed,
                                    double scale = 0.35);
    static ToyAttentionModel from_checkpoint(const Checkpoint& ck);
    Checkpoint to_checkpoint() const;

    /// Token embedding rows (no positions). Throws on out-of-range ids.
    Eigen::MatrixXd embed(std::span<const int> tokens) const;

    /// Sinusoidal encoding plus a linear ramp in the last dimension; the ramp
    /// gives attention scores a monotone handle on absolute position.
    static Eigen::MatrixXd position_encoding(int length, int width);
};

/// Activations kept for the backward pass.
struct ToyForwardTrace {
    Eigen::MatrixXd input;  // n x d embeddings as given (pre-position)
    Eigen::MatrixXd pos;    // n x d
    struct LayerActs {
        Eigen::MatrixXd x_in;   // residual stream entering the layer
        Eigen::MatrixXd q, k, v;
        Eigen::MatrixXd attn;   // softmax rows
        Eigen::MatrixXd h;      // attn * v
        double scale = 1.0;     // output multiplier (masking hook)
    };
    std::vector<LayerActs> layers;
    Eigen::MatrixXd x_out;
    Eigen::MatrixXd logits;  // n x vocab
};

/// Forward over explicit input embeddings. layer_scales, when non-empty,
/// multiplies each attention sublayer's output before the residual add
/// (scale 1 everywhere reproduces the plain forward bit for bit).
ToyForwardTrace toy_forward_embedded(const ToyAttentionModel& model,
                                     const Eigen::MatrixXd& input_embeddings,
                                     std::span<const double> layer_scales = {});

/// Forward over token ids; returns per-position logits.
Eigen::MatrixXd toy_forward(const ToyAttentionModel& model, std::span<const int> tokens);

struct ToyWeightGrads {
    Eigen::MatrixXd tok_embed;  // same shapes as the model
    std::vector<ToyAttentionModel::Layer> layers;
    Eigen::MatrixXd readout;
};

/// Reverse-mode pass: gradient of sum(dlogits .* logits) with respect to the
/// input embeddings; weight gradients are accumulated when `wg` is given.
Eigen::MatrixXd toy_backward_to_input(const ToyAttentionModel& model, const ToyForwardTrace& trace,
                                      const Eigen::MatrixXd& dlogits, ToyWeightGrads* wg = nullptr);

/// Hand-wired model whose order-comparison ability lives exactly in the
/// `planted` layers while majority counting lives in one non-planted layer.
/// Masking the planted set therefore collapses the order task and leaves the
/// majority task intact. `headwind` adds a constant pull toward the first
/// option so partial masking degrades gradually instead of cliff-dropping.
ToyAttentionModel make_planted_toy_model(std::uint64_t seed, const ToyModelConfig& cfg,
                                         const std::set<int>& planted, double headwind = 0.0);

}  // namespace attnmerge
