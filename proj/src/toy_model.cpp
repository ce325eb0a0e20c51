#include "attnmerge/toy_model.hpp"

#include <cmath>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"

namespace attnmerge {

namespace {

constexpr double kRampScale = 64.0;

// Channel layout of the hand-wired model (width >= 8).
constexpr int kChceMark = 0;   // 1 on both marker tokens
constexpr int kChAb = 1;       // +1 on marker A, -1 on marker B
constexpr int kChMajority = 2; // majority circuit writes its sign here
constexpr int kChOrder = 3;    // order circuit writes its sign here
constexpr int kChQuery = 4;    // 1 on the final query token
constexpr int kChBusM = 5;     // internal routing channels
constexpr int kChBusO = 6;

Eigen::MatrixXd random_matrix(int rows, int cols, NormalSampler& gauss, double scale) {
    Eigen::MatrixXd m(rows, cols);
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) m(r, c) = scale * gauss.next();
    return m;
}

std::string tensor_name(int layer, const char* role) {
    return "blk." + std::to_string(layer) + ".attn." + role;
}

void add_matrix(CheckpointBuilder& b, const std::string& name, const Eigen::MatrixXd& m) {
    const Eigen::MatrixXf f = m.cast<float>();
    b.add_f32(name, {m.rows(), m.cols()}, {f.data(), static_cast<std::size_t>(f.size())});
}

Eigen::MatrixXd get_matrix(const Checkpoint& ck, const std::string& name) {
    const auto& meta = ck.meta(name);
    if (meta.shape.size() != 2) throw data_error("tensor '" + name + "' is not a matrix");
    const Eigen::VectorXf flat = ck.tensor_f32(name);
    return Eigen::Map<const Eigen::MatrixXf>(flat.data(), meta.shape[0], meta.shape[1])
        .cast<double>();
}

}  // namespace

ToyAttentionModel ToyAttentionModel::zeros(const ToyModelConfig& cfg) {
    ToyAttentionModel m;
    m.cfg = cfg;
    m.tok_embed = Eigen::MatrixXd::Zero(cfg.vocab, cfg.width);
    m.layers.assign(static_cast<std::size_t>(cfg.layers),
                    {Eigen::MatrixXd::Zero(cfg.width, cfg.width),
                     Eigen::MatrixXd::Zero(cfg.width, cfg.width),
                     Eigen::MatrixXd::Zero(cfg.width, cfg.width),
                     Eigen::MatrixXd::Zero(cfg.width, cfg.width)});
    m.readout = Eigen::MatrixXd::Zero(cfg.width, cfg.vocab);
    return m;
}

ToyAttentionModel ToyAttentionModel::random(const ToyModelConfig& cfg, std::uint64_t seed,
                                            double scale) {
    NormalSampler gauss(splitmix64(seed));
    ToyAttentionModel m = zeros(cfg);
    const double ws = scale / std::sqrt(static_cast<double>(cfg.width));
    m.tok_embed = random_matrix(cfg.vocab, cfg.width, gauss, scale);
    for (auto& layer : m.layers) {
        layer.wq = random_matrix(cfg.width, cfg.width, gauss, ws);
        layer.wk = random_matrix(cfg.width, cfg.width, gauss, ws);
        layer.wv = random_matrix(cfg.width, cfg.width, gauss, ws);
        layer.wo = random_matrix(cfg.width, cfg.width, gauss, ws);
    }
    m.readout = random_matrix(cfg.width, cfg.vocab, gauss, ws);
    return m;
}

Checkpoint ToyAttentionModel::to_checkpoint() const {
    CheckpointBuilder b;
    add_matrix(b, "tok_embed.weight", tok_embed);
    for (int l = 0; l < cfg.layers; ++l) {
        add_matrix(b, tensor_name(l, "wq"), layers[static_cast<std::size_t>(l)].wq);
        add_matrix(b, tensor_name(l, "wk"), layers[static_cast<std::size_t>(l)].wk);
        add_matrix(b, tensor_name(l, "wv"), layers[static_cast<std::size_t>(l)].wv);
        add_matrix(b, tensor_name(l, "wo"), layers[static_cast<std::size_t>(l)].wo);
    }
    add_matrix(b, "readout.weight", readout);
    b.layer_template(kLayerTemplate);
    return b.build();
}

ToyAttentionModel ToyAttentionModel::from_checkpoint(const Checkpoint& ck) {
    const auto& embed_meta = ck.meta("tok_embed.weight");
    ToyModelConfig cfg;
    cfg.vocab = static_cast<int>(embed_meta.shape.at(0));
    cfg.width = static_cast<int>(embed_meta.shape.at(1));
    cfg.layers = ck.layer_count;
    if (cfg.layers <= 0) {
        Checkpoint tmp = ck;
        set_layer_template(tmp, kLayerTemplate);
        cfg.layers = tmp.layer_count;
    }
    ToyAttentionModel m = zeros(cfg);
    m.tok_embed = get_matrix(ck, "tok_embed.weight");
    for (int l = 0; l < cfg.layers; ++l) {
        auto& layer = m.layers[static_cast<std::size_t>(l)];
        layer.wq = get_matrix(ck, tensor_name(l, "wq"));
        layer.wk = get_matrix(ck, tensor_name(l, "wk"));
        layer.wv = get_matrix(ck, tensor_name(l, "wv"));
        layer.wo = get_matrix(ck, tensor_name(l, "wo"));
        if (layer.wq.rows() != cfg.width || layer.wq.cols() != cfg.width)
            throw data_error("toy model layer " + std::to_string(l) + " has inconsistent width");
    }
    m.readout = get_matrix(ck, "readout.weight");
    if (m.readout.rows() != cfg.width || m.readout.cols() != cfg.vocab)
        throw data_error("toy model readout shape does not match embedding table");
    return m;
}

Eigen::MatrixXd ToyAttentionModel::embed(std::span<const int> tokens) const {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(tokens.size()), cfg.width);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t < 0 || t >= cfg.vocab)
            throw data_error("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(cfg.vocab));
        x.row(static_cast<Eigen::Index>(i)) = tok_embed.row(t);
    }
    return x;
}

Eigen::MatrixXd ToyAttentionModel::position_encoding(int length, int width) {
    // The lower half of the width stays position-free so content channels are
    // clean; sinusoids fill the upper half and the last dimension is a linear
    // ramp that gives scores a monotone handle on absolute position.
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(length, width);
    const int base = width / 2;
    for (int pos = 0; pos < length; ++pos) {
        for (int j = base; j < width - 1; ++j) {
            const int pair = (j - base) / 2;
            const double rate = std::pow(10000.0, -2.0 * pair / width);
            p(pos, j) = ((j - base) % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
        }
        p(pos, width - 1) = pos / kRampScale;
    }
    return p;
}

ToyForwardTrace toy_forward_embedded(const ToyAttentionModel& model,
                                     const Eigen::MatrixXd& input_embeddings,
                                     std::span<const double> layer_scales) {
    const Eigen::Index n = input_embeddings.rows();
    if (n == 0) throw data_error("empty input sequence");
    if (input_embeddings.cols() != model.cfg.width)
        throw data_error("input embedding width does not match model width");
    if (!layer_scales.empty() && layer_scales.size() != static_cast<std::size_t>(model.cfg.layers))
        throw data_error("layer_scales size must equal the layer count");

    ToyForwardTrace trace;
    trace.input = input_embeddings;
    trace.pos = ToyAttentionModel::position_encoding(static_cast<int>(n), model.cfg.width);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(model.cfg.width));

    Eigen::MatrixXd x = input_embeddings;
    trace.layers.reserve(static_cast<std::size_t>(model.cfg.layers));
    for (int l = 0; l < model.cfg.layers; ++l) {
        const auto& w = model.layers[static_cast<std::size_t>(l)];
        ToyForwardTrace::LayerActs acts;
        acts.x_in = x;
        acts.scale = layer_scales.empty() ? 1.0 : layer_scales[static_cast<std::size_t>(l)];
        const Eigen::MatrixXd xp = x + trace.pos;  // positions enter scores only
        acts.q.noalias() = xp * w.wq;
        acts.k.noalias() = xp * w.wk;
        acts.v.noalias() = x * w.wv;
        Eigen::MatrixXd scores = acts.q * acts.k.transpose() * inv_sqrt_d;
        acts.attn.resize(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double peak = scores.row(i).maxCoeff();
            const Eigen::ArrayXd e = (scores.row(i).array() - peak).exp();
            acts.attn.row(i) = (e / e.sum()).matrix();
        }
        acts.h.noalias() = acts.attn * acts.v;
        if (acts.scale == 1.0) {
            x += acts.h * w.wo;
        } else {
            x += acts.scale * (acts.h * w.wo);
        }
        trace.layers.push_back(std::move(acts));
    }
    trace.x_out = x;
    trace.logits.noalias() = x * model.readout;
    return trace;
}

Eigen::MatrixXd toy_forward(const ToyAttentionModel& model, std::span<const int> tokens) {
    return toy_forward_embedded(model, model.embed(tokens)).logits;
}

Eigen::MatrixXd toy_backward_to_input(const ToyAttentionModel& model, const ToyForwardTrace& trace,
                                      const Eigen::MatrixXd& dlogits, ToyWeightGrads* wg) {
    const Eigen::Index n = trace.input.rows();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(model.cfg.width));
    if (wg) {
        wg->tok_embed = Eigen::MatrixXd::Zero(model.cfg.vocab, model.cfg.width);
        wg->layers.assign(static_cast<std::size_t>(model.cfg.layers),
                          {Eigen::MatrixXd::Zero(model.cfg.width, model.cfg.width),
                           Eigen::MatrixXd::Zero(model.cfg.width, model.cfg.width),
                           Eigen::MatrixXd::Zero(model.cfg.width, model.cfg.width),
                           Eigen::MatrixXd::Zero(model.cfg.width, model.cfg.width)});
        wg->readout = trace.x_out.transpose() * dlogits;
    }

    Eigen::MatrixXd dx = dlogits * model.readout.transpose();
    for (int l = model.cfg.layers - 1; l >= 0; --l) {
        const auto& w = model.layers[static_cast<std::size_t>(l)];
        const auto& acts = trace.layers[static_cast<std::size_t>(l)];
        const Eigen::MatrixXd d_out = acts.scale * dx;  // grad at h * wo
        const Eigen::MatrixXd dh = d_out * w.wo.transpose();
        const Eigen::MatrixXd dattn = dh * acts.v.transpose();
        const Eigen::MatrixXd dv = acts.attn.transpose() * dh;
        // softmax rows: ds_ij = a_ij * (dattn_ij - sum_k a_ik dattn_ik)
        Eigen::MatrixXd dscores(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double inner = acts.attn.row(i).dot(dattn.row(i));
            dscores.row(i) =
                (acts.attn.row(i).array() * (dattn.row(i).array() - inner)).matrix();
        }
        const Eigen::MatrixXd dq = dscores * acts.k * inv_sqrt_d;
        const Eigen::MatrixXd dk = dscores.transpose() * acts.q * inv_sqrt_d;
        if (wg) {
            auto& g = wg->layers[static_cast<std::size_t>(l)];
            const Eigen::MatrixXd xp = acts.x_in + trace.pos;
            g.wo += acts.h.transpose() * d_out;
            g.wv += acts.x_in.transpose() * dv;
            g.wq += xp.transpose() * dq;
            g.wk += xp.transpose() * dk;
        }
        dx += dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
    }
    return dx;
}

ToyAttentionModel make_planted_toy_model(std::uint64_t seed, const ToyModelConfig& cfg,
                                         const std::set<int>& planted, double headwind) {
    if (cfg.width < 8) throw usage_error("planted toy model needs width >= 8");
    if (cfg.vocab < 5) throw usage_error("planted toy model needs vocab >= 5");
    for (const int l : planted)
        if (l < 0 || l >= cfg.layers) throw usage_error("planted layer index out of range");
    if (planted.empty() || static_cast<int>(planted.size()) == cfg.layers)
        throw usage_error("planted set must be a non-empty proper subset of the layers");

    ToyAttentionModel m = ToyAttentionModel::zeros(cfg);

    // Tokens: 1 = marker A, 2 = marker B, 3 = query; the rest are fillers
    // with faint random content away from the circuit channels.
    NormalSampler gauss(splitmix64(seed));
    for (int t = 4; t < cfg.vocab; ++t)
        for (int j = kChBusO + 1; j < cfg.width - 1; ++j) m.tok_embed(t, j) = 0.05 * gauss.next();
    m.tok_embed(1, kChceMark) = 1.0;
    m.tok_embed(1, kChAb) = 1.0;
    m.tok_embed(2, kChceMark) = 1.0;
    m.tok_embed(2, kChAb) = -1.0;
    m.tok_embed(3, kChQuery) = 1.0;

    const double sqrt_d = std::sqrt(static_cast<double>(cfg.width));
    const double marker_gain = 14.0 * sqrt_d;  // markers dominate filler attention
    const double ramp_gain = 16.0 * sqrt_d;    // position tilt inside marker attention

    // Majority circuit on the first non-planted layer: the query token
    // attends uniformly to markers and accumulates their +-1 content.
    int majority_layer = -1;
    for (int l = 0; l < cfg.layers; ++l)
        if (!planted.count(l)) {
            majority_layer = l;
            break;
        }
    {
        auto& w = m.layers[static_cast<std::size_t>(majority_layer)];
        w.wq(kChQuery, kChBusM) = 1.0;
        w.wk(kChceMark, kChBusM) = marker_gain;
        w.wv(kChAb, kChBusO) = 1.0;
        w.wo(kChBusO, kChMajority) = 1.0;
    }

    // Order circuit on every planted layer: same marker targeting plus a
    // position ramp, so the later marker wins the softmax and the sign of the
    // accumulated content encodes which marker came first.
    for (const int l : planted) {
        auto& w = m.layers[static_cast<std::size_t>(l)];
        w.wq(kChQuery, kChBusM) = 1.0;
        w.wk(kChceMark, kChBusM) = marker_gain;
        w.wk(cfg.width - 1, kChBusM) = ramp_gain;
        w.wv(kChAb, kChBusO) = 1.0;
        w.wo(kChBusO, kChOrder) = 1.0 / static_cast<double>(planted.size());
    }

    // Readout: option token 1 wants positive majority and "A first" (negative
    // order sign); option token 2 is the mirror image. The query channel adds
    // the headwind bias toward option 1.
    const double majority_gain = 24.0;
    m.readout(kChMajority, 1) = majority_gain;
    m.readout(kChMajority, 2) = -majority_gain;
    m.readout(kChOrder, 1) = -1.0;
    m.readout(kChOrder, 2) = 1.0;
    m.readout(kChQuery, 1) = headwind;
    return m;
}

}  // namespace attnmerge
