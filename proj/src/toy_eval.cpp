#include "attnmerge/toy_eval.hpp"

#include <algorithm>
#include <cmath>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"

namespace attnmerge {

namespace {

std::string layer_name(int l) { return "blk." + std::to_string(l) + ".attn"; }

void check_planted(int layer_count, const std::set<int>& planted) {
    if (layer_count < 2) throw usage_error("planted landscape needs at least 2 layers");
    if (planted.empty() || static_cast<int>(planted.size()) >= layer_count)
        throw usage_error("planted set must be a non-empty proper subset of the layers");
    for (const int l : planted)
        if (l < 0 || l >= layer_count)
            throw usage_error("planted layer index out of range: " + std::to_string(l));
}

Checkpoint vectors_to_checkpoint(const std::vector<Eigen::VectorXf>& per_layer) {
    CheckpointBuilder b;
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
        b.add_f32(layer_name(static_cast<int>(l)), {per_layer[l].size()},
                  {per_layer[l].data(), static_cast<std::size_t>(per_layer[l].size())});
    }
    b.layer_template(kLandscapeTemplate);
    return b.build();
}

}  // namespace

PlantedLandscape make_planted_landscape(std::uint64_t seed, int layer_count,
                                        const std::set<int>& planted, int dim, double tau) {
    check_planted(layer_count, planted);
    if (dim < 1) throw usage_error("landscape layer dimension must be >= 1");
    if (!(tau > 0.0)) throw usage_error("tau must be positive");
    NormalSampler gauss(splitmix64(seed));
    std::vector<Eigen::VectorXf> m_layers, n_layers;
    for (int l = 0; l < layer_count; ++l) {
        Eigen::VectorXf mv(dim), nv(dim);
        for (int i = 0; i < dim; ++i) mv[i] = static_cast<float>(gauss.next());
        for (int i = 0; i < dim; ++i) nv[i] = static_cast<float>(gauss.next());
        if ((mv - nv).norm() == 0.0f) nv[0] += 1.0f;  // astronomically unlikely, but required
        m_layers.push_back(std::move(mv));
        n_layers.push_back(std::move(nv));
    }
    PlantedLandscape land;
    land.layer_count = layer_count;
    land.planted = planted;
    land.tau = tau;
    land.m = vectors_to_checkpoint(m_layers);
    land.n = vectors_to_checkpoint(n_layers);
    return land;
}

PlantedLandscape landscape_from_parents(Checkpoint m, Checkpoint n, const std::set<int>& planted,
                                        double tau) {
    if (m.layer_count <= 0 || n.layer_count <= 0)
        throw data_error("landscape parents need a layer template");
    if (m.layer_count != n.layer_count) throw data_error("landscape parents disagree on layer count");
    check_planted(m.layer_count, planted);
    if (!(tau > 0.0)) throw usage_error("tau must be positive");
    check_merge_compatible(m, n);
    PlantedLandscape land;
    land.layer_count = m.layer_count;
    land.planted = planted;
    land.tau = tau;
    land.m = std::move(m);
    land.n = std::move(n);
    return land;
}

TaskAccuracies landscape_eval(const Checkpoint& merged, const PlantedLandscape& land) {
    if (merged.layer_count != land.layer_count)
        throw data_error("merged checkpoint layer count does not match the landscape");
    double tr_sum = 0.0, tp_sum = 0.0;
    for (int l = 0; l < land.layer_count; ++l) {
        const auto g = layer_params(merged, l);
        const auto gm = layer_params(land.m, l);
        const auto gn = layer_params(land.n, l);
        double d2_to_m = 0.0, d2_to_n = 0.0;
        if (g.tensors.size() != gm.tensors.size())
            throw data_error("merged layer " + std::to_string(l) + " has unexpected tensors");
        for (std::size_t i = 0; i < g.tensors.size(); ++i) {
            if (g.tensors[i].values.size() != gm.tensors[i].values.size())
                throw data_error("dimension mismatch at layer " + std::to_string(l));
            d2_to_m += (g.tensors[i].values - gm.tensors[i].values).cast<double>().squaredNorm();
            d2_to_n += (g.tensors[i].values - gn.tensors[i].values).cast<double>().squaredNorm();
        }
        if (land.planted.count(l)) {
            tr_sum += std::exp(-d2_to_n / land.tau);
        } else {
            tp_sum += std::exp(-d2_to_m / land.tau);
        }
    }
    TaskAccuracies acc;
    acc.acc_tr = tr_sum / static_cast<double>(land.planted.size());
    acc.acc_tp = tp_sum / static_cast<double>(land.layer_count - land.planted.size());
    return acc;
}

std::pair<Checkpoint, Checkpoint> make_parent_pair(std::uint64_t seed, int layer_count,
                                                   const std::set<int>& corrupted,
                                                   double noise_scale, int dim) {
    if (layer_count < 1) throw usage_error("layer count must be >= 1");
    if (dim < 1) throw usage_error("dim must be >= 1");
    for (const int l : corrupted)
        if (l < 0 || l >= layer_count)
            throw usage_error("corrupted layer index out of range: " + std::to_string(l));
    NormalSampler gauss(splitmix64(seed));
    std::vector<Eigen::VectorXf> n_layers, m_layers;
    for (int l = 0; l < layer_count; ++l) {
        Eigen::VectorXf nv(dim);
        for (int i = 0; i < dim; ++i) nv[i] = static_cast<float>(gauss.next());
        Eigen::VectorXf mv = nv;
        if (corrupted.count(l)) {
            for (int i = 0; i < dim; ++i)
                mv[i] += static_cast<float>(noise_scale * gauss.next());
        }
        n_layers.push_back(std::move(nv));
        m_layers.push_back(std::move(mv));
    }
    return {vectors_to_checkpoint(m_layers), vectors_to_checkpoint(n_layers)};
}

ProxyTaskSuite make_proxy_suite(std::uint64_t seed, int tp_count, int tr_count, int vocab,
                                int seq_len) {
    if (tp_count < 0 || tr_count < 0) throw usage_error("suite sizes must be non-negative");
    if (vocab < 5) throw usage_error("proxy suites need vocab >= 5");
    if (seq_len < 4) throw usage_error("proxy suites need seq_len >= 4");
    ProxyTaskSuite suite;
    suite.vocab = vocab;
    suite.seq_len = seq_len;
    suite.seed = seed;
    std::mt19937_64 rng(splitmix64(seed));

    const int kMarkerA = 1, kMarkerB = 2, kQuery = 3;
    const int body = seq_len - 1;  // last slot is the query token
    auto filler = [&] { return 4 + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(vocab - 4))); };

    // Majority task: alternate which marker holds the strict majority.
    for (int i = 0; i < tp_count; ++i) {
        const bool a_major = (i % 2) == 0;
        const int total = 3 + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(
                                                                  std::min(7, body - 2))));
        const int min_major = total / 2 + 1;
        const int major = min_major + static_cast<int>(uniform_below(
                                          rng, static_cast<std::uint64_t>(total - min_major + 1)));
        std::vector<int> tokens(static_cast<std::size_t>(seq_len));
        for (int p = 0; p < body; ++p) tokens[static_cast<std::size_t>(p)] = filler();
        tokens[static_cast<std::size_t>(body)] = kQuery;
        std::vector<int> slots(static_cast<std::size_t>(body));
        for (int p = 0; p < body; ++p) slots[static_cast<std::size_t>(p)] = p;
        for (int p = 0; p < total; ++p) {  // partial shuffle for marker slots
            const auto j = p + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(body - p)));
            std::swap(slots[static_cast<std::size_t>(p)], slots[static_cast<std::size_t>(j)]);
        }
        for (int p = 0; p < major; ++p)
            tokens[static_cast<std::size_t>(slots[static_cast<std::size_t>(p)])] = a_major ? kMarkerA : kMarkerB;
        for (int p = major; p < total; ++p)
            tokens[static_cast<std::size_t>(slots[static_cast<std::size_t>(p)])] = a_major ? kMarkerB : kMarkerA;
        suite.tp.push_back({std::move(tokens), a_major ? kMarkerA : kMarkerB});
    }

    // Order task: one A, one B, alternate which comes first.
    for (int i = 0; i < tr_count; ++i) {
        const bool a_first = (i % 2) == 0;
        std::vector<int> tokens(static_cast<std::size_t>(seq_len));
        for (int p = 0; p < body; ++p) tokens[static_cast<std::size_t>(p)] = filler();
        tokens[static_cast<std::size_t>(body)] = kQuery;
        const int p1 = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(body - 1)));
        const int p2 = p1 + 1 +
                       static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(body - 1 - p1)));
        tokens[static_cast<std::size_t>(p1)] = a_first ? kMarkerA : kMarkerB;
        tokens[static_cast<std::size_t>(p2)] = a_first ? kMarkerB : kMarkerA;
        suite.tr.push_back({std::move(tokens), a_first ? kMarkerA : kMarkerB});
    }
    return suite;
}

double proxy_accuracy(const LogitsFn& logits_fn, const std::vector<ProxyInstance>& instances,
                      const std::vector<int>& option_tokens, long* correct_out) {
    if (instances.empty()) throw data_error("empty task set");
    long correct = 0;
    for (const auto& inst : instances) {
        const Eigen::VectorXd logits = logits_fn(inst.tokens);
        int best = option_tokens.front();
        double best_v = logits[option_tokens.front()];
        for (const int opt : option_tokens) {
            if (logits[opt] > best_v) {
                best_v = logits[opt];
                best = opt;
            }
        }
        if (best == inst.label) ++correct;
    }
    if (correct_out) *correct_out = correct;
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

TaskAccuracies proxy_eval_fn(const LogitsFn& logits_fn, const ProxyTaskSuite& suite) {
    TaskAccuracies acc;
    long correct = 0;
    acc.acc_tp = proxy_accuracy(logits_fn, suite.tp, suite.option_tokens, &correct);
    acc.tp_correct = correct;
    acc.tp_total = static_cast<long>(suite.tp.size());
    acc.acc_tr = proxy_accuracy(logits_fn, suite.tr, suite.option_tokens, &correct);
    acc.tr_correct = correct;
    acc.tr_total = static_cast<long>(suite.tr.size());
    return acc;
}

TaskAccuracies proxy_eval(const ToyAttentionModel& model, const ProxyTaskSuite& suite) {
    if (model.cfg.vocab < suite.vocab)
        throw data_error("model vocabulary is smaller than the suite vocabulary");
    return proxy_eval_fn(
        [&](std::span<const int> tokens) {
            const Eigen::MatrixXd logits = toy_forward(model, tokens);
            return Eigen::VectorXd(logits.row(logits.rows() - 1));
        },
        suite);
}

double fit_toy_model(ToyAttentionModel& model, const std::vector<ProxyInstance>& instances,
                     const std::vector<int>& option_tokens, int steps, double learning_rate) {
    if (instances.empty()) throw data_error("empty task set");
    double loss = 0.0;
    for (int step = 0; step < steps; ++step) {
        loss = 0.0;
        ToyWeightGrads total;
        bool first = true;
        for (const auto& inst : instances) {
            const auto trace = toy_forward_embedded(model, model.embed(inst.tokens));
            const Eigen::Index last = trace.logits.rows() - 1;
            // softmax cross-entropy over the option tokens only
            double denom = 0.0;
            for (const int opt : option_tokens) denom += std::exp(trace.logits(last, opt));
            loss += -trace.logits(last, inst.label) + std::log(denom);
            Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(trace.logits.rows(), trace.logits.cols());
            for (const int opt : option_tokens)
                dlogits(last, opt) = std::exp(trace.logits(last, opt)) / denom;
            dlogits(last, inst.label) -= 1.0;
            ToyWeightGrads wg;
            toy_backward_to_input(model, trace, dlogits, &wg);
            if (first) {
                total = std::move(wg);
                first = false;
            } else {
                total.readout += wg.readout;
                for (std::size_t l = 0; l < total.layers.size(); ++l) {
                    total.layers[l].wq += wg.layers[l].wq;
                    total.layers[l].wk += wg.layers[l].wk;
                    total.layers[l].wv += wg.layers[l].wv;
                    total.layers[l].wo += wg.layers[l].wo;
                }
            }
        }
        const double scale = learning_rate / static_cast<double>(instances.size());
        model.readout -= scale * total.readout;
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            model.layers[l].wq -= scale * total.layers[l].wq;
            model.layers[l].wk -= scale * total.layers[l].wk;
            model.layers[l].wv -= scale * total.layers[l].wv;
            model.layers[l].wo -= scale * total.layers[l].wo;
        }
        loss /= static_cast<double>(instances.size());
    }
    return loss;
}

}  // namespace attnmerge
