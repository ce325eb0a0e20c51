#include "attnmerge/recipe.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"
#include "json.hpp"

namespace attnmerge {

namespace {

void check_alpha(double alpha) {
    if (!(alpha >= 0.5 && alpha <= 1.0))
        throw usage_error("alpha must lie in [0.5, 1.0], got " + format_double(alpha));
}

Eigen::VectorXf blend(const Eigen::VectorXf& m, const Eigen::VectorXf& n, double w) {
    // Double accumulate, single rounding to F32; exact at w = 1 and w = 0.5.
    return (w * m.cast<double>() + (1.0 - w) * n.cast<double>()).cast<float>();
}

}  // namespace

GatingVector clamp01(const GatingVector& g) { return g.cwiseMax(0.0).cwiseMin(1.0); }

std::string DiscreteRecipe::bitstring() const {
    std::string s(gates.size(), '0');
    for (std::size_t i = 0; i < gates.size(); ++i) s[i] = gates[i] ? '1' : '0';
    return s;
}

std::vector<std::uint8_t> threshold(const GatingVector& g) {
    std::vector<std::uint8_t> gates(static_cast<std::size_t>(g.size()));
    for (Eigen::Index i = 0; i < g.size(); ++i) gates[static_cast<std::size_t>(i)] = g[i] >= 0.5 ? 1 : 0;
    return gates;
}

DiscreteRecipe threshold_recipe(const GatingVector& g, double alpha) {
    check_alpha(alpha);
    return DiscreteRecipe{threshold(clamp01(g)), alpha};
}

LayerParamGroup merge_layer(const LayerParamGroup& theta_m, const LayerParamGroup& theta_n,
                            bool gate, double alpha) {
    check_alpha(alpha);
    if (theta_m.tensors.size() != theta_n.tensors.size())
        throw data_error("merge_layer: tensor count mismatch");
    const double w = gate ? alpha : 1.0 - alpha;
    LayerParamGroup out;
    out.layer_index = theta_m.layer_index;
    out.tensors.reserve(theta_m.tensors.size());
    for (std::size_t i = 0; i < theta_m.tensors.size(); ++i) {
        const auto& tm = theta_m.tensors[i];
        const auto& tn = theta_n.tensors[i];
        if (tm.name != tn.name || tm.values.size() != tn.values.size())
            throw data_error("merge_layer: shape mismatch for tensor '" + tm.name + "'");
        out.tensors.push_back({tm.name, blend(tm.values, tn.values, w)});
    }
    return out;
}

Checkpoint apply_recipe(const Checkpoint& m, const Checkpoint& n, const DiscreteRecipe& r) {
    check_alpha(r.alpha);
    check_merge_compatible(m, n);
    if (r.layer_count() != m.layer_count)
        throw data_error("recipe has " + std::to_string(r.layer_count()) + " gates but checkpoints have " +
                         std::to_string(m.layer_count) + " layers");

    bool all_f32 = true;
    for (int l = 0; l < m.layer_count && all_f32; ++l) {
        for (const auto& name : m.layer_names[static_cast<std::size_t>(l)]) {
            if (m.meta(name).dtype != "F32" || n.meta(name).dtype != "F32") {
                all_f32 = false;
                break;
            }
        }
    }

    if (all_f32) {
        Checkpoint out = m;
        for (int l = 0; l < m.layer_count; ++l) {
            const auto merged = merge_layer(layer_params(m, l), layer_params(n, l),
                                            r.gates[static_cast<std::size_t>(l)], r.alpha);
            for (const auto& t : merged.tensors)
                out.set_f32(t.name, {t.values.data(), static_cast<std::size_t>(t.values.size())});
        }
        return out;
    }

    // Some layer tensor is F16/BF16: normalize the merged ones to F32, which
    // changes sizes, so the whole checkpoint is repacked canonically.
    CheckpointBuilder builder;
    for (const auto& [k, v] : m.extra) builder.metadata(k, v);
    std::set<std::string> merged_names;
    for (int l = 0; l < m.layer_count; ++l) {
        const auto merged = merge_layer(layer_params(m, l), layer_params(n, l),
                                        r.gates[static_cast<std::size_t>(l)], r.alpha);
        for (const auto& t : merged.tensors) {
            builder.add_f32(t.name, m.meta(t.name).shape,
                            {t.values.data(), static_cast<std::size_t>(t.values.size())});
            merged_names.insert(t.name);
        }
    }
    for (const auto& [name, meta] : m.metas) {
        if (!merged_names.count(name)) builder.add_raw(name, meta.dtype, meta.shape, m.raw(name));
    }
    builder.layer_template(m.name_template);
    return builder.build();
}

std::set<int> modified_layers(const DiscreteRecipe& r) {
    std::set<int> out;
    if (r.alpha == 1.0) {
        for (int l = 0; l < r.layer_count(); ++l)
            if (!r.gates[static_cast<std::size_t>(l)]) out.insert(l);
    } else {
        for (int l = 0; l < r.layer_count(); ++l) out.insert(l);
    }
    return out;
}

std::set<int> n_dominated_layers(const DiscreteRecipe& r) {
    std::set<int> out;
    for (int l = 0; l < r.layer_count(); ++l)
        if (!r.gates[static_cast<std::size_t>(l)]) out.insert(l);
    return out;
}

DiscreteRecipe all_layer_recipe(int layer_count, double alpha) {
    check_alpha(alpha);
    if (layer_count < 1) throw usage_error("layer count must be >= 1");
    return DiscreteRecipe{std::vector<std::uint8_t>(static_cast<std::size_t>(layer_count), 0), alpha};
}

DiscreteRecipe random_k_recipe(int layer_count, int k, double alpha, std::uint64_t seed) {
    check_alpha(alpha);
    if (layer_count < 1) throw usage_error("layer count must be >= 1");
    if (k < 0 || k > layer_count)
        throw usage_error("k must lie in [0, L], got k=" + std::to_string(k) + " with L=" +
                          std::to_string(layer_count));
    std::mt19937_64 rng(splitmix64(seed));
    std::vector<int> idx(static_cast<std::size_t>(layer_count));
    for (int i = 0; i < layer_count; ++i) idx[static_cast<std::size_t>(i)] = i;
    // Partial Fisher-Yates: the first k entries are the selected layers.
    for (int i = 0; i < k; ++i) {
        const auto j = i + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(layer_count - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    DiscreteRecipe r{std::vector<std::uint8_t>(static_cast<std::size_t>(layer_count), 1), alpha};
    for (int i = 0; i < k; ++i) r.gates[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 0;
    return r;
}

void write_recipe_file(const RecipeRecord& rec, const std::string& path,
                       const std::string& command_echo) {
    nlohmann::ordered_json j;
    j["alpha"] = rec.recipe.alpha;
    if (rec.continuous_gates) {
        std::vector<double> g(rec.continuous_gates->data(),
                              rec.continuous_gates->data() + rec.continuous_gates->size());
        j["gates"] = g;
    } else {
        j["gates"] = nullptr;
    }
    std::vector<int> discrete(rec.recipe.gates.begin(), rec.recipe.gates.end());
    j["discrete"] = discrete;
    j["objective"] = std::isnan(rec.objective) ? nlohmann::ordered_json() : nlohmann::ordered_json(rec.objective);
    j["acc_tp"] = std::isnan(rec.acc_tp) ? nlohmann::ordered_json() : nlohmann::ordered_json(rec.acc_tp);
    j["acc_tr"] = std::isnan(rec.acc_tr) ? nlohmann::ordered_json() : nlohmann::ordered_json(rec.acc_tr);
    j["lambda"] = std::isnan(rec.lambda) ? nlohmann::ordered_json() : nlohmann::ordered_json(rec.lambda);
    j["base_tp"] = std::isnan(rec.base_tp) ? nlohmann::ordered_json() : nlohmann::ordered_json(rec.base_tp);
    j["evals_used"] = rec.evals_used;
    j["seed"] = rec.seed;
    if (!command_echo.empty()) j["command"] = command_echo;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot open recipe file for writing: " + path);
    out << j.dump(2) << "\n";
}

RecipeRecord read_recipe_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open recipe file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed recipe file " + path + ": " + e.what());
    }
    RecipeRecord rec;
    try {
        rec.recipe.alpha = j.at("alpha").get<double>();
        const auto discrete = j.at("discrete").get<std::vector<int>>();
        rec.recipe.gates.clear();
        for (const int b : discrete) {
            if (b != 0 && b != 1) throw data_error("recipe gates must be 0 or 1");
            rec.recipe.gates.push_back(static_cast<std::uint8_t>(b));
        }
        if (j.contains("gates") && !j["gates"].is_null()) {
            const auto g = j["gates"].get<std::vector<double>>();
            if (g.size() != rec.recipe.gates.size())
                throw data_error("continuous gates length differs from discrete gates");
            rec.continuous_gates = Eigen::Map<const Eigen::VectorXd>(g.data(),
                                                                     static_cast<Eigen::Index>(g.size()));
        }
        auto opt = [&](const char* key) {
            return j.contains(key) && !j[key].is_null() ? j[key].get<double>()
                                                        : std::numeric_limits<double>::quiet_NaN();
        };
        rec.objective = opt("objective");
        rec.acc_tp = opt("acc_tp");
        rec.acc_tr = opt("acc_tr");
        rec.lambda = opt("lambda");
        rec.base_tp = opt("base_tp");
        if (j.contains("evals_used") && !j["evals_used"].is_null())
            rec.evals_used = j["evals_used"].get<long>();
        if (j.contains("seed") && !j["seed"].is_null()) rec.seed = j["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed recipe file " + path + ": " + e.what());
    }
    check_alpha(rec.recipe.alpha);
    if (!std::isnan(rec.objective) && !std::isnan(rec.acc_tr) && !std::isnan(rec.acc_tp) &&
        !std::isnan(rec.lambda) && !std::isnan(rec.base_tp)) {
        const double expect = rec.acc_tr - rec.lambda * std::max(0.0, rec.base_tp - rec.acc_tp);
        if (std::abs(expect - rec.objective) > 1e-9)
            throw data_error("recipe file " + path + ": objective is inconsistent with its accuracies");
    }
    return rec;
}

}  // namespace attnmerge
