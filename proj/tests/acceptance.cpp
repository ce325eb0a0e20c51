// Acceptance suite: every release gate as an executable check, one PASS/FAIL
// line each. Run via `ctest -R acceptance` or directly; exits non-zero if any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <vector>

#include "attnmerge/attribution.hpp"
#include "attnmerge/cmaes.hpp"
#include "attnmerge/evaluator.hpp"
#include "attnmerge/intervention.hpp"
#include "attnmerge/objective.hpp"
#include "attnmerge/recipe.hpp"
#include "attnmerge/search.hpp"
#include "attnmerge/tensor_store.hpp"
#include "attnmerge/toy_eval.hpp"
#include "attnmerge/toy_model.hpp"
#include "attnmerge/util.hpp"
#include "helpers.hpp"

using namespace attnmerge;

namespace {

struct Criterion {
    std::string label;
    std::function<void()> run;
    double time_limit_s = 0;  // 0 = no limit
};

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define REQUIRE_TRUE(cond)                                                               \
    do {                                                                                 \
        if (!(cond)) throw Failure(std::string("assertion failed: ") + #cond + " at " +  \
                                   __FILE__ + ":" + std::to_string(__LINE__));           \
    } while (0)

std::vector<std::uint8_t> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Failure("cannot read " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double ulps_apart(float got, double reference) {
    const float ref = static_cast<float>(reference);
    if (got == ref) return std::abs(reference - static_cast<double>(ref)) == 0.0 ? 0.0 : 0.5;
    const float lo = std::min(got, ref), hi = std::max(got, ref);
    double ulps = 0;
    for (float x = lo; x < hi && ulps < 16; x = std::nextafter(x, hi)) ++ulps;
    return ulps;
}

// ---------------------------------------------------------------------- 1
void merge_math_exactness() {
    std::mt19937_64 rng(4242);
    const double alphas[] = {1.0, 0.5, 0.9, 0.8, 0.7, 0.6};
    for (int trial = 0; trial < 100; ++trial) {
        const int layers = 2 + static_cast<int>(uniform_below(rng, 5));
        const int dim = 1 + static_cast<int>(uniform_below(rng, 12));
        CheckpointBuilder bm, bn;
        for (int l = 0; l < layers; ++l) {
            std::vector<float> mv(static_cast<std::size_t>(dim)), nv(static_cast<std::size_t>(dim));
            for (auto& v : mv) v = static_cast<float>(uniform_unit(rng) * 20.0 - 10.0);
            for (auto& v : nv) v = static_cast<float>(uniform_unit(rng) * 20.0 - 10.0);
            bm.add_f32("blk." + std::to_string(l) + ".attn", {dim}, mv);
            bn.add_f32("blk." + std::to_string(l) + ".attn", {dim}, nv);
        }
        bm.layer_template("blk.{i}.attn");
        bn.layer_template("blk.{i}.attn");
        const Checkpoint m = bm.build(), n = bn.build();

        const double alpha = alphas[trial % 6];
        DiscreteRecipe r{std::vector<std::uint8_t>(static_cast<std::size_t>(layers), 0), alpha};
        for (auto& g : r.gates) g = static_cast<std::uint8_t>(uniform_below(rng, 2));
        const Checkpoint merged = apply_recipe(m, n, r);

        for (int l = 0; l < layers; ++l) {
            const std::string name = "blk." + std::to_string(l) + ".attn";
            const Eigen::VectorXf got = merged.tensor_f32(name);
            const Eigen::VectorXf vm = m.tensor_f32(name);
            const Eigen::VectorXf vn = n.tensor_f32(name);
            const long double w = r.gates[static_cast<std::size_t>(l)] ? alpha : 1.0 - alpha;
            for (int i = 0; i < dim; ++i) {
                const long double reference =
                    w * static_cast<long double>(vm[i]) + (1.0L - w) * static_cast<long double>(vn[i]);
                if (alpha == 1.0 || alpha == 0.5) {
                    REQUIRE_TRUE(got[i] == static_cast<float>(static_cast<double>(reference)));
                } else {
                    REQUIRE_TRUE(ulps_apart(got[i], static_cast<double>(reference)) <= 1.0);
                }
            }
        }

        // identity recipe: byte-identical output
        const DiscreteRecipe identity{
            std::vector<std::uint8_t>(static_cast<std::size_t>(layers), 1), 1.0};
        REQUIRE_TRUE(serialize_checkpoint(apply_recipe(m, n, identity)) == serialize_checkpoint(m));
    }
}

// ---------------------------------------------------------------------- 2
void objective_fixtures() {
    const ObjectiveConfig cfg{1.0, 0.600};
    REQUIRE_TRUE(objective_score(cfg, {0.618, 0.497, -1, -1, -1, -1}) == 0.497);
    const double degradation_value = tp_degradation(cfg, 0.589);
    REQUIRE_TRUE(degradation_value == std::max(0.0, 0.600 - 0.589));
    REQUIRE_TRUE(std::abs(degradation_value - 0.011) < 1e-12);
    const double acc_tr = 0.384;
    REQUIRE_TRUE(std::abs(objective_score(cfg, {0.589, acc_tr, -1, -1, -1, -1}) -
                          (acc_tr - 0.011)) < 1e-12);
}

// ---------------------------------------------------------------------- 3
void population_size_formula() {
    REQUIRE_TRUE(default_pop_size(28) == 13);
    REQUIRE_TRUE(default_pop_size(36) == 14);
    REQUIRE_TRUE(default_pop_size(1) == 4);
}

// ---------------------------------------------------------------------- 4
void cma_sphere() {
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        CmaConfig cfg;
        cfg.dim = 8;
        cfg.seed = seed;
        cfg.max_evals = 1600;
        const RunResult r = cma_run(cfg, [](const Eigen::VectorXd& x) {
            return -(x.array() - 0.7).matrix().squaredNorm();
        });
        REQUIRE_TRUE(r.evals <= 1600);
        if ((r.best.array() - 0.7).matrix().norm() <= 1e-3) ++hits;
    }
    REQUIRE_TRUE(hits >= 19);
}

// ---------------------------------------------------------------------- 5
void planted_recovery() {
    const int layers = 12;
    const std::set<int> planted{1, 4, 8, 10};
    const std::vector<double> alphas{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const PlantedLandscape land =
            make_planted_landscape(900 + seed, layers, planted, 16, 1.0);
        LandscapeEvaluator evaluator(land);
        SearchConfig cfg;
        cfg.alpha_set = alphas;
        cfg.budget_per_alpha = 1600;
        cfg.seed = seed;
        EvalCache cache;
        const SearchResult result = search_all(cfg, land.m, land.n, evaluator, cache);

        // brute-force optimum over every discrete recipe at every alpha
        const ObjectiveConfig ocfg{cfg.lambda, result.base.acc_tp};
        double brute = -1e18;
        for (const double alpha : alphas) {
            for (std::uint32_t bits = 0; bits < (1u << layers); ++bits) {
                DiscreteRecipe r{std::vector<std::uint8_t>(layers, 0), alpha};
                for (int l = 0; l < layers; ++l)
                    r.gates[static_cast<std::size_t>(l)] = (bits >> l) & 1u;
                brute = std::max(brute, objective_score(
                                            ocfg, landscape_eval(apply_recipe(land.m, land.n, r),
                                                                 land)));
            }
        }
        if (n_dominated_layers(result.global_best.recipe) == planted &&
            std::abs(result.global_best.objective - brute) <= 1e-9)
            ++hits;
    }
    REQUIRE_TRUE(hits >= 9);
}

// ---------------------------------------------------------------------- 6
void cache_budget_accounting() {
    testutil::TempDir dir("acc_cache");
    const std::set<int> planted{2, 5};
    const PlantedLandscape land = make_planted_landscape(321, 10, planted, 8, 1.0);
    LandscapeEvaluator evaluator(land);
    SearchConfig cfg;
    cfg.alpha_set = {1.0, 0.8};
    cfg.budget_per_alpha = 300;
    cfg.seed = 2;
    cfg.out_dir = dir.file("run");
    EvalCache cache;
    const SearchResult first = search_all(cfg, land.m, land.n, evaluator, cache);

    REQUIRE_TRUE(static_cast<std::size_t>(first.total_invocations) == cache.size());
    for (const auto& a : first.per_alpha) REQUIRE_TRUE(a.invocations <= cfg.budget_per_alpha);

    const SearchResult again =
        resume_search(cfg, land.m, land.n, evaluator, cache_path_for(cfg.out_dir));
    REQUIRE_TRUE(again.total_invocations == 0);
    REQUIRE_TRUE(again.global_best.recipe.gates == first.global_best.recipe.gates);
    REQUIRE_TRUE(again.global_best.recipe.alpha == first.global_best.recipe.alpha);
    REQUIRE_TRUE(again.global_best.objective == first.global_best.objective);
    REQUIRE_TRUE(again.global_best.acc_tp == first.global_best.acc_tp);
    REQUIRE_TRUE(again.global_best.acc_tr == first.global_best.acc_tr);
    for (std::size_t i = 0; i < again.per_alpha.size(); ++i) {
        REQUIRE_TRUE(again.per_alpha[i].best.objective == first.per_alpha[i].best.objective);
        REQUIRE_TRUE(again.per_alpha[i].best.recipe.gates == first.per_alpha[i].best.recipe.gates);
    }
}

// ---------------------------------------------------------------------- 7
void masking_identity_and_ordering() {
    const std::set<int> planted{2, 5};
    const ToyAttentionModel model = make_planted_toy_model(7, {8, 16, 32}, planted, 0.15);
    const ProxyTaskSuite suite = make_proxy_suite(2, 30, 60);

    // bitwise identity at kappa = 1
    const std::vector<int> tokens = suite.tr.front().tokens;
    const Eigen::MatrixXd masked = masked_forward(model, {planted, 1.0}, tokens);
    const Eigen::MatrixXd plain = toy_forward(model, tokens);
    REQUIRE_TRUE((masked - plain).cwiseAbs().maxCoeff() == 0.0);

    const DegradationCurve curve = mask_sweep(toy_mask_metrics(model, planted, suite));
    std::size_t k1 = curve.kappas.size(), k0 = curve.kappas.size();
    for (std::size_t i = 0; i < curve.kappas.size(); ++i) {
        if (curve.kappas[i] == 1.0) k1 = i;
        if (curve.kappas[i] == 0.0) k0 = i;
    }
    REQUIRE_TRUE(k1 < curve.kappas.size() && k0 < curve.kappas.size());
    double tp_drop = 0, tr_drop = 0;
    for (const auto& series : curve.series) {
        REQUIRE_TRUE(series.deltas[k1] == 0.0);
        if (series.metric == "TP") tp_drop = series.deltas[k0];
        if (series.metric == "TR") tr_drop = series.deltas[k0];
    }
    REQUIRE_TRUE(tr_drop > tp_drop);
}

// ---------------------------------------------------------------------- 8
void attribution_gradient_check() {
    const ToyAttentionModel model = ToyAttentionModel::random({12, 16, 32}, 2025);
    NormalSampler gauss(808);
    Eigen::MatrixXd frames(8 * 4, 16);
    for (Eigen::Index r = 0; r < frames.rows(); ++r)
        for (Eigen::Index c = 0; c < frames.cols(); ++c) frames(r, c) = 0.5 * gauss.next();
    AttributionQuery q;
    q.model = &model;
    q.frames = frames;
    q.frame_count = 8;
    q.tokens_per_frame = 4;
    q.prefix_tokens = {6, 9, 3};
    q.options = {1, 2, 4};
    q.chosen = 2;

    const Eigen::VectorXd reverse = frame_importance(q, GradMode::reverse);
    const Eigen::VectorXd fd = frame_importance(q, GradMode::finite_difference, 1e-3);
    for (int t = 0; t < 8; ++t) {
        const double denom = std::max(std::abs(reverse[t]), 1e-12);
        REQUIRE_TRUE(std::abs(reverse[t] - fd[t]) / denom <= 1e-4);
    }

    const Eigen::VectorXd norm = normalize_importance(reverse);
    REQUIRE_TRUE(norm.minCoeff() == 0.0);
    REQUIRE_TRUE(norm.maxCoeff() == 1.0);

    Eigen::VectorXd impulse(5);
    impulse << 0, 0, 1, 0, 0;
    const Eigen::VectorXd smoothed = smooth_importance(impulse, 5);
    const double expected[] = {1.0 / 3, 1.0 / 4, 1.0 / 5, 1.0 / 4, 1.0 / 3};
    for (int i = 0; i < 5; ++i) REQUIRE_TRUE(std::abs(smoothed[i] - expected[i]) < 1e-15);
}

// ---------------------------------------------------------------------- 9
void format_round_trip() {
    testutil::TempDir dir("acc_roundtrip");
    std::mt19937_64 rng(20260810);
    for (int trial = 0; trial < 100; ++trial) {
        const Checkpoint ck = testutil::random_checkpoint(rng);
        const std::string p1 = dir.file("a.ckpt"), p2 = dir.file("b.ckpt");
        write_checkpoint(ck, p1);
        write_checkpoint(read_checkpoint(p1), p2);
        REQUIRE_TRUE(file_bytes(p1) == file_bytes(p2));
    }
}

// ---------------------------------------------------------------------- 10
void reference_fixtures() {
    const std::string fixtures = testutil::env_or_fail("ATTNMERGE_FIXTURES");
    REQUIRE_TRUE(!fixtures.empty());
    struct Expect {
        std::string file;
        int layers;
        double alpha;
        std::set<int> selected;
    };
    const std::vector<Expect> expected = {
        {"recipe_longva_7b.json", 28, 1.0, {1, 5, 7, 8, 11, 13, 14, 16, 19, 20, 23}},
        {"recipe_internvl3_8b.json", 28, 0.9, {4, 7, 12, 14, 16, 17, 18, 24, 26}},
        {"recipe_qwen3_vl_4b.json",
         36,
         1.0,
         {0, 4, 8, 10, 13, 17, 18, 21, 23, 26, 28, 29, 30, 31, 32, 35}},
    };
    const std::size_t counts[] = {11, 9, 16};

    testutil::TempDir dir("acc_fixture");
    const std::string cli = testutil::env_or_fail("ATTNMERGE_CLI");
    REQUIRE_TRUE(!cli.empty());

    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& e = expected[i];
        const RecipeRecord rec = read_recipe_file(fixtures + "/" + e.file);
        REQUIRE_TRUE(rec.recipe.layer_count() == e.layers);
        REQUIRE_TRUE(rec.recipe.alpha == e.alpha);
        REQUIRE_TRUE(n_dominated_layers(rec.recipe) == e.selected);
        REQUIRE_TRUE(n_dominated_layers(rec.recipe).size() == counts[i]);

        // synthetic parents of the right depth, merged through the CLI
        const std::string m_path = dir.file("m" + std::to_string(i) + ".ckpt");
        const std::string n_path = dir.file("n" + std::to_string(i) + ".ckpt");
        const PlantedLandscape land =
            make_planted_landscape(7000 + i, e.layers, {0}, 8, 1.0);
        write_checkpoint(land.m, m_path);
        write_checkpoint(land.n, n_path);
        const std::string merged_path = dir.file("out" + std::to_string(i) + ".ckpt");
        const std::string cmd = cli + " merge --model-m " + m_path + " --model-n " + n_path +
                                " --recipe " + fixtures + "/" + e.file + " --out " + merged_path +
                                " >/dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        REQUIRE_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);

        // documented modified-layer semantics: at alpha = 1 exactly the
        // selected layers differ; below 1 every layer moves and the selected
        // ones land nearer to N
        const Checkpoint merged = read_checkpoint(merged_path);
        const Checkpoint m = read_checkpoint(m_path), n = read_checkpoint(n_path);
        for (int l = 0; l < e.layers; ++l) {
            const std::string name = "blk." + std::to_string(l) + ".attn";
            const Eigen::VectorXf got = merged.tensor_f32(name);
            const bool selected = e.selected.count(l) != 0;
            if (e.alpha == 1.0) {
                REQUIRE_TRUE((got != m.tensor_f32(name)) == selected);
            } else {
                REQUIRE_TRUE(got != m.tensor_f32(name));
                const double to_m = (got - m.tensor_f32(name)).norm();
                const double to_n = (got - n.tensor_f32(name)).norm();
                REQUIRE_TRUE(selected == (to_n < to_m));
            }
        }
    }
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"merge-math exactness (100 randomized cases, exact at alpha 1.0/0.5, <=1 ulp otherwise)",
         merge_math_exactness, 10.0},
        {"objective fixtures (replay values: F=0.497 exact, degradation 0.011)", objective_fixtures,
         0},
        {"population-size formula (28->13, 36->14, 1->4)", population_size_formula, 0},
        {"CMA-ES sphere sanity (>=19/20 seeds reach 1e-3 within 1600 evals)", cma_sphere, 30.0},
        {"planted-recipe recovery (>=9/10 seeds match the brute-force optimum)", planted_recovery,
         120.0},
        {"cache/budget accounting (invocations = distinct keys; cached rerun costs 0)",
         cache_budget_accounting, 0},
        {"masking identity and ordering (bitwise at kappa=1; TR drops harder at kappa=0)",
         masking_identity_and_ordering, 0},
        {"attribution gradient check (reverse vs central differences <= 1e-4)",
         attribution_gradient_check, 30.0},
        {"format round-trip (100 randomized checkpoints byte-identical)", format_round_trip, 0},
        {"reference recipe fixtures (load, validate 11/9/16 layers, drive merge)", reference_fixtures,
         0},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto& c = criteria[i];
        const auto t0 = std::chrono::steady_clock::now();
        std::string error;
        try {
            c.run();
        } catch (const std::exception& e) {
            error = e.what();
        }
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (error.empty() && c.time_limit_s > 0 && elapsed > c.time_limit_s) {
            std::ostringstream msg;
            msg << "exceeded the " << c.time_limit_s << " s budget (" << elapsed << " s)";
            error = msg.str();
        }
        const bool ok = error.empty();
        failures += !ok;
        std::printf("[%s] criterion %zu: %s (%.2fs)%s%s\n", ok ? "PASS" : "FAIL", i + 1,
                    c.label.c_str(), elapsed, ok ? "" : " -- ", error.c_str());
    }
    if (failures == 0) {
        std::printf("acceptance: all %zu criteria passed\n", criteria.size());
    } else {
        std::printf("acceptance: %d criteria FAILED\n", failures);
    }
    return failures == 0 ? 0 : 1;
}
