#include <cmath>
#include <fstream>
#include <filesystem>

#include "attnmerge/errors.hpp"
#include "attnmerge/evaluator.hpp"
#include "attnmerge/search.hpp"
#include "attnmerge/toy_eval.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace attnmerge;

namespace {

// Brute force over every discrete recipe for each alpha, under the same
// tie-break the driver uses.
struct BruteBest {
    DiscreteRecipe recipe;
    double objective = 0;
};
BruteBest brute_force(const PlantedLandscape& land, const std::vector<double>& alphas,
                      const ObjectiveConfig& cfg) {
    BruteBest best;
    bool any = false;
    const int layers = land.layer_count;
    for (const double alpha : alphas) {
        for (std::uint32_t bits = 0; bits < (1u << layers); ++bits) {
            DiscreteRecipe r{std::vector<std::uint8_t>(static_cast<std::size_t>(layers), 0), alpha};
            for (int l = 0; l < layers; ++l)
                r.gates[static_cast<std::size_t>(l)] = (bits >> l) & 1u;
            const double f =
                objective_score(cfg, landscape_eval(apply_recipe(land.m, land.n, r), land));
            if (!any || recipe_better(f, r, best.objective, best.recipe)) {
                any = true;
                best.recipe = r;
                best.objective = f;
            }
        }
    }
    return best;
}

// Evaluator that decodes (alpha, gates) back out of the merged parameters and
// scores a closed form whose optimum sits at alpha = 0.9 with a known gate
// pattern; perception is flat so no penalty interferes.
class AlphaPeakEvaluator : public Evaluator {
  public:
    AlphaPeakEvaluator(PlantedLandscape land, std::vector<std::uint8_t> target)
        : land_(std::move(land)), target_(std::move(target)) {}

    EvaluatorCaps handshake() override { return {{"TP", "TR"}, std::numeric_limits<int>::max()}; }

    std::map<std::string, double> evaluate(const Checkpoint& ck,
                                           const std::vector<std::string>& tasks) override {
        const TaskAccuracies a = evaluate_tasks(ck);
        std::map<std::string, double> out;
        for (const auto& t : tasks) out[t] = t == "TP" ? a.acc_tp : a.acc_tr;
        return out;
    }

    TaskAccuracies evaluate_tasks(const Checkpoint& ck) override {
        double alpha_sum = 0;
        int mismatches = 0;
        for (int l = 0; l < land_.layer_count; ++l) {
            const std::string name = "blk." + std::to_string(l) + ".attn";
            const Eigen::VectorXd theta = ck.tensor_f32(name).cast<double>();
            const Eigen::VectorXd m = land_.m.tensor_f32(name).cast<double>();
            const Eigen::VectorXd n = land_.n.tensor_f32(name).cast<double>();
            const double w = (theta - n).dot(m - n) / (m - n).squaredNorm();
            const bool gate = w >= 0.5;
            alpha_sum += gate ? w : 1.0 - w;
            mismatches += gate != static_cast<bool>(target_[static_cast<std::size_t>(l)]);
        }
        const double alpha = alpha_sum / land_.layer_count;
        TaskAccuracies acc;
        acc.acc_tp = 1.0;
        acc.acc_tr = (1.0 - std::abs(alpha - 0.9)) *
                     (1.0 - static_cast<double>(mismatches) / land_.layer_count);
        return acc;
    }

    const PlantedLandscape& landscape() const { return land_; }
    const std::vector<std::uint8_t>& target() const { return target_; }

  private:
    PlantedLandscape land_;
    std::vector<std::uint8_t> target_;
};

// Evaluator wrapper that fails hard after a fixed number of calls.
class InterruptingEvaluator : public Evaluator {
  public:
    InterruptingEvaluator(Evaluator& inner, int allowed) : inner_(inner), allowed_(allowed) {}
    EvaluatorCaps handshake() override { return inner_.handshake(); }
    std::map<std::string, double> evaluate(const Checkpoint& ck,
                                           const std::vector<std::string>& tasks) override {
        if (++calls_ > allowed_) throw evaluator_error("injected interruption");
        return inner_.evaluate(ck, tasks);
    }
    TaskAccuracies evaluate_tasks(const Checkpoint& ck) override {
        if (++calls_ > allowed_) throw evaluator_error("injected interruption");
        return inner_.evaluate_tasks(ck);
    }

  private:
    Evaluator& inner_;
    int allowed_;
    int calls_ = 0;
};

SearchConfig small_config(const std::string& out_dir) {
    SearchConfig cfg;
    cfg.alpha_set = {1.0, 0.9};
    cfg.budget_per_alpha = 400;
    cfg.seed = 5;
    cfg.out_dir = out_dir;
    cfg.command_echo = "attnmerge test";
    return cfg;
}

bool records_equal(const RecipeRecord& a, const RecipeRecord& b) {
    return a.recipe.gates == b.recipe.gates && a.recipe.alpha == b.recipe.alpha &&
           a.objective == b.objective && a.acc_tp == b.acc_tp && a.acc_tr == b.acc_tr &&
           a.lambda == b.lambda && a.base_tp == b.base_tp;
}

}  // namespace

TEST_CASE("planted recovery end to end") {
    const std::set<int> planted{2, 5, 7, 9};
    PlantedLandscape land = make_planted_landscape(1234, 12, planted, 16, 1.0);
    LandscapeEvaluator evaluator(land);
    testutil::TempDir dir("search_planted");

    SearchConfig cfg;
    cfg.alpha_set = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    cfg.budget_per_alpha = 1600;
    cfg.seed = 7;
    cfg.out_dir = dir.file("run");
    EvalCache cache;
    const SearchResult result = search_all(cfg, land.m, land.n, evaluator, cache);

    CHECK(result.base.acc_tp == 1.0);
    CHECK(n_dominated_layers(result.global_best.recipe) == planted);
    CHECK(result.global_best.recipe.alpha == 1.0);

    const ObjectiveConfig ocfg{cfg.lambda, result.base.acc_tp};
    const BruteBest brute = brute_force(land, cfg.alpha_set, ocfg);
    CHECK(std::abs(result.global_best.objective - brute.objective) <= 1e-9);
    CHECK(result.global_best.recipe.gates == brute.recipe.gates);

    SUBCASE("outputs exist and reload") {
        CHECK(std::filesystem::exists(result.manifest_path));
        CHECK(std::filesystem::exists(result.best_recipe_path));
        const RecipeRecord best = read_recipe_file(result.best_recipe_path);
        CHECK(best.recipe.gates == result.global_best.recipe.gates);
        for (const auto& a : result.per_alpha) {
            CHECK(std::filesystem::exists(a.recipe_file));
            CHECK(std::filesystem::exists(a.trace_file));
        }
    }
    SUBCASE("identity-recipe score equals the measured base score") {
        CacheEntry identity;
        REQUIRE(cache.lookup({100, std::string(12, '1')}, identity));
        CHECK(identity.acc.acc_tp == result.base.acc_tp);
        CHECK(identity.acc.acc_tr == result.base.acc_tr);
    }
    SUBCASE("invocations equal distinct cached keys and respect the budget") {
        CHECK(static_cast<std::size_t>(result.total_invocations) == cache.size());
        for (const auto& a : result.per_alpha) CHECK(a.invocations <= cfg.budget_per_alpha);
    }
}

TEST_CASE("budget of one returns the thresholded initial mean") {
    PlantedLandscape land = make_planted_landscape(3, 8, {1, 3}, 8, 1.0);
    LandscapeEvaluator evaluator(land);
    EvalCache cache;
    SearchConfig cfg;
    cfg.budget_per_alpha = 1;
    const ObjectiveConfig ocfg{1.0, 1.0};
    const RecipeRecord rec = search_alpha(1.0, cfg, land.m, land.n, evaluator, cache, ocfg);
    // the initial mean is 0.5 everywhere, which thresholds to all-ones
    CHECK(rec.recipe.gates == std::vector<std::uint8_t>(8, 1));
    CHECK(rec.evals_used == 1);
}

TEST_CASE("searches are deterministic given the seed") {
    PlantedLandscape land = make_planted_landscape(77, 10, {0, 4}, 8, 1.0);
    LandscapeEvaluator evaluator(land);
    testutil::TempDir dir("search_det");
    const SearchConfig cfg = small_config(dir.file("a"));
    EvalCache c1, c2;
    const SearchResult r1 = search_all(cfg, land.m, land.n, evaluator, c1);
    SearchConfig cfg2 = cfg;
    cfg2.out_dir = dir.file("b");
    const SearchResult r2 = search_all(cfg2, land.m, land.n, evaluator, c2);
    CHECK(records_equal(r1.global_best, r2.global_best));
    CHECK(r1.total_invocations == r2.total_invocations);
    REQUIRE(r1.per_alpha.size() == r2.per_alpha.size());
    for (std::size_t i = 0; i < r1.per_alpha.size(); ++i)
        CHECK(records_equal(r1.per_alpha[i].best, r2.per_alpha[i].best));
}

TEST_CASE("parallel alpha execution reproduces the sequential result") {
    PlantedLandscape land = make_planted_landscape(31, 10, {2, 6, 7}, 8, 1.0);
    LandscapeEvaluator evaluator(land);
    testutil::TempDir dir("search_par");
    SearchConfig seq = small_config(dir.file("seq"));
    seq.alpha_set = {1.0, 0.9, 0.8, 0.7};
    SearchConfig par = seq;
    par.out_dir = dir.file("par");
    par.parallel_alphas = true;
    EvalCache c1, c2;
    const SearchResult rs = search_all(seq, land.m, land.n, evaluator, c1);
    const SearchResult rp = search_all(par, land.m, land.n, evaluator, c2);
    CHECK(records_equal(rs.global_best, rp.global_best));
    for (std::size_t i = 0; i < rs.per_alpha.size(); ++i)
        CHECK(records_equal(rs.per_alpha[i].best, rp.per_alpha[i].best));
}

TEST_CASE("alpha = 0.5 runs are flagged gate-independent") {
    PlantedLandscape land = make_planted_landscape(5, 8, {1, 2}, 8, 1.0);
    LandscapeEvaluator evaluator(land);
    testutil::TempDir dir("search_degen");
    SearchConfig cfg = small_config(dir.file("run"));
    cfg.alpha_set = {0.5};
    EvalCache cache;
    const SearchResult result = search_all(cfg, land.m, land.n, evaluator, cache);
    REQUIRE(result.per_alpha.size() == 1);
    CHECK(result.per_alpha[0].degenerate);
    // every recipe merges to the same parameters, so F is one value
    CHECK(result.per_alpha[0].best.objective == doctest::Approx(result.global_best.objective));
}

TEST_CASE("a landscape variant peaking at alpha = 0.9 is found by the sweep") {
    PlantedLandscape land = make_planted_landscape(2024, 8, {0}, 8, 1.0);
    std::vector<std::uint8_t> target{1, 0, 1, 1, 0, 1, 0, 1};
    AlphaPeakEvaluator evaluator(land, target);
    testutil::TempDir dir("search_alpha_peak");

    // oracle: enumerate the full (alpha, gates) grid through the same scorer
    double best_f = -1e9;
    double best_alpha = 0;
    const std::vector<double> alphas{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    for (const double alpha : alphas) {
        for (std::uint32_t bits = 0; bits < (1u << 8); ++bits) {
            DiscreteRecipe r{std::vector<std::uint8_t>(8, 0), alpha};
            for (int l = 0; l < 8; ++l) r.gates[static_cast<std::size_t>(l)] = (bits >> l) & 1u;
            const TaskAccuracies a =
                evaluator.evaluate_tasks(apply_recipe(land.m, land.n, r));
            const double f = objective_score({1.0, 1.0}, a);
            if (f > best_f) {
                best_f = f;
                best_alpha = alpha;
            }
        }
    }
    REQUIRE(best_alpha == 0.9);

    SearchConfig cfg;
    cfg.alpha_set = alphas;
    cfg.budget_per_alpha = 1600;
    cfg.seed = 11;
    cfg.out_dir = dir.file("run");
    EvalCache cache;
    const SearchResult result = search_all(cfg, land.m, land.n, evaluator, cache);
    CHECK(result.global_best.recipe.alpha == 0.9);
    CHECK(result.global_best.recipe.gates == target);
    CHECK(result.global_best.objective == doctest::Approx(best_f).epsilon(1e-12));
}

TEST_CASE("resume") {
    const std::set<int> planted{1, 4, 6};
    PlantedLandscape land = make_planted_landscape(99, 10, planted, 8, 1.0);
    LandscapeEvaluator evaluator(land);

    testutil::TempDir dir("search_resume");
    SearchConfig cfg = small_config(dir.file("run"));

    // uninterrupted reference
    SearchConfig ref_cfg = cfg;
    ref_cfg.out_dir = dir.file("ref");
    EvalCache ref_cache;
    const SearchResult reference = search_all(ref_cfg, land.m, land.n, evaluator, ref_cache);

    SUBCASE("an interrupted run continues to the identical result") {
        InterruptingEvaluator flaky(evaluator, 40);
        EvalCache cache;
        CHECK_THROWS_AS(search_all(cfg, land.m, land.n, flaky, cache), Error);
        CHECK(std::filesystem::exists(cache_path_for(cfg.out_dir)));

        const SearchResult resumed =
            resume_search(cfg, land.m, land.n, evaluator, cache_path_for(cfg.out_dir));
        CHECK(records_equal(resumed.global_best, reference.global_best));
        // the replayed prefix is served from the cache
        CHECK(resumed.total_invocations < reference.total_invocations);
    }
    SUBCASE("rerunning a finished search costs zero evaluator invocations") {
        const SearchResult again =
            resume_search(ref_cfg, land.m, land.n, evaluator, cache_path_for(ref_cfg.out_dir));
        CHECK(again.total_invocations == 0);
        CHECK(records_equal(again.global_best, reference.global_best));
        for (std::size_t i = 0; i < again.per_alpha.size(); ++i)
            CHECK(records_equal(again.per_alpha[i].best, reference.per_alpha[i].best));
    }
    SUBCASE("an empty cache file behaves as a fresh run") {
        SearchConfig fresh_cfg = cfg;
        fresh_cfg.out_dir = dir.file("fresh");
        std::filesystem::create_directories(fresh_cfg.out_dir);
        std::ofstream(cache_path_for(fresh_cfg.out_dir)).close();
        const SearchResult fresh = resume_search(fresh_cfg, land.m, land.n, evaluator,
                                                 cache_path_for(fresh_cfg.out_dir));
        CHECK(records_equal(fresh.global_best, reference.global_best));
        CHECK(fresh.total_invocations == reference.total_invocations);
    }
    SUBCASE("a cache with the wrong dimension is rejected") {
        SearchConfig bad_cfg = cfg;
        bad_cfg.out_dir = dir.file("bad");
        std::filesystem::create_directories(bad_cfg.out_dir);
        std::ofstream(cache_path_for(bad_cfg.out_dir)) << "1.00\t111\t0.5\t0.5\t0.5\n";
        CHECK_THROWS_WITH_AS(resume_search(bad_cfg, land.m, land.n, evaluator,
                                           cache_path_for(bad_cfg.out_dir)),
                             doctest::Contains("dimension mismatch"), Error);
    }
}

TEST_CASE("search fails cleanly when every alpha fails") {
    PlantedLandscape land = make_planted_landscape(13, 8, {1}, 8, 1.0);
    LandscapeEvaluator inner(land);
    InterruptingEvaluator broken(inner, 0);
    testutil::TempDir dir("search_allfail");
    SearchConfig cfg = small_config(dir.file("run"));
    EvalCache cache;
    CHECK_THROWS_WITH_AS(search_all(cfg, land.m, land.n, broken, cache),
                         doctest::Contains("injected interruption"), Error);
}

TEST_CASE("external stub replays published-style accuracies through the full search") {
    const std::string stub = testutil::env_or_fail("ATTNMERGE_STUB");
    REQUIRE(!stub.empty());
    testutil::TempDir dir("search_stub");

    PlantedLandscape land = make_planted_landscape(55, 6, {1, 3}, 4, 1.0);
    write_checkpoint(land.m, dir.file("m.ckpt"));

    EvaluatorSpec spec;
    spec.kind = EvaluatorSpec::Kind::external;
    spec.command = stub + " --model-m " + dir.file("m.ckpt") +
                   " --base TP=0.6,TR=0.401 --merged TP=0.618,TR=0.497";
    ExternalEvaluator evaluator(spec);

    SearchConfig cfg;
    cfg.alpha_set = {1.0};
    cfg.budget_per_alpha = 20;
    cfg.out_dir = dir.file("run");
    EvalCache cache;
    const SearchResult result = search_all(cfg, land.m, land.n, evaluator, cache);

    CHECK(result.base.acc_tp == 0.6);
    CHECK(result.base.acc_tr == 0.401);
    // every non-identity recipe replays the merged row: no TP degradation,
    // so F equals the replayed reasoning accuracy exactly
    CHECK(result.global_best.objective == 0.497);
    CHECK(result.global_best.acc_tp == 0.618);

    // a deterministic external evaluator makes the whole search deterministic
    SearchConfig cfg2 = cfg;
    cfg2.out_dir = dir.file("run2");
    EvalCache cache2;
    const SearchResult again = search_all(cfg2, land.m, land.n, evaluator, cache2);
    CHECK(records_equal(again.global_best, result.global_best));
    CHECK(again.total_invocations == result.total_invocations);
}
