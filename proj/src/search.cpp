#include "attnmerge/search.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"
#include "json.hpp"

namespace attnmerge {

namespace {

namespace fs = std::filesystem;

std::uint64_t alpha_seed(std::uint64_t seed, double alpha) {
    // Independent stream per alpha, stable under reordering of the sweep.
    return splitmix64(seed ^ (0x5851f42d4c957f2dULL * static_cast<std::uint64_t>(
                                                          EvalCache::quantize_alpha(alpha))));
}

std::string alpha_tag(double alpha) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", alpha);
    return buf;
}

void write_manifest(const SearchConfig& cfg, const SearchResult* result, const Checkpoint& m,
                    const std::string& phase) {
    if (cfg.out_dir.empty()) return;
    nlohmann::ordered_json j;
    j["command"] = cfg.command_echo;
    j["phase"] = phase;
    if (!cfg.config_echo_json.empty()) {
        j["config"] = nlohmann::json::parse(cfg.config_echo_json);
    } else {
        nlohmann::ordered_json c;
        c["alpha_set"] = cfg.alpha_set;
        c["budget_per_alpha"] = cfg.budget_per_alpha;
        c["lambda"] = cfg.lambda;
        c["seed"] = cfg.seed;
        c["pop_size"] = cfg.pop_size;
        c["sigma0"] = cfg.sigma0;
        j["config"] = c;
    }
    j["layer_count"] = m.layer_count;
    j["cache_file"] = cache_path_for(cfg.out_dir);
    if (result) {
        j["base"] = {{"acc_tp", result->base.acc_tp}, {"acc_tr", result->base.acc_tr}};
        nlohmann::ordered_json alphas = nlohmann::ordered_json::array();
        for (const auto& a : result->per_alpha) {
            nlohmann::ordered_json e;
            e["alpha"] = a.alpha;
            e["ok"] = a.ok;
            e["degenerate"] = a.degenerate;
            e["invocations"] = a.invocations;
            if (a.ok) {
                e["objective"] = a.best.objective;
                e["recipe_file"] = a.recipe_file;
                e["trace_file"] = a.trace_file;
            } else {
                e["error"] = a.error;
            }
            alphas.push_back(e);
        }
        j["alphas"] = alphas;
        j["global_best_file"] = result->best_recipe_path;
        j["total_invocations"] = result->total_invocations;
        j["elapsed_seconds"] = result->elapsed_seconds;
    }
    std::ofstream out(manifest_path_for(cfg.out_dir), std::ios::trunc);
    if (!out) throw data_error("cannot write manifest in " + cfg.out_dir);
    out << j.dump(2) << "\n";
}

}  // namespace

std::string manifest_path_for(const std::string& out_dir) {
    return (fs::path(out_dir) / "manifest.json").string();
}

std::string cache_path_for(const std::string& out_dir) {
    return (fs::path(out_dir) / "cache.tsv").string();
}

RecipeRecord search_alpha(double alpha, const SearchConfig& cfg, const Checkpoint& m,
                          const Checkpoint& n, Evaluator& evaluator, EvalCache& cache,
                          const ObjectiveConfig& objective_cfg, long* invocations_out,
                          const std::string& trace_path) {
    ObjectiveEngine engine(evaluator, m, n, cache, objective_cfg, cfg.budget_per_alpha);

    // Best-recipe bookkeeping lives here, not in the optimizer, so the
    // deterministic tie-break over recipes decides ties in F.
    struct Best {
        bool set = false;
        DiscreteRecipe recipe;
        GatingVector gates;
        CacheEntry entry;
    } best;
    bool budget_hit = false;
    std::optional<Error> evaluator_failure;

    const auto fitness = [&](const Eigen::VectorXd& g) -> double {
        const DiscreteRecipe recipe = threshold_recipe(g, alpha);
        CacheEntry entry;
        try {
            entry = engine.evaluate(recipe);
        } catch (const BudgetExhausted&) {
            budget_hit = true;
            throw;
        } catch (const Error& e) {
            evaluator_failure = e;
            throw;
        }
        if (!best.set || recipe_better(entry.objective, recipe, best.entry.objective, best.recipe)) {
            best.set = true;
            best.recipe = recipe;
            best.gates = clamp01(g);
            best.entry = entry;
        }
        return entry.objective;
    };

    CmaConfig cma;
    cma.dim = m.layer_count;
    cma.pop_size = cfg.pop_size;
    cma.sigma0 = cfg.sigma0;
    cma.seed = alpha_seed(cfg.seed, alpha);
    // The fitness-call cap is a wide safety valve: the real budget is the
    // evaluator invocation count inside the engine, which cache hits bypass.
    cma.max_evals = cfg.budget_per_alpha > std::numeric_limits<long>::max() / 64
                        ? std::numeric_limits<long>::max()
                        : cfg.budget_per_alpha * 64;

    std::ofstream trace;
    if (!trace_path.empty()) {
        trace.open(trace_path, std::ios::trunc);
        if (!trace) throw data_error("cannot open trace file: " + trace_path);
        if (!cfg.command_echo.empty()) trace << "# " << cfg.command_echo << "\n";
        trace << "generation,best_f,mean_f,sigma,evals\n";
    }
    const auto on_generation = [&](const GenerationStats& g) {
        if (!trace.is_open()) return;
        trace << g.generation << ',' << format_double(g.best_f) << ',' << format_double(g.mean_f)
              << ',' << format_double(g.sigma) << ',' << engine.invocations() << '\n';
        trace.flush();
    };

    const RunResult run = cma_run(cma, fitness, on_generation);
    if (run.reason == StopReason::fitness_error && !budget_hit) {
        if (evaluator_failure) throw *evaluator_failure;
        throw evaluator_error("search aborted: " + run.error);
    }
    if (!best.set) throw evaluator_error("search made no successful evaluation");

    if (invocations_out) *invocations_out = engine.invocations();

    RecipeRecord record;
    record.recipe = best.recipe;
    record.continuous_gates = best.gates;
    record.objective = best.entry.objective;
    record.acc_tp = best.entry.acc.acc_tp;
    record.acc_tr = best.entry.acc.acc_tr;
    record.lambda = objective_cfg.lambda;
    record.base_tp = objective_cfg.base_tp;
    record.evals_used = engine.invocations();
    record.seed = cma.seed;
    return record;
}

SearchResult search_all(const SearchConfig& cfg, const Checkpoint& m, const Checkpoint& n,
                        Evaluator& evaluator, EvalCache& cache) {
    if (cfg.alpha_set.empty()) throw usage_error("alpha set must not be empty");
    for (const double a : cfg.alpha_set)
        if (!(a >= 0.5 && a <= 1.0)) throw usage_error("every alpha must lie in [0.5, 1.0]");
    if (cfg.budget_per_alpha < 1) throw usage_error("budget must be >= 1");
    check_merge_compatible(m, n);

    const auto t0 = std::chrono::steady_clock::now();
    SearchResult result;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        result.manifest_path = manifest_path_for(cfg.out_dir);
        result.cache_path = cache_path_for(cfg.out_dir);
        cache.persist_to(result.cache_path);
        write_manifest(cfg, nullptr, m, "started");
    }

    // Base scores via the identity recipe at alpha = 1 (bytes equal M), so
    // the measurement shares the cache key the alpha = 1 run will hit and the
    // reported identity score is the base score by construction.
    {
        ObjectiveConfig base_cfg{cfg.lambda, 0.0};
        ObjectiveEngine base_engine(evaluator, m, n, cache, base_cfg, 1);
        const DiscreteRecipe identity{std::vector<std::uint8_t>(
                                          static_cast<std::size_t>(m.layer_count), 1),
                                      1.0};
        const CacheEntry e = base_engine.evaluate(identity);
        result.base = e.acc;
        result.total_invocations += base_engine.invocations();
    }
    const ObjectiveConfig objective_cfg{cfg.lambda, result.base.acc_tp};

    result.per_alpha.resize(cfg.alpha_set.size());
    const auto run_one = [&](std::size_t i) {
        const double alpha = cfg.alpha_set[i];
        AlphaOutcome& out = result.per_alpha[i];
        out.alpha = alpha;
        out.degenerate = EvalCache::quantize_alpha(alpha) == 50;
        if (!cfg.out_dir.empty()) {
            out.recipe_file = (fs::path(cfg.out_dir) / ("recipe_alpha_" + alpha_tag(alpha) + ".json")).string();
            out.trace_file = (fs::path(cfg.out_dir) / ("trace_alpha_" + alpha_tag(alpha) + ".csv")).string();
        }
        try {
            out.best = search_alpha(alpha, cfg, m, n, evaluator, cache, objective_cfg,
                                    &out.invocations, out.trace_file);
            out.ok = true;
            if (!out.recipe_file.empty())
                write_recipe_file(out.best, out.recipe_file, cfg.command_echo);
        } catch (const std::exception& e) {
            out.ok = false;
            out.error = e.what();
        }
    };

    bool parallel = cfg.parallel_alphas && cfg.alpha_set.size() > 1;
    if (parallel) {
        // Honor the evaluator's declared concurrency capacity.
        try {
            parallel = evaluator.handshake().capacity >= 2;
        } catch (const std::exception&) {
            parallel = false;
        }
    }
    if (parallel) {
        std::vector<std::thread> workers;
        workers.reserve(cfg.alpha_set.size());
        for (std::size_t i = 0; i < cfg.alpha_set.size(); ++i) workers.emplace_back(run_one, i);
        for (auto& w : workers) w.join();
    } else {
        for (std::size_t i = 0; i < cfg.alpha_set.size(); ++i) run_one(i);
    }

    bool any_ok = false;
    std::string last_error;
    for (const auto& out : result.per_alpha) {
        result.total_invocations += out.invocations;
        if (!out.ok) {
            last_error = out.error;
            continue;
        }
        if (!any_ok || recipe_better(out.best.objective, out.best.recipe,
                                     result.global_best.objective, result.global_best.recipe)) {
            result.global_best = out.best;
        }
        any_ok = true;
    }
    if (!any_ok)
        throw evaluator_error("every alpha search failed; last error: " + last_error);

    result.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!cfg.out_dir.empty()) {
        result.best_recipe_path = (fs::path(cfg.out_dir) / "best_recipe.json").string();
        write_recipe_file(result.global_best, result.best_recipe_path, cfg.command_echo);
        write_manifest(cfg, &result, m, "finished");
    }
    return result;
}

SearchResult resume_search(const SearchConfig& cfg, const Checkpoint& m, const Checkpoint& n,
                           Evaluator& evaluator, const std::string& cache_path) {
    EvalCache cache;
    cache.load(cache_path, m.layer_count);
    return search_all(cfg, m, n, evaluator, cache);
}

}  // namespace attnmerge
