// attnmerge: layer-selective attention merging toolkit.
//
// Subcommands: search (evolutionary recipe search), merge (apply a recipe),
// all-layer / random-k (baseline recipes), mask-sweep (layer masking
// degradation curves), attribute (frame attribution), eval, inspect, toy-gen.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "attnmerge/attribution.hpp"
#include "attnmerge/errors.hpp"
#include "attnmerge/evaluator.hpp"
#include "attnmerge/intervention.hpp"
#include "attnmerge/recipe.hpp"
#include "attnmerge/search.hpp"
#include "attnmerge/tensor_store.hpp"
#include "attnmerge/toy_eval.hpp"
#include "attnmerge/toy_model.hpp"
#include "attnmerge/util.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace attnmerge;

namespace {

std::string join_args(int argc, char** argv) {
    std::ostringstream out;
    out << "attnmerge";
    for (int i = 1; i < argc; ++i) out << ' ' << argv[i];
    return out.str();
}

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    for (const auto& item : split(text, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw usage_error("empty numeric list: '" + text + "'");
    return out;
}

std::set<int> parse_int_set(const std::string& text) {
    std::set<int> out;
    for (const auto& item : split(text, ',')) {
        if (item.empty()) continue;
        out.insert(std::stoi(item));
    }
    return out;
}

std::vector<int> read_token_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open token file: " + path);
    std::vector<int> tokens;
    int t;
    while (in >> t) tokens.push_back(t);
    if (tokens.empty()) throw data_error("token file is empty: " + path);
    return tokens;
}

// Everything the search subcommand needs, round-trippable through the
// manifest so --resume can rebuild the exact run.
struct SearchCliOpts {
    std::string model_m, model_n;
    std::string evaluator = "builtin-landscape";
    std::string alpha_set = "1.0,0.9,0.8,0.7,0.6,0.5";
    long budget = 1600;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    int pop_size = 0;
    double sigma0 = 0.3;
    bool parallel_alphas = false;
    std::string out_dir = "search_out";
    // builtin-landscape assets
    std::string planted;  // e.g. "2,5,7,9"
    double tau = 1.0;
    // --demo planted: generate parents instead of loading them
    std::string demo;
    int demo_layers = 12;
    int demo_dim = 16;
    std::uint64_t landscape_seed = 1;
    // builtin-toy assets
    std::uint64_t suite_seed = 1;
    int tp_count = 55;
    int tr_count = 177;
    long hello_timeout_ms = 30000;
};

nlohmann::ordered_json search_opts_to_json(const SearchCliOpts& o) {
    nlohmann::ordered_json j;
    j["model_m"] = o.model_m;
    j["model_n"] = o.model_n;
    j["evaluator"] = o.evaluator;
    j["alpha_set"] = o.alpha_set;
    j["budget"] = o.budget;
    j["lambda"] = o.lambda;
    j["seed"] = o.seed;
    j["pop_size"] = o.pop_size;
    j["sigma0"] = o.sigma0;
    j["parallel_alphas"] = o.parallel_alphas;
    j["out_dir"] = o.out_dir;
    j["planted"] = o.planted;
    j["tau"] = o.tau;
    j["demo"] = o.demo;
    j["demo_layers"] = o.demo_layers;
    j["demo_dim"] = o.demo_dim;
    j["landscape_seed"] = o.landscape_seed;
    j["suite_seed"] = o.suite_seed;
    j["tp_count"] = o.tp_count;
    j["tr_count"] = o.tr_count;
    j["hello_timeout_ms"] = o.hello_timeout_ms;
    return j;
}

SearchCliOpts search_opts_from_json(const nlohmann::json& j) {
    SearchCliOpts o;
    o.model_m = j.value("model_m", "");
    o.model_n = j.value("model_n", "");
    o.evaluator = j.value("evaluator", "builtin-landscape");
    o.alpha_set = j.value("alpha_set", o.alpha_set);
    o.budget = j.value("budget", o.budget);
    o.lambda = j.value("lambda", o.lambda);
    o.seed = j.value("seed", o.seed);
    o.pop_size = j.value("pop_size", o.pop_size);
    o.sigma0 = j.value("sigma0", o.sigma0);
    o.parallel_alphas = j.value("parallel_alphas", o.parallel_alphas);
    o.out_dir = j.value("out_dir", o.out_dir);
    o.planted = j.value("planted", o.planted);
    o.tau = j.value("tau", o.tau);
    o.demo = j.value("demo", o.demo);
    o.demo_layers = j.value("demo_layers", o.demo_layers);
    o.demo_dim = j.value("demo_dim", o.demo_dim);
    o.landscape_seed = j.value("landscape_seed", o.landscape_seed);
    o.suite_seed = j.value("suite_seed", o.suite_seed);
    o.tp_count = j.value("tp_count", o.tp_count);
    o.tr_count = j.value("tr_count", o.tr_count);
    o.hello_timeout_ms = j.value("hello_timeout_ms", o.hello_timeout_ms);
    return o;
}

int run_search(SearchCliOpts opts, const std::string& command_echo, bool resume) {
    Checkpoint m, n;
    EvaluatorSpec spec = parse_evaluator_spec(opts.evaluator);
    spec.hello_timeout_ms = opts.hello_timeout_ms;
    BuiltinAssets assets;

    if (opts.demo == "planted") {
        if (spec.kind != EvaluatorSpec::Kind::builtin_landscape)
            throw usage_error("--demo planted requires the builtin-landscape evaluator");
        const std::set<int> planted = parse_int_set(opts.planted);
        if (planted.empty()) throw usage_error("--demo planted needs --planted layer indices");
        PlantedLandscape land = make_planted_landscape(opts.landscape_seed, opts.demo_layers,
                                                       planted, opts.demo_dim, opts.tau);
        fs::create_directories(opts.out_dir);
        opts.model_m = (fs::path(opts.out_dir) / "parent_m.ckpt").string();
        opts.model_n = (fs::path(opts.out_dir) / "parent_n.ckpt").string();
        write_checkpoint(land.m, opts.model_m);
        write_checkpoint(land.n, opts.model_n);
        m = land.m;
        n = land.n;
        assets.landscape = std::move(land);
    } else if (!opts.demo.empty()) {
        throw usage_error("unknown demo '" + opts.demo + "' (supported: planted)");
    } else {
        if (opts.model_m.empty() || opts.model_n.empty())
            throw usage_error("search needs --model-m and --model-n (or --demo planted)");
        m = read_checkpoint(opts.model_m);
        n = read_checkpoint(opts.model_n);
        if (spec.kind == EvaluatorSpec::Kind::builtin_landscape) {
            const std::set<int> planted = parse_int_set(opts.planted);
            if (planted.empty())
                throw usage_error("builtin-landscape evaluator needs --planted layer indices");
            assets.landscape = landscape_from_parents(m, n, planted, opts.tau);
        } else if (spec.kind == EvaluatorSpec::Kind::builtin_toy) {
            assets.suite = make_proxy_suite(opts.suite_seed, opts.tp_count, opts.tr_count);
        }
    }

    auto evaluator = make_evaluator(spec, std::move(assets));

    SearchConfig cfg;
    cfg.alpha_set = parse_double_list(opts.alpha_set);
    cfg.budget_per_alpha = opts.budget;
    cfg.lambda = opts.lambda;
    cfg.seed = opts.seed;
    cfg.pop_size = opts.pop_size;
    cfg.sigma0 = opts.sigma0;
    cfg.parallel_alphas = opts.parallel_alphas;
    cfg.out_dir = opts.out_dir;
    cfg.command_echo = command_echo;
    cfg.config_echo_json = search_opts_to_json(opts).dump();

    EvalCache cache;
    if (resume) cache.load(cache_path_for(opts.out_dir), m.layer_count);

    const SearchResult result = search_all(cfg, m, n, *evaluator, cache);

    std::cout << "base: TP " << format_percent(result.base.acc_tp) << "% TR "
              << format_percent(result.base.acc_tr) << "%\n";
    for (const auto& a : result.per_alpha) {
        std::printf("alpha %.2f: ", a.alpha);
        if (!a.ok) {
            std::cout << "FAILED: " << a.error << "\n";
            continue;
        }
        std::cout << "F " << format_double(a.best.objective) << " TP "
                  << format_percent(a.best.acc_tp) << "% TR " << format_percent(a.best.acc_tr)
                  << "% evals " << a.invocations << (a.degenerate ? " (gate-independent)" : "")
                  << "\n";
    }
    const auto selected = n_dominated_layers(result.global_best.recipe);
    std::printf("best: alpha %.2f, F %s, %zu selected layer(s):", result.global_best.recipe.alpha,
                format_double(result.global_best.objective).c_str(), selected.size());
    for (const int l : selected) std::cout << ' ' << l;
    std::cout << "\nmanifest: " << result.manifest_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string command_echo = join_args(argc, argv);
    CLI::App app{"layer-selective attention merging toolkit"};
    app.require_subcommand(1);

    // -- search ---------------------------------------------------------
    SearchCliOpts s;
    std::string resume_manifest;
    auto* search = app.add_subcommand("search", "evolutionary recipe search over the alpha sweep");
    search->add_option("--model-m", s.model_m, "checkpoint whose perception is preserved");
    search->add_option("--model-n", s.model_n, "checkpoint whose reasoning is merged in");
    search->add_option("--evaluator", s.evaluator,
                       "builtin-landscape | builtin-toy | external:<command>");
    search->add_option("--alpha-set", s.alpha_set, "comma list of interpolation weights");
    search->add_option("--budget", s.budget, "evaluator invocations per alpha");
    search->add_option("--lambda", s.lambda, "TP degradation penalty weight");
    search->add_option("--seed", s.seed, "search seed");
    search->add_option("--pop-size", s.pop_size, "CMA population (0 = 4 + floor(3 ln L))");
    search->add_option("--sigma0", s.sigma0, "initial CMA step size");
    search->add_flag("--parallel-alphas", s.parallel_alphas, "run alpha searches concurrently");
    search->add_option("--out-dir", s.out_dir, "output directory");
    search->add_option("--planted", s.planted, "planted layer set for builtin-landscape");
    search->add_option("--tau", s.tau, "landscape temperature");
    search->add_option("--demo", s.demo, "demo mode: planted (generates parents)");
    search->add_option("--L", s.demo_layers, "demo layer count");
    search->add_option("--dim", s.demo_dim, "demo per-layer dimension");
    search->add_option("--landscape-seed", s.landscape_seed, "demo parent seed");
    search->add_option("--suite-seed", s.suite_seed, "builtin-toy suite seed");
    search->add_option("--tp-count", s.tp_count, "builtin-toy TP instances");
    search->add_option("--tr-count", s.tr_count, "builtin-toy TR instances");
    search->add_option("--resume", resume_manifest, "manifest of an interrupted run to continue");
    search->add_option("--hello-timeout-ms", s.hello_timeout_ms,
                       "external evaluator handshake timeout");

    // -- merge ----------------------------------------------------------
    std::string mg_m, mg_n, mg_recipe, mg_out;
    auto* merge = app.add_subcommand("merge", "apply a recipe file to two checkpoints");
    merge->add_option("--model-m", mg_m)->required();
    merge->add_option("--model-n", mg_n)->required();
    merge->add_option("--recipe", mg_recipe)->required();
    merge->add_option("--out", mg_out)->required();

    // -- all-layer ------------------------------------------------------
    int al_layers = 0;
    double al_alpha = 0.9;
    std::string al_out;
    auto* all_layer = app.add_subcommand("all-layer", "uniform recipe biasing every layer toward N");
    all_layer->add_option("--L", al_layers)->required();
    all_layer->add_option("--alpha", al_alpha)->required();
    all_layer->add_option("--out", al_out)->required();

    // -- random-k -------------------------------------------------------
    int rk_layers = 0, rk_k = 0, rk_runs = 1;
    double rk_alpha = 0.9;
    std::uint64_t rk_seed = 0;
    std::string rk_out;
    auto* random_k = app.add_subcommand("random-k", "random layer-subset recipes");
    random_k->add_option("--L", rk_layers)->required();
    random_k->add_option("--k", rk_k)->required();
    random_k->add_option("--alpha", rk_alpha)->required();
    random_k->add_option("--seed", rk_seed);
    random_k->add_option("--runs", rk_runs, "number of independent recipes");
    random_k->add_option("--out", rk_out, "output file (suffix _<run> when runs > 1)")->required();

    // -- mask-sweep -----------------------------------------------------
    std::string ms_model, ms_layers, ms_recipe, ms_kappas = "1.0,0.8,0.6,0.4,0.2,0.0";
    std::string ms_evaluator, ms_metrics = "TP,TR", ms_out = "mask_sweep", ms_patterns = "wo|o_proj|out_proj";
    std::uint64_t ms_suite_seed = 1;
    int ms_tp_count = 55, ms_tr_count = 177;
    long ms_hello_timeout = 30000;
    auto* mask = app.add_subcommand("mask-sweep", "kappa-masking degradation curves");
    mask->add_option("--model", ms_model, "checkpoint to mask")->required();
    mask->add_option("--layers", ms_layers, "comma list of layers to mask");
    mask->add_option("--recipe", ms_recipe, "mask the recipe's selected (N-dominated) layers");
    mask->add_option("--kappas", ms_kappas, "comma list of masking strengths");
    mask->add_option("--evaluator", ms_evaluator, "external:<command> for checkpoint-level sweeps");
    mask->add_option("--metrics", ms_metrics, "metric names for the external evaluator");
    mask->add_option("--out-proj-pattern", ms_patterns,
                     "|-separated name fragments of output projection tensors");
    mask->add_option("--suite-seed", ms_suite_seed);
    mask->add_option("--tp-count", ms_tp_count);
    mask->add_option("--tr-count", ms_tr_count);
    mask->add_option("--out", ms_out, "output prefix (<out>.csv, <out>_long.csv)");
    mask->add_option("--hello-timeout-ms", ms_hello_timeout,
                     "external evaluator handshake timeout");

    // -- attribute ------------------------------------------------------
    std::string at_model, at_input, at_options = "1,2", at_mode = "reverse", at_out = "attribution.csv";
    int at_frames = 0, at_tokens_per_frame = 0, at_window = 5, at_chosen = -1;
    double at_fd_step = 1e-3;
    bool at_normalize_first = false;
    auto* attr = app.add_subcommand("attribute", "frame attribution at the decision step");
    attr->add_option("--model", at_model)->required();
    attr->add_option("--input", at_input, "token file: frames first, then the prefix")->required();
    attr->add_option("--frames", at_frames, "frame count T")->required();
    attr->add_option("--tokens-per-frame", at_tokens_per_frame, "visual tokens per frame K")->required();
    attr->add_option("--options", at_options, "candidate option tokens");
    attr->add_option("--chosen", at_chosen, "chosen option token")->required();
    attr->add_option("--window", at_window, "smoothing window (odd)");
    attr->add_option("--grad-mode", at_mode, "reverse | fd");
    attr->add_option("--fd-step", at_fd_step, "central difference step");
    attr->add_flag("--normalize-first", at_normalize_first, "normalize before smoothing");
    attr->add_option("--out", at_out);

    // -- eval -----------------------------------------------------------
    std::string ev_model, ev_evaluator = "builtin-toy", ev_model_m, ev_model_n, ev_planted, ev_tasks = "TP,TR";
    double ev_tau = 1.0;
    std::uint64_t ev_suite_seed = 1;
    int ev_tp_count = 55, ev_tr_count = 177;
    long ev_hello_timeout = 30000;
    auto* eval_cmd = app.add_subcommand("eval", "score one checkpoint through an evaluator");
    eval_cmd->add_option("--model", ev_model)->required();
    eval_cmd->add_option("--evaluator", ev_evaluator);
    eval_cmd->add_option("--model-m", ev_model_m, "landscape parent M");
    eval_cmd->add_option("--model-n", ev_model_n, "landscape parent N");
    eval_cmd->add_option("--planted", ev_planted, "landscape planted set");
    eval_cmd->add_option("--tau", ev_tau);
    eval_cmd->add_option("--tasks", ev_tasks);
    eval_cmd->add_option("--suite-seed", ev_suite_seed);
    eval_cmd->add_option("--tp-count", ev_tp_count);
    eval_cmd->add_option("--tr-count", ev_tr_count);
    eval_cmd->add_option("--hello-timeout-ms", ev_hello_timeout,
                         "external evaluator handshake timeout");

    // -- inspect --------------------------------------------------------
    std::string in_model, in_template;
    auto* inspect = app.add_subcommand("inspect", "tensor table and layer-template report");
    inspect->add_option("--model", in_model)->required();
    inspect->add_option("--template", in_template, "layer name template to test");

    // -- toy-gen --------------------------------------------------------
    std::string tg_kind = "model", tg_out, tg_out_m, tg_out_n, tg_planted;
    int tg_layers = 12, tg_width = 16, tg_vocab = 32, tg_dim = 16;
    std::uint64_t tg_seed = 1;
    double tg_noise = 0.5, tg_headwind = 0.15;
    auto* toy_gen = app.add_subcommand("toy-gen", "generate toy models and parent checkpoints");
    toy_gen->add_option("--kind", tg_kind,
                        "model | planted-model | parent-pair | landscape-parents");
    toy_gen->add_option("--L", tg_layers);
    toy_gen->add_option("--d", tg_width);
    toy_gen->add_option("--vocab", tg_vocab);
    toy_gen->add_option("--dim", tg_dim, "per-layer dimension for parent kinds");
    toy_gen->add_option("--seed", tg_seed);
    toy_gen->add_option("--planted", tg_planted, "planted / corrupted layer set");
    toy_gen->add_option("--noise", tg_noise, "parent-pair noise scale");
    toy_gen->add_option("--headwind", tg_headwind, "planted-model bias toward option 1");
    toy_gen->add_option("--out", tg_out);
    toy_gen->add_option("--out-m", tg_out_m);
    toy_gen->add_option("--out-n", tg_out_n);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (search->parsed()) {
            if (!resume_manifest.empty()) {
                std::ifstream in(resume_manifest);
                if (!in) throw data_error("cannot open manifest: " + resume_manifest);
                nlohmann::json manifest;
                in >> manifest;
                if (!manifest.contains("config"))
                    throw data_error("manifest has no config echo; cannot resume");
                return run_search(search_opts_from_json(manifest["config"]), command_echo, true);
            }
            return run_search(s, command_echo, false);
        }

        if (merge->parsed()) {
            const Checkpoint m = read_checkpoint(mg_m);
            const Checkpoint n = read_checkpoint(mg_n);
            const RecipeRecord rec = read_recipe_file(mg_recipe);
            const Checkpoint merged = apply_recipe(m, n, rec.recipe);
            write_checkpoint(merged, mg_out);
            const auto selected = n_dominated_layers(rec.recipe);
            const auto modified = modified_layers(rec.recipe);
            std::printf("merged with alpha %.2f: %zu selected layer(s), %zu modified\n",
                        rec.recipe.alpha, selected.size(), modified.size());
            return 0;
        }

        if (all_layer->parsed()) {
            RecipeRecord rec;
            rec.recipe = all_layer_recipe(al_layers, al_alpha);
            write_recipe_file(rec, al_out, command_echo);
            std::cout << "wrote " << al_out << "\n";
            return 0;
        }

        if (random_k->parsed()) {
            for (int run = 0; run < rk_runs; ++run) {
                RecipeRecord rec;
                rec.recipe = random_k_recipe(rk_layers, rk_k, rk_alpha, rk_seed + static_cast<std::uint64_t>(run));
                rec.seed = rk_seed + static_cast<std::uint64_t>(run);
                std::string path = rk_out;
                if (rk_runs > 1) {
                    const auto dot = path.rfind('.');
                    const std::string suffix = "_" + std::to_string(run + 1);
                    path = dot == std::string::npos ? path + suffix
                                                    : path.substr(0, dot) + suffix + path.substr(dot);
                }
                write_recipe_file(rec, path, command_echo);
                std::cout << "wrote " << path << "\n";
            }
            return 0;
        }

        if (mask->parsed()) {
            std::set<int> layers;
            if (!ms_recipe.empty()) {
                layers = n_dominated_layers(read_recipe_file(ms_recipe).recipe);
            } else if (!ms_layers.empty()) {
                layers = parse_int_set(ms_layers);
            } else {
                throw usage_error("mask-sweep needs --layers or --recipe");
            }
            const std::vector<double> kappas = parse_double_list(ms_kappas);
            DegradationCurve curve;
            if (ms_evaluator.empty()) {
                const auto model = ToyAttentionModel::from_checkpoint(read_checkpoint(ms_model));
                const auto suite = make_proxy_suite(ms_suite_seed, ms_tp_count, ms_tr_count,
                                                    model.cfg.vocab);
                curve = mask_sweep(toy_mask_metrics(model, layers, suite), kappas);
            } else {
                EvaluatorSpec spec = parse_evaluator_spec(ms_evaluator);
                spec.hello_timeout_ms = ms_hello_timeout;
                spec.tasks = split(ms_metrics, ',');
                auto evaluator = make_evaluator(spec);
                const Checkpoint base = read_checkpoint(ms_model);
                const auto metric_names = split(ms_metrics, ',');
                auto memo = std::make_shared<std::map<double, std::map<std::string, double>>>();
                auto eval_at = [&, memo](double kappa) -> const std::map<std::string, double>& {
                    const auto it = memo->find(kappa);
                    if (it != memo->end()) return it->second;
                    const Checkpoint masked = mask_checkpoint(base, layers, kappa, ms_patterns);
                    const auto path = temp_path("attnmerge_mask", ".ckpt");
                    write_checkpoint(masked, path.string());
                    auto acc = evaluator->evaluate_path(path.string(), metric_names);
                    fs::remove(path);
                    return memo->emplace(kappa, std::move(acc)).first->second;
                };
                std::vector<std::pair<std::string, MetricFn>> metrics;
                for (const auto& name : metric_names)
                    metrics.emplace_back(name, [&eval_at, name](double k) { return eval_at(k).at(name); });
                curve = mask_sweep(metrics, kappas);
            }
            write_curve_files(curve, ms_out + ".csv", ms_out + "_long.csv", command_echo);
            for (const auto& series : curve.series) {
                std::cout << series.metric << ":";
                for (std::size_t i = 0; i < curve.kappas.size(); ++i)
                    std::printf(" k=%.2f d=%.3f", curve.kappas[i], series.deltas[i]);
                std::cout << "\n";
            }
            std::cout << "wrote " << ms_out << ".csv\n";
            return 0;
        }

        if (attr->parsed()) {
            const auto model = ToyAttentionModel::from_checkpoint(read_checkpoint(at_model));
            const auto tokens = read_token_file(at_input);
            const std::size_t frame_tokens = static_cast<std::size_t>(at_frames) *
                                             static_cast<std::size_t>(at_tokens_per_frame);
            if (tokens.size() < frame_tokens)
                throw usage_error("token file holds fewer tokens than frames * tokens-per-frame");
            AttributionQuery q;
            q.model = &model;
            q.frame_count = at_frames;
            q.tokens_per_frame = at_tokens_per_frame;
            q.frames = embed_frames(model, std::span<const int>(tokens.data(), frame_tokens));
            q.prefix_tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(frame_tokens),
                                   tokens.end());
            for (const auto& item : split(at_options, ',')) q.options.push_back(std::stoi(item));
            q.chosen = at_chosen;
            AttributionOptions opts;
            opts.window = at_window;
            opts.fd_step = at_fd_step;
            opts.smooth_before_normalize = !at_normalize_first;
            if (at_mode == "reverse") {
                opts.mode = GradMode::reverse;
            } else if (at_mode == "fd") {
                opts.mode = GradMode::finite_difference;
            } else {
                throw usage_error("unknown --grad-mode '" + at_mode + "' (reverse | fd)");
            }
            const AttributionResult result = attribute(q, opts);
            write_attribution_report(result, at_out, command_echo);
            std::cout << "margin " << format_double(result.margin) << "; top frames:";
            for (std::size_t i = 0; i < result.ranked_frames.size() && i < 5; ++i)
                std::cout << ' ' << result.ranked_frames[i];
            std::cout << "\nwrote " << at_out << "\n";
            return 0;
        }

        if (eval_cmd->parsed()) {
            EvaluatorSpec spec = parse_evaluator_spec(ev_evaluator);
            spec.hello_timeout_ms = ev_hello_timeout;
            spec.tasks = split(ev_tasks, ',');
            BuiltinAssets assets;
            if (spec.kind == EvaluatorSpec::Kind::builtin_landscape) {
                if (ev_model_m.empty() || ev_model_n.empty() || ev_planted.empty())
                    throw usage_error(
                        "builtin-landscape eval needs --model-m, --model-n and --planted");
                assets.landscape = landscape_from_parents(read_checkpoint(ev_model_m),
                                                          read_checkpoint(ev_model_n),
                                                          parse_int_set(ev_planted), ev_tau);
            } else if (spec.kind == EvaluatorSpec::Kind::builtin_toy) {
                assets.suite = make_proxy_suite(ev_suite_seed, ev_tp_count, ev_tr_count);
            }
            auto evaluator = make_evaluator(spec, std::move(assets));
            const auto tasks = split(ev_tasks, ',');
            const auto acc = evaluator->evaluate_path(ev_model, tasks);
            for (const auto& [task, value] : acc)
                std::cout << task << ": " << format_percent(value) << "% ("
                          << format_double(value) << ")\n";
            return 0;
        }

        if (inspect->parsed()) {
            ReadOptions opts;
            opts.name_template = in_template;
            const Checkpoint ck = read_checkpoint(in_model, opts);
            std::cout << "tensors: " << ck.metas.size() << ", data bytes: " << ck.data.size()
                      << "\n";
            for (const auto& [name, meta] : ck.metas) {
                std::cout << "  " << name << "  " << meta.dtype << " [";
                for (std::size_t i = 0; i < meta.shape.size(); ++i)
                    std::cout << (i ? "," : "") << meta.shape[i];
                std::cout << "] bytes " << meta.byte_size() << "\n";
            }
            if (ck.layer_count > 0) {
                std::cout << "layer template: " << ck.name_template << "\nL = " << ck.layer_count
                          << "\n";
                for (int l = 0; l < ck.layer_count; ++l)
                    std::cout << "  layer " << l << ": " << layer_params(ck, l).tensors.size()
                              << " tensor(s)\n";
            } else {
                std::cout << "no layer template (pass --template to test one)\n";
            }
            return 0;
        }

        if (toy_gen->parsed()) {
            if (tg_kind == "model" || tg_kind == "planted-model") {
                if (tg_out.empty()) throw usage_error("toy-gen needs --out");
                ToyModelConfig cfg{tg_layers, tg_width, tg_vocab};
                const ToyAttentionModel model =
                    tg_kind == "model"
                        ? ToyAttentionModel::random(cfg, tg_seed)
                        : make_planted_toy_model(tg_seed, cfg, parse_int_set(tg_planted), tg_headwind);
                write_checkpoint(model.to_checkpoint(), tg_out);
                std::cout << "wrote " << tg_out << "\n";
            } else if (tg_kind == "parent-pair" || tg_kind == "landscape-parents") {
                if (tg_out_m.empty() || tg_out_n.empty())
                    throw usage_error("toy-gen parent kinds need --out-m and --out-n");
                Checkpoint m, n;
                if (tg_kind == "parent-pair") {
                    std::tie(m, n) =
                        make_parent_pair(tg_seed, tg_layers, parse_int_set(tg_planted), tg_noise, tg_dim);
                } else {
                    PlantedLandscape land = make_planted_landscape(
                        tg_seed, tg_layers, parse_int_set(tg_planted), tg_dim);
                    m = std::move(land.m);
                    n = std::move(land.n);
                }
                write_checkpoint(m, tg_out_m);
                write_checkpoint(n, tg_out_n);
                std::cout << "wrote " << tg_out_m << " and " << tg_out_n << "\n";
            } else {
                throw usage_error("unknown toy-gen kind '" + tg_kind + "'");
            }
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
            case ErrorKind::usage: return 2;
            case ErrorKind::evaluator: return 3;
            case ErrorKind::data: return 4;
            case ErrorKind::internal: return 1;
        }
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
