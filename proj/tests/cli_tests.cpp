// End-to-end checks of the command-line surface: flag validation, exit codes
// and the files each subcommand leaves behind. Drives the installed binary
// through /bin/sh, so these run as close to a user session as possible.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "attnmerge/recipe.hpp"
#include "attnmerge/tensor_store.hpp"
#include "attnmerge/toy_model.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

using namespace attnmerge;

namespace {

struct RunOutcome {
    int exit_code = -1;
    std::string output;
};

RunOutcome run_cli(const std::string& args) {
    const std::string cli = testutil::env_or_fail("ATTNMERGE_CLI");
    REQUIRE_MESSAGE(!cli.empty(), "ATTNMERGE_CLI must point at the CLI binary");
    const auto out_path = temp_path("cli_out", ".txt");
    const std::string cmd = cli + " " + args + " >" + out_path.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunOutcome outcome;
    outcome.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_path);
    std::stringstream buf;
    buf << in.rdbuf();
    outcome.output = buf.str();
    std::filesystem::remove(out_path);
    return outcome;
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli("search --model-m only_m.ckpt").exit_code == 2);
    CHECK(run_cli("random-k --L 28 --k 29 --alpha 1.0 --out /tmp/x.json").exit_code == 2);
    CHECK(run_cli("merge --model-m a --model-n b").exit_code == 2);  // missing required flags
    CHECK(run_cli("no-such-command").exit_code == 2);
}

TEST_CASE("planted demo search recovers the planted set") {
    testutil::TempDir dir("cli_demo");
    const RunOutcome run = run_cli("search --demo planted --L 12 --planted 2,5,7,9 --seed 4 --out-dir " +
                                   dir.file("out"));
    REQUIRE(run.exit_code == 0);
    CHECK(run.output.find("best: alpha 1.00") != std::string::npos);

    const RecipeRecord best = read_recipe_file(dir.file("out") + "/best_recipe.json");
    CHECK(n_dominated_layers(best.recipe) == std::set<int>{2, 5, 7, 9});

    nlohmann::json manifest;
    std::ifstream(dir.file("out") + "/manifest.json") >> manifest;
    CHECK(manifest["phase"] == "finished");
    CHECK(manifest["total_invocations"].get<long>() > 0);
    CHECK(manifest["config"]["seed"] == 4);

    SUBCASE("a resumed finished run reproduces the result with zero evaluations") {
        const RunOutcome again = run_cli("search --resume " + dir.file("out") + "/manifest.json");
        REQUIRE(again.exit_code == 0);
        nlohmann::json manifest2;
        std::ifstream(dir.file("out") + "/manifest.json") >> manifest2;
        CHECK(manifest2["total_invocations"].get<long>() == 0);
        const RecipeRecord best2 = read_recipe_file(dir.file("out") + "/best_recipe.json");
        CHECK(best2.recipe.gates == best.recipe.gates);
    }
}

TEST_CASE("a degenerate alpha run completes and is flagged in the manifest") {
    testutil::TempDir dir("cli_degen");
    const RunOutcome run =
        run_cli("search --demo planted --L 8 --planted 1,3 --alpha-set 0.5 --budget 1 --out-dir " +
                dir.file("out"));
    REQUIRE(run.exit_code == 0);
    CHECK(run.output.find("gate-independent") != std::string::npos);
    nlohmann::json manifest;
    std::ifstream(dir.file("out") + "/manifest.json") >> manifest;
    REQUIRE(manifest["alphas"].size() == 1);
    CHECK(manifest["alphas"][0]["degenerate"] == true);
    CHECK(manifest["alphas"][0]["invocations"].get<long>() <= 1);
}

TEST_CASE("merge applies recipes and guards dimensions") {
    testutil::TempDir dir("cli_merge");
    REQUIRE(run_cli("toy-gen --kind landscape-parents --L 12 --planted 1 --seed 9 --out-m " +
                    dir.file("m.ckpt") + " --out-n " + dir.file("n.ckpt"))
                .exit_code == 0);

    SUBCASE("the identity recipe reproduces M byte for byte") {
        REQUIRE(run_cli("random-k --L 12 --k 0 --alpha 1.0 --out " + dir.file("id.json")).exit_code ==
                0);
        REQUIRE(run_cli("merge --model-m " + dir.file("m.ckpt") + " --model-n " + dir.file("n.ckpt") +
                        " --recipe " + dir.file("id.json") + " --out " + dir.file("merged.ckpt"))
                    .exit_code == 0);
        CHECK(file_bytes(dir.file("merged.ckpt")) == file_bytes(dir.file("m.ckpt")));
    }
    SUBCASE("a recipe with the wrong layer count exits 4") {
        REQUIRE(run_cli("all-layer --L 9 --alpha 0.9 --out " + dir.file("bad.json")).exit_code == 0);
        const RunOutcome run =
            run_cli("merge --model-m " + dir.file("m.ckpt") + " --model-n " + dir.file("n.ckpt") +
                    " --recipe " + dir.file("bad.json") + " --out " + dir.file("x.ckpt"));
        CHECK(run.exit_code == 4);
    }
}

TEST_CASE("baseline recipe commands") {
    testutil::TempDir dir("cli_base");
    SUBCASE("all-layer clears every gate") {
        REQUIRE(run_cli("all-layer --L 36 --alpha 0.9 --out " + dir.file("all.json")).exit_code == 0);
        const RecipeRecord rec = read_recipe_file(dir.file("all.json"));
        CHECK(rec.recipe.layer_count() == 36);
        CHECK(n_dominated_layers(rec.recipe).size() == 36);
    }
    SUBCASE("random-k emits the requested number of runs") {
        REQUIRE(run_cli("random-k --L 28 --k 11 --alpha 1.0 --seed 7 --runs 5 --out " +
                        dir.file("rk.json"))
                    .exit_code == 0);
        std::set<std::string> distinct;
        for (int run = 1; run <= 5; ++run) {
            const RecipeRecord rec =
                read_recipe_file(dir.file("rk_" + std::to_string(run) + ".json"));
            CHECK(n_dominated_layers(rec.recipe).size() == 11);
            distinct.insert(rec.recipe.bitstring());
        }
        CHECK(distinct.size() == 5);  // independent draws
    }
}

TEST_CASE("mask-sweep over the builtin toy substrate") {
    testutil::TempDir dir("cli_mask");
    REQUIRE(run_cli("toy-gen --kind planted-model --L 8 --planted 2,5 --seed 7 --out " +
                    dir.file("model.ckpt"))
                .exit_code == 0);

    SUBCASE("single-kappa grid yields only zero deltas") {
        const RunOutcome run =
            run_cli("mask-sweep --model " + dir.file("model.ckpt") +
                    " --layers 2,5 --kappas 1.0 --tp-count 10 --tr-count 10 --out " + dir.file("curve"));
        REQUIRE(run.exit_code == 0);
        std::ifstream in(dir.file("curve.csv"));
        std::string line;
        std::getline(in, line);  // echo
        std::getline(in, line);  // header
        int rows = 0;
        while (std::getline(in, line)) {
            CHECK(line.substr(line.rfind(',') + 1) == "0");
            ++rows;
        }
        CHECK(rows == 2);
    }
    SUBCASE("recipe-driven layer selection works") {
        REQUIRE(run_cli("random-k --L 8 --k 2 --alpha 1.0 --seed 3 --out " + dir.file("r.json"))
                    .exit_code == 0);
        const RunOutcome run = run_cli("mask-sweep --model " + dir.file("model.ckpt") + " --recipe " +
                                       dir.file("r.json") +
                                       " --tp-count 10 --tr-count 10 --out " + dir.file("curve2"));
        CHECK(run.exit_code == 0);
        CHECK(std::filesystem::exists(dir.file("curve2_long.csv")));
    }
}

TEST_CASE("attribute command") {
    testutil::TempDir dir("cli_attr");
    REQUIRE(run_cli("toy-gen --kind model --L 4 --seed 3 --out " + dir.file("model.ckpt")).exit_code ==
            0);
    // 2 frames x 3 tokens, then the query prefix
    std::ofstream(dir.file("tokens.txt")) << "4 5 6 1 2 7 3\n";

    SUBCASE("reverse and finite-difference reports both land") {
        for (const std::string mode : {"reverse", "fd"}) {
            const RunOutcome run = run_cli(
                "attribute --model " + dir.file("model.ckpt") + " --input " + dir.file("tokens.txt") +
                " --frames 2 --tokens-per-frame 3 --options 1,2 --chosen 1 --grad-mode " + mode +
                " --out " + dir.file(mode + ".csv"));
            REQUIRE(run.exit_code == 0);
            CHECK(run.output.find("margin") != std::string::npos);
        }
        // identical pipelines up to gradient mode: compare the two reports
        const auto a = file_bytes(dir.file("reverse.csv"));
        const auto b = file_bytes(dir.file("fd.csv"));
        CHECK(a != b);  // config echo differs
    }
    SUBCASE("a chosen option outside the candidate set exits 2") {
        const RunOutcome run = run_cli(
            "attribute --model " + dir.file("model.ckpt") + " --input " + dir.file("tokens.txt") +
            " --frames 2 --tokens-per-frame 3 --options 1,2 --chosen 9 --out " + dir.file("x.csv"));
        CHECK(run.exit_code == 2);
    }
}

TEST_CASE("eval and inspect") {
    testutil::TempDir dir("cli_eval");
    REQUIRE(run_cli("toy-gen --kind model --L 12 --seed 5 --out " + dir.file("model.ckpt")).exit_code ==
            0);

    SUBCASE("builtin-toy eval prints both task accuracies") {
        const RunOutcome run = run_cli("eval --model " + dir.file("model.ckpt") +
                                       " --evaluator builtin-toy --tp-count 10 --tr-count 10");
        REQUIRE(run.exit_code == 0);
        CHECK(run.output.find("TP:") != std::string::npos);
        CHECK(run.output.find("TR:") != std::string::npos);
    }
    SUBCASE("external stub eval replays its fixtures") {
        const std::string stub = testutil::env_or_fail("ATTNMERGE_STUB");
        const RunOutcome run =
            run_cli("eval --model " + dir.file("model.ckpt") + " --evaluator 'external:" + stub +
                    " --merged TP=0.618,TR=0.497'");
        REQUIRE(run.exit_code == 0);
        CHECK(run.output.find("61.8") != std::string::npos);
        CHECK(run.output.find("49.7") != std::string::npos);
    }
    SUBCASE("base model and its identity merge score identically") {
        REQUIRE(run_cli("toy-gen --kind model --L 12 --seed 6 --out " + dir.file("n.ckpt"))
                    .exit_code == 0);
        REQUIRE(run_cli("random-k --L 12 --k 0 --alpha 1.0 --out " + dir.file("id.json")).exit_code ==
                0);
        REQUIRE(run_cli("merge --model-m " + dir.file("model.ckpt") + " --model-n " +
                        dir.file("n.ckpt") + " --recipe " + dir.file("id.json") + " --out " +
                        dir.file("same.ckpt"))
                    .exit_code == 0);
        const std::string flags = " --evaluator builtin-toy --tp-count 12 --tr-count 12";
        const RunOutcome base = run_cli("eval --model " + dir.file("model.ckpt") + flags);
        const RunOutcome merged = run_cli("eval --model " + dir.file("same.ckpt") + flags);
        REQUIRE(base.exit_code == 0);
        CHECK(base.output == merged.output);
    }
    SUBCASE("inspect reports the layer structure") {
        const RunOutcome run = run_cli("inspect --model " + dir.file("model.ckpt"));
        REQUIRE(run.exit_code == 0);
        CHECK(run.output.find("L = 12") != std::string::npos);
        CHECK(run.output.find("tok_embed.weight") != std::string::npos);
    }
    SUBCASE("unreadable checkpoint exits 4") {
        CHECK(run_cli("inspect --model " + dir.file("missing.ckpt")).exit_code == 4);
    }
}

TEST_CASE("evaluator failures exit with code 3") {
    testutil::TempDir dir("cli_evfail");
    const std::string stub = testutil::env_or_fail("ATTNMERGE_STUB");
    REQUIRE(run_cli("toy-gen --kind landscape-parents --L 6 --planted 1 --seed 2 --out-m " +
                    dir.file("m.ckpt") + " --out-n " + dir.file("n.ckpt"))
                .exit_code == 0);
    // a stub that never answers hello: handshake timeout surfaces as exit 3
    const RunOutcome run = run_cli(
        "search --model-m " + dir.file("m.ckpt") + " --model-n " + dir.file("n.ckpt") +
        " --evaluator 'external:" + stub + " --no-hello' --alpha-set 1.0 --budget 4 " +
        "--hello-timeout-ms 400 --out-dir " + dir.file("out"));
    CHECK(run.exit_code == 3);
    CHECK(run.output.find("hello") != std::string::npos);
}

TEST_CASE("mask-sweep through an external evaluator") {
    testutil::TempDir dir("cli_maskext");
    const std::string stub = testutil::env_or_fail("ATTNMERGE_STUB");
    REQUIRE(run_cli("toy-gen --kind model --L 6 --seed 11 --out " + dir.file("model.ckpt"))
                .exit_code == 0);
    const RunOutcome run = run_cli(
        "mask-sweep --model " + dir.file("model.ckpt") + " --layers 1,3 --kappas 1.0,0.5 " +
        "--evaluator 'external:" + stub + " --merged TP=0.4,TR=0.6' --metrics TP,TR --out " +
        dir.file("curve"));
    REQUIRE(run.exit_code == 0);
    // constant replay: no degradation at any kappa
    std::ifstream in(dir.file("curve.csv"));
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
        CHECK(line.substr(line.rfind(',') + 1) == "0");
        ++rows;
    }
    CHECK(rows == 4);
}

TEST_CASE("reference fixture recipes drive merge") {
    const std::string fixtures = testutil::env_or_fail("ATTNMERGE_FIXTURES");
    REQUIRE(!fixtures.empty());
    testutil::TempDir dir("cli_fixture");
    REQUIRE(run_cli("toy-gen --kind landscape-parents --L 28 --planted 1 --seed 31 --out-m " +
                    dir.file("m.ckpt") + " --out-n " + dir.file("n.ckpt"))
                .exit_code == 0);
    const RunOutcome run = run_cli("merge --model-m " + dir.file("m.ckpt") + " --model-n " +
                                   dir.file("n.ckpt") + " --recipe " + fixtures +
                                   "/recipe_longva_7b.json --out " + dir.file("merged.ckpt"));
    REQUIRE(run.exit_code == 0);
    CHECK(run.output.find("11 selected layer(s), 11 modified") != std::string::npos);
}
