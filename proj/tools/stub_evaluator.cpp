// Scriptable evaluator speaking the subprocess protocol; replays fixed
// accuracies so searches and protocol clients can be tested without a real
// model harness. When --model-m is given, checkpoints byte-identical to that
// file receive the --base accuracies and everything else the --merged ones.
//
// Misbehavior switches (--no-hello, --crash-on-request, --crash-unless-marker,
// --bad-acc, --drop-task, --delay-ms) exercise the client's timeout, restart
// and validation paths.

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

using json = nlohmann::json;

namespace {

std::map<std::string, double> parse_acc_list(const std::string& text) {
    // "TP=0.6,TR=0.401"
    std::map<std::string, double> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) continue;
        out[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
    }
    return out;
}

std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"protocol stub evaluator"};
    std::string base_spec = "TP=0.6,TR=0.401";
    std::string merged_spec = "TP=0.618,TR=0.497";
    std::string model_m, tasks = "TP,TR", crash_marker;
    int capacity = 1, crash_on_request = 0, delay_ms = 0;
    bool no_hello = false, bad_acc = false, drop_task = false;
    app.add_option("--base", base_spec, "accuracies when the checkpoint equals --model-m");
    app.add_option("--merged", merged_spec, "accuracies for any other checkpoint");
    app.add_option("--model-m", model_m, "reference checkpoint for base detection");
    app.add_option("--tasks", tasks);
    app.add_option("--capacity", capacity);
    app.add_option("--crash-on-request", crash_on_request, "exit upon receiving the Nth evaluate");
    app.add_option("--crash-unless-marker", crash_marker,
                   "crash on the first evaluate unless this file exists (created on crash)");
    app.add_option("--delay-ms", delay_ms, "sleep before every reply");
    app.add_flag("--no-hello", no_hello, "never answer the hello request");
    app.add_flag("--bad-acc", bad_acc, "report an accuracy of 1.2");
    app.add_flag("--drop-task", drop_task, "omit the last requested task from replies");
    CLI11_PARSE(app, argc, argv);

    const auto base_acc = parse_acc_list(base_spec);
    const auto merged_acc = parse_acc_list(merged_spec);
    std::vector<char> reference;
    if (!model_m.empty()) reference = read_file(model_m);

    int evaluate_count = 0;
    std::string line;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        json req;
        try {
            req = json::parse(line);
        } catch (const json::exception&) {
            continue;
        }
        if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));

        const std::string op = req.value("op", "");
        if (op == "hello") {
            if (no_hello) continue;
            json reply = {{"op", "hello"}, {"capacity", capacity}};
            reply["tasks"] = json::array();
            for (const auto& t : [&] {
                     std::vector<std::string> out;
                     std::istringstream in(tasks);
                     std::string item;
                     while (std::getline(in, item, ',')) out.push_back(item);
                     return out;
                 }())
                reply["tasks"].push_back(t);
            std::cout << reply.dump() << "\n" << std::flush;
            continue;
        }
        if (op == "evaluate") {
            ++evaluate_count;
            if (crash_on_request > 0 && evaluate_count >= crash_on_request) _exit(9);
            if (!crash_marker.empty() && !std::filesystem::exists(crash_marker)) {
                std::ofstream(crash_marker) << "crashed\n";
                _exit(9);
            }
            json reply = {{"id", req.value("id", 0)}};
            const std::string path = req.value("checkpoint", "");
            const bool is_base = !reference.empty() && read_file(path) == reference;
            const auto& acc = is_base ? base_acc : merged_acc;
            json acc_json = json::object();
            const auto wanted = req.value("tasks", std::vector<std::string>{});
            for (std::size_t i = 0; i < wanted.size(); ++i) {
                if (drop_task && i + 1 == wanted.size()) break;
                const auto it = acc.find(wanted[i]);
                if (it == acc.end()) {
                    reply["error"] = "unknown task " + wanted[i];
                    break;
                }
                acc_json[wanted[i]] = bad_acc ? 1.2 : it->second;
            }
            if (!reply.contains("error")) reply["acc"] = acc_json;
            std::cout << reply.dump() << "\n" << std::flush;
            continue;
        }
        // Unknown op: ignore per protocol tolerance.
    }
    return 0;
}
