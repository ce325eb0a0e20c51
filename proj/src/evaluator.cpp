#include "attnmerge/evaluator.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <thread>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"
#include "json.hpp"

namespace attnmerge {

namespace {

using json = nlohmann::json;

void validate_accuracies(const std::map<std::string, double>& acc,
                         const std::vector<std::string>& tasks) {
    for (const auto& t : tasks) {
        const auto it = acc.find(t);
        if (it == acc.end()) throw evaluator_error("evaluator reply is missing task '" + t + "'");
        if (!(it->second >= 0.0 && it->second <= 1.0))
            throw evaluator_error("accuracy for task '" + t + "' out of [0,1]: " +
                                  format_double(it->second));
    }
}

}  // namespace

EvaluatorSpec parse_evaluator_spec(const std::string& text) {
    EvaluatorSpec spec;
    if (text == "builtin-landscape") {
        spec.kind = EvaluatorSpec::Kind::builtin_landscape;
    } else if (text == "builtin-toy") {
        spec.kind = EvaluatorSpec::Kind::builtin_toy;
    } else if (text.rfind("external:", 0) == 0) {
        spec.kind = EvaluatorSpec::Kind::external;
        spec.command = text.substr(9);
        if (spec.command.empty()) throw usage_error("external evaluator spec has an empty command");
    } else {
        throw usage_error("unknown evaluator spec '" + text +
                          "' (expected builtin-landscape, builtin-toy or external:<command>)");
    }
    return spec;
}

std::map<std::string, double> Evaluator::evaluate_path(const std::string& path,
                                                       const std::vector<std::string>& tasks) {
    return evaluate(read_checkpoint(path), tasks);
}

TaskAccuracies Evaluator::evaluate_tasks(const Checkpoint& ck) {
    const auto acc = evaluate(ck, {"TP", "TR"});
    TaskAccuracies out;
    out.acc_tp = acc.at("TP");
    out.acc_tr = acc.at("TR");
    return out;
}

// ---------------------------------------------------------------------------

EvaluatorCaps LandscapeEvaluator::handshake() {
    return {{"TP", "TR"}, std::numeric_limits<int>::max()};
}

TaskAccuracies LandscapeEvaluator::evaluate_tasks(const Checkpoint& ck) {
    return landscape_eval(ck, land_);
}

std::map<std::string, double> LandscapeEvaluator::evaluate(const Checkpoint& ck,
                                                           const std::vector<std::string>& tasks) {
    const TaskAccuracies a = landscape_eval(ck, land_);
    std::map<std::string, double> out;
    for (const auto& t : tasks) {
        if (t == "TP")
            out[t] = a.acc_tp;
        else if (t == "TR")
            out[t] = a.acc_tr;
        else
            throw evaluator_error("landscape evaluator does not provide task '" + t + "'");
    }
    return out;
}

EvaluatorCaps ToyProxyEvaluator::handshake() {
    return {{"TP", "TR"}, std::numeric_limits<int>::max()};
}

TaskAccuracies ToyProxyEvaluator::evaluate_tasks(const Checkpoint& ck) {
    return proxy_eval(ToyAttentionModel::from_checkpoint(ck), suite_);
}

std::map<std::string, double> ToyProxyEvaluator::evaluate(const Checkpoint& ck,
                                                          const std::vector<std::string>& tasks) {
    const TaskAccuracies a = evaluate_tasks(ck);
    std::map<std::string, double> out;
    for (const auto& t : tasks) {
        if (t == "TP")
            out[t] = a.acc_tp;
        else if (t == "TR")
            out[t] = a.acc_tr;
        else
            throw evaluator_error("toy proxy evaluator does not provide task '" + t + "'");
    }
    return out;
}

// ---------------------------------------------------------------------------
// External subprocess client. One writer mutex, one reader thread per child
// process; replies are matched to requests by id. Pending entries are tagged
// with the spawn generation so a dying reader only fails its own requests.

struct ExternalEvaluator::Impl {
    EvaluatorSpec spec;

    std::mutex handshake_mu;  // serializes hello exchanges; taken before mu
    std::mutex mu;
    std::condition_variable cv;

    pid_t pid = -1;
    int stdin_fd = -1;
    FILE* stdout_file = nullptr;
    std::thread reader;
    long generation = 0;

    struct Pending {
        long gen = 0;
        bool done = false;
        bool failed = false;  // process died before a reply arrived
        json reply;
    };
    std::map<long, std::shared_ptr<Pending>> pending;
    std::shared_ptr<Pending> hello_pending;
    long next_id = 1;
    int in_flight = 0;
    std::optional<EvaluatorCaps> caps;

    explicit Impl(EvaluatorSpec s) : spec(std::move(s)) {}

    ~Impl() {
        std::unique_lock lock(mu);
        kill_child(lock);
    }

    void spawn(std::unique_lock<std::mutex>&) {
        int to_child[2], from_child[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0)
            throw evaluator_error("failed to create evaluator pipes");
        const pid_t child = fork();
        if (child < 0) throw evaluator_error("failed to fork evaluator process");
        if (child == 0) {
            dup2(to_child[0], STDIN_FILENO);
            dup2(from_child[1], STDOUT_FILENO);
            close(to_child[0]);
            close(to_child[1]);
            close(from_child[0]);
            close(from_child[1]);
            execl("/bin/sh", "sh", "-c", spec.command.c_str(), static_cast<char*>(nullptr));
            _exit(127);
        }
        close(to_child[0]);
        close(from_child[1]);
        pid = child;
        stdin_fd = to_child[1];
        stdout_file = fdopen(from_child[0], "r");
        ++generation;
        reader = std::thread([this, f = stdout_file, gen = generation] { reader_loop(f, gen); });
    }

    void kill_child(std::unique_lock<std::mutex>& lock) {
        if (stdin_fd >= 0) {
            close(stdin_fd);
            stdin_fd = -1;
        }
        const pid_t dead = pid;
        pid = -1;
        caps.reset();
        FILE* f = stdout_file;
        stdout_file = nullptr;
        std::thread r = std::move(reader);

        lock.unlock();
        if (dead > 0) {
            int status = 0;
            bool exited = false;
            for (int i = 0; i < 200; ++i) {  // ~2 s of grace after stdin EOF
                if (waitpid(dead, &status, WNOHANG) != 0) {
                    exited = true;
                    break;
                }
                std::this_thread::sleep_for(std::chrono::milliseconds(10));
            }
            if (!exited) {
                kill(dead, SIGKILL);
                waitpid(dead, &status, 0);
            }
        }
        if (r.joinable()) r.join();
        if (f) fclose(f);
        lock.lock();
    }

    void reader_loop(FILE* f, long my_gen) {
        char* line = nullptr;
        std::size_t cap_bytes = 0;
        while (true) {
            const ssize_t len = getline(&line, &cap_bytes, f);
            if (len < 0) break;  // EOF: child exited or closed stdout
            json reply;
            try {
                reply = json::parse(std::string_view(line, static_cast<std::size_t>(len)));
            } catch (const json::exception&) {
                continue;  // tolerate evaluator chatter on stdout
            }
            std::lock_guard lock(mu);
            if (reply.contains("id") && reply["id"].is_number()) {
                const long id = reply["id"].get<long>();
                const auto it = pending.find(id);
                if (it != pending.end() && it->second->gen == my_gen) {
                    it->second->reply = std::move(reply);
                    it->second->done = true;
                    pending.erase(it);
                    cv.notify_all();
                }
            } else if (reply.contains("op") && reply["op"] == "hello") {
                if (hello_pending && hello_pending->gen == my_gen) {
                    hello_pending->reply = std::move(reply);
                    hello_pending->done = true;
                    hello_pending.reset();
                    cv.notify_all();
                }
            }
        }
        free(line);
        std::lock_guard lock(mu);
        for (auto it = pending.begin(); it != pending.end();) {
            if (it->second->gen == my_gen) {
                it->second->failed = true;
                it->second->done = true;
                it = pending.erase(it);
            } else {
                ++it;
            }
        }
        if (hello_pending && hello_pending->gen == my_gen) {
            hello_pending->failed = true;
            hello_pending->done = true;
            hello_pending.reset();
        }
        cv.notify_all();
    }

    // Returns false on a broken pipe instead of throwing; the caller decides
    // whether a restart attempt remains.
    bool send(const std::string& line) {
        if (stdin_fd < 0) return false;
        std::string buf = line;
        buf += '\n';
        std::size_t off = 0;
        while (off < buf.size()) {
            const ssize_t n = ::write(stdin_fd, buf.data() + off, buf.size() - off);
            if (n <= 0) return false;
            off += static_cast<std::size_t>(n);
        }
        return true;
    }

    EvaluatorCaps do_handshake() {
        std::lock_guard handshake_lock(handshake_mu);
        std::unique_lock lock(mu);
        if (caps) return *caps;
        if (pid < 0) spawn(lock);
        auto p = std::make_shared<Pending>();
        p->gen = generation;
        hello_pending = p;
        if (!send(R"({"op":"hello"})")) {
            hello_pending.reset();
            kill_child(lock);
            throw evaluator_error("evaluator process rejected the hello request");
        }
        const auto deadline =
            std::chrono::steady_clock::now() + std::chrono::milliseconds(spec.hello_timeout_ms);
        if (!cv.wait_until(lock, deadline, [&] { return p->done; })) {
            hello_pending.reset();
            kill_child(lock);
            throw evaluator_error("evaluator did not answer hello within " +
                                  std::to_string(spec.hello_timeout_ms) +
                                  " ms (command: " + spec.command + ")");
        }
        if (p->failed) throw evaluator_error("evaluator exited during handshake");
        EvaluatorCaps c;
        try {
            c.tasks = p->reply.at("tasks").get<std::vector<std::string>>();
            c.capacity = p->reply.value("capacity", 1);
        } catch (const json::exception& e) {
            throw evaluator_error(std::string("malformed hello reply: ") + e.what());
        }
        if (c.capacity < 1) throw evaluator_error("evaluator declared capacity < 1");
        for (const auto& want : spec.tasks) {
            if (std::find(c.tasks.begin(), c.tasks.end(), want) == c.tasks.end())
                throw evaluator_error("evaluator does not support required task '" + want + "'");
        }
        caps = c;
        return c;
    }

    std::map<std::string, double> request(const std::string& ckpt_path,
                                          const std::vector<std::string>& tasks) {
        for (int attempt = 0;; ++attempt) {
            {
                std::unique_lock lock(mu);
                if (!caps) {
                    lock.unlock();
                    do_handshake();
                    lock.lock();
                }
            }
            std::shared_ptr<Pending> p;
            {
                std::unique_lock lock(mu);
                if (!caps) continue;  // lost a race with a restart; try again
                cv.wait(lock, [&] { return !caps || in_flight < caps->capacity; });
                if (!caps) continue;
                ++in_flight;
                const long id = next_id++;
                p = std::make_shared<Pending>();
                p->gen = generation;
                pending[id] = p;
                const json req = {
                    {"id", id}, {"op", "evaluate"}, {"checkpoint", ckpt_path}, {"tasks", tasks}};
                if (!send(req.dump())) {
                    pending.erase(id);
                    --in_flight;
                    cv.notify_all();
                    kill_child(lock);
                    if (attempt == 0) continue;  // restart once, then fatal
                    throw evaluator_error("broken pipe to evaluator (after one restart)");
                }
                cv.wait(lock, [&] { return p->done; });
                --in_flight;
                cv.notify_all();
                if (p->failed) {
                    if (pid >= 0 && p->gen == generation) kill_child(lock);
                    if (attempt == 0) continue;
                    throw evaluator_error("evaluator process died twice while handling a request");
                }
            }
            const json& reply = p->reply;
            if (reply.contains("error"))
                throw evaluator_error("evaluator error: " + reply["error"].get<std::string>());
            if (!reply.contains("acc") || !reply["acc"].is_object())
                throw evaluator_error("evaluator reply has neither 'acc' nor 'error'");
            std::map<std::string, double> acc;
            for (const auto& [k, v] : reply["acc"].items()) acc[k] = v.get<double>();
            validate_accuracies(acc, tasks);
            return acc;
        }
    }
};

ExternalEvaluator::ExternalEvaluator(EvaluatorSpec spec) : impl_(new Impl(std::move(spec))) {}

ExternalEvaluator::~ExternalEvaluator() = default;

EvaluatorCaps ExternalEvaluator::handshake() { return impl_->do_handshake(); }

std::map<std::string, double> ExternalEvaluator::evaluate(const Checkpoint& ck,
                                                          const std::vector<std::string>& tasks) {
    const auto path = temp_path("attnmerge_eval", ".ckpt");
    write_checkpoint(ck, path.string());
    try {
        auto out = impl_->request(path.string(), tasks);
        std::filesystem::remove(path);
        return out;
    } catch (...) {
        std::filesystem::remove(path);
        throw;
    }
}

std::map<std::string, double> ExternalEvaluator::evaluate_path(const std::string& path,
                                                               const std::vector<std::string>& tasks) {
    return impl_->request(path, tasks);
}

std::unique_ptr<Evaluator> make_evaluator(const EvaluatorSpec& spec, BuiltinAssets assets) {
    switch (spec.kind) {
        case EvaluatorSpec::Kind::builtin_landscape:
            if (!assets.landscape)
                throw usage_error("builtin-landscape evaluator needs a planted landscape");
            return std::make_unique<LandscapeEvaluator>(std::move(*assets.landscape));
        case EvaluatorSpec::Kind::builtin_toy:
            if (!assets.suite) throw usage_error("builtin-toy evaluator needs a proxy suite");
            return std::make_unique<ToyProxyEvaluator>(std::move(*assets.suite));
        case EvaluatorSpec::Kind::external:
            return std::make_unique<ExternalEvaluator>(spec);
    }
    throw usage_error("unreachable evaluator kind");
}

}  // namespace attnmerge
