#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "attnmerge/objective.hpp"
#include "attnmerge/tensor_store.hpp"
#include "attnmerge/toy_eval.hpp"

namespace attnmerge {

struct EvaluatorCaps {
    std::vector<std::string> tasks;
    int capacity = 1;  // max concurrent evaluate requests
};

/// Where accuracies come from. Builtins run in process; the external kind
/// spawns a subprocess speaking newline-delimited JSON on stdin/stdout:
///   -> {"op":"hello"}
///   <- {"op":"hello","tasks":["TP","TR"],"capacity":1}
///   -> {"id":1,"op":"evaluate","checkpoint":"/tmp/x.ckpt","tasks":["TP","TR"]}
///   <- {"id":1,"acc":{"TP":0.618,"TR":0.497}}   or   {"id":1,"error":"..."}
/// Checkpoints travel by file path; unknown fields are ignored.
struct EvaluatorSpec {
    enum class Kind { builtin_landscape, builtin_toy, external };
    Kind kind = Kind::builtin_landscape;
    std::string command;                       // external only, run via /bin/sh -c
    std::vector<std::string> tasks{"TP", "TR"};
    long hello_timeout_ms = 30000;
};

/// "builtin-landscape", "builtin-toy" or "external:<command line>".
EvaluatorSpec parse_evaluator_spec(const std::string& text);

class Evaluator {
  public:
    virtual ~Evaluator() = default;

    /// Capabilities; for the external kind this performs the hello exchange.
    virtual EvaluatorCaps handshake() = 0;

    /// One request/response per call; accuracies are validated to [0,1].
    virtual std::map<std::string, double> evaluate(const Checkpoint& ck,
                                                   const std::vector<std::string>& tasks) = 0;

    /// Evaluate an on-disk checkpoint; the external kind forwards the path
    /// without copying.
    virtual std::map<std::string, double> evaluate_path(const std::string& path,
                                                        const std::vector<std::string>& tasks);

    /// TP/TR convenience used by the search objective.
    virtual TaskAccuracies evaluate_tasks(const Checkpoint& ck);
};

class LandscapeEvaluator : public Evaluator {
  public:
    explicit LandscapeEvaluator(PlantedLandscape land) : land_(std::move(land)) {}
    EvaluatorCaps handshake() override;
    std::map<std::string, double> evaluate(const Checkpoint& ck,
                                           const std::vector<std::string>& tasks) override;
    TaskAccuracies evaluate_tasks(const Checkpoint& ck) override;
    const PlantedLandscape& landscape() const { return land_; }

  private:
    PlantedLandscape land_;
};

class ToyProxyEvaluator : public Evaluator {
  public:
    explicit ToyProxyEvaluator(ProxyTaskSuite suite) : suite_(std::move(suite)) {}
    EvaluatorCaps handshake() override;
    std::map<std::string, double> evaluate(const Checkpoint& ck,
                                           const std::vector<std::string>& tasks) override;
    TaskAccuracies evaluate_tasks(const Checkpoint& ck) override;
    const ProxyTaskSuite& suite() const { return suite_; }

  private:
    ProxyTaskSuite suite_;
};

/// Client for the subprocess protocol. One process serves many requests, up
/// to its declared capacity in flight; responses match requests by id. On a
/// broken pipe the process is restarted once per request, then the failure
/// is fatal.
class ExternalEvaluator : public Evaluator {
  public:
    explicit ExternalEvaluator(EvaluatorSpec spec);
    ~ExternalEvaluator() override;

    EvaluatorCaps handshake() override;
    std::map<std::string, double> evaluate(const Checkpoint& ck,
                                           const std::vector<std::string>& tasks) override;
    std::map<std::string, double> evaluate_path(const std::string& path,
                                                const std::vector<std::string>& tasks) override;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Builds the evaluator an EvaluatorSpec describes. Builtins draw their
/// assets (landscape or suite) from the provided options.
struct BuiltinAssets {
    std::optional<PlantedLandscape> landscape;
    std::optional<ProxyTaskSuite> suite;
};
std::unique_ptr<Evaluator> make_evaluator(const EvaluatorSpec& spec, BuiltinAssets assets = {});

}  // namespace attnmerge
