#include "attnmerge/objective.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "attnmerge/errors.hpp"
#include "attnmerge/evaluator.hpp"
#include "attnmerge/util.hpp"

namespace attnmerge {

double tp_degradation(const ObjectiveConfig& cfg, double acc_tp) {
    return std::max(0.0, cfg.base_tp - acc_tp);
}

double objective_score(const ObjectiveConfig& cfg, const TaskAccuracies& a) {
    return a.acc_tr - cfg.lambda * tp_degradation(cfg, a.acc_tp);
}

bool recipe_better(double f_a, const DiscreteRecipe& a, double f_b, const DiscreteRecipe& b) {
    if (f_a != f_b) return f_a > f_b;
    const auto zeros = [](const DiscreteRecipe& r) {
        return std::count(r.gates.begin(), r.gates.end(), std::uint8_t{0});
    };
    const auto za = zeros(a), zb = zeros(b);
    if (za != zb) return za < zb;
    const auto sa = a.bitstring(), sb = b.bitstring();
    if (sa != sb) return sa < sb;
    return a.alpha < b.alpha;
}

int EvalCache::quantize_alpha(double alpha) {
    return static_cast<int>(std::lround(alpha * 100.0));
}

EvalCache::Key EvalCache::make_key(const DiscreteRecipe& r) {
    return {quantize_alpha(r.alpha), r.bitstring()};
}

bool EvalCache::lookup(const Key& key, CacheEntry& out) const {
    std::lock_guard lock(mu_);
    const auto it = entries_.find(key);
    if (it == entries_.end()) return false;
    out = it->second;
    return true;
}

void EvalCache::insert(const Key& key, const CacheEntry& entry) {
    std::lock_guard lock(mu_);
    const auto [it, fresh] = entries_.emplace(key, entry);
    if (!fresh) return;  // idempotent: first deterministic value wins
    if (!persist_path_.empty()) {
        std::ofstream out(persist_path_, std::ios::app);
        char alpha_buf[16];
        std::snprintf(alpha_buf, sizeof alpha_buf, "%.2f", key.first / 100.0);
        out << alpha_buf << '\t' << key.second << '\t' << format_double(entry.acc.acc_tp) << '\t'
            << format_double(entry.acc.acc_tr) << '\t' << format_double(entry.objective) << '\n';
        out.flush();
    }
}

std::size_t EvalCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

void EvalCache::persist_to(const std::string& path) {
    std::lock_guard lock(mu_);
    persist_path_ = path;
}

void EvalCache::load(const std::string& path, int expected_layers) {
    std::ifstream in(path);
    if (!in) return;
    std::string line;
    std::lock_guard lock(mu_);
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 5) throw data_error("malformed cache line: " + line);
        const std::string& bits = fields[1];
        if (expected_layers > 0 && static_cast<int>(bits.size()) != expected_layers)
            throw data_error("cache dimension mismatch: gate string '" + bits + "' has " +
                             std::to_string(bits.size()) + " layers, expected " +
                             std::to_string(expected_layers));
        if (bits.find_first_not_of("01") != std::string::npos)
            throw data_error("malformed gate string in cache: " + bits);
        CacheEntry e;
        e.acc.acc_tp = std::stod(fields[2]);
        e.acc.acc_tr = std::stod(fields[3]);
        e.objective = std::stod(fields[4]);
        const int alpha_q = static_cast<int>(std::lround(std::stod(fields[0]) * 100.0));
        entries_.emplace(Key{alpha_q, bits}, e);
    }
}

ObjectiveEngine::ObjectiveEngine(Evaluator& evaluator, const Checkpoint& m, const Checkpoint& n,
                                 EvalCache& cache, const ObjectiveConfig& cfg, long budget)
    : evaluator_(evaluator), m_(m), n_(n), cache_(cache), cfg_(cfg), budget_(budget) {}

CacheEntry ObjectiveEngine::evaluate(const DiscreteRecipe& r) {
    const auto key = EvalCache::make_key(r);
    CacheEntry entry;
    if (cache_.lookup(key, entry)) return entry;

    {
        std::lock_guard lock(mu_);
        if (invocations_ >= budget_) throw BudgetExhausted(budget_);
        ++invocations_;
    }

    try {
        const Checkpoint merged = apply_recipe(m_, n_, r);
        entry.acc = evaluator_.evaluate_tasks(merged);
    } catch (const BudgetExhausted&) {
        throw;
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw evaluator_error(std::string("evaluation failed for recipe alpha=") +
                              format_double(r.alpha) + " gates=" + r.bitstring() + ": " + e.what());
    }
    entry.objective = objective_score(cfg_, entry.acc);
    cache_.insert(key, entry);
    return entry;
}

}  // namespace attnmerge
