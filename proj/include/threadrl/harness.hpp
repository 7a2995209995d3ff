#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "threadrl/episode_env.hpp"
#include "threadrl/error.hpp"
#include "threadrl/q_models.hpp"
#include "threadrl/rng.hpp"
#include "threadrl/text_featurizer.hpp"
#include "threadrl/trainer.hpp"
#include "threadrl/tree_corpus.hpp"

namespace threadrl {

struct EvalConfig {
    std::size_t N = 10;
    std::size_t K = 3;
    double epsilon = 0.1;
    SelectMode mode = SelectMode::exhaustive;
    std::size_t m_prime = 10;
    std::size_t episodes = 1000;
    std::size_t runs = 5;
    std::uint64_t seed = 0;
};

struct EvalReport {
    std::string arch;
    std::size_t N = 0;
    std::size_t K = 0;
    std::size_t episodes = 0;  // per run
    std::size_t runs = 0;
    double mean = 0.0;         // average of per-run means
    double std = 0.0;          // sample std across runs
    double episode_std = 0.0;  // sample std across all episodes
    std::vector<double> per_run;
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    return {{"arch", r.arch}, {"N", r.N},     {"K", r.K},     {"episodes", r.episodes},
            {"runs", r.runs}, {"mean", r.mean}, {"std", r.std}, {"per_run", r.per_run}};
}

// Standard error of `mean` (episode spread over all episodes).
inline double standard_error(const EvalReport& r) {
    const auto n = static_cast<double>(r.episodes * r.runs);
    return n > 0 ? r.episode_std / std::sqrt(n) : 0.0;
}

namespace detail {

inline EvalReport summarize(std::string arch, const EvalConfig& cfg, const std::vector<std::vector<double>>& runs) {
    EvalReport r;
    r.arch = std::move(arch);
    r.N = cfg.N;
    r.K = cfg.K;
    r.episodes = cfg.episodes;
    r.runs = cfg.runs;
    std::vector<double> all;
    for (const auto& run : runs) {
        r.per_run.push_back(mean_std(run).first);
        all.insert(all.end(), run.begin(), run.end());
    }
    std::tie(r.mean, r.std) = mean_std(r.per_run);
    r.episode_std = mean_std(all).second;
    return r;
}

}  // namespace detail

// Frozen-parameter deployment: runs x episodes episodes on `trees`, each run
// seeded with derive_seed(cfg.seed, run). Karma is only tallied as a metric.
inline EvalReport evaluate(const QModel& model, const Vocabulary& vocab, const std::vector<DiscussionTree>& trees,
                           const EvalConfig& cfg) {
    if (model.vocab_fingerprint() != vocab.fingerprint())
        throw ConfigError("model vocabulary fingerprint '" + model.vocab_fingerprint() +
                          "' does not match vocabulary '" + vocab.fingerprint() + "'");
    if (model.dims().input_dim != vocab.size()) throw ConfigError("model input dimension differs from vocabulary size");
    if (trees.empty()) throw ConfigError("evaluation corpus is empty");
    check_window_config(cfg.N, cfg.K);
    std::vector<TreeFeatures> features;
    features.reserve(trees.size());
    for (const auto& t : trees) features.emplace_back(t, vocab);

    TrainConfig play;
    play.N = cfg.N;
    play.K = cfg.K;
    play.epsilon = cfg.epsilon;
    play.action_eval_mode = cfg.mode;
    play.m_prime = cfg.m_prime;
    std::vector<std::vector<double>> runs(cfg.runs);
    for (std::size_t r = 0; r < cfg.runs; ++r) {
        Rng rng(derive_seed(cfg.seed, r));
        for (std::size_t e = 0; e < cfg.episodes; ++e) {
            const auto& f = features[static_cast<std::size_t>(rng.below(features.size()))];
            runs[r].push_back(static_cast<double>(run_episode(f, model, play, rng, nullptr).episode_return));
        }
    }
    return detail::summarize(std::string(arch_name(model.arch())), cfg, runs);
}

struct BaselineReport {
    EvalReport random;
    double greedy_mean = 0.0;
    double greedy_std = 0.0;
    std::optional<double> exact_mean;  // over trees within the exhaustive-search limit
    double exact_std = 0.0;
    std::size_t exact_trees = 0;
};

// Random-policy line (same run/seed protocol as evaluate) and oracle upper
// bounds averaged per tree.
inline BaselineReport baseline_report(const std::vector<DiscussionTree>& trees, const EvalConfig& cfg) {
    if (trees.empty()) throw ConfigError("baseline corpus is empty");
    check_window_config(cfg.N, cfg.K);
    std::vector<std::vector<double>> runs(cfg.runs);
    for (std::size_t r = 0; r < cfg.runs; ++r) {
        Rng rng(derive_seed(cfg.seed, r));
        for (std::size_t e = 0; e < cfg.episodes; ++e) {
            const auto& t = trees[static_cast<std::size_t>(rng.below(trees.size()))];
            runs[r].push_back(static_cast<double>(random_rollout(t, cfg.N, cfg.K, rng)));
        }
    }
    BaselineReport b;
    b.random = detail::summarize("random", cfg, runs);
    std::vector<double> greedy, exact;
    for (const auto& t : trees) {
        greedy.push_back(static_cast<double>(oracle_greedy(t, cfg.K)));
        if (t.leaves().size() <= kOracleExactMaxLeaves) exact.push_back(static_cast<double>(oracle_exact(t, cfg.K)));
    }
    std::tie(b.greedy_mean, b.greedy_std) = mean_std(greedy);
    b.exact_trees = exact.size();
    if (!exact.empty()) {
        double m;
        std::tie(m, b.exact_std) = mean_std(exact);
        b.exact_mean = m;
    }
    return b;
}

inline void write_baseline_csv(std::ostream& out, const BaselineReport& b, std::size_t trees) {
    out << "line,mean,std,count\n";
    out << "random," << b.random.mean << ',' << b.random.std << ',' << b.random.runs * b.random.episodes << '\n';
    out << "oracle_greedy," << b.greedy_mean << ',' << b.greedy_std << ',' << trees << '\n';
    if (b.exact_mean)
        out << "oracle_exact," << *b.exact_mean << ',' << b.exact_std << ',' << b.exact_trees << '\n';
    else
        out << "oracle_exact,NA,NA,0\n";
}

// Evaluates a model trained at one K at each K of `k_list`, unchanged.
inline std::vector<EvalReport> generalization_eval(const QModel& model, const Vocabulary& vocab,
                                                   const std::vector<DiscussionTree>& trees, const EvalConfig& base,
                                                   const std::vector<std::size_t>& k_list) {
    if (!supports_varying_k(model.arch()))
        throw ConfigError(std::string(arch_name(model.arch())) +
                          " is tied to its training K; only drrn_sum and drrn_bilstm evaluate at other K");
    std::vector<EvalReport> out;
    for (std::size_t k : k_list) {
        EvalConfig cfg = base;
        cfg.K = k;
        out.push_back(evaluate(model, vocab, trees, cfg));
    }
    return out;
}

}  // namespace threadrl
