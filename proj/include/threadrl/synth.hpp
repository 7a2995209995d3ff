#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <json.hpp>

#include "threadrl/error.hpp"
#include "threadrl/rng.hpp"
#include "threadrl/tree_corpus.hpp"

namespace threadrl {

// karma = base + sum of per-occurrence token scores
struct KeywordRule {
    std::map<std::string, std::int64_t> scores;
    std::int64_t base = 0;
};

// Keyword scoring plus `child_bonus` for every node whose parent's text
// contains `seed_token`. Rewards only become visible one level down.
struct DelayedRule {
    std::map<std::string, std::int64_t> scores;
    std::int64_t base = 0;
    std::string seed_token;
    std::int64_t child_bonus = 0;
};

// karma uniform on the integers [lo, hi]
struct UniformRule {
    std::int64_t lo = 0;
    std::int64_t hi = 0;
};

using KarmaRule = std::variant<KeywordRule, DelayedRule, UniformRule>;

struct SynthSpec {
    std::size_t node_count = 1;
    double branching_bias = 0.0;  // preferential-attachment strength
    std::vector<std::string> token_vocab;
    std::size_t min_tokens = 3;
    std::size_t max_tokens = 8;
    KarmaRule karma_rule = KeywordRule{};
    double noise_std = 0.0;
    std::uint64_t seed = 0;
};

inline void validate(const SynthSpec& spec) {
    if (spec.node_count < 1) throw ConfigError("SynthSpec.node_count must be >= 1");
    if (!(spec.branching_bias >= 0.0)) throw ConfigError("SynthSpec.branching_bias must be >= 0");
    if (spec.token_vocab.empty()) throw ConfigError("SynthSpec.token_vocab is empty");
    if (spec.min_tokens < 1 || spec.max_tokens < spec.min_tokens)
        throw ConfigError("SynthSpec token range must satisfy 1 <= min_tokens <= max_tokens");
    if (!(spec.noise_std >= 0.0)) throw ConfigError("SynthSpec.noise_std must be >= 0");
    if (const auto* u = std::get_if<UniformRule>(&spec.karma_rule); u && u->hi < u->lo)
        throw ConfigError("uniform karma rule needs lo <= hi");
}

namespace detail {

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && s[i] == ' ') ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::int64_t score_tokens(const std::map<std::string, std::int64_t>& scores, const std::string& text) {
    std::int64_t total = 0;
    for (const auto& tok : split_ws(text)) {
        auto it = scores.find(tok);
        if (it != scores.end()) total += it->second;
    }
    return total;
}

}  // namespace detail

// Grows a tree one node at a time: node i attaches to an existing node with
// probability proportional to 1 + branching_bias * (children so far).
// Bit-deterministic for a fixed spec.
inline DiscussionTree generate_synthetic_tree(const SynthSpec& spec, const std::string& tree_id = {}) {
    validate(spec);
    Rng rng(spec.seed);
    const std::size_t n = spec.node_count;

    std::vector<std::size_t> parent(n, DiscussionTree::kNoParent);
    std::vector<std::size_t> child_count(n, 0);
    for (std::size_t i = 1; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < i; ++j) total += 1.0 + spec.branching_bias * static_cast<double>(child_count[j]);
        double u = rng.uniform() * total;
        std::size_t pick = i - 1;
        for (std::size_t j = 0; j < i; ++j) {
            u -= 1.0 + spec.branching_bias * static_cast<double>(child_count[j]);
            if (u < 0.0) {
                pick = j;
                break;
            }
        }
        parent[i] = pick;
        ++child_count[pick];
    }

    std::vector<std::string> texts(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto len = spec.min_tokens + static_cast<std::size_t>(rng.below(spec.max_tokens - spec.min_tokens + 1));
        std::string t;
        for (std::size_t k = 0; k < len; ++k) {
            if (k) t += ' ';
            t += spec.token_vocab[static_cast<std::size_t>(rng.below(spec.token_vocab.size()))];
        }
        texts[i] = std::move(t);
    }

    std::vector<CommentNode> nodes(n);
    for (std::size_t i = 0; i < n; ++i) {
        double karma = std::visit(
            [&](const auto& rule) -> double {
                using R = std::decay_t<decltype(rule)>;
                if constexpr (std::is_same_v<R, KeywordRule>) {
                    return static_cast<double>(rule.base + detail::score_tokens(rule.scores, texts[i]));
                } else if constexpr (std::is_same_v<R, DelayedRule>) {
                    std::int64_t k = rule.base + detail::score_tokens(rule.scores, texts[i]);
                    if (i > 0) {
                        const auto toks = detail::split_ws(texts[parent[i]]);
                        if (std::find(toks.begin(), toks.end(), rule.seed_token) != toks.end()) k += rule.child_bonus;
                    }
                    return static_cast<double>(k);
                } else {
                    return static_cast<double>(rule.lo) +
                           static_cast<double>(rng.below(static_cast<std::uint64_t>(rule.hi - rule.lo) + 1));
                }
            },
            spec.karma_rule);
        if (spec.noise_std > 0.0) karma += spec.noise_std * rng.normal();

        auto& node = nodes[i];
        node.id = "n" + std::to_string(i);
        if (i > 0) node.parent_id = "n" + std::to_string(parent[i]);
        node.text = texts[i];
        node.karma = static_cast<std::int64_t>(std::llround(karma));
        node.order = static_cast<std::int64_t>(i);
    }
    return DiscussionTree::build(tree_id.empty() ? "synth-" + std::to_string(spec.seed) : tree_id, std::move(nodes));
}

// `count` trees; tree i uses seed derive_seed(spec.seed, i).
inline std::vector<DiscussionTree> generate_synthetic_corpus(const SynthSpec& spec, std::size_t count) {
    std::vector<DiscussionTree> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        SynthSpec s = spec;
        s.seed = derive_seed(spec.seed, i);
        out.push_back(generate_synthetic_tree(s, "synth-" + std::to_string(spec.seed) + "-" + std::to_string(i)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON form used by the `synth` command
// ---------------------------------------------------------------------------

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"node_count", "branching_bias", "token_vocab", "min_tokens",
                                                   "max_tokens", "karma_rule",     "noise_std",   "seed"};
    if (!j.is_object()) throw ConfigError("SynthSpec must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown SynthSpec key '" + k + "'");
    SynthSpec s;
    try {
        s.node_count = j.value("node_count", s.node_count);
        s.branching_bias = j.value("branching_bias", s.branching_bias);
        s.token_vocab = j.value("token_vocab", s.token_vocab);
        s.min_tokens = j.value("min_tokens", s.min_tokens);
        s.max_tokens = j.value("max_tokens", s.max_tokens);
        s.noise_std = j.value("noise_std", s.noise_std);
        s.seed = j.value("seed", s.seed);
        if (j.contains("karma_rule")) {
            const auto& r = j.at("karma_rule");
            const auto type = r.at("type").get<std::string>();
            if (type == "keyword") {
                s.karma_rule = KeywordRule{r.value("scores", std::map<std::string, std::int64_t>{}), r.value("base", std::int64_t{0})};
            } else if (type == "delayed") {
                s.karma_rule = DelayedRule{r.value("scores", std::map<std::string, std::int64_t>{}),
                                           r.value("base", std::int64_t{0}), r.at("seed_token").get<std::string>(),
                                           r.at("child_bonus").get<std::int64_t>()};
            } else if (type == "uniform") {
                s.karma_rule = UniformRule{r.at("lo").get<std::int64_t>(), r.at("hi").get<std::int64_t>()};
            } else {
                throw ConfigError("unknown karma_rule type '" + type + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad SynthSpec: ") + e.what());
    }
    validate(s);
    return s;
}

}  // namespace threadrl
