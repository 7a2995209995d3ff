#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "threadrl/error.hpp"
#include "threadrl/rng.hpp"
#include "threadrl/tree_corpus.hpp"

namespace threadrl {

// A K-subset of candidate-window slots, kept sorted ascending so that the
// picks are also in chronological order.
struct ActionChoice {
    std::vector<std::size_t> picks;

    friend bool operator==(const ActionChoice&, const ActionChoice&) = default;
    friend auto operator<=>(const ActionChoice&, const ActionChoice&) = default;
};

inline void validate_action(const ActionChoice& a, std::size_t n, std::size_t k) {
    if (a.picks.size() != k)
        throw InvalidActionError("action picks " + std::to_string(a.picks.size()) + " comments, expected " +
                                 std::to_string(k));
    for (std::size_t i = 0; i < a.picks.size(); ++i) {
        if (a.picks[i] >= n)
            throw InvalidActionError("pick " + std::to_string(a.picks[i]) + " outside window of " + std::to_string(n));
        for (std::size_t j = 0; j < i; ++j)
            if (a.picks[i] == a.picks[j]) throw InvalidActionError("duplicate pick " + std::to_string(a.picks[i]));
    }
}

inline void check_window_config(std::size_t n, std::size_t k) {
    if (k < 1 || k > n)
        throw ConfigError("need 1 <= K <= N, got N=" + std::to_string(n) + " K=" + std::to_string(k));
    if (n > 64) throw ConfigError("N above 64 is not supported");
}

// Positions (into the tree's chronological node array) of the N comments
// offered at one step, ascending.
struct CandidateWindow {
    std::vector<std::size_t> candidates;
};

struct EpisodeState {
    const DiscussionTree* tree = nullptr;
    std::size_t window_size = 0;  // N
    std::size_t picks_per_step = 0;  // K
    std::vector<std::size_t> tracked;  // M_t
    std::vector<std::size_t> history;  // root, then every pick in order
    std::size_t cursor = 0;  // last consumed position
    std::size_t step = 0;
};

struct StepOutcome {
    std::int64_t reward = 0;
    std::optional<CandidateWindow> next_window;  // empty = terminal
    EpisodeState next_state;
};

namespace detail {

// Collects the next `n` positions after `from` lying strictly below one of
// `tracked`. Returns nullopt when the stream runs out first.
inline std::optional<CandidateWindow> scan_window(const DiscussionTree& tree, const std::vector<std::size_t>& tracked,
                                                  std::size_t from, std::size_t n, std::size_t& cursor) {
    CandidateWindow w;
    w.candidates.reserve(n);
    for (std::size_t pos = from + 1; pos < tree.size(); ++pos) {
        const bool eligible = std::any_of(tracked.begin(), tracked.end(),
                                          [&](std::size_t t) { return tree.is_strict_descendant(pos, t); });
        if (!eligible) continue;
        w.candidates.push_back(pos);
        if (w.candidates.size() == n) {
            cursor = pos;
            return w;
        }
    }
    cursor = tree.size() - 1;
    return std::nullopt;
}

}  // namespace detail

inline std::pair<EpisodeState, std::optional<CandidateWindow>> reset(const DiscussionTree& tree, std::size_t n,
                                                                     std::size_t k) {
    check_window_config(n, k);
    EpisodeState s;
    s.tree = &tree;
    s.window_size = n;
    s.picks_per_step = k;
    s.tracked = {0};
    s.history = {0};
    s.cursor = 0;
    auto w = detail::scan_window(tree, s.tracked, 0, n, s.cursor);
    return {std::move(s), std::move(w)};
}

inline StepOutcome step(const EpisodeState& state, const CandidateWindow& window, const ActionChoice& action) {
    validate_action(action, window.candidates.size(), state.picks_per_step);
    StepOutcome out;
    out.next_state = state;
    auto& next = out.next_state;
    next.tracked.clear();
    for (std::size_t slot : action.picks) {
        const std::size_t pos = window.candidates[slot];
        next.tracked.push_back(pos);
        next.history.push_back(pos);
        out.reward += state.tree->node(pos).karma;
    }
    next.step = state.step + 1;
    out.next_window = detail::scan_window(*state.tree, next.tracked, state.cursor, state.window_size, next.cursor);
    return out;
}

// Audit line: `tree_id step picked_ids reward`, ids comma-separated.
inline std::string action_log_line(const EpisodeState& before, const CandidateWindow& window,
                                   const ActionChoice& action, std::int64_t reward) {
    std::ostringstream os;
    os << before.tree->tree_id() << ' ' << before.step << ' ';
    for (std::size_t i = 0; i < action.picks.size(); ++i) {
        if (i) os << ',';
        os << before.tree->node(window.candidates[action.picks[i]]).id;
    }
    os << ' ' << reward;
    return os.str();
}

// ---------------------------------------------------------------------------
// Action space
// ---------------------------------------------------------------------------

// C(n, k), saturating at UINT64_MAX.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    unsigned __int128 r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
        if (r > std::numeric_limits<std::uint64_t>::max()) return std::numeric_limits<std::uint64_t>::max();
    }
    return static_cast<std::uint64_t>(r);
}

// Calls f(const ActionChoice&) for every K-subset of [0, N) in
// lexicographic order.
template <typename F>
void for_each_action(std::size_t n, std::size_t k, F&& f) {
    if (k > n) return;
    ActionChoice a;
    a.picks.resize(k);
    for (std::size_t i = 0; i < k; ++i) a.picks[i] = i;
    while (true) {
        f(static_cast<const ActionChoice&>(a));
        std::size_t i = k;
        while (i > 0 && a.picks[i - 1] == n - k + (i - 1)) --i;
        if (i == 0) return;
        ++a.picks[i - 1];
        for (std::size_t j = i; j < k; ++j) a.picks[j] = a.picks[j - 1] + 1;
    }
}

inline std::vector<ActionChoice> enumerate_actions(std::size_t n, std::size_t k) {
    std::vector<ActionChoice> out;
    for_each_action(n, k, [&](const ActionChoice& a) { out.push_back(a); });
    return out;
}

// One uniformly random K-subset (partial Fisher-Yates).
inline ActionChoice random_action(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> slots(n);
    for (std::size_t i = 0; i < n; ++i) slots[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(slots[i], slots[j]);
    }
    ActionChoice a{{slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(k)}};
    std::sort(a.picks.begin(), a.picks.end());
    return a;
}

// m draws, uniform over C(N,K); without replacement while m <= C(N,K).
inline std::vector<ActionChoice> sample_actions(std::size_t n, std::size_t k, std::size_t m, Rng& rng) {
    check_window_config(n, k);
    const std::uint64_t total = binomial(n, k);
    std::vector<ActionChoice> out;
    out.reserve(m);
    if (m > total) {
        for (std::size_t i = 0; i < m; ++i) out.push_back(random_action(n, k, rng));
        return out;
    }
    if (total <= 4096) {
        auto all = enumerate_actions(n, k);
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(all.size() - i));
            std::swap(all[i], all[j]);
            out.push_back(all[i]);
        }
        return out;
    }
    std::set<ActionChoice> seen;
    while (out.size() < m) {
        auto a = random_action(n, k, rng);
        if (seen.insert(a).second) out.push_back(std::move(a));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

// Plays one episode with uniformly random actions; returns the summed reward.
inline std::int64_t random_rollout(const DiscussionTree& tree, std::size_t n, std::size_t k, Rng& rng) {
    auto [state, window] = reset(tree, n, k);
    std::int64_t ret = 0;
    while (window) {
        auto out = step(state, *window, random_action(n, k, rng));
        ret += out.reward;
        state = std::move(out.next_state);
        window = std::move(out.next_window);
    }
    return ret;
}

// Upper-bound heuristic: K times, add the root-to-leaf path with the largest
// karma over not-yet-covered comments (ties to the earliest leaf). Returns
// the karma of the covered comments; the root post never counts.
inline std::int64_t oracle_greedy(const DiscussionTree& tree, std::size_t k) {
    if (k < 1) throw ConfigError("oracle_greedy needs K >= 1");
    const std::size_t n = tree.size();
    std::vector<char> covered(n, 0);
    covered[0] = 1;
    std::vector<char> used_leaf(n, 0);
    std::vector<std::int64_t> gain(n, 0);
    std::int64_t total = 0;
    for (std::size_t round = 0; round < k; ++round) {
        for (std::size_t i = 1; i < n; ++i) gain[i] = gain[tree.parent(i)] + (covered[i] ? 0 : tree.node(i).karma);
        std::optional<std::size_t> best;
        for (std::size_t leaf : tree.leaves()) {
            if (used_leaf[leaf]) continue;
            if (!best || gain[leaf] > gain[*best]) best = leaf;
        }
        if (!best) break;
        used_leaf[*best] = 1;
        total += gain[*best];
        for (std::size_t v = *best; v != 0; v = tree.parent(v)) covered[v] = 1;
    }
    return total;
}

inline constexpr std::size_t kOracleExactMaxLeaves = 30;

// Exact maximum over all min(K, leaves)-subsets of root-to-leaf paths of the
// karma of their union (root excluded).
inline std::int64_t oracle_exact(const DiscussionTree& tree, std::size_t k) {
    if (k < 1) throw ConfigError("oracle_exact needs K >= 1");
    const auto& leaves = tree.leaves();
    if (leaves.size() > kOracleExactMaxLeaves)
        throw ConfigError("oracle_exact: tree '" + tree.tree_id() + "' has " + std::to_string(leaves.size()) +
                          " leaves (limit " + std::to_string(kOracleExactMaxLeaves) + "); use oracle_greedy");
    if (tree.size() == 1) return 0;
    const std::size_t pick = std::min(k, leaves.size());

    std::vector<std::vector<std::size_t>> paths;
    for (std::size_t leaf : leaves) {
        std::vector<std::size_t> p;
        for (std::size_t v = leaf; v != 0; v = tree.parent(v)) p.push_back(v);
        paths.push_back(std::move(p));
    }

    std::vector<int> cover(tree.size(), 0);
    std::int64_t current = 0;
    std::int64_t best = std::numeric_limits<std::int64_t>::min();
    auto add = [&](const std::vector<std::size_t>& p, int delta) {
        for (std::size_t v : p) {
            if (delta > 0 && cover[v]++ == 0) current += tree.node(v).karma;
            if (delta < 0 && --cover[v] == 0) current -= tree.node(v).karma;
        }
    };
    auto recurse = [&](auto& self, std::size_t start, std::size_t left) -> void {
        if (left == 0) {
            best = std::max(best, current);
            return;
        }
        for (std::size_t i = start; i + left <= paths.size(); ++i) {
            add(paths[i], +1);
            self(self, i + 1, left - 1);
            add(paths[i], -1);
        }
    };
    recurse(recurse, 0, pick);
    return best;
}

}  // namespace threadrl
