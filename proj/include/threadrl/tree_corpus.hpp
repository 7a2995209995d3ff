#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "threadrl/error.hpp"
#include "threadrl/rng.hpp"

namespace threadrl {

struct CommentNode {
    std::string id;
    std::optional<std::string> parent_id;  // empty only for the root post
    std::string text;
    std::int64_t karma = 0;
    std::int64_t order = 0;  // chronological rank within the tree

    friend bool operator==(const CommentNode&, const CommentNode&) = default;
};

// Immutable comment tree. Nodes are stored in chronological order, so a
// node's position doubles as its rank in the replay stream and the root is
// always position 0.
class DiscussionTree {
public:
    static constexpr std::size_t kNoParent = static_cast<std::size_t>(-1);

    // Validates and indexes `nodes`. Throws ValidationError naming `tree_id`.
    static DiscussionTree build(std::string tree_id, std::vector<CommentNode> nodes) {
        DiscussionTree t;
        t.tree_id_ = std::move(tree_id);
        if (nodes.empty()) throw ValidationError(t.tree_id_, "tree has no nodes");

        std::stable_sort(nodes.begin(), nodes.end(),
                         [](const CommentNode& a, const CommentNode& b) { return a.order < b.order; });
        for (std::size_t i = 1; i < nodes.size(); ++i) {
            if (nodes[i].order == nodes[i - 1].order)
                throw ValidationError(t.tree_id_, "duplicate order " + std::to_string(nodes[i].order));
        }

        const std::size_t n = nodes.size();
        t.index_.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (!t.index_.emplace(nodes[i].id, i).second)
                throw ValidationError(t.tree_id_, "duplicate node id '" + nodes[i].id + "'");
        }

        t.parent_.assign(n, kNoParent);
        t.children_.assign(n, {});
        std::size_t roots = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& node = nodes[i];
            if (!node.parent_id) {
                ++roots;
                if (i != 0)
                    throw ValidationError(t.tree_id_, "root '" + node.id + "' is not the earliest node");
                continue;
            }
            auto it = t.index_.find(*node.parent_id);
            if (it == t.index_.end())
                throw ValidationError(t.tree_id_, "node '" + node.id + "' has dangling parent '" +
                                                      *node.parent_id + "'");
            // Parents strictly precede children, which also rules out cycles.
            if (it->second >= i)
                throw ValidationError(t.tree_id_, "node '" + node.id + "' does not follow its parent '" +
                                                      *node.parent_id + "' (cycle or order violation)");
            t.parent_[i] = it->second;
            t.children_[it->second].push_back(i);
        }
        if (roots != 1)
            throw ValidationError(t.tree_id_, "expected exactly one root, found " + std::to_string(roots));

        t.nodes_ = std::move(nodes);
        t.index_structure();
        return t;
    }

    const std::string& tree_id() const noexcept { return tree_id_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t comment_count() const noexcept { return nodes_.size() - 1; }
    const std::vector<CommentNode>& nodes() const noexcept { return nodes_; }
    const CommentNode& node(std::size_t pos) const { return nodes_.at(pos); }
    std::size_t parent(std::size_t pos) const { return parent_.at(pos); }
    const std::vector<std::size_t>& children(std::size_t pos) const { return children_.at(pos); }
    std::size_t depth(std::size_t pos) const { return depth_.at(pos); }
    const std::vector<std::size_t>& leaves() const noexcept { return leaves_; }

    std::optional<std::size_t> find(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    // True iff `pos` lies strictly below `ancestor`.
    bool is_strict_descendant(std::size_t pos, std::size_t ancestor) const {
        return enter_[ancestor] < enter_[pos] && exit_[pos] <= exit_[ancestor];
    }

    friend bool operator==(const DiscussionTree& a, const DiscussionTree& b) {
        return a.tree_id_ == b.tree_id_ && a.nodes_ == b.nodes_;
    }

private:
    void index_structure() {
        const std::size_t n = nodes_.size();
        depth_.assign(n, 0);
        enter_.assign(n, 0);
        exit_.assign(n, 0);
        for (std::size_t i = 1; i < n; ++i) depth_[i] = depth_[parent_[i]] + 1;
        // Iterative DFS assigning an Euler interval to every node.
        std::size_t clock = 0;
        std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
        enter_[0] = clock++;
        while (!stack.empty()) {
            auto& [pos, next_child] = stack.back();
            if (next_child < children_[pos].size()) {
                const std::size_t c = children_[pos][next_child++];
                enter_[c] = clock++;
                stack.emplace_back(c, 0);
            } else {
                exit_[pos] = clock;
                stack.pop_back();
            }
        }
        leaves_.clear();
        for (std::size_t i = 0; i < n; ++i)
            if (children_[i].empty()) leaves_.push_back(i);
    }

    std::string tree_id_;
    std::vector<CommentNode> nodes_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::size_t> parent_;
    std::vector<std::vector<std::size_t>> children_;
    std::vector<std::size_t> depth_;
    std::vector<std::size_t> enter_;
    std::vector<std::size_t> exit_;
    std::vector<std::size_t> leaves_;
};

// ---------------------------------------------------------------------------
// JSON Lines dump
// ---------------------------------------------------------------------------

struct RecordError {
    enum class Kind { malformed, invalid_tree };
    Kind kind;
    std::size_t line;
    std::string tree_id;  // empty when the record could not be decoded far enough
    std::string message;
};

struct ParseResult {
    std::vector<DiscussionTree> trees;
    std::vector<RecordError> errors;
};

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) throw ParseError(line, std::string("missing string field '") + key + "'");
    return it->get<std::string>();
}

inline std::int64_t require_integer(const nlohmann::json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number_integer())
        throw ParseError(line, std::string("missing integer field '") + key + "'");
    return it->get<std::int64_t>();
}

}  // namespace detail

// Decodes one record. Chronology comes from "order" when every node has it,
// else from a numeric "timestamp" on every node, else from record order.
inline DiscussionTree parse_tree_record(const std::string& text, std::size_t line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(line, e.what());
    }
    if (!j.is_object()) throw ParseError(line, "record is not a JSON object");
    std::string tree_id = detail::require_string(j, "tree_id", line);
    auto nodes_it = j.find("nodes");
    if (nodes_it == j.end() || !nodes_it->is_array()) throw ParseError(line, "missing array field 'nodes'");

    const auto& arr = *nodes_it;
    bool all_order = true;
    bool all_timestamp = true;
    for (const auto& n : arr) {
        if (!n.is_object()) throw ParseError(line, "node is not a JSON object");
        all_order = all_order && n.contains("order");
        all_timestamp = all_timestamp && n.contains("timestamp") && n["timestamp"].is_number();
    }

    std::vector<CommentNode> nodes;
    nodes.reserve(arr.size());
    std::vector<double> stamps;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& n = arr[i];
        CommentNode c;
        c.id = detail::require_string(n, "id", line);
        auto p = n.find("parent");
        if (p == n.end() || p->is_null()) {
            c.parent_id = std::nullopt;
        } else if (p->is_string()) {
            c.parent_id = p->get<std::string>();
        } else {
            throw ParseError(line, "field 'parent' must be a string or null");
        }
        c.text = detail::require_string(n, "text", line);
        c.karma = detail::require_integer(n, "karma", line);
        if (all_order) {
            c.order = detail::require_integer(n, "order", line);
        } else {
            c.order = static_cast<std::int64_t>(i);
            if (all_timestamp) stamps.push_back(n["timestamp"].get<double>());
        }
        nodes.push_back(std::move(c));
    }
    if (!all_order && all_timestamp && !nodes.empty()) {
        std::vector<std::size_t> rank(nodes.size());
        std::iota(rank.begin(), rank.end(), 0);
        std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return stamps[a] < stamps[b]; });
        for (std::size_t r = 0; r < rank.size(); ++r) nodes[rank[r]].order = static_cast<std::int64_t>(r);
    }
    return DiscussionTree::build(std::move(tree_id), std::move(nodes));
}

// Reads every non-empty line as a tree record. Bad records are collected in
// `errors`; with `strict` the first one is rethrown instead.
inline ParseResult parse_tree_dump(std::istream& in, bool strict = false) {
    ParseResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            result.trees.push_back(parse_tree_record(line, line_no));
        } catch (const ParseError& e) {
            if (strict) throw;
            result.errors.push_back({RecordError::Kind::malformed, line_no, {}, e.what()});
        } catch (const ValidationError& e) {
            if (strict) throw;
            result.errors.push_back({RecordError::Kind::invalid_tree, line_no, e.tree_id(), e.what()});
        }
    }
    return result;
}

inline std::string serialize_tree(const DiscussionTree& tree) {
    nlohmann::ordered_json j;
    j["tree_id"] = tree.tree_id();
    auto nodes = nlohmann::ordered_json::array();
    for (const auto& n : tree.nodes()) {
        nlohmann::ordered_json o;
        o["id"] = n.id;
        o["parent"] = n.parent_id ? nlohmann::ordered_json(*n.parent_id) : nlohmann::ordered_json(nullptr);
        o["text"] = n.text;
        o["karma"] = n.karma;
        o["order"] = n.order;
        nodes.push_back(std::move(o));
    }
    j["nodes"] = std::move(nodes);
    return j.dump();
}

inline void write_tree_dump(std::ostream& out, const std::vector<DiscussionTree>& trees) {
    for (const auto& t : trees) out << serialize_tree(t) << '\n';
}

// ---------------------------------------------------------------------------
// Corpus operations
// ---------------------------------------------------------------------------

// Keeps trees with at least `min_comments` comments (root not counted).
inline std::vector<DiscussionTree> filter_trees(const std::vector<DiscussionTree>& trees, std::size_t min_comments) {
    std::vector<DiscussionTree> out;
    for (const auto& t : trees)
        if (t.comment_count() >= min_comments) out.push_back(t);
    return out;
}

struct CorpusSplit {
    std::vector<DiscussionTree> train;
    std::vector<DiscussionTree> test;
    std::uint64_t seed = 0;
};

inline CorpusSplit split_corpus(const std::vector<DiscussionTree>& trees, double ratio, std::uint64_t seed) {
    if (trees.size() < 2) throw ConfigError("split_corpus needs at least 2 trees, got " + std::to_string(trees.size()));
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
    std::vector<std::size_t> idx(trees.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(trees.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, trees.size() - 1);
    CorpusSplit split;
    split.seed = seed;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? split.train : split.test).push_back(trees[idx[i]]);
    return split;
}

struct CorpusStats {
    std::size_t tree_count = 0;
    std::size_t total_comments = 0;
    double karma_mean = 0.0;  // over comments, roots excluded
    double karma_std = 0.0;
    std::map<std::size_t, std::size_t> depth_histogram;  // comment depth -> count
};

inline CorpusStats corpus_stats(const std::vector<DiscussionTree>& trees) {
    if (trees.empty()) throw ConfigError("corpus_stats on an empty corpus");
    CorpusStats s;
    s.tree_count = trees.size();
    double sum = 0.0;
    double sum_sq = 0.0;
    for (const auto& t : trees) {
        s.total_comments += t.comment_count();
        for (std::size_t i = 1; i < t.size(); ++i) {
            const auto k = static_cast<double>(t.node(i).karma);
            sum += k;
            sum_sq += k * k;
            ++s.depth_histogram[t.depth(i)];
        }
    }
    if (s.total_comments > 0) {
        const auto n = static_cast<double>(s.total_comments);
        s.karma_mean = sum / n;
        s.karma_std = std::sqrt(std::max(0.0, sum_sq / n - s.karma_mean * s.karma_mean));
    }
    return s;
}

inline nlohmann::ordered_json to_json(const CorpusStats& s) {
    nlohmann::ordered_json j;
    j["trees"] = s.tree_count;
    j["comments"] = s.total_comments;
    j["karma_mean"] = s.karma_mean;
    j["karma_std"] = s.karma_std;
    nlohmann::ordered_json hist = nlohmann::ordered_json::object();
    for (const auto& [d, c] : s.depth_histogram) hist[std::to_string(d)] = c;
    j["depth_histogram"] = std::move(hist);
    return j;
}

}  // namespace threadrl
