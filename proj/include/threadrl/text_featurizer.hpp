#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "threadrl/episode_env.hpp"
#include "threadrl/error.hpp"
#include "threadrl/tree_corpus.hpp"

namespace threadrl {

// Lowercases ASCII letters, deletes ASCII punctuation in place (no space is
// inserted, so "don't" becomes "dont") and splits on whitespace runs. Bytes
// outside ASCII pass through unchanged.
inline std::vector<std::string> normalize_text(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char ch : text) {
        if (ch < 0x80 && std::isspace(ch)) {
            if (!cur.empty()) tokens.push_back(std::move(cur));
            cur.clear();
        } else if (ch < 0x80 && std::ispunct(ch)) {
            continue;
        } else {
            cur.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : static_cast<char>(ch));
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

struct BowEntry {
    std::uint32_t index = 0;
    std::uint32_t count = 0;

    friend bool operator==(const BowEntry&, const BowEntry&) = default;
};

// Sparse bag-of-words: strictly increasing indices, counts >= 1.
struct BowVector {
    std::size_t dimension = 0;
    std::vector<BowEntry> entries;

    std::size_t total() const {
        std::size_t s = 0;
        for (const auto& e : entries) s += e.count;
        return s;
    }

    BowVector& operator+=(const BowVector& other) {
        if (other.dimension != dimension) throw ConfigError("adding bag-of-words vectors of different dimension");
        std::vector<BowEntry> merged;
        merged.reserve(entries.size() + other.entries.size());
        auto a = entries.begin();
        auto b = other.entries.begin();
        while (a != entries.end() || b != other.entries.end()) {
            if (b == other.entries.end() || (a != entries.end() && a->index < b->index)) {
                merged.push_back(*a++);
            } else if (a == entries.end() || b->index < a->index) {
                merged.push_back(*b++);
            } else {
                merged.push_back({a->index, a->count + b->count});
                ++a;
                ++b;
            }
        }
        entries = std::move(merged);
        return *this;
    }

    friend BowVector operator+(BowVector a, const BowVector& b) { return a += b; }
    friend bool operator==(const BowVector&, const BowVector&) = default;
};

// 64-bit FNV-1a over tree ids and node texts, hex encoded.
inline std::string corpus_fingerprint(const std::vector<DiscussionTree>& trees) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff;
        h *= 0x100000001b3ULL;
    };
    for (const auto& t : trees) {
        mix(t.tree_id());
        for (const auto& n : t.nodes()) mix(n.text);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::vector<std::string> tokens, std::string fingerprint)
        : tokens_(std::move(tokens)), fingerprint_(std::move(fingerprint)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i)
            if (!index_.emplace(tokens_[i], static_cast<std::uint32_t>(i)).second)
                throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    const std::string& fingerprint() const noexcept { return fingerprint_; }

    std::optional<std::uint32_t> lookup(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::uint32_t> index_;
    std::string fingerprint_;
};

// Top-`max_size` tokens by frequency over every node text, ties broken
// lexicographically. Pass only the training split.
inline Vocabulary build_vocab(const std::vector<DiscussionTree>& train_trees, std::size_t max_size = 5000) {
    if (max_size < 1) throw ConfigError("vocabulary size must be >= 1");
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& t : train_trees)
        for (const auto& n : t.nodes())
            for (auto& tok : normalize_text(n.text)) ++freq[tok];
    if (freq.empty()) throw ConfigError("cannot build a vocabulary from a corpus with no tokens");
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (ranked.size() > max_size) ranked.resize(max_size);
    std::vector<std::string> tokens;
    tokens.reserve(ranked.size());
    for (auto& [tok, c] : ranked) tokens.push_back(tok);
    return Vocabulary(std::move(tokens), corpus_fingerprint(train_trees));
}

struct BowResult {
    BowVector vector;
    std::size_t oov = 0;
};

inline BowResult bow_with_oov(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
    std::map<std::uint32_t, std::uint32_t> counts;
    BowResult r;
    r.vector.dimension = vocab.size();
    for (const auto& t : tokens) {
        if (auto idx = vocab.lookup(t))
            ++counts[*idx];
        else
            ++r.oov;
    }
    r.vector.entries.reserve(counts.size());
    for (auto [i, c] : counts) r.vector.entries.push_back({i, c});
    return r;
}

inline BowVector bow(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
    return bow_with_oov(tokens, vocab).vector;
}

inline BowVector text_bow(const std::string& text, const Vocabulary& vocab) { return bow(normalize_text(text), vocab); }

inline BowVector empty_bow(const Vocabulary& vocab) { return BowVector{vocab.size(), {}}; }

// Bag of the concatenated sub-action texts; equal to the sum of their bags.
inline BowVector action_bow_joint(const std::vector<std::string>& sub_texts, const Vocabulary& vocab) {
    BowVector out = empty_bow(vocab);
    for (const auto& t : sub_texts) out += text_bow(t, vocab);
    return out;
}

inline BowVector action_bow_joint(const std::vector<BowVector>& sub_bows, std::size_t dimension) {
    BowVector out{dimension, {}};
    for (const auto& b : sub_bows) out += b;
    return out;
}

// Bag over every node in the state's history: the root post plus every
// comment tracked so far.
inline BowVector state_bow(const EpisodeState& state, const Vocabulary& vocab) {
    BowVector out = empty_bow(vocab);
    for (std::size_t pos : state.history) out += text_bow(state.tree->node(pos).text, vocab);
    return out;
}

// Per-node bags for one tree, computed once so episodes do not re-tokenize.
class TreeFeatures {
public:
    TreeFeatures(const DiscussionTree& tree, const Vocabulary& vocab) : tree_(&tree) {
        node_bows_.reserve(tree.size());
        for (const auto& n : tree.nodes()) node_bows_.push_back(text_bow(n.text, vocab));
    }

    const DiscussionTree& tree() const noexcept { return *tree_; }
    const BowVector& node_bow(std::size_t pos) const { return node_bows_.at(pos); }

    std::vector<BowVector> window_bows(const CandidateWindow& w) const {
        std::vector<BowVector> out;
        out.reserve(w.candidates.size());
        for (std::size_t pos : w.candidates) out.push_back(node_bows_[pos]);
        return out;
    }

private:
    const DiscussionTree* tree_;
    std::vector<BowVector> node_bows_;
};

// ---------------------------------------------------------------------------
// Vocabulary file: header line, then one token per line (line i = index i).
// ---------------------------------------------------------------------------

inline void write_vocab(std::ostream& out, const Vocabulary& vocab) {
    out << "#bow-vocab v1 size=" << vocab.size() << " fingerprint=" << vocab.fingerprint() << '\n';
    for (const auto& t : vocab.tokens()) out << t << '\n';
}

inline Vocabulary read_vocab(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw ConfigError("vocabulary file is empty");
    std::istringstream hs(header);
    std::string magic, version, size_field, fp_field;
    hs >> magic >> version >> size_field >> fp_field;
    if (magic != "#bow-vocab" || version != "v1" || size_field.rfind("size=", 0) != 0 ||
        fp_field.rfind("fingerprint=", 0) != 0)
        throw ConfigError("bad vocabulary header: " + header);
    std::size_t size = 0;
    try {
        size = std::stoull(size_field.substr(5));
    } catch (const std::exception&) {
        throw ConfigError("bad vocabulary size in header: " + header);
    }
    std::vector<std::string> tokens;
    std::string line;
    while (tokens.size() < size && std::getline(in, line)) tokens.push_back(line);
    if (tokens.size() != size)
        throw ConfigError("vocabulary file holds " + std::to_string(tokens.size()) + " tokens, header says " +
                          std::to_string(size));
    return Vocabulary(std::move(tokens), fp_field.substr(12));
}

}  // namespace threadrl
