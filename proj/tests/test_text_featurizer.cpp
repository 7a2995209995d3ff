#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "test_util.hpp"
#include "threadrl/episode_env.hpp"
#include "threadrl/synth.hpp"
#include "threadrl/text_featurizer.hpp"

using namespace threadrl;
using threadrl::test::make_tree;

namespace {

using Tokens = std::vector<std::string>;

// Dense count map; the reference every bag is checked against.
std::map<std::string, std::uint32_t> count_tokens(const Tokens& toks, const Vocabulary& v) {
    std::map<std::string, std::uint32_t> out;
    for (const auto& t : toks)
        if (v.lookup(t)) ++out[t];
    return out;
}

std::map<std::string, std::uint32_t> decode(const BowVector& b, const Vocabulary& v) {
    std::map<std::string, std::uint32_t> out;
    for (const auto& e : b.entries) out[v.tokens()[e.index]] = e.count;
    return out;
}

std::string join(const Tokens& t) {
    std::string s;
    for (const auto& x : t) s += (s.empty() ? "" : " ") + x;
    return s;
}

}  // namespace

TEST(Normalize, ExampleSentence) {
    EXPECT_EQ(normalize_text("Yeah, politics aside, this one looks much cooler"),
              (Tokens{"yeah", "politics", "aside", "this", "one", "looks", "much", "cooler"}));
    EXPECT_TRUE(normalize_text("").empty());
    EXPECT_EQ(normalize_text("A.B.C!!!"), Tokens{"abc"});
    EXPECT_EQ(normalize_text("don't  STOP\tme\n"), (Tokens{"dont", "stop", "me"}));
    EXPECT_EQ(normalize_text(" ... "), Tokens{});
}

TEST(Normalize, Idempotent) {
    Rng rng(4);
    const std::string alphabet = "abcXYZ ,.!?'-\t";
    for (int i = 0; i < 200; ++i) {
        std::string s;
        for (int k = 0; k < 40; ++k) s += alphabet[rng.below(alphabet.size())];
        const auto once = normalize_text(s);
        EXPECT_EQ(normalize_text(join(once)), once) << s;
    }
}

TEST(BuildVocab, CappedByDistinctTokens) {
    auto t = make_tree({{"r", "", 0, "one two"}, {"a", "r", 0, "two three"}});
    auto v = build_vocab({t}, 5000);
    EXPECT_EQ(v.size(), 3u);
    EXPECT_EQ(v.tokens()[0], "two");
}

TEST(BuildVocab, LexicographicTieBreak) {
    auto t1 = make_tree({{"r", "", 0, "b b b b b a a a a a c"}});
    EXPECT_EQ(build_vocab({t1}, 2).tokens(), (Tokens{"a", "b"}));
    auto t2 = make_tree({{"r", "", 0, "c c c c c b b b b b a a a a a"}});
    EXPECT_EQ(build_vocab({t2}, 2).tokens(), (Tokens{"a", "b"}));
    auto empty = make_tree({{"r", "", 0, "..."}});
    EXPECT_THROW(build_vocab({empty}, 10), ConfigError);
}

TEST(BuildVocab, MatchesFrequencySortOnPlantedZipf) {
    // Token w<i> appears round(400 / (i + 1)) times.
    std::string text;
    std::map<std::string, int> planted;
    for (int i = 0; i < 60; ++i) {
        const int c = static_cast<int>(std::lround(400.0 / (i + 1)));
        planted["w" + std::to_string(i)] = c;
        for (int k = 0; k < c; ++k) text += "w" + std::to_string(i) + " ";
    }
    std::vector<std::pair<std::string, int>> ranked(planted.begin(), planted.end());
    std::sort(ranked.begin(), ranked.end(),
              [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
    auto v = build_vocab({make_tree({{"r", "", 0, text}})}, 25);
    ASSERT_EQ(v.size(), 25u);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(v.tokens()[i], ranked[i].first);
}

TEST(BuildVocab, FingerprintTracksTrainingCorpus) {
    auto a = make_tree({{"r", "", 0, "x y"}}, "a");
    auto b = make_tree({{"r", "", 0, "x y"}}, "b");
    EXPECT_EQ(build_vocab({a}).fingerprint(), build_vocab({a}).fingerprint());
    EXPECT_NE(build_vocab({a}).fingerprint(), build_vocab({a, b}).fingerprint());
}

TEST(Bow, CountsAndOov) {
    Vocabulary v({"hot", "cold"}, "fp");
    auto r = bow_with_oov({"hot", "hot", "cold"}, v);
    EXPECT_EQ(r.vector.entries, (std::vector<BowEntry>{{0, 2}, {1, 1}}));
    EXPECT_EQ(r.oov, 0u);
    auto oov = bow_with_oov({"x", "y", "z"}, v);
    EXPECT_TRUE(oov.vector.entries.empty());
    EXPECT_EQ(oov.oov, 3u);
    EXPECT_EQ(oov.vector.dimension, 2u);
}

TEST(Bow, AdditiveOverConcatenation) {
    Vocabulary v({"a", "b", "c", "d"}, "fp");
    Rng rng(6);
    const Tokens pool{"a", "b", "c", "d", "zz"};
    for (int i = 0; i < 100; ++i) {
        Tokens u, w;
        for (std::size_t k = rng.below(8); k > 0; --k) u.push_back(pool[rng.below(pool.size())]);
        for (std::size_t k = rng.below(8); k > 0; --k) w.push_back(pool[rng.below(pool.size())]);
        Tokens uw = u;
        uw.insert(uw.end(), w.begin(), w.end());
        const auto whole = bow(uw, v);
        EXPECT_EQ(whole, bow(u, v) + bow(w, v));
        EXPECT_EQ(decode(whole, v), count_tokens(uw, v));
        std::size_t in_vocab = 0;
        for (const auto& t : uw) in_vocab += v.lookup(t).has_value();
        EXPECT_EQ(whole.total(), in_vocab);
    }
}

TEST(ActionBowJoint, SumOfSubActions) {
    Vocabulary v({"hot", "cold", "news"}, "fp");
    const std::string c = "Hot news, hot!";
    auto single = action_bow_joint(std::vector<std::string>{c}, v);
    auto triple = action_bow_joint(std::vector<std::string>{c, c, c}, v);
    BowVector expected = single + single + single;
    EXPECT_EQ(triple, expected);
    EXPECT_EQ(action_bow_joint(std::vector<std::string>{"hot cold", "news"}, v),
              action_bow_joint(std::vector<std::string>{"news", "hot cold"}, v));
}

TEST(ActionBowJoint, EqualsCountOnConcatenatedString) {
    SynthSpec spec;
    spec.node_count = 40;
    spec.token_vocab = {"alpha", "Beta", "gamma!", "delta,", "eps"};
    spec.seed = 3;
    auto t = generate_synthetic_tree(spec);
    auto v = build_vocab({t}, 3);
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        std::vector<std::string> subs;
        for (int k = 0; k < 3; ++k) subs.push_back(t.node(rng.below(t.size())).text);
        const std::string concatenated = subs[0] + " " + subs[1] + " " + subs[2];
        EXPECT_EQ(decode(action_bow_joint(subs, v), v), count_tokens(normalize_text(concatenated), v));
    }
}

TEST(StateBow, RootThenIncremental) {
    SynthSpec spec;
    spec.node_count = 120;
    spec.branching_bias = 0.3;
    spec.token_vocab = {"a", "b", "c", "d", "e", "f"};
    spec.seed = 10;
    auto t = generate_synthetic_tree(spec);
    auto v = build_vocab({t}, 5);
    Rng rng(2);
    auto [s, w] = reset(t, 5, 2);
    EXPECT_EQ(state_bow(s, v), text_bow(t.node(0).text, v));
    BowVector running = state_bow(s, v);
    while (w) {
        const auto a = random_action(5, 2, rng);
        auto out = step(s, *w, a);
        for (auto slot : a.picks) running += text_bow(t.node(w->candidates[slot]).text, v);
        // Incremental bag equals recomputation from history.
        EXPECT_EQ(state_bow(out.next_state, v), running);
        s = out.next_state;
        w = out.next_window;
    }
}

TEST(VocabFile, RoundTripAndHeader) {
    auto v = build_vocab({make_tree({{"r", "", 0, "x y y z z z"}})});
    std::stringstream ss;
    write_vocab(ss, v);
    const std::string text = ss.str();
    EXPECT_EQ(text.substr(0, text.find('\n')), "#bow-vocab v1 size=3 fingerprint=" + v.fingerprint());
    auto back = read_vocab(ss);
    EXPECT_EQ(back.tokens(), v.tokens());
    EXPECT_EQ(back.fingerprint(), v.fingerprint());

    std::istringstream bad("#bow-vocab v1 size=4 fingerprint=ab\nx\n");
    EXPECT_THROW(read_vocab(bad), ConfigError);
    std::istringstream junk("hello\n");
    EXPECT_THROW(read_vocab(junk), ConfigError);
}
