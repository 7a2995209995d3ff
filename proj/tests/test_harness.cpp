#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"
#include "threadrl/harness.hpp"
#include "threadrl/synth.hpp"

using namespace threadrl;
using threadrl::test::make_star;

namespace {

std::vector<DiscussionTree> corpus(std::size_t n = 15, double bias = 0.4, std::uint64_t seed = 3) {
    SynthSpec spec;
    spec.node_count = 25;
    spec.branching_bias = bias;
    spec.token_vocab = {"hot", "cold", "warm"};
    spec.karma_rule = KeywordRule{{{"hot", 3}, {"warm", 1}}, 0};
    spec.seed = seed;
    return generate_synthetic_corpus(spec, n);
}

EvalConfig small_eval() {
    EvalConfig c;
    c.N = 5;
    c.K = 2;
    c.episodes = 40;
    c.runs = 3;
    c.seed = 12;
    return c;
}

QModel model_for(Arch a, const Vocabulary& v, std::uint64_t seed = 1) {
    auto m = init_model(a, ModelDims{v.size(), 1, 5, 4, 3}, seed, 0.5);
    m.set_vocab_fingerprint(v.fingerprint());
    return m;
}

}  // namespace

TEST(Evaluate, ReproducibleAndSerializedIdentically) {
    const auto trees = corpus();
    const auto vocab = build_vocab(trees);
    const auto m = model_for(Arch::drrn, vocab);
    auto cfg = small_eval();
    cfg.epsilon = 0.0;
    const auto a = evaluate(m, vocab, trees, cfg);
    const auto b = evaluate(m, vocab, trees, cfg);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(a.per_run.size(), 3u);
    EXPECT_EQ(a.arch, "drrn");
    const auto j = to_json(a);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(keys, (std::vector<std::string>{"arch", "N", "K", "episodes", "runs", "mean", "std", "per_run"}));
}

TEST(Evaluate, FullExplorationEqualsRandomBaseline) {
    const auto trees = corpus();
    const auto vocab = build_vocab(trees);
    auto cfg = small_eval();
    cfg.epsilon = 1.0;
    for (auto a : kAllArchs) {
        const auto r = evaluate(model_for(a, vocab), vocab, trees, cfg);
        const auto b = baseline_report(trees, cfg).random;
        EXPECT_EQ(r.per_run, b.per_run) << arch_name(a);
    }
}

TEST(Evaluate, FingerprintAndDimensionChecks) {
    const auto trees = corpus();
    const auto vocab = build_vocab(trees);
    auto m = model_for(Arch::linear, vocab);
    m.set_vocab_fingerprint("0000000000000000");
    EXPECT_THROW(evaluate(m, vocab, trees, small_eval()), ConfigError);
    auto wide = init_model(Arch::linear, ModelDims{vocab.size() + 1, 1, 5, 4, 3}, 1);
    wide.set_vocab_fingerprint(vocab.fingerprint());
    EXPECT_THROW(evaluate(wide, vocab, trees, small_eval()), ConfigError);
    EXPECT_THROW(evaluate(model_for(Arch::linear, vocab), vocab, {}, small_eval()), ConfigError);
}

TEST(Baseline, AllZeroKarma) {
    SynthSpec spec;
    spec.node_count = 20;
    spec.token_vocab = {"x", "y"};
    spec.seed = 4;
    const auto trees = generate_synthetic_corpus(spec, 6);
    const auto b = baseline_report(trees, small_eval());
    EXPECT_EQ(b.random.mean, 0.0);
    EXPECT_EQ(b.greedy_mean, 0.0);
    ASSERT_TRUE(b.exact_mean);
    EXPECT_EQ(*b.exact_mean, 0.0);
}

TEST(Baseline, StarTreeAnalyticExpectation) {
    // One window of N = 5 replies; K = 2 uniform picks give E = 2 * mean karma.
    const std::vector<DiscussionTree> trees{make_star({1, 2, 3, 4, 10})};
    auto cfg = small_eval();
    cfg.episodes = 20000;
    cfg.runs = 1;
    const auto b = baseline_report(trees, cfg);
    const double expected = 2.0 * 20.0 / 5.0;
    EXPECT_NEAR(b.random.mean, expected, 4 * standard_error(b.random));
    EXPECT_EQ(b.greedy_mean, 14.0);
    EXPECT_EQ(*b.exact_mean, 14.0);
}

TEST(Baseline, CsvLayout) {
    const auto trees = corpus(5);
    const auto b = baseline_report(trees, small_eval());
    std::ostringstream os;
    write_baseline_csv(os, b, trees.size());
    std::istringstream in(os.str());
    std::string line;
    std::vector<std::string> heads;
    while (std::getline(in, line)) heads.push_back(line.substr(0, line.find(',')));
    EXPECT_EQ(heads, (std::vector<std::string>{"line", "random", "oracle_greedy", "oracle_exact"}));

    BaselineReport none = b;
    none.exact_mean.reset();
    std::ostringstream os2;
    write_baseline_csv(os2, none, trees.size());
    EXPECT_NE(os2.str().find("oracle_exact,NA,NA,0\n"), std::string::npos);
}

TEST(Baseline, OraclesBoundRandom) {
    const auto trees = corpus(30, 0.0, 9);
    auto cfg = small_eval();
    cfg.episodes = 300;
    const auto b = baseline_report(trees, cfg);
    EXPECT_GE(b.greedy_mean + 1e-9, b.random.mean - 4 * standard_error(b.random));
    if (b.exact_mean) EXPECT_GE(*b.exact_mean, 0.0);
}

TEST(Generalize, SingleKMatchesEvaluate) {
    const auto trees = corpus();
    const auto vocab = build_vocab(trees);
    for (auto a : {Arch::drrn_sum, Arch::drrn_bilstm}) {
        const auto m = model_for(a, vocab);
        const auto cfg = small_eval();
        const auto g = generalization_eval(m, vocab, trees, cfg, {cfg.K});
        ASSERT_EQ(g.size(), 1u);
        EXPECT_EQ(to_json(g[0]).dump(), to_json(evaluate(m, vocab, trees, cfg)).dump());

        const auto all = generalization_eval(m, vocab, trees, cfg, {1, 3, 5});
        ASSERT_EQ(all.size(), 3u);
        EXPECT_EQ(all[2].K, 5u);
    }
}

TEST(Generalize, WholeWindowPickIsPolicyIndependent) {
    // K = N leaves no choice, so every model scores the same.
    const auto trees = corpus();
    const auto vocab = build_vocab(trees);
    auto cfg = small_eval();
    cfg.epsilon = 0.0;
    const auto a = generalization_eval(model_for(Arch::drrn_sum, vocab, 1), vocab, trees, cfg, {5});
    const auto b = generalization_eval(model_for(Arch::drrn_bilstm, vocab, 2), vocab, trees, cfg, {5});
    EXPECT_EQ(a[0].per_run, b[0].per_run);
}

TEST(Generalize, FixedKArchitecturesRejected) {
    const auto trees = corpus();
    const auto vocab = build_vocab(trees);
    for (auto a : {Arch::linear, Arch::pa_dqn, Arch::drrn})
        EXPECT_THROW(generalization_eval(model_for(a, vocab), vocab, trees, small_eval(), {2}), ConfigError);
    EXPECT_THROW(generalization_eval(model_for(Arch::drrn_sum, vocab), vocab, trees, small_eval(), {6}), ConfigError);
}
