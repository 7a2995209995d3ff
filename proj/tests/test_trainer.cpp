#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"
#include "threadrl/gradcheck.hpp"
#include "threadrl/synth.hpp"
#include "threadrl/trainer.hpp"

using namespace threadrl;
using threadrl::test::make_star;

namespace {

std::vector<DiscussionTree> small_corpus(std::size_t trees = 20, std::uint64_t seed = 5) {
    SynthSpec spec;
    spec.node_count = 30;
    spec.branching_bias = 0.5;
    spec.token_vocab = {"hot", "cold", "warm", "cool", "tepid"};
    spec.karma_rule = KeywordRule{{{"hot", 4}, {"warm", 1}}, 0};
    spec.seed = seed;
    return generate_synthetic_corpus(spec, trees);
}

TrainConfig small_config() {
    TrainConfig c;
    c.N = 5;
    c.K = 2;
    c.m_prime = 4;
    c.eta = 1e-3;
    c.batch_size = 16;
    c.episodes_per_replay = 10;
    c.epochs_per_replay = 2;
    c.replay_cycles = 2;
    c.replay_capacity = 500;
    c.hidden_layers = 1;
    c.hidden_width = 6;
    c.embed_dim = 4;
    c.lstm_hidden = 3;
    c.seed = 77;
    return c;
}

Transition random_transition(std::size_t n, std::size_t k, Rng& rng, std::size_t dim = 10) {
    Transition t;
    t.state = random_bow(dim, 8, rng);
    for (std::size_t i = 0; i < k; ++i) t.picked.push_back(random_bow(dim, 5, rng));
    t.reward = static_cast<std::int64_t>(rng.below(10));
    t.next_state = t.state;
    for (const auto& b : t.picked) t.next_state += b;
    for (std::size_t i = 0; i < n; ++i) t.next_window.push_back(random_bow(dim, 5, rng));
    return t;
}

QModel random_model(Arch arch, std::uint64_t seed, std::size_t dim = 10) {
    QModel m(arch, ModelDims{dim, 1, 5, 4, 3});
    Rng rng(seed);
    for (auto& t : m.params())
        for (auto& v : t.data) v = rng.uniform(-0.5, 0.5);
    return m;
}

std::string bytes(const QModel& m) {
    std::ostringstream os;
    save_checkpoint(m, "", os);
    return os.str();
}

}  // namespace

TEST(ReplayBuffer, FifoEviction) {
    ReplayBuffer buf(3);
    for (int i = 0; i < 5; ++i) {
        Transition t;
        t.reward = i;
        buf.push(t);
    }
    ASSERT_EQ(buf.size(), 3u);
    EXPECT_EQ(buf[0].reward, 2);
    EXPECT_EQ(buf[1].reward, 3);
    EXPECT_EQ(buf[2].reward, 4);
    EXPECT_THROW(ReplayBuffer(0), ConfigError);
}

TEST(TdTarget, TerminalAndMyopic) {
    Rng rng(1);
    const auto m = random_model(Arch::drrn, 2);
    auto t = random_transition(5, 2, rng);
    EXPECT_EQ(compute_td_target(m, t, 0.0, 3, rng), static_cast<double>(t.reward));
    t.next_window.clear();
    EXPECT_TRUE(t.terminal());
    EXPECT_EQ(compute_td_target(m, t, 0.9, 3, rng), static_cast<double>(t.reward));
}

TEST(TdTarget, FullSampleEqualsExhaustiveMax) {
    Rng rng(2);
    for (auto a : kAllArchs) {
        const auto m = random_model(a, 3);
        for (int trial = 0; trial < 10; ++trial) {
            const auto t = random_transition(5, 2, rng);
            ActionScorer scorer(m, t.next_state, t.next_window);
            const double best = best_exhaustive(scorer, 2).q;
            const double expected = static_cast<double>(t.reward) + 0.9 * best;
            // m' >= C(5, 2) draws without replacement cover every action.
            EXPECT_NEAR(compute_td_target(m, t, 0.9, 10, rng), expected, 1e-12) << arch_name(a);
            EXPECT_LE(compute_td_target(m, t, 0.9, 3, rng), expected + 1e-12) << arch_name(a);
        }
    }
}

TEST(RunEpisode, FullExplorationMatchesRandomRollout) {
    const auto trees = small_corpus(10);
    const auto vocab = build_vocab(trees, 50);
    auto cfg = small_config();
    cfg.epsilon = 1.0;
    const auto m = random_model(Arch::drrn_sum, 4, vocab.size());
    for (std::size_t i = 0; i < trees.size(); ++i) {
        TreeFeatures f(trees[i], vocab);
        Rng r1(100 + i), r2(100 + i);
        const auto played = run_episode(f, m, cfg, r1, nullptr);
        EXPECT_EQ(played.episode_return, random_rollout(trees[i], cfg.N, cfg.K, r2));
        EXPECT_EQ(r1.next_u64(), r2.next_u64());
    }
}

TEST(RunEpisode, RecordsTransitionsInOrder) {
    const auto trees = small_corpus(3);
    const auto vocab = build_vocab(trees, 50);
    const auto cfg = small_config();
    const auto m = random_model(Arch::linear, 5, vocab.size());
    TreeFeatures f(trees[0], vocab);
    ReplayBuffer buf(100);
    Rng rng(6);
    const auto r = run_episode(f, m, cfg, rng, &buf);
    ASSERT_EQ(buf.size(), r.transitions);
    ASSERT_GT(r.transitions, 0u);
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < buf.size(); ++i) {
        sum += buf[i].reward;
        EXPECT_EQ(buf[i].picked.size(), cfg.K);
        if (i + 1 < buf.size()) {
            EXPECT_EQ(buf[i].next_state, buf[i + 1].state);
            EXPECT_EQ(buf[i].next_window.size(), cfg.N);
        }
    }
    EXPECT_TRUE(buf[buf.size() - 1].terminal());
    EXPECT_EQ(sum, r.episode_return);
    EXPECT_EQ(buf[0].state, f.node_bow(0));
}

TEST(RunEpisode, ShortTreeHasNoTransitions) {
    const auto t = make_star({1, 2, 3});
    const auto vocab = build_vocab({t}, 10);
    const auto cfg = small_config();
    const auto m = random_model(Arch::linear, 5, vocab.size());
    ReplayBuffer buf(10);
    Rng rng(7);
    const auto r = run_episode(TreeFeatures(t, vocab), m, cfg, rng, &buf);
    EXPECT_EQ(r.transitions, 0u);
    EXPECT_EQ(r.episode_return, 0);
    EXPECT_TRUE(buf.empty());
}

TEST(ReplayCycle, ZeroLearningRateLeavesParameters) {
    const auto trees = small_corpus();
    const auto vocab = build_vocab(trees, 50);
    std::vector<TreeFeatures> f;
    for (const auto& t : trees) f.emplace_back(t, vocab);
    auto cfg = small_config();
    cfg.eta = 0.0;
    auto m = random_model(Arch::drrn_bilstm, 8, vocab.size());
    const auto before = bytes(m);
    ReplayBuffer buf(cfg.replay_capacity);
    Rng rng(9);
    const auto rep = replay_cycle(f, m, buf, cfg, rng);
    EXPECT_EQ(bytes(m), before);
    EXPECT_EQ(rep.episodes, cfg.episodes_per_replay);
    EXPECT_EQ(buf.size(), rep.transitions_added);
    const std::size_t per_epoch = (buf.size() + cfg.batch_size - 1) / cfg.batch_size;
    EXPECT_EQ(rep.updates, per_epoch * cfg.epochs_per_replay);
}

TEST(ReplayCycle, SmallBufferStillTrains) {
    const auto trees = small_corpus();
    const auto vocab = build_vocab(trees, 50);
    std::vector<TreeFeatures> f;
    for (const auto& t : trees) f.emplace_back(t, vocab);
    auto cfg = small_config();
    cfg.replay_capacity = 4;
    auto m = random_model(Arch::drrn, 10, vocab.size());
    const auto before = bytes(m);
    ReplayBuffer buf(cfg.replay_capacity);
    Rng rng(11);
    replay_cycle(f, m, buf, cfg, rng);
    EXPECT_EQ(buf.size(), 4u);
    EXPECT_NE(bytes(m), before);
}

TEST(ReplayCycle, EmptyBufferIsConfigError) {
    const std::vector<DiscussionTree> trees{make_star({1, 2})};
    const auto vocab = build_vocab(trees, 10);
    std::vector<TreeFeatures> f{TreeFeatures(trees[0], vocab)};
    auto m = random_model(Arch::linear, 1, vocab.size());
    ReplayBuffer buf(10);
    Rng rng(1);
    EXPECT_THROW(replay_cycle(f, m, buf, small_config(), rng), ConfigError);
}

TEST(Train, SameSeedBitIdentical) {
    const auto trees = small_corpus();
    for (auto a : kAllArchs) {
        const auto r1 = train(trees, a, small_config());
        const auto r2 = train(trees, a, small_config());
        EXPECT_EQ(bytes(r1.model), bytes(r2.model)) << arch_name(a);
        ASSERT_EQ(r1.curve.size(), 2u);
        for (std::size_t i = 0; i < r1.curve.size(); ++i) {
            EXPECT_EQ(r1.curve[i].cycle, i + 1);
            EXPECT_EQ(r1.curve[i].mean_return, r2.curve[i].mean_return);
        }
        EXPECT_EQ(r1.model.training_k(), 2u);
        EXPECT_EQ(r1.model.vocab_fingerprint(), r1.vocab.fingerprint());
    }
    auto other = small_config();
    other.seed = 78;
    EXPECT_NE(bytes(train(trees, Arch::drrn, other).model), bytes(train(trees, Arch::drrn, small_config()).model));
}

TEST(Train, ZeroCyclesReturnsInitialModel) {
    const auto trees = small_corpus();
    auto cfg = small_config();
    cfg.replay_cycles = 0;
    const auto r = train(trees, Arch::pa_dqn, cfg);
    EXPECT_TRUE(r.curve.empty());
    auto fresh = init_model(Arch::pa_dqn, cfg.dims(r.vocab.size()), derive_seed(cfg.seed, 0));
    fresh.set_training_k(cfg.K);
    EXPECT_EQ(bytes(r.model), bytes(fresh));
}

TEST(Train, CallbackSeesEveryCycle) {
    const auto trees = small_corpus();
    auto cfg = small_config();
    cfg.replay_cycles = 3;
    std::size_t calls = 0;
    const auto r = train(trees, Arch::linear, cfg, [&](const CycleReport& rep, const QModel&) {
        ++calls;
        EXPECT_EQ(rep.episodes, cfg.episodes_per_replay);
    });
    EXPECT_EQ(calls, 3u);
    std::ostringstream csv;
    write_curve_csv(csv, r.curve);
    std::string line;
    std::istringstream in(csv.str());
    std::getline(in, line);
    EXPECT_EQ(line, "cycle,mean_return,std_return");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 3);
}

TEST(TrainConfigJson, RoundTripAndRejections) {
    auto c = small_config();
    c.action_eval_mode = SelectMode::sampled;
    const auto back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
    EXPECT_EQ(to_json(train_config_from_json(nlohmann::json::object())).dump(), to_json(TrainConfig{}).dump());

    EXPECT_THROW(train_config_from_json(nlohmann::json{{"learning_rate", 0.1}}), ConfigError);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"gamma", 1.0}}), ConfigError);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"K", 11}}), ConfigError);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"N", "ten"}}), ConfigError);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"action_eval_mode", "best"}}), ConfigError);
    EXPECT_THROW(train_config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(MeanStd, SampleStandardDeviation) {
    const auto [m, s] = mean_std({2, 4, 4, 4, 5, 5, 7, 9});
    EXPECT_DOUBLE_EQ(m, 5.0);
    EXPECT_DOUBLE_EQ(s, std::sqrt(32.0 / 7.0));
    EXPECT_EQ(mean_std({3}).second, 0.0);
}
