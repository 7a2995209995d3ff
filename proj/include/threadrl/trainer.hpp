#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "threadrl/episode_env.hpp"
#include "threadrl/error.hpp"
#include "threadrl/q_models.hpp"
#include "threadrl/rng.hpp"
#include "threadrl/text_featurizer.hpp"
#include "threadrl/tree_corpus.hpp"

namespace threadrl {

// (s_t, a_t, r_{t+1}, s_{t+1}) plus the candidate bags offered at s_{t+1},
// which the TD target maximizes over. Empty next_window means terminal.
struct Transition {
    BowVector state;
    std::vector<BowVector> picked;
    std::int64_t reward = 0;
    BowVector next_state;
    std::vector<BowVector> next_window;

    bool terminal() const noexcept { return next_window.empty(); }
};

// FIFO store; pushing into a full buffer drops the oldest transition.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 10000) : capacity_(capacity) {
        if (capacity_ < 1) throw ConfigError("replay capacity must be >= 1");
    }

    void push(Transition t) {
        if (items_.size() == capacity_) items_.pop_front();
        items_.push_back(std::move(t));
    }

    std::size_t size() const noexcept { return items_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    bool empty() const noexcept { return items_.empty(); }
    const Transition& operator[](std::size_t i) const { return items_[i]; }
    void clear() { items_.clear(); }

private:
    std::size_t capacity_;
    std::deque<Transition> items_;
};

struct TrainConfig {
    std::size_t N = 10;
    std::size_t K = 3;
    std::size_t m_prime = 10;
    double gamma = 0.9;
    double epsilon = 0.1;
    double eta = 1e-6;
    std::size_t batch_size = 100;
    std::size_t episodes_per_replay = 500;
    std::size_t epochs_per_replay = 3;
    std::size_t replay_cycles = 15;
    std::uint64_t seed = 0;
    SelectMode action_eval_mode = SelectMode::exhaustive;
    std::size_t replay_capacity = 10000;
    std::size_t vocab_size = 5000;
    std::size_t hidden_layers = 2;
    std::size_t hidden_width = 20;
    std::size_t embed_dim = 20;
    std::size_t lstm_hidden = 20;

    SelectPolicy policy() const { return {epsilon, action_eval_mode, m_prime}; }

    ModelDims dims(std::size_t input_dim) const {
        return {input_dim, hidden_layers, hidden_width, embed_dim, lstm_hidden};
    }
};

inline void validate(const TrainConfig& c) {
    if (!(c.gamma >= 0.0 && c.gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(c.epsilon >= 0.0 && c.epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    if (!(c.eta >= 0.0) || !std::isfinite(c.eta)) throw ConfigError("eta must be finite and >= 0");
    if (c.m_prime < 1 || c.batch_size < 1 || c.episodes_per_replay < 1 || c.epochs_per_replay < 1 ||
        c.replay_capacity < 1 || c.vocab_size < 1)
        throw ConfigError("counts in TrainConfig must be >= 1");
    check_window_config(c.N, c.K);
    validate(c.dims(1));
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    TrainConfig c;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "N") c.N = v.get<std::size_t>();
            else if (key == "K") c.K = v.get<std::size_t>();
            else if (key == "m_prime") c.m_prime = v.get<std::size_t>();
            else if (key == "gamma") c.gamma = v.get<double>();
            else if (key == "epsilon") c.epsilon = v.get<double>();
            else if (key == "eta") c.eta = v.get<double>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "episodes_per_replay") c.episodes_per_replay = v.get<std::size_t>();
            else if (key == "epochs_per_replay") c.epochs_per_replay = v.get<std::size_t>();
            else if (key == "replay_cycles") c.replay_cycles = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "action_eval_mode") c.action_eval_mode = parse_select_mode(v.get<std::string>());
            else if (key == "replay_capacity") c.replay_capacity = v.get<std::size_t>();
            else if (key == "vocab_size") c.vocab_size = v.get<std::size_t>();
            else if (key == "hidden_layers") c.hidden_layers = v.get<std::size_t>();
            else if (key == "hidden_width") c.hidden_width = v.get<std::size_t>();
            else if (key == "embed_dim") c.embed_dim = v.get<std::size_t>();
            else if (key == "lstm_hidden") c.lstm_hidden = v.get<std::size_t>();
            else throw ConfigError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for config key '" + key + "': " + e.what());
        }
    }
    validate(c);
    return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    return {{"N", c.N},
            {"K", c.K},
            {"m_prime", c.m_prime},
            {"gamma", c.gamma},
            {"epsilon", c.epsilon},
            {"eta", c.eta},
            {"batch_size", c.batch_size},
            {"episodes_per_replay", c.episodes_per_replay},
            {"epochs_per_replay", c.epochs_per_replay},
            {"replay_cycles", c.replay_cycles},
            {"seed", c.seed},
            {"action_eval_mode", std::string(select_mode_name(c.action_eval_mode))},
            {"replay_capacity", c.replay_capacity},
            {"vocab_size", c.vocab_size},
            {"hidden_layers", c.hidden_layers},
            {"hidden_width", c.hidden_width},
            {"embed_dim", c.embed_dim},
            {"lstm_hidden", c.lstm_hidden}};
}

// reward for terminal transitions or gamma = 0; otherwise
// reward + gamma * max over m' sampled next actions of Q(s', a').
inline double compute_td_target(const QModel& model, const Transition& t, double gamma, std::size_t m_prime, Rng& rng) {
    const auto reward = static_cast<double>(t.reward);
    if (t.terminal() || gamma == 0.0) return reward;
    const std::size_t k = t.picked.size();
    ActionScorer scorer(model, t.next_state, t.next_window);
    const auto best = best_of(scorer, sample_actions(t.next_window.size(), k, m_prime, rng));
    return reward + gamma * best.q;
}

struct EpisodeResult {
    std::int64_t episode_return = 0;
    std::size_t transitions = 0;
};

// Plays one episode under the epsilon-greedy policy of `config`, appending
// each transition to `buffer` (when given) in order.
inline EpisodeResult run_episode(const TreeFeatures& features, const QModel& model, const TrainConfig& config,
                                 Rng& rng, ReplayBuffer* buffer) {
    const auto policy = config.policy();
    auto [state, window] = reset(features.tree(), config.N, config.K);
    BowVector state_bag = features.node_bow(0);
    EpisodeResult result;
    while (window) {
        auto window_bags = features.window_bows(*window);
        const auto action = select_action(model, state_bag, window_bags, config.K, policy, rng);
        auto out = step(state, *window, action);
        result.episode_return += out.reward;
        ++result.transitions;

        Transition t;
        for (std::size_t slot : action.picks) t.picked.push_back(window_bags[slot]);
        BowVector next_bag = state_bag;
        for (const auto& b : t.picked) next_bag += b;
        if (buffer) {
            t.state = state_bag;
            t.reward = out.reward;
            t.next_state = next_bag;
            if (out.next_window) t.next_window = features.window_bows(*out.next_window);
            buffer->push(std::move(t));
        }
        state_bag = std::move(next_bag);
        state = std::move(out.next_state);
        window = std::move(out.next_window);
    }
    return result;
}

struct CycleReport {
    double mean_return = 0.0;
    double std_return = 0.0;
    std::size_t episodes = 0;
    std::size_t transitions_added = 0;
    std::size_t updates = 0;
    double mean_loss = 0.0;  // per transition, over all updates of the cycle
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (double x : xs) sum += x;
    const double mean = sum / static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

// One experience-replay round: generate episodes into the buffer, then train
// several shuffled minibatch epochs over it. Targets use current parameters.
inline CycleReport replay_cycle(const std::vector<TreeFeatures>& train, QModel& model, ReplayBuffer& buffer,
                                const TrainConfig& config, Rng& rng) {
    if (train.empty()) throw ConfigError("replay_cycle needs a non-empty training corpus");
    CycleReport report;
    std::vector<double> returns;
    returns.reserve(config.episodes_per_replay);
    for (std::size_t e = 0; e < config.episodes_per_replay; ++e) {
        const auto& tree = train[static_cast<std::size_t>(rng.below(train.size()))];
        const auto r = run_episode(tree, model, config, rng, &buffer);
        returns.push_back(static_cast<double>(r.episode_return));
        report.transitions_added += r.transitions;
    }
    report.episodes = returns.size();
    std::tie(report.mean_return, report.std_return) = mean_std(returns);
    if (buffer.empty()) throw ConfigError("replay buffer is empty after episode generation (trees shorter than N?)");

    double loss = 0.0;
    std::size_t seen = 0;
    std::vector<std::size_t> order(buffer.size());
    std::vector<TdItem> batch;
    for (std::size_t epoch = 0; epoch < config.epochs_per_replay; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < stop; ++i) {
                const auto& t = buffer[order[i]];
                batch.push_back({t.state, t.picked, compute_td_target(model, t, config.gamma, config.m_prime, rng)});
            }
            const auto grads = td_gradients(model, batch);
            apply_sgd(model, grads, config.eta);
            loss += grads.loss;
            seen += batch.size();
            ++report.updates;
        }
    }
    report.mean_loss = seen ? loss / static_cast<double>(seen) : 0.0;
    return report;
}

struct CurvePoint {
    std::size_t cycle = 0;
    double mean_return = 0.0;
    double std_return = 0.0;
};

using LearningCurve = std::vector<CurvePoint>;

inline void write_curve_csv(std::ostream& out, const LearningCurve& curve) {
    out << "cycle,mean_return,std_return\n";
    for (const auto& p : curve) out << p.cycle << ',' << p.mean_return << ',' << p.std_return << '\n';
}

struct TrainResult {
    QModel model;
    Vocabulary vocab;
    LearningCurve curve;
};

// Builds the vocabulary from `train_trees`, initializes `arch`, and runs
// config.replay_cycles replay cycles. `on_cycle` sees the model after each.
inline TrainResult train(const std::vector<DiscussionTree>& train_trees, Arch arch, const TrainConfig& config,
                         const std::function<void(const CycleReport&, const QModel&)>& on_cycle = {}) {
    validate(config);
    if (train_trees.empty()) throw ConfigError("training corpus is empty");
    TrainResult result;
    result.vocab = build_vocab(train_trees, config.vocab_size);
    result.model = init_model(arch, config.dims(result.vocab.size()), derive_seed(config.seed, 0));
    result.model.set_training_k(config.K);
    result.model.set_vocab_fingerprint(result.vocab.fingerprint());
    if (config.replay_cycles == 0) return result;

    std::vector<TreeFeatures> features;
    features.reserve(train_trees.size());
    for (const auto& t : train_trees) features.emplace_back(t, result.vocab);
    ReplayBuffer buffer(config.replay_capacity);
    Rng rng(derive_seed(config.seed, 1));
    for (std::size_t c = 0; c < config.replay_cycles; ++c) {
        const auto report = replay_cycle(features, result.model, buffer, config, rng);
        result.curve.push_back({c + 1, report.mean_return, report.std_return});
        if (on_cycle) on_cycle(report, result.model);
    }
    return result;
}

}  // namespace threadrl
