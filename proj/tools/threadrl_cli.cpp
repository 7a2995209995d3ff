// Command-line front end: corpus ingestion and synthesis, vocabulary
// building, baselines, training, evaluation and gradient checks.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "threadrl.hpp"

namespace {

using namespace threadrl;

struct Common {
    std::uint64_t seed = 0;
    std::string config;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--seed", c.seed, "Master seed");
    cmd->add_option("--config", c.config, "JSON config file");
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("'" + path + "': " + e.what());
    }
}

TrainConfig load_train_config(const Common& c) {
    if (c.config.empty()) return TrainConfig{};
    return train_config_from_json(read_json_file(c.config));
}

std::vector<DiscussionTree> read_corpus(const std::string& path, bool strict = true) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    auto res = parse_tree_dump(in, strict);
    for (const auto& e : res.errors) std::cerr << "warning: skipped record: " << e.message << '\n';
    return std::move(res.trees);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    return out;
}

Vocabulary read_vocab_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    return read_vocab(in);
}

QModel read_checkpoint(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    auto loaded = load_checkpoint(in, vocab.fingerprint());
    if (loaded.fingerprint_warning) throw ConfigError(*loaded.fingerprint_warning);
    return std::move(loaded.model);
}

std::vector<DiscussionTree> eval_trees(const std::vector<DiscussionTree>& corpus, const std::string& split,
                                       double ratio, std::uint64_t seed) {
    if (split == "all") return corpus;
    auto s = split_corpus(corpus, ratio, seed);
    return split == "train" ? s.train : s.test;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Popular-thread tracking with deep Q-learning over discussion trees"};
    app.require_subcommand(1);

    // ingest
    Common ingest_c;
    std::string ingest_in, ingest_out;
    std::size_t min_comments = 100;
    bool ingest_strict = false;
    auto* ingest = app.add_subcommand("ingest", "Validate and filter a tree dump; print corpus statistics");
    add_common(ingest, ingest_c);
    ingest->add_option("--input", ingest_in, "JSONL tree dump")->required();
    ingest->add_option("--output", ingest_out, "Write the filtered corpus here");
    ingest->add_option("--min-comments", min_comments, "Keep trees with at least this many comments");
    ingest->add_flag("--strict", ingest_strict, "Abort on the first bad record");

    // synth
    Common synth_c;
    std::string synth_out;
    std::size_t synth_trees = 100;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus from a SynthSpec JSON");
    add_common(synth, synth_c);
    synth->add_option("--trees", synth_trees, "Number of trees");
    synth->add_option("--output", synth_out, "JSONL output")->required();

    // vocab
    Common vocab_c;
    std::string vocab_corpus, vocab_out;
    double vocab_ratio = 0.9;
    std::optional<std::size_t> vocab_size;
    auto* vocab_cmd = app.add_subcommand("vocab", "Build the vocabulary from the training split");
    add_common(vocab_cmd, vocab_c);
    vocab_cmd->add_option("--corpus", vocab_corpus)->required();
    vocab_cmd->add_option("--output", vocab_out)->required();
    vocab_cmd->add_option("--ratio", vocab_ratio, "Training fraction");
    vocab_cmd->add_option("--size", vocab_size, "Vocabulary size");

    // baseline
    Common base_c;
    std::string base_corpus;
    std::optional<std::size_t> base_n, base_k;
    std::size_t base_episodes = 10000, base_runs = 5;
    auto* base = app.add_subcommand("baseline", "Random-policy and oracle upper-bound lines as CSV");
    add_common(base, base_c);
    base->add_option("--corpus", base_corpus)->required();
    base->add_option("--N", base_n);
    base->add_option("--K", base_k);
    base->add_option("--episodes", base_episodes);
    base->add_option("--runs", base_runs);

    // train
    Common train_c;
    std::string train_corpus, train_arch = "drrn_bilstm", train_out, train_vocab_out, train_curve;
    double train_ratio = 0.9;
    auto* train_cmd = app.add_subcommand("train", "Train a Q-model with experience replay");
    add_common(train_cmd, train_c);
    train_cmd->add_option("--corpus", train_corpus)->required();
    train_cmd->add_option("--arch", train_arch, "linear | pa_dqn | drrn | drrn_sum | drrn_bilstm");
    train_cmd->add_option("--output", train_out, "Checkpoint path")->required();
    train_cmd->add_option("--vocab-out", train_vocab_out, "Vocabulary path (default: <output>.vocab)");
    train_cmd->add_option("--curve", train_curve, "Learning-curve CSV path");
    train_cmd->add_option("--ratio", train_ratio, "Training fraction of the corpus");

    // eval and generalize share their flags
    struct EvalFlags {
        Common c;
        std::string checkpoint, vocab, corpus, split = "test";
        double ratio = 0.9;
        std::optional<double> epsilon;
        std::optional<std::size_t> n, k;
        std::size_t episodes = 1000, runs = 5;
    };
    auto add_eval_flags = [](CLI::App* cmd, EvalFlags& f) {
        add_common(cmd, f.c);
        cmd->add_option("--checkpoint", f.checkpoint)->required();
        cmd->add_option("--vocab", f.vocab)->required();
        cmd->add_option("--corpus", f.corpus)->required();
        cmd->add_option("--split", f.split, "test | train | all")->check(CLI::IsMember({"test", "train", "all"}));
        cmd->add_option("--ratio", f.ratio, "Training fraction used at train time");
        cmd->add_option("--eval-epsilon", f.epsilon, "Exploration rate at evaluation (default: config epsilon)");
        cmd->add_option("--N", f.n);
        cmd->add_option("--K", f.k);
        cmd->add_option("--episodes", f.episodes);
        cmd->add_option("--runs", f.runs);
    };
    EvalFlags eval_f;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint; prints a JSON report");
    add_eval_flags(eval_cmd, eval_f);

    EvalFlags gen_f;
    std::vector<std::size_t> k_list;
    auto* gen_cmd = app.add_subcommand("generalize", "Evaluate a drrn_sum/drrn_bilstm checkpoint at other K");
    add_eval_flags(gen_cmd, gen_f);
    gen_cmd->add_option("--k-list", k_list, "K values")->delimiter(',')->required();

    // gradcheck
    Common grad_c;
    std::string grad_arch = "all";
    std::size_t grad_draws = 100;
    auto* grad = app.add_subcommand("gradcheck", "Analytic vs finite-difference TD gradients");
    add_common(grad, grad_c);
    grad->add_option("--arch", grad_arch, "Architecture or 'all'");
    grad->add_option("--draws", grad_draws);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*ingest) {
            load_train_config(ingest_c);
            auto trees = read_corpus(ingest_in, ingest_strict);
            auto kept = filter_trees(trees, min_comments);
            if (!ingest_out.empty()) {
                auto out = open_out(ingest_out);
                write_tree_dump(out, kept);
            }
            auto stats = to_json(corpus_stats(kept));
            stats["parsed"] = trees.size();
            std::cout << stats.dump() << '\n';
        } else if (*synth) {
            if (synth_c.config.empty()) throw ConfigError("synth needs --config <SynthSpec JSON>");
            auto spec = synth_spec_from_json(read_json_file(synth_c.config));
            if (synth->count("--seed")) spec.seed = synth_c.seed;
            auto out = open_out(synth_out);
            write_tree_dump(out, generate_synthetic_corpus(spec, synth_trees));
        } else if (*vocab_cmd) {
            auto cfg = load_train_config(vocab_c);
            auto split = split_corpus(read_corpus(vocab_corpus), vocab_ratio, vocab_c.seed);
            auto v = build_vocab(split.train, vocab_size.value_or(cfg.vocab_size));
            auto out = open_out(vocab_out);
            write_vocab(out, v);
        } else if (*base) {
            auto cfg = load_train_config(base_c);
            EvalConfig ec;
            ec.N = base_n.value_or(cfg.N);
            ec.K = base_k.value_or(cfg.K);
            ec.episodes = base_episodes;
            ec.runs = base_runs;
            ec.seed = base_c.seed;
            auto trees = read_corpus(base_corpus);
            write_baseline_csv(std::cout, baseline_report(trees, ec), trees.size());
        } else if (*train_cmd) {
            auto cfg = load_train_config(train_c);
            if (train_cmd->count("--seed")) cfg.seed = train_c.seed;
            const Arch arch = parse_arch(train_arch);
            auto split = split_corpus(read_corpus(train_corpus), train_ratio, cfg.seed);
            auto result = train(split.train, arch, cfg, [](const CycleReport& r, const QModel&) {
                std::cerr << "cycle mean_return=" << r.mean_return << " loss=" << r.mean_loss << '\n';
            });
            {
                auto out = open_out(train_out);
                save_checkpoint(result.model, result.vocab.fingerprint(), out);
            }
            {
                auto out = open_out(train_vocab_out.empty() ? train_out + ".vocab" : train_vocab_out);
                write_vocab(out, result.vocab);
            }
            if (!train_curve.empty()) {
                auto out = open_out(train_curve);
                write_curve_csv(out, result.curve);
            }
            nlohmann::ordered_json summary;
            summary["arch"] = train_arch;
            summary["config"] = to_json(cfg);
            summary["train_trees"] = split.train.size();
            summary["test_trees"] = split.test.size();
            summary["vocab_size"] = result.vocab.size();
            summary["vocab_fingerprint"] = result.vocab.fingerprint();
            summary["cycles"] = result.curve.size();
            std::cout << summary.dump() << '\n';
        } else if (*eval_cmd || *gen_cmd) {
            EvalFlags& f = *eval_cmd ? eval_f : gen_f;
            auto cfg = load_train_config(f.c);
            auto vocab = read_vocab_file(f.vocab);
            auto model = read_checkpoint(f.checkpoint, vocab);
            auto trees = eval_trees(read_corpus(f.corpus), f.split, f.ratio, f.c.seed);
            EvalConfig ec;
            ec.N = f.n.value_or(cfg.N);
            ec.K = f.k.value_or(model.training_k() ? model.training_k() : cfg.K);
            ec.epsilon = f.epsilon.value_or(cfg.epsilon);
            ec.mode = cfg.action_eval_mode;
            ec.m_prime = cfg.m_prime;
            ec.episodes = f.episodes;
            ec.runs = f.runs;
            ec.seed = f.c.seed;
            if (*eval_cmd) {
                std::cout << to_json(evaluate(model, vocab, trees, ec)).dump() << '\n';
            } else {
                auto reports = generalization_eval(model, vocab, trees, ec, k_list);
                auto arr = nlohmann::ordered_json::array();
                for (const auto& r : reports) arr.push_back(to_json(r));
                std::cout << arr.dump() << '\n';
            }
        } else if (*grad) {
            load_train_config(grad_c);
            GradcheckOptions opt;
            opt.draws = grad_draws;
            opt.seed = grad_c.seed;
            std::vector<Arch> archs;
            if (grad_arch == "all")
                archs.assign(std::begin(kAllArchs), std::end(kAllArchs));
            else
                archs.push_back(parse_arch(grad_arch));
            bool ok = true;
            std::cout << "arch,max_relative_error,entries\n";
            for (Arch a : archs) {
                auto r = gradcheck(a, opt);
                std::cout << arch_name(a) << ',' << r.max_relative_error << ',' << r.entries_checked << '\n';
                ok = ok && r.max_relative_error <= 1e-4;
            }
            if (!ok) {
                std::cerr << "error: gradcheck: relative error above 1e-4\n";
                return 1;
            }
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.code() << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
