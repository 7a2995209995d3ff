#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "threadrl/episode_env.hpp"
#include "threadrl/error.hpp"
#include "threadrl/rng.hpp"
#include "threadrl/text_featurizer.hpp"

namespace threadrl {

enum class Arch { linear, pa_dqn, drrn, drrn_sum, drrn_bilstm };

inline constexpr Arch kAllArchs[] = {Arch::linear, Arch::pa_dqn, Arch::drrn, Arch::drrn_sum, Arch::drrn_bilstm};

inline std::string_view arch_name(Arch a) {
    switch (a) {
        case Arch::linear: return "linear";
        case Arch::pa_dqn: return "pa_dqn";
        case Arch::drrn: return "drrn";
        case Arch::drrn_sum: return "drrn_sum";
        case Arch::drrn_bilstm: return "drrn_bilstm";
    }
    return "?";
}

inline Arch parse_arch(std::string_view s) {
    for (Arch a : kAllArchs)
        if (arch_name(a) == s) return a;
    throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

// Architectures whose value decomposes over, or sequences, sub-actions and
// so accept any K at evaluation time.
inline bool supports_varying_k(Arch a) { return a == Arch::drrn_sum || a == Arch::drrn_bilstm; }

struct ModelDims {
    std::size_t input_dim = 5000;  // vocabulary size V
    std::size_t hidden_layers = 2;
    std::size_t hidden_width = 20;
    std::size_t embed_dim = 20;
    std::size_t lstm_hidden = 20;  // per direction

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline void validate(const ModelDims& d) {
    if (d.input_dim < 1 || d.hidden_layers < 1 || d.hidden_width < 1 || d.embed_dim < 1 || d.lstm_hidden < 1)
        throw ConfigError("all model dimensions must be >= 1");
}

// Row-major matrix (vectors are rows x 1).
struct Tensor {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 1;
    bool bias = false;
    std::vector<double> data;

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

namespace detail {

struct MlpLayout {
    std::size_t in_dim = 0;
    std::vector<std::size_t> weight;  // hidden layer tensors
    std::vector<std::size_t> bias;
    std::size_t out_weight = 0;
    std::size_t out_bias = 0;
};

struct LstmLayout {
    std::size_t w_in = 0;   // 4D x E, gate blocks [input; forget; output; cell]
    std::size_t w_rec = 0;  // 4D x D
    std::size_t bias = 0;   // 4D
};

struct Layout {
    std::size_t linear_weight = 0, linear_bias = 0;
    MlpLayout state;    // pa_dqn keeps its only network here
    MlpLayout action;   // drrn, drrn_sum; per-comment network for drrn_bilstm
    LstmLayout fwd, bwd;
    std::size_t combine_weight = 0, combine_bias = 0;
};

class LayoutBuilder {
public:
    explicit LayoutBuilder(std::vector<Tensor>& out) : out_(out) {}

    std::size_t add(std::string name, std::size_t rows, std::size_t cols, bool bias) {
        out_.push_back(Tensor{std::move(name), rows, cols, bias, std::vector<double>(rows * cols, 0.0)});
        return out_.size() - 1;
    }

    MlpLayout mlp(const std::string& prefix, std::size_t in, std::size_t layers, std::size_t width,
                  std::size_t out_dim, const std::string& out_name) {
        MlpLayout m;
        m.in_dim = in;
        std::size_t prev = in;
        for (std::size_t l = 0; l < layers; ++l) {
            m.weight.push_back(add(prefix + ".l" + std::to_string(l) + ".weight", width, prev, false));
            m.bias.push_back(add(prefix + ".l" + std::to_string(l) + ".bias", width, 1, true));
            prev = width;
        }
        m.out_weight = add(out_name + ".weight", out_dim, prev, false);
        m.out_bias = add(out_name + ".bias", out_dim, 1, true);
        return m;
    }

    LstmLayout lstm(const std::string& prefix, std::size_t in, std::size_t hidden) {
        LstmLayout l;
        l.w_in = add(prefix + ".w_in", 4 * hidden, in, false);
        l.w_rec = add(prefix + ".w_rec", 4 * hidden, hidden, false);
        l.bias = add(prefix + ".bias", 4 * hidden, 1, true);
        return l;
    }

private:
    std::vector<Tensor>& out_;
};

// Builds the parameter manifest for (arch, dims). The order of `tensors` is
// the checkpoint payload order.
inline Layout make_layout(Arch arch, const ModelDims& d, std::vector<Tensor>& tensors) {
    tensors.clear();
    LayoutBuilder b(tensors);
    Layout L;
    const std::size_t V = d.input_dim, H = d.hidden_width, E = d.embed_dim, D = d.lstm_hidden;
    switch (arch) {
        case Arch::linear:
            L.linear_weight = b.add("linear.weight", 1, 2 * V, false);
            L.linear_bias = b.add("linear.bias", 1, 1, true);
            break;
        case Arch::pa_dqn:
            L.state = b.mlp("mlp", 2 * V, d.hidden_layers, H, 1, "head");
            break;
        case Arch::drrn:
        case Arch::drrn_sum:
            L.state = b.mlp("state", V, d.hidden_layers, H, E, "state.out");
            L.action = b.mlp("action", V, d.hidden_layers, H, E, "action.out");
            break;
        case Arch::drrn_bilstm:
            L.state = b.mlp("state", V, d.hidden_layers, H, E, "state.out");
            L.action = b.mlp("comment", V, d.hidden_layers, H, E, "comment.out");
            L.fwd = b.lstm("lstm_fwd", E, D);
            L.bwd = b.lstm("lstm_bwd", E, D);
            L.combine_weight = b.add("combine.weight", E, 2 * D, false);
            L.combine_bias = b.add("combine.bias", E, 1, true);
            break;
    }
    return L;
}

using Sparse = std::vector<std::pair<std::size_t, double>>;

inline Sparse to_sparse(const BowVector& v, std::size_t offset = 0) {
    Sparse s;
    s.reserve(v.entries.size());
    for (const auto& e : v.entries) s.emplace_back(offset + e.index, static_cast<double>(e.count));
    return s;
}

inline Sparse concat_sparse(const BowVector& a, const BowVector& b) {
    Sparse s = to_sparse(a);
    auto t = to_sparse(b, a.dimension);
    s.insert(s.end(), t.begin(), t.end());
    return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Shewchuk/Neumaier-style exactly rounded summation (as Python's math.fsum).
// The result does not depend on the order of `xs`.
inline double exact_sum(std::span<const double> xs) {
    std::vector<double> partials;
    for (double x : xs) {
        if (!std::isfinite(x)) {
            double s = 0.0;
            for (double y : xs) s += y;
            return s;
        }
        std::size_t i = 0;
        for (double y : partials) {
            if (std::abs(x) < std::abs(y)) std::swap(x, y);
            const double hi = x + y;
            const double lo = y - (hi - x);
            if (lo != 0.0) partials[i++] = lo;
            x = hi;
        }
        partials.resize(i);
        partials.push_back(x);
    }
    std::size_t n = partials.size();
    double hi = 0.0;
    if (n > 0) {
        double lo = 0.0;
        hi = partials[--n];
        while (n > 0) {
            const double x = hi;
            const double y = partials[--n];
            hi = x + y;
            const double yr = hi - x;
            lo = y - yr;
            if (lo != 0.0) break;
        }
        if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
            const double y = lo * 2.0;
            const double x = hi + y;
            const double yr = x - hi;
            if (y == yr) hi = x;
        }
    }
    return hi;
}

}  // namespace detail

class QModel {
public:
    QModel() = default;
    QModel(Arch arch, ModelDims dims) : arch_(arch), dims_(dims) {
        validate(dims_);
        layout_ = detail::make_layout(arch_, dims_, params_);
    }

    Arch arch() const noexcept { return arch_; }
    const ModelDims& dims() const noexcept { return dims_; }
    std::vector<Tensor>& params() noexcept { return params_; }
    const std::vector<Tensor>& params() const noexcept { return params_; }
    const detail::Layout& layout() const noexcept { return layout_; }

    // K the model was trained with; 0 when untrained.
    std::size_t training_k() const noexcept { return training_k_; }
    void set_training_k(std::size_t k) noexcept { training_k_ = k; }

    // Fingerprint of the vocabulary the input dimension refers to.
    const std::string& vocab_fingerprint() const noexcept { return vocab_fingerprint_; }
    void set_vocab_fingerprint(std::string fp) { vocab_fingerprint_ = std::move(fp); }

    const Tensor& param(std::string_view name) const {
        for (const auto& t : params_)
            if (t.name == name) return t;
        throw ConfigError("no parameter named '" + std::string(name) + "'");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : params_) n += t.data.size();
        return n;
    }

private:
    Arch arch_ = Arch::linear;
    ModelDims dims_;
    std::vector<Tensor> params_;
    detail::Layout layout_;
    std::size_t training_k_ = 0;
    std::string vocab_fingerprint_;
};

// Weights i.i.d. uniform on [-0.05, 0.05] drawn in manifest order; biases 0.
inline QModel init_model(Arch arch, const ModelDims& dims, std::uint64_t seed, double scale = 0.05) {
    QModel m(arch, dims);
    Rng rng(seed);
    for (auto& t : m.params()) {
        if (t.bias) continue;
        for (auto& w : t.data) w = rng.uniform(-scale, scale);
    }
    return m;
}

namespace detail {

// ---------------------------------------------------------------------------
// Feed-forward tower: tanh hidden layers, affine output layer.
// ---------------------------------------------------------------------------

struct MlpCache {
    std::vector<std::vector<double>> hidden;  // post-activation per hidden layer
    std::vector<double> out;
};

inline void mlp_forward(const std::vector<Tensor>& P, const MlpLayout& m, const Sparse& x, MlpCache& cache) {
    cache.hidden.resize(m.weight.size());
    for (std::size_t l = 0; l < m.weight.size(); ++l) {
        const Tensor& W = P[m.weight[l]];
        const Tensor& b = P[m.bias[l]];
        auto& h = cache.hidden[l];
        h.assign(W.rows, 0.0);
        for (std::size_t r = 0; r < W.rows; ++r) {
            double z = 0.0;
            if (l == 0) {
                for (const auto& [i, v] : x) z += W(r, i) * v;
            } else {
                const auto& prev = cache.hidden[l - 1];
                for (std::size_t c = 0; c < W.cols; ++c) z += W(r, c) * prev[c];
            }
            h[r] = std::tanh(z + b.data[r]);
        }
    }
    const Tensor& W = P[m.out_weight];
    const Tensor& b = P[m.out_bias];
    const auto& top = cache.hidden.back();
    cache.out.assign(W.rows, 0.0);
    for (std::size_t r = 0; r < W.rows; ++r) {
        double z = 0.0;
        for (std::size_t c = 0; c < W.cols; ++c) z += W(r, c) * top[c];
        cache.out[r] = z + b.data[r];
    }
}

inline void mlp_backward(const std::vector<Tensor>& P, std::vector<Tensor>& G, const MlpLayout& m, const Sparse& x,
                         const MlpCache& cache, std::span<const double> d_out) {
    const Tensor& Wo = P[m.out_weight];
    Tensor& gWo = G[m.out_weight];
    Tensor& gbo = G[m.out_bias];
    const auto& top = cache.hidden.back();
    std::vector<double> dh(Wo.cols, 0.0);
    for (std::size_t r = 0; r < Wo.rows; ++r) {
        gbo.data[r] += d_out[r];
        for (std::size_t c = 0; c < Wo.cols; ++c) {
            gWo(r, c) += d_out[r] * top[c];
            dh[c] += Wo(r, c) * d_out[r];
        }
    }
    for (std::size_t l = m.weight.size(); l-- > 0;) {
        const Tensor& W = P[m.weight[l]];
        Tensor& gW = G[m.weight[l]];
        Tensor& gb = G[m.bias[l]];
        const auto& h = cache.hidden[l];
        std::vector<double> dz(W.rows);
        for (std::size_t r = 0; r < W.rows; ++r) dz[r] = dh[r] * (1.0 - h[r] * h[r]);
        if (l == 0) {
            for (std::size_t r = 0; r < W.rows; ++r) {
                gb.data[r] += dz[r];
                for (const auto& [i, v] : x) gW(r, i) += dz[r] * v;
            }
        } else {
            const auto& prev = cache.hidden[l - 1];
            std::vector<double> dprev(W.cols, 0.0);
            for (std::size_t r = 0; r < W.rows; ++r) {
                gb.data[r] += dz[r];
                for (std::size_t c = 0; c < W.cols; ++c) {
                    gW(r, c) += dz[r] * prev[c];
                    dprev[c] += W(r, c) * dz[r];
                }
            }
            dh = std::move(dprev);
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM over a sequence; only the final hidden state is read out.
// ---------------------------------------------------------------------------

struct LstmCache {
    std::size_t hidden = 0;
    std::vector<std::vector<double>> x, i, f, o, g, c, h;  // per step; c[0], h[0] are zero state
};

inline void lstm_forward(const std::vector<Tensor>& P, const LstmLayout& L, std::size_t D,
                         const std::vector<const std::vector<double>*>& seq, LstmCache& cache) {
    const Tensor& Wi = P[L.w_in];
    const Tensor& Wr = P[L.w_rec];
    const Tensor& b = P[L.bias];
    const std::size_t T = seq.size();
    cache.hidden = D;
    cache.x.resize(T);
    cache.i.assign(T, std::vector<double>(D));
    cache.f.assign(T, std::vector<double>(D));
    cache.o.assign(T, std::vector<double>(D));
    cache.g.assign(T, std::vector<double>(D));
    cache.c.assign(T + 1, std::vector<double>(D, 0.0));
    cache.h.assign(T + 1, std::vector<double>(D, 0.0));
    std::vector<double> z(4 * D);
    for (std::size_t t = 0; t < T; ++t) {
        cache.x[t] = *seq[t];
        const auto& xt = cache.x[t];
        const auto& hp = cache.h[t];
        for (std::size_t r = 0; r < 4 * D; ++r) {
            double s = 0.0;
            for (std::size_t k = 0; k < Wi.cols; ++k) s += Wi(r, k) * xt[k];
            for (std::size_t k = 0; k < D; ++k) s += Wr(r, k) * hp[k];
            z[r] = s + b.data[r];
        }
        for (std::size_t k = 0; k < D; ++k) {
            const double ig = sigmoid(z[k]);
            const double fg = sigmoid(z[D + k]);
            const double og = sigmoid(z[2 * D + k]);
            const double gg = std::tanh(z[3 * D + k]);
            cache.i[t][k] = ig;
            cache.f[t][k] = fg;
            cache.o[t][k] = og;
            cache.g[t][k] = gg;
            cache.c[t + 1][k] = fg * cache.c[t][k] + ig * gg;
            cache.h[t + 1][k] = og * std::tanh(cache.c[t + 1][k]);
        }
    }
}

// Backpropagates d(final hidden) through time. Returns d(input) per step.
inline std::vector<std::vector<double>> lstm_backward(const std::vector<Tensor>& P, std::vector<Tensor>& G,
                                                      const LstmLayout& L, const LstmCache& cache,
                                                      std::span<const double> d_final) {
    const Tensor& Wi = P[L.w_in];
    const Tensor& Wr = P[L.w_rec];
    Tensor& gWi = G[L.w_in];
    Tensor& gWr = G[L.w_rec];
    Tensor& gb = G[L.bias];
    const std::size_t D = cache.hidden;
    const std::size_t T = cache.x.size();
    std::vector<std::vector<double>> dx(T, std::vector<double>(Wi.cols, 0.0));
    std::vector<double> dh(d_final.begin(), d_final.end());
    std::vector<double> dc(D, 0.0);
    std::vector<double> dz(4 * D);
    for (std::size_t t = T; t-- > 0;) {
        for (std::size_t k = 0; k < D; ++k) {
            const double tc = std::tanh(cache.c[t + 1][k]);
            const double ig = cache.i[t][k], fg = cache.f[t][k], og = cache.o[t][k], gg = cache.g[t][k];
            const double d_o = dh[k] * tc;
            const double dct = dc[k] + dh[k] * og * (1.0 - tc * tc);
            dz[k] = dct * gg * ig * (1.0 - ig);
            dz[D + k] = dct * cache.c[t][k] * fg * (1.0 - fg);
            dz[2 * D + k] = d_o * og * (1.0 - og);
            dz[3 * D + k] = dct * ig * (1.0 - gg * gg);
            dc[k] = dct * fg;
        }
        const auto& xt = cache.x[t];
        const auto& hp = cache.h[t];
        std::vector<double> dh_prev(D, 0.0);
        for (std::size_t r = 0; r < 4 * D; ++r) {
            gb.data[r] += dz[r];
            for (std::size_t k = 0; k < Wi.cols; ++k) {
                gWi(r, k) += dz[r] * xt[k];
                dx[t][k] += Wi(r, k) * dz[r];
            }
            for (std::size_t k = 0; k < D; ++k) {
                gWr(r, k) += dz[r] * hp[k];
                dh_prev[k] += Wr(r, k) * dz[r];
            }
        }
        dh = std::move(dh_prev);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Whole-model forward with the caches needed for backpropagation.
// ---------------------------------------------------------------------------

struct ForwardCache {
    Sparse joint_input;                     // linear / pa_dqn / drrn action tower input
    Sparse state_input;
    MlpCache state;
    std::vector<Sparse> sub_inputs;         // drrn_sum / drrn_bilstm per sub-action
    std::vector<MlpCache> subs;
    MlpCache joint;                         // drrn action tower
    LstmCache fwd, bwd;
    std::vector<double> combined_hidden;    // [h_fwd ; h_bwd]
    std::vector<double> action_embedding;   // drrn_bilstm readout
    std::vector<double> sub_q;              // drrn_sum per-sub-action values
    double q = 0.0;
};

inline void check_dims(const QModel& m, const BowVector& s, std::span<const BowVector> subs) {
    if (subs.empty()) throw ConfigError("an action needs at least one sub-action");
    const std::size_t V = m.dims().input_dim;
    if (s.dimension != V)
        throw ConfigError("state bag has dimension " + std::to_string(s.dimension) + ", model expects " +
                          std::to_string(V));
    for (const auto& b : subs)
        if (b.dimension != V)
            throw ConfigError("sub-action bag has dimension " + std::to_string(b.dimension) + ", model expects " +
                              std::to_string(V));
}

inline void bilstm_readout(const std::vector<Tensor>& P, const Layout& L, std::size_t D, ForwardCache& c) {
    std::vector<const std::vector<double>*> seq;
    for (const auto& s : c.subs) seq.push_back(&s.out);
    lstm_forward(P, L.fwd, D, seq, c.fwd);
    std::reverse(seq.begin(), seq.end());
    lstm_forward(P, L.bwd, D, seq, c.bwd);
    c.combined_hidden = c.fwd.h.back();
    c.combined_hidden.insert(c.combined_hidden.end(), c.bwd.h.back().begin(), c.bwd.h.back().end());
    const Tensor& W = P[L.combine_weight];
    const Tensor& b = P[L.combine_bias];
    c.action_embedding.assign(W.rows, 0.0);
    for (std::size_t r = 0; r < W.rows; ++r) {
        double z = 0.0;
        for (std::size_t k = 0; k < W.cols; ++k) z += W(r, k) * c.combined_hidden[k];
        c.action_embedding[r] = z + b.data[r];
    }
}

inline double forward(const QModel& m, const BowVector& s, std::span<const BowVector> subs, ForwardCache& c) {
    check_dims(m, s, subs);
    const auto& P = m.params();
    const auto& L = m.layout();
    switch (m.arch()) {
        case Arch::linear: {
            c.joint_input = concat_sparse(s, action_bow_joint(std::vector<BowVector>(subs.begin(), subs.end()), s.dimension));
            const Tensor& W = P[L.linear_weight];
            double z = 0.0;
            for (const auto& [i, v] : c.joint_input) z += W.data[i] * v;
            c.q = z + P[L.linear_bias].data[0];
            break;
        }
        case Arch::pa_dqn:
            c.joint_input = concat_sparse(s, action_bow_joint(std::vector<BowVector>(subs.begin(), subs.end()), s.dimension));
            mlp_forward(P, L.state, c.joint_input, c.state);
            c.q = c.state.out[0];
            break;
        case Arch::drrn:
            c.state_input = to_sparse(s);
            mlp_forward(P, L.state, c.state_input, c.state);
            c.joint_input = to_sparse(action_bow_joint(std::vector<BowVector>(subs.begin(), subs.end()), s.dimension));
            mlp_forward(P, L.action, c.joint_input, c.joint);
            c.q = dot(c.state.out, c.joint.out);
            break;
        case Arch::drrn_sum:
            c.state_input = to_sparse(s);
            mlp_forward(P, L.state, c.state_input, c.state);
            c.sub_inputs.resize(subs.size());
            c.subs.resize(subs.size());
            c.sub_q.resize(subs.size());
            for (std::size_t k = 0; k < subs.size(); ++k) {
                c.sub_inputs[k] = to_sparse(subs[k]);
                mlp_forward(P, L.action, c.sub_inputs[k], c.subs[k]);
                c.sub_q[k] = dot(c.state.out, c.subs[k].out);
            }
            c.q = exact_sum(c.sub_q);
            break;
        case Arch::drrn_bilstm:
            c.state_input = to_sparse(s);
            mlp_forward(P, L.state, c.state_input, c.state);
            c.sub_inputs.resize(subs.size());
            c.subs.resize(subs.size());
            for (std::size_t k = 0; k < subs.size(); ++k) {
                c.sub_inputs[k] = to_sparse(subs[k]);
                mlp_forward(P, L.action, c.sub_inputs[k], c.subs[k]);
            }
            bilstm_readout(P, L, m.dims().lstm_hidden, c);
            c.q = dot(c.state.out, c.action_embedding);
            break;
    }
    return c.q;
}

// Accumulates d_q * dQ/dtheta into G (shaped like the model's parameters).
inline void backward(const QModel& m, const ForwardCache& c, double d_q, std::vector<Tensor>& G) {
    const auto& P = m.params();
    const auto& L = m.layout();
    auto scaled = [d_q](const std::vector<double>& v) {
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = d_q * v[i];
        return out;
    };
    switch (m.arch()) {
        case Arch::linear: {
            Tensor& gW = G[L.linear_weight];
            for (const auto& [i, v] : c.joint_input) gW.data[i] += d_q * v;
            G[L.linear_bias].data[0] += d_q;
            break;
        }
        case Arch::pa_dqn: {
            const double d[1] = {d_q};
            mlp_backward(P, G, L.state, c.joint_input, c.state, d);
            break;
        }
        case Arch::drrn:
            mlp_backward(P, G, L.state, c.state_input, c.state, scaled(c.joint.out));
            mlp_backward(P, G, L.action, c.joint_input, c.joint, scaled(c.state.out));
            break;
        case Arch::drrn_sum: {
            std::vector<double> d_state(c.state.out.size(), 0.0);
            const auto d_sub = scaled(c.state.out);
            for (std::size_t k = 0; k < c.subs.size(); ++k) {
                for (std::size_t e = 0; e < d_state.size(); ++e) d_state[e] += d_q * c.subs[k].out[e];
                mlp_backward(P, G, L.action, c.sub_inputs[k], c.subs[k], d_sub);
            }
            mlp_backward(P, G, L.state, c.state_input, c.state, d_state);
            break;
        }
        case Arch::drrn_bilstm: {
            mlp_backward(P, G, L.state, c.state_input, c.state, scaled(c.action_embedding));
            const auto d_emb = scaled(c.state.out);
            const Tensor& Wc = P[L.combine_weight];
            Tensor& gWc = G[L.combine_weight];
            Tensor& gbc = G[L.combine_bias];
            std::vector<double> d_hidden(Wc.cols, 0.0);
            for (std::size_t r = 0; r < Wc.rows; ++r) {
                gbc.data[r] += d_emb[r];
                for (std::size_t k = 0; k < Wc.cols; ++k) {
                    gWc(r, k) += d_emb[r] * c.combined_hidden[k];
                    d_hidden[k] += Wc(r, k) * d_emb[r];
                }
            }
            const std::size_t D = m.dims().lstm_hidden;
            const std::span<const double> dh(d_hidden);
            auto dx_fwd = lstm_backward(P, G, L.fwd, c.fwd, dh.subspan(0, D));
            auto dx_bwd = lstm_backward(P, G, L.bwd, c.bwd, dh.subspan(D, D));
            const std::size_t K = c.subs.size();
            for (std::size_t k = 0; k < K; ++k) {
                std::vector<double> d_sub = dx_fwd[k];
                const auto& other = dx_bwd[K - 1 - k];
                for (std::size_t e = 0; e < d_sub.size(); ++e) d_sub[e] += other[e];
                mlp_backward(P, G, L.action, c.sub_inputs[k], c.subs[k], d_sub);
            }
            break;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Q(s, a) for the action made of `sub_bows` (window order).
inline double q_combined(const QModel& model, const BowVector& state_bow, std::span<const BowVector> sub_bows) {
    detail::ForwardCache cache;
    return detail::forward(model, state_bow, sub_bows, cache);
}

// drrn_sum only: the value of including one sub-action.
inline double q_per_subaction(const QModel& model, const BowVector& state_bow, const BowVector& sub_bow) {
    if (model.arch() != Arch::drrn_sum)
        throw ConfigError("q_per_subaction is defined only for drrn_sum, not " + std::string(arch_name(model.arch())));
    detail::ForwardCache cache;
    detail::forward(model, state_bow, std::span<const BowVector>(&sub_bow, 1), cache);
    return cache.sub_q[0];
}

// Scores K-subsets of one candidate window against one state, reusing the
// state embedding and per-candidate embeddings. score(a) is bit-identical to
// q_combined over the picked bags.
class ActionScorer {
public:
    ActionScorer(const QModel& model, const BowVector& state_bow, std::span<const BowVector> window)
        : model_(&model), state_bow_(&state_bow), window_(window) {
        detail::check_dims(model, state_bow, window);
        const auto& P = model.params();
        const auto& L = model.layout();
        if (model.arch() == Arch::drrn || model.arch() == Arch::drrn_sum || model.arch() == Arch::drrn_bilstm) {
            detail::mlp_forward(P, L.state, detail::to_sparse(state_bow), state_);
        }
        if (model.arch() == Arch::drrn_sum || model.arch() == Arch::drrn_bilstm) {
            candidates_.resize(window.size());
            sub_q_.resize(window.size());
            for (std::size_t i = 0; i < window.size(); ++i) {
                detail::mlp_forward(P, L.action, detail::to_sparse(window[i]), candidates_[i]);
                sub_q_[i] = detail::dot(state_.out, candidates_[i].out);
            }
        }
    }

    std::size_t window_size() const noexcept { return window_.size(); }

    // drrn_sum per-candidate values.
    const std::vector<double>& subaction_values() const {
        if (model_->arch() != Arch::drrn_sum) throw ConfigError("per-sub-action values need drrn_sum");
        return sub_q_;
    }

    double score(const ActionChoice& a) const {
        const auto& P = model_->params();
        const auto& L = model_->layout();
        switch (model_->arch()) {
            case Arch::drrn_sum: {
                std::vector<double> q;
                q.reserve(a.picks.size());
                for (std::size_t i : a.picks) q.push_back(sub_q_.at(i));
                return detail::exact_sum(q);
            }
            case Arch::drrn_bilstm: {
                detail::ForwardCache c;
                for (std::size_t i : a.picks) c.subs.push_back(candidates_.at(i));
                detail::bilstm_readout(P, L, model_->dims().lstm_hidden, c);
                return detail::dot(state_.out, c.action_embedding);
            }
            case Arch::drrn: {
                BowVector joint{state_bow_->dimension, {}};
                for (std::size_t i : a.picks) joint += window_[i];
                detail::MlpCache c;
                detail::mlp_forward(P, L.action, detail::to_sparse(joint), c);
                return detail::dot(state_.out, c.out);
            }
            default: {
                std::vector<BowVector> subs;
                for (std::size_t i : a.picks) subs.push_back(window_[i]);
                return q_combined(*model_, *state_bow_, subs);
            }
        }
    }

private:
    const QModel* model_;
    const BowVector* state_bow_;
    std::span<const BowVector> window_;
    detail::MlpCache state_;
    std::vector<detail::MlpCache> candidates_;
    std::vector<double> sub_q_;
};

enum class SelectMode { greedy_topk, sampled, exhaustive };

inline std::string_view select_mode_name(SelectMode m) {
    switch (m) {
        case SelectMode::greedy_topk: return "greedy_topk";
        case SelectMode::sampled: return "sampled";
        case SelectMode::exhaustive: return "exhaustive";
    }
    return "?";
}

inline SelectMode parse_select_mode(std::string_view s) {
    for (auto m : {SelectMode::greedy_topk, SelectMode::sampled, SelectMode::exhaustive})
        if (select_mode_name(m) == s) return m;
    throw ConfigError("unknown action selection mode '" + std::string(s) + "'");
}

struct SelectPolicy {
    double epsilon = 0.1;
    SelectMode mode = SelectMode::exhaustive;
    std::size_t m_prime = 10;  // sampled mode only
};

// The K candidates with the highest per-sub-action value; ties go to the
// lower index. Returned sorted.
inline ActionChoice greedy_topk(const ActionScorer& scorer, std::size_t k) {
    const auto& q = scorer.subaction_values();
    std::vector<std::size_t> idx(q.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return q[a] > q[b]; });
    ActionChoice a{{idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k)}};
    std::sort(a.picks.begin(), a.picks.end());
    return a;
}

struct ScoredAction {
    ActionChoice action;
    double q = 0.0;
};

// Highest-scoring action among `actions`; ties go to the lexicographically
// smallest.
inline ScoredAction best_of(const ActionScorer& scorer, const std::vector<ActionChoice>& actions) {
    ScoredAction best{{}, -std::numeric_limits<double>::infinity()};
    bool first = true;
    for (const auto& a : actions) {
        const double q = scorer.score(a);
        if (first || q > best.q || (q == best.q && a < best.action)) {
            best = {a, q};
            first = false;
        }
    }
    return best;
}

inline ScoredAction best_exhaustive(const ActionScorer& scorer, std::size_t k) {
    ScoredAction best{{}, -std::numeric_limits<double>::infinity()};
    bool first = true;
    for_each_action(scorer.window_size(), k, [&](const ActionChoice& a) {
        const double q = scorer.score(a);
        if (first || q > best.q) {
            best = {a, q};
            first = false;
        }
    });
    return best;
}

// Epsilon-greedy action choice. With epsilon >= 1 no coin is drawn, so the
// random stream matches random_rollout step for step.
inline ActionChoice select_action(const QModel& model, const BowVector& state_bow,
                                  std::span<const BowVector> window_bows, std::size_t k, const SelectPolicy& policy,
                                  Rng& rng) {
    const std::size_t n = window_bows.size();
    check_window_config(n, k);
    if (policy.mode == SelectMode::greedy_topk && model.arch() != Arch::drrn_sum)
        throw ConfigError("greedy_topk selection needs an additive model (drrn_sum), not " +
                          std::string(arch_name(model.arch())));
    if (policy.epsilon > 0.0 && (policy.epsilon >= 1.0 || rng.uniform() < policy.epsilon))
        return random_action(n, k, rng);
    ActionScorer scorer(model, state_bow, window_bows);
    switch (policy.mode) {
        case SelectMode::greedy_topk: return greedy_topk(scorer, k);
        case SelectMode::sampled: return best_of(scorer, sample_actions(n, k, policy.m_prime, rng)).action;
        case SelectMode::exhaustive: return best_exhaustive(scorer, k).action;
    }
    return {};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TdItem {
    BowVector state;
    std::vector<BowVector> subs;
    double target = 0.0;
};

struct Gradients {
    std::vector<Tensor> tensors;  // same manifest as the model
    double loss = 0.0;            // 0.5 * sum of squared TD errors
};

inline Gradients zero_gradients(const QModel& model) {
    Gradients g;
    g.tensors = model.params();
    for (auto& t : g.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
    return g;
}

// Exact gradients of 0.5 * sum_i (target_i - Q(s_i, a_i))^2.
inline Gradients td_gradients(const QModel& model, std::span<const TdItem> batch) {
    if (batch.empty()) throw ConfigError("td_gradients needs a non-empty batch");
    Gradients g = zero_gradients(model);
    detail::ForwardCache cache;
    for (const auto& item : batch) {
        if (!std::isfinite(item.target)) throw NumericError("non-finite TD target");
        const double q = detail::forward(model, item.state, item.subs, cache);
        if (!std::isfinite(q)) throw NumericError("non-finite Q output");
        const double residual = item.target - q;
        g.loss += 0.5 * residual * residual;
        detail::backward(model, cache, -residual, g.tensors);
    }
    for (const auto& t : g.tensors)
        for (double v : t.data)
            if (!std::isfinite(v)) throw NumericError("non-finite gradient in tensor '" + t.name + "'");
    return g;
}

// params <- params - eta * grads. No momentum, no decay.
inline void apply_sgd(QModel& model, const Gradients& grads, double eta) {
    auto& P = model.params();
    if (grads.tensors.size() != P.size()) throw ConfigError("gradient manifest does not match the model");
    for (std::size_t i = 0; i < P.size(); ++i) {
        if (grads.tensors[i].name != P[i].name || grads.tensors[i].data.size() != P[i].data.size())
            throw ConfigError("gradient tensor '" + grads.tensors[i].name + "' does not match parameter '" +
                              P[i].name + "'");
    }
    for (std::size_t i = 0; i < P.size(); ++i) {
        auto& p = P[i].data;
        const auto& d = grads.tensors[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= eta * d[j];
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: "QMDL1\n", one-line JSON header, '\n', then little-endian
// float64 parameters in manifest order.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[] = "QMDL1";

inline void save_checkpoint(const QModel& model, const std::string& vocab_fingerprint, std::ostream& out) {
    nlohmann::ordered_json h;
    h["format_version"] = kCheckpointVersion;
    h["arch"] = std::string(arch_name(model.arch()));
    const auto& d = model.dims();
    h["dims"] = {{"input_dim", d.input_dim},
                 {"hidden_layers", d.hidden_layers},
                 {"hidden_width", d.hidden_width},
                 {"embed_dim", d.embed_dim},
                 {"lstm_hidden", d.lstm_hidden}};
    h["vocab_fingerprint"] = vocab_fingerprint;
    h["training_k"] = model.training_k();
    auto manifest = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& t : model.params()) {
        manifest.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
        offset += t.data.size();
    }
    h["tensors"] = std::move(manifest);
    h["payload_count"] = offset;
    out << kCheckpointMagic << '\n' << h.dump() << '\n';
    for (const auto& t : model.params()) {
        for (double v : t.data) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            unsigned char bytes[8];
            for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
            out.write(reinterpret_cast<const char*>(bytes), 8);
        }
    }
    if (!out) throw IoError("failed writing checkpoint");
}

struct LoadedCheckpoint {
    QModel model;
    std::string vocab_fingerprint;
    // Set when an expected fingerprint was given and differs.
    std::optional<std::string> fingerprint_warning;
};

inline LoadedCheckpoint load_checkpoint(std::istream& in, const std::optional<std::string>& expected_fingerprint = {}) {
    std::string magic;
    if (!std::getline(in, magic) || magic != kCheckpointMagic) throw CheckpointError("missing QMDL1 magic");
    std::string header_line;
    if (!std::getline(in, header_line)) throw CheckpointError("missing header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad header: ") + e.what());
    }
    LoadedCheckpoint out;
    try {
        const int version = h.at("format_version").get<int>();
        if (version != kCheckpointVersion)
            throw CheckpointError("unsupported checkpoint format version " + std::to_string(version));
        Arch arch;
        try {
            arch = parse_arch(h.at("arch").get<std::string>());
        } catch (const ConfigError& e) {
            throw CheckpointError(e.what());
        }
        const auto& jd = h.at("dims");
        ModelDims dims{jd.at("input_dim").get<std::size_t>(), jd.at("hidden_layers").get<std::size_t>(),
                       jd.at("hidden_width").get<std::size_t>(), jd.at("embed_dim").get<std::size_t>(),
                       jd.at("lstm_hidden").get<std::size_t>()};
        try {
            out.model = QModel(arch, dims);
        } catch (const ConfigError& e) {
            throw CheckpointError(e.what());
        }
        out.model.set_training_k(h.value("training_k", std::size_t{0}));
        out.vocab_fingerprint = h.at("vocab_fingerprint").get<std::string>();
        out.model.set_vocab_fingerprint(out.vocab_fingerprint);
        const auto& manifest = h.at("tensors");
        auto& P = out.model.params();
        if (manifest.size() != P.size()) throw CheckpointError("tensor manifest does not match architecture");
        std::size_t offset = 0;
        for (std::size_t i = 0; i < P.size(); ++i) {
            const auto& e = manifest[i];
            if (e.at("name").get<std::string>() != P[i].name || e.at("shape")[0].get<std::size_t>() != P[i].rows ||
                e.at("shape")[1].get<std::size_t>() != P[i].cols || e.at("offset").get<std::size_t>() != offset)
                throw CheckpointError("tensor manifest entry " + std::to_string(i) + " does not match architecture");
            offset += P[i].data.size();
        }
        if (h.at("payload_count").get<std::size_t>() != offset) throw CheckpointError("payload count mismatch");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad header: ") + e.what());
    }
    for (auto& t : out.model.params()) {
        for (auto& v : t.data) {
            unsigned char bytes[8];
            if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw CheckpointError("truncated payload");
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
            std::memcpy(&v, &bits, sizeof v);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after payload");
    for (const auto& t : out.model.params())
        for (double v : t.data)
            if (!std::isfinite(v)) throw CheckpointError("non-finite value in tensor '" + t.name + "'");
    if (expected_fingerprint && *expected_fingerprint != out.vocab_fingerprint)
        out.fingerprint_warning = "checkpoint vocabulary fingerprint " + out.vocab_fingerprint +
                                  " differs from expected " + *expected_fingerprint;
    return out;
}

}  // namespace threadrl
