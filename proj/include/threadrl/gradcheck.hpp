#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "threadrl/q_models.hpp"
#include "threadrl/rng.hpp"

namespace threadrl {

struct GradcheckOptions {
    ModelDims dims{50, 2, 8, 8, 8};
    std::size_t K = 3;
    std::size_t draws = 100;
    std::size_t batch = 2;
    double step = 1e-5;
    double param_scale = 0.5;  // weights and biases uniform on [-scale, scale]
    // |analytic - numeric| / max(|analytic|, |numeric|, floor)
    double denominator_floor = 1e-5;
    std::uint64_t seed = 7;
};

struct GradcheckResult {
    Arch arch = Arch::linear;
    double max_relative_error = 0.0;
    std::size_t draws = 0;
    std::size_t entries_checked = 0;
};

inline BowVector random_bow(std::size_t dim, std::size_t max_tokens, Rng& rng) {
    std::vector<std::uint32_t> counts(dim, 0);
    const std::size_t n = 1 + static_cast<std::size_t>(rng.below(max_tokens));
    for (std::size_t i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(rng.below(dim))];
    BowVector b{dim, {}};
    for (std::size_t i = 0; i < dim; ++i)
        if (counts[i]) b.entries.push_back({static_cast<std::uint32_t>(i), counts[i]});
    return b;
}

// Loss evaluated through the forward pass only.
inline double td_loss(const QModel& model, std::span<const TdItem> batch) {
    double loss = 0.0;
    for (const auto& it : batch) {
        const double r = it.target - q_combined(model, it.state, it.subs);
        loss += 0.5 * r * r;
    }
    return loss;
}

// Compares td_gradients against central differences of td_loss on random
// (parameters, inputs, targets).
inline GradcheckResult gradcheck(Arch arch, const GradcheckOptions& opt = {}) {
    GradcheckResult res;
    res.arch = arch;
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(arch)));
    for (std::size_t d = 0; d < opt.draws; ++d) {
        QModel model(arch, opt.dims);
        for (auto& t : model.params())
            for (auto& v : t.data) v = rng.uniform(-opt.param_scale, opt.param_scale);
        std::vector<TdItem> batch(opt.batch);
        for (auto& it : batch) {
            it.state = random_bow(opt.dims.input_dim, 12, rng);
            for (std::size_t k = 0; k < opt.K; ++k) it.subs.push_back(random_bow(opt.dims.input_dim, 6, rng));
            it.target = rng.uniform(-2.0, 2.0);
        }
        const auto grads = td_gradients(model, batch);
        for (std::size_t ti = 0; ti < model.params().size(); ++ti) {
            auto& data = model.params()[ti].data;
            for (std::size_t j = 0; j < data.size(); ++j) {
                const double orig = data[j];
                data[j] = orig + opt.step;
                const double up = td_loss(model, batch);
                data[j] = orig - opt.step;
                const double down = td_loss(model, batch);
                data[j] = orig;
                const double numeric = (up - down) / (2.0 * opt.step);
                const double analytic = grads.tensors[ti].data[j];
                const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.denominator_floor});
                res.max_relative_error = std::max(res.max_relative_error, std::abs(analytic - numeric) / denom);
                ++res.entries_checked;
            }
        }
        ++res.draws;
    }
    return res;
}

}  // namespace threadrl
