#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "nucprop/random.hpp"

namespace nucprop {

// Inputs of the noisy-logit classification loss. Logits are stored
// pixel-major with classes innermost; sigma is one noise scale per pixel.
struct LogitField {
    int classes = 2;
    std::vector<double> logits;
    std::vector<double> sigma;
    std::vector<int> target;
    int samples = 1;
    std::uint64_t seed = 0;

    std::size_t pixel_count() const noexcept { return target.size(); }

    void validate() const {
        if (classes < 2) throw std::invalid_argument("LogitField: need at least two classes");
        if (samples < 1) throw std::invalid_argument("LogitField: sample count T must be >= 1");
        const std::size_t n = target.size();
        if (logits.size() != n * static_cast<std::size_t>(classes) || sigma.size() != n) {
            throw std::invalid_argument("LogitField: logits/sigma/target lengths disagree");
        }
        for (double s : sigma) {
            if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("LogitField: sigma must be >= 0");
        }
        for (int c : target) {
            if (c < 0 || c >= classes) throw std::invalid_argument("LogitField: target class out of range");
        }
    }
};

enum class Reduction { Sum, Mean };

struct LossResult {
    double loss = 0.0;
    std::vector<double> grad_logits;
    std::vector<double> grad_sigma;
};

// Standard-normal noise used for pixel `pixel`: T x C values, derived from
// (seed, pixel) so results do not depend on evaluation order.
inline std::vector<double> loss_noise(std::uint64_t seed, std::size_t pixel, int samples, int classes) {
    Rng rng(derive_seed(seed, streams::loss, pixel));
    std::vector<double> eps(static_cast<std::size_t>(samples) * static_cast<std::size_t>(classes));
    for (double& e : eps) e = rng.normal();
    return eps;
}

// Per pixel: L = -log[(1/T) sum_t softmax(s + sigma * eps_t)[c']], summed
// (or averaged) over pixels, with analytic gradients through the same noise
// draws.
inline LossResult heteroscedastic_ce_loss(const LogitField& in, Reduction reduction = Reduction::Sum) {
    in.validate();
    const std::size_t n = in.pixel_count();
    const auto C = static_cast<std::size_t>(in.classes);
    const auto T = static_cast<std::size_t>(in.samples);
    LossResult out;
    out.grad_logits.assign(n * C, 0.0);
    out.grad_sigma.assign(n, 0.0);

    std::vector<double> noisy(C);
    std::vector<double> log_lik(T);
    std::vector<double> probs(T * C);
    for (std::size_t i = 0; i < n; ++i) {
        const auto eps = loss_noise(in.seed, i, in.samples, in.classes);
        const double* s = &in.logits[i * C];
        const double sig = in.sigma[i];
        const auto target = static_cast<std::size_t>(in.target[i]);
        for (std::size_t t = 0; t < T; ++t) {
            double mx = -INFINITY;
            for (std::size_t c = 0; c < C; ++c) {
                noisy[c] = s[c] + sig * eps[t * C + c];
                mx = std::max(mx, noisy[c]);
            }
            double z = 0.0;
            for (std::size_t c = 0; c < C; ++c) z += std::exp(noisy[c] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t c = 0; c < C; ++c) probs[t * C + c] = std::exp(noisy[c] - lse);
            log_lik[t] = noisy[target] - lse;
        }
        const double mt = *std::max_element(log_lik.begin(), log_lik.end());
        double zt = 0.0;
        for (double l : log_lik) zt += std::exp(l - mt);
        const double lse_t = mt + std::log(zt);
        out.loss += -(lse_t - std::log(static_cast<double>(T)));

        for (std::size_t t = 0; t < T; ++t) {
            const double r = std::exp(log_lik[t] - lse_t);
            for (std::size_t c = 0; c < C; ++c) {
                const double g = -r * ((c == target ? 1.0 : 0.0) - probs[t * C + c]);
                out.grad_logits[i * C + c] += g;
                out.grad_sigma[i] += g * eps[t * C + c];
            }
        }
    }
    if (reduction == Reduction::Mean && n > 0) {
        const double inv = 1.0 / static_cast<double>(n);
        out.loss *= inv;
        for (double& g : out.grad_logits) g *= inv;
        for (double& g : out.grad_sigma) g *= inv;
    }
    return out;
}

}  // namespace nucprop
