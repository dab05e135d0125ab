// DDPM schedule tables, forward noising, and the masked known/unknown
// reverse-step combination used for region-preserving sampling.
#pragma once

#include <functional>

#include "sagiri/tensor.hpp"

namespace sagiri {

// Tables are 1-indexed by timestep; alpha_bar[0] = 1 by convention.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;           // [T+1], beta[0] unused
    std::vector<double> alpha;          // [T+1], 1 - beta
    std::vector<double> alpha_bar;      // [T+1], cumulative product, alpha_bar[0] = 1
    std::vector<double> posterior_var;  // [T+1], beta_t * (1-abar_{t-1}) / (1-abar_t)
    std::vector<int> timesteps;         // original timestep ids (identity for a full schedule)
};

enum class MaskConvention { paper_literal, shifted };

inline NoiseSchedule build_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(T) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    s.posterior_var.assign(static_cast<size_t>(T) + 1, 0.0);
    s.timesteps.resize(static_cast<size_t>(T) + 1);
    for (int t = 1; t <= T; ++t) {
        s.beta[static_cast<size_t>(t)] =
            T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.alpha[static_cast<size_t>(t)] = 1.0 - s.beta[static_cast<size_t>(t)];
        s.alpha_bar[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t - 1)] * s.alpha[static_cast<size_t>(t)];
        s.posterior_var[static_cast<size_t>(t)] =
            s.beta[static_cast<size_t>(t)] * (1.0 - s.alpha_bar[static_cast<size_t>(t - 1)]) /
            (1.0 - s.alpha_bar[static_cast<size_t>(t)]);
        s.timesteps[static_cast<size_t>(t)] = t;
    }
    return s;
}

// Evenly strided subsequence of length n ending at t = 1. alpha_bar entries
// are copied from the source schedule bitwise, so the retabulated cumulative
// products match the originals at the selected timesteps exactly; alpha/beta
// are re-derived from the copied alpha_bar ratios.
inline NoiseSchedule subsequence_schedule(const NoiseSchedule& src, int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("subsequence needs n_steps >= 1");
    if (n_steps > src.T) throw std::invalid_argument("subsequence longer than the schedule");
    NoiseSchedule s;
    s.T = n_steps;
    s.beta.assign(static_cast<size_t>(n_steps) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(n_steps) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(n_steps) + 1, 1.0);
    s.posterior_var.assign(static_cast<size_t>(n_steps) + 1, 0.0);
    s.timesteps.assign(static_cast<size_t>(n_steps) + 1, 0);
    for (int k = 1; k <= n_steps; ++k) {
        int tau = n_steps == 1
                      ? 1
                      : 1 + static_cast<int>(std::lround(static_cast<double>(k - 1) *
                                                         (src.T - 1) / (n_steps - 1)));
        s.timesteps[static_cast<size_t>(k)] = tau;
        s.alpha_bar[static_cast<size_t>(k)] = src.alpha_bar[static_cast<size_t>(tau)];
        s.alpha[static_cast<size_t>(k)] =
            s.alpha_bar[static_cast<size_t>(k)] / s.alpha_bar[static_cast<size_t>(k - 1)];
        s.beta[static_cast<size_t>(k)] = 1.0 - s.alpha[static_cast<size_t>(k)];
        s.posterior_var[static_cast<size_t>(k)] =
            s.beta[static_cast<size_t>(k)] * (1.0 - s.alpha_bar[static_cast<size_t>(k - 1)]) /
            (1.0 - s.alpha_bar[static_cast<size_t>(k)]);
    }
    return s;
}

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t = 0 returns x0 exactly
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T) throw std::out_of_range("q_sample: t outside [0,T]");
    if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    float a = static_cast<float>(std::sqrt(ab));
    float b = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor out = x0;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

struct SamplerState {
    Tensor x;
    int t = 0;
    Rng rng;
};

struct DenoiserOutput {
    Tensor eps_hat;
};

// One reverse step of the masked combination:
//   known cells  <- forward-noised x0 at t (paper_literal) or t-1 (shifted)
//   unknown cells <- posterior mean + posterior noise (none at t = 1)
// mask entries are binary; 1 selects the known branch.
inline SamplerState masked_reverse_step(SamplerState state, const Tensor& x0_latent,
                                        const Tensor& latent_mask, const DenoiserOutput& out,
                                        const NoiseSchedule& sched,
                                        MaskConvention convention = MaskConvention::shifted) {
    int t = state.t;
    if (t < 1 || t > sched.T) throw std::out_of_range("masked_reverse_step: t outside [1,T]");
    if (!state.x.same_shape(x0_latent) || !state.x.same_shape(out.eps_hat))
        throw std::invalid_argument("masked_reverse_step: shape mismatch");
    if (!state.x.same_shape(latent_mask))
        throw std::invalid_argument("masked_reverse_step: latent mask missing or mis-shaped");

    Tensor noise_known(state.x.shape);
    state.rng.fill_normal(noise_known);
    int t_known = convention == MaskConvention::shifted ? t - 1 : t;
    Tensor known = q_sample(x0_latent, t_known, noise_known, sched);

    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    float inv_sqrt_alpha = static_cast<float>(1.0 / std::sqrt(sched.alpha[static_cast<size_t>(t)]));
    float eps_coeff = static_cast<float>(sched.beta[static_cast<size_t>(t)] / std::sqrt(1.0 - ab));
    float sigma = t > 1 ? static_cast<float>(std::sqrt(sched.posterior_var[static_cast<size_t>(t)]))
                        : 0.0f;
    Tensor unknown(state.x.shape);
    if (sigma > 0) {
        state.rng.fill_normal(unknown);
        for (int64_t i = 0; i < unknown.numel(); ++i)
            unknown.data[i] = inv_sqrt_alpha * (state.x.data[i] - eps_coeff * out.eps_hat.data[i]) +
                              sigma * unknown.data[i];
    } else {
        for (int64_t i = 0; i < unknown.numel(); ++i)
            unknown.data[i] = inv_sqrt_alpha * (state.x.data[i] - eps_coeff * out.eps_hat.data[i]);
    }

    for (int64_t i = 0; i < state.x.numel(); ++i)
        state.x.data[i] = latent_mask.data[i] > 0.5f ? known.data[i] : unknown.data[i];
    state.t = t - 1;
    return state;
}

// denoiser(x_t, original_timestep) -> predicted noise
using DenoiserFn = std::function<Tensor(const Tensor&, int)>;
// observer(sub_schedule_t_after_step, state_x)
using SampleObserver = std::function<void(int, const Tensor&)>;

// Full reverse pass over an n_steps subsequence, masked at every step.
// Deterministic in seed. The initial state is also mask-combined so known
// cells carry the forward-noised marginal from the very start.
inline Tensor sample_loop(const DenoiserFn& denoiser, const Tensor& x0_latent, const Tensor& mask,
                          const NoiseSchedule& sched, int n_steps, uint64_t seed,
                          MaskConvention convention = MaskConvention::shifted,
                          const SampleObserver& observer = nullptr) {
    NoiseSchedule sub = subsequence_schedule(sched, n_steps);
    SamplerState state;
    state.rng = Rng(seed);
    state.t = sub.T;
    state.x = Tensor(x0_latent.shape);
    state.rng.fill_normal(state.x);
    {
        Tensor noise(x0_latent.shape);
        state.rng.fill_normal(noise);
        Tensor known = q_sample(x0_latent, sub.T, noise, sub);
        for (int64_t i = 0; i < state.x.numel(); ++i)
            if (mask.data[i] > 0.5f) state.x.data[i] = known.data[i];
    }
    if (observer) observer(state.t, state.x);
    while (state.t >= 1) {
        DenoiserOutput out{denoiser(state.x, sub.timesteps[static_cast<size_t>(state.t)])};
        state = masked_reverse_step(state, x0_latent, mask, out, sub, convention);
        if (observer) observer(state.t, state.x);
    }
    return state.x;
}

}  // namespace sagiri
