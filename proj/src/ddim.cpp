// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/ddim.hpp"

#include <algorithm>
#include <cmath>

#include "freeinsert/errors.hpp"

namespace freeinsert {

namespace {

// Predicted-x0 reparameterisation shared by sampling and inversion.
LatentGrid transfer(const LatentGrid& z, const LatentGrid& eps, int from, int to, const NoiseSchedule& schedule) {
    z.require_compatible(eps, "ddim");
    const double a_from = schedule.alpha_bar(from);
    const double a_to = schedule.alpha_bar(to);
    if (!(a_from > 0.0)) {
        throw RangeError("ddim: alpha_bar is zero at t=" + std::to_string(from));
    }
    const double sqrt_from = std::sqrt(a_from);
    const double noise_from = std::sqrt(1.0 - a_from);
    const double sqrt_to = std::sqrt(a_to);
    const double noise_to = std::sqrt(1.0 - a_to);

    LatentGrid out(z.shape(), z.space());
    auto zv = z.values();
    auto ev = eps.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < zv.size(); ++i) {
        const double x0 = (static_cast<double>(zv[i]) - noise_from * ev[i]) / sqrt_from;
        ov[i] = static_cast<float>(sqrt_to * x0 + noise_to * ev[i]);
    }
    return out;
}

Prediction predict_at(DenoiserBackend& backend, const LatentGrid& z, const NoiseSchedule& schedule, int t,
                      const ConditioningSet& cond, const char* phase) {
    try {
        return backend.predict(z, StepInfo::at(schedule, t), cond, nullptr);
    } catch (const ContractError&) {
        throw;
    } catch (const std::exception& e) {
        throw BackendError(std::string(phase) + " failed at t=" + std::to_string(t) + ": " + e.what());
    }
}

}  // namespace

LatentGrid add_noise(const LatentGrid& z0, int t, const LatentGrid& eps, const NoiseSchedule& schedule) {
    z0.require_compatible(eps, "add_noise");
    const double a = schedule.alpha_bar(t);
    const double signal = std::sqrt(a);
    const double noise = std::sqrt(1.0 - a);
    LatentGrid out(z0.shape(), z0.space());
    auto zv = z0.values();
    auto ev = eps.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < zv.size(); ++i) {
        ov[i] = static_cast<float>(signal * zv[i] + noise * ev[i]);
    }
    return out;
}

LatentGrid ddim_step(const LatentGrid& z_t, const LatentGrid& eps_pred, int t, int t_prev,
                     const NoiseSchedule& schedule) {
    if (!(t_prev < t)) {
        throw RangeError("ddim_step: t_prev must be below t");
    }
    return transfer(z_t, eps_pred, t, t_prev, schedule);
}

LatentGrid ddim_inverse_step(const LatentGrid& z_t, const LatentGrid& eps_pred, int t, int t_next,
                             const NoiseSchedule& schedule) {
    if (!(t_next > t)) {
        throw RangeError("ddim_inverse_step: t_next must be above t");
    }
    return transfer(z_t, eps_pred, t, t_next, schedule);
}

Trajectory::Trajectory(std::vector<LatentGrid> latents, std::string conditioning_fingerprint)
    : m_latents(std::move(latents)), m_fingerprint(std::move(conditioning_fingerprint)) {
    if (m_latents.size() < 2) {
        throw ContractError("trajectory needs at least two latents");
    }
    for (const auto& z : m_latents) {
        m_latents.front().require_compatible(z, "trajectory");
    }
}

const LatentGrid& Trajectory::at(int t) const {
    if (t < 0 || t > num_steps()) {
        throw RangeError("trajectory index " + std::to_string(t) + " out of range");
    }
    return m_latents[static_cast<std::size_t>(t)];
}

Trajectory ddim_invert(const LatentGrid& z0, DenoiserBackend& backend, const ConditioningSet& cond,
                       const NoiseSchedule& schedule, const InversionOptions& options) {
    cond.validate();
    const int T = schedule.num_steps();
    std::vector<LatentGrid> latents;
    latents.reserve(static_cast<std::size_t>(T) + 1);
    latents.push_back(z0);
    for (int t = 0; t < T; ++t) {
        const LatentGrid& z_t = latents.back();
        auto pred = predict_at(backend, z_t, schedule, t, cond, "inversion");
        LatentGrid next = ddim_inverse_step(z_t, pred.eps, t, t + 1, schedule);
        for (int k = 0; k < options.fixed_point_iters; ++k) {
            auto refined = predict_at(backend, next, schedule, t + 1, cond, "inversion");
            LatentGrid candidate = ddim_inverse_step(z_t, refined.eps, t, t + 1, schedule);
            const float moved = max_abs_diff(candidate, next);
            next = std::move(candidate);
            if (moved <= options.tolerance) {
                break;
            }
        }
        if (!next.all_finite()) {
            throw BackendError("inversion diverged at t=" + std::to_string(t + 1));
        }
        latents.push_back(std::move(next));
    }
    return Trajectory(std::move(latents), cond.fingerprint());
}

LatentGrid ddim_sample(const LatentGrid& z, DenoiserBackend& backend, const ConditioningSet& cond,
                       const NoiseSchedule& schedule, int from_t, int to_t) {
    cond.validate();
    if (from_t < to_t) {
        throw RangeError("ddim_sample: from_t must not be below to_t");
    }
    LatentGrid current = z;
    for (int t = from_t; t > to_t; --t) {
        auto pred = predict_at(backend, current, schedule, t, cond, "sampling");
        current = ddim_step(current, pred.eps, t, t - 1, schedule);
    }
    return current;
}

}  // namespace freeinsert
