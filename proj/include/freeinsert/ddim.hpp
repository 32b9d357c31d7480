// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "freeinsert/backend.hpp"
#include "freeinsert/latent.hpp"
#include "freeinsert/schedule.hpp"

namespace freeinsert {

/// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.
LatentGrid add_noise(const LatentGrid& z0, int t, const LatentGrid& eps, const NoiseSchedule& schedule);

/// Deterministic DDIM update from grid index t down to t_prev < t.
LatentGrid ddim_step(const LatentGrid& z_t, const LatentGrid& eps_pred, int t, int t_prev,
                     const NoiseSchedule& schedule);

/// The same update run upward (t_next > t); one step of DDIM inversion.
LatentGrid ddim_inverse_step(const LatentGrid& z_t, const LatentGrid& eps_pred, int t, int t_next,
                             const NoiseSchedule& schedule);

/// z_0 .. z_T produced by DDIM inversion, plus the fingerprint of the
/// conditioning it was produced with. Immutable.
class Trajectory {
public:
    Trajectory(std::vector<LatentGrid> latents, std::string conditioning_fingerprint);

    int num_steps() const noexcept { return static_cast<int>(m_latents.size()) - 1; }
    const LatentGrid& at(int t) const;
    const LatentGrid& terminal() const { return m_latents.back(); }
    const std::vector<LatentGrid>& latents() const noexcept { return m_latents; }
    const std::string& conditioning_fingerprint() const noexcept { return m_fingerprint; }

private:
    std::vector<LatentGrid> m_latents;
    std::string m_fingerprint;
};

struct InversionOptions {
    /// Extra fixed-point passes per step: z_{t+1} is re-solved with the noise
    /// predicted at z_{t+1} itself, so a sampling step from z_{t+1} lands back
    /// on z_t. Zero gives the plain "predict at z_t" inversion.
    int fixed_point_iters = 30;
    /// Stop refining once a pass moves z_{t+1} by at most this (max-abs).
    float tolerance = 1e-7f;
};

/// latents[0] = z0; latents[t+1] is the inverse DDIM step from latents[t].
/// Backend failures are rethrown as BackendError naming the timestep.
Trajectory ddim_invert(const LatentGrid& z0, DenoiserBackend& backend, const ConditioningSet& cond,
                       const NoiseSchedule& schedule, const InversionOptions& options = {});

/// Plain DDIM sampling from grid index `from_t` down to `to_t`.
LatentGrid ddim_sample(const LatentGrid& z, DenoiserBackend& backend, const ConditioningSet& cond,
                       const NoiseSchedule& schedule, int from_t, int to_t = 0);

}  // namespace freeinsert
