// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace freeinsert {

/// Cumulative signal coefficients alpha_bar[0..T] on the sampling grid.
///
/// Index 0 is the clean latent (alpha_bar == 1 exactly), index T the most
/// noisy one. `model_timesteps` maps each grid index onto the timestep a
/// trained denoiser expects (e.g. 0..999); it is informational for toy
/// backends.
class NoiseSchedule {
public:
    /// Validates: T >= 1, |alpha_bar[0] - 1| <= 1e-6, strictly decreasing,
    /// every value in (0, 1]. alpha_bar[0] is snapped to exactly 1.
    explicit NoiseSchedule(std::vector<double> alpha_bar, std::vector<int> model_timesteps = {});

    /// T-step uniform-stride subsample of the 1000-step scaled-linear schedule
    /// (beta from 0.00085 to 0.012), trailing spacing so alpha_bar[T] is the
    /// last training step.
    static NoiseSchedule scaled_linear(int num_steps = 50, int train_steps = 1000,
                                       double beta_start = 0.00085, double beta_end = 0.012);

    static NoiseSchedule from_json(const nlohmann::json& j);
    static NoiseSchedule load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    int num_steps() const noexcept { return static_cast<int>(m_alpha_bar.size()) - 1; }
    double alpha_bar(int t) const;
    int model_timestep(int t) const;
    const std::vector<double>& alpha_bars() const noexcept { return m_alpha_bar; }

private:
    std::vector<double> m_alpha_bar;
    std::vector<int> m_model_timesteps;
};

}  // namespace freeinsert
