// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/schedule.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "freeinsert/errors.hpp"

namespace freeinsert {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar, std::vector<int> model_timesteps)
    : m_alpha_bar(std::move(alpha_bar)), m_model_timesteps(std::move(model_timesteps)) {
    if (m_alpha_bar.size() < 2) {
        throw ConfigError("noise schedule needs at least one step (T >= 1)");
    }
    if (std::abs(m_alpha_bar[0] - 1.0) > 1e-6) {
        throw ConfigError("noise schedule: alpha_bar[0] must be 1, got " + std::to_string(m_alpha_bar[0]));
    }
    m_alpha_bar[0] = 1.0;
    for (std::size_t t = 1; t < m_alpha_bar.size(); ++t) {
        const double a = m_alpha_bar[t];
        if (!(a > 0.0 && a <= 1.0)) {
            throw ConfigError("noise schedule: alpha_bar[" + std::to_string(t) + "] outside (0, 1]");
        }
        if (!(a < m_alpha_bar[t - 1])) {
            throw ConfigError("noise schedule: alpha_bar not strictly decreasing at t=" + std::to_string(t));
        }
    }
    if (m_model_timesteps.empty()) {
        m_model_timesteps.resize(m_alpha_bar.size());
        for (std::size_t t = 0; t < m_model_timesteps.size(); ++t) {
            m_model_timesteps[t] = static_cast<int>(t);
        }
    } else if (m_model_timesteps.size() != m_alpha_bar.size()) {
        throw ConfigError("noise schedule: model_timesteps must have T+1 entries");
    }
}

NoiseSchedule NoiseSchedule::scaled_linear(int num_steps, int train_steps, double beta_start, double beta_end) {
    if (num_steps < 1 || train_steps < num_steps) {
        throw ConfigError("scaled_linear: need 1 <= num_steps <= train_steps");
    }
    std::vector<double> cumulative(static_cast<std::size_t>(train_steps));
    const double lo = std::sqrt(beta_start);
    const double hi = std::sqrt(beta_end);
    double running = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double s = train_steps == 1 ? lo : lo + (hi - lo) * i / (train_steps - 1);
        running *= 1.0 - s * s;
        cumulative[static_cast<std::size_t>(i)] = running;
    }

    const int stride = train_steps / num_steps;
    std::vector<double> alpha_bar{1.0};
    std::vector<int> timesteps{0};
    for (int t = 1; t <= num_steps; ++t) {
        const int train_t = t * stride - 1;
        alpha_bar.push_back(cumulative[static_cast<std::size_t>(train_t)]);
        timesteps.push_back(train_t);
    }
    return NoiseSchedule(std::move(alpha_bar), std::move(timesteps));
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    if (!j.contains("num_steps") || !j.contains("alpha_bar")) {
        throw ConfigError("schedule config requires \"num_steps\" and \"alpha_bar\"");
    }
    const int num_steps = j.at("num_steps").get<int>();
    auto alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
    if (static_cast<int>(alpha_bar.size()) != num_steps + 1) {
        throw ConfigError("schedule config: alpha_bar must hold num_steps + 1 values");
    }
    std::vector<int> timesteps;
    if (j.contains("model_timesteps")) {
        timesteps = j.at("model_timesteps").get<std::vector<int>>();
    }
    return NoiseSchedule(std::move(alpha_bar), std::move(timesteps));
}

NoiseSchedule NoiseSchedule::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open schedule file " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("schedule file " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

nlohmann::json NoiseSchedule::to_json() const {
    return {{"num_steps", num_steps()}, {"alpha_bar", m_alpha_bar}, {"model_timesteps", m_model_timesteps}};
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > num_steps()) {
        throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps()) + "]");
    }
    return m_alpha_bar[static_cast<std::size_t>(t)];
}

int NoiseSchedule::model_timestep(int t) const {
    alpha_bar(t);
    return m_model_timesteps[static_cast<std::size_t>(t)];
}

}  // namespace freeinsert
