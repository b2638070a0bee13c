#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dn/common.hpp"

namespace dn {

// Precomputed forward-process coefficients. alpha_bar carries index 0 with
// alpha_bar[0] = 1 so the reverse update at t=1 is well-defined.
struct NoiseSchedule {
    std::int64_t t_max = 0;
    real s = 0;
    std::vector<real> beta;       // beta[t], t in [1, t_max]; beta[0] unused
    std::vector<real> alpha;      // alpha[t] = 1 - beta[t]
    std::vector<real> alpha_bar;  // alpha_bar[t], t in [0, t_max]

    real beta_at(std::int64_t t) const;
    real alpha_bar_at(std::int64_t t) const;
    // (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)); valid for t in [0, t_max]
    std::pair<real, real> coefficients(std::int64_t t) const;

    void dump_csv(const std::string& path) const;
};

// Cosine schedule: f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), alpha_bar_t =
// f(t)/f(0), beta_t = 1 - alpha_bar_t/alpha_bar_{t-1} clipped to beta_clip,
// then alpha_bar rebuilt as the running product of the clipped alphas.
NoiseSchedule build_cosine_schedule(std::int64_t t_max, real s, real beta_clip = 0.999);

}  // namespace dn
