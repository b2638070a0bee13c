#include "dn/schedule.hpp"

#include <cmath>
#include <fstream>

namespace dn {

real NoiseSchedule::beta_at(std::int64_t t) const {
    check(t >= 1 && t <= t_max, "schedule: t out of range [1, t_max]");
    return beta[static_cast<std::size_t>(t)];
}

real NoiseSchedule::alpha_bar_at(std::int64_t t) const {
    check(t >= 0 && t <= t_max, "schedule: t out of range [0, t_max]");
    return alpha_bar[static_cast<std::size_t>(t)];
}

std::pair<real, real> NoiseSchedule::coefficients(std::int64_t t) const {
    const real ab = alpha_bar_at(t);
    return {std::sqrt(ab), std::sqrt(1.0 - ab)};
}

void NoiseSchedule::dump_csv(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "schedule: cannot write " + path);
    out << "t,beta,alpha,alpha_bar,sqrt_alpha_bar,sqrt_one_minus_alpha_bar\n";
    out.precision(10);
    for (std::int64_t t = 1; t <= t_max; ++t) {
        const auto [sa, sn] = coefficients(t);
        out << t << "," << beta[static_cast<std::size_t>(t)] << "," << alpha[static_cast<std::size_t>(t)] << ","
            << alpha_bar[static_cast<std::size_t>(t)] << "," << sa << "," << sn << "\n";
    }
}

NoiseSchedule build_cosine_schedule(std::int64_t t_max, real s, real beta_clip) {
    check(t_max >= 1, "schedule: t_max must be >= 1");
    check(s > 0, "schedule: offset s must be positive");
    check(beta_clip > 0 && beta_clip <= 1, "schedule: beta_clip must be in (0, 1]");

    NoiseSchedule sch;
    sch.t_max = t_max;
    sch.s = s;
    sch.beta.assign(static_cast<std::size_t>(t_max) + 1, 0.0);
    sch.alpha.assign(static_cast<std::size_t>(t_max) + 1, 0.0);
    sch.alpha_bar.assign(static_cast<std::size_t>(t_max) + 1, 0.0);

    auto f = [&](std::int64_t t) {
        const real x = ((static_cast<real>(t) / static_cast<real>(t_max)) + s) / (1.0 + s);
        const real c = std::cos(x * M_PI / 2.0);
        return c * c;
    };
    const real f0 = f(0);

    sch.alpha_bar[0] = 1.0;
    real prev_ab_raw = 1.0;
    for (std::int64_t t = 1; t <= t_max; ++t) {
        const real ab_raw = f(t) / f0;
        real beta_t = 1.0 - ab_raw / prev_ab_raw;
        beta_t = std::min(beta_t, beta_clip);
        prev_ab_raw = ab_raw;
        sch.beta[static_cast<std::size_t>(t)] = beta_t;
        sch.alpha[static_cast<std::size_t>(t)] = 1.0 - beta_t;
        sch.alpha_bar[static_cast<std::size_t>(t)] =
            sch.alpha_bar[static_cast<std::size_t>(t - 1)] * sch.alpha[static_cast<std::size_t>(t)];
    }
    return sch;
}

}  // namespace dn
