#include "statex/grad_check.hpp"

#include "statex/error.hpp"

#include <algorithm>
#include <cmath>

namespace statex {

double grad_check(const Objective & f, const Tensor & x, double eps) {
    if (!(eps > 0.0 && eps <= 1e-2)) {
        throw ConfigError("grad_check: eps must be in (0, 1e-2]");
    }
    Tensor analytic(x.shape());
    double f0 = f(x, &analytic);
    if (!std::isfinite(f0)) {
        throw NumericError("non-finite objective");
    }
    Tensor probe = x;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + eps;
        double fp = f(probe, nullptr);
        probe[i] = x[i] - eps;
        double fm = f(probe, nullptr);
        probe[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("non-finite objective");
        }
        double central = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - central) / denom);
    }
    return worst;
}

} // namespace statex
