#include "gridloc/numkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "gridloc/errors.hpp"

namespace gridloc::numkit {

double max_rel_grad_error(const std::vector<ParamT<double>*>& params,
                          const std::function<double(bool)>& eval, double eps) {
    if (eps <= 0.0) throw ValidationError("gradient check: eps must be positive");
    for (ParamT<double>* p : params) p->zero_grad();
    eval(true);
    double worst = 0.0;
    for (ParamT<double>* p : params) {
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const double keep = p->value[i];
            p->value[i] = keep + eps;
            const double lp = eval(false);
            p->value[i] = keep - eps;
            const double lm = eval(false);
            p->value[i] = keep;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double analytic = p->grad[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

} // namespace gridloc::numkit
