#include "gridloc/numkit/sgd.hpp"

#include "gridloc/errors.hpp"

namespace gridloc::numkit {

template <typename S>
void sgd_step(const std::vector<ParamT<S>*>& params, SgdStateT<S>& state) {
    for (ParamT<S>* p : params) {
        if (!p->has_grad())
            throw ValidationError("missing gradient for parameter '" + p->name + "'");
        if (!p->grad.same_shape(p->value))
            throw ValidationError("gradient shape mismatch for parameter '" + p->name + "'");
        auto it = state.velocity.find(p->name);
        if (it == state.velocity.end())
            it = state.velocity.emplace(p->name, TensorT<S>::zeros(p->value.shape)).first;
        TensorT<S>& v = it->second;
        if (!v.same_shape(p->value))
            throw ValidationError("velocity shape mismatch for parameter '" + p->name + "'");
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const double vi = state.momentum * static_cast<double>(v[i]) +
                              static_cast<double>(p->grad[i]) +
                              state.weight_decay * static_cast<double>(p->value[i]);
            v[i] = static_cast<S>(vi);
            p->value[i] = static_cast<S>(static_cast<double>(p->value[i]) - state.lr * vi);
        }
        if (!p->value.all_finite())
            throw NumericError("non-finite value in parameter '" + p->name + "' after update");
        p->zero_grad();
    }
}

template void sgd_step<float>(const std::vector<ParamT<float>*>&, SgdStateT<float>&);
template void sgd_step<double>(const std::vector<ParamT<double>*>&, SgdStateT<double>&);

} // namespace gridloc::numkit
