#pragma once

#include <map>
#include <string>
#include <vector>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/tape.hpp"

namespace gridloc::numkit {

// Owns named parameters for a model. std::map keeps references stable across
// inserts and iterates in name order, so checkpoint writes and optimizer
// traversal are deterministic.
template <typename S>
class ParamStoreT {
  public:
    ParamT<S>& create(const std::string& name, TensorT<S> value) {
        auto [it, inserted] = params_.try_emplace(name, ParamT<S>(name, std::move(value)));
        if (!inserted) throw ValidationError("duplicate parameter '" + name + "'");
        return it->second;
    }

    ParamT<S>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<ParamT<S>*> all() {
        std::vector<ParamT<S>*> out;
        out.reserve(params_.size());
        for (auto& [name, p] : params_) out.push_back(&p);
        return out;
    }

    std::map<std::string, TensorT<S>> snapshot() const {
        std::map<std::string, TensorT<S>> out;
        for (const auto& [name, p] : params_) out.emplace(name, p.value);
        return out;
    }

    // Overwrite existing parameter values (e.g. from a checkpoint); names and
    // shapes must match the store exactly.
    void load(const std::map<std::string, TensorT<S>>& values) {
        if (values.size() != params_.size())
            throw ValidationError("checkpoint has " + std::to_string(values.size()) +
                                  " tensors, model has " + std::to_string(params_.size()));
        for (auto& [name, p] : params_) {
            auto it = values.find(name);
            if (it == values.end()) throw ValidationError("checkpoint is missing '" + name + "'");
            if (!p.value.same_shape(it->second))
                throw ValidationError("shape mismatch for '" + name + "': model " +
                                      p.value.shape_str() + " vs checkpoint " +
                                      it->second.shape_str());
            p.value = it->second;
        }
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [name, p] : params_) n += p.value.numel();
        return n;
    }

    std::size_t size() const { return params_.size(); }

  private:
    std::map<std::string, ParamT<S>> params_;
};

using ParamStore = ParamStoreT<float>;
using ParamStore64 = ParamStoreT<double>;

} // namespace gridloc::numkit
