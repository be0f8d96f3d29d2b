#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mwa/tensor.hpp"

namespace mwa {

/// Named learnable tensor. frozen == true excludes it from optimizer updates
/// and from the trainable count; the tensor's requires_grad flag tracks it.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool frozen = false;

    Parameter(std::string n, Tensor<T> t) : name(std::move(n)), tensor(std::move(t)) {
        tensor.set_requires_grad(true);
    }

    void set_frozen(bool f) {
        frozen = f;
        tensor.set_requires_grad(!f);
    }
};

/// Owns a model's parameters in registration order. Names are unique;
/// ordering is what makes optimizer traversal deterministic.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(std::string name, Tensor<T> tensor) {
        if (index_.count(name))
            throw std::invalid_argument("duplicate parameter name: " + name);
        params_.push_back(std::make_unique<Parameter<T>>(name, std::move(tensor)));
        index_[params_.back()->name] = params_.size() - 1;
        return *params_.back();
    }

    size_t size() const { return params_.size(); }
    Parameter<T>& at(size_t i) { return *params_[i]; }
    const Parameter<T>& at(size_t i) const { return *params_[i]; }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const Parameter<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> v;
        v.reserve(params_.size());
        for (auto& p : params_) v.push_back(p.get());
        return v;
    }

    std::vector<Parameter<T>*> trainable() {
        std::vector<Parameter<T>*> v;
        for (auto& p : params_)
            if (!p->frozen) v.push_back(p.get());
        return v;
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p->tensor.numel();
        return n;
    }

    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_)
            if (!p->frozen) n += p->tensor.numel();
        return n;
    }

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
    for (auto* p : params) p->tensor.clear_grad();
}

/// Runs reverse-mode accumulation from a scalar loss and returns the
/// gradient of every listed trainable parameter (zeros when the loss never
/// touched it). Frozen parameters are omitted.
template <typename T>
std::map<std::string, Tensor<T>> backward(GradTape<T>& tape, const Tensor<T>& loss,
                                          const std::vector<Parameter<T>*>& params) {
    tape.backward(loss);
    std::map<std::string, Tensor<T>> grads;
    for (auto* p : params) {
        if (p->frozen) continue;
        grads.emplace(p->name, p->tensor.grad_tensor());
    }
    return grads;
}

}  // namespace mwa
