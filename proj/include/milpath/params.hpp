#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

struct NamedTensor {
    std::string name;
    Tensor tensor;

    friend bool operator==(const NamedTensor& a, const NamedTensor& b) {
        return a.name == b.name && a.tensor == b.tensor;
    }
};

// Insertion-ordered named parameters. Order is the serialization order.
class ParamStore {
public:
    Tensor& add(std::string name, Tensor t) {
        if (find(name)) throw Error("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        entries_.push_back({std::move(name), std::move(t)});
        return entries_.back().tensor;
    }

    Tensor& at(const std::string& name) {
        if (auto* t = find(name)) return *t;
        throw Error("unknown parameter: " + name);
    }
    const Tensor& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

    Tensor* find(const std::string& name) {
        auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
        return it == entries_.end() ? nullptr : &it->tensor;
    }

    std::vector<NamedTensor>& entries() { return entries_; }
    const std::vector<NamedTensor>& entries() const { return entries_; }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        for (auto& e : entries_) out.push_back(&e.tensor);
        return out;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    // Replaces values from a loaded list; names and shapes must match exactly.
    void assign(const std::vector<NamedTensor>& loaded) {
        if (loaded.size() != entries_.size()) {
            throw FormatError("checkpoint holds " + std::to_string(loaded.size()) + " parameters, model expects " +
                              std::to_string(entries_.size()));
        }
        for (std::size_t i = 0; i < loaded.size(); ++i) {
            auto& e = entries_[i];
            if (loaded[i].name != e.name || loaded[i].tensor.shape() != e.tensor.shape()) {
                throw FormatError("checkpoint parameter " + loaded[i].name + shape_str(loaded[i].tensor.shape()) +
                                  " does not match model parameter " + e.name + shape_str(e.tensor.shape()));
            }
            if (!loaded[i].tensor.all_finite()) throw NumericError("non-finite value in parameter " + e.name);
            std::copy(loaded[i].tensor.values().begin(), loaded[i].tensor.values().end(), e.tensor.values().begin());
        }
    }

private:
    std::vector<NamedTensor> entries_;
};

}  // namespace milpath
