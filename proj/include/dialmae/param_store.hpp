#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dialmae {

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;  // element offset into the flat buffer
    size_t size = 0;    // element count
};

// A set of named tensors backed by one flat double buffer. The flat layout is
// the canonical order for checkpoints, optimizer state and gradient buffers.
class ParamStore {
public:
    void add(const std::string& name, std::vector<int> shape) {
        if (index_.count(name)) throw std::invalid_argument("duplicate tensor name: " + name);
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("non-positive dim in tensor " + name);
            n *= static_cast<size_t>(d);
        }
        TensorSpec spec{name, std::move(shape), data_.size(), n};
        index_[name] = specs_.size();
        specs_.push_back(std::move(spec));
        data_.resize(data_.size() + n, 0.0);
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const TensorSpec& spec(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown tensor: " + name);
        return specs_[it->second];
    }

    std::span<double> tensor(const std::string& name) {
        const TensorSpec& s = spec(name);
        return {data_.data() + s.offset, s.size};
    }
    std::span<const double> tensor(const std::string& name) const {
        const TensorSpec& s = spec(name);
        return {data_.data() + s.offset, s.size};
    }

    const std::vector<TensorSpec>& specs() const { return specs_; }
    std::vector<double>& flat() { return data_; }
    const std::vector<double>& flat() const { return data_; }
    size_t total_size() const { return data_.size(); }

    // Same tensor layout, all values zero. Used for gradients and moments.
    ParamStore zeros_like() const {
        ParamStore out;
        out.specs_ = specs_;
        out.index_ = index_;
        out.data_.assign(data_.size(), 0.0);
        return out;
    }

private:
    std::vector<TensorSpec> specs_;
    std::unordered_map<std::string, size_t> index_;
    std::vector<double> data_;
};

}  // namespace dialmae
