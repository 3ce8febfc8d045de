#pragma once

#include <string>

#include "normlab/ops.hpp"

namespace normlab {

// Constant noise injected after the normalized step of every BN/IEBN site:
//   xhat <- xhat * n_a + n_b
// n_a = 0 would erase the signal entirely and is rejected.
struct ConstantNoiseSpec {
    double n_a = 1.0;
    double n_b = 0.0;
    bool apply_in_eval = false;  // default: attack during training only

    void validate() const {
        if (n_a == 0.0) throw ConfigError("constant noise n_a must be nonzero");
    }
};

template <typename T>
Tensor<T> inject_constant_noise(const Tensor<T>& normalized, const ConstantNoiseSpec& spec) {
    spec.validate();
    return add_scalar(mul_scalar(normalized, static_cast<T>(spec.n_a)), static_cast<T>(spec.n_b));
}

// Mix-dataset attack: each training batch holds `primary_batch` in-distribution
// images plus 120*k out-of-distribution ones that participate in batch
// statistics but not in the loss.
struct MixDatasetSpec {
    std::string contaminant = "mnist";  // mnist | fashion_mnist
    int k = 2;
    int primary_batch = 100;
    int contaminant_batch() const { return 120 * k; }

    void validate() const {
        if (k < 0) throw ConfigError("mix attack k must be >= 0");
        if (primary_batch <= 0) throw ConfigError("mix attack primary batch must be positive");
    }
};

}  // namespace normlab
