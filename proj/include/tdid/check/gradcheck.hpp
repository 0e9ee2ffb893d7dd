#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tdid/tensor.hpp"

namespace tdid::check {

using ScalarFn = std::function<Tensord(const std::vector<Tensord>&)>;

// Max over input elements of |analytic - numeric| / max(|analytic|, |numeric|, floor),
// numeric by central differences with step h.
double gradient_error(const ScalarFn& fn, std::vector<Tensord> inputs, double h = 1e-5, double floor = 1e-3);

struct GradcheckStats {
    std::size_t cases = 0;
    double max_error = 0;
    std::string worst_case;

    void record(const std::string& name, double err);
};

// Randomized cases for every differentiable op, cases_per_op each.
GradcheckStats gradcheck_ops(std::uint64_t seed, int cases_per_op);

// Loss of a tiny double-precision model (N=8, 16x16 scenes) w.r.t. all of its
// parameters, central differences with step 1e-7.
GradcheckStats gradcheck_end_to_end(std::uint64_t seed, int cases);

}  // namespace tdid::check
