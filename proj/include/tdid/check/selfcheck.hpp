#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tdid::check {

struct CheckReport {
    std::string name;
    bool passed = false;
    std::string detail;
};

// Gradient checks plus the NMS, IoU, assignment, matching and AP oracles.
std::vector<CheckReport> run_selfcheck(std::uint64_t seed = 0, int cases = 200);

}  // namespace tdid::check
