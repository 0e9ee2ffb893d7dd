#include "tdid/check/selfcheck.hpp"

#include <cstdio>

#include "tdid/check/gradcheck.hpp"
#include "tdid/check/oracles.hpp"

namespace tdid::check {

namespace {

CheckReport from_grad(const std::string& name, const GradcheckStats& s, double tolerance) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu cases, max rel error %.3g at %s", s.cases, s.max_error, s.worst_case.c_str());
    return {name, s.cases > 0 && s.max_error < tolerance, buf};
}

CheckReport from_oracle(const std::string& name, const OracleStats& s) {
    std::string detail = std::to_string(s.cases) + " cases, " + std::to_string(s.mismatches) + " mismatches";
    if (!s.first_mismatch.empty()) detail += "; first " + s.first_mismatch;
    return {name, s.ok(), detail};
}

}  // namespace

std::vector<CheckReport> run_selfcheck(std::uint64_t seed, int cases) {
    return {
        from_grad("gradcheck.ops", gradcheck_ops(seed, std::max(1, cases / 20)), 1e-4),
        from_grad("gradcheck.end_to_end", gradcheck_end_to_end(seed, std::max(1, cases / 100)), 1e-3),
        from_oracle("oracle.iou", compare_iou(seed, cases)),
        from_oracle("oracle.nms", compare_nms(seed, cases)),
        from_oracle("oracle.assignment", compare_assignment(seed, cases)),
        from_oracle("oracle.matching", compare_matching(seed, cases)),
        from_oracle("oracle.ap", compare_ap(seed, cases)),
    };
}

}  // namespace tdid::check
