#pragma once

// Central-difference gradient checking for scalar-valued tape graphs.
// The builder must be a pure deterministic function of its parameters; it is
// re-invoked for every probe. Callers are responsible for probing at points
// where selection ops (top-k, min) are not within finite-difference reach of
// a tie.

#include <string>
#include <vector>

#include "protomargin/rng.hpp"
#include "protomargin/tape.hpp"

namespace protomargin {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::string worst_location;
};

/// build: (Tape&, const std::vector<Var>&) -> scalar Var.
/// max_coords_per_param == 0 checks every coordinate; otherwise that many
/// coordinates are sampled per parameter (deterministically from `seed`).
/// rel_floor bounds the denominator of the relative error so that
/// finite-difference roundoff at near-zero gradients does not register as
/// disagreement.
template <typename Builder>
GradCheckReport grad_check(const std::vector<Tensor>& params, Builder&& build,
                           double step = 1e-4, std::size_t max_coords_per_param = 0,
                           std::uint64_t seed = 0, double rel_floor = 1e-4) {
    std::vector<Tensor> analytic_grads;
    {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (const Tensor& p : params) vars.push_back(tape.param(p));
        Var loss = build(tape, vars);
        tape.backward(loss);
        for (Var v : vars) analytic_grads.push_back(tape.grad_tensor(v));
    }

    auto eval = [&](const std::vector<Tensor>& pts) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(pts.size());
        for (const Tensor& p : pts) vars.push_back(tape.constant(p));
        return tape.scalar(build(tape, vars));
    };

    GradCheckReport report;
    Rng rng(splitmix64(seed ^ 0x67726164636b21ULL));
    std::vector<Tensor> probe = params;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const std::size_t n = params[pi].numel();
        std::vector<std::size_t> coords;
        if (max_coords_per_param == 0 || max_coords_per_param >= n) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < max_coords_per_param; ++i)
                coords.push_back(uniform_index(rng, n));
        }
        for (std::size_t ci : coords) {
            const double orig = probe[pi].values[ci];
            probe[pi].values[ci] = orig + step;
            const double up = eval(probe);
            probe[pi].values[ci] = orig - step;
            const double down = eval(probe);
            probe[pi].values[ci] = orig;
            const double fd = (up - down) / (2.0 * step);
            const double an = analytic_grads[pi].values[ci];
            const double denom = std::max({std::abs(an), std::abs(fd), rel_floor});
            const double rel = std::abs(an - fd) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_location = "param " + std::to_string(pi) + " coord " +
                                        std::to_string(ci) + " analytic " +
                                        std::to_string(an) + " fd " + std::to_string(fd);
            }
        }
    }
    return report;
}

}  // namespace protomargin
