#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "normlab/tape.hpp"
#include "normlab/tensor.hpp"

namespace normlab::oracle {

struct OracleReport {
    std::string name;
    double discrepancy = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string fingerprint;  // seed + shape of the checked input
};

inline OracleReport make_report(std::string name, double disc, double tol, std::string fingerprint) {
    OracleReport r;
    r.name = std::move(name);
    r.discrepancy = disc;
    r.tolerance = tol;
    r.pass = disc <= tol;
    r.fingerprint = std::move(fingerprint);
    return r;
}

// ---------------------------------------------------------------------------
// Flat-loop reference layers. Deliberately naive, double precision, and free
// of any engine code; every statistic is spelled out as a textbook loop.
// ---------------------------------------------------------------------------

struct RefDims {
    int B = 0, C = 0, H = 0, W = 0;
    std::size_t numel() const {
        return static_cast<std::size_t>(B) * C * H * W;
    }
};

std::vector<double> ref_bn(const std::vector<double>& x, RefDims d, const std::vector<double>& gamma,
                           const std::vector<double>& beta, double eps);

std::vector<double> ref_in(const std::vector<double>& x, RefDims d, const std::vector<double>& gamma,
                           const std::vector<double>& beta, double eps);

std::vector<double> ref_se(const std::vector<double>& x, RefDims d, const std::vector<double>& fc1,
                           const std::vector<double>& fc2, int hidden);

struct RefIebnKnobs {
    int op = 0;        // 0 linear, 1 identity, 2 fc
    int activation = 0;  // 0 sigmoid, 1 tanh, 2 relu, 3 softmax over channels
    int position = 0;  // 0 gamma, 1 beta, 2 both
};

std::vector<double> ref_iebn(const std::vector<double>& x, RefDims d, const std::vector<double>& gamma,
                             const std::vector<double>& beta, const std::vector<double>& gamma_hat,
                             const std::vector<double>& beta_hat, double eps, RefIebnKnobs knobs = {},
                             const std::vector<double>& fc1 = {}, const std::vector<double>& fc2 = {},
                             int hidden = 0);

// ---------------------------------------------------------------------------
// Central finite-difference gradient check, 64-bit only.
// ---------------------------------------------------------------------------

struct GradcheckResult {
    double max_rel_err = 0.0;
    bool finite = true;
    std::string where;  // location of the worst or non-finite entry
};

// fn must be a pure scalar function of the registered inputs. Relative error
// metric: |a - n| / max(|a|, |n|, 1e-8).
template <class Fn>
GradcheckResult gradcheck(Fn&& fn, std::vector<Tensor<double>*> inputs, double h = 1e-5) {
    GradcheckResult res;
    std::vector<std::vector<double>> analytic;
    {
        TapeScope<double> scope;
        for (auto* in : inputs) in->zero_grad();
        Tensor<double> loss = fn();
        if (loss.numel() != 1) throw UsageError("gradcheck requires a scalar function");
        scope.tape().backward(loss);
        for (auto* in : inputs) {
            in->ensure_grad();
            auto g = in->grad();
            analytic.emplace_back(g.begin(), g.end());
        }
    }
    NoGradScope<double> ng;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto vals = inputs[i]->values_mut();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            double orig = vals[j];
            vals[j] = orig + h;
            double fp = fn().item();
            vals[j] = orig - h;
            double fm = fn().item();
            vals[j] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i][j];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                res.finite = false;
                res.where = "input " + std::to_string(i) + " element " + std::to_string(j);
                res.max_rel_err = std::numeric_limits<double>::infinity();
                return res;
            }
            double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.where = "input " + std::to_string(i) + " element " + std::to_string(j);
            }
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Suites (drivers compare engine layers against the references above)
// ---------------------------------------------------------------------------

// Engine forward vs flat reference on seeded random inputs, every layer kind.
std::vector<OracleReport> equivalence_suite(int runs_per_kind = 50, double tol = 1e-12);

// Finite differences across all layer kinds and every IEBN knob combination.
std::vector<OracleReport> gradcheck_suite(double tol = 1e-4);

// Rescaling-form and noise-neutralization identities on a seeded grid,
// including every constant-noise pair the attack protocol names.
std::vector<OracleReport> identity_suite(double tol = 1e-10);

std::vector<OracleReport> run_all_suites();

void write_reports_csv(std::ostream& os, const std::vector<OracleReport>& reports);

}  // namespace normlab::oracle
