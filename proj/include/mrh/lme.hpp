#pragma once

#include <string>
#include <vector>

namespace mrh {

// One longitudinal measurement: x is age in years, y a percentage structural
// volume (structure volume / total brain volume * 100).
struct LongitudinalObservation {
    std::string subject_id;
    double x = 0.0;
    double y = 0.0;
};

// Random-intercept model y_ij = a0 + a1 x_ij + b_j + e_ij with
// b_j ~ N(0, sigma_b2) per subject and e_ij ~ N(0, sigma_e2).
struct LMEFit {
    double a0 = 0.0, a1 = 0.0;   // fixed effects
    double sigma_b2 = 0.0;       // between-subject variance, >= 0
    double sigma_e2 = 0.0;       // residual variance, > 0
    double icc = 0.0;            // sigma_b2 / (sigma_b2 + sigma_e2), exactly
    double loglik = 0.0;         // at the optimum (REML: up to its constant)
    bool reml = false;
};

// Maximum-likelihood fit (REML with the switch): the variance ratio
// lambda = sigma_b2/sigma_e2 is profiled with closed-form GLS fixed effects
// and residual variance at each ratio, and the 1-D profile is maximized by
// safeguarded Newton/bisection to tolerance 1e-8 on the ratio. Throws on an
// unidentifiable design (fewer than 2 subjects, no subject with repeated
// sessions, or constant x) and after 200 iterations without convergence.
LMEFit fit_lme(const std::vector<LongitudinalObservation>& obs, bool reml = false);

// The exact variance ratio of a fit; throws if both variances are zero.
double icc(const LMEFit& fit);

// A named series of observations for one structure.
struct StructureSeries {
    std::string structure;
    std::vector<LongitudinalObservation> obs;
};

struct HarmonizationRow {
    std::string structure;
    double icc_before = 0.0, icc_after = 0.0;
    double sig2_before = 0.0, sig2_after = 0.0;  // residual variances
    bool improved = false;                       // icc_after > icc_before
};

// Fits each structure before and after harmonization. Both sets must hold
// the same structures over the same (subject, x) sessions; anything else is
// a mismatched-indexing error.
std::vector<HarmonizationRow> compare_harmonization(const std::vector<StructureSeries>& before,
                                                    const std::vector<StructureSeries>& after);

// CSV with header structure,icc_before,icc_after,sig2_before,sig2_after.
// Variances are in (percent total brain volume)^2.
void write_comparison_csv(const std::vector<HarmonizationRow>& rows, const std::string& path);

// Reads header subject_id,age,structure,volume,total_brain_volume and
// groups rows into per-structure series with y = volume/total * 100.
std::vector<StructureSeries> load_longitudinal_csv(const std::string& path);

}  // namespace mrh
