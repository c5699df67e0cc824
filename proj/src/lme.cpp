#include "mrh/lme.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "mrh/check.hpp"

namespace mrh {

namespace {

// Per-subject data. The normal equations use the sums; residual sums are
// recomputed from the raw points so that near-zero residual variance is not
// lost to cancellation between large moment terms.
struct SubjectStats {
    double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::vector<std::pair<double, double>> pts;  // (x, y)
};

std::vector<SubjectStats> group_stats(const std::vector<LongitudinalObservation>& obs) {
    std::map<std::string, SubjectStats> by_subject;
    for (const auto& o : obs) {
        MRH_CHECK(std::isfinite(o.x) && std::isfinite(o.y),
                  "non-finite observation for subject '" << o.subject_id << "'");
        auto& s = by_subject[o.subject_id];
        s.n += 1;
        s.sx += o.x;
        s.sy += o.y;
        s.sxx += o.x * o.x;
        s.sxy += o.x * o.y;
        s.pts.emplace_back(o.x, o.y);
    }
    std::vector<SubjectStats> out;
    out.reserve(by_subject.size());
    for (auto& kv : by_subject) out.push_back(std::move(kv.second));
    return out;
}

// State of one profile evaluation at a fixed variance ratio lambda.
struct ProfilePoint {
    double a0 = 0, a1 = 0;
    double sig2 = 0;     // profiled residual variance
    double score = 0;    // d/dlambda of the profile log-likelihood
    double loglik = 0;   // profile log-likelihood value
};

// Evaluates the profile at lambda: GLS fixed effects in closed form, the
// profiled residual variance, the log-likelihood, and its lambda-derivative
// (by the envelope theorem only the explicit lambda dependence matters).
ProfilePoint eval_profile(const std::vector<SubjectStats>& subs, double total_n, double lambda,
                          bool reml) {
    // Normal equations A beta = b with per-subject weight I - c * ones*ones^T,
    // written in within/between form so large ratios do not cancel digits:
    // n - c n^2 = n/(1+lambda n), and sxx - c sx^2 = (sxx - sx^2/n) + sx^2/(n (1+lambda n)).
    double a00 = 0, a01 = 0, a11 = 0, b0 = 0, b1 = 0;
    for (const auto& s : subs) {
        const double den = 1.0 + lambda * s.n;
        a00 += s.n / den;
        a01 += s.sx / den;
        a11 += (s.sxx - s.sx * s.sx / s.n) + s.sx * s.sx / (s.n * den);
        b0 += s.sy / den;
        b1 += (s.sxy - s.sx * s.sy / s.n) + s.sx * s.sy / (s.n * den);
    }
    const double det = a00 * a11 - a01 * a01;
    MRH_CHECK(std::abs(det) > 1e-12 * (1.0 + std::abs(a00 * a11)),
              "design is unidentifiable: age covariate is (nearly) constant");
    ProfilePoint p;
    p.a0 = (b0 * a11 - b1 * a01) / det;
    p.a1 = (a00 * b1 - a01 * b0) / det;

    double rss = 0;         // weighted residual sum of squares
    double logdet_r = 0;    // sum of log(1 + lambda n_j)
    double score_num = 0;   // sum of R_j^2 / (1 + lambda n_j)^2
    double score_n = 0;     // sum of n_j / (1 + lambda n_j)
    double trace = 0;       // REML: sum of u_j^T A^{-1} u_j / (1 + lambda n_j)^2
    for (const auto& s : subs) {
        const double den = 1.0 + lambda * s.n;
        const double c = lambda / den;
        double rsum = 0, rsq = 0;
        for (const auto& pt : s.pts) {
            const double r = pt.second - p.a0 - p.a1 * pt.first;
            rsum += r;
            rsq += r * r;
        }
        rss += rsq - c * rsum * rsum;
        logdet_r += std::log(den);
        score_num += rsum * rsum / (den * den);
        score_n += s.n / den;
        if (reml) {
            const double u0 = s.n, u1 = s.sx;
            const double quad = (u0 * (a11 * u0 - a01 * u1) + u1 * (a00 * u1 - a01 * u0)) / det;
            trace += quad / (den * den);
        }
    }
    rss = std::max(rss, 0.0);
    const double dof = reml ? total_n - 2.0 : total_n;
    MRH_CHECK(rss > 0.0 && dof > 0.0,
              "degenerate fit: zero residual variance (responses fit exactly)");
    p.sig2 = rss / dof;

    p.score = -0.5 * score_n + 0.5 * score_num / p.sig2;
    if (reml) p.score += 0.5 * trace;

    constexpr double kLog2Pi = 1.8378770664093454836;
    p.loglik = -0.5 * (dof * kLog2Pi + dof * std::log(p.sig2) + logdet_r + dof);
    if (reml) p.loglik -= 0.5 * std::log(det);
    return p;
}

}  // namespace

LMEFit fit_lme(const std::vector<LongitudinalObservation>& obs, bool reml) {
    const auto subs = group_stats(obs);
    MRH_CHECK(subs.size() >= 2, "need at least 2 subjects, got " << subs.size());
    double total_n = 0;
    bool any_repeat = false;
    for (const auto& s : subs) {
        total_n += s.n;
        if (s.n >= 2) any_repeat = true;
    }
    MRH_CHECK(any_repeat,
              "variance components are unidentifiable: no subject has repeated sessions");

    constexpr double kTol = 1e-8;
    constexpr int kMaxIter = 200;
    int iter = 0;

    auto at = [&](double lam) {
        ++iter;
        MRH_CHECK(iter <= kMaxIter, "variance-ratio search did not converge after "
                                        << kMaxIter << " iterations (last ratio " << lam << ")");
        return eval_profile(subs, total_n, lam, reml);
    };

    double lambda = 0.0;
    ProfilePoint best = at(0.0);
    if (best.score > 0.0) {
        // Bracket the zero of the score, then safeguarded Newton/bisection.
        double lo = 0.0, hi = 1.0;
        ProfilePoint phi = at(hi);
        while (phi.score > 0.0) {
            lo = hi;
            hi *= 4.0;
            phi = at(hi);
        }
        lambda = 0.5 * (lo + hi);
        while (hi - lo > kTol * (1.0 + hi)) {
            ProfilePoint pm = at(lambda);
            if (pm.score > 0.0) {
                lo = lambda;
            } else {
                hi = lambda;
                phi = pm;
            }
            // Newton step on the score with a central-difference derivative,
            // falling back to bisection whenever it leaves the bracket.
            double next = 0.5 * (lo + hi);
            const double h = 1e-5 * (1.0 + lambda);
            if (lambda - h > 0.0) {
                const double d = (at(lambda + h).score - at(lambda - h).score) / (2.0 * h);
                if (d < 0.0) {
                    const double newton = lambda - pm.score / d;
                    if (newton > lo && newton < hi) next = newton;
                }
            }
            lambda = next;
        }
        lambda = 0.5 * (lo + hi);
        best = at(lambda);
    }

    LMEFit fit;
    fit.reml = reml;
    fit.a0 = best.a0;
    fit.a1 = best.a1;
    fit.sigma_e2 = best.sig2;
    fit.sigma_b2 = lambda * best.sig2;
    fit.icc = fit.sigma_b2 / (fit.sigma_b2 + fit.sigma_e2);
    fit.loglik = best.loglik;
    return fit;
}

double icc(const LMEFit& fit) {
    const double total = fit.sigma_b2 + fit.sigma_e2;
    MRH_CHECK(total > 0.0, "ICC undefined: both variance components are zero");
    return fit.sigma_b2 / total;
}

namespace {

// Sessions must match pairwise across the two sets for a fair comparison.
void check_same_sessions(const StructureSeries& before, const StructureSeries& after) {
    MRH_CHECK(before.obs.size() == after.obs.size(),
              "structure '" << before.structure << "': " << before.obs.size()
                            << " sessions before vs " << after.obs.size() << " after");
    auto key = [](const LongitudinalObservation& o) { return std::make_pair(o.subject_id, o.x); };
    std::vector<std::pair<std::string, double>> kb, ka;
    for (const auto& o : before.obs) kb.push_back(key(o));
    for (const auto& o : after.obs) ka.push_back(key(o));
    std::sort(kb.begin(), kb.end());
    std::sort(ka.begin(), ka.end());
    MRH_CHECK(kb == ka, "structure '" << before.structure
                                      << "': before/after sessions do not match");
}

}  // namespace

std::vector<HarmonizationRow> compare_harmonization(const std::vector<StructureSeries>& before,
                                                    const std::vector<StructureSeries>& after) {
    MRH_CHECK(before.size() == after.size(), "structure counts differ: " << before.size() << " vs "
                                                                         << after.size());
    std::map<std::string, const StructureSeries*> after_by_name;
    for (const auto& s : after) after_by_name[s.structure] = &s;
    std::vector<HarmonizationRow> rows;
    for (const auto& b : before) {
        auto it = after_by_name.find(b.structure);
        MRH_CHECK(it != after_by_name.end(),
                  "structure '" << b.structure << "' missing from the after set");
        check_same_sessions(b, *it->second);
        const LMEFit fb = fit_lme(b.obs);
        const LMEFit fa = fit_lme(it->second->obs);
        HarmonizationRow row;
        row.structure = b.structure;
        row.icc_before = fb.icc;
        row.icc_after = fa.icc;
        row.sig2_before = fb.sigma_e2;
        row.sig2_after = fa.sigma_e2;
        row.improved = fa.icc > fb.icc;
        rows.push_back(row);
    }
    return rows;
}

void write_comparison_csv(const std::vector<HarmonizationRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    MRH_CHECK(out.good(), "cannot write " << path);
    out << "structure,icc_before,icc_after,sig2_before,sig2_after\n";
    out << std::setprecision(12);
    for (const auto& r : rows) {
        out << r.structure << ',' << r.icc_before << ',' << r.icc_after << ',' << r.sig2_before
            << ',' << r.sig2_after << '\n';
    }
    MRH_CHECK(out.good(), "write failed for " << path);
}

std::vector<StructureSeries> load_longitudinal_csv(const std::string& path) {
    std::ifstream in(path);
    MRH_CHECK(in.good(), "cannot open " << path);
    std::string line;
    MRH_CHECK(std::getline(in, line), "empty file " << path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    MRH_CHECK(line == "subject_id,age,structure,volume,total_brain_volume",
              "unexpected header in " << path << ": '" << line << "'");
    std::map<std::string, StructureSeries> by_structure;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string subject, age_s, structure, vol_s, total_s;
        const bool ok = std::getline(ss, subject, ',') && std::getline(ss, age_s, ',') &&
                        std::getline(ss, structure, ',') && std::getline(ss, vol_s, ',') &&
                        std::getline(ss, total_s);
        MRH_CHECK(ok, path << ":" << lineno << ": expected 5 comma-separated fields");
        LongitudinalObservation o;
        o.subject_id = subject;
        try {
            o.x = std::stod(age_s);
            const double vol = std::stod(vol_s);
            const double total = std::stod(total_s);
            MRH_CHECK(total > 0.0, "total brain volume must be positive");
            o.y = vol / total * 100.0;
        } catch (const std::exception& e) {
            MRH_CHECK(false, path << ":" << lineno << ": " << e.what());
        }
        auto& series = by_structure[structure];
        series.structure = structure;
        series.obs.push_back(o);
    }
    std::vector<StructureSeries> out;
    out.reserve(by_structure.size());
    for (auto& kv : by_structure) out.push_back(std::move(kv.second));
    return out;
}

}  // namespace mrh
