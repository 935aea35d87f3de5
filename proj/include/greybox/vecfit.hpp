#pragma once

// Vector fitting of sampled matrix spectra: relaxed pole relocation with a
// common pole set shared by every matrix element, followed by linear
// identification of residues, direct and linear-in-s terms. Fitting is done
// on s = j*omega with real unknowns, so the result is conjugate-closed and
// represents a real-rational transfer function.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "greybox/diagnostics.hpp"
#include "greybox/lti.hpp"
#include "greybox/parallel.hpp"
#include "greybox/spectrum.hpp"

namespace greybox {

enum class Weighting { Uniform, InverseMagnitude };

struct FitConfig {
    int order = 0;
    int iterations = 10;
    /// Overrides the default log-spaced starting poles (must be conjugate-closed).
    std::vector<cd> initial_poles;
    /// Reflect unstable fitted poles into the left half plane.
    bool enforce_stability = false;
    Weighting weighting = Weighting::Uniform;
    bool fit_direct = true;
    bool fit_linear = true;
};

struct FitResult {
    PoleResidueForm model;
    double rms_rel = 0.0;
    /// Pole set after each relocation pass; entry 0 holds the starting poles.
    std::vector<std::vector<cd>> trajectory;
    int best_iteration = 0;
    bool converged = false;
};

/// Relative pole movement below which relocation counts as converged.
inline constexpr double kPoleConvergence = 1e-6;

namespace detail {

// Poles stored vectfit-style: a complex pair occupies two consecutive slots
// (a, conj a); kind 0 = real, 1 = first of pair, 2 = second of pair.
struct PoleSet {
    std::vector<cd> poles;
    std::vector<int> kind;

    std::size_t size() const { return poles.size(); }
};

inline PoleSet make_pole_set(std::vector<cd> raw, double real_tol = 0.0) {
    std::vector<cd> reals;
    std::vector<cd> uppers;
    for (const cd& a : raw) {
        if (std::abs(a.imag()) <= real_tol * std::abs(a)) {
            reals.emplace_back(a.real(), 0.0);
        } else if (a.imag() > 0.0) {
            uppers.push_back(a);
        }
    }
    std::size_t lowers = 0;
    for (const cd& a : raw) {
        if (!(std::abs(a.imag()) <= real_tol * std::abs(a)) && a.imag() < 0.0) ++lowers;
    }
    if (lowers != uppers.size()) throw InputError("vector fit: pole set is not conjugate-closed");
    auto by_freq = [](cd x, cd y) {
        if (std::abs(x.imag()) != std::abs(y.imag())) return std::abs(x.imag()) < std::abs(y.imag());
        return x.real() < y.real();
    };
    std::sort(reals.begin(), reals.end(), by_freq);
    std::sort(uppers.begin(), uppers.end(), by_freq);
    PoleSet out;
    std::size_t r = 0;
    std::size_t u = 0;
    while (r < reals.size() || u < uppers.size()) {
        const bool take_real = u >= uppers.size() || (r < reals.size() && by_freq(reals[r], uppers[u]));
        if (take_real) {
            out.poles.push_back(reals[r++]);
            out.kind.push_back(0);
        } else {
            out.poles.push_back(uppers[u]);
            out.poles.push_back(std::conj(uppers[u]));
            out.kind.push_back(1);
            out.kind.push_back(2);
            ++u;
        }
    }
    return out;
}

inline PoleSet default_initial_poles(const std::vector<double>& omega, int order) {
    double lo = omega.front();
    const double hi = omega.back();
    if (!(lo > 0.0)) lo = omega.size() > 1 && omega[1] > 0.0 ? omega[1] : hi * 1e-3;
    const int pairs = order / 2;
    std::vector<cd> raw;
    const auto beta = pairs > 1 ? logspace(lo, hi, static_cast<std::size_t>(pairs)) : std::vector<double>{std::sqrt(lo * hi)};
    for (int i = 0; i < pairs; ++i) {
        raw.emplace_back(-beta[i] / 100.0, beta[i]);
        raw.emplace_back(-beta[i] / 100.0, -beta[i]);
    }
    if (order % 2 == 1) raw.emplace_back(-std::sqrt(lo * hi), 0.0);
    return make_pole_set(raw);
}

// Basis in the real-coefficient form: one column per pole slot.
inline Eigen::MatrixXcd basis_matrix(const PoleSet& ps, const std::vector<double>& omega) {
    Eigen::MatrixXcd phi(static_cast<Index>(omega.size()), static_cast<Index>(ps.size()));
    for (std::size_t k = 0; k < omega.size(); ++k) {
        const cd s(0.0, omega[k]);
        const Index row = static_cast<Index>(k);
        for (std::size_t m = 0; m < ps.size(); ++m) {
            const cd a = ps.poles[m];
            const Index col = static_cast<Index>(m);
            if (ps.kind[m] == 0) {
                phi(row, col) = 1.0 / (s - a);
            } else if (ps.kind[m] == 1) {
                const cd g1 = 1.0 / (s - a);
                const cd g2 = 1.0 / (s - std::conj(a));
                phi(row, col) = g1 + g2;
                phi(row, col + 1) = cd(0.0, 1.0) * (g1 - g2);
            }
        }
    }
    return phi;
}

// Stacks real and imaginary parts: [Re M; Im M].
inline MatrixXd stack_real(const Eigen::MatrixXcd& m) {
    MatrixXd out(2 * m.rows(), m.cols());
    out.topRows(m.rows()) = m.real();
    out.bottomRows(m.rows()) = m.imag();
    return out;
}

inline VectorXd column_scales(const MatrixXd& a) {
    VectorXd scale(a.cols());
    for (Index c = 0; c < a.cols(); ++c) {
        const double n = a.col(c).norm();
        scale(c) = n > 0.0 ? 1.0 / n : 1.0;
    }
    return scale;
}

inline VectorXd sample_weights(const SampledSpectrum& sp, Weighting w) {
    VectorXd out = VectorXd::Ones(static_cast<Index>(sp.size()));
    if (w == Weighting::InverseMagnitude) {
        for (std::size_t k = 0; k < sp.size(); ++k) {
            const double n = sp.samples[k].norm();
            out(static_cast<Index>(k)) = n > 0.0 ? 1.0 / n : 1.0;
        }
    }
    return out;
}

inline Index extra_columns(const FitConfig& cfg) { return (cfg.fit_direct ? 1 : 0) + (cfg.fit_linear ? 1 : 0); }

// [Phi, 1, s] for the residue identification.
inline Eigen::MatrixXcd model_basis(const Eigen::MatrixXcd& phi, const std::vector<double>& omega, const FitConfig& cfg) {
    const Index n = phi.cols();
    Eigen::MatrixXcd out(phi.rows(), n + extra_columns(cfg));
    out.leftCols(n) = phi;
    Index c = n;
    if (cfg.fit_direct) out.col(c++).setOnes();
    if (cfg.fit_linear) {
        for (Index k = 0; k < phi.rows(); ++k) out(k, c) = cd(0.0, omega[static_cast<std::size_t>(k)]);
    }
    return out;
}

// Solves min ||A x - B|| column-wise with column equilibration; rank loss is a fit error.
inline MatrixXd scaled_least_squares(MatrixXd a, const MatrixXd& b, const char* stage, int order,
                                     double rank_tol = 1e-13) {
    const VectorXd scale = column_scales(a);
    a *= scale.asDiagonal();
    Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
    qr.setThreshold(rank_tol);
    if (qr.rank() < a.cols()) {
        throw FitError("vector fit: rank-deficient least squares in " + std::string(stage) + " at order " +
                       std::to_string(order) + "; try a lower order");
    }
    MatrixXd x = qr.solve(b);
    return scale.asDiagonal() * x;
}

struct Identified {
    PoleResidueForm model;
    double rms_rel = 0.0;
};

inline double sample_relative_error(const MatrixXcd& fit, const MatrixXcd& data) {
    const double ref = data.norm();
    const double diff = (fit - data).norm();
    return ref > 0.0 ? diff / ref : diff;
}

inline Identified identify_residues(const PoleSet& ps, const SampledSpectrum& sp, const VectorXd& w,
                                    const FitConfig& cfg) {
    const Index N = static_cast<Index>(sp.size());
    const Index q = sp.outputs();
    const Index p = sp.inputs();
    const Index n = static_cast<Index>(ps.size());
    const Eigen::MatrixXcd basis = w.asDiagonal() * model_basis(basis_matrix(ps, sp.omega), sp.omega, cfg);
    Eigen::MatrixXcd rhs(N, q * p);
    for (Index k = 0; k < N; ++k) {
        for (Index r = 0; r < q; ++r) {
            for (Index c = 0; c < p; ++c) rhs(k, r * p + c) = w(k) * sp.samples[static_cast<std::size_t>(k)](r, c);
        }
    }
    const MatrixXd x = scaled_least_squares(stack_real(basis), stack_real(rhs), "residue identification", cfg.order);

    Identified out;
    PoleResidueForm& m = out.model;
    m.poles = ps.poles;
    m.residues.assign(ps.size(), MatrixXcd::Zero(q, p));
    m.direct = MatrixXcd::Zero(q, p);
    m.linear = MatrixXcd::Zero(q, p);
    for (Index r = 0; r < q; ++r) {
        for (Index c = 0; c < p; ++c) {
            const Index e = r * p + c;
            for (Index j = 0; j < n; ++j) {
                const int kind = ps.kind[static_cast<std::size_t>(j)];
                if (kind == 0) {
                    m.residues[static_cast<std::size_t>(j)](r, c) = x(j, e);
                } else if (kind == 1) {
                    const cd res(x(j, e), x(j + 1, e));
                    m.residues[static_cast<std::size_t>(j)](r, c) = res;
                    m.residues[static_cast<std::size_t>(j) + 1](r, c) = std::conj(res);
                }
            }
            Index col = n;
            if (cfg.fit_direct) m.direct(r, c) = x(col++, e);
            if (cfg.fit_linear) m.linear(r, c) = x(col, e);
        }
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < sp.size(); ++k) {
        const double e = sample_relative_error(eval(m, cd(0.0, sp.omega[k])), sp.samples[k]);
        acc += e * e;
    }
    out.rms_rel = std::sqrt(acc / static_cast<double>(sp.size()));
    return out;
}

inline constexpr double kRelaxLow = 1e-8;
inline constexpr double kRelaxHigh = 1e8;
inline constexpr double kRelocationRankTolerance = 1e-15;

// One relaxed relocation pass; returns the zeros of sigma as the new poles.
inline PoleSet relocate(const PoleSet& ps, const SampledSpectrum& sp, const VectorXd& w, const FitConfig& cfg) {
    const Index N = static_cast<Index>(sp.size());
    const Index n = static_cast<Index>(ps.size());
    const Index na = n + extra_columns(cfg);
    const Index ns = n + 1;
    const Eigen::MatrixXcd phi = basis_matrix(ps, sp.omega);
    const Eigen::MatrixXcd base = model_basis(phi, sp.omega, cfg);
    Eigen::MatrixXcd sigma_basis(N, ns);
    sigma_basis.leftCols(n) = phi;
    sigma_basis.col(n).setOnes();

    const Index elements = sp.outputs() * sp.inputs();
    MatrixXd reduced(elements * ns, ns);
    double scale = 0.0;
    for (Index e = 0; e < elements; ++e) {
        const Index r = e / sp.inputs();
        const Index c = e % sp.inputs();
        VectorXcd f(N);
        for (Index k = 0; k < N; ++k) f(k) = sp.samples[static_cast<std::size_t>(k)](r, c);
        scale += (w.cwiseProduct(f.cwiseAbs())).squaredNorm();
        Eigen::MatrixXcd block(N, na + ns);
        block.leftCols(na) = w.asDiagonal() * base;
        const VectorXcd wf = -w.cast<cd>().cwiseProduct(f);
        block.rightCols(ns) = wf.asDiagonal() * sigma_basis;
        MatrixXd real_block = stack_real(block);
        const VectorXd cs = column_scales(real_block);
        real_block *= cs.asDiagonal();
        Eigen::HouseholderQR<MatrixXd> qr(real_block);
        const MatrixXd rr = qr.matrixQR().topRows(na + ns).template triangularView<Eigen::Upper>();
        // Undo the equilibration on the sigma columns so rows stack consistently.
        reduced.block(e * ns, 0, ns, ns) = rr.block(na, na, ns, ns) * cs.tail(ns).cwiseInverse().asDiagonal();
    }
    scale = std::sqrt(scale) / static_cast<double>(N);

    const VectorXd sigma_sum = (w.asDiagonal() * sigma_basis).real().colwise().sum().transpose();
    MatrixXd a(reduced.rows() + 1, ns);
    a.topRows(reduced.rows()) = reduced;
    a.row(reduced.rows()) = scale * sigma_sum.transpose();
    VectorXd b = VectorXd::Zero(a.rows());
    b(a.rows() - 1) = static_cast<double>(N) * scale;
    VectorXd x = scaled_least_squares(a, b, "pole relocation", cfg.order, kRelocationRankTolerance);

    double d = x(n);
    if (std::abs(d) < kRelaxLow || std::abs(d) > kRelaxHigh) {
        // Relaxation degenerated: fix the sigma constant term and re-solve.
        d = (std::abs(d) < kRelaxLow ? kRelaxLow : kRelaxHigh) * (d < 0.0 ? -1.0 : 1.0);
        const MatrixXd a2 = reduced.leftCols(n);
        const VectorXd b2 = -reduced.col(n) * d;
        const VectorXd c2 = scaled_least_squares(a2, b2, "pole relocation", cfg.order, kRelocationRankTolerance);
        x.head(n) = c2;
        x(n) = d;
    }

    MatrixXd lam = MatrixXd::Zero(n, n);
    VectorXd bb = VectorXd::Zero(n);
    for (Index m = 0; m < n; ++m) {
        const int kind = ps.kind[static_cast<std::size_t>(m)];
        const cd pole = ps.poles[static_cast<std::size_t>(m)];
        if (kind == 0) {
            lam(m, m) = pole.real();
            bb(m) = 1.0;
        } else if (kind == 1) {
            lam(m, m) = pole.real();
            lam(m + 1, m + 1) = pole.real();
            lam(m, m + 1) = pole.imag();
            lam(m + 1, m) = -pole.imag();
            bb(m) = 2.0;
        }
    }
    const MatrixXd h = lam - bb * x.head(n).transpose() / d;
    const VectorXd bal = balancing_scale(h);
    const MatrixXd hb = bal.cwiseInverse().asDiagonal() * h * bal.asDiagonal();
    Eigen::EigenSolver<MatrixXd> es(hb, false);
    if (es.info() != Eigen::Success) throw FitError("vector fit: eigenvalue solver failed during pole relocation");
    std::vector<cd> raw(es.eigenvalues().data(), es.eigenvalues().data() + n);
    if (cfg.enforce_stability) {
        for (cd& z : raw) {
            if (z.real() > 0.0) z = cd(-z.real(), z.imag());
        }
    }
    return make_pole_set(raw);
}

inline double pole_movement(const std::vector<cd>& from, const std::vector<cd>& to) {
    if (from.size() != to.size()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < from.size(); ++i) {
        worst = std::max(worst, std::abs(to[i] - from[i]) / std::max(std::abs(from[i]), 1e-300));
    }
    return worst;
}

}  // namespace detail

/// Fits a common-pole rational model to the spectrum. Returns the iterate with
/// the lowest rms relative error; warns if relocation had not converged.
inline FitResult vector_fit(const SampledSpectrum& spectrum, const FitConfig& cfg) {
    spectrum.validate();
    if (cfg.order < 1) throw InputError("vector fit: order must be >= 1");
    if (cfg.iterations < 1) throw InputError("vector fit: iterations must be >= 1");
    if (spectrum.size() < static_cast<std::size_t>(2 * cfg.order + 2)) {
        throw InputError("vector fit: " + std::to_string(spectrum.size()) + " samples are too few for order " +
                         std::to_string(cfg.order) + " (need >= " + std::to_string(2 * cfg.order + 2) + ")");
    }
    detail::PoleSet ps;
    if (cfg.initial_poles.empty()) {
        ps = detail::default_initial_poles(spectrum.omega, cfg.order);
    } else {
        if (cfg.initial_poles.size() != static_cast<std::size_t>(cfg.order)) {
            throw InputError("vector fit: initial pole count differs from the order");
        }
        ps = detail::make_pole_set(cfg.initial_poles, 1e-14);
    }
    const VectorXd w = detail::sample_weights(spectrum, cfg.weighting);

    FitResult out;
    out.trajectory.push_back(ps.poles);
    double best = std::numeric_limits<double>::infinity();
    double movement = std::numeric_limits<double>::infinity();
    for (int it = 1; it <= cfg.iterations; ++it) {
        detail::PoleSet next = detail::relocate(ps, spectrum, w, cfg);
        movement = detail::pole_movement(ps.poles, next.poles);
        ps = std::move(next);
        out.trajectory.push_back(ps.poles);
        auto id = detail::identify_residues(ps, spectrum, w, cfg);
        if (!std::isfinite(id.rms_rel)) continue;
        if (id.rms_rel < best) {
            best = id.rms_rel;
            out.model = std::move(id.model);
            out.rms_rel = id.rms_rel;
            out.best_iteration = it;
        }
    }
    if (!std::isfinite(best)) throw FitError("vector fit: no finite iterate");
    out.converged = movement <= kPoleConvergence;
    if (!out.converged) {
        warn("vector fit: pole relocation not converged after " + std::to_string(cfg.iterations) +
             " iterations (last relative pole movement " + detail::format_number(movement) +
             "); returning best iterate " + std::to_string(out.best_iteration));
    }
    return out;
}

/// Fits several spectra independently, in parallel.
inline std::vector<FitResult> vector_fit_all(const std::vector<SampledSpectrum>& spectra, const FitConfig& cfg) {
    std::vector<FitResult> out(spectra.size());
    parallel_for(spectra.size(), [&](std::size_t i) { out[i] = vector_fit(spectra[i], cfg); });
    return out;
}

struct BandQuality {
    double f_lo_hz = 0.0;
    double f_hi_hz = 0.0;
    std::size_t samples = 0;
    double rms_rel = 0.0;
    double max_rel = 0.0;
};

struct FitQuality {
    double rms_rel = 0.0;
    double max_rel = 0.0;
    std::vector<BandQuality> bands;  ///< one per decade of frequency
};

/// Per-sample relative error ||G_fit - G|| / ||G|| (Frobenius), summarised
/// overall and per decade.
inline FitQuality fit_quality(const PoleResidueForm& model, const SampledSpectrum& spectrum) {
    spectrum.validate();
    if (model.outputs() != spectrum.outputs() || model.inputs() != spectrum.inputs()) {
        throw ShapeError("fit quality: model and spectrum shapes differ");
    }
    FitQuality q;
    std::vector<double> err(spectrum.size());
    for (std::size_t k = 0; k < spectrum.size(); ++k) {
        err[k] = detail::sample_relative_error(eval(model, cd(0.0, spectrum.omega[k])), spectrum.samples[k]);
    }
    double acc = 0.0;
    for (double e : err) {
        acc += e * e;
        q.max_rel = std::max(q.max_rel, e);
    }
    q.rms_rel = std::sqrt(acc / static_cast<double>(err.size()));

    auto decade = [&](std::size_t k) {
        const double f = rad_to_hz(spectrum.omega[k]);
        return f > 0.0 ? static_cast<int>(std::floor(std::log10(f))) : std::numeric_limits<int>::min();
    };
    for (std::size_t k = 0; k < err.size();) {
        const int key = decade(k);
        BandQuality b;
        if (key != std::numeric_limits<int>::min()) {
            b.f_lo_hz = std::pow(10.0, key);
            b.f_hi_hz = std::pow(10.0, key + 1);
        }
        double band_acc = 0.0;
        for (; k < err.size() && decade(k) == key; ++k) {
            band_acc += err[k] * err[k];
            b.max_rel = std::max(b.max_rel, err[k]);
            ++b.samples;
        }
        b.rms_rel = std::sqrt(band_acc / static_cast<double>(b.samples));
        q.bands.push_back(b);
    }
    return q;
}

inline FitQuality fit_quality(const FitResult& result, const SampledSpectrum& spectrum) {
    return fit_quality(result.model, spectrum);
}

/// Matches a fitted pole to `lambda` and returns -(residue)^H, the impedance
/// participation factor of the black-box route. Throws NoPoleError when the
/// nearest fitted pole is further than rel_tol*(1+|lambda|).
inline MatrixXcd fitted_participation_factor(const PoleResidueForm& fit, cd lambda, double rel_tol = 1e-3) {
    if (fit.poles.empty()) throw NoPoleError("fitted model has no poles");
    std::size_t best = 0;
    for (std::size_t i = 1; i < fit.poles.size(); ++i) {
        if (std::abs(fit.poles[i] - lambda) < std::abs(fit.poles[best] - lambda)) best = i;
    }
    if (std::abs(fit.poles[best] - lambda) > rel_tol * (1.0 + std::abs(lambda))) {
        throw NoPoleError("no fitted pole near " + detail::format_complex(lambda) + " (nearest " +
                          detail::format_complex(fit.poles[best]) + ")");
    }
    return -fit.residues[best].adjoint();
}

struct OrderSweepEntry {
    int order = 0;
    double rms_rel = std::numeric_limits<double>::infinity();
    double max_rel = std::numeric_limits<double>::infinity();
    /// Largest relative change of a significant residue when the fit is
    /// repeated on every other sample; NaN when the pole sets do not match.
    double density_sensitivity = std::numeric_limits<double>::quiet_NaN();
    std::string error;
};

struct OrderSweep {
    std::vector<OrderSweepEntry> entries;
    int knee = 0;  ///< first order after which rms improves by less than 10x
};

namespace detail {

inline double residue_change(const PoleResidueForm& a, const PoleResidueForm& b) {
    if (a.poles.size() != b.poles.size()) return std::numeric_limits<double>::quiet_NaN();
    double biggest = 0.0;
    for (const auto& r : a.residues) biggest = std::max(biggest, r.norm());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.poles.size(); ++i) {
        if (a.residues[i].norm() < 1e-6 * biggest) continue;
        std::size_t j = 0;
        for (std::size_t t = 1; t < b.poles.size(); ++t) {
            if (std::abs(b.poles[t] - a.poles[i]) < std::abs(b.poles[j] - a.poles[i])) j = t;
        }
        if (std::abs(b.poles[j] - a.poles[i]) > 1e-3 * (1.0 + std::abs(a.poles[i]))) {
            return std::numeric_limits<double>::quiet_NaN();
        }
        worst = std::max(worst, (b.residues[j] - a.residues[i]).norm() / a.residues[i].norm());
    }
    return worst;
}

inline SampledSpectrum decimate(const SampledSpectrum& sp) {
    SampledSpectrum out;
    for (std::size_t k = 0; k < sp.size(); k += 2) {
        out.omega.push_back(sp.omega[k]);
        out.samples.push_back(sp.samples[k]);
    }
    return out;
}

}  // namespace detail

/// Fits at orders first, first+step, ..., last and picks the rms knee.
inline OrderSweep sweep_orders(const SampledSpectrum& spectrum, FitConfig cfg, int first, int last, int step = 2) {
    if (first < 1 || last < first || step < 1) throw InputError("order sweep: invalid order range");
    std::vector<int> orders;
    for (int n = first; n <= last; n += step) orders.push_back(n);
    OrderSweep out;
    out.entries.resize(orders.size());
    const SampledSpectrum half = detail::decimate(spectrum);
    parallel_for(orders.size(), [&](std::size_t i) {
        OrderSweepEntry& e = out.entries[i];
        e.order = orders[i];
        FitConfig c = cfg;
        c.order = orders[i];
        c.initial_poles.clear();
        try {
            const FitResult full = vector_fit(spectrum, c);
            const FitQuality q = fit_quality(full, spectrum);
            e.rms_rel = q.rms_rel;
            e.max_rel = q.max_rel;
            if (half.size() >= static_cast<std::size_t>(2 * c.order + 2)) {
                e.density_sensitivity = detail::residue_change(full.model, vector_fit(half, c).model);
            }
        } catch (const Error& err) {
            e.error = err.what();
        }
    });
    out.knee = out.entries.back().order;
    for (std::size_t i = 0; i + 1 < out.entries.size(); ++i) {
        const double now = out.entries[i].rms_rel;
        const double next = out.entries[i + 1].rms_rel;
        if (std::isfinite(now) && !(next < now / 10.0)) {
            out.knee = out.entries[i].order;
            break;
        }
    }
    return out;
}

}  // namespace greybox
