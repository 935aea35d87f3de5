#pragma once

// Impedance participation analysis: participation factors from residues of
// the whole-system admittance, eigenvalue-shift prediction, grey-box layers,
// and finite-difference validators.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "greybox/assembly.hpp"
#include "greybox/diagnostics.hpp"
#include "greybox/parallel.hpp"
#include "greybox/system.hpp"

namespace greybox {

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

inline double mode_frequency_hz(cd lambda) { return std::abs(lambda.imag()) / (2.0 * std::numbers::pi); }

inline double damping_ratio(cd lambda) {
    const double mag = std::abs(lambda);
    return mag == 0.0 ? 0.0 : -lambda.real() / mag;
}

struct Mode {
    Index index = 0;  ///< position in the model's eigenvalue vector
    cd lambda;

    double freq_hz() const { return mode_frequency_hz(lambda); }
    double damping() const { return damping_ratio(lambda); }
};

/// One mode per conjugate pair (Im >= 0) when `real`, sorted by frequency,
/// then real part.
inline std::vector<Mode> modes_from_values(const VectorXcd& values, bool real) {
    std::vector<Mode> out;
    for (Index n = 0; n < values.size(); ++n) {
        if (real && values[n].imag() < 0.0) continue;
        out.push_back({n, values[n]});
    }
    std::sort(out.begin(), out.end(), [](const Mode& a, const Mode& b) {
        const double fa = std::abs(a.lambda.imag()), fb = std::abs(b.lambda.imag());
        if (fa != fb) return fa < fb;
        if (a.lambda.real() != b.lambda.real()) return a.lambda.real() < b.lambda.real();
        return a.lambda.imag() < b.lambda.imag();
    });
    return out;
}

inline std::vector<Mode> system_modes(const WholeSystemModel& model) {
    return modes_from_values(model.eigen().values, model.is_real());
}

/// Eigenvalues without the distinctness requirement, for listing only.
inline std::vector<Mode> listed_modes(const WholeSystemModel& model) {
    if (model.has_distinct_spectrum()) return system_modes(model);
    Eigen::ComplexEigenSolver<MatrixXcd> solver(model.state_matrix(), false);
    if (solver.info() != Eigen::Success) throw DegenerateSpectrumError("eigen solver did not converge");
    VectorXcd values = solver.eigenvalues();
    if (model.is_real()) {
        // Snap near-real roots so conjugate filtering keeps one per pair.
        for (Index i = 0; i < values.size(); ++i) {
            if (std::abs(values[i].imag()) <= 1e-12 * (1.0 + std::abs(values[i]))) values[i] = values[i].real();
        }
    }
    return modes_from_values(values, model.is_real());
}

struct ModeSelection {
    std::optional<double> fmin_hz;
    std::optional<double> fmax_hz;
    std::optional<double> damping_below;
};

inline std::vector<Mode> select_modes(const std::vector<Mode>& modes, const ModeSelection& sel) {
    std::vector<Mode> out;
    for (const Mode& m : modes) {
        if (sel.fmin_hz && m.freq_hz() < *sel.fmin_hz) continue;
        if (sel.fmax_hz && m.freq_hz() > *sel.fmax_hz) continue;
        if (sel.damping_below && !(m.damping() < *sel.damping_below)) continue;
        out.push_back(m);
    }
    return out;
}

/// Eigenvalue index of the mode at lambda; NoPoleError if lambda is not an eigenvalue.
inline Index mode_index(const WholeSystemModel& model, cd lambda) {
    detail::require_finite(lambda, "mode_index");
    const EigenSystem& es = model.eigen();
    if (es.size() == 0) throw NoPoleError("system has no modes");
    const Index n = nearest_index(es.values, lambda);
    if (std::abs(es.values[n] - lambda) > kPoleMatchTolerance * (1.0 + std::abs(lambda))) {
        throw NoPoleError(detail::format_complex(lambda) + " is not an eigenvalue of the system (nearest " +
                          detail::format_complex(es.values[n]) + ")");
    }
    return n;
}

/// Eigenvalue nearest to `target`; MatchingError unless the runner-up is at
/// least twice as far away.
inline cd match_eigenvalue(const WholeSystemModel& model, cd target) {
    const VectorXcd& v = model.eigen().values;
    if (v.size() == 0) throw MatchingError("system has no modes");
    double d1 = INFINITY, d2 = INFINITY;
    Index best = 0;
    for (Index i = 0; i < v.size(); ++i) {
        const double d = std::abs(v[i] - target);
        if (d < d1) {
            d2 = d1;
            d1 = d;
            best = i;
        } else if (d < d2) {
            d2 = d;
        }
    }
    if (d2 < 2.0 * d1) {
        throw MatchingError("cannot match perturbed eigenvalue near " + detail::format_complex(target) +
                            ": two candidates within a factor 2 of the nearest distance " + std::to_string(d1));
    }
    return v[best];
}

// ---------------------------------------------------------------------------
// Participation factors
// ---------------------------------------------------------------------------

/// p = -(Res_lambda Yhat_kk)^* at node k (1-based), with Z_k(lambda) kept for the layers.
struct ImpedanceParticipationFactor {
    cd lambda;
    Index mode = 0;
    int node = 0;
    MatrixXcd residue;  ///< Res_lambda Yhat_kk
    MatrixXcd p;
    MatrixXcd z;  ///< Z_k(lambda)
};

struct AdmittanceParticipationFactor {
    cd lambda;
    Index mode = 0;
    int node = 0;
    MatrixXcd residue;  ///< Res_lambda Zhat_kk
    MatrixXcd p;
    MatrixXcd y;  ///< Y_k(lambda)
};

inline ImpedanceParticipationFactor impedance_participation_factor(const WholeSystemModel& model, int k,
                                                                   cd lambda) {
    const Index n = mode_index(model, lambda);
    ImpedanceParticipationFactor out;
    out.lambda = model.eigen().values[n];
    out.mode = n;
    out.node = k;
    out.residue = model.admittance_residue(k - 1, n);
    out.p = -out.residue.adjoint();
    out.z = model.port(k - 1).impedance_at(out.lambda);
    return out;
}

inline AdmittanceParticipationFactor admittance_participation_factor(const WholeSystemModel& model, int k,
                                                                     cd lambda) {
    const Index n = mode_index(model, lambda);
    AdmittanceParticipationFactor out;
    out.lambda = model.eigen().values[n];
    out.mode = n;
    out.node = k;
    out.residue = model.impedance_residue(k - 1, n);
    out.p = -out.residue.adjoint();
    out.y = model.port(k - 1).admittance_at(out.lambda);
    return out;
}

/// Perturbations above this fraction of ||Z_k(lambda)|| trigger a warning.
inline constexpr double kSmallPerturbation = 0.1;

/// First-order shift <p, dZ>.
inline cd predict_eigenvalue_shift(const MatrixXcd& p, const MatrixXcd& dz) { return frobenius_inner(p, dz); }

inline cd predict_eigenvalue_shift(const ImpedanceParticipationFactor& pf, const MatrixXcd& dz) {
    if (pf.z.size() != 0 && frobenius_norm(dz) > kSmallPerturbation * frobenius_norm(pf.z)) {
        warn("impedance perturbation at node " + std::to_string(pf.node) + " exceeds " +
             std::to_string(static_cast<int>(kSmallPerturbation * 100)) +
             "% of ||Z_k(lambda)||; first-order prediction may be inaccurate");
    }
    return predict_eigenvalue_shift(pf.p, dz);
}

inline cd predict_eigenvalue_shift(const AdmittanceParticipationFactor& pf, const MatrixXcd& dy) {
    return predict_eigenvalue_shift(pf.p, dy);
}

/// -trace(Res dZ), the same quantity written through the residue.
inline cd residue_trace_shift(const MatrixXcd& residue, const MatrixXcd& dz) {
    if (residue.rows() != dz.cols() || residue.cols() != dz.rows()) throw ShapeError("residue_trace_shift: shape mismatch");
    return -(residue * dz).trace();
}

inline double layer1_index(const MatrixXcd& p, const MatrixXcd& z) { return frobenius_norm(p) * frobenius_norm(z); }
inline double layer1_index(const ImpedanceParticipationFactor& pf) { return layer1_index(pf.p, pf.z); }

inline cd layer2_index(const MatrixXcd& p, const MatrixXcd& z) { return frobenius_inner(p, z); }
inline cd layer2_index(const ImpedanceParticipationFactor& pf) { return layer2_index(pf.p, pf.z); }

inline cd parameter_participation_factor(const MatrixXcd& p, const ImpedanceSensitivity& sens) {
    return frobenius_inner(p, sens.value);
}

inline cd parameter_participation_factor(const ImpedanceParticipationFactor& pf, const ImpedanceSensitivity& sens) {
    if (std::abs(sens.s - pf.lambda) > kPoleMatchTolerance * (1.0 + std::abs(pf.lambda))) {
        throw InputError("sensitivity evaluated at " + detail::format_complex(sens.s) + ", mode is " +
                         detail::format_complex(pf.lambda));
    }
    return parameter_participation_factor(pf.p, sens);
}

// ---------------------------------------------------------------------------
// State participation through the impedance chain
// ---------------------------------------------------------------------------

/// Step on a_mm relative to |a_mm| + |lambda| + 1.
inline constexpr double kChainStep = 1e-3;

/// dZ_k(lambda)/d a_mm by a fourth-order central difference, m a native
/// state of apparatus k.
inline MatrixXcd impedance_diagonal_sensitivity(const ApparatusPort& port, Index m, cd lambda) {
    if (m < 0 || m >= port.states()) {
        throw InputError("state index " + std::to_string(m) + " outside apparatus '" + port.label + "'");
    }
    const double a = port.model.A(m, m);
    const double h = kChainStep * (std::abs(a) + std::abs(lambda) + 1.0);
    auto z = [&](double d) {
        ApparatusPort q = port;
        q.model.A(m, m) = a + d;
        return MatrixXcd(q.impedance_at(lambda));
    };
    return (8.0 * (z(h) - z(-h)) - (z(2 * h) - z(-2 * h))) / (12.0 * h);
}

/// State participation of native state m of apparatus k in the mode at
/// lambda, with a_mm treated as a parameter.
inline cd state_pf_via_chain(const WholeSystemModel& model, int k, cd lambda, Index m) {
    const ImpedanceParticipationFactor pf = impedance_participation_factor(model, k, lambda);
    return frobenius_inner(pf.p, impedance_diagonal_sensitivity(model.port(k - 1), m, pf.lambda));
}

/// The same participation straight from the eigenvectors of the whole-system A.
inline cd state_pf_from_eigenvectors(const WholeSystemModel& model, int k, cd lambda, Index m) {
    const Index n = mode_index(model, lambda);
    const EigenSystem& es = model.eigen();
    const Index row = model.port_state_offset(k - 1) + m;
    return es.right(row, n) * es.left(n, row);
}

// ---------------------------------------------------------------------------
// Finite-difference validators
// ---------------------------------------------------------------------------

struct LemmaRow {
    double epsilon = 0.0;
    cd predicted;
    cd observed;
    double relative_error = 0.0;
};

/// Relative errors below this at every scale count as an exact prediction.
inline constexpr double kExactPrediction = 1e-9;

struct LemmaCheck {
    int node = 0;
    cd lambda;
    MatrixXcd dz;
    std::vector<LemmaRow> rows;
    bool exact = false;             ///< prediction matched to roundoff at every scale
    double order = std::nan("");    ///< log-log slope of relative error against epsilon
    double noise = 0.0;             ///< eigenvalue roundoff estimate (absolute)

    bool first_order(double lo = 0.8, double hi = 1.2) const { return exact || (order >= lo && order <= hi); }
    /// True when the remainder extrapolated from the largest scale to the
    /// smallest stays kMeasurableMargin above the roundoff there, so the
    /// slope reflects the remainder and not solver noise.
    bool order_measurable() const;
    double max_relative_error() const {
        double e = 0.0;
        for (const auto& r : rows) e = std::max(e, r.relative_error);
        return e;
    }
};

inline constexpr double kMeasurableMargin = 10.0;

inline bool LemmaCheck::order_measurable() const {
    if (exact) return true;
    if (rows.size() < 2) return false;
    auto lo = std::min_element(rows.begin(), rows.end(), [](const LemmaRow& a, const LemmaRow& b) { return a.epsilon < b.epsilon; });
    auto hi = std::max_element(rows.begin(), rows.end(), [](const LemmaRow& a, const LemmaRow& b) { return a.epsilon < b.epsilon; });
    const double remainder = hi->relative_error * lo->epsilon / hi->epsilon;
    const double floor = noise / std::max(std::abs(lo->observed), 1e-300);
    return remainder >= kMeasurableMargin * floor;
}

/// Roundoff scale of eigenvalue lambda_n: u ||B||_F kappa_B(lambda_n) for the
/// balanced matrix B the solver works on.
inline double eigenvalue_noise(const WholeSystemModel& model, Index n) {
    const EigenSystem& es = model.eigen();
    const VectorXd d = detail::balancing_scale(model.state_matrix());
    const MatrixXcd b = d.cwiseInverse().asDiagonal() * model.state_matrix() * d.asDiagonal();
    const double kappa = (es.left.row(n) * d.asDiagonal()).norm() * (d.cwiseInverse().asDiagonal() * es.right.col(n)).norm();
    return std::numeric_limits<double>::epsilon() * b.norm() * kappa;
}

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double den = static_cast<double>(n) * sxx - sx * sx;
    return den == 0.0 ? std::nan("") : (static_cast<double>(n) * sxy - sx * sy) / den;
}

inline const std::vector<double>& default_lemma_scales() {
    static const std::vector<double> s{1e-3, 1e-4, 1e-5};
    return s;
}

/// Rebuilds the system with Z_k -> Z_k + eps dZ (a constant series element)
/// for each eps and compares the shifted eigenvalue with <p, eps dZ>.
inline LemmaCheck verify_lemma_fd(const WholeSystemModel& model, int k, cd lambda, const MatrixXcd& dz,
                                  const std::vector<double>& scales = default_lemma_scales()) {
    if (scales.empty()) throw InputError("verify_lemma_fd: no perturbation scales");
    const ImpedanceParticipationFactor pf = impedance_participation_factor(model, k, lambda);
    if (dz.rows() != pf.p.rows() || dz.cols() != pf.p.cols()) throw ShapeError("verify_lemma_fd: dZ shape mismatch");
    LemmaCheck out;
    out.node = k;
    out.lambda = pf.lambda;
    out.dz = dz;
    out.noise = eigenvalue_noise(model, pf.mode);
    for (double eps : scales) {
        if (!(eps > 0.0)) throw InputError("verify_lemma_fd: scales must be positive");
        std::vector<ApparatusPort> ports = model.ports();
        ApparatusPort& port = ports[static_cast<std::size_t>(k - 1)];
        if (port.series.size() == 0) port.series = MatrixXcd::Zero(dz.rows(), dz.cols());
        port.series += eps * dz;
        const WholeSystemModel perturbed = model.with_ports(std::move(ports));
        LemmaRow row;
        row.epsilon = eps;
        row.predicted = predict_eigenvalue_shift(pf.p, eps * dz);
        row.observed = match_eigenvalue(perturbed, pf.lambda) - pf.lambda;
        const double denom = std::abs(row.observed);
        row.relative_error = denom > 0.0 ? std::abs(row.predicted - row.observed) / denom
                                         : (std::abs(row.predicted) > 0.0 ? INFINITY : 0.0);
        out.rows.push_back(row);
    }
    out.exact = out.max_relative_error() <= kExactPrediction;
    if (!out.exact && out.rows.size() >= 2) {
        std::vector<double> x, y;
        for (const auto& r : out.rows) {
            x.push_back(r.epsilon);
            y.push_back(std::max(r.relative_error, 1e-300));
        }
        out.order = loglog_slope(x, y);
    }
    return out;
}

/// Port whose impedance is factor * Z_k.
inline ApparatusPort scaled_port(ApparatusPort port, double factor) {
    switch (port.form) {
        case PortForm::Impedance:
            port.model.C *= factor;
            port.model.D *= factor;
            port.model.E *= factor;
            break;
        case PortForm::Admittance:
            port.model.C /= factor;
            port.model.D /= factor;
            break;
        case PortForm::Open:
            break;
    }
    if (port.series.size() != 0) port.series *= factor;
    return port;
}

/// Eigenvalue shift of the mode at lambda when Z_k is scaled to (1 + eps) Z_k.
inline cd scaled_impedance_shift(const WholeSystemModel& model, int k, cd lambda, double eps) {
    const Index n = mode_index(model, lambda);
    const cd base = model.eigen().values[n];
    std::vector<ApparatusPort> ports = model.ports();
    ports.at(static_cast<std::size_t>(k - 1)) = scaled_port(ports[static_cast<std::size_t>(k - 1)], 1.0 + eps);
    return match_eigenvalue(model.with_ports(std::move(ports)), base) - base;
}

// ---------------------------------------------------------------------------
// Grey-box layer report
// ---------------------------------------------------------------------------

struct ParameterParticipation {
    std::string parameter;
    cd value;
};

struct NodeLayers {
    int node = 0;
    double layer1 = 0.0;
    cd layer2;
    cd layer2_normalized;  ///< layer2 / sum over reported nodes of |layer2|
    std::vector<ParameterParticipation> layer3;
};

struct ModeLayers {
    Mode mode;
    std::vector<NodeLayers> nodes;
};

struct LayerReportOptions {
    std::vector<int> nodes;  ///< empty: every node
    bool layer3 = true;
    double relative_step = kParameterStep;
};

/// Parameter perturbations of every active parameter of the apparatus at node k.
inline std::vector<ParameterPerturbation> parameter_perturbations(const GreyboxSystem& sys, int k,
                                                                  double relative_step = kParameterStep) {
    std::vector<ParameterPerturbation> out;
    const auto& app = sys.apparatus(k);
    if (!app) return out;
    const Equilibrium& eq = *sys.equilibria.at(static_cast<std::size_t>(k - 1));
    for (const std::string& name : app->active_parameters()) {
        out.push_back(perturb_parameter(*app, eq, name, relative_step));
    }
    return out;
}

inline std::vector<ModeLayers> layer_report(const GreyboxSystem& sys, const std::vector<Mode>& modes,
                                            const LayerReportOptions& opt = {}) {
    const WholeSystemModel& model = sys.model;
    std::vector<int> nodes = opt.nodes;
    if (nodes.empty()) {
        for (int k = 1; k <= sys.node_count(); ++k) nodes.push_back(k);
    }
    for (int k : nodes) {
        if (k < 1 || k > sys.node_count()) throw InputError("node " + std::to_string(k) + " does not exist");
    }

    std::vector<std::vector<ParameterPerturbation>> perturbations(nodes.size());
    if (opt.layer3) {
        parallel_for(nodes.size(), [&](std::size_t i) {
            perturbations[i] = parameter_perturbations(sys, nodes[i], opt.relative_step);
        });
    }

    std::vector<ModeLayers> out(modes.size());
    parallel_for(modes.size(), [&](std::size_t j) {
        ModeLayers& ml = out[j];
        ml.mode = modes[j];
        double total = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const ImpedanceParticipationFactor pf = impedance_participation_factor(model, nodes[i], modes[j].lambda);
            NodeLayers nl;
            nl.node = nodes[i];
            nl.layer1 = layer1_index(pf);
            nl.layer2 = layer2_index(pf);
            for (const auto& pert : perturbations[i]) {
                nl.layer3.push_back({pert.parameter, parameter_participation_factor(pf, pert.at(pf.lambda))});
            }
            total += std::abs(nl.layer2);
            ml.nodes.push_back(std::move(nl));
        }
        for (auto& nl : ml.nodes) nl.layer2_normalized = total > 0.0 ? nl.layer2 / total : cd(0.0);
    });
    return out;
}

}  // namespace greybox
