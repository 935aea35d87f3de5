#pragma once

// Linear time-invariant matrix transfer functions: state-space and
// pole-residue forms, evaluation, eigendecomposition with left/right
// eigenvectors, residue extraction and the Frobenius inner-product algebra.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "greybox/error.hpp"

namespace greybox {

using cd = std::complex<double>;
using Eigen::Index;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;

/// Complex frequency s = sigma + j*omega in rad/s.
using ComplexFrequency = cd;

namespace detail {

inline std::string format_complex(cd z) {
    std::ostringstream os;
    os.precision(10);
    os << z.real() << (z.imag() < 0 ? " - " : " + ") << std::abs(z.imag()) << "j";
    return os.str();
}

inline void require_finite(cd s, const char* what) {
    if (!std::isfinite(s.real()) || !std::isfinite(s.imag())) {
        throw InputError(std::string(what) + ": complex frequency must be finite");
    }
}

template <typename Derived>
bool is_exactly_real(const Eigen::MatrixBase<Derived>& m) {
    if constexpr (std::is_same_v<typename Derived::Scalar, cd>) {
        return m.imag().isZero(0.0);
    } else {
        return true;
    }
}

}  // namespace detail

/// Matrix transfer function G(s) = D + s*E + C (sI - A)^{-1} B.
///
/// E is the linear-in-s term; it is zero for proper models and lets
/// inductive impedances and capacitive admittances be represented exactly.
template <typename Scalar>
struct StateSpace {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    Matrix A;
    Matrix B;
    Matrix C;
    Matrix D;
    Matrix E;

    StateSpace() = default;

    StateSpace(Matrix a, Matrix b, Matrix c, Matrix d)
        : A(std::move(a)), B(std::move(b)), C(std::move(c)), D(std::move(d)) {
        E = Matrix::Zero(D.rows(), D.cols());
        validate();
    }

    StateSpace(Matrix a, Matrix b, Matrix c, Matrix d, Matrix e)
        : A(std::move(a)), B(std::move(b)), C(std::move(c)), D(std::move(d)), E(std::move(e)) {
        validate();
    }

    /// Static gain (no states).
    static StateSpace gain(Matrix d) {
        const Index q = d.rows();
        const Index p = d.cols();
        return StateSpace(Matrix(0, 0), Matrix(0, p), Matrix(q, 0), std::move(d));
    }

    Index states() const { return A.rows(); }
    Index inputs() const { return D.cols(); }
    Index outputs() const { return D.rows(); }
    bool has_linear_term() const { return !E.isZero(0.0); }

    void validate() const {
        const Index n = A.rows();
        if (A.cols() != n || B.rows() != n || C.cols() != n || C.rows() != D.rows() ||
            B.cols() != D.cols() || E.rows() != D.rows() || E.cols() != D.cols()) {
            std::ostringstream os;
            os << "state-space dimensions inconsistent: A " << A.rows() << "x" << A.cols() << ", B "
               << B.rows() << "x" << B.cols() << ", C " << C.rows() << "x" << C.cols() << ", D "
               << D.rows() << "x" << D.cols() << ", E " << E.rows() << "x" << E.cols();
            throw ShapeError(os.str());
        }
    }

    StateSpace<cd> to_complex() const {
        return StateSpace<cd>(A.template cast<cd>(), B.template cast<cd>(), C.template cast<cd>(),
                              D.template cast<cd>(), E.template cast<cd>());
    }

    /// Sub-system from a contiguous block of inputs and outputs.
    StateSpace block(Index out0, Index nout, Index in0, Index nin) const {
        return StateSpace(A, B.middleCols(in0, nin), C.middleRows(out0, nout),
                          D.block(out0, in0, nout, nin), E.block(out0, in0, nout, nin));
    }
};

using StateSpaceForm = StateSpace<double>;
using ComplexStateSpace = StateSpace<cd>;

/// Real part of a complex realization; throws if any imaginary part is nonzero.
inline StateSpaceForm real_part(const ComplexStateSpace& m) {
    if (!detail::is_exactly_real(m.A) || !detail::is_exactly_real(m.B) ||
        !detail::is_exactly_real(m.C) || !detail::is_exactly_real(m.D) ||
        !detail::is_exactly_real(m.E)) {
        throw InputError("realization has complex coefficients");
    }
    return StateSpaceForm(m.A.real(), m.B.real(), m.C.real(), m.D.real(), m.E.real());
}

/// G(s) = direct + s*linear + sum_n residues[n] / (s - poles[n]).
struct PoleResidueForm {
    std::vector<cd> poles;
    std::vector<MatrixXcd> residues;
    MatrixXcd direct;
    MatrixXcd linear;

    Index outputs() const { return direct.rows(); }
    Index inputs() const { return direct.cols(); }

    void validate() const {
        if (poles.size() != residues.size()) {
            throw ShapeError("pole/residue count mismatch");
        }
        if (linear.rows() != direct.rows() || linear.cols() != direct.cols()) {
            throw ShapeError("direct and linear terms differ in shape");
        }
        for (const auto& r : residues) {
            if (r.rows() != direct.rows() || r.cols() != direct.cols()) {
                throw ShapeError("residue matrix shape differs from direct term");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Eigendecomposition
// ---------------------------------------------------------------------------

/// Eigenvalues with right eigenvectors (columns of `right`) and left
/// eigenvectors (rows of `left`), normalised so that left * right = I.
struct EigenSystem {
    VectorXcd values;
    MatrixXcd right;
    MatrixXcd left;

    Index size() const { return values.size(); }
};

/// Relative distinctness threshold for eigenvalues (times ||A||_F).
inline constexpr double kDistinctTolerance = 1e-8;

namespace detail {

inline void check_distinct(const VectorXcd& values, double scale) {
    const double gap = kDistinctTolerance * std::max(scale, 1e-300);
    for (Index i = 0; i < values.size(); ++i) {
        for (Index j = i + 1; j < values.size(); ++j) {
            if (std::abs(values[i] - values[j]) <= gap) {
                throw DegenerateSpectrumError("eigenvalues " + format_complex(values[i]) + " and " +
                                              format_complex(values[j]) +
                                              " are not distinguishable; residues at this cluster "
                                              "cannot be separated");
            }
        }
    }
}

/// Diagonal similarity D (powers of two) that balances row and column norms
/// of a, as in LAPACK gebal without permutation. D^{-1} a D is computed exactly.
template <typename Derived>
VectorXd balancing_scale(const Eigen::MatrixBase<Derived>& a) {
    const Index n = a.rows();
    VectorXd d = VectorXd::Ones(n);
    bool converged = false;
    for (int sweep = 0; sweep < 100 && !converged; ++sweep) {
        converged = true;
        for (Index i = 0; i < n; ++i) {
            double c = 0.0, r = 0.0;
            for (Index j = 0; j < n; ++j) {
                if (j == i) continue;
                c += std::abs(a(j, i)) * d[i] / d[j];  // column i of D^{-1} a D
                r += std::abs(a(i, j)) * d[j] / d[i];  // row i
            }
            if (c == 0.0 || r == 0.0) continue;
            double f = 1.0;
            const double total = c + r;
            while (c < r / 2.0) {
                c *= 2.0;
                r /= 2.0;
                f *= 2.0;
            }
            while (c >= r * 2.0) {
                c /= 2.0;
                r *= 2.0;
                f /= 2.0;
            }
            if (c + r < 0.95 * total) {
                converged = false;
                d[i] *= f;
            }
        }
    }
    return d;
}

inline EigenSystem finish_eigensystem(VectorXcd values, MatrixXcd right, const MatrixXcd& a) {
    const Index n = values.size();
    for (Index j = 0; j < n; ++j) {
        const double norm = right.col(j).norm();
        if (norm > 0.0) right.col(j) /= norm;
    }
    Eigen::PartialPivLU<MatrixXcd> lu(right);
    MatrixXcd left = lu.solve(MatrixXcd::Identity(n, n));

    const double scale = a.norm();
    const double norm_residual = (left * right - MatrixXcd::Identity(n, n)).norm();
    MatrixXcd lambda = MatrixXcd::Zero(n, n);
    lambda.diagonal() = values;
    const double diag_residual = (left * a * right - lambda).norm();
    if (!(norm_residual <= 1e-9 * std::max<double>(1.0, static_cast<double>(n))) ||
        !(diag_residual <= 1e-8 * std::max(scale, 1e-300))) {
        std::ostringstream os;
        os << "eigenvector matrix is numerically singular (||PsiPhi - I|| = " << norm_residual
           << ", ||PsiAPhi - Lambda|| = " << diag_residual << "); spectrum is near-defective";
        throw DegenerateSpectrumError(os.str());
    }
    return EigenSystem{std::move(values), std::move(right), std::move(left)};
}

}  // namespace detail

/// Eigendecomposition of a real state matrix. Requires distinct eigenvalues.
inline EigenSystem eigen_decompose(const MatrixXd& a) {
    if (a.rows() != a.cols()) throw ShapeError("eigen_decompose: matrix must be square");
    const Index n = a.rows();
    if (n == 0) return EigenSystem{VectorXcd(0), MatrixXcd(0, 0), MatrixXcd(0, 0)};
    if (!a.allFinite()) throw InputError("eigen_decompose: matrix has non-finite entries");
    const VectorXd d = detail::balancing_scale(a);
    const MatrixXd b = d.cwiseInverse().asDiagonal() * a * d.asDiagonal();
    Eigen::EigenSolver<MatrixXd> solver(b, true);
    if (solver.info() != Eigen::Success) throw DegenerateSpectrumError("eigen solver did not converge");
    VectorXcd values = solver.eigenvalues();
    detail::check_distinct(values, a.norm());
    MatrixXcd right = d.cast<cd>().asDiagonal() * solver.eigenvectors();
    return detail::finish_eigensystem(std::move(values), std::move(right), a.cast<cd>());
}

/// Eigendecomposition of a complex state matrix.
inline EigenSystem eigen_decompose(const MatrixXcd& a) {
    if (a.rows() != a.cols()) throw ShapeError("eigen_decompose: matrix must be square");
    const Index n = a.rows();
    if (n == 0) return EigenSystem{VectorXcd(0), MatrixXcd(0, 0), MatrixXcd(0, 0)};
    if (detail::is_exactly_real(a)) return eigen_decompose(MatrixXd(a.real()));
    if (!a.allFinite()) throw InputError("eigen_decompose: matrix has non-finite entries");
    const VectorXd d = detail::balancing_scale(a);
    const MatrixXcd b = d.cwiseInverse().cast<cd>().asDiagonal() * a * d.cast<cd>().asDiagonal();
    Eigen::ComplexEigenSolver<MatrixXcd> solver(b, true);
    if (solver.info() != Eigen::Success) throw DegenerateSpectrumError("eigen solver did not converge");
    VectorXcd values = solver.eigenvalues();
    detail::check_distinct(values, a.norm());
    MatrixXcd right = d.cast<cd>().asDiagonal() * solver.eigenvectors();
    return detail::finish_eigensystem(std::move(values), std::move(right), a);
}

/// Index of the eigenvalue nearest to `target`.
inline Index nearest_index(const VectorXcd& values, cd target) {
    Index best = -1;
    double best_distance = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < values.size(); ++i) {
        const double d = std::abs(values[i] - target);
        if (d < best_distance) {
            best_distance = d;
            best = i;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <typename Scalar>
MatrixXcd eval(const StateSpace<Scalar>& model, ComplexFrequency s) {
    detail::require_finite(s, "eval");
    const Index n = model.states();
    MatrixXcd g = model.D.template cast<cd>() + s * model.E.template cast<cd>();
    if (n == 0) return g;
    MatrixXcd pencil = -model.A.template cast<cd>();
    pencil.diagonal().array() += s;
    Eigen::PartialPivLU<MatrixXcd> lu(pencil);
    if (!(lu.rcond() > 1e-10)) {
        Eigen::ComplexEigenSolver<MatrixXcd> es(model.A.template cast<cd>(), false);
        const VectorXcd& poles = es.eigenvalues();
        const Index i = nearest_index(poles, s);
        if (std::abs(poles[i] - s) <= 1e-12 * (1.0 + std::abs(s))) {
            throw EvaluationAtPoleError("evaluation at s = " + detail::format_complex(s) +
                                        " coincides with pole " + detail::format_complex(poles[i]));
        }
    }
    g.noalias() += model.C.template cast<cd>() * lu.solve(model.B.template cast<cd>());
    return g;
}

inline MatrixXcd eval(const PoleResidueForm& model, ComplexFrequency s) {
    detail::require_finite(s, "eval");
    MatrixXcd g = model.direct + s * model.linear;
    for (std::size_t n = 0; n < model.poles.size(); ++n) {
        const cd gap = s - model.poles[n];
        if (std::abs(gap) <= 1e-12 * (1.0 + std::abs(s))) {
            throw EvaluationAtPoleError("evaluation at s = " + detail::format_complex(s) +
                                        " coincides with pole " + detail::format_complex(model.poles[n]));
        }
        g += model.residues[n] / gap;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Residues
// ---------------------------------------------------------------------------

/// Residue matrix (C phi_n)(psi_n B) of mode n.
template <typename CDerived, typename BDerived>
MatrixXcd modal_residue(const EigenSystem& es, Index n, const Eigen::MatrixBase<CDerived>& c,
                        const Eigen::MatrixBase<BDerived>& b) {
    const VectorXcd observed = c.template cast<cd>() * es.right.col(n);
    const Eigen::RowVectorXcd controlled = es.left.row(n) * b.template cast<cd>();
    return observed * controlled;
}

template <typename Scalar>
PoleResidueForm ss_to_pole_residue(const StateSpace<Scalar>& model) {
    const EigenSystem es = eigen_decompose(model.A);
    PoleResidueForm out;
    out.direct = model.D.template cast<cd>();
    out.linear = model.E.template cast<cd>();
    for (Index n = 0; n < es.size(); ++n) {
        out.poles.push_back(es.values[n]);
        out.residues.push_back(modal_residue(es, n, model.C, model.B));
    }
    return out;
}

/// Relative tolerance for identifying a requested pole with a model pole.
inline constexpr double kPoleMatchTolerance = 1e-6;

template <typename Scalar>
MatrixXcd residue_at(const StateSpace<Scalar>& model, ComplexFrequency lambda) {
    detail::require_finite(lambda, "residue_at");
    const EigenSystem es = eigen_decompose(model.A);
    if (es.size() == 0) throw NoPoleError("model has no poles");
    const Index n = nearest_index(es.values, lambda);
    if (std::abs(es.values[n] - lambda) > kPoleMatchTolerance * (1.0 + std::abs(lambda))) {
        throw NoPoleError(detail::format_complex(lambda) + " is not a pole of the model (nearest " +
                          detail::format_complex(es.values[n]) + ")");
    }
    return modal_residue(es, n, model.C, model.B);
}

inline MatrixXcd residue_at(const PoleResidueForm& model, ComplexFrequency lambda) {
    detail::require_finite(lambda, "residue_at");
    const double tol = kPoleMatchTolerance * (1.0 + std::abs(lambda));
    int found = -1;
    for (std::size_t n = 0; n < model.poles.size(); ++n) {
        if (std::abs(model.poles[n] - lambda) <= tol) {
            if (found >= 0) {
                throw DegenerateSpectrumError("repeated pole near " + detail::format_complex(lambda));
            }
            found = static_cast<int>(n);
        }
    }
    if (found < 0) throw NoPoleError(detail::format_complex(lambda) + " is not a pole of the model");
    return model.residues[static_cast<std::size_t>(found)];
}

// ---------------------------------------------------------------------------
// Frobenius algebra
// ---------------------------------------------------------------------------

/// <V, W> = sum conj(V_hl) W_hl.
template <typename DV, typename DW>
cd frobenius_inner(const Eigen::MatrixBase<DV>& v, const Eigen::MatrixBase<DW>& w) {
    if (v.rows() != w.rows() || v.cols() != w.cols()) {
        throw ShapeError("frobenius_inner: shape mismatch");
    }
    return (v.template cast<cd>().conjugate().cwiseProduct(w.template cast<cd>())).sum();
}

template <typename DV>
double frobenius_norm(const Eigen::MatrixBase<DV>& v) {
    return std::sqrt(std::max(0.0, frobenius_inner(v, v).real()));
}

/// P(m, n) = psi_nm * phi_mn, the participation of state m in mode n.
inline MatrixXcd state_participation_matrix(const EigenSystem& es) {
    return es.right.cwiseProduct(es.left.transpose());
}

// ---------------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------------

inline std::vector<double> logspace(double lo, double hi, std::size_t count) {
    if (count < 2 || !(lo > 0.0) || !(hi > lo)) throw InputError("logspace: need 0 < lo < hi, count >= 2");
    std::vector<double> out(count);
    const double a = std::log10(lo);
    const double b = std::log10(hi);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
    }
    return out;
}

/// 2x2 real matrix [[a, -b], [b, a]] embedding the complex number a + jb.
inline Eigen::Matrix2d complex_embedding(cd z) {
    Eigen::Matrix2d m;
    m << z.real(), -z.imag(), z.imag(), z.real();
    return m;
}

/// Rotation by +90 degrees, the dq embedding of j.
inline Eigen::Matrix2d rotation90() { return complex_embedding(cd(0.0, 1.0)); }

}  // namespace greybox
