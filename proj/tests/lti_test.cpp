#include <gtest/gtest.h>

#include <random>

#include "greybox/lti.hpp"
#include "greybox/spectrum.hpp"

using namespace greybox;

namespace {

MatrixXd random_stable(std::mt19937& rng, Index n) {
    std::normal_distribution<double> g(0.0, 1.0);
    MatrixXd a(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) a(i, j) = g(rng);
    // shift so that all eigenvalues sit in the left half-plane
    Eigen::EigenSolver<MatrixXd> es(a, false);
    const double shift = es.eigenvalues().real().maxCoeff() + 0.5;
    a -= shift * MatrixXd::Identity(n, n);
    return a;
}

MatrixXd random_matrix(std::mt19937& rng, Index r, Index c) {
    std::normal_distribution<double> g(0.0, 1.0);
    MatrixXd m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = g(rng);
    return m;
}

double rel(const MatrixXcd& a, const MatrixXcd& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace

TEST(Eval, FirstOrderAtZero) {
    StateSpaceForm m(MatrixXd::Constant(1, 1, -1.0), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1),
                     MatrixXd::Zero(1, 1));
    EXPECT_NEAR(eval(m, 0.0).real()(0, 0), 1.0, 1e-15);
}

TEST(Eval, PoleResidueAtZero) {
    PoleResidueForm pr;
    pr.poles = {cd(-2.0)};
    pr.residues = {MatrixXcd::Constant(1, 1, 3.0)};
    pr.direct = MatrixXcd::Constant(1, 1, 1.0);
    pr.linear = MatrixXcd::Zero(1, 1);
    EXPECT_NEAR(std::abs(eval(pr, 0.0)(0, 0) - 2.5), 0.0, 1e-15);
}

TEST(Eval, StateSpaceMatchesPoleResidueRandom) {
    std::mt19937 rng(7);
    const MatrixXd a = random_stable(rng, 5);
    StateSpaceForm m(a, random_matrix(rng, 5, 2), random_matrix(rng, 2, 5), random_matrix(rng, 2, 2));
    const PoleResidueForm pr = ss_to_pole_residue(m);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int i = 0; i < 50; ++i) {
        const cd s(u(rng), 10.0 * u(rng));
        // oracle: D + C (sI - A)^{-1} B with a dense inverse
        const MatrixXcd direct =
            m.D.cast<cd>() + m.C.cast<cd>() * (s * MatrixXcd::Identity(5, 5) - a.cast<cd>()).inverse() *
                                 m.B.cast<cd>();
        EXPECT_LT(rel(eval(m, s), direct), 1e-9);
        EXPECT_LT(rel(eval(pr, s), direct), 1e-9);
    }
}

TEST(Eval, AtPoleThrows) {
    StateSpaceForm m(MatrixXd::Constant(1, 1, -1.0), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1),
                     MatrixXd::Zero(1, 1));
    EXPECT_THROW(eval(m, cd(-1.0)), EvaluationAtPoleError);
    PoleResidueForm pr = ss_to_pole_residue(m);
    EXPECT_THROW(eval(pr, cd(-1.0)), EvaluationAtPoleError);
}

TEST(Eval, LinearTerm) {
    // Z = 1 + s
    StateSpaceForm z = StateSpaceForm::gain(MatrixXd::Ones(1, 1));
    z.E = MatrixXd::Ones(1, 1);
    EXPECT_NEAR(std::abs(eval(z, cd(0.0, 2.0))(0, 0) - cd(1.0, 2.0)), 0.0, 1e-15);
}

TEST(Eval, ShapeMismatchThrows) {
    EXPECT_THROW(StateSpaceForm(MatrixXd::Zero(2, 2), MatrixXd::Zero(3, 1), MatrixXd::Zero(1, 2),
                                MatrixXd::Zero(1, 1)),
                 ShapeError);
}

TEST(EigenDecompose, Diagonal) {
    MatrixXd a = MatrixXd::Zero(2, 2);
    a.diagonal() << -1.0, -2.0;
    const EigenSystem es = eigen_decompose(a);
    MatrixXcd lambda = MatrixXcd::Zero(2, 2);
    lambda.diagonal() = es.values;
    std::vector<double> v = {es.values[0].real(), es.values[1].real()};
    std::sort(v.begin(), v.end());
    EXPECT_NEAR(v[0], -2.0, 1e-15);
    EXPECT_NEAR(v[1], -1.0, 1e-15);
    // eigenvectors of a diagonal matrix are unit vectors
    EXPECT_NEAR((es.right.cwiseAbs() - MatrixXd::Identity(2, 2)).norm() *
                    (es.right.cwiseAbs() - MatrixXd::Identity(2, 2).rowwise().reverse()).norm(),
                0.0, 1e-15);
    EXPECT_LT((es.left * es.right - MatrixXcd::Identity(2, 2)).norm(), 1e-15);
}

TEST(EigenDecompose, Companion) {
    MatrixXd a(2, 2);
    a << 0, 1, -2, -3;
    const EigenSystem es = eigen_decompose(a);
    // roots of s^2 + 3s + 2
    const double disc = std::sqrt(9.0 - 8.0);
    const double r1 = (-3.0 + disc) / 2.0, r2 = (-3.0 - disc) / 2.0;
    EXPECT_NEAR(std::abs(es.values[nearest_index(es.values, r1)] - r1), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(es.values[nearest_index(es.values, r2)] - r2), 0.0, 1e-12);
}

TEST(EigenDecompose, RandomResidualProperty) {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixXd a = random_matrix(rng, 6, 6);
        const EigenSystem es = eigen_decompose(a);
        MatrixXcd lambda = MatrixXcd::Zero(6, 6);
        lambda.diagonal() = es.values;
        EXPECT_LE((es.left * a.cast<cd>() * es.right - lambda).norm(), 1e-8 * a.norm());
        EXPECT_LE((es.left * es.right - MatrixXcd::Identity(6, 6)).norm(), 1e-9 * 6);
    }
}

TEST(EigenDecompose, RepeatedThrows) {
    MatrixXd a = MatrixXd::Identity(2, 2) * -1.0;
    EXPECT_THROW(eigen_decompose(a), DegenerateSpectrumError);
    MatrixXd jordan(2, 2);
    jordan << -1, 1, 0, -1;
    EXPECT_THROW(eigen_decompose(jordan), DegenerateSpectrumError);
}

TEST(EigenDecompose, ComplexInput) {
    MatrixXcd a(2, 2);
    a << cd(-1, 1), cd(0.5, 0), cd(0, 0.2), cd(-3, -2);
    const EigenSystem es = eigen_decompose(a);
    MatrixXcd lambda = MatrixXcd::Zero(2, 2);
    lambda.diagonal() = es.values;
    EXPECT_LT((es.left * a * es.right - lambda).norm(), 1e-12);
}

TEST(PoleResidue, FirstOrder) {
    StateSpaceForm m(MatrixXd::Constant(1, 1, -1.0), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1),
                     MatrixXd::Zero(1, 1));
    const PoleResidueForm pr = ss_to_pole_residue(m);
    ASSERT_EQ(pr.poles.size(), 1u);
    EXPECT_NEAR(std::abs(pr.poles[0] - cd(-1.0)), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(pr.residues[0](0, 0) - cd(1.0)), 0.0, 1e-15);
}

TEST(PoleResidue, TwoPoles) {
    MatrixXd a = MatrixXd::Zero(2, 2);
    a.diagonal() << -1.0, -2.0;
    StateSpaceForm m(a, MatrixXd::Ones(2, 1), MatrixXd::Ones(1, 2), MatrixXd::Zero(1, 1));
    const PoleResidueForm pr = ss_to_pole_residue(m);
    // 1/(s+1) + 1/(s+2): both residues are 1
    for (const auto& r : pr.residues) EXPECT_NEAR(std::abs(r(0, 0) - cd(1.0)), 0.0, 1e-14);
}

TEST(PoleResidue, LimitFormulaOracle) {
    std::mt19937 rng(3);
    const MatrixXd a = random_stable(rng, 3);
    StateSpaceForm m(a, random_matrix(rng, 3, 1), random_matrix(rng, 1, 3), MatrixXd::Zero(1, 1));
    const PoleResidueForm pr = ss_to_pole_residue(m);
    for (std::size_t n = 0; n < pr.poles.size(); ++n) {
        const cd s = pr.poles[n] + 1e-6;
        const cd limit = (s - pr.poles[n]) * eval(m, s)(0, 0);
        EXPECT_LT(std::abs(limit - pr.residues[n](0, 0)) / std::abs(pr.residues[n](0, 0)), 1e-4);
    }
}

TEST(PoleResidue, ConjugateClosure) {
    std::mt19937 rng(5);
    const MatrixXd a = random_stable(rng, 6);
    StateSpaceForm m(a, random_matrix(rng, 6, 2), random_matrix(rng, 2, 6), MatrixXd::Zero(2, 2));
    const PoleResidueForm pr = ss_to_pole_residue(m);
    for (std::size_t n = 0; n < pr.poles.size(); ++n) {
        if (std::abs(pr.poles[n].imag()) < 1e-12) continue;
        bool found = false;
        for (std::size_t k = 0; k < pr.poles.size(); ++k) {
            if (std::abs(pr.poles[k] - std::conj(pr.poles[n])) < 1e-10) {
                EXPECT_LT((pr.residues[k] - pr.residues[n].conjugate()).norm(), 1e-10);
                found = true;
            }
        }
        EXPECT_TRUE(found);
    }
    const cd s(0.3, 1.7);
    EXPECT_LT((eval(pr, std::conj(s)) - eval(pr, s).conjugate()).norm(), 1e-12);
}

TEST(ResidueAt, FirstOrder) {
    StateSpaceForm m(MatrixXd::Constant(1, 1, -1.0), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1),
                     MatrixXd::Zero(1, 1));
    EXPECT_NEAR(std::abs(residue_at(m, cd(-1.0))(0, 0) - cd(1.0)), 0.0, 1e-14);
}

TEST(ResidueAt, HandPartialFractions) {
    // (s+3)/((s+1)(s+2)) in controllable canonical form
    MatrixXd a(2, 2);
    a << 0, 1, -2, -3;
    MatrixXd b(2, 1);
    b << 0, 1;
    MatrixXd c(1, 2);
    c << 3, 1;
    StateSpaceForm m(a, b, c, MatrixXd::Zero(1, 1));
    // (s+3)/(s+2) at s = -1
    EXPECT_NEAR(std::abs(residue_at(m, cd(-1.0))(0, 0) - cd(2.0)), 0.0, 1e-12);
    EXPECT_THROW(residue_at(m, cd(-5.0)), NoPoleError);
}

TEST(ResidueAt, DualRouteRandom) {
    std::mt19937 rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        const MatrixXd a = random_stable(rng, 4);
        StateSpaceForm m(a, random_matrix(rng, 4, 2), random_matrix(rng, 2, 4), random_matrix(rng, 2, 2));
        const EigenSystem es = eigen_decompose(a);
        for (Index n = 0; n < es.size(); ++n) {
            const cd lambda = es.values[n];
            const cd h = 1e-7 * (1.0 + std::abs(lambda));
            // symmetric limit: average of (s - lambda) G(s) at lambda +/- h removes the O(h) term
            const MatrixXcd lim = 0.5 * (h * eval(m, lambda + h) - h * eval(m, lambda - h));
            const MatrixXcd res = residue_at(m, lambda);
            EXPECT_LT(rel(res, lim), 1e-6);
        }
    }
}

TEST(ResidueAt, PoleResidueForm) {
    PoleResidueForm pr;
    pr.poles = {cd(-1.0), cd(-1.0 + 1e-9)};
    pr.residues = {MatrixXcd::Ones(1, 1), MatrixXcd::Ones(1, 1)};
    pr.direct = pr.linear = MatrixXcd::Zero(1, 1);
    EXPECT_THROW(residue_at(pr, cd(-1.0)), DegenerateSpectrumError);
    EXPECT_THROW(residue_at(pr, cd(-3.0)), NoPoleError);
}

TEST(Frobenius, Identity) {
    EXPECT_NEAR(std::abs(frobenius_inner(MatrixXcd::Identity(2, 2), MatrixXcd::Identity(2, 2)) - cd(2.0)), 0.0,
                1e-15);
}

TEST(Frobenius, ConjugatesFirstArgument) {
    MatrixXcd v = MatrixXcd::Zero(2, 2), w = MatrixXcd::Zero(2, 2);
    v(0, 0) = cd(0, 1);
    w(0, 0) = 1.0;
    EXPECT_NEAR(std::abs(frobenius_inner(v, w) - cd(0, -1)), 0.0, 1e-15);
}

TEST(Frobenius, CauchyProperty) {
    std::mt19937 rng(9);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        MatrixXcd v(2, 2), w(2, 2);
        for (Index k = 0; k < 4; ++k) {
            v(k) = cd(g(rng), g(rng));
            w(k) = cd(g(rng), g(rng));
        }
        EXPECT_LE(std::abs(frobenius_inner(v, w)), frobenius_norm(v) * frobenius_norm(w) * (1 + 1e-14));
        const cd alpha(g(rng), g(rng));
        const MatrixXcd aligned = alpha * v;
        EXPECT_NEAR(std::abs(frobenius_inner(v, aligned)), frobenius_norm(v) * frobenius_norm(aligned),
                    1e-12 * frobenius_norm(v) * frobenius_norm(aligned));
    }
    EXPECT_THROW(frobenius_inner(MatrixXcd::Zero(2, 2), MatrixXcd::Zero(1, 2)), ShapeError);
}

TEST(StateParticipation, DiagonalIsIdentity) {
    MatrixXd a = MatrixXd::Zero(3, 3);
    a.diagonal() << -1, -2, -3;
    const MatrixXcd p = state_participation_matrix(eigen_decompose(a));
    EXPECT_LT((p - MatrixXcd::Identity(3, 3)).norm(), 1e-15);
}

TEST(StateParticipation, Companion) {
    MatrixXd a(2, 2);
    a << 0, 1, -2, -3;
    const EigenSystem es = eigen_decompose(a);
    const MatrixXcd p = state_participation_matrix(es);
    // hand eigenvectors: Phi = [[1,1],[-1,-2]] for lambda = (-1,-2)
    Eigen::Matrix2d phi;
    phi << 1, 1, -1, -2;
    const Eigen::Matrix2d psi = phi.inverse();
    const Index n1 = nearest_index(es.values, -1.0), n2 = nearest_index(es.values, -2.0);
    for (Index m = 0; m < 2; ++m) {
        EXPECT_NEAR(std::abs(p(m, n1) - psi(0, m) * phi(m, 0)), 0.0, 1e-12);
        EXPECT_NEAR(std::abs(p(m, n2) - psi(1, m) * phi(m, 1)), 0.0, 1e-12);
    }
    EXPECT_NEAR(p(0, n1).real(), 2.0, 1e-12);
    EXPECT_NEAR(p(1, n1).real(), -1.0, 1e-12);
}

TEST(StateParticipation, ColumnSumsAndSensitivity) {
    std::mt19937 rng(13);
    const MatrixXd a = random_matrix(rng, 5, 5);
    const EigenSystem es = eigen_decompose(a);
    const MatrixXcd p = state_participation_matrix(es);
    for (Index n = 0; n < 5; ++n) EXPECT_NEAR(std::abs(p.col(n).sum() - cd(1.0)), 0.0, 1e-9);
    const double eps = 1e-6;
    for (Index m = 0; m < 5; ++m) {
        MatrixXd ap = a;
        const double step = eps * (1.0 + std::abs(a(m, m)));
        ap(m, m) += step;
        const EigenSystem pe = eigen_decompose(ap);
        for (Index n = 0; n < 5; ++n) {
            const cd dl = (pe.values[nearest_index(pe.values, es.values[n])] - es.values[n]) / step;
            const double scale = std::max(std::abs(p(m, n)), 1e-3);
            EXPECT_LT(std::abs(dl - p(m, n)) / scale, 1e-3) << m << "," << n;
        }
    }
}

TEST(Helpers, Embedding) {
    const Eigen::Matrix2d e = complex_embedding(cd(1.0, 2.0));
    EXPECT_EQ(e(0, 1), -2.0);
    EXPECT_EQ(e(1, 0), 2.0);
    EXPECT_EQ((rotation90() * rotation90() + Eigen::Matrix2d::Identity()).norm(), 0.0);
    const auto f = logspace(1.0, 100.0, 3);
    EXPECT_NEAR(f[1], 10.0, 1e-12);
}

TEST(SpectrumCsv, RoundTrip) {
    SampledSpectrum s;
    s.omega = {hz_to_rad(1.0), hz_to_rad(2.0)};
    MatrixXcd m(2, 2);
    m << cd(1, 2), cd(3, -4), cd(-0.5, 0), cd(1e-7, 2e5);
    s.samples = {m, 2.0 * m};
    std::stringstream ss;
    write_spectrum_csv(ss, s);
    const std::string text = ss.str();
    EXPECT_EQ(text.substr(0, text.find('\n')), "freq_hz,re_11,im_11,re_12,im_12,re_21,im_21,re_22,im_22");
    const SampledSpectrum back = read_spectrum_csv(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_NEAR(back.omega[1], s.omega[1], 1e-9);
    EXPECT_LT((back.samples[1] - s.samples[1]).norm(), 1e-9);
}

TEST(SpectrumCsv, Errors) {
    std::stringstream bad_header("freq,re_11,im_11\n1,2,3\n");
    EXPECT_THROW(read_spectrum_csv(bad_header), InputError);
    std::stringstream bad_row("freq_hz,re_11,im_11\n1,2,3\n2,x,3\n");
    try {
        read_spectrum_csv(bad_row);
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
    std::stringstream unsorted("freq_hz,re_11,im_11\n2,2,3\n1,2,3\n");
    EXPECT_THROW(read_spectrum_csv(unsorted), InputError);
    std::stringstream single("freq_hz,re_11,im_11\n1,2,3\n");
    EXPECT_THROW(read_spectrum_csv(single), InputError);
}
