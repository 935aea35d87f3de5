#include <gtest/gtest.h>

#include <cstdlib>
#include <random>

#include "greybox/participation.hpp"

using namespace greybox;

namespace {

const std::string kSystems = GREYBOX_SYSTEMS_DIR;

const GreyboxSystem& scalar_sanity() {
    static const GreyboxSystem s = build_system(load_system(kSystems + "/scalar_sanity.json"));
    return s;
}

const GreyboxSystem& three_node() {
    static const GreyboxSystem s = build_system(load_system(kSystems + "/three_node.json"));
    return s;
}

MatrixXcd random_matrix(std::mt19937& rng, Index n) {
    std::normal_distribution<double> g;
    MatrixXcd m(n, n);
    for (Index i = 0; i < m.size(); ++i) m(i) = cd(g(rng), g(rng));
    return m;
}

// (mode, node) pairs whose first-order shift stands clear of eigenvalue roundoff
std::vector<std::pair<Mode, int>> participating_pairs(const GreyboxSystem& sys, double floor = 1e-2) {
    std::vector<std::pair<Mode, int>> out;
    for (const Mode& m : system_modes(sys.model)) {
        for (int k = 1; k <= sys.node_count(); ++k) {
            if (layer1_index(impedance_participation_factor(sys.model, k, m.lambda)) >= floor) out.push_back({m, k});
        }
    }
    return out;
}

// two scalar areas joined by a weak resistive tie
WholeSystemModel two_area(double tie_r) {
    NetworkDescription net;
    net.node_count = 2;
    net.frame = Frame::Scalar;
    net.shunts = {{1, 1.0, 0.0, 0.0}, {2, 1.0, 0.0, 0.0}};
    net.branches = {{1, 2, tie_r, 0.0, 0.0}};
    auto rl = [](double r, double l) {
        StateSpaceForm z = StateSpaceForm::gain(MatrixXd::Constant(1, 1, r));
        z.E = MatrixXd::Constant(1, 1, l);
        return ApparatusPort::impedance(z, {}, "rl");
    };
    return assemble_whole_system(net, {rl(1.0, 1.0), rl(1.0, 0.5)});
}

}  // namespace

TEST(Modes, OnePerConjugatePairSorted) {
    const auto& m = three_node().model;
    const auto modes = system_modes(m);
    Index expected = 0;
    for (Index n = 0; n < m.eigen().size(); ++n) expected += m.eigen().values[n].imag() >= 0.0;
    EXPECT_EQ(static_cast<Index>(modes.size()), expected);
    for (std::size_t i = 1; i < modes.size(); ++i) EXPECT_LE(modes[i - 1].freq_hz(), modes[i].freq_hz());
    for (const auto& md : modes) EXPECT_GE(md.lambda.imag(), 0.0);
    EXPECT_DOUBLE_EQ(damping_ratio(cd(-3.0, 4.0)), 0.6);
    EXPECT_EQ(damping_ratio(cd(0.0)), 0.0);
}

TEST(Modes, Selection) {
    const auto modes = system_modes(three_node().model);
    const auto window = select_modes(modes, {1.0, 100.0, std::nullopt});
    ASSERT_FALSE(window.empty());
    for (const auto& m : window) {
        EXPECT_GE(m.freq_hz(), 1.0);
        EXPECT_LE(m.freq_hz(), 100.0);
    }
    const auto weak = select_modes(modes, {std::nullopt, std::nullopt, 0.1});
    for (const auto& m : weak) EXPECT_LT(m.damping(), 0.1);
    EXPECT_LT(weak.size(), modes.size());
}

TEST(ImpedancePF, ScalarSanityIsMinusOne) {
    // Yhat_11 = 1/(s + 2): residue 1 at -2
    const auto pf = impedance_participation_factor(scalar_sanity().model, 1, cd(-2.0));
    EXPECT_NEAR(std::abs(pf.residue(0, 0) - 1.0), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(pf.p(0, 0) + 1.0), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(pf.z(0, 0) + 1.0), 0.0, 1e-12);
    EXPECT_THROW(impedance_participation_factor(scalar_sanity().model, 1, cd(-3.0)), NoPoleError);
}

TEST(ImpedancePF, ConjugateSymmetry) {
    const auto& m = three_node().model;
    for (const auto& md : system_modes(m)) {
        if (md.lambda.imag() == 0.0) continue;
        for (int k = 1; k <= 3; ++k) {
            const auto a = impedance_participation_factor(m, k, md.lambda);
            const auto b = impedance_participation_factor(m, k, std::conj(md.lambda));
            EXPECT_LT((b.p - a.p.conjugate()).norm(), 1e-9 * a.p.norm() + 1e-14);
        }
    }
}

TEST(ImpedancePF, DistantNodeBarelyParticipates) {
    const auto m = two_area(1e4);
    // mode near -2 lives in area 1 (Z1 = 1 + s against a unit shunt)
    const Index n = nearest_index(m.eigen().values, cd(-2.0));
    const cd lambda = m.eigen().values[n];
    const double near = impedance_participation_factor(m, 1, lambda).p.norm();
    const double far = impedance_participation_factor(m, 2, lambda).p.norm();
    EXPECT_LT(far, 1e-6 * std::max(near, far));
}

TEST(AdmittancePF, ScalarSanity) {
    // Zhat_11 = (Y1 + 1)^{-1} = (s + 1)/(s + 2) = 1 - 1/(s + 2): residue -1, p_Y = 1
    const auto& m = scalar_sanity().model;
    const auto pf = admittance_participation_factor(m, 1, cd(-2.0));
    EXPECT_NEAR(std::abs(pf.p(0, 0) - 1.0), 0.0, 1e-12);
    // dY = -Z^{-1} dZ Z^{-1}; both routes give d lambda = -delta
    const double delta = 1e-6;
    const MatrixXcd z = m.port(0).impedance_at(cd(-2.0));
    const MatrixXcd dz = MatrixXcd::Constant(1, 1, delta);
    const MatrixXcd dy = -z.inverse() * dz * z.inverse();
    EXPECT_NEAR(std::abs(predict_eigenvalue_shift(pf, dy) + delta), 0.0, 1e-18);
    const auto check = verify_lemma_fd(m, 1, cd(-2.0), dz, {1.0});
    EXPECT_NEAR(std::abs(check.rows[0].observed - predict_eigenvalue_shift(pf, dy)), 0.0, 1e-15);
}

TEST(AdmittancePF, DualityOnThreeNode) {
    const auto& sys = three_node();
    std::mt19937 rng(11);
    for (const auto& [md, k] : participating_pairs(sys)) {
        const auto pz = impedance_participation_factor(sys.model, k, md.lambda);
        const auto py = admittance_participation_factor(sys.model, k, md.lambda);
        const MatrixXcd dz = 1e-6 * random_matrix(rng, 2) * frobenius_norm(pz.z);
        const MatrixXcd y = pz.z.inverse();
        const cd a = predict_eigenvalue_shift(pz.p, dz);
        const cd b = predict_eigenvalue_shift(py.p, MatrixXcd(-y * dz * y));
        EXPECT_LE(std::abs(a - b), 1e-6 * std::abs(a)) << md.freq_hz() << " Hz, node " << k;
    }
}

TEST(Predict, ScalarAndZero) {
    const auto pf = impedance_participation_factor(scalar_sanity().model, 1, cd(-2.0));
    const double delta = 1e-3;
    EXPECT_NEAR(std::abs(predict_eigenvalue_shift(pf, MatrixXcd::Constant(1, 1, delta)) + delta), 0.0, 1e-15);
    EXPECT_EQ(predict_eigenvalue_shift(pf, MatrixXcd::Zero(1, 1)), cd(0.0));
    // new pole of (s + 1 + delta) + 1 = 0
    const auto check = verify_lemma_fd(scalar_sanity().model, 1, cd(-2.0), MatrixXcd::Constant(1, 1, 1.0), {delta});
    EXPECT_NEAR(std::abs(check.rows[0].observed + delta), 0.0, 1e-14);
}

TEST(Predict, LargePerturbationWarns) {
    std::vector<std::string> seen;
    set_warning_handler([&](const std::string& m) { seen.push_back(m); });
    const auto pf = impedance_participation_factor(scalar_sanity().model, 1, cd(-2.0));
    predict_eigenvalue_shift(pf, MatrixXcd::Constant(1, 1, 0.05));
    EXPECT_TRUE(seen.empty());
    predict_eigenvalue_shift(pf, MatrixXcd::Constant(1, 1, 0.5));
    EXPECT_EQ(seen.size(), 1u);
    set_warning_handler(nullptr);
}

TEST(Predict, TraceIdentityToMachinePrecision) {
    const auto& m = three_node().model;
    std::mt19937 rng(3);
    for (const auto& md : system_modes(m)) {
        for (int k = 1; k <= 3; ++k) {
            const auto pf = impedance_participation_factor(m, k, md.lambda);
            const MatrixXcd dz = random_matrix(rng, 2);
            const cd a = predict_eigenvalue_shift(pf.p, dz);
            const cd b = residue_trace_shift(pf.residue, dz);
            const double scale = pf.p.cwiseAbs().sum() * dz.cwiseAbs().maxCoeff();
            EXPECT_LE(std::abs(a - b), 4 * std::numeric_limits<double>::epsilon() * scale);
        }
    }
}

TEST(Predict, ThreeNodeFiniteDifference) {
    // relative error grows like C eps; C < 100 over every participating pair
    const auto& sys = three_node();
    std::mt19937 rng(5);
    const double eps = 1e-5;
    for (const auto& [md, k] : participating_pairs(sys)) {
        const auto pf = impedance_participation_factor(sys.model, k, md.lambda);
        MatrixXcd dz = random_matrix(rng, 2);
        dz *= frobenius_norm(pf.z) / frobenius_norm(dz);
        const auto check = verify_lemma_fd(sys.model, k, md.lambda, dz, {eps});
        EXPECT_LE(check.rows[0].relative_error, 100 * eps) << md.freq_hz() << " Hz, node " << k;
    }
}

TEST(Layer1, ScalarAndZero) {
    const auto pf = impedance_participation_factor(scalar_sanity().model, 1, cd(-2.0));
    EXPECT_NEAR(layer1_index(pf), 1.0, 1e-12);
    EXPECT_EQ(layer1_index(MatrixXcd::Zero(2, 2), pf.z.replicate(2, 2)), 0.0);
}

TEST(Layer1, CauchyBound) {
    const auto& m = three_node().model;
    std::mt19937 rng(9);
    for (const auto& md : system_modes(m)) {
        for (int k = 1; k <= 3; ++k) {
            const auto pf = impedance_participation_factor(m, k, md.lambda);
            const double bound = layer1_index(pf);
            const double zn = frobenius_norm(pf.z);
            for (int t = 0; t < 1000; ++t) {
                const MatrixXcd dz = random_matrix(rng, 2);
                const double lhs = std::abs(predict_eigenvalue_shift(pf.p, dz));
                EXPECT_LE(lhs, bound * frobenius_norm(dz) / zn * (1 + 1e-12));
            }
            const double aligned = std::abs(predict_eigenvalue_shift(pf.p, pf.p)) / frobenius_norm(pf.p);
            EXPECT_NEAR(aligned, bound / zn, 1e-12 * bound / zn);
        }
    }
}

TEST(Layer2, ScalarScalingMovesPoleRight) {
    const auto& m = scalar_sanity().model;
    const auto pf = impedance_participation_factor(m, 1, cd(-2.0));
    EXPECT_NEAR(std::abs(layer2_index(pf) - 1.0), 0.0, 1e-12);
    // (1 + eps)(s + 1) + 1 = 0 -> s = -1 - 1/(1 + eps)
    const double eps = 1e-4;
    const cd shift = scaled_impedance_shift(m, 1, cd(-2.0), eps);
    EXPECT_NEAR(std::abs(shift - (1.0 - 1.0 / (1.0 + eps))), 0.0, 1e-14);
    MatrixXcd p(2, 2), z(2, 2);
    p << 1, 0, 0, 0;
    z << 0, 1, 1, 0;
    EXPECT_EQ(layer2_index(p, z), cd(0.0));
}

TEST(Layer2, SignMatchesScalingOnThreeNode) {
    const auto& m = three_node().model;
    for (const auto& md : system_modes(m)) {
        for (int k = 1; k <= 3; ++k) {
            const cd l2 = layer2_index(impedance_participation_factor(m, k, md.lambda));
            if (std::abs(l2) <= 1e-8) continue;
            const cd fd = scaled_impedance_shift(m, k, md.lambda, 1e-4);
            EXPECT_EQ(fd.real() > 0.0, l2.real() > 0.0) << md.freq_hz() << " Hz, node " << k;
        }
    }
}

TEST(ScaledPort, BothOrientations) {
    const auto& sys = three_node();
    for (int k = 1; k <= 3; ++k) {
        const ApparatusPort& p = sys.model.port(k - 1);
        const cd s(-3.0, 400.0);
        const MatrixXcd z = p.impedance_at(s);
        EXPECT_LT((scaled_port(p, 1.5).impedance_at(s) - 1.5 * z).norm(), 1e-12 * z.norm());
    }
}

TEST(Layer3, ScalarResistance) {
    // Z1 = s + R, lambda = -(1 + R): d lambda / dR = -1
    const auto& sys = scalar_sanity();
    const auto pf = impedance_participation_factor(sys.model, 1, cd(-2.0));
    const auto pert = parameter_perturbations(sys, 1);
    ASSERT_EQ(pert.size(), 2u);
    const auto& r = pert[0].parameter == "R" ? pert[0] : pert[1];
    const auto sens = r.at(pf.lambda);
    EXPECT_NEAR(std::abs(sens.value(0, 0) - 1.0), 0.0, 1e-6);
    const cd pr = parameter_participation_factor(pf, sens);
    EXPECT_NEAR(std::abs(pr + 1.0), 0.0, 1e-6);
    const double d = 0.01;
    EXPECT_EQ(pr * d, predict_eigenvalue_shift(pf.p, MatrixXcd(sens.value * d)));
    ImpedanceSensitivity zero{"R", pf.lambda, 1.0, MatrixXcd::Zero(1, 1)};
    EXPECT_EQ(parameter_participation_factor(pf, zero), cd(0.0));
    ImpedanceSensitivity elsewhere{"R", cd(-5.0), 1.0, MatrixXcd::Zero(1, 1)};
    EXPECT_THROW(parameter_participation_factor(pf, elsewhere), InputError);
}

TEST(Chain, MatchesEigenvectorParticipation) {
    const auto& sys = three_node();
    const auto& m = sys.model;
    const MatrixXcd all = state_participation_matrix(m.eigen());
    for (const auto& md : system_modes(m)) {
        cd column = 0.0;
        std::vector<bool> covered(static_cast<std::size_t>(m.states()), false);
        for (int k = 1; k <= 3; ++k) {
            for (Index s = 0; s < m.port(k - 1).states(); ++s) {
                const cd chain = state_pf_via_chain(m, k, md.lambda, s);
                const cd exact = state_pf_from_eigenvectors(m, k, md.lambda, s);
                EXPECT_LE(std::abs(chain - exact), 1e-4 * std::abs(exact))
                    << md.freq_hz() << " Hz, node " << k << ", state " << s;
                column += chain;
                covered[static_cast<std::size_t>(m.port_state_offset(k - 1) + s)] = true;
            }
        }
        for (Index r = 0; r < m.states(); ++r) {
            if (!covered[static_cast<std::size_t>(r)]) column += all(r, md.index);
        }
        EXPECT_NEAR(std::abs(column - 1.0), 0.0, 1e-6);
    }
}

TEST(Chain, DecoupledStateHasNoParticipation) {
    // apparatus with an internal state that neither sees the terminal nor drives it
    NetworkDescription net;
    net.node_count = 1;
    net.frame = Frame::Scalar;
    net.shunts = {{1, 1.0, 0.0, 0.0}};
    MatrixXd a(2, 2), b(2, 1), c(1, 2);
    a << -1.0, 0.0, 0.0, -7.0;
    b << 1.0, 0.0;
    c << 1.0, 0.0;
    StateSpaceForm y(a, b, c, MatrixXd::Zero(1, 1));
    auto m = assemble_whole_system(net, {ApparatusPort::admittance(y, {"x1", "x2"}, "adm")});
    ASSERT_EQ(m.states(), 2);
    const Index hidden = nearest_index(m.eigen().values, cd(-7.0));
    const cd visible = m.eigen().values[1 - hidden];
    EXPECT_NEAR(std::abs(state_pf_via_chain(m, 1, visible, 1)), 0.0, 1e-9);
    EXPECT_NEAR(std::abs(state_pf_from_eigenvectors(m, 1, visible, 1)), 0.0, 1e-9);
    EXPECT_NEAR(m.admittance_residue(0, hidden).norm(), 0.0, 1e-12);
}

TEST(Lemma, ScalarPredictionIsExact) {
    // the pole of (s + 1 + eps) + 1 is exactly -2 - eps, so the remainder vanishes
    const auto check = verify_lemma_fd(scalar_sanity().model, 1, cd(-2.0), MatrixXcd::Constant(1, 1, 1.0));
    ASSERT_EQ(check.rows.size(), 3u);
    EXPECT_TRUE(check.exact);
    EXPECT_TRUE(check.first_order());
    for (const auto& r : check.rows) EXPECT_LE(r.relative_error, kExactPrediction);
}

TEST(Lemma, FirstOrderConvergenceOnThreeNode) {
    const auto& sys = three_node();
    std::mt19937 rng(17);
    int checked = 0;
    for (const auto& [md, k] : participating_pairs(sys)) {
        const auto pf = impedance_participation_factor(sys.model, k, md.lambda);
        for (int draw = 0; draw < 2; ++draw) {
            MatrixXcd dz = random_matrix(rng, 2);
            dz *= frobenius_norm(pf.z) / frobenius_norm(dz);
            const auto check = verify_lemma_fd(sys.model, k, md.lambda, dz);
            EXPECT_LE(check.rows.back().relative_error, 1e-3);
            EXPECT_LE(check.max_relative_error() / check.rows.front().epsilon, 100.0);
            if (!check.order_measurable()) continue;
            EXPECT_TRUE(check.first_order()) << md.freq_hz() << " Hz, node " << k << ", order " << check.order;
            ++checked;
        }
    }
    EXPECT_GE(checked, 20);
}

TEST(Lemma, AlignedPerturbationAttainsBound) {
    const auto& sys = three_node();
    for (const auto& [md, k] : participating_pairs(sys)) {
        const auto pf = impedance_participation_factor(sys.model, k, md.lambda);
        const MatrixXcd dz = pf.p * (frobenius_norm(pf.z) / frobenius_norm(pf.p));
        const double eps = 1e-5;
        const auto check = verify_lemma_fd(sys.model, k, md.lambda, dz, {eps});
        const double bound = layer1_index(pf) * eps;
        EXPECT_GE(std::abs(check.rows[0].observed), 0.99 * bound);
        EXPECT_LE(std::abs(check.rows[0].observed), 1.01 * bound);
    }
}

TEST(Lemma, AmbiguousMatchThrows) {
    NetworkDescription net;
    net.node_count = 1;
    net.frame = Frame::Scalar;
    net.shunts = {{1, 1.0, 0.0, 0.0}};
    MatrixXd a(2, 2);
    a << -2.0, 0.0, 0.0, -2.001;
    StateSpaceForm y(a, MatrixXd::Ones(2, 1), MatrixXd::Ones(1, 2), MatrixXd::Zero(1, 1));
    auto m = assemble_whole_system(net, {ApparatusPort::admittance(y, {}, "twin")});
    const cd lo = m.eigen().values[0], hi = m.eigen().values[1];
    EXPECT_THROW(match_eigenvalue(m, 0.5 * (lo + hi)), MatchingError);
    EXPECT_NO_THROW(match_eigenvalue(m, lo));
}

TEST(LayerReport, NormalizationAndDeterminism) {
    const auto& sys = three_node();
    const auto modes = system_modes(sys.model);
    setenv("GREYBOX_THREADS", "1", 1);
    const auto serial = layer_report(sys, modes);
    setenv("GREYBOX_THREADS", "4", 1);
    const auto threaded = layer_report(sys, modes);
    unsetenv("GREYBOX_THREADS");
    ASSERT_EQ(serial.size(), modes.size());
    for (std::size_t j = 0; j < serial.size(); ++j) {
        double total = 0.0;
        for (std::size_t i = 0; i < serial[j].nodes.size(); ++i) {
            const auto& a = serial[j].nodes[i];
            const auto& b = threaded[j].nodes[i];
            total += std::abs(a.layer2_normalized);
            EXPECT_EQ(a.layer1, b.layer1);
            EXPECT_EQ(a.layer2, b.layer2);
            ASSERT_EQ(a.layer3.size(), b.layer3.size());
            for (std::size_t p = 0; p < a.layer3.size(); ++p) EXPECT_EQ(a.layer3[p].value, b.layer3[p].value);
            EXPECT_GE(a.layer1 * (1 + 1e-12), std::abs(a.layer2));
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    EXPECT_EQ(serial[0].nodes[0].layer3.size(), sys.apparatus(1)->active_parameters().size());
    LayerReportOptions only2;
    only2.nodes = {2};
    only2.layer3 = false;
    const auto r2 = layer_report(sys, modes, only2);
    EXPECT_EQ(r2[0].nodes.size(), 1u);
    EXPECT_TRUE(r2[0].nodes[0].layer3.empty());
    only2.nodes = {5};
    EXPECT_THROW(layer_report(sys, modes, only2), InputError);
}
