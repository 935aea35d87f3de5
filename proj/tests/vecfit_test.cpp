#include <gtest/gtest.h>

#include <random>

#include "greybox/participation.hpp"
#include "greybox/system.hpp"
#include "greybox/vecfit.hpp"

using namespace greybox;

namespace {

const std::string kSystems = GREYBOX_SYSTEMS_DIR;

SampledSpectrum sample(const PoleResidueForm& truth, const std::vector<double>& omega) {
    SampledSpectrum sp;
    sp.omega = omega;
    for (double w : omega) sp.samples.push_back(eval(truth, cd(0.0, w)));
    return sp;
}

MatrixXcd random_real(std::mt19937& rng, Index q, Index p) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    MatrixXcd m(q, p);
    for (Index i = 0; i < q; ++i) {
        for (Index j = 0; j < p; ++j) m(i, j) = u(rng);
    }
    return m;
}

MatrixXcd random_complex(std::mt19937& rng, Index q, Index p) {
    return random_real(rng, q, p) + cd(0.0, 1.0) * random_real(rng, q, p);
}

// Real-rational truth from upper-half-plane poles plus real poles.
PoleResidueForm truth_model(const std::vector<cd>& poles, std::mt19937& rng, Index q = 2, Index p = 2) {
    PoleResidueForm t;
    t.direct = random_real(rng, q, p) * 0.1;
    t.linear = MatrixXcd::Zero(q, p);
    for (const cd& a : poles) {
        if (a.imag() == 0.0) {
            t.poles.push_back(a);
            t.residues.push_back(random_real(rng, q, p) * std::abs(a));
        } else {
            const MatrixXcd r = random_complex(rng, q, p) * std::abs(a);
            t.poles.push_back(a);
            t.residues.push_back(r);
            t.poles.push_back(std::conj(a));
            t.residues.push_back(r.conjugate());
        }
    }
    return t;
}

// Largest relative pole error and residue error after nearest matching.
std::pair<double, double> recovery_error(const PoleResidueForm& truth, const PoleResidueForm& fit) {
    double pole_err = 0.0;
    double res_err = 0.0;
    for (std::size_t i = 0; i < truth.poles.size(); ++i) {
        std::size_t j = 0;
        for (std::size_t t = 1; t < fit.poles.size(); ++t) {
            if (std::abs(fit.poles[t] - truth.poles[i]) < std::abs(fit.poles[j] - truth.poles[i])) j = t;
        }
        pole_err = std::max(pole_err, std::abs(fit.poles[j] - truth.poles[i]) / std::abs(truth.poles[i]));
        res_err = std::max(res_err, (fit.residues[j] - truth.residues[i]).norm() / truth.residues[i].norm());
    }
    return {pole_err, res_err};
}

void expect_conjugate_closed(const PoleResidueForm& m) {
    for (std::size_t i = 0; i < m.poles.size(); ++i) {
        if (m.poles[i].imag() == 0.0) {
            EXPECT_EQ(m.residues[i].imag().norm(), 0.0);
            continue;
        }
        bool found = false;
        for (std::size_t j = 0; j < m.poles.size(); ++j) {
            if (m.poles[j] == std::conj(m.poles[i]) && m.residues[j] == m.residues[i].conjugate()) found = true;
        }
        EXPECT_TRUE(found) << m.poles[i];
    }
    EXPECT_EQ(m.direct.imag().norm(), 0.0);
    EXPECT_EQ(m.linear.imag().norm(), 0.0);
}

}  // namespace

TEST(VectorFit, FirstOrderScalar) {
    PoleResidueForm t;
    t.poles = {cd(-1.0)};
    t.residues = {MatrixXcd::Constant(1, 1, 1.0)};
    t.direct = MatrixXcd::Zero(1, 1);
    t.linear = MatrixXcd::Zero(1, 1);
    FitConfig cfg;
    cfg.order = 1;
    const auto r = vector_fit(sample(t, logspace(0.01, 100.0, 100)), cfg);
    ASSERT_EQ(r.model.poles.size(), 1u);
    EXPECT_NEAR(std::abs(r.model.poles[0] + 1.0), 0.0, 1e-8);
    EXPECT_NEAR(std::abs(r.model.residues[0](0, 0) - 1.0), 0.0, 1e-8);
    EXPECT_LE(r.rms_rel, 1e-10);
    EXPECT_TRUE(r.converged);
}

TEST(VectorFit, SyntheticTwoByTwo) {
    std::mt19937 rng(3);
    const auto truth = truth_model({cd(-5.0), cd(-1.0, 10.0)}, rng);
    FitConfig cfg;
    cfg.order = 3;
    const auto sp = sample(truth, logspace(0.01, 1000.0, 200));
    const auto r = vector_fit(sp, cfg);
    const auto [pe, re] = recovery_error(truth, r.model);
    EXPECT_LE(pe, 1e-6);
    EXPECT_LE(re, 1e-4);
    expect_conjugate_closed(r.model);

    cfg.weighting = Weighting::InverseMagnitude;
    const auto [pw, rw] = recovery_error(truth, vector_fit(sp, cfg).model);
    EXPECT_LE(pw, 1e-6);
    EXPECT_LE(rw, 1e-4);
}

TEST(VectorFit, MultiplicativeNoise) {
    std::mt19937 rng(5);
    const auto truth = truth_model({cd(-5.0), cd(-1.0, 10.0)}, rng);
    auto sp = sample(truth, logspace(0.01, 1000.0, 200));
    std::normal_distribution<double> n(0.0, 1e-6);
    for (auto& m : sp.samples) {
        for (Index i = 0; i < m.size(); ++i) m(i) *= 1.0 + cd(n(rng), n(rng));
    }
    FitConfig cfg;
    cfg.order = 3;
    const auto r = vector_fit(sp, cfg);
    EXPECT_LE(recovery_error(truth, r.model).first, 1e-3);
    EXPECT_GT(r.rms_rel, 0.0);
}

TEST(VectorFit, StateSpaceRoundTrip) {
    // Block-diagonal real A with well separated modes, random B and C.
    std::mt19937 rng(8);
    MatrixXd a = MatrixXd::Zero(7, 7);
    const std::vector<std::pair<double, double>> pairs = {{-2.0, 30.0}, {-10.0, 300.0}, {-40.0, 2000.0}};
    for (int i = 0; i < 3; ++i) {
        a(2 * i, 2 * i) = pairs[i].first;
        a(2 * i + 1, 2 * i + 1) = pairs[i].first;
        a(2 * i, 2 * i + 1) = pairs[i].second;
        a(2 * i + 1, 2 * i) = -pairs[i].second;
    }
    a(6, 6) = -80.0;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    MatrixXd b(7, 2);
    MatrixXd c(2, 7);
    MatrixXd d(2, 2);
    for (Index i = 0; i < b.size(); ++i) b(i) = u(rng) * 10.0;
    for (Index i = 0; i < c.size(); ++i) c(i) = u(rng) * 10.0;
    for (Index i = 0; i < d.size(); ++i) d(i) = u(rng);
    const StateSpaceForm ss(a, b, c, d);
    const PoleResidueForm truth = ss_to_pole_residue(ss);
    std::vector<double> omega = logspace(0.1, 1e4, 400);
    FitConfig cfg;
    cfg.order = 7;
    const auto r = vector_fit(sample_spectrum(ss, omega), cfg);
    const auto [pe, re] = recovery_error(truth, r.model);
    EXPECT_LE(pe, 1e-6);
    EXPECT_LE(re, 1e-4);
    expect_conjugate_closed(r.model);
}

TEST(VectorFit, UnderfitLeavesResidualError) {
    std::mt19937 rng(13);
    const auto truth = truth_model({cd(-1.0, 5.0), cd(-3.0, 40.0), cd(-8.0, 200.0), cd(-20.0, 900.0), cd(-60.0, 4000.0)},
                                   rng);
    const auto sp = sample(truth, logspace(0.5, 2e4, 400));
    FitConfig cfg;
    cfg.order = 10;
    EXPECT_LE(fit_quality(vector_fit(sp, cfg), sp).rms_rel, 1e-8);
    cfg.order = 8;
    set_warning_handler({});
    const auto q = fit_quality(vector_fit(sp, cfg), sp);
    set_warning_handler([](const std::string& m) { std::cerr << "greybox warning: " << m << '\n'; });
    EXPECT_GT(q.rms_rel, 1e-3);
}

TEST(VectorFit, UnstablePolesKeptUnlessEnforced) {
    PoleResidueForm t;
    t.poles = {cd(2.0), cd(-1.0, 20.0), cd(-1.0, -20.0)};
    t.residues = {MatrixXcd::Constant(1, 1, 1.0), MatrixXcd::Constant(1, 1, cd(3.0, 1.0)),
                  MatrixXcd::Constant(1, 1, cd(3.0, -1.0))};
    t.direct = MatrixXcd::Zero(1, 1);
    t.linear = MatrixXcd::Zero(1, 1);
    const auto sp = sample(t, logspace(0.01, 1000.0, 200));
    FitConfig cfg;
    cfg.order = 3;
    const auto free = vector_fit(sp, cfg);
    EXPECT_LE(recovery_error(t, free.model).first, 1e-6);
    cfg.enforce_stability = true;
    set_warning_handler({});
    const auto forced = vector_fit(sp, cfg);
    set_warning_handler([](const std::string& m) { std::cerr << "greybox warning: " << m << '\n'; });
    for (const cd& a : forced.model.poles) EXPECT_LE(a.real(), 0.0);
}

TEST(VectorFit, Validation) {
    PoleResidueForm t;
    t.poles = {cd(-1.0)};
    t.residues = {MatrixXcd::Constant(1, 1, 1.0)};
    t.direct = MatrixXcd::Zero(1, 1);
    t.linear = MatrixXcd::Zero(1, 1);
    const auto sp = sample(t, logspace(0.01, 100.0, 20));
    FitConfig cfg;
    EXPECT_THROW(vector_fit(sp, cfg), InputError);
    cfg.order = 1;
    cfg.iterations = 0;
    EXPECT_THROW(vector_fit(sp, cfg), InputError);
    cfg.iterations = 10;
    cfg.order = 10;
    EXPECT_THROW(vector_fit(sp, cfg), InputError);
    cfg.order = 2;
    cfg.initial_poles = {cd(-1.0, 1.0), cd(-1.0, 2.0)};
    EXPECT_THROW(vector_fit(sp, cfg), InputError);
    cfg.initial_poles = {cd(-1.0), cd(-1.0)};
    EXPECT_THROW(vector_fit(sp, cfg), FitError);
}

TEST(VectorFit, NonConvergenceWarnsWithBestIterate) {
    std::mt19937 rng(21);
    const auto truth = truth_model({cd(-1.0, 5.0), cd(-3.0, 40.0), cd(-8.0, 200.0)}, rng);
    const auto sp = sample(truth, logspace(0.5, 2e3, 300));
    FitConfig cfg;
    cfg.order = 6;
    cfg.iterations = 1;
    std::vector<std::string> seen;
    set_warning_handler([&](const std::string& m) { seen.push_back(m); });
    const auto r = vector_fit(sp, cfg);
    set_warning_handler([](const std::string& m) { std::cerr << "greybox warning: " << m << '\n'; });
    EXPECT_FALSE(r.converged);
    ASSERT_EQ(seen.size(), 1u);
    EXPECT_NE(seen[0].find("not converged"), std::string::npos);
    EXPECT_EQ(r.trajectory.size(), 2u);
    EXPECT_EQ(r.best_iteration, 1);
}

TEST(FitQuality, ExactModelAndBands) {
    std::mt19937 rng(2);
    const auto truth = truth_model({cd(-5.0), cd(-1.0, 10.0)}, rng);
    const auto sp = sample(truth, logspace(hz_to_rad(0.1), hz_to_rad(1e4), 250));
    const auto q = fit_quality(truth, sp);
    EXPECT_EQ(q.rms_rel, 0.0);
    EXPECT_EQ(q.max_rel, 0.0);
    ASSERT_EQ(q.bands.size(), 6u);
    std::size_t total = 0;
    for (const auto& b : q.bands) {
        total += b.samples;
        EXPECT_NEAR(b.f_hi_hz / b.f_lo_hz, 10.0, 1e-12);
    }
    EXPECT_EQ(total, sp.size());
    EXPECT_NEAR(q.bands.front().f_lo_hz, 0.1, 1e-15);

    PoleResidueForm wrong = truth;
    wrong.direct(0, 0) += 1.0;
    EXPECT_GT(fit_quality(wrong, sp).max_rel, 0.0);
    wrong.direct = MatrixXcd::Zero(3, 3);
    EXPECT_THROW(fit_quality(wrong, sp), ShapeError);
}

TEST(OrderSweep, KneeAtTrueOrder) {
    std::mt19937 rng(17);
    const auto truth = truth_model({cd(-2.0, 20.0), cd(-10.0, 300.0)}, rng);
    const auto sp = sample(truth, logspace(1.0, 3000.0, 300));
    FitConfig cfg;
    set_warning_handler({});
    const auto sweep = sweep_orders(sp, cfg, 2, 8, 2);
    set_warning_handler([](const std::string& m) { std::cerr << "greybox warning: " << m << '\n'; });
    ASSERT_EQ(sweep.entries.size(), 4u);
    EXPECT_EQ(sweep.knee, 4);
    EXPECT_GT(sweep.entries[0].rms_rel, 1e-3);
    EXPECT_LE(sweep.entries[1].rms_rel, 1e-8);
    EXPECT_LE(sweep.entries[1].density_sensitivity, 1e-6);
}

TEST(VectorFit, ParallelFitsAreDeterministic) {
    std::mt19937 rng(19);
    std::vector<SampledSpectrum> spectra;
    for (int i = 0; i < 4; ++i) {
        spectra.push_back(sample(truth_model({cd(-1.0 - i, 10.0 + i), cd(-7.0)}, rng), logspace(0.1, 100.0, 120)));
    }
    FitConfig cfg;
    cfg.order = 3;
    setenv("GREYBOX_THREADS", "1", 1);
    const auto serial = vector_fit_all(spectra, cfg);
    setenv("GREYBOX_THREADS", "4", 1);
    const auto threaded = vector_fit_all(spectra, cfg);
    unsetenv("GREYBOX_THREADS");
    for (std::size_t i = 0; i < spectra.size(); ++i) {
        EXPECT_EQ(serial[i].model.poles, threaded[i].model.poles);
        EXPECT_EQ(serial[i].rms_rel, threaded[i].rms_rel);
    }
}

TEST(BlackBox, ParticipationMatchesStateSpaceRoute) {
    const auto sys = build_system(load_system(kSystems + "/three_node.json"));
    const auto& model = sys.model;
    std::vector<double> omega;
    for (double f : logspace(0.1, 1e4, 2000)) omega.push_back(hz_to_rad(f));
    FitConfig cfg;
    cfg.order = static_cast<int>(model.states());
    for (int k = 1; k <= 3; ++k) {
        const auto fit = vector_fit(sample_spectrum(whole_system_admittance_at(model, k), omega), cfg);
        for (const auto& md : system_modes(model)) {
            const auto white = impedance_participation_factor(model, k, md.lambda);
            const MatrixXcd black = fitted_participation_factor(fit.model, md.lambda);
            EXPECT_LE((black - white.p).norm() / white.p.norm(), 1e-3) << md.freq_hz() << " Hz, node " << k;
        }
    }
    EXPECT_THROW(fitted_participation_factor(PoleResidueForm{{cd(-1.0)}, {MatrixXcd::Ones(1, 1)}, MatrixXcd::Zero(1, 1),
                                                             MatrixXcd::Zero(1, 1)},
                                             cd(-50.0, 3.0)),
                 NoPoleError);
}
