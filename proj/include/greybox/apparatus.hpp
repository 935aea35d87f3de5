#pragma once

// Parameterized apparatus models rho -> Z_k(s): nonlinear terminal dynamics,
// equilibrium solving, numerical linearization and impedance-parameter
// sensitivity. Equations and units are listed in docs/apparatus.md.
//
// Orientation: the apparatus impedance maps the current flowing INTO the
// apparatus to its terminal voltage, dv = Z di.

#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "greybox/assembly.hpp"
#include "greybox/lti.hpp"
#include "greybox/network.hpp"

namespace greybox {

using ParameterSet = std::map<std::string, double>;

struct ParameterSpec {
    std::string name;
    double lower;           ///< inclusive unless lower_open
    double upper;           ///< inclusive
    double default_value;   ///< NaN: required (or optional when `optional`)
    bool lower_open = false;
    bool optional = false;  ///< may be absent; absence changes the model structure
    std::string unit;
    std::string description;
};

/// Terminal operating point requested for the apparatus.
struct Setpoint {
    double p = 0.0;          ///< active power out of the apparatus, pu
    double q = 0.0;          ///< reactive power out of the apparatus, pu
    double v = 1.0;          ///< terminal voltage magnitude, pu
    double angle_deg = 0.0;  ///< terminal voltage angle in the global frame
};

/// Closed-form start for the equilibrium solve.
struct OperatingPoint {
    VectorXd x;     ///< initial state guess
    VectorXd refs;  ///< internal references held constant during dynamics
    VectorXd u;     ///< native input at the operating point (voltage or current)
};

struct Equilibrium {
    VectorXd terminal;  ///< terminal voltage the equilibrium was solved for
    VectorXd x;
    VectorXd u;
    VectorXd refs;
    int iterations = 0;
    std::vector<double> residual_history;
    double residual() const { return residual_history.empty() ? 0.0 : residual_history.back(); }
};

/// One apparatus kind: dx/dt = f(x, u), y = g(x, u). For admittance-native
/// kinds u is the terminal voltage and y the current into the apparatus; for
/// impedance-native kinds the roles are swapped.
class ApparatusKind {
public:
    virtual ~ApparatusKind() = default;

    virtual std::string name() const = 0;
    virtual PortForm native_form() const = 0;
    virtual bool supports(Frame frame) const { return frame == Frame::Dq; }
    /// Linear kinds accept a zero terminal voltage.
    virtual bool linear() const { return false; }
    virtual const std::vector<ParameterSpec>& parameters() const = 0;

    /// Parameters that actually enter the model for this parameter set.
    virtual std::vector<std::string> active_parameters(const ParameterSet& p) const {
        std::vector<std::string> out;
        for (const auto& spec : parameters())
            if (p.count(spec.name)) out.push_back(spec.name);
        return out;
    }

    virtual std::vector<std::string> state_names(const ParameterSet& p, Index dim) const = 0;
    virtual OperatingPoint operating_point(const ParameterSet& p, const Setpoint& sp, const VectorXd& v0,
                                           double w0) const = 0;
    virtual VectorXd f(const VectorXd& x, const VectorXd& u, const ParameterSet& p, const VectorXd& refs,
                       double w0) const = 0;
    virtual VectorXd g(const VectorXd& x, const VectorXd& u, const ParameterSet& p, const VectorXd& refs,
                       double w0) const = 0;
};

namespace detail {

inline Eigen::Matrix2d rot(double angle) {
    Eigen::Matrix2d t;
    t << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    return t;
}

inline double param(const ParameterSet& p, const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw InputError("missing parameter '" + name + "'");
    return it->second;
}

inline double hz(double f) { return 2.0 * std::numbers::pi * f; }

}  // namespace detail

// ---------------------------------------------------------------------------
// rl_branch: series R-L, states are the inductor currents.
//   L di/dt = v - R i - w0 L J i,  output i
// ---------------------------------------------------------------------------
class RlBranchKind final : public ApparatusKind {
public:
    std::string name() const override { return "rl_branch"; }
    PortForm native_form() const override { return PortForm::Admittance; }
    bool supports(Frame) const override { return true; }
    bool linear() const override { return true; }
    const std::vector<ParameterSpec>& parameters() const override {
        static const std::vector<ParameterSpec> specs = {
            {"R", 0.0, 100.0, NAN, false, false, "pu", "series resistance"},
            {"L", 0.0, 10.0, NAN, true, false, "pu*s", "series inductance"},
        };
        return specs;
    }
    std::vector<std::string> state_names(const ParameterSet&, Index dim) const override {
        if (dim == 1) return {"i"};
        return {"i_d", "i_q"};
    }
    OperatingPoint operating_point(const ParameterSet& p, const Setpoint&, const VectorXd& v0,
                                   double w0) const override {
        const double r = detail::param(p, "R"), l = detail::param(p, "L");
        const Index d = v0.size();
        MatrixXd z0 = r * MatrixXd::Identity(d, d);
        if (d == 2) z0 += w0 * l * MatrixXd(rotation90());
        Eigen::FullPivLU<MatrixXd> lu(z0);
        if (!lu.isInvertible()) throw EquilibriumError("rl_branch: zero DC impedance with nonzero terminal voltage");
        return {lu.solve(v0), VectorXd(0), v0};
    }
    VectorXd f(const VectorXd& x, const VectorXd& v, const ParameterSet& p, const VectorXd&,
               double w0) const override {
        const double r = detail::param(p, "R"), l = detail::param(p, "L");
        VectorXd dx = (v - r * x) / l;
        if (x.size() == 2) dx -= w0 * (rotation90() * x);
        return dx;
    }
    VectorXd g(const VectorXd& x, const VectorXd&, const ParameterSet&, const VectorXd&, double) const override {
        return x;
    }
};

// ---------------------------------------------------------------------------
// swing_sg: classical machine behind transient reactance X', optional
// first-order voltage regulator (present when K_F is given).
// ---------------------------------------------------------------------------
class SwingSgKind final : public ApparatusKind {
public:
    std::string name() const override { return "swing_sg"; }
    PortForm native_form() const override { return PortForm::Admittance; }
    const std::vector<ParameterSpec>& parameters() const override {
        static const std::vector<ParameterSpec> specs = {
            {"H", 0.0, 100.0, NAN, true, false, "s", "inertia constant"},
            {"D", 0.0, 1000.0, 0.0, false, false, "pu", "damping, pu power per pu speed"},
            {"X_prime", 0.0, 5.0, NAN, true, false, "pu", "transient reactance X'"},
            {"E_prime", 0.0, 5.0, NAN, true, false, "pu", "internal EMF setpoint E'"},
            {"K_F", 0.0, 1000.0, NAN, false, true, "pu/pu", "voltage regulator feedback gain"},
            {"T_A", 0.0, 10.0, 0.05, true, false, "s", "voltage regulator time constant"},
        };
        return specs;
    }
    std::vector<std::string> active_parameters(const ParameterSet& p) const override {
        std::vector<std::string> out = {"H", "D", "X_prime", "E_prime"};
        if (has_avr(p)) {
            out.push_back("K_F");
            out.push_back("T_A");
        }
        return out;
    }
    std::vector<std::string> state_names(const ParameterSet& p, Index) const override {
        if (has_avr(p)) return {"delta", "dw", "E"};
        return {"delta", "dw"};
    }
    OperatingPoint operating_point(const ParameterSet& p, const Setpoint& sp, const VectorXd& v0,
                                   double) const override {
        const double xp = detail::param(p, "X_prime"), ep = detail::param(p, "E_prime");
        const double vm = v0.norm();
        const double limit = ep * vm / xp;
        if (!(std::abs(sp.p) <= limit)) {
            throw EquilibriumError("swing_sg: infeasible setpoint |P| = " + std::to_string(std::abs(sp.p)) +
                                   " exceeds E'V/X' = " + std::to_string(limit));
        }
        const double theta = std::atan2(v0[1], v0[0]);
        VectorXd x(has_avr(p) ? 3 : 2);
        x[0] = theta + std::asin(sp.p / limit);
        x[1] = 0.0;
        if (has_avr(p)) x[2] = ep;
        VectorXd refs(2);
        refs << sp.p, vm;  // mechanical power, voltage reference
        return {x, refs, v0};
    }
    VectorXd f(const VectorXd& x, const VectorXd& v, const ParameterSet& p, const VectorXd& refs,
               double w0) const override {
        const double h = detail::param(p, "H"), damp = detail::param(p, "D");
        const double em = emf(x, p);
        const Eigen::Vector2d e(em * std::cos(x[0]), em * std::sin(x[0]));
        const Eigen::Vector2d i_out = -current_in(x, v, p);
        const double pe = e.dot(i_out);
        VectorXd dx(x.size());
        dx[0] = w0 * x[1];
        dx[1] = (refs[0] - pe - damp * x[1]) / (2.0 * h);
        if (has_avr(p)) {
            const double kf = detail::param(p, "K_F"), ta = detail::param(p, "T_A");
            dx[2] = (-(x[2] - detail::param(p, "E_prime")) - kf * (v.norm() - refs[1])) / ta;
        }
        return dx;
    }
    VectorXd g(const VectorXd& x, const VectorXd& v, const ParameterSet& p, const VectorXd&,
               double) const override {
        return current_in(x, v, p);
    }

private:
    static bool has_avr(const ParameterSet& p) { return p.count("K_F") > 0; }
    static double emf(const VectorXd& x, const ParameterSet& p) {
        return has_avr(p) ? x[2] : detail::param(p, "E_prime");
    }
    static Eigen::Vector2d current_in(const VectorXd& x, const VectorXd& v, const ParameterSet& p) {
        const double xp = detail::param(p, "X_prime");
        const double em = emf(x, p);
        const double ed = em * std::cos(x[0]), eq = em * std::sin(x[0]);
        return Eigen::Vector2d((v[1] - eq) / xp, -(v[0] - ed) / xp);
    }
};

// ---------------------------------------------------------------------------
// gfl_inverter: L filter, PI current control in the PLL frame (no voltage
// feed-forward, no decoupling), second-order PLL.
// ---------------------------------------------------------------------------
class GflInverterKind final : public ApparatusKind {
public:
    static constexpr double kPllDamping = 0.707;

    std::string name() const override { return "gfl_inverter"; }
    PortForm native_form() const override { return PortForm::Admittance; }
    const std::vector<ParameterSpec>& parameters() const override {
        static const std::vector<ParameterSpec> specs = {
            {"f_i", 0.0, 1e4, NAN, true, false, "Hz", "current-loop bandwidth"},
            {"f_pll", 0.0, 1e3, NAN, true, false, "Hz", "PLL bandwidth"},
            {"L_f", 0.0, 1.0, NAN, true, false, "pu", "filter reactance at w0"},
            {"R_f", 0.0, 1.0, 0.0, false, false, "pu", "filter resistance"},
        };
        return specs;
    }
    std::vector<std::string> state_names(const ParameterSet&, Index) const override {
        return {"i_d", "i_q", "eta_d", "eta_q", "pll_xi", "pll_theta"};
    }
    OperatingPoint operating_point(const ParameterSet& p, const Setpoint& sp, const VectorXd& v0,
                                   double w0) const override {
        const Gains k = gains(p, v0.norm(), w0);
        const double vm = v0.norm();
        if (!(vm > 0.0)) throw EquilibriumError("gfl_inverter: zero terminal voltage");
        const double theta = std::atan2(v0[1], v0[0]);
        const Eigen::Vector2d iref(sp.p / vm, -sp.q / vm);
        const Eigen::Vector2d i = detail::rot(theta) * iref;
        const Eigen::Vector2d e = v0 + k.r * i + w0 * k.l * (rotation90() * i);
        const Eigen::Vector2d eta = detail::rot(-theta) * e / k.ki;
        VectorXd x(6);
        x << i, eta, 0.0, theta;
        VectorXd refs(3);
        refs << iref, vm;
        return {x, refs, v0};
    }
    VectorXd f(const VectorXd& x, const VectorXd& v, const ParameterSet& p, const VectorXd& refs,
               double w0) const override {
        const Gains k = gains(p, refs[2], w0);
        const Eigen::Vector2d i = x.segment<2>(0), eta = x.segment<2>(2);
        const double xi = x[4], theta = x[5];
        const Eigen::Matrix2d back = detail::rot(-theta);
        const Eigen::Vector2d vc = back * v.head<2>();
        const Eigen::Vector2d err = refs.head<2>() - back * i;
        const Eigen::Vector2d e = detail::rot(theta) * (k.kp * err + k.ki * eta);
        VectorXd dx(6);
        dx.segment<2>(0) = (e - v.head<2>() - k.r * i - w0 * k.l * (rotation90() * i)) / k.l;
        dx.segment<2>(2) = err;
        dx[4] = k.ki_pll * vc[1];
        dx[5] = k.kp_pll * vc[1] + xi;
        return dx;
    }
    VectorXd g(const VectorXd& x, const VectorXd&, const ParameterSet&, const VectorXd&, double) const override {
        return -x.segment<2>(0);
    }

private:
    struct Gains {
        double l, r, kp, ki, kp_pll, ki_pll;
    };
    static Gains gains(const ParameterSet& p, double vm, double w0) {
        Gains k{};
        k.l = detail::param(p, "L_f") / w0;
        k.r = detail::param(p, "R_f");
        const double wi = detail::hz(detail::param(p, "f_i"));
        const double wp = detail::hz(detail::param(p, "f_pll"));
        k.kp = k.l * wi;
        k.ki = k.l * wi * wi / 4.0;
        k.kp_pll = 2.0 * kPllDamping * wp / vm;
        k.ki_pll = wp * wp / vm;
        return k;
    }
};

// ---------------------------------------------------------------------------
// gfm_droop: droop-controlled voltage source behind an LC filter. Native
// input is the current into the apparatus, output the capacitor voltage.
// ---------------------------------------------------------------------------
class GfmDroopKind final : public ApparatusKind {
public:
    std::string name() const override { return "gfm_droop"; }
    PortForm native_form() const override { return PortForm::Impedance; }
    const std::vector<ParameterSpec>& parameters() const override {
        static const std::vector<ParameterSpec> specs = {
            {"K_D", 0.0, 1.0, NAN, true, false, "pu/pu", "frequency droop gain, pu speed per pu power"},
            {"f_v", 0.0, 1e3, NAN, true, false, "Hz", "voltage-loop bandwidth"},
            {"L_f", 0.0, 1.0, NAN, true, false, "pu", "filter reactance at w0"},
            {"C_f", 0.0, 1.0, NAN, true, false, "pu", "filter susceptance at w0"},
            {"R_f", 0.0, 1.0, 0.0, false, false, "pu", "filter resistance"},
            {"K_Q", 0.0, 1.0, 0.05, false, false, "pu/pu", "voltage droop gain"},
            {"f_pf", 0.0, 1e3, 10.0, true, false, "Hz", "power-measurement filter cut-off"},
        };
        return specs;
    }
    std::vector<std::string> state_names(const ParameterSet&, Index) const override {
        return {"theta", "P_f", "E", "i_f_d", "i_f_q", "v_c_d", "v_c_q"};
    }
    OperatingPoint operating_point(const ParameterSet& p, const Setpoint& sp, const VectorXd& v0,
                                   double w0) const override {
        const double vm2 = v0.squaredNorm();
        if (!(vm2 > 0.0)) throw EquilibriumError("gfm_droop: zero terminal voltage");
        const double l = detail::param(p, "L_f") / w0, c = detail::param(p, "C_f") / w0;
        const double r = detail::param(p, "R_f");
        // i_out = conj(S / v)
        const Eigen::Vector2d i_out((sp.p * v0[0] + sp.q * v0[1]) / vm2, (sp.p * v0[1] - sp.q * v0[0]) / vm2);
        const Eigen::Matrix2d J = rotation90();
        const Eigen::Vector2d i_f = i_out + w0 * c * (J * v0.head<2>());
        const Eigen::Vector2d e = v0.head<2>() + r * i_f + w0 * l * (J * i_f);
        VectorXd x(7);
        x << std::atan2(e[1], e[0]), sp.p, e.norm(), i_f, v0.head<2>();
        VectorXd refs(3);
        refs << sp.p, sp.q, e.norm();
        return {x, refs, -i_out};
    }
    VectorXd f(const VectorXd& x, const VectorXd& i_in, const ParameterSet& p, const VectorXd& refs,
               double w0) const override {
        const double l = detail::param(p, "L_f") / w0, c = detail::param(p, "C_f") / w0;
        const double r = detail::param(p, "R_f"), kd = detail::param(p, "K_D"), kq = detail::param(p, "K_Q");
        const double wv = detail::hz(detail::param(p, "f_v")), wf = detail::hz(detail::param(p, "f_pf"));
        const Eigen::Matrix2d J = rotation90();
        const double theta = x[0], pf = x[1], em = x[2];
        const Eigen::Vector2d i_f = x.segment<2>(3), vc = x.segment<2>(5);
        const Eigen::Vector2d i_out = -i_in.head<2>();
        const double pw = vc.dot(i_out);
        const double qw = vc[1] * i_out[0] - vc[0] * i_out[1];
        const Eigen::Vector2d e(em * std::cos(theta), em * std::sin(theta));
        VectorXd dx(7);
        dx[0] = w0 * kd * (refs[0] - pf);
        dx[1] = wf * (pw - pf);
        dx[2] = wv * (refs[2] + kq * (refs[1] - qw) - em);
        dx.segment<2>(3) = (e - vc - r * i_f - w0 * l * (J * i_f)) / l;
        dx.segment<2>(5) = (i_f - i_out - w0 * c * (J * vc)) / c;
        return dx;
    }
    VectorXd g(const VectorXd& x, const VectorXd&, const ParameterSet&, const VectorXd&, double) const override {
        return x.segment<2>(5);
    }
};

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

inline const std::vector<std::shared_ptr<const ApparatusKind>>& apparatus_catalog() {
    static const std::vector<std::shared_ptr<const ApparatusKind>> kinds = {
        std::make_shared<RlBranchKind>(), std::make_shared<SwingSgKind>(), std::make_shared<GflInverterKind>(),
        std::make_shared<GfmDroopKind>()};
    return kinds;
}

inline std::shared_ptr<const ApparatusKind> find_kind(const std::string& name) {
    for (const auto& k : apparatus_catalog())
        if (k->name() == name) return k;
    std::string known;
    for (const auto& k : apparatus_catalog()) known += (known.empty() ? "" : ", ") + k->name();
    throw InputError("unknown apparatus model '" + name + "' (known: " + known + ")");
}

/// An apparatus instance: kind, validated parameters and setpoint.
struct ApparatusModel {
    std::shared_ptr<const ApparatusKind> kind;
    ParameterSet params;
    Setpoint setpoint;
    double base_frequency = 0.0;  ///< w0, rad/s
    Frame frame = Frame::Dq;

    Index dim() const { return port_dimension(frame); }
    std::string name() const { return kind ? kind->name() : "?"; }

    /// Terminal voltage from the setpoint, global frame.
    VectorXd terminal_voltage() const {
        if (dim() == 1) return VectorXd::Constant(1, setpoint.v);
        const double a = setpoint.angle_deg * std::numbers::pi / 180.0;
        VectorXd v(2);
        v << setpoint.v * std::cos(a), setpoint.v * std::sin(a);
        return v;
    }

    std::vector<std::string> state_names() const { return kind->state_names(params, dim()); }
    std::vector<std::string> active_parameters() const { return kind->active_parameters(params); }

    ApparatusModel with_parameter(const std::string& name, double value) const {
        ApparatusModel out = *this;
        if (!out.params.count(name)) throw InputError("apparatus '" + this->name() + "' has no parameter '" + name + "'");
        out.params[name] = value;
        return out;
    }
};

/// Validates parameters against the catalog and fills defaults.
inline ApparatusModel make_apparatus(const std::string& kind_name, const ParameterSet& given, Setpoint setpoint,
                                     double base_frequency, Frame frame = Frame::Dq) {
    ApparatusModel m;
    m.kind = find_kind(kind_name);
    m.setpoint = setpoint;
    m.base_frequency = base_frequency;
    m.frame = frame;
    if (!m.kind->supports(frame)) {
        throw InputError(kind_name + ": frame not supported (dq only)");
    }
    const auto& specs = m.kind->parameters();
    for (const auto& [name, value] : given) {
        bool known = false;
        for (const auto& s : specs) known = known || s.name == name;
        if (!known) throw InputError(kind_name + ": unknown parameter '" + name + "'");
    }
    for (const auto& s : specs) {
        auto it = given.find(s.name);
        double value;
        if (it != given.end()) {
            value = it->second;
        } else if (!std::isnan(s.default_value)) {
            value = s.default_value;
        } else if (s.optional) {
            continue;
        } else {
            throw InputError(kind_name + ": missing required parameter '" + s.name + "'");
        }
        const bool below = s.lower_open ? !(value > s.lower) : !(value >= s.lower);
        if (!std::isfinite(value) || below || !(value <= s.upper)) {
            std::ostringstream os;
            os << kind_name << ": parameter " << s.name << " = " << value << " outside "
               << (s.lower_open ? "(" : "[") << s.lower << ", " << s.upper << "]";
            throw InputError(os.str());
        }
        m.params[s.name] = value;
    }
    const bool v_ok = m.kind->linear() ? setpoint.v >= 0.0 : setpoint.v > 0.0;
    if (!v_ok || !std::isfinite(setpoint.v) || !std::isfinite(setpoint.p) || !std::isfinite(setpoint.q) ||
        !std::isfinite(setpoint.angle_deg)) {
        throw InputError(kind_name + (m.kind->linear() ? ": setpoint must be finite with v >= 0"
                                                       : ": setpoint must be finite with v > 0"));
    }
    if (!(base_frequency > 0.0) && frame == Frame::Dq) throw InputError(kind_name + ": base frequency must be > 0");
    return m;
}

// ---------------------------------------------------------------------------
// Equilibrium and linearization
// ---------------------------------------------------------------------------

inline constexpr double kEquilibriumTolerance = 1e-10;
inline constexpr int kEquilibriumMaxIterations = 50;

namespace detail {

/// Central-difference Jacobian of fn, Richardson-extrapolated from steps h
/// and 2h with h = 1e-4 (1 + |x_j|).
template <typename Fn>
MatrixXd central_jacobian(Fn&& fn, const VectorXd& at, Index rows) {
    MatrixXd jac(rows, at.size());
    VectorXd probe = at;
    auto diff = [&](Index j, double h) {
        probe[j] = at[j] + h;
        const VectorXd up = fn(probe);
        probe[j] = at[j] - h;
        const VectorXd down = fn(probe);
        probe[j] = at[j];
        return VectorXd((up - down) / (2.0 * h));
    };
    for (Index j = 0; j < at.size(); ++j) {
        const double h = 1e-4 * (1.0 + std::abs(at[j]));
        jac.col(j) = (4.0 * diff(j, h) - diff(j, 2.0 * h)) / 3.0;
    }
    return jac;
}

inline std::string history_text(const std::vector<double>& h) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < h.size(); ++i) os << (i ? ", " : "") << h[i];
    os << "]";
    return os.str();
}

}  // namespace detail

/// Newton solve of f(x, u0) = 0 at terminal voltage v0 (default: setpoint).
inline Equilibrium find_equilibrium(const ApparatusModel& app, const std::optional<VectorXd>& v0 = std::nullopt,
                                    const VectorXd* start = nullptr) {
    const VectorXd v = v0 ? *v0 : app.terminal_voltage();
    if (v.size() != app.dim()) throw ShapeError("terminal voltage has wrong dimension");
    const double w0 = app.base_frequency;
    const OperatingPoint op = app.kind->operating_point(app.params, app.setpoint, v, w0);
    Equilibrium eq;
    eq.terminal = v;
    eq.u = op.u;
    eq.refs = op.refs;
    eq.x = start ? *start : op.x;
    if (eq.x.size() != op.x.size()) throw ShapeError("equilibrium start has wrong dimension");
    auto residual = [&](const VectorXd& x) { return app.kind->f(x, eq.u, app.params, eq.refs, w0); };

    VectorXd r = residual(eq.x);
    double norm = r.size() ? r.cwiseAbs().maxCoeff() : 0.0;
    eq.residual_history.push_back(norm);
    for (int it = 0; it < kEquilibriumMaxIterations; ++it) {
        if (norm <= kEquilibriumTolerance) return eq;
        eq.iterations = it + 1;
        const MatrixXd jac = detail::central_jacobian(residual, eq.x, r.size());
        Eigen::FullPivLU<MatrixXd> lu(jac);
        if (!lu.isInvertible()) {
            throw EquilibriumError(app.name() + ": singular Jacobian during equilibrium solve; residual history " +
                                   detail::history_text(eq.residual_history));
        }
        const VectorXd step = lu.solve(r);
        double t = 1.0;
        VectorXd trial;
        VectorXd rt;
        double nt = INFINITY;
        for (int back = 0; back < 20; ++back) {
            trial = eq.x - t * step;
            rt = residual(trial);
            nt = rt.cwiseAbs().maxCoeff();
            if (std::isfinite(nt) && nt < norm) break;
            t *= 0.5;
        }
        if (!std::isfinite(nt)) break;
        eq.x = trial;
        r = rt;
        norm = nt;
        eq.residual_history.push_back(norm);
    }
    if (norm <= kEquilibriumTolerance) return eq;
    throw EquilibriumError(app.name() + ": Newton did not converge in " + std::to_string(kEquilibriumMaxIterations) +
                           " iterations; residual history " + detail::history_text(eq.residual_history));
}

/// Linearization in the kind's native orientation (central differences).
inline StateSpaceForm linearize_native(const ApparatusModel& app, const Equilibrium& eq) {
    const double w0 = app.base_frequency;
    const auto& k = *app.kind;
    const Index n = eq.x.size();
    const Index d = eq.u.size();
    auto fx = [&](const VectorXd& x) { return k.f(x, eq.u, app.params, eq.refs, w0); };
    auto fu = [&](const VectorXd& u) { return k.f(eq.x, u, app.params, eq.refs, w0); };
    auto gx = [&](const VectorXd& x) { return k.g(x, eq.u, app.params, eq.refs, w0); };
    auto gu = [&](const VectorXd& u) { return k.g(eq.x, u, app.params, eq.refs, w0); };
    return StateSpaceForm(detail::central_jacobian(fx, eq.x, n), detail::central_jacobian(fu, eq.u, n),
                          detail::central_jacobian(gx, eq.x, d), detail::central_jacobian(gu, eq.u, d));
}

/// Swaps input and output of a square model: Y -> Z or Z -> Y.
///
/// Invertible feedthrough uses the standard inverse. A strictly proper model
/// with invertible CB (relative degree one) yields an inverse with a
/// linear-in-s term. Anything else raises OrientationError.
inline StateSpaceForm invert_orientation(const StateSpaceForm& m) {
    if (m.has_linear_term()) throw OrientationError("cannot invert a model that already has a linear term");
    const Index d = m.outputs();
    const Index n = m.states();
    Eigen::FullPivLU<MatrixXd> dlu(m.D);
    if (dlu.isInvertible() && dlu.rcond() > 1e-12) {
        const MatrixXd di = dlu.inverse();
        return StateSpaceForm(m.A - m.B * di * m.C, m.B * di, -di * m.C, di);
    }
    if (!m.D.isZero(0.0)) {
        throw OrientationError("feedthrough is singular but nonzero; use the admittance form for this apparatus");
    }
    const MatrixXd cb = m.C * m.B;
    Eigen::FullPivLU<MatrixXd> cblu(cb);
    if (!cblu.isInvertible() || !(cblu.rcond() > 1e-12)) {
        throw OrientationError("output relation not invertible (singular feedthrough and CB); use the admittance form");
    }
    const MatrixXd e = cblu.inverse();
    const MatrixXd pi = MatrixXd::Identity(n, n) - m.B * e * m.C;
    // orthonormal basis of null(C)
    Eigen::JacobiSVD<MatrixXd> svd(m.C, Eigen::ComputeFullV);
    const MatrixXd nb = svd.matrixV().rightCols(n - d);
    StateSpaceForm out(nb.transpose() * pi * m.A * nb, nb.transpose() * pi * m.A * m.B * e, -e * m.C * m.A * nb,
                       -e * m.C * m.A * m.B * e, e);
    return out;
}

inline StateSpaceForm linearize_admittance(const ApparatusModel& app, const Equilibrium& eq) {
    const StateSpaceForm native = linearize_native(app, eq);
    return app.kind->native_form() == PortForm::Admittance ? native : invert_orientation(native);
}

/// Linear impedance model, input di (into the apparatus), output dv.
inline StateSpaceForm linearize_impedance(const ApparatusModel& app, const Equilibrium& eq) {
    const StateSpaceForm native = linearize_native(app, eq);
    return app.kind->native_form() == PortForm::Impedance ? native : invert_orientation(native);
}

/// Interconnection port in native orientation (states stay native).
inline ApparatusPort make_port(const ApparatusModel& app, const Equilibrium& eq) {
    StateSpaceForm lin = linearize_native(app, eq);
    if (app.kind->native_form() == PortForm::Admittance) {
        return ApparatusPort::admittance(std::move(lin), app.state_names(), app.name());
    }
    return ApparatusPort::impedance(std::move(lin), app.state_names(), app.name());
}

inline MatrixXcd apparatus_impedance_at(const ApparatusModel& app, const Equilibrium& eq, cd s) {
    return make_port(app, eq).impedance_at(s);
}

// ---------------------------------------------------------------------------
// Impedance-parameter sensitivity
// ---------------------------------------------------------------------------

struct ImpedanceSensitivity {
    std::string parameter;
    cd s;
    double step = 0.0;
    MatrixXcd value;  ///< dZ_k(s)/d rho
};

/// Relative step of the parameter forward difference.
inline constexpr double kParameterStep = 1e-5;

inline double parameter_step(double rho, double relative = kParameterStep) {
    return relative * (1.0 + std::abs(rho));
}

/// Base and perturbed ports of one parameter step; the perturbed port is
/// linearized at the equilibrium re-solved under rho + d rho.
struct ParameterPerturbation {
    std::string parameter;
    double value = 0.0;
    double step = 0.0;
    ApparatusPort base;
    ApparatusPort perturbed;

    /// Forward difference (Z at rho + d rho minus Z at rho) / d rho.
    ImpedanceSensitivity at(cd s) const {
        ImpedanceSensitivity out{parameter, s, step, (perturbed.impedance_at(s) - base.impedance_at(s)) / step};
        if (!out.value.allFinite()) throw SensitivityError("non-finite impedance sensitivity for " + parameter);
        return out;
    }
};

inline ParameterPerturbation perturb_parameter(const ApparatusModel& app, const Equilibrium& eq,
                                               const std::string& name, double relative_step = kParameterStep) {
    auto it = app.params.find(name);
    if (it == app.params.end()) {
        throw InputError("apparatus '" + app.name() + "' has no parameter '" + name + "'");
    }
    const double rho = it->second;
    const double step = parameter_step(rho, relative_step);
    const ApparatusModel perturbed = app.with_parameter(name, rho + step);
    Equilibrium peq;
    try {
        peq = find_equilibrium(perturbed, eq.terminal);
    } catch (const EquilibriumError& e) {
        throw SensitivityError("perturbed equilibrium for " + name + " infeasible: " + e.what());
    }
    return ParameterPerturbation{name, rho, step, make_port(app, eq), make_port(perturbed, peq)};
}

inline ImpedanceSensitivity impedance_parameter_sensitivity(const ApparatusModel& app, const Equilibrium& eq,
                                                            const std::string& name, cd s,
                                                            double relative_step = kParameterStep) {
    return perturb_parameter(app, eq, name, relative_step).at(s);
}

}  // namespace greybox
