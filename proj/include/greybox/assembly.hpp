#pragma once

// Whole-system assembly: the network admittance Y_net is interconnected with
// one apparatus port per node. A virtual voltage source v_k sits in series
// with apparatus k and a virtual current source J_k is injected at node k.
//
//   whole-system admittance  Yhat: v -> i  (current out of the apparatus)
//   whole-system impedance   Zhat: J -> u  (node voltage)
//
// The interconnection is first written as a semi-explicit descriptor system
// and then reduced to an ordinary state-space model. Apparatus and network
// states keep their native coordinates; only derivative-carrying signals
// (capacitive node voltages, inductive port currents) become extra states.

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "greybox/lti.hpp"
#include "greybox/network.hpp"

namespace greybox {

enum class PortForm {
    Admittance,  ///< model maps terminal voltage to current into the apparatus
    Impedance,   ///< model maps current into the apparatus to terminal voltage
    Open,        ///< apparatus removed; no current flows
};

/// Linear terminal model of the apparatus at one node.
struct ApparatusPort {
    PortForm form = PortForm::Open;
    StateSpaceForm model;
    MatrixXcd series;  ///< constant impedance in series with the apparatus (empty = none)
    std::vector<std::string> state_names;
    std::string label;

    static ApparatusPort admittance(StateSpaceForm m, std::vector<std::string> names = {},
                                    std::string label = "apparatus") {
        return make(PortForm::Admittance, std::move(m), std::move(names), std::move(label));
    }
    static ApparatusPort impedance(StateSpaceForm m, std::vector<std::string> names = {},
                                   std::string label = "apparatus") {
        return make(PortForm::Impedance, std::move(m), std::move(names), std::move(label));
    }
    static ApparatusPort open(Index dim) {
        ApparatusPort p;
        p.form = PortForm::Open;
        p.model = StateSpaceForm::gain(MatrixXd::Zero(dim, dim));
        p.label = "open";
        return p;
    }

    Index dim() const { return model.outputs(); }
    Index states() const { return model.states(); }

    /// Apparatus impedance Z(s), including any series element.
    MatrixXcd impedance_at(cd s) const {
        MatrixXcd z;
        switch (form) {
            case PortForm::Impedance:
                z = eval(model, s);
                break;
            case PortForm::Admittance: {
                const MatrixXcd y = eval(model, s);
                Eigen::FullPivLU<MatrixXcd> lu(y);
                if (!lu.isInvertible()) {
                    throw EvaluationAtPoleError("apparatus '" + label + "' impedance has a pole at s = " +
                                                detail::format_complex(s));
                }
                z = lu.inverse();
                break;
            }
            case PortForm::Open:
                throw InputError("open port has no finite impedance");
        }
        if (series.size() != 0) z += series;
        return z;
    }

    /// Apparatus admittance Y(s) = Z(s)^{-1}.
    MatrixXcd admittance_at(cd s) const {
        if (form == PortForm::Admittance && series.size() == 0) return eval(model, s);
        if (form == PortForm::Open) return MatrixXcd::Zero(dim(), dim());
        const MatrixXcd z = impedance_at(s);
        Eigen::FullPivLU<MatrixXcd> lu(z);
        if (!lu.isInvertible()) {
            throw EvaluationAtPoleError("apparatus '" + label + "' admittance has a pole at s = " +
                                        detail::format_complex(s));
        }
        return lu.inverse();
    }

private:
    static ApparatusPort make(PortForm form, StateSpaceForm m, std::vector<std::string> names,
                              std::string label) {
        if (m.inputs() != m.outputs()) throw ShapeError("apparatus port model must be square");
        if (form == PortForm::Admittance && m.has_linear_term()) {
            throw InputError("admittance-form port '" + label + "' must be proper (no linear term)");
        }
        ApparatusPort p;
        p.form = form;
        if (names.empty()) {
            for (Index i = 0; i < m.states(); ++i) names.push_back("x" + std::to_string(i + 1));
        }
        if (static_cast<Index>(names.size()) != m.states()) throw ShapeError("state name count mismatch");
        p.model = std::move(m);
        p.state_names = std::move(names);
        p.label = std::move(label);
        return p;
    }
};

/// Impedance of the passive placeholder apparatus, pu.
inline constexpr double kPlaceholderResistance = 1e6;

inline ApparatusPort placeholder_port(Index dim) {
    return ApparatusPort::impedance(StateSpaceForm::gain(kPlaceholderResistance * MatrixXd::Identity(dim, dim)),
                                    {}, "placeholder");
}

/// Reduced realization with inputs [v (n); J (n)] and outputs [i (n); u (n)].
struct Interconnection {
    ComplexStateSpace realization;
    std::vector<std::string> state_names;
    std::vector<Index> port_offset;  ///< first state of each port's native states
    Index network_states = 0;
    double loop_condition = 0.0;
};

/// Maximum condition number of the algebraic-loop matrix.
inline constexpr double kWellPosedCondition = 1e12;

inline Interconnection interconnect(const StateSpaceForm& ynet, const std::vector<ApparatusPort>& ports,
                                    Index dim, const std::vector<std::string>& network_state_names = {}) {
    const Index K = static_cast<Index>(ports.size());
    const Index n = K * dim;
    if (K == 0) throw InputError("interconnect: no nodes");
    if (ynet.inputs() != n || ynet.outputs() != n) {
        throw ShapeError("interconnect: Y_net must be " + std::to_string(n) + "x" + std::to_string(n));
    }
    for (Index k = 0; k < K; ++k) {
        if (ports[k].dim() != dim) throw ShapeError("port " + std::to_string(k + 1) + " has wrong dimension");
    }

    const Index nn = ynet.states();
    std::vector<Index> offset(K);
    Index nx = nn;
    for (Index k = 0; k < K; ++k) {
        offset[k] = nx;
        nx += ports[k].states();
    }
    const Index ny = 3 * n;  // u, a, c
    const Index nv = 2 * n;  // v, J
    const Index U = 0, A_ = n, Cc_ = 2 * n;

    MatrixXcd Ax = MatrixXcd::Zero(nx, nx);
    MatrixXcd B1 = MatrixXcd::Zero(nx, ny);
    MatrixXcd B2 = MatrixXcd::Zero(nx, nv);
    MatrixXcd Cr = MatrixXcd::Zero(ny, nx);
    MatrixXcd Dr = MatrixXcd::Zero(ny, ny);
    MatrixXd F = MatrixXd::Zero(ny, ny);
    MatrixXcd G = MatrixXcd::Zero(ny, nv);
    const MatrixXcd I = MatrixXcd::Identity(dim, dim);

    // network rows: a = C x + D u + E du/dt
    Ax.topLeftCorner(nn, nn) = ynet.A.cast<cd>();
    B1.block(0, U, nn, n) = ynet.B.cast<cd>();
    Cr.block(0, 0, n, nn) = ynet.C.cast<cd>();
    Dr.block(0, U, n, n) = ynet.D.cast<cd>();
    F.block(0, U, n, n) = ynet.E;
    Dr.block(0, A_, n, n) = -MatrixXcd::Identity(n, n);
    // KCL rows: a + c = J
    Dr.block(n, A_, n, n) = MatrixXcd::Identity(n, n);
    Dr.block(n, Cc_, n, n) = MatrixXcd::Identity(n, n);
    G.block(n, n, n, n) = -MatrixXcd::Identity(n, n);

    for (Index k = 0; k < K; ++k) {
        const ApparatusPort& p = ports[k];
        const Index row = 2 * n + k * dim;
        const Index uk = U + k * dim;
        const Index ck = Cc_ + k * dim;
        const Index vk = k * dim;
        const Index xk = offset[k];
        const Index nk = p.states();
        const MatrixXcd S = p.series.size() ? p.series : MatrixXcd::Zero(dim, dim);
        if (S.rows() != dim || S.cols() != dim) throw ShapeError("series element has wrong dimension");
        const MatrixXcd Ak = p.model.A.cast<cd>(), Bk = p.model.B.cast<cd>();
        const MatrixXcd Ck = p.model.C.cast<cd>(), Dk = p.model.D.cast<cd>();
        switch (p.form) {
            case PortForm::Admittance:
                // w = u - v - S c;  dx = A x + B w;  c = C x + D w
                Ax.block(xk, xk, nk, nk) = Ak;
                B1.block(xk, uk, nk, dim) = Bk;
                B1.block(xk, ck, nk, dim) = -Bk * S;
                B2.block(xk, vk, nk, dim) = -Bk;
                Cr.block(row, xk, dim, nk) = Ck;
                Dr.block(row, uk, dim, dim) = Dk;
                Dr.block(row, ck, dim, dim) = -Dk * S - I;
                G.block(row, vk, dim, dim) = -Dk;
                break;
            case PortForm::Impedance:
                // u - v = C x + (D + S) c + E dc/dt;  dx = A x + B c
                Ax.block(xk, xk, nk, nk) = Ak;
                B1.block(xk, ck, nk, dim) = Bk;
                Cr.block(row, xk, dim, nk) = Ck;
                Dr.block(row, ck, dim, dim) = Dk + S;
                F.block(row, ck, dim, dim) = p.model.E;
                Dr.block(row, uk, dim, dim) = -I;
                G.block(row, vk, dim, dim) = I;
                break;
            case PortForm::Open:
                Dr.block(row, ck, dim, dim) = I;
                break;
        }
    }

    // Split signals into derivative-carrying (y1) and algebraic (y2) parts.
    Eigen::JacobiSVD<MatrixXd> fsvd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const VectorXd& sigma = fsvd.singularValues();
    Index r = 0;
    const double smax = sigma.size() ? sigma[0] : 0.0;
    while (r < sigma.size() && sigma[r] > 1e-10 * smax && smax > 0.0) ++r;
    const MatrixXcd Uf = fsvd.matrixU().cast<cd>();
    const MatrixXcd Vf = fsvd.matrixV().cast<cd>();
    const MatrixXcd Ct = Uf.adjoint() * Cr;
    const MatrixXcd Dt = Uf.adjoint() * Dr * Vf;
    const MatrixXcd Gt = Uf.adjoint() * G;
    const Index m2 = ny - r;

    const MatrixXcd D22 = Dt.bottomRightCorner(m2, m2);
    // Row equilibration keeps the well-posedness test independent of units.
    VectorXd row_scale(m2);
    for (Index i = 0; i < m2; ++i) {
        const double mx = D22.row(i).cwiseAbs().maxCoeff();
        row_scale[i] = mx > 0.0 ? 1.0 / mx : 1.0;
    }
    const MatrixXcd D22s = row_scale.asDiagonal() * D22;
    Eigen::JacobiSVD<MatrixXcd> lsvd(D22s, Eigen::ComputeFullV);
    const VectorXd& ls = lsvd.singularValues();
    const double cond = m2 == 0 ? 1.0 : (ls[m2 - 1] > 0.0 ? ls[0] / ls[m2 - 1] : INFINITY);
    if (!(cond < kWellPosedCondition)) {
        // locate the node carrying the null direction
        const VectorXcd null_y = Vf.rightCols(m2) * lsvd.matrixV().col(m2 - 1);
        Index worst = 0;
        null_y.cwiseAbs().maxCoeff(&worst);
        const Index node = (worst % n) / dim + 1;
        std::ostringstream os;
        os << "ill-posed interconnection at node " << node
           << ": loop feedthrough matrix is singular (condition number " << cond
           << "); add a shunt or series element at that node";
        throw AssemblyError(os.str());
    }
    Eigen::PartialPivLU<MatrixXcd> lu22(D22);

    const MatrixXcd Px = -lu22.solve(Ct.bottomRows(m2));
    const MatrixXcd P1 = -lu22.solve(Dt.bottomLeftCorner(m2, r));
    const MatrixXcd Pv = -lu22.solve(Gt.bottomRows(m2));

    const MatrixXcd B1V1 = B1 * Vf.leftCols(r);
    const MatrixXcd B1V2 = B1 * Vf.rightCols(m2);
    VectorXcd neg_inv_sigma(r);
    for (Index i = 0; i < r; ++i) neg_inv_sigma[i] = -1.0 / sigma[i];

    const Index N = nx + r;
    MatrixXcd A = MatrixXcd::Zero(N, N);
    MatrixXcd B = MatrixXcd::Zero(N, nv);
    A.topLeftCorner(nx, nx) = Ax + B1V2 * Px;
    A.topRightCorner(nx, r) = B1V1 + B1V2 * P1;
    B.topRows(nx) = B2 + B1V2 * Pv;
    if (r > 0) {
        const MatrixXcd D12 = Dt.topRightCorner(r, m2);
        A.bottomLeftCorner(r, nx) = neg_inv_sigma.asDiagonal() * (Ct.topRows(r) + D12 * Px);
        A.bottomRightCorner(r, r) = neg_inv_sigma.asDiagonal() * (Dt.topLeftCorner(r, r) + D12 * P1);
        B.bottomRows(r) = neg_inv_sigma.asDiagonal() * (Gt.topRows(r) + D12 * Pv);
    }

    // outputs: i = -c, u
    MatrixXcd H = MatrixXcd::Zero(2 * n, ny);
    H.block(0, Cc_, n, n) = -MatrixXcd::Identity(n, n);
    H.block(n, U, n, n) = MatrixXcd::Identity(n, n);
    const MatrixXcd HV1 = H * Vf.leftCols(r);
    const MatrixXcd HV2 = H * Vf.rightCols(m2);
    MatrixXcd C(2 * n, N);
    C.leftCols(nx) = HV2 * Px;
    C.rightCols(r) = HV1 + HV2 * P1;
    const MatrixXcd D = HV2 * Pv;

    Interconnection out;
    out.realization = ComplexStateSpace(std::move(A), std::move(B), std::move(C), D,
                                        MatrixXcd::Zero(2 * n, 2 * n));
    out.port_offset = offset;
    out.network_states = nn;
    out.loop_condition = cond;

    // state names
    for (Index i = 0; i < nn; ++i) {
        out.state_names.push_back(i < static_cast<Index>(network_state_names.size())
                                      ? network_state_names[static_cast<std::size_t>(i)]
                                      : "net.x" + std::to_string(i + 1));
    }
    for (Index k = 0; k < K; ++k) {
        for (const auto& s : ports[k].state_names) {
            out.state_names.push_back("node" + std::to_string(k + 1) + "." + ports[k].label + "." + s);
        }
    }
    const char* suffix_dq[] = {"_d", "_q"};
    for (Index j = 0; j < r; ++j) {
        Index idx = 0;
        Vf.col(j).cwiseAbs().maxCoeff(&idx);
        const Index node = (idx % n) / dim + 1;
        const Index ch = (idx % n) % dim;
        std::string signal = idx < A_ ? "v" : (idx < Cc_ ? "i_net" : "i_port");
        if (dim == 2) signal += suffix_dq[ch];
        out.state_names.push_back("node" + std::to_string(node) + "." + signal);
    }
    return out;
}

/// Direct evaluation of Yhat(s) = (I + Y_net Z)^{-1} Y_net.
inline MatrixXcd direct_whole_system_admittance(const StateSpaceForm& ynet, const std::vector<ApparatusPort>& ports,
                                                cd s) {
    const Index K = static_cast<Index>(ports.size());
    const Index dim = ports.front().dim();
    const Index n = K * dim;
    const MatrixXcd y = eval(ynet, s);
    MatrixXcd z = MatrixXcd::Zero(n, n);
    for (Index k = 0; k < K; ++k) z.block(k * dim, k * dim, dim, dim) = ports[k].impedance_at(s);
    MatrixXcd loop = MatrixXcd::Identity(n, n) + y * z;
    return loop.partialPivLu().solve(y);
}

/// Direct evaluation of the driving-point impedance at node k (0-based) with
/// apparatus k removed and all other apparatus in place.
inline MatrixXcd direct_grid_impedance(const StateSpaceForm& ynet, const std::vector<ApparatusPort>& ports,
                                       Index k, cd s) {
    const Index K = static_cast<Index>(ports.size());
    const Index dim = ports.front().dim();
    const Index n = K * dim;
    const MatrixXcd y = eval(ynet, s);
    // rows j != k:  u_j + Z_j (Y u)_j = 0 ;  row k: (Y u)_k = J
    MatrixXcd m = MatrixXcd::Zero(n, n);
    for (Index j = 0; j < K; ++j) {
        const Index r0 = j * dim;
        if (j == k) {
            m.middleRows(r0, dim) = y.middleRows(r0, dim);
        } else {
            m.middleRows(r0, dim) = ports[j].impedance_at(s) * y.middleRows(r0, dim);
            m.block(r0, r0, dim, dim) += MatrixXcd::Identity(dim, dim);
        }
    }
    MatrixXcd rhs = MatrixXcd::Zero(n, dim);
    rhs.middleRows(k * dim, dim) = MatrixXcd::Identity(dim, dim);
    const MatrixXcd u = m.partialPivLu().solve(rhs);
    return u.middleRows(k * dim, dim);
}

/// Immutable assembled system with cached eigendecomposition.
class WholeSystemModel {
public:
    WholeSystemModel(StateSpaceForm ynet, std::vector<ApparatusPort> ports, Index dim,
                     std::vector<std::string> network_state_names = {})
        : ynet_(std::move(ynet)), ports_(std::move(ports)), dim_(dim),
          network_state_names_(std::move(network_state_names)) {
        Interconnection ic = interconnect(ynet_, ports_, dim_, network_state_names_);
        realization_ = std::move(ic.realization);
        state_names_ = std::move(ic.state_names);
        port_offset_ = std::move(ic.port_offset);
        network_states_ = ic.network_states;
        loop_condition_ = ic.loop_condition;
        real_ = detail::is_exactly_real(realization_.A) && detail::is_exactly_real(realization_.B) &&
                detail::is_exactly_real(realization_.C) && detail::is_exactly_real(realization_.D);
        try {
            eigen_ = std::make_shared<const EigenSystem>(eigen_decompose(realization_.A));
        } catch (const DegenerateSpectrumError& e) {
            eigen_error_ = e.what();
        }
    }

    Index port_dim() const { return dim_; }
    Index node_count() const { return static_cast<Index>(ports_.size()); }
    Index channels() const { return dim_ * node_count(); }
    Index states() const { return realization_.states(); }
    bool is_real() const { return real_; }
    double loop_condition() const { return loop_condition_; }

    const StateSpaceForm& network() const { return ynet_; }
    const std::vector<ApparatusPort>& ports() const { return ports_; }
    const ApparatusPort& port(Index k) const { return ports_.at(static_cast<std::size_t>(check_node(k))); }
    const std::vector<std::string>& state_names() const { return state_names_; }
    const std::vector<std::string>& network_state_names() const { return network_state_names_; }
    /// First native state of apparatus k (0-based node index).
    Index port_state_offset(Index k) const { return port_offset_.at(static_cast<std::size_t>(check_node(k))); }

    /// Full realization: inputs [v; J], outputs [i; u].
    const ComplexStateSpace& realization() const { return realization_; }
    const MatrixXcd& state_matrix() const { return realization_.A; }

    /// Cached eigendecomposition; throws DegenerateSpectrumError for clustered spectra.
    const EigenSystem& eigen() const {
        if (!eigen_) throw DegenerateSpectrumError(eigen_error_);
        return *eigen_;
    }
    bool has_distinct_spectrum() const { return static_cast<bool>(eigen_); }

    /// Yhat restricted to all nodes (n x n).
    ComplexStateSpace admittance() const { return realization_.block(0, channels(), 0, channels()); }
    /// Yhat_kk block, 0-based node index.
    ComplexStateSpace admittance_block(Index k) const {
        check_node(k);
        return realization_.block(k * dim_, dim_, k * dim_, dim_);
    }
    /// Zhat_kk block, 0-based node index.
    ComplexStateSpace impedance_block(Index k) const {
        check_node(k);
        const Index n = channels();
        return realization_.block(n + k * dim_, dim_, n + k * dim_, dim_);
    }

    /// Residue of Yhat_kk at mode index n.
    MatrixXcd admittance_residue(Index k, Index mode) const {
        check_node(k);
        return modal_residue(eigen(), mode, realization_.C.middleRows(k * dim_, dim_),
                             realization_.B.middleCols(k * dim_, dim_));
    }
    /// Residue of Zhat_kk at mode index n.
    MatrixXcd impedance_residue(Index k, Index mode) const {
        check_node(k);
        const Index n = channels();
        return modal_residue(eigen(), mode, realization_.C.middleRows(n + k * dim_, dim_),
                             realization_.B.middleCols(n + k * dim_, dim_));
    }

    /// Same network with a different set of ports.
    WholeSystemModel with_ports(std::vector<ApparatusPort> ports) const {
        return WholeSystemModel(ynet_, std::move(ports), dim_, network_state_names_);
    }

private:
    Index check_node(Index k) const {
        if (k < 0 || k >= node_count()) {
            throw InputError("node index " + std::to_string(k + 1) + " outside 1.." + std::to_string(node_count()));
        }
        return k;
    }

    StateSpaceForm ynet_;
    std::vector<ApparatusPort> ports_;
    Index dim_;
    std::vector<std::string> network_state_names_;
    ComplexStateSpace realization_;
    std::vector<std::string> state_names_;
    std::vector<Index> port_offset_;
    Index network_states_ = 0;
    double loop_condition_ = 0.0;
    bool real_ = true;
    std::shared_ptr<const EigenSystem> eigen_;
    std::string eigen_error_;
};

/// Relative tolerance of the construction-time Yhat spot check.
inline constexpr double kAssemblyCheckTolerance = 1e-8;

/// Largest relative deviation between the realization and the direct
/// formula (I + Y_net Z)^{-1} Y_net over `count` pseudo-random frequencies.
inline double whole_system_formula_deviation(const WholeSystemModel& model, int count = 20,
                                             unsigned seed = 20240601u) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> decade(-1.0, 4.0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const ComplexStateSpace yhat = model.admittance();
    double worst = 0.0;
    for (int i = 0; i < count; ++i) {
        const double w = std::pow(10.0, decade(rng));
        const cd s(0.05 * w * unit(rng), w);
        MatrixXcd direct;
        MatrixXcd realized;
        try {
            direct = direct_whole_system_admittance(model.network(), model.ports(), s);
            realized = eval(yhat, s);
        } catch (const EvaluationAtPoleError&) {
            continue;
        }
        const double scale = std::max(direct.norm(), 1e-300);
        worst = std::max(worst, (realized - direct).norm() / scale);
    }
    return worst;
}

/// Assembles Yhat = (I + Y_net Z)^{-1} Y_net and checks the realization
/// against the direct formula.
inline WholeSystemModel assemble_whole_system(StateSpaceForm ynet, std::vector<ApparatusPort> ports, Index dim,
                                              std::vector<std::string> network_state_names = {}) {
    for (std::size_t k = 0; k < ports.size(); ++k) {
        if (ports[k].form == PortForm::Open) {
            throw InputError("node " + std::to_string(k + 1) + " has no apparatus; use placeholder_port()");
        }
    }
    WholeSystemModel model(std::move(ynet), std::move(ports), dim, std::move(network_state_names));
    const double deviation = whole_system_formula_deviation(model);
    if (!(deviation <= kAssemblyCheckTolerance)) {
        std::ostringstream os;
        os << "assembled realization deviates from (I + Y_net Z)^-1 Y_net by " << deviation << " (relative)";
        throw AssemblyError(os.str());
    }
    return model;
}

inline WholeSystemModel assemble_whole_system(const NetworkDescription& net, std::vector<ApparatusPort> ports) {
    if (static_cast<int>(ports.size()) != net.node_count) {
        throw InputError("one apparatus port per node required (" + std::to_string(net.node_count) + ")");
    }
    NodalAdmittance y = build_nodal_admittance(net);
    return assemble_whole_system(std::move(y.model), std::move(ports), net.port_dim(), std::move(y.state_names));
}

/// Yhat_kk as a real state-space model (1-based node index).
inline StateSpaceForm whole_system_admittance_at(const WholeSystemModel& model, int k) {
    return real_part(model.admittance_block(k - 1));
}

/// Whole-system impedance Zhat_kk (1-based node index).
inline StateSpaceForm whole_system_impedance_at(const WholeSystemModel& model, int k) {
    return real_part(model.impedance_block(k - 1));
}

/// Impedance of the rest of the grid seen from node k (1-based), obtained
/// by re-assembling with apparatus k open-circuited.
inline ComplexStateSpace grid_impedance_seen_complex(const WholeSystemModel& model, int k) {
    const Index K = model.node_count();
    if (k < 1 || k > K) throw InputError("node index " + std::to_string(k) + " out of range");
    std::vector<ApparatusPort> ports = model.ports();
    ports[static_cast<std::size_t>(k - 1)] = ApparatusPort::open(model.port_dim());
    Interconnection ic;
    try {
        ic = interconnect(model.network(), ports, model.port_dim());
    } catch (const AssemblyError& e) {
        throw TopologyError("removing apparatus " + std::to_string(k) +
                            " leaves no proper driving-point impedance: " + e.what());
    }
    const Index n = model.channels();
    const Index dim = model.port_dim();
    return ic.realization.block(n + (k - 1) * dim, dim, n + (k - 1) * dim, dim);
}

inline StateSpaceForm grid_impedance_seen(const WholeSystemModel& model, int k) {
    return real_part(grid_impedance_seen_complex(model, k));
}

}  // namespace greybox
