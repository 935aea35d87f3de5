#pragma once

// Nodal admittance matrix Y_net of a lumped RLC network, realized as a
// state-space model from node voltages to currents injected into the network.
//
// In the dq frame every phasor element Z_ph(s) enters as the 2x2 block of
// Z_ph(s + j*w0), i.e. [[a, -b], [b, a]] for Z_ph(s + j*w0) = a + jb.

#include <queue>
#include <string>
#include <vector>

#include "greybox/lti.hpp"

namespace greybox {

enum class Frame {
    Dq,      ///< synchronous dq frame, 2 channels per node
    Scalar,  ///< single channel per node, no frequency shift
};

inline Index port_dimension(Frame frame) { return frame == Frame::Dq ? 2 : 1; }

/// Series R-L branch with total shunt capacitance c split between both ends.
struct Branch {
    int from = 0;  ///< 1-based node index
    int to = 0;
    double r = 0.0;
    double l = 0.0;  ///< inductance, pu * s
    double c = 0.0;  ///< capacitance, pu * s
};

/// Node-to-ground element: series R-L leg in parallel with capacitance c.
struct NodeShunt {
    int node = 0;
    double r = 0.0;
    double l = 0.0;
    double c = 0.0;
};

struct NetworkDescription {
    int node_count = 0;
    double base_frequency = 0.0;  ///< w0 in rad/s
    double s_base = 1.0;
    double v_base = 1.0;
    Frame frame = Frame::Dq;
    std::vector<Branch> branches;
    std::vector<NodeShunt> shunts;

    Index port_dim() const { return port_dimension(frame); }
    Index channels() const { return port_dim() * node_count; }

    void validate() const {
        if (node_count < 1) throw InputError("network: at least one node required");
        if (!(base_frequency >= 0.0) || !std::isfinite(base_frequency)) {
            throw InputError("network: base frequency must be finite and non-negative");
        }
        auto check_node = [&](int k, const std::string& where) {
            if (k < 1 || k > node_count) {
                throw InputError(where + ": node index " + std::to_string(k) + " outside 1.." +
                                 std::to_string(node_count));
            }
        };
        auto check_rlc = [](double r, double l, double c, const std::string& where) {
            for (double v : {r, l, c}) {
                if (!std::isfinite(v) || v < 0.0) throw InputError(where + ": r, l, c must be finite and >= 0");
            }
        };
        for (std::size_t i = 0; i < branches.size(); ++i) {
            const auto& b = branches[i];
            const std::string where = "branch " + std::to_string(i + 1);
            check_node(b.from, where);
            check_node(b.to, where);
            if (b.from == b.to) throw InputError(where + ": from and to nodes coincide");
            check_rlc(b.r, b.l, b.c, where);
            if (b.r == 0.0 && b.l == 0.0) throw InputError(where + ": zero series impedance");
        }
        for (std::size_t i = 0; i < shunts.size(); ++i) {
            const auto& s = shunts[i];
            const std::string where = "shunt " + std::to_string(i + 1);
            check_node(s.node, where);
            check_rlc(s.r, s.l, s.c, where);
            if (s.r == 0.0 && s.l == 0.0 && s.c == 0.0) throw InputError(where + ": empty shunt");
        }
    }

    /// Throws TopologyError for isolated nodes or a disconnected branch graph.
    void check_topology() const {
        std::vector<std::vector<int>> adjacency(static_cast<std::size_t>(node_count) + 1);
        std::vector<bool> touched(static_cast<std::size_t>(node_count) + 1, false);
        for (const auto& b : branches) {
            adjacency[b.from].push_back(b.to);
            adjacency[b.to].push_back(b.from);
            touched[b.from] = touched[b.to] = true;
        }
        for (const auto& s : shunts) touched[s.node] = true;
        for (int k = 1; k <= node_count; ++k) {
            if (!touched[k]) throw TopologyError("node " + std::to_string(k) + " is isolated");
        }
        if (node_count == 1) return;
        std::vector<bool> seen(static_cast<std::size_t>(node_count) + 1, false);
        std::queue<int> todo;
        todo.push(1);
        seen[1] = true;
        while (!todo.empty()) {
            const int k = todo.front();
            todo.pop();
            for (int l : adjacency[k]) {
                if (!seen[l]) {
                    seen[l] = true;
                    todo.push(l);
                }
            }
        }
        for (int k = 1; k <= node_count; ++k) {
            if (!seen[k]) throw TopologyError("node " + std::to_string(k) + " is not connected to node 1");
        }
    }
};

/// dq block of the phasor impedance r + s*l evaluated at s + j*w0.
inline MatrixXcd dq_rl_impedance(double r, double l, double w0, cd s) {
    MatrixXcd z(2, 2);
    z << r + s * l, -w0 * l, w0 * l, r + s * l;
    return z;
}

struct NodalAdmittance {
    StateSpaceForm model;             ///< node voltages -> injected currents
    std::vector<std::string> state_names;
};

/// Assembles Y_net. Inductive elements carry current states; capacitances
/// enter the linear-in-s term.
inline NodalAdmittance build_nodal_admittance(const NetworkDescription& net) {
    net.validate();
    net.check_topology();
    const Index d = net.port_dim();
    const Index n = net.channels();
    const double w0 = net.frame == Frame::Dq ? net.base_frequency : 0.0;
    const MatrixXd rot = d == 2 ? MatrixXd(rotation90()) : MatrixXd::Zero(1, 1);
    const MatrixXd eye = MatrixXd::Identity(d, d);

    struct Leg {
        int from;
        int to;  // 0 = ground
        double r;
        double l;
        std::string name;
    };
    std::vector<Leg> inductive;
    MatrixXd D = MatrixXd::Zero(n, n);
    MatrixXd E = MatrixXd::Zero(n, n);
    auto at = [d](int node) { return static_cast<Index>(node - 1) * d; };

    auto add_conductance = [&](int from, int to, double g) {
        D.block(at(from), at(from), d, d) += g * eye;
        if (to > 0) {
            D.block(at(to), at(to), d, d) += g * eye;
            D.block(at(from), at(to), d, d) -= g * eye;
            D.block(at(to), at(from), d, d) -= g * eye;
        }
    };
    auto add_capacitance = [&](int node, double c) {
        if (c == 0.0) return;
        E.block(at(node), at(node), d, d) += c * eye;
        D.block(at(node), at(node), d, d) += w0 * c * rot;
    };

    for (std::size_t i = 0; i < net.branches.size(); ++i) {
        const auto& b = net.branches[i];
        const std::string name = "branch" + std::to_string(i + 1);
        if (b.l > 0.0) {
            inductive.push_back({b.from, b.to, b.r, b.l, name});
        } else {
            add_conductance(b.from, b.to, 1.0 / b.r);
        }
        add_capacitance(b.from, 0.5 * b.c);
        add_capacitance(b.to, 0.5 * b.c);
    }
    for (std::size_t i = 0; i < net.shunts.size(); ++i) {
        const auto& s = net.shunts[i];
        const std::string name = "shunt" + std::to_string(i + 1);
        if (s.l > 0.0) {
            inductive.push_back({s.node, 0, s.r, s.l, name});
        } else if (s.r > 0.0) {
            add_conductance(s.node, 0, 1.0 / s.r);
        }
        add_capacitance(s.node, s.c);
    }

    const Index ns = static_cast<Index>(inductive.size()) * d;
    MatrixXd A = MatrixXd::Zero(ns, ns);
    MatrixXd B = MatrixXd::Zero(ns, n);
    MatrixXd C = MatrixXd::Zero(n, ns);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < inductive.size(); ++i) {
        const auto& leg = inductive[i];
        const Index x = static_cast<Index>(i) * d;
        // l di/dt = u_from - u_to - r i - w0 l J i
        A.block(x, x, d, d) = -(leg.r / leg.l) * eye - w0 * rot;
        B.block(x, at(leg.from), d, d) += eye / leg.l;
        C.block(at(leg.from), x, d, d) += eye;
        if (leg.to > 0) {
            B.block(x, at(leg.to), d, d) -= eye / leg.l;
            C.block(at(leg.to), x, d, d) -= eye;
        }
        if (d == 2) {
            names.push_back("net." + leg.name + ".i_d");
            names.push_back("net." + leg.name + ".i_q");
        } else {
            names.push_back("net." + leg.name + ".i");
        }
    }
    return NodalAdmittance{StateSpaceForm(A, B, C, D, E), std::move(names)};
}

}  // namespace greybox
