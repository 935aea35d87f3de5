#pragma once

// System description files (JSON) and the assembled analysis system.
//
//   {
//     "base": {"f0_hz": 60, "s_base": 100, "v_base": 230, "frame": "dq"},
//     "nodes": [{"id": 1, "shunt": {"r": 0, "l": 0, "c": 0.001}}, ...],
//     "branches": [{"from": 1, "to": 2, "r": 0.01, "l": 0.0003, "c": 0}],
//     "apparatus": [{"node": 1, "model": "swing_sg", "params": {...},
//                    "setpoint": {"p": 0.5, "q": 0, "v": 1, "angle_deg": 0}}]
//   }
//
// Nodes without an apparatus entry get the high-impedance placeholder.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "greybox/apparatus.hpp"
#include "greybox/assembly.hpp"
#include "greybox/network.hpp"

namespace greybox {

struct SystemDescription {
    std::string name;
    NetworkDescription network;
    std::vector<std::optional<ApparatusModel>> apparatus;  ///< one slot per node
};

namespace detail {

using nlohmann::json;

inline std::string line_of(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

inline const json& field(const json& obj, const std::string& key, const std::string& path) {
    if (!obj.is_object()) throw InputError(path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw InputError(path + "." + key + ": missing field");
    return *it;
}

inline double number(const json& v, const std::string& path) {
    if (!v.is_number()) throw InputError(path + ": expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw InputError(path + ": not finite");
    return d;
}

inline double number_or(const json& obj, const std::string& key, double fallback, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    return number(*it, path + "." + key);
}

inline int node_index(const json& v, const std::string& path) {
    if (!v.is_number_integer()) throw InputError(path + ": expected an integer node id");
    return v.get<int>();
}

inline void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw InputError(path + "." + it.key() + ": unknown field");
    }
}

}  // namespace detail

/// Parses a system description. `source` names the input in diagnostics.
inline SystemDescription parse_system(const std::string& text, const std::string& source = "<input>") {
    using detail::json;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError(source + ": JSON syntax error at " + detail::line_of(text, e.byte));
    }
    if (!doc.is_object()) throw InputError(source + ": top level must be an object");
    detail::reject_unknown(doc, {"name", "description", "base", "nodes", "branches", "apparatus"}, source);

    SystemDescription sys;
    if (doc.contains("name")) {
        if (!doc["name"].is_string()) throw InputError(source + ".name: expected a string");
        sys.name = doc["name"].get<std::string>();
    }
    NetworkDescription& net = sys.network;

    const json& base = detail::field(doc, "base", source);
    detail::reject_unknown(base, {"f0_hz", "s_base", "v_base", "frame"}, source + ".base");
    const double f0 = detail::number(detail::field(base, "f0_hz", source + ".base"), source + ".base.f0_hz");
    net.base_frequency = 2.0 * std::numbers::pi * f0;
    net.s_base = detail::number_or(base, "s_base", 1.0, source + ".base");
    net.v_base = detail::number_or(base, "v_base", 1.0, source + ".base");
    if (base.contains("frame")) {
        const json& fr = base["frame"];
        if (fr == "dq") {
            net.frame = Frame::Dq;
        } else if (fr == "scalar") {
            net.frame = Frame::Scalar;
        } else {
            throw InputError(source + ".base.frame: expected \"dq\" or \"scalar\"");
        }
    }
    if (net.frame == Frame::Dq && !(f0 > 0.0)) throw InputError(source + ".base.f0_hz: must be > 0");

    const json& nodes = detail::field(doc, "nodes", source);
    if (!nodes.is_array() || nodes.empty()) throw InputError(source + ".nodes: expected a non-empty array");
    net.node_count = static_cast<int>(nodes.size());
    std::vector<bool> seen(nodes.size() + 1, false);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::string path = source + ".nodes[" + std::to_string(i) + "]";
        const json& nd = nodes[i];
        detail::reject_unknown(nd, {"id", "name", "shunt"}, path);
        const int id = detail::node_index(detail::field(nd, "id", path), path + ".id");
        if (id < 1 || id > net.node_count) {
            throw InputError(path + ".id: node ids must be 1.." + std::to_string(net.node_count));
        }
        if (seen[static_cast<std::size_t>(id)]) throw InputError(path + ".id: duplicate node id " + std::to_string(id));
        seen[static_cast<std::size_t>(id)] = true;
        if (nd.contains("shunt")) {
            const json& sh = nd["shunt"];
            const std::string sp = path + ".shunt";
            detail::reject_unknown(sh, {"r", "l", "c"}, sp);
            NodeShunt s{id, detail::number_or(sh, "r", 0.0, sp), detail::number_or(sh, "l", 0.0, sp),
                        detail::number_or(sh, "c", 0.0, sp)};
            net.shunts.push_back(s);
        }
    }

    if (doc.contains("branches")) {
        const json& br = doc["branches"];
        if (!br.is_array()) throw InputError(source + ".branches: expected an array");
        for (std::size_t i = 0; i < br.size(); ++i) {
            const std::string path = source + ".branches[" + std::to_string(i) + "]";
            detail::reject_unknown(br[i], {"from", "to", "r", "l", "c"}, path);
            Branch b;
            b.from = detail::node_index(detail::field(br[i], "from", path), path + ".from");
            b.to = detail::node_index(detail::field(br[i], "to", path), path + ".to");
            b.r = detail::number_or(br[i], "r", 0.0, path);
            b.l = detail::number_or(br[i], "l", 0.0, path);
            b.c = detail::number_or(br[i], "c", 0.0, path);
            net.branches.push_back(b);
        }
    }
    net.validate();

    sys.apparatus.resize(static_cast<std::size_t>(net.node_count));
    if (doc.contains("apparatus")) {
        const json& ap = doc["apparatus"];
        if (!ap.is_array()) throw InputError(source + ".apparatus: expected an array");
        for (std::size_t i = 0; i < ap.size(); ++i) {
            const std::string path = source + ".apparatus[" + std::to_string(i) + "]";
            const json& a = ap[i];
            detail::reject_unknown(a, {"node", "model", "params", "setpoint"}, path);
            const int node = detail::node_index(detail::field(a, "node", path), path + ".node");
            if (node < 1 || node > net.node_count) throw InputError(path + ".node: no such node");
            auto& slot = sys.apparatus[static_cast<std::size_t>(node - 1)];
            if (slot) throw InputError(path + ".node: node " + std::to_string(node) + " already has an apparatus");
            const json& model = detail::field(a, "model", path);
            if (!model.is_string()) throw InputError(path + ".model: expected a string");
            ParameterSet params;
            if (a.contains("params")) {
                const json& ps = a["params"];
                if (!ps.is_object()) throw InputError(path + ".params: expected an object");
                for (auto it = ps.begin(); it != ps.end(); ++it) {
                    params[it.key()] = detail::number(it.value(), path + ".params." + it.key());
                }
            }
            Setpoint sp;
            if (a.contains("setpoint")) {
                const json& s = a["setpoint"];
                const std::string spp = path + ".setpoint";
                detail::reject_unknown(s, {"p", "q", "v", "angle_deg"}, spp);
                sp.p = detail::number_or(s, "p", 0.0, spp);
                sp.q = detail::number_or(s, "q", 0.0, spp);
                sp.v = detail::number_or(s, "v", 1.0, spp);
                sp.angle_deg = detail::number_or(s, "angle_deg", 0.0, spp);
            }
            try {
                slot = make_apparatus(model.get<std::string>(), params, sp, net.base_frequency, net.frame);
            } catch (const InputError& e) {
                throw InputError(path + ": " + e.what());
            }
        }
    }
    return sys;
}

inline SystemDescription load_system(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open system file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_system(buf.str(), path);
}

/// A system with solved apparatus equilibria and the assembled model.
struct GreyboxSystem {
    SystemDescription description;
    std::vector<std::optional<Equilibrium>> equilibria;
    std::vector<ApparatusPort> ports;
    WholeSystemModel model;

    int node_count() const { return description.network.node_count; }
    const std::optional<ApparatusModel>& apparatus(int k) const {
        return description.apparatus.at(static_cast<std::size_t>(k - 1));
    }
};

/// Solves every apparatus equilibrium and linearizes it into a port.
inline std::vector<ApparatusPort> build_ports(const SystemDescription& sys,
                                              std::vector<std::optional<Equilibrium>>* equilibria = nullptr) {
    const Index dim = sys.network.port_dim();
    std::vector<ApparatusPort> ports;
    if (equilibria) equilibria->assign(sys.apparatus.size(), std::nullopt);
    for (std::size_t k = 0; k < sys.apparatus.size(); ++k) {
        const auto& app = sys.apparatus[k];
        if (!app) {
            ports.push_back(placeholder_port(dim));
            continue;
        }
        Equilibrium eq = find_equilibrium(*app);
        ports.push_back(make_port(*app, eq));
        if (equilibria) (*equilibria)[k] = std::move(eq);
    }
    return ports;
}

inline GreyboxSystem build_system(SystemDescription sys) {
    std::vector<std::optional<Equilibrium>> eqs;
    std::vector<ApparatusPort> ports = build_ports(sys, &eqs);
    NodalAdmittance y = build_nodal_admittance(sys.network);
    WholeSystemModel model = assemble_whole_system(std::move(y.model), ports, sys.network.port_dim(),
                                                   std::move(y.state_names));
    return GreyboxSystem{std::move(sys), std::move(eqs), std::move(ports), std::move(model)};
}

/// Same system with one apparatus parameter changed (equilibrium re-solved).
inline GreyboxSystem with_parameter(const GreyboxSystem& sys, int k, const std::string& name, double value) {
    SystemDescription d = sys.description;
    auto& slot = d.apparatus.at(static_cast<std::size_t>(k - 1));
    if (!slot) throw InputError("node " + std::to_string(k) + " has no apparatus");
    *slot = slot->with_parameter(name, value);
    return build_system(std::move(d));
}

}  // namespace greybox
