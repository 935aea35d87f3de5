#pragma once

// JSON reports. Field order is fixed and every number is rounded to 12
// significant digits, so equal inputs serialize to identical bytes.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "greybox/participation.hpp"
#include "greybox/spectrum.hpp"
#include "greybox/vecfit.hpp"

namespace greybox {

using ojson = nlohmann::ordered_json;

namespace report {

/// v rounded to 12 significant digits; non-finite values become null.
inline ojson number(double v) {
    if (!std::isfinite(v)) return nullptr;
    return std::stod(detail::format_number(v));
}

inline ojson complex(cd z) {
    ojson j;
    j["re"] = number(z.real());
    j["im"] = number(z.imag());
    return j;
}

inline ojson matrix(const MatrixXcd& m) {
    ojson rows = ojson::array();
    for (Index r = 0; r < m.rows(); ++r) {
        ojson row = ojson::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(complex(m(r, c)));
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Mode ids are 1-based positions in the full sorted mode list.
struct ModeCatalog {
    std::vector<Mode> modes;

    int id_of(const Mode& m) const {
        for (std::size_t i = 0; i < modes.size(); ++i) {
            if (modes[i].index == m.index) return static_cast<int>(i) + 1;
        }
        throw InputError("mode " + detail::format_complex(m.lambda) + " is not in the catalog");
    }
};

inline ojson mode_record(int id, const Mode& m) {
    ojson j;
    j["mode"] = id;
    j["lambda_re"] = number(m.lambda.real());
    j["lambda_im"] = number(m.lambda.imag());
    j["freq_hz"] = number(m.freq_hz());
    j["damping_ratio"] = number(m.damping());
    return j;
}

inline ojson mode_list(const ModeCatalog& cat, const std::vector<Mode>& modes) {
    ojson arr = ojson::array();
    for (const Mode& m : modes) arr.push_back(mode_record(cat.id_of(m), m));
    return arr;
}

inline ojson modes_report(const std::string& system, const ModeCatalog& cat, Index states) {
    ojson j;
    j["system"] = system;
    j["states"] = states;
    j["modes"] = mode_list(cat, cat.modes);
    return j;
}

inline std::vector<Mode> modes_of(const std::vector<ModeLayers>& layers) {
    std::vector<Mode> out;
    for (const auto& ml : layers) out.push_back(ml.mode);
    return out;
}

inline ojson layer1_report(const std::string& system, const ModeCatalog& cat, const std::vector<ModeLayers>& layers) {
    ojson j;
    j["system"] = system;
    j["modes"] = mode_list(cat, modes_of(layers));
    ojson body = ojson::object();
    for (const auto& ml : layers) {
        ojson per = ojson::object();
        for (const auto& nl : ml.nodes) per[std::to_string(nl.node)] = number(nl.layer1);
        body[std::to_string(cat.id_of(ml.mode))] = std::move(per);
    }
    j["layer1"] = std::move(body);
    return j;
}

inline ojson layer2_report(const std::string& system, const ModeCatalog& cat, const std::vector<ModeLayers>& layers) {
    ojson j;
    j["system"] = system;
    j["modes"] = mode_list(cat, modes_of(layers));
    ojson body = ojson::object();
    for (const auto& ml : layers) {
        ojson per = ojson::object();
        for (const auto& nl : ml.nodes) {
            ojson v;
            v["re"] = number(nl.layer2.real());
            v["im"] = number(nl.layer2.imag());
            v["re_norm"] = number(nl.layer2_normalized.real());
            v["im_norm"] = number(nl.layer2_normalized.imag());
            per[std::to_string(nl.node)] = std::move(v);
        }
        body[std::to_string(cat.id_of(ml.mode))] = std::move(per);
    }
    j["layer2"] = std::move(body);
    return j;
}

inline ojson layer3_report(const std::string& system, const ModeCatalog& cat, const std::vector<ModeLayers>& layers) {
    ojson j;
    j["system"] = system;
    j["modes"] = mode_list(cat, modes_of(layers));
    ojson body = ojson::object();
    for (const auto& ml : layers) {
        ojson per = ojson::object();
        for (const auto& nl : ml.nodes) {
            ojson params = ojson::object();
            for (const auto& pp : nl.layer3) params[pp.parameter] = complex(pp.value);
            per[std::to_string(nl.node)] = std::move(params);
        }
        body[std::to_string(cat.id_of(ml.mode))] = std::move(per);
    }
    j["layer3"] = std::move(body);
    return j;
}

struct LemmaEntry {
    int mode = 0;
    LemmaCheck check;
    std::string error;  ///< set when the check could not be run
};

inline ojson lemma_report(const std::string& system, const std::vector<LemmaEntry>& entries) {
    ojson arr = ojson::array();
    for (const auto& e : entries) {
        ojson j;
        j["mode"] = e.mode;
        j["node"] = e.check.node;
        j["lambda_re"] = number(e.check.lambda.real());
        j["lambda_im"] = number(e.check.lambda.imag());
        if (!e.error.empty()) {
            j["error"] = e.error;
            arr.push_back(std::move(j));
            continue;
        }
        j["dz"] = matrix(e.check.dz);
        ojson rows = ojson::array();
        for (const auto& r : e.check.rows) {
            ojson row;
            row["epsilon"] = number(r.epsilon);
            row["predicted"] = complex(r.predicted);
            row["observed"] = complex(r.observed);
            row["relative_error"] = number(r.relative_error);
            rows.push_back(std::move(row));
        }
        j["rows"] = std::move(rows);
        j["exact"] = e.check.exact;
        j["order"] = number(e.check.order);
        j["noise"] = number(e.check.noise);
        j["measurable"] = e.check.order_measurable();
        j["first_order"] = e.check.first_order();
        arr.push_back(std::move(j));
    }
    ojson out;
    out["system"] = system;
    out["lemma_check"] = std::move(arr);
    return out;
}

inline ojson quality_report(const FitQuality& q) {
    ojson j;
    j["rms_rel"] = number(q.rms_rel);
    j["max_rel"] = number(q.max_rel);
    ojson bands = ojson::array();
    for (const auto& b : q.bands) {
        ojson row;
        row["f_lo_hz"] = number(b.f_lo_hz);
        row["f_hi_hz"] = number(b.f_hi_hz);
        row["samples"] = b.samples;
        row["rms_rel"] = number(b.rms_rel);
        row["max_rel"] = number(b.max_rel);
        bands.push_back(std::move(row));
    }
    j["bands"] = std::move(bands);
    return j;
}

inline ojson fit_report(const FitResult& fit, const FitQuality& q, const OrderSweep* sweep = nullptr) {
    ojson j;
    ojson poles = ojson::array();
    for (const cd& a : fit.model.poles) poles.push_back(complex(a));
    j["poles"] = std::move(poles);
    ojson residues = ojson::array();
    for (const auto& r : fit.model.residues) residues.push_back(matrix(r));
    j["residues"] = std::move(residues);
    j["direct"] = matrix(fit.model.direct);
    j["linear"] = matrix(fit.model.linear);
    j["rms_rel"] = number(fit.rms_rel);
    j["best_iteration"] = fit.best_iteration;
    j["converged"] = fit.converged;
    j["quality"] = quality_report(q);
    if (sweep) {
        ojson s;
        s["knee"] = sweep->knee;
        ojson rows = ojson::array();
        for (const auto& e : sweep->entries) {
            ojson row;
            row["order"] = e.order;
            row["rms_rel"] = number(e.rms_rel);
            row["max_rel"] = number(e.max_rel);
            row["density_sensitivity"] = number(e.density_sensitivity);
            if (!e.error.empty()) row["error"] = e.error;
            rows.push_back(std::move(row));
        }
        s["orders"] = std::move(rows);
        j["order_sweep"] = std::move(s);
    }
    return j;
}

/// Reads back the fitted model written by fit_report.
inline PoleResidueForm fit_from_json(const ojson& j) {
    auto cplx = [](const ojson& v) { return cd(v.at("re").get<double>(), v.at("im").get<double>()); };
    auto mat = [&](const ojson& rows) {
        const Index q = static_cast<Index>(rows.size());
        const Index p = q > 0 ? static_cast<Index>(rows[0].size()) : 0;
        MatrixXcd m(q, p);
        for (Index r = 0; r < q; ++r) {
            for (Index c = 0; c < p; ++c) m(r, c) = cplx(rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
        }
        return m;
    };
    PoleResidueForm m;
    for (const auto& p : j.at("poles")) m.poles.push_back(cplx(p));
    for (const auto& r : j.at("residues")) m.residues.push_back(mat(r));
    m.direct = mat(j.at("direct"));
    m.linear = mat(j.at("linear"));
    m.validate();
    return m;
}

inline void write_json(const std::filesystem::path& path, const ojson& j) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

}  // namespace report
}  // namespace greybox
