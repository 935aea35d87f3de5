#pragma once

// Sampled frequency responses and their CSV representation.
//
// CSV layout: header `freq_hz` followed by `re_<r><c>,im_<r><c>` column
// pairs in row-major element order (1-based indices). Frequencies are stored
// in Hz on disk and in rad/s in memory.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "greybox/lti.hpp"
#include "greybox/parallel.hpp"

namespace greybox {

struct SampledSpectrum {
    std::vector<double> omega;        ///< rad/s, strictly increasing
    std::vector<MatrixXcd> samples;   ///< one q x p matrix per frequency

    std::size_t size() const { return omega.size(); }
    Index outputs() const { return samples.empty() ? 0 : samples.front().rows(); }
    Index inputs() const { return samples.empty() ? 0 : samples.front().cols(); }

    void validate() const {
        if (omega.size() != samples.size()) throw ShapeError("spectrum: frequency/sample count mismatch");
        if (omega.size() < 2) throw InputError("spectrum: at least 2 samples required");
        for (std::size_t i = 0; i < omega.size(); ++i) {
            if (!std::isfinite(omega[i])) throw InputError("spectrum: non-finite frequency");
            if (i > 0 && !(omega[i] > omega[i - 1])) {
                throw InputError("spectrum: frequencies must be strictly increasing");
            }
            if (samples[i].rows() != samples[0].rows() || samples[i].cols() != samples[0].cols()) {
                throw ShapeError("spectrum: sample shapes differ");
            }
            if (!samples[i].allFinite()) throw InputError("spectrum: non-finite sample");
        }
    }
};

inline double hz_to_rad(double f) { return 2.0 * std::numbers::pi * f; }
inline double rad_to_hz(double w) { return w / (2.0 * std::numbers::pi); }

/// Samples `model` at s = j*omega for every omega (rad/s).
template <typename Model>
SampledSpectrum sample_spectrum(const Model& model, const std::vector<double>& omega) {
    SampledSpectrum out;
    out.omega = omega;
    out.samples.resize(omega.size());
    parallel_for(omega.size(), [&](std::size_t i) { out.samples[i] = eval(model, cd(0.0, omega[i])); });
    out.validate();
    return out;
}

namespace detail {

inline std::string format_number(double v) {
    if (v == 0.0) v = 0.0;  // folds -0
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        std::size_t start = 0;
        while (start < cell.size() && cell[start] == ' ') ++start;
        out.push_back(cell.substr(start));
    }
    return out;
}

}  // namespace detail

inline void write_spectrum_csv(std::ostream& os, const SampledSpectrum& spectrum) {
    spectrum.validate();
    const Index q = spectrum.outputs();
    const Index p = spectrum.inputs();
    os << "freq_hz";
    for (Index r = 0; r < q; ++r) {
        for (Index c = 0; c < p; ++c) os << ",re_" << r + 1 << c + 1 << ",im_" << r + 1 << c + 1;
    }
    os << '\n';
    for (std::size_t i = 0; i < spectrum.size(); ++i) {
        os << detail::format_number(rad_to_hz(spectrum.omega[i]));
        for (Index r = 0; r < q; ++r) {
            for (Index c = 0; c < p; ++c) {
                const cd v = spectrum.samples[i](r, c);
                os << ',' << detail::format_number(v.real()) << ',' << detail::format_number(v.imag());
            }
        }
        os << '\n';
    }
}

/// Parses the spectrum CSV. Errors carry the offending line number.
inline SampledSpectrum read_spectrum_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw InputError("spectrum csv: empty input");
    const auto header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "freq_hz") {
        throw InputError("spectrum csv line 1: first column must be 'freq_hz'");
    }
    const std::size_t pairs = (header.size() - 1) / 2;
    if (header.size() < 3 || (header.size() - 1) % 2 != 0) {
        throw InputError("spectrum csv line 1: expected re_/im_ column pairs after freq_hz");
    }
    Index rows = 0;
    Index cols = 0;
    for (std::size_t k = 0; k < pairs; ++k) {
        const std::string& re = header[1 + 2 * k];
        const std::string& im = header[2 + 2 * k];
        if (re.size() != 5 || re.rfind("re_", 0) != 0 || im != "im_" + re.substr(3) ||
            !std::isdigit(static_cast<unsigned char>(re[3])) ||
            !std::isdigit(static_cast<unsigned char>(re[4]))) {
            throw InputError("spectrum csv line 1: malformed column pair '" + re + "," + im + "'");
        }
        rows = std::max<Index>(rows, re[3] - '0');
        cols = std::max<Index>(cols, re[4] - '0');
    }
    if (rows * cols != static_cast<Index>(pairs)) {
        throw InputError("spectrum csv line 1: column pairs do not form a full matrix");
    }
    for (std::size_t k = 0; k < pairs; ++k) {
        const Index r = static_cast<Index>(k) / cols;
        const Index c = static_cast<Index>(k) % cols;
        const std::string expect = "re_" + std::to_string(r + 1) + std::to_string(c + 1);
        if (header[1 + 2 * k] != expect) {
            throw InputError("spectrum csv line 1: expected column '" + expect + "' in row-major order");
        }
    }

    SampledSpectrum out;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw InputError("spectrum csv line " + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
        }
        std::vector<double> values(cells.size());
        for (std::size_t k = 0; k < cells.size(); ++k) {
            try {
                std::size_t used = 0;
                values[k] = std::stod(cells[k], &used);
                if (used != cells[k].size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw InputError("spectrum csv line " + std::to_string(line_no) + ": field " +
                                 std::to_string(k + 1) + " is not a number");
            }
        }
        MatrixXcd m(rows, cols);
        for (std::size_t k = 0; k < pairs; ++k) {
            m(static_cast<Index>(k) / cols, static_cast<Index>(k) % cols) = cd(values[1 + 2 * k], values[2 + 2 * k]);
        }
        out.omega.push_back(hz_to_rad(values[0]));
        out.samples.push_back(std::move(m));
    }
    out.validate();
    return out;
}

inline SampledSpectrum read_spectrum_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open spectrum file '" + path + "'");
    return read_spectrum_csv(in);
}

inline void write_spectrum_csv(const std::string& path, const SampledSpectrum& spectrum) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write spectrum file '" + path + "'");
    write_spectrum_csv(out, spectrum);
}

}  // namespace greybox
