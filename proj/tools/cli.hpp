#pragma once

// greybox command line: modes | participate | fit.
// Exit codes: 0 ok, 2 input, 3 assembly, 4 degenerate spectrum, 5 fit.

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "greybox/greybox.hpp"

namespace greybox::cli {

enum ExitCode { kOk = 0, kFailure = 1, kInput = 2, kAssembly = 3, kDegenerate = 4, kFit = 5 };

struct RunConfig {
    std::string config;
    double fmin_hz = 0.1;
    double fmax_hz = 1e4;
    int points = 500;
    std::string mode_freq;
    std::optional<double> damping_below;
    std::optional<std::string> nodes;  ///< unset: every node
    bool verify = false;
    std::string out = ".";
    int order = 0;
    int iterations = 10;
    std::string sweep;
    bool quiet = false;
};

namespace detail {

inline std::pair<double, double> parse_range(const std::string& text, const std::string& flag) {
    const auto colon = text.find(':');
    try {
        if (colon == std::string::npos) throw std::invalid_argument("no colon");
        std::size_t used = 0;
        const double lo = std::stod(text.substr(0, colon), &used);
        if (used != colon) throw std::invalid_argument("trailing");
        const std::string rest = text.substr(colon + 1);
        const double hi = std::stod(rest, &used);
        if (used != rest.size()) throw std::invalid_argument("trailing");
        return {lo, hi};
    } catch (const std::exception&) {
        throw InputError(flag + ": expected LO:HI, got '" + text + "'");
    }
}

inline std::vector<int> parse_nodes(const std::string& text, int node_count) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const int k = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument("trailing");
            if (k < 1 || k > node_count) {
                throw InputError("--nodes: node " + item + " does not exist (1.." + std::to_string(node_count) + ")");
            }
            if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
        } catch (const InputError&) {
            throw;
        } catch (const std::exception&) {
            throw InputError("--nodes: '" + item + "' is not a node id");
        }
    }
    if (out.empty()) throw InputError("--nodes: empty node selection");
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<Mode> select(const std::vector<Mode>& all, const RunConfig& cfg) {
    ModeSelection sel;
    sel.damping_below = cfg.damping_below;
    std::vector<Mode> picked;
    if (!cfg.mode_freq.empty() && cfg.mode_freq.find(':') == std::string::npos) {
        double f = 0.0;
        try {
            std::size_t used = 0;
            f = std::stod(cfg.mode_freq, &used);
            if (used != cfg.mode_freq.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw InputError("--mode-freq: expected a frequency in Hz or LO:HI, got '" + cfg.mode_freq + "'");
        }
        picked = select_modes(all, sel);
        if (picked.empty()) throw InputError("no modes match the selection");
        auto nearest = std::min_element(picked.begin(), picked.end(), [&](const Mode& a, const Mode& b) {
            return std::abs(a.freq_hz() - f) < std::abs(b.freq_hz() - f);
        });
        return {*nearest};
    }
    if (!cfg.mode_freq.empty()) {
        const auto [lo, hi] = parse_range(cfg.mode_freq, "--mode-freq");
        if (!(lo <= hi)) throw InputError("--mode-freq: LO must not exceed HI");
        sel.fmin_hz = lo;
        sel.fmax_hz = hi;
    }
    picked = select_modes(all, sel);
    if (picked.empty()) throw InputError("no modes match the selection");
    return picked;
}

inline std::filesystem::path output_dir(const RunConfig& cfg) {
    const std::filesystem::path dir(cfg.out);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw InputError("cannot create output directory '" + cfg.out + "': " + ec.message());
    return dir;
}

inline GreyboxSystem load(const RunConfig& cfg) {
    if (cfg.config.empty()) throw InputError("--config is required");
    return build_system(load_system(cfg.config));
}

inline std::string system_name(const GreyboxSystem& sys, const RunConfig& cfg) {
    if (!sys.description.name.empty()) return sys.description.name;
    return std::filesystem::path(cfg.config).stem().string();
}

inline std::string fmt(double v, int prec = 6) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

}  // namespace detail

inline int cmd_modes(const RunConfig& cfg, std::ostream& out) {
    if (!(cfg.fmin_hz > 0.0) || !(cfg.fmin_hz < cfg.fmax_hz)) throw InputError("--fmin/--fmax: need 0 < fmin < fmax");
    if (cfg.points < 2) throw InputError("--points: need at least 2");
    const GreyboxSystem sys = detail::load(cfg);
    const auto dir = detail::output_dir(cfg);
    const std::string name = detail::system_name(sys, cfg);
    report::ModeCatalog cat{listed_modes(sys.model)};
    report::write_json(dir / "modes.json", report::modes_report(name, cat, sys.model.states()));

    std::vector<double> omega;
    for (double f : logspace(cfg.fmin_hz, cfg.fmax_hz, static_cast<std::size_t>(cfg.points))) omega.push_back(hz_to_rad(f));
    for (int k = 1; k <= sys.node_count(); ++k) {
        write_spectrum_csv((dir / ("spectrum_" + std::to_string(k) + ".csv")).string(),
                           sample_spectrum(whole_system_admittance_at(sys.model, k), omega));
    }
    if (!cfg.quiet) {
        out << name << ": " << sys.model.states() << " states, " << cat.modes.size() << " modes\n";
        out << "  mode        re(lambda)       freq_hz   damping\n";
        for (std::size_t i = 0; i < cat.modes.size(); ++i) {
            const Mode& m = cat.modes[i];
            out << std::setw(6) << i + 1 << std::setw(18) << detail::fmt(m.lambda.real()) << std::setw(14)
                << detail::fmt(m.freq_hz()) << std::setw(10) << detail::fmt(m.damping(), 4) << '\n';
        }
        if (!sys.model.has_distinct_spectrum()) out << "  note: spectrum has clustered eigenvalues\n";
        out << "wrote modes.json and " << sys.node_count() << " spectrum files to " << dir.string() << '\n';
    }
    return kOk;
}

/// Deterministic perturbation direction for the Lemma check of (mode, node),
/// scaled to ||Z_k(lambda)||.
inline MatrixXcd lemma_direction(int mode, int node, const MatrixXcd& z) {
    std::mt19937 rng(static_cast<unsigned>(1000 * mode + node));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    MatrixXcd d(z.rows(), z.cols());
    for (Index i = 0; i < d.size(); ++i) d(i) = cd(u(rng), u(rng));
    return d * (frobenius_norm(z) / frobenius_norm(d));
}

inline int cmd_participate(const RunConfig& cfg, std::ostream& out) {
    const GreyboxSystem sys = detail::load(cfg);
    const std::vector<int> nodes = !cfg.nodes ? std::vector<int>{} : detail::parse_nodes(*cfg.nodes, sys.node_count());
    const std::string name = detail::system_name(sys, cfg);
    report::ModeCatalog cat{system_modes(sys.model)};
    const std::vector<Mode> picked = detail::select(cat.modes, cfg);
    const auto dir = detail::output_dir(cfg);

    LayerReportOptions opt;
    opt.nodes = nodes;
    const auto layers = layer_report(sys, picked, opt);
    report::write_json(dir / "layer1.json", report::layer1_report(name, cat, layers));
    report::write_json(dir / "layer2.json", report::layer2_report(name, cat, layers));
    report::write_json(dir / "layer3.json", report::layer3_report(name, cat, layers));

    std::vector<report::LemmaEntry> lemma;
    if (cfg.verify) {
        std::vector<std::pair<Mode, int>> jobs;
        for (const auto& ml : layers) {
            for (const auto& nl : ml.nodes) {
                jobs.emplace_back(ml.mode, nl.node);
                lemma.push_back({cat.id_of(ml.mode), {}, {}});
            }
        }
        parallel_for(jobs.size(), [&](std::size_t j) {
            auto& e = lemma[j];
            const auto& [mode, k] = jobs[j];
            e.check.node = k;
            e.check.lambda = mode.lambda;
            try {
                const MatrixXcd z = sys.model.port(k - 1).impedance_at(mode.lambda);
                e.check = verify_lemma_fd(sys.model, k, mode.lambda, lemma_direction(e.mode, k, z));
            } catch (const MatchingError& err) {
                e.error = err.what();
            }
        });
        report::write_json(dir / "lemma_check.json", report::lemma_report(name, lemma));
    }

    if (!cfg.quiet) {
        out << name << ": " << layers.size() << " modes x " << (layers.empty() ? 0 : layers[0].nodes.size())
            << " nodes\n";
        out << "  mode       freq_hz   damping  top node   layer1    re(layer2 norm)\n";
        for (const auto& ml : layers) {
            const auto top = std::max_element(ml.nodes.begin(), ml.nodes.end(),
                                              [](const NodeLayers& a, const NodeLayers& b) { return a.layer1 < b.layer1; });
            out << std::setw(6) << cat.id_of(ml.mode) << std::setw(14) << detail::fmt(ml.mode.freq_hz())
                << std::setw(10) << detail::fmt(ml.mode.damping(), 4) << std::setw(10) << top->node << std::setw(12)
                << detail::fmt(top->layer1, 4) << std::setw(14) << detail::fmt(top->layer2_normalized.real(), 4) << '\n';
        }
        if (cfg.verify) {
            std::size_t ok = 0, measurable = 0, failed = 0;
            for (const auto& e : lemma) {
                if (!e.error.empty()) {
                    ++failed;
                } else if (e.check.order_measurable()) {
                    ++measurable;
                    if (e.check.first_order()) ++ok;
                }
            }
            out << "lemma check: " << ok << " of " << measurable << " measurable pairs first-order";
            if (lemma.size() - failed > measurable) out << ", " << lemma.size() - failed - measurable << " below roundoff";
            if (failed) out << ", " << failed << " unmatched";
            out << '\n';
        }
        out << "wrote layer1.json, layer2.json, layer3.json" << (cfg.verify ? ", lemma_check.json" : "") << " to "
            << dir.string() << '\n';
    }
    return kOk;
}

inline int cmd_fit(const RunConfig& cfg, std::ostream& out) {
    if (cfg.config.empty()) throw InputError("--config is required (spectrum csv)");
    if (cfg.order < 1) throw InputError("--order: must be >= 1");
    if (cfg.iterations < 1) throw InputError("--iters: must be >= 1");
    const SampledSpectrum sp = read_spectrum_csv(cfg.config);
    FitConfig fc;
    fc.order = cfg.order;
    fc.iterations = cfg.iterations;
    std::optional<OrderSweep> sweep;
    if (!cfg.sweep.empty()) {
        const auto [lo, hi] = detail::parse_range(cfg.sweep, "--sweep");
        if (lo < 1 || hi < lo || lo != std::floor(lo) || hi != std::floor(hi)) {
            throw InputError("--sweep: expected integer orders FIRST:LAST with 1 <= FIRST <= LAST");
        }
        sweep = sweep_orders(sp, fc, static_cast<int>(lo), static_cast<int>(hi), 2);
    }
    const FitResult fit = vector_fit(sp, fc);
    const FitQuality q = fit_quality(fit, sp);
    const auto dir = detail::output_dir(cfg);
    report::write_json(dir / "fit.json", report::fit_report(fit, q, sweep ? &*sweep : nullptr));
    if (!cfg.quiet) {
        out << "fit order " << cfg.order << ": rms_rel " << detail::fmt(q.rms_rel, 3) << ", max_rel "
            << detail::fmt(q.max_rel, 3) << (fit.converged ? "" : " (not converged)") << '\n';
        out << "  poles:\n";
        for (const cd& a : fit.model.poles) {
            if (a.imag() < 0.0) continue;
            out << "    " << detail::fmt(a.real()) << (a.imag() > 0.0 ? " +/- j" + detail::fmt(a.imag()) : "") << '\n';
        }
        out << "  band           samples   rms_rel     max_rel\n";
        for (const auto& b : q.bands) {
            out << "    " << std::setw(6) << detail::fmt(b.f_lo_hz, 3) << "-" << std::setw(6) << std::left
                << detail::fmt(b.f_hi_hz, 3) << std::right << std::setw(8) << b.samples << std::setw(12)
                << detail::fmt(b.rms_rel, 3) << std::setw(12) << detail::fmt(b.max_rel, 3) << '\n';
        }
        if (sweep) {
            out << "  order sweep (knee " << sweep->knee << "):\n";
            for (const auto& e : sweep->entries) {
                out << "    order " << std::setw(3) << e.order << "  rms_rel " << detail::fmt(e.rms_rel, 3)
                    << (e.error.empty() ? "" : "  (" + e.error + ")") << '\n';
            }
        }
        out << "wrote fit.json to " << dir.string() << '\n';
    }
    return kOk;
}

/// Runs a command, mapping library errors onto exit codes.
template <typename Command>
int guarded(Command&& cmd, std::ostream& err) {
    try {
        return cmd();
    } catch (const FitError& e) {
        err << "error: " << e.what() << '\n';
        return kFit;
    } catch (const DegenerateSpectrumError& e) {
        err << "error: degenerate spectrum: " << e.what() << '\n';
        return kDegenerate;
    } catch (const InputError& e) {
        err << "error: " << e.what() << '\n';
        return kInput;
    } catch (const AssemblyError& e) {
        err << "error: assembly: " << e.what() << '\n';
        return kAssembly;
    } catch (const TopologyError& e) {
        err << "error: assembly: " << e.what() << '\n';
        return kAssembly;
    } catch (const EquilibriumError& e) {
        err << "error: assembly: " << e.what() << '\n';
        return kAssembly;
    } catch (const OrientationError& e) {
        err << "error: assembly: " << e.what() << '\n';
        return kAssembly;
    } catch (const SensitivityError& e) {
        err << "error: assembly: " << e.what() << '\n';
        return kAssembly;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Grey-box impedance participation analysis"};
    app.name("greybox");
    app.require_subcommand(1);
    RunConfig cfg;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--out", cfg.out, "Output directory")->capture_default_str();
        sub->add_flag("--quiet", cfg.quiet, "No human-readable summary on stdout");
    };
    auto system_opts = [&](CLI::App* sub) {
        sub->add_option("--config", cfg.config, "System description (JSON)")->required();
        common(sub);
    };

    CLI::App* modes = app.add_subcommand("modes", "List modes and write whole-system admittance spectra");
    system_opts(modes);
    modes->add_option("--fmin", cfg.fmin_hz, "Lowest sweep frequency (Hz)")->capture_default_str();
    modes->add_option("--fmax", cfg.fmax_hz, "Highest sweep frequency (Hz)")->capture_default_str();
    modes->add_option("--points", cfg.points, "Log-spaced sweep points")->capture_default_str();

    CLI::App* part = app.add_subcommand("participate", "Grey-box participation layers for selected modes");
    system_opts(part);
    part->add_option("--mode-freq", cfg.mode_freq, "Mode nearest F Hz, or modes in LO:HI Hz");
    part->add_option("--damping-below", cfg.damping_below, "Modes with damping ratio below this value");
    part->add_option("--nodes", cfg.nodes, "Comma-separated node ids (default: all)");
    part->add_flag("--verify", cfg.verify, "Finite-difference check of the eigenvalue-shift prediction");

    CLI::App* fit = app.add_subcommand("fit", "Vector-fit a sampled spectrum (CSV)");
    fit->add_option("--config,--spectrum", cfg.config, "Spectrum CSV")->required();
    fit->add_option("--order", cfg.order, "Number of poles")->required();
    fit->add_option("--iters", cfg.iterations, "Pole relocation passes")->capture_default_str();
    fit->add_option("--sweep", cfg.sweep, "Also sweep orders FIRST:LAST in steps of 2");
    common(fit);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kInput;
    }

    if (*modes) return guarded([&] { return cmd_modes(cfg, out); }, err);
    if (*part) return guarded([&] { return cmd_participate(cfg, out); }, err);
    return guarded([&] { return cmd_fit(cfg, out); }, err);
}

}  // namespace greybox::cli
