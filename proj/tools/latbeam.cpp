#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "latbeam/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitBadConfig = 2;

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config_path, "flat key=value experiment file");
    cmd->add_option("--seed", o.seed, "overrides the configured seed");
    cmd->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out", o.out, "output file (stdout when omitted)");
}

latbeam::ExperimentConfig load_config(const CommonOptions& o) {
    latbeam::ExperimentConfig c;
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) {
            throw latbeam::ConfigError("--config", "cannot read '" + o.config_path + "'");
        }
        std::stringstream buf;
        buf << in.rdbuf();
        c = latbeam::ExperimentConfig::parse(buf.str());
    }
    if (o.seed) {
        c.seed = *o.seed;
    }
    c.validate();
    return c;
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write '" + path + "'");
    }
    out << text;
}

int stats_sweep(const CommonOptions& o) {
    const auto config = load_config(o);
    emit(o.out, latbeam::sweep_csv(latbeam::stats_sweep(config, o.threads)));
    return kExitOk;
}

int run_search(const CommonOptions& o, std::size_t instance, const std::string& report_path) {
    const auto config = load_config(o);
    const auto scorer = config.combined();
    const auto x = config.instance_input(instance);
    const std::size_t k = config.k_values.front();
    const std::size_t b = config.b_values.front();
    const auto result = latbeam::search(scorer, x, config.search_config(k, b));
    emit(o.out, latbeam::serialize(result.lattice));

    const auto stats = latbeam::assemble_stats(result);
    const auto vocab = latbeam::Vocabulary::letters(config.vocab_size);
    nlohmann::json report{{"instance", instance},
                          {"k", latbeam::history_limit_label(k)},
                          {"b", b},
                          {"log_score_mass", stats.log_score_mass},
                          {"num_sequences", stats.num_sequences.str()},
                          {"num_recombinations", stats.num_recombinations},
                          {"mean_distance", stats.mean_distance ? nlohmann::json(*stats.mean_distance) : nlohmann::json(nullptr)}};
    report["finished"] = nlohmann::json::array();
    for (const auto& f : result.finished) {
        report["finished"].push_back({{"tokens", vocab.render(f.tokens, true)}, {"mass", f.mass}});
    }
    if (report_path.empty()) {
        std::cerr << report.dump(2) << "\n";
    } else {
        emit(report_path, report.dump(2) + "\n");
    }
    return kExitOk;
}

int run_train(const CommonOptions& o, const std::string& checkpoint) {
    const auto config = load_config(o);
    const auto task = latbeam::make_synthetic_task(config);
    const auto run = latbeam::run_training(config, task, o.threads);
    emit(o.out, latbeam::metrics_csv(run.result.log));
    if (!checkpoint.empty()) {
        nlohmann::json j{{"am", run.result.am->to_json()},
                         {"lm", run.initial.lm_ptr() ? run.initial.lm_ptr()->to_json() : nlohmann::json(nullptr)},
                         {"alpha", config.alpha},
                         {"beta", config.beta},
                         {"diverged", run.result.diverged}};
        emit(checkpoint, j.dump(2) + "\n");
    }
    if (run.result.diverged) {
        std::cerr << "training stopped: mean criterion fell for " << config.patience << " consecutive epochs\n";
        return kExitCheckFailed;
    }
    return kExitOk;
}

int run_oracle_check(const CommonOptions& o, std::optional<double> tolerance) {
    auto config = load_config(o);
    if (tolerance) {
        if (!(*tolerance >= 0.0)) {
            throw latbeam::ConfigError("--tolerance", "must be non-negative");
        }
        config.tolerance = *tolerance;
    }
    const auto report = latbeam::oracle_check(config, o.threads);
    emit(o.out, report.to_json().dump(2) + "\n");
    for (const auto& c : report.checks) {
        std::cerr << (c.passed ? "PASS " : "FAIL ") << c.name << " max_delta=" << c.max_delta
                  << " tolerance=" << c.tolerance << (c.detail.empty() ? "" : " (" + c.detail + ")") << "\n";
    }
    return report.passed() ? kExitOk : kExitCheckFailed;
}

int fig1_demo(const CommonOptions& o) {
    const auto lattice = latbeam::figure_one_lattice();
    const auto vocab = latbeam::figure_one_vocabulary();
    emit(o.out, latbeam::serialize(lattice));
    const auto count = latbeam::count_paths(lattice);
    std::cerr << "paths: " << count.str() << "\n";
    for (const auto& p : latbeam::enumerate_paths(lattice, 64)) {
        std::cerr << "  " << vocab.render(p.tokens) << "\n";
    }
    return count == 8 ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Beam search with approximative recombination into lattices"};
    app.require_subcommand(1);

    CommonOptions sweep_opts, search_opts, train_opts, oracle_opts, fig_opts;
    auto* sweep = app.add_subcommand("stats-sweep", "lattice statistics over k and b (CSV)");
    add_common(sweep, sweep_opts);

    auto* srch = app.add_subcommand("search", "decode one instance and write its lattice");
    add_common(srch, search_opts);
    std::size_t instance = 0;
    std::string report_path;
    srch->add_option("--instance", instance, "instance index");
    srch->add_option("--report", report_path, "JSON summary file (stderr when omitted)");

    auto* trn = app.add_subcommand("train", "ML-initialize then sequence-train on the synthetic task");
    add_common(trn, train_opts);
    std::string checkpoint;
    trn->add_option("--checkpoint", checkpoint, "model checkpoint JSON");

    auto* orc = app.add_subcommand("oracle-check", "compare the search against brute-force references");
    add_common(orc, oracle_opts);
    std::optional<double> tolerance;
    orc->add_option("--tolerance", tolerance, "overrides the configured tolerance");

    auto* fig = app.add_subcommand("fig1-demo", "worked lattice example with 8 sequences");
    add_common(fig, fig_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitBadConfig;
    }

    try {
        if (*sweep) {
            return stats_sweep(sweep_opts);
        }
        if (*srch) {
            return run_search(search_opts, instance, report_path);
        }
        if (*trn) {
            return run_train(train_opts, checkpoint);
        }
        if (*orc) {
            return run_oracle_check(oracle_opts, tolerance);
        }
        if (*fig) {
            return fig1_demo(fig_opts);
        }
    } catch (const latbeam::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitBadConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return kExitBadConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    }
    return kExitOk;
}
