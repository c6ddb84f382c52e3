#ifndef LATBEAM_EXPERIMENT_HPP
#define LATBEAM_EXPERIMENT_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <nlohmann/json.hpp>

#include "latbeam/core.hpp"
#include "latbeam/lattice.hpp"
#include "latbeam/models.hpp"
#include "latbeam/oracle.hpp"
#include "latbeam/search.hpp"
#include "latbeam/stats.hpp"
#include "latbeam/training.hpp"

namespace latbeam {

/// Invalid configuration; `field` names the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct ExperimentConfig {
    // Models.
    std::string family = "recurrent";
    std::size_t context_length = 2;
    std::size_t vocab_size = 6;
    std::size_t hidden_size = 8;
    std::size_t feature_dim = 3;
    std::size_t frames = 1;
    double eos_floor = 1e-4;
    double init_scale = 1.0;
    bool use_lm = true;
    double alpha = 0.1;
    double beta = 0.035;

    // Instances and sweeps.
    std::uint64_t seed = 1;
    std::size_t instances = 64;
    std::vector<std::size_t> k_values{1, 2, 4, 8, kInfiniteHistory};
    std::vector<std::size_t> b_values{8};
    std::size_t max_length = 10;
    DistanceForm distance = DistanceForm::kSquared;
    FinishedPolicy finished_policy = FinishedPolicy::kCompeteInBeam;

    // Oracle checks.
    double tolerance = 1e-9;
    double gradient_tolerance = 1e-4;
    /// Length bound for the exhaustive checks; at most max_length.
    std::size_t oracle_max_length = 5;
    std::size_t oracle_max_sequences = 300000;

    // Training.
    std::string teacher_family = "recurrent";
    std::size_t teacher_hidden = 8;
    double teacher_scale = 2.0;
    std::size_t train_size = 128;
    std::size_t heldout_size = 128;
    std::size_t epochs = 50;
    double learning_rate = 0.1;
    std::size_t batch_size = 8;
    std::size_t ml_epochs = 30;
    double ml_learning_rate = 0.05;
    std::size_t train_k = kInfiniteHistory;
    std::size_t train_b = 8;
    std::size_t decode_b = 4;
    bool include_gt = true;
    std::size_t patience = 5;

    void validate() const {
        if (family != "limited" && family != "recurrent") {
            throw ConfigError("family", "expected limited or recurrent, got '" + family + "'");
        }
        if (teacher_family != "limited" && teacher_family != "recurrent") {
            throw ConfigError("teacher_family", "expected limited or recurrent, got '" + teacher_family + "'");
        }
        if (vocab_size < 2 || vocab_size > 27) {
            throw ConfigError("vocab_size", "must lie in [2, 27]");
        }
        if (context_length < 1) {
            throw ConfigError("context_length", "must be >= 1");
        }
        if (hidden_size < 1) {
            throw ConfigError("hidden_size", "must be >= 1");
        }
        if (teacher_hidden < 1) {
            throw ConfigError("teacher_hidden", "must be >= 1");
        }
        if (frames < 1) {
            throw ConfigError("frames", "must be >= 1");
        }
        if (!(eos_floor >= 0.0 && eos_floor < 1.0)) {
            throw ConfigError("eos_floor", "must lie in [0, 1)");
        }
        if (!(std::isfinite(alpha) && alpha >= 0.0)) {
            throw ConfigError("alpha", "must be finite and non-negative");
        }
        if (!(std::isfinite(beta) && beta >= 0.0)) {
            throw ConfigError("beta", "must be finite and non-negative");
        }
        if (instances < 1) {
            throw ConfigError("instances", "must be >= 1");
        }
        if (k_values.empty()) {
            throw ConfigError("k_values", "needs at least one entry");
        }
        for (const auto k : k_values) {
            if (k < 1) {
                throw ConfigError("k_values", "entries must be >= 1 or inf");
            }
        }
        if (b_values.empty()) {
            throw ConfigError("b_values", "needs at least one entry");
        }
        for (const auto b : b_values) {
            if (b < 1) {
                throw ConfigError("b_values", "entries must be >= 1");
            }
        }
        if (max_length < 1) {
            throw ConfigError("max_length", "must be >= 1");
        }
        if (oracle_max_length < 1 || oracle_max_length > max_length) {
            throw ConfigError("oracle_max_length", "must lie in [1, max_length]");
        }
        if (!(tolerance >= 0.0)) {
            throw ConfigError("tolerance", "must be non-negative");
        }
        if (!(gradient_tolerance >= 0.0)) {
            throw ConfigError("gradient_tolerance", "must be non-negative");
        }
        if (train_k < 1) {
            throw ConfigError("train_k", "must be >= 1 or inf");
        }
        if (train_b < 1) {
            throw ConfigError("train_b", "must be >= 1");
        }
        if (decode_b < 1) {
            throw ConfigError("decode_b", "must be >= 1");
        }
        if (train_size < 1) {
            throw ConfigError("train_size", "must be >= 1");
        }
        if (!(std::isfinite(learning_rate) && learning_rate >= 0.0)) {
            throw ConfigError("learning_rate", "must be finite and non-negative");
        }
        if (!(std::isfinite(ml_learning_rate) && ml_learning_rate >= 0.0)) {
            throw ConfigError("ml_learning_rate", "must be finite and non-negative");
        }
        if (batch_size < 1) {
            throw ConfigError("batch_size", "must be >= 1");
        }
    }

    /// Parses a flat "key = value" document. '#' starts a comment; unknown
    /// keys and malformed values are errors.
    static ExperimentConfig parse(std::string_view text) {
        ExperimentConfig c;
        const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters{
            {"family", [&](auto& k, auto& v) { c.family = v, (void)k; }},
            {"context_length", [&](auto& k, auto& v) { c.context_length = to_count(k, v); }},
            {"vocab_size", [&](auto& k, auto& v) { c.vocab_size = to_count(k, v); }},
            {"hidden_size", [&](auto& k, auto& v) { c.hidden_size = to_count(k, v); }},
            {"feature_dim", [&](auto& k, auto& v) { c.feature_dim = to_count(k, v); }},
            {"frames", [&](auto& k, auto& v) { c.frames = to_count(k, v); }},
            {"eos_floor", [&](auto& k, auto& v) { c.eos_floor = to_real(k, v); }},
            {"init_scale", [&](auto& k, auto& v) { c.init_scale = to_real(k, v); }},
            {"use_lm", [&](auto& k, auto& v) { c.use_lm = to_bool(k, v); }},
            {"alpha", [&](auto& k, auto& v) { c.alpha = to_real(k, v); }},
            {"beta", [&](auto& k, auto& v) { c.beta = to_real(k, v); }},
            {"seed", [&](auto& k, auto& v) { c.seed = to_count(k, v); }},
            {"instances", [&](auto& k, auto& v) { c.instances = to_count(k, v); }},
            {"k_values", [&](auto& k, auto& v) { c.k_values = to_list(k, v, true); }},
            {"b_values", [&](auto& k, auto& v) { c.b_values = to_list(k, v, false); }},
            {"max_length", [&](auto& k, auto& v) { c.max_length = to_count(k, v); }},
            {"distance",
             [&](auto& k, auto& v) {
                 if (v == "squared") {
                     c.distance = DistanceForm::kSquared;
                 } else if (v == "euclidean") {
                     c.distance = DistanceForm::kEuclidean;
                 } else {
                     throw ConfigError(k, "expected squared or euclidean");
                 }
             }},
            {"finished_policy",
             [&](auto& k, auto& v) {
                 if (v == "compete") {
                     c.finished_policy = FinishedPolicy::kCompeteInBeam;
                 } else if (v == "set_aside") {
                     c.finished_policy = FinishedPolicy::kSetAside;
                 } else {
                     throw ConfigError(k, "expected compete or set_aside");
                 }
             }},
            {"tolerance", [&](auto& k, auto& v) { c.tolerance = to_real(k, v); }},
            {"gradient_tolerance", [&](auto& k, auto& v) { c.gradient_tolerance = to_real(k, v); }},
            {"oracle_max_length", [&](auto& k, auto& v) { c.oracle_max_length = to_count(k, v); }},
            {"oracle_max_sequences", [&](auto& k, auto& v) { c.oracle_max_sequences = to_count(k, v); }},
            {"teacher_family", [&](auto& k, auto& v) { c.teacher_family = v, (void)k; }},
            {"teacher_hidden", [&](auto& k, auto& v) { c.teacher_hidden = to_count(k, v); }},
            {"teacher_scale", [&](auto& k, auto& v) { c.teacher_scale = to_real(k, v); }},
            {"train_size", [&](auto& k, auto& v) { c.train_size = to_count(k, v); }},
            {"heldout_size", [&](auto& k, auto& v) { c.heldout_size = to_count(k, v); }},
            {"epochs", [&](auto& k, auto& v) { c.epochs = to_count(k, v); }},
            {"learning_rate", [&](auto& k, auto& v) { c.learning_rate = to_real(k, v); }},
            {"batch_size", [&](auto& k, auto& v) { c.batch_size = to_count(k, v); }},
            {"ml_epochs", [&](auto& k, auto& v) { c.ml_epochs = to_count(k, v); }},
            {"ml_learning_rate", [&](auto& k, auto& v) { c.ml_learning_rate = to_real(k, v); }},
            {"train_k", [&](auto& k, auto& v) { c.train_k = to_limit(k, v); }},
            {"train_b", [&](auto& k, auto& v) { c.train_b = to_count(k, v); }},
            {"decode_b", [&](auto& k, auto& v) { c.decode_b = to_count(k, v); }},
            {"include_gt", [&](auto& k, auto& v) { c.include_gt = to_bool(k, v); }},
            {"patience", [&](auto& k, auto& v) { c.patience = to_count(k, v); }},
        };
        std::set<std::string> seen;
        std::size_t line_no = 0;
        std::istringstream in{std::string(text)};
        std::string line;
        while (std::getline(in, line)) {
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string::npos) {
                line.erase(hash);
            }
            const std::string stripped = trim(line);
            if (stripped.empty()) {
                continue;
            }
            const auto eq = stripped.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("", "line " + std::to_string(line_no) + ": expected 'key = value'");
            }
            const std::string key = trim(stripped.substr(0, eq));
            const std::string value = trim(stripped.substr(eq + 1));
            const auto it = setters.find(key);
            if (it == setters.end()) {
                throw ConfigError(key, "unknown key (line " + std::to_string(line_no) + ")");
            }
            if (!seen.insert(key).second) {
                throw ConfigError(key, "given twice (line " + std::to_string(line_no) + ")");
            }
            it->second(key, value);
        }
        c.validate();
        return c;
    }

    ScorerShape am_shape() const {
        ScorerShape s;
        s.vocab_size = vocab_size;
        s.hidden_size = hidden_size;
        s.feature_dim = feature_dim;
        s.context_length = context_length;
        s.max_steps = max_length;
        s.eos_floor = eos_floor;
        s.init_scale = init_scale;
        s.seed = derive_seed(seed, 1);
        return s;
    }

    ScorerShape lm_shape() const {
        ScorerShape s = am_shape();
        s.feature_dim = 0;
        s.seed = derive_seed(seed, 2);
        return s;
    }

    ScorerShape teacher_shape() const {
        ScorerShape s = am_shape();
        s.hidden_size = teacher_hidden;
        s.init_scale = teacher_scale;
        s.seed = derive_seed(seed, 3);
        return s;
    }

    CombinedScorer combined() const {
        auto am = make_scorer(family, am_shape());
        std::shared_ptr<const SequenceScorer> lm;
        if (use_lm) {
            lm = make_scorer(family, lm_shape());
        }
        return CombinedScorer(std::move(am), std::move(lm), alpha, beta);
    }

    InputFeatures instance_input(std::size_t index) const {
        return InputFeatures::random(frames, feature_dim, derive_seed(seed, 1000 + index));
    }

    SearchConfig search_config(std::size_t k, std::size_t b) const {
        SearchConfig s;
        s.beam_size = b;
        s.history_limit = k;
        s.max_length = max_length;
        s.distance_form = distance;
        s.finished_policy = finished_policy;
        return s;
    }

private:
    static std::string trim(const std::string& s) {
        const auto first = s.find_first_not_of(" \t\r");
        if (first == std::string::npos) {
            return {};
        }
        const auto last = s.find_last_not_of(" \t\r");
        return s.substr(first, last - first + 1);
    }

    static std::size_t to_count(const std::string& key, const std::string& v) {
        std::size_t out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty()) {
            throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
        }
        return out;
    }

    static std::size_t to_limit(const std::string& key, const std::string& v) {
        return v == "inf" ? kInfiniteHistory : to_count(key, v);
    }

    static double to_real(const std::string& key, const std::string& v) {
        double out = 0.0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
            throw ConfigError(key, "expected a finite real number, got '" + v + "'");
        }
        return out;
    }

    static bool to_bool(const std::string& key, const std::string& v) {
        if (v == "true" || v == "1") {
            return true;
        }
        if (v == "false" || v == "0") {
            return false;
        }
        throw ConfigError(key, "expected true or false, got '" + v + "'");
    }

    static std::vector<std::size_t> to_list(const std::string& key, const std::string& v, bool allow_inf) {
        std::vector<std::size_t> out;
        std::string item;
        std::istringstream in(v);
        while (std::getline(in, item, ',')) {
            item = trim(item);
            out.push_back(allow_inf ? to_limit(key, item) : to_count(key, item));
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Statistics sweep

struct SweepRow {
    std::size_t k = 0;
    std::size_t b = 0;
    double log_score_mass = 0.0;
    /// log10 of the mean path count.
    double num_sequences_log10 = 0.0;
    double num_recombinations = 0.0;
    /// Mean of per-instance mean distances over instances that recombined.
    std::optional<double> mean_distance;
};

/// One row per (b, k): statistics of every instance's search, averaged.
inline std::vector<SweepRow> stats_sweep(const ExperimentConfig& config, std::size_t threads) {
    config.validate();
    const CombinedScorer scorer = config.combined();
    std::vector<SweepRow> rows;
    for (const std::size_t b : config.b_values) {
        for (const std::size_t k : config.k_values) {
            std::vector<LatticeStats> stats(config.instances);
            parallel_for(config.instances, threads, [&](std::size_t i) {
                stats[i] = assemble_stats(search(scorer, config.instance_input(i), config.search_config(k, b)));
            });
            using Dec = boost::multiprecision::cpp_dec_float_50;
            SweepRow row;
            row.k = k;
            row.b = b;
            Dec count_sum = 0;
            double distance_sum = 0.0;
            std::size_t distance_n = 0;
            for (const auto& s : stats) {
                row.log_score_mass += s.log_score_mass;
                count_sum += Dec(s.num_sequences);
                row.num_recombinations += static_cast<double>(s.num_recombinations);
                if (s.mean_distance) {
                    distance_sum += *s.mean_distance;
                    ++distance_n;
                }
            }
            const double n = static_cast<double>(config.instances);
            row.log_score_mass /= n;
            row.num_recombinations /= n;
            row.num_sequences_log10 = static_cast<double>(boost::multiprecision::log10(count_sum / Dec(n)));
            if (distance_n > 0) {
                row.mean_distance = distance_sum / static_cast<double>(distance_n);
            }
            rows.push_back(row);
        }
    }
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = std::string(kStatsCsvHeader) + "\n";
    for (const auto& r : rows) {
        out += stats_csv_row(r.k, r.b, r.log_score_mass, r.num_sequences_log10, r.num_recombinations,
                             r.mean_distance) +
               "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Oracle checks

struct CheckOutcome {
    std::string name;
    bool passed = false;
    double max_delta = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

struct OracleReport {
    std::vector<CheckOutcome> checks;
    bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckOutcome& c) { return c.passed; });
    }
    nlohmann::json to_json() const {
        nlohmann::json j;
        j["passed"] = passed();
        j["checks"] = nlohmann::json::array();
        for (const auto& c : checks) {
            j["checks"].push_back({{"name", c.name},
                                   {"passed", c.passed},
                                   {"max_delta", c.max_delta},
                                   {"tolerance", c.tolerance},
                                   {"detail", c.detail}});
        }
        return j;
    }
};

/// Search configuration wide enough to keep every sequence of the envelope.
inline SearchConfig exhaustive_search(std::size_t vocab_size, std::size_t max_length, std::size_t k) {
    SearchConfig s;
    std::size_t b = 1;
    for (std::size_t i = 0; i < max_length; ++i) {
        b *= vocab_size;
    }
    s.beam_size = std::max<std::size_t>(b, 2 * vocab_size);
    s.history_limit = k;
    s.max_length = max_length;
    return s;
}

/// Runs `body` per instance and folds the per-instance deltas by max. Budget
/// violations and other failures are reported instead of propagated.
template <class Body>
CheckOutcome run_check(std::string name, double tolerance, std::size_t instances, std::size_t threads,
                       Body&& body) {
    CheckOutcome out;
    out.name = std::move(name);
    out.tolerance = tolerance;
    std::vector<double> deltas(instances, 0.0);
    try {
        parallel_for(instances, threads, [&](std::size_t i) { deltas[i] = body(i); });
    } catch (const std::exception& e) {
        out.passed = false;
        out.max_delta = std::numeric_limits<double>::infinity();
        out.detail = e.what();
        return out;
    }
    for (const double d : deltas) {
        out.max_delta = std::max(out.max_delta, d);
    }
    out.passed = out.max_delta <= tolerance;
    return out;
}

/// Max |analytic - central difference| / max(|analytic|, |numeric|, 1e-3)
/// over all AM parameters; the lattice from the unperturbed search is held
/// fixed and rescored for every perturbation.
inline double gradient_check_error(const CombinedScorer& scorer, const TrainingExample& example,
                                   const SearchConfig& config, double step = 1e-5) {
    const SearchResult result = search(scorer, example.x, config);
    const auto analytic =
        lattice_criterion(scorer, example, result.lattice, result.total_mass, true, true).gradient;
    const auto base = std::vector<double>(scorer.am().parameters().begin(), scorer.am().parameters().end());
    auto rescored_F = [&](const std::vector<double>& params) {
        const CombinedScorer moved = scorer.with_am(scorer.am().with_parameters(params));
        std::vector<LatticeArc> arcs = result.lattice.arcs();
        for (auto& arc : arcs) {
            const auto state = [&] {
                CombinedState s = moved.init_state(example.x);
                for (const TokenId t : result.lattice.node(arc.from).history) {
                    s = moved.advance(s, t);
                }
                return s;
            }();
            arc.score = moved.scores(state)[static_cast<std::size_t>(arc.token)];
        }
        const Lattice rescored(result.lattice.nodes(), std::move(arcs), result.lattice.root());
        return lattice_criterion(moved, example, rescored, total_mass(rescored), true, false).F;
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto plus = base;
        auto minus = base;
        plus[i] += step;
        minus[i] -= step;
        const double numeric = (rescored_F(plus) - rescored_F(minus)) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

/// Ground truth for a synthetic input: the teacher's greedy output, ending
/// in eos after at most max_length tokens.
inline TokenSequence teacher_transcript(const SequenceScorer& teacher, const InputFeatures& x,
                                        std::size_t max_length) {
    TokenSequence out;
    ScorerState state = teacher.init_state(x);
    const TokenId eos = teacher.eos_id();
    while (true) {
        if (out.size() == max_length) {
            out.push_back(eos);
            return out;
        }
        const auto dist = teacher.log_distribution(state);
        const auto best = static_cast<TokenId>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        out.push_back(best);
        if (best == eos) {
            return out;
        }
        state = teacher.advance(state, best);
    }
}

/// Runs the oracle-equivalence checks on the configured model family within
/// the desk envelope (vocab_size, max_length as configured).
inline OracleReport oracle_check(const ExperimentConfig& config, std::size_t threads) {
    config.validate();
    OracleReport report;
    const double tol = config.tolerance;
    const std::size_t L = config.oracle_max_length;
    const oracle::EnumerationBudget budget{L, config.oracle_max_sequences};
    const std::size_t n = config.instances;
    const std::size_t m = config.context_length;

    auto limited = [&](std::size_t context) {
        ExperimentConfig c = config;
        c.family = "limited";
        c.context_length = context;
        return c.combined();
    };
    const CombinedScorer configured = config.combined();

    report.checks.push_back(run_check("nbest_reduction", 0.0, n, threads, [&](std::size_t i) {
        const auto x = config.instance_input(i);
        const SearchConfig sc = config.search_config(kInfiniteHistory, config.b_values.front());
        const auto r = search(configured, x, sc);
        auto ref = oracle::reference_beam_search(configured, x, sc.beam_size, sc.max_length, sc.finished_policy);
        if (r.recombination_count != 0 || ref.size() != r.finished.size()) {
            return std::numeric_limits<double>::infinity();
        }
        double worst = 0.0;
        for (const auto& f : r.finished) {
            const auto it = std::find_if(ref.begin(), ref.end(), [&](auto& s) { return s.tokens == f.tokens; });
            if (it == ref.end()) {
                return std::numeric_limits<double>::infinity();
            }
            worst = std::max(worst, std::abs(it->score - f.mass));
        }
        return worst;
    }));

    for (const std::size_t k : {m, m + 1, kInfiniteHistory}) {
        report.checks.push_back(run_check("normalizer_limited_m" + std::to_string(m) + "_k" + history_limit_label(k),
                                          tol, n, threads, [&](std::size_t i) {
                                              const auto scorer = limited(m);
                                              const auto x = config.instance_input(i);
                                              const auto exact = oracle::exact_normalizer(scorer, x, budget);
                                              const auto r = search(
                                                  scorer, x, exhaustive_search(config.vocab_size, L, k));
                                              return std::abs(r.total_mass - exact);
                                          }));
    }
    {
        ExperimentConfig c = config;
        c.family = "recurrent";
        const CombinedScorer scorer = c.combined();
        report.checks.push_back(run_check("normalizer_recurrent_kinf", tol, n, threads, [&](std::size_t i) {
            const auto x = config.instance_input(i);
            const auto exact = oracle::exact_normalizer(scorer, x, budget);
            const auto r =
                search(scorer, x, exhaustive_search(config.vocab_size, L, kInfiniteHistory));
            return std::abs(r.total_mass - exact);
        }));
    }

    report.checks.push_back(
        run_check("recombination_exactness_m" + std::to_string(m), tol, n, threads, [&](std::size_t i) {
            const auto scorer = limited(m);
            const auto x = config.instance_input(i);
            const auto r = search(scorer, x, exhaustive_search(config.vocab_size, L, m));
            double worst = 0.0;
            for (const auto& e : r.recombinations) {
                const auto exact = oracle::exact_prefix_mass(scorer, x, e.step, e.suffix, budget);
                worst = std::max(worst, std::abs(exact - e.mass));
            }
            for (const double d : r.distance_samples) {
                worst = std::max(worst, d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
            }
            return worst;
        }));

    report.checks.push_back(run_check("lattice_mass_consistency", tol, n, threads, [&](std::size_t i) {
        const auto x = config.instance_input(i);
        double worst = 0.0;
        for (const std::size_t k : config.k_values) {
            const auto r = search(configured, x, config.search_config(k, config.b_values.front()));
            const auto fwd = forward_scores(r.lattice);
            for (const auto& f : r.finished) {
                worst = std::max(worst, std::abs(fwd[f.node] - f.mass));
            }
            worst = std::max(worst, std::abs(total_mass(r.lattice) - r.total_mass));
        }
        return worst;
    }));

    report.checks.push_back(run_check("lattice_replay", 0.0, n, threads, [&](std::size_t i) {
        const auto x = config.instance_input(i);
        double mismatches = 0.0;
        for (const std::size_t k : config.k_values) {
            SearchConfig sc = config.search_config(k, config.b_values.front());
            sc.record_trace = true;
            const auto r = search(configured, x, sc);
            const auto replay = oracle::replay_sequences(*r.trace, configured.eos_id());
            const auto paths = enumerate_paths(r.lattice, 1000000);
            std::set<TokenSequence> from_lattice;
            for (const auto& p : paths) {
                from_lattice.insert(p.tokens);
            }
            if (from_lattice != replay || paths.size() != replay.size()) {
                mismatches += 1.0;
            }
        }
        return mismatches;
    }));

    {
        const std::size_t gradient_instances = std::min<std::size_t>(n, 4);
        const auto teacher = make_scorer(config.teacher_family, config.teacher_shape());
        report.checks.push_back(run_check(
            "criterion_gradient", config.gradient_tolerance, gradient_instances, threads, [&](std::size_t i) {
                const auto x = config.instance_input(i);
                const TrainingExample ex{x, teacher_transcript(*teacher, x, config.max_length)};
                double worst = 0.0;
                for (const std::size_t k : {std::size_t{2}, kInfiniteHistory}) {
                    worst = std::max(worst, gradient_check_error(configured, ex,
                                                                 config.search_config(k, config.b_values.front())));
                }
                return worst;
            }));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Synthetic training task

struct SyntheticTask {
    std::shared_ptr<const SequenceScorer> teacher;
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> heldout;
};

inline SyntheticTask make_synthetic_task(const ExperimentConfig& config) {
    SyntheticTask task;
    task.teacher = make_scorer(config.teacher_family, config.teacher_shape());
    auto example = [&](std::uint64_t index) {
        auto x = InputFeatures::random(config.frames, config.feature_dim, derive_seed(config.seed, 50000 + index));
        auto target = teacher_transcript(*task.teacher, x, config.max_length);
        return TrainingExample{std::move(x), std::move(target)};
    };
    for (std::size_t i = 0; i < config.train_size; ++i) {
        task.train.push_back(example(i));
    }
    for (std::size_t i = 0; i < config.heldout_size; ++i) {
        task.heldout.push_back(example(config.train_size + i));
    }
    return task;
}

struct TrainingRun {
    CombinedScorer initial;
    TrainResult result;
};

/// ML-initializes AM and LM on the synthetic transcripts, then runs
/// sequence training of the AM with the configured k and b.
inline TrainingRun run_training(const ExperimentConfig& config, const SyntheticTask& task, std::size_t threads) {
    config.validate();
    MlConfig ml;
    ml.learning_rate = config.ml_learning_rate;
    ml.epochs = config.ml_epochs;
    ml.batch_size = config.batch_size;
    ml.threads = threads;
    ml.seed = derive_seed(config.seed, 4);
    auto am = pretrain_ml(make_scorer(config.family, config.am_shape()), task.train, ml);
    std::shared_ptr<const SequenceScorer> lm;
    if (config.use_lm) {
        ml.seed = derive_seed(config.seed, 5);
        lm = pretrain_ml(make_scorer(config.family, config.lm_shape()), task.train, ml);
    }
    CombinedScorer initial(am, lm, config.alpha, config.beta);

    TrainConfig tc;
    tc.learning_rate = config.learning_rate;
    tc.epochs = config.epochs;
    tc.batch_size = config.batch_size;
    tc.include_target = config.include_gt;
    tc.search = config.search_config(config.train_k, config.train_b);
    tc.decode = config.search_config(kInfiniteHistory, config.decode_b);
    tc.patience = config.patience;
    tc.threads = threads;
    tc.seed = derive_seed(config.seed, 6);
    TrainResult result = train(initial, task.train, task.heldout, tc);
    return {initial, std::move(result)};
}

inline constexpr const char* kMetricsCsvHeader = "epoch,mean_F,token_error_rate,num_recombinations_mean";

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
    std::string out = std::string(kMetricsCsvHeader) + "\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch) + "," + detail::format_real(e.mean_F) + "," +
               detail::format_real(e.token_error_rate) + "," + detail::format_real(e.mean_recombinations) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Worked example lattice: beam size 4, history limit 1, tokens A-D.

inline Vocabulary figure_one_vocabulary() { return Vocabulary({"A", "B", "C", "D", "</s>"}, 4); }

/// Hand-built lattice after both recombinations: CB merged into BB at step 2
/// and BAD merged into BBD at step 3. Hypotheses whose continuations were all
/// pruned remain as dead ends.
inline Lattice figure_one_lattice() {
    constexpr TokenId A = 0, B = 1, C = 2, D = 3;
    std::vector<LatticeNode> nodes;
    auto node = [&](std::size_t step, TokenSequence history, bool final = false) {
        const auto id = static_cast<NodeId>(nodes.size());
        nodes.push_back({id, step, std::move(history), final});
        return id;
    };
    const NodeId root = node(0, {});
    const NodeId d = node(1, {D});
    const NodeId c = node(1, {C});
    const NodeId b = node(1, {B});
    const NodeId a = node(1, {A});
    const NodeId dc = node(2, {D, C});
    const NodeId bb = node(2, {B, B});
    const NodeId ba = node(2, {B, A});
    const NodeId bbc = node(3, {B, B, C});
    const NodeId bbd = node(3, {B, B, D});
    const NodeId baa = node(3, {B, A, A});
    const NodeId bbdd = node(4, {B, B, D, D}, true);
    const NodeId bbdc = node(4, {B, B, D, C}, true);
    const NodeId baab = node(4, {B, A, A, B}, true);
    const NodeId baaa = node(4, {B, A, A, A}, true);
    (void)a;
    std::vector<LatticeArc> arcs{
        {root, d, D, 0.0, {}},   {root, c, C, 0.0, {}},   {root, b, B, 0.0, {}},   {root, a, A, 0.0, {}},
        {d, dc, C, 0.0, {}},     {c, bb, B, 0.0, 0.0},    {b, bb, B, 0.0, {}},     {b, ba, A, 0.0, {}},
        {bb, bbc, C, 0.0, {}},   {bb, bbd, D, 0.0, {}},   {ba, bbd, D, 0.0, 0.0},  {ba, baa, A, 0.0, {}},
        {bbd, bbdd, D, 0.0, {}}, {bbd, bbdc, C, 0.0, {}}, {baa, baab, B, 0.0, {}}, {baa, baaa, A, 0.0, {}},
    };
    return Lattice(std::move(nodes), std::move(arcs), root);
}

}  // namespace latbeam

#endif  // LATBEAM_EXPERIMENT_HPP
