#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "latbeam/experiment.hpp"
#include "support.hpp"

using namespace latbeam;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Verdict {
    bool passed = false;
    std::string summary;
    /// Every computed quantity, printed exactly, for the thread comparison.
    std::string fingerprint;
};

class Recorder {
public:
    void add(double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%a;", v);
        text_ += buf;
    }
    void add(std::size_t v) { text_ += std::to_string(v) + ";"; }
    void add(const TokenSequence& s) {
        for (const TokenId t : s) {
            text_ += std::to_string(t) + ",";
        }
        text_ += ";";
    }
    const std::string& text() const { return text_; }

private:
    std::string text_;
};

std::string real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string klabel(std::size_t k) { return history_limit_label(k); }

/// Model seed varies with the instance as well as the input.
ExperimentConfig instance_config(ExperimentConfig base, const std::string& family, std::size_t m, std::size_t i) {
    base.family = family;
    base.context_length = m;
    base.seed = 1 + i;
    return base;
}

ExperimentConfig envelope(std::size_t max_length) {
    ExperimentConfig c;
    c.vocab_size = 5;
    c.hidden_size = 4;
    c.max_length = max_length;
    c.oracle_max_length = max_length;
    return c;
}

Verdict nbest_reduction(std::size_t threads) {
    constexpr std::size_t n = 64;
    ExperimentConfig base;
    std::vector<double> worst(n * 2, 0.0);
    std::vector<std::string> prints(n * 2);
    parallel_for(n * 2, threads, [&](std::size_t job) {
        const std::size_t i = job / 2;
        const auto c = instance_config(base, job % 2 ? "limited" : "recurrent", 2, i);
        const auto scorer = c.combined();
        const auto x = c.instance_input(i);
        Recorder rec;
        for (const std::size_t b : {1u, 4u, 8u}) {
            for (const auto policy : {FinishedPolicy::kCompeteInBeam, FinishedPolicy::kSetAside}) {
                SearchConfig sc = c.search_config(kInfiniteHistory, b);
                sc.finished_policy = policy;
                const auto r = search(scorer, x, sc);
                const auto ref = oracle::reference_beam_search(scorer, x, b, sc.max_length, policy);
                rec.add(r.recombination_count);
                if (r.recombination_count != 0 || ref.size() != r.finished.size()) {
                    worst[job] = kInf;
                    continue;
                }
                std::vector<FinishedSequence> mine = r.finished;
                std::sort(mine.begin(), mine.end(), [](const auto& a, const auto& b2) {
                    return a.mass != b2.mass ? a.mass > b2.mass : lexicographic_less(a.tokens, b2.tokens);
                });
                for (std::size_t j = 0; j < ref.size(); ++j) {
                    rec.add(mine[j].tokens);
                    rec.add(mine[j].mass);
                    if (mine[j].tokens != ref[j].tokens || mine[j].mass != ref[j].score) {
                        worst[job] = kInf;
                    }
                }
            }
        }
        prints[job] = rec.text();
    });
    Verdict v;
    const bool ok = std::all_of(worst.begin(), worst.end(), [](double d) { return d == 0.0; });
    v.passed = ok;
    v.summary = std::to_string(n) + " instances x 2 families x b{1,4,8} x 2 finished policies, " +
                (ok ? "no recombinations, finished sets bitwise equal to reference" : "mismatch found");
    for (const auto& p : prints) {
        v.fingerprint += p;
    }
    return v;
}

Verdict normalizer_equivalence(std::size_t threads) {
    constexpr std::size_t n = 12;
    const ExperimentConfig base = envelope(6);
    struct Case {
        std::string family;
        std::size_t m;
        std::size_t k;
    };
    std::vector<Case> cases;
    for (const std::size_t m : {1u, 2u}) {
        for (const std::size_t k : {m, m + 1, kInfiniteHistory}) {
            cases.push_back({"limited", m, k});
        }
    }
    cases.push_back({"recurrent", 2, kInfiniteHistory});
    const oracle::EnumerationBudget budget{6, base.oracle_max_sequences};
    std::vector<double> delta(cases.size() * n, 0.0);
    std::vector<double> masses(cases.size() * n, 0.0);
    parallel_for(delta.size(), threads, [&](std::size_t job) {
        const Case& cs = cases[job / n];
        const std::size_t i = job % n;
        const auto c = instance_config(base, cs.family, cs.m, i);
        const auto scorer = c.combined();
        const auto x = c.instance_input(i);
        const auto r = search(scorer, x, exhaustive_search(5, 6, cs.k));
        masses[job] = r.total_mass;
        delta[job] = std::abs(r.total_mass - oracle::exact_normalizer(scorer, x, budget));
    });
    const double worst = *std::max_element(delta.begin(), delta.end());
    Verdict v;
    v.passed = worst <= 1e-9;
    v.summary = std::to_string(cases.size()) + " model/k cases x " + std::to_string(n) +
                " instances, beam 15625, max |log mass - exact| = " + real(worst) + " (tol 1e-9)";
    Recorder rec;
    for (const double d : masses) {
        rec.add(d);
    }
    v.fingerprint = rec.text();
    return v;
}

Verdict recombination_exactness(std::size_t threads) {
    constexpr std::size_t n = 12;
    const ExperimentConfig base = envelope(6);
    const oracle::EnumerationBudget budget{6, base.oracle_max_sequences};
    struct Case {
        std::size_t m;
        std::size_t k;
    };
    const std::vector<Case> cases{{1, 1}, {1, 2}, {2, 2}, {2, 3}};
    std::vector<double> worst(cases.size() * n, 0.0);
    std::vector<std::size_t> merges(cases.size() * n, 0);
    std::vector<std::size_t> samples(cases.size() * n, 0);
    std::vector<std::string> prints(cases.size() * n);
    parallel_for(worst.size(), threads, [&](std::size_t job) {
        const Case& cs = cases[job / n];
        const std::size_t i = job % n;
        const auto c = instance_config(base, "limited", cs.m, i);
        const auto scorer = c.combined();
        const auto x = c.instance_input(i);
        const auto r = search(scorer, x, exhaustive_search(5, 6, cs.k));
        Recorder rec;
        for (const auto& e : r.recombinations) {
            const double exact = oracle::exact_prefix_mass(scorer, x, e.step, e.suffix, budget);
            worst[job] = std::max(worst[job], std::abs(exact - e.mass));
            rec.add(e.mass);
        }
        for (const double d : r.distance_samples) {
            if (d != 0.0) {
                worst[job] = kInf;
            }
            rec.add(d);
        }
        merges[job] = r.recombinations.size();
        samples[job] = r.distance_samples.size();
        prints[job] = rec.text();
    });
    std::size_t total_merges = 0, total_samples = 0;
    for (std::size_t j = 0; j < worst.size(); ++j) {
        total_merges += merges[j];
        total_samples += samples[j];
    }
    const double w = *std::max_element(worst.begin(), worst.end());
    Verdict v;
    v.passed = w <= 1e-9 && total_merges > 0 && total_samples > 0;
    v.summary = std::to_string(total_merges) + " recombined nodes, max |mass - exact prefix mass| = " + real(w) +
                " (tol 1e-9), " + std::to_string(total_samples) + " distance samples" +
                (std::isinf(w) ? ", some nonzero" : ", all exactly 0");
    for (const auto& p : prints) {
        v.fingerprint += p;
    }
    return v;
}

Verdict figure_one(std::size_t) {
    const std::set<std::string> expected{"BAAA", "BAAB", "BADC", "BADD", "BBDC", "BBDD", "CBDC", "CBDD"};
    const auto vocab = figure_one_vocabulary();
    auto spelled = [&](const Lattice& l) {
        std::set<std::string> out;
        std::size_t n = 0;
        for (const auto& p : enumerate_paths(l, 100)) {
            out.insert(vocab.render(p.tokens));
            ++n;
        }
        return std::make_pair(out, n);
    };
    const Lattice demo = figure_one_lattice();
    const auto [demo_set, demo_n] = spelled(demo);
    const auto scorer = testing::am_only(testing::figure_one_scorer());
    const auto r = search(scorer, InputFeatures(1, 1, {0.0}), testing::config_of(4, 1, 4));
    const auto [search_set, search_n] = spelled(r.lattice);
    Verdict v;
    v.passed = demo_set == expected && demo_n == 8 && count_paths(demo) == 8 && search_set == expected &&
               search_n == 8 && count_paths(r.lattice) == 8 && r.recombination_count == 2;
    v.summary = "demo lattice count_paths = " + count_paths(demo).str() +
                ", scripted search (b=4, k=1) count_paths = " + count_paths(r.lattice).str() + " with " +
                std::to_string(r.recombination_count) + " recombinations";
    v.fingerprint = serialize(demo) + serialize(r.lattice);
    return v;
}

Verdict table_trend(std::size_t threads) {
    ExperimentConfig c;
    c.instances = 256;
    c.b_values = {8};
    c.k_values = {1, 2, 4, 8, kInfiniteHistory};
    const auto rows = stats_sweep(c, threads);
    bool monotone = true;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& a = rows[i - 1];
        const auto& b = rows[i];
        monotone = monotone && b.log_score_mass <= a.log_score_mass &&
                   b.num_sequences_log10 <= a.num_sequences_log10 &&
                   b.num_recombinations <= a.num_recombinations &&
                   b.mean_distance.value_or(0.0) <= a.mean_distance.value_or(0.0);
    }
    const double gap = rows.front().log_score_mass - rows.back().log_score_mass;
    Verdict v;
    v.passed = monotone && gap >= std::log(2.0);
    std::string masses;
    for (const auto& r : rows) {
        masses += (masses.empty() ? "" : " ") + klabel(r.k) + ":" + real(r.log_score_mass);
    }
    v.summary = std::string(monotone ? "monotone" : "NOT monotone") + " over k, log mass " + masses +
                ", mass ratio k=1 vs k=inf = " + real(std::exp(gap)) + " (need >= 2)";
    v.fingerprint = sweep_csv(rows);
    return v;
}

Verdict gradient_correctness(std::size_t threads) {
    constexpr std::size_t n = 24;
    ExperimentConfig base;
    base.max_length = 6;
    std::vector<double> err(n * 2, 0.0);
    parallel_for(err.size(), threads, [&](std::size_t job) {
        const std::size_t i = job / 2;
        const auto c = instance_config(base, i % 2 ? "limited" : "recurrent", 2, i);
        const auto teacher = make_scorer(c.teacher_family, c.teacher_shape());
        const auto x = c.instance_input(i);
        const TrainingExample ex{x, teacher_transcript(*teacher, x, c.max_length)};
        const std::size_t k = job % 2 ? kInfiniteHistory : 2;
        err[job] = gradient_check_error(c.combined(), ex, c.search_config(k, 8), 1e-5);
    });
    const double worst = *std::max_element(err.begin(), err.end());
    Verdict v;
    v.passed = worst <= 1e-4;
    v.summary = std::to_string(n) + " instances (recurrent and limited) x k{2,inf}, max relative error = " +
                real(worst) + " (tol 1e-4)";
    Recorder rec;
    for (const double e : err) {
        rec.add(e);
    }
    v.fingerprint = rec.text();
    return v;
}

Verdict criterion_bounds(std::size_t threads) {
    constexpr std::size_t n = 16;
    const ExperimentConfig base = envelope(5);
    std::vector<double> max_f(n * 2, -kInf);
    std::vector<double> bound_gap(n * 2, -kInf);
    std::vector<std::size_t> configs(n * 2, 0);
    std::vector<std::string> prints(n * 2);
    parallel_for(n * 2, threads, [&](std::size_t job) {
        const std::size_t i = job / 2;
        const auto c = instance_config(base, job % 2 ? "limited" : "recurrent", 2, i);
        const auto scorer = c.combined();
        const auto teacher = make_scorer(c.teacher_family, c.teacher_shape());
        const auto x = c.instance_input(i);
        const TrainingExample ex{x, teacher_transcript(*teacher, x, c.max_length)};
        Recorder rec;
        const double exhaustive = compute_criterion(scorer, ex, exhaustive_search(5, 5, kInfiniteHistory)).F;
        rec.add(exhaustive);
        max_f[job] = exhaustive;
        for (const std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{3}, kInfiniteHistory}) {
            for (const std::size_t b : {1u, 2u, 4u, 8u}) {
                const auto r = compute_criterion(scorer, ex, c.search_config(k, b), true);
                max_f[job] = std::max(max_f[job], r.F);
                bound_gap[job] = std::max(bound_gap[job], exhaustive - r.F);
                ++configs[job];
                rec.add(r.F);
            }
        }
        prints[job] = rec.text();
    });
    const double f = *std::max_element(max_f.begin(), max_f.end());
    const double gap = *std::max_element(bound_gap.begin(), bound_gap.end());
    std::size_t total = 0;
    for (const auto k : configs) {
        total += k;
    }
    Verdict v;
    v.passed = f <= 0.0 && gap <= 1e-12;
    v.summary = std::to_string(total) + " configurations, max F = " + real(f) +
                ", max F(exhaustive) - F(approx) = " + real(gap) + " (tol 1e-12)";
    for (const auto& p : prints) {
        v.fingerprint += p;
    }
    return v;
}

Verdict training_direction(std::size_t threads) {
    ExperimentConfig c;
    const auto task = make_synthetic_task(c);
    Verdict v;
    v.passed = true;
    Recorder rec;
    for (const std::size_t k : {c.context_length, kInfiniteHistory}) {
        c.train_k = k;
        const auto run = run_training(c, task, threads);
        const auto& log = run.result.log;
        const auto& first = log.front();
        const auto& last = log.back();
        const bool ok = !run.result.diverged && log.size() - 1 <= 50 && last.mean_F > first.mean_F &&
                        last.token_error_rate <= first.token_error_rate;
        v.passed = v.passed && ok;
        v.summary += (v.summary.empty() ? "" : "; ") + std::string("k=") + klabel(k) + ": F " + real(first.mean_F) +
                     " -> " + real(last.mean_F) + ", held-out TER " + real(first.token_error_rate) + " -> " +
                     real(last.token_error_rate) + " after " + std::to_string(log.size() - 1) + " epochs";
        for (const auto& e : log) {
            rec.add(e.mean_F);
            rec.add(e.token_error_rate);
            rec.add(e.mean_recombinations);
        }
        for (const double p : run.result.am->parameters()) {
            rec.add(p);
        }
    }
    v.fingerprint = rec.text();
    return v;
}

}  // namespace

int main() {
    struct Criterion {
        std::string name;
        std::function<Verdict(std::size_t)> run;
    };
    const std::vector<Criterion> criteria{
        {"nbest_reduction", nbest_reduction},
        {"oracle_normalizer_equivalence", normalizer_equivalence},
        {"recombination_exactness", recombination_exactness},
        {"figure_one_reproduction", figure_one},
        {"table_trend", table_trend},
        {"gradient_correctness", gradient_correctness},
        {"criterion_bounds", criterion_bounds},
        {"training_direction", training_direction},
    };
    const std::vector<std::size_t> thread_counts{1, 2, 8};
    bool all = true;
    std::vector<std::string> nondeterministic;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Verdict first;
        bool verdicts_agree = true;
        for (const std::size_t t : thread_counts) {
            Verdict v;
            try {
                v = criteria[i].run(t);
            } catch (const std::exception& e) {
                v.passed = false;
                v.summary = std::string("exception: ") + e.what();
            }
            if (t == thread_counts.front()) {
                first = v;
            } else if (v.fingerprint != first.fingerprint || v.passed != first.passed) {
                verdicts_agree = false;
            }
        }
        if (!verdicts_agree) {
            nondeterministic.push_back(criteria[i].name);
        }
        all = all && first.passed;
        std::cout << (first.passed ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].name << ": "
                  << first.summary << std::endl;
    }
    const bool deterministic = nondeterministic.empty();
    std::string detail = "criteria 1-8 bit-identical across 1, 2, 8 threads";
    if (!deterministic) {
        detail = "differences in:";
        for (const auto& n : nondeterministic) {
            detail += " " + n;
        }
    }
    std::cout << (deterministic ? "PASS" : "FAIL") << " 9 determinism: " << detail << std::endl;
    return all && deterministic ? 0 : 1;
}
