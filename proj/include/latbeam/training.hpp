#ifndef LATBEAM_TRAINING_HPP
#define LATBEAM_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "latbeam/core.hpp"
#include "latbeam/lattice.hpp"
#include "latbeam/models.hpp"
#include "latbeam/search.hpp"

namespace latbeam {

struct TrainingExample {
    InputFeatures x;
    /// Finished ground-truth sequence.
    TokenSequence target;
};

/// F = numerator - denominator, where the numerator is the combined score of
/// the target and the denominator approximates the log normalizer by the
/// lattice mass. `gradient` is over the acoustic model parameters and is
/// empty unless requested.
struct CriterionResult {
    double F = 0.0;
    LogMass numerator = 0.0;
    LogMass denominator = 0.0;
    std::vector<double> gradient;
    bool target_in_lattice = false;
    /// Score of the target's lattice path when present; differs from the
    /// numerator when that path runs through approximated contexts.
    std::optional<LogMass> target_path_score;
    std::size_t recombinations = 0;
};

/// Criterion on a fixed lattice. `lattice_mass` is the log-sum of all path
/// scores. When include_target is set the target contributes its true score
/// to the denominator exactly once: it is added when the lattice lacks it,
/// and replaces its lattice path score when that score was approximated.
/// The gradient treats the lattice structure as constant.
inline CriterionResult lattice_criterion(const CombinedScorer& scorer, const TrainingExample& example,
                                         const Lattice& lattice, LogMass lattice_mass, bool include_target,
                                         bool want_gradient) {
    CriterionResult r;
    r.numerator = scorer.score_sequence(example.x, example.target);
    const LogMass t = r.numerator;
    const auto path = find_path(lattice, example.target);
    r.target_in_lattice = path.has_value();
    LogMass a = kLogZero;
    if (path) {
        a = 0.0;
        for (const std::size_t arc : *path) {
            a += lattice.arc(arc).score;
        }
        r.target_path_score = a;
    }

    // D = log(w_S e^S - w_a e^a + w_t e^t), as weights relative to D.
    double weight_lattice = 1.0;
    double weight_path = 0.0;
    double weight_target = 0.0;
    if (!include_target) {
        r.denominator = lattice_mass;
    } else if (!path) {
        r.denominator = log_add(lattice_mass, t);
        weight_lattice = std::exp(lattice_mass - r.denominator);
        weight_target = std::exp(t - r.denominator);
    } else if (a == t) {
        r.denominator = lattice_mass;
    } else {
        const LogMass top = std::max(lattice_mass, t);
        const double linear = std::exp(lattice_mass - top) - std::exp(a - top) + std::exp(t - top);
        r.denominator = top + std::log(linear);
        weight_lattice = std::exp(lattice_mass - r.denominator);
        weight_path = std::exp(a - r.denominator);
        weight_target = std::exp(t - r.denominator);
    }
    r.F = r.numerator - r.denominator;
    if (!want_gradient) {
        return r;
    }

    const SequenceScorer& am = scorer.am();
    r.gradient.assign(am.parameters().size(), 0.0);
    if (scorer.alpha() == 0.0) {
        return r;
    }
    const std::size_t V = scorer.vocab_size();
    // dF = (1 - w_t) dt - w_S dS + w_a da, with dS = sum_arcs posterior * d score.
    std::map<NodeId, std::vector<double>> weights;
    auto weight_of = [&](NodeId n) -> std::vector<double>& {
        auto& w = weights[n];
        if (w.empty()) {
            w.assign(V, 0.0);
        }
        return w;
    };
    if (weight_lattice != 0.0) {
        const auto fwd = forward_scores(lattice);
        const auto bwd = backward_scores(lattice);
        const LogMass total = bwd[lattice.root()];
        for (const auto& arc : lattice.arcs()) {
            const double posterior = std::exp(fwd[arc.from] + arc.score + bwd[arc.to] - total);
            if (posterior != 0.0) {
                weight_of(arc.from)[static_cast<std::size_t>(arc.token)] -= weight_lattice * posterior;
            }
        }
    }
    if (weight_path != 0.0) {
        for (const std::size_t idx : *path) {
            const auto& arc = lattice.arc(idx);
            weight_of(arc.from)[static_cast<std::size_t>(arc.token)] += weight_path;
        }
    }
    for (const auto& [node, w] : weights) {
        am.accumulate_gradient(example.x, lattice.node(node).history, w, scorer.alpha(), r.gradient);
    }
    const double target_weight = 1.0 - weight_target;
    if (target_weight != 0.0) {
        TokenSequence history;
        std::vector<double> w(V, 0.0);
        for (const TokenId token : example.target) {
            w[static_cast<std::size_t>(token)] = target_weight;
            am.accumulate_gradient(example.x, history, w, scorer.alpha(), r.gradient);
            w[static_cast<std::size_t>(token)] = 0.0;
            history.push_back(token);
        }
    }
    return r;
}

/// Runs the search for the example's input and evaluates the criterion on
/// the resulting lattice.
inline CriterionResult compute_criterion(const CombinedScorer& scorer, const TrainingExample& example,
                                         const SearchConfig& config, bool include_target = true,
                                         bool want_gradient = false) {
    if (!is_finished(example.target, scorer.eos_id())) {
        throw std::invalid_argument("training target must end with its only eos");
    }
    const SearchResult result = search(scorer, example.x, config);
    CriterionResult r =
        lattice_criterion(scorer, example, result.lattice, result.total_mass, include_target, want_gradient);
    r.recombinations = result.recombination_count;
    return r;
}

inline std::vector<double> criterion_gradient(const CombinedScorer& scorer, const TrainingExample& example,
                                              const SearchConfig& config, bool include_target = true) {
    return compute_criterion(scorer, example, config, include_target, true).gradient;
}

/// sum_n log p(w_n | w_<n, x) for a finished sequence under one scorer.
inline LogMass sequence_log_likelihood(const SequenceScorer& scorer, const TrainingExample& example) {
    ScorerState state = scorer.init_state(example.x);
    LogMass total = 0.0;
    for (std::size_t n = 0; n < example.target.size(); ++n) {
        total += scorer.log_distribution(state)[static_cast<std::size_t>(example.target[n])];
        if (n + 1 < example.target.size()) {
            state = scorer.advance(state, example.target[n]);
        }
    }
    return total;
}

inline void accumulate_likelihood_gradient(const SequenceScorer& scorer, const TrainingExample& example,
                                           double scale, std::span<double> grad) {
    std::vector<double> w(scorer.vocab_size(), 0.0);
    TokenSequence history;
    for (const TokenId token : example.target) {
        w[static_cast<std::size_t>(token)] = 1.0;
        scorer.accumulate_gradient(example.x, history, w, scale, grad);
        w[static_cast<std::size_t>(token)] = 0.0;
        history.push_back(token);
    }
}

namespace detail {

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    return order;
}

/// Sums per-example vectors in index order.
inline std::vector<double> ordered_sum(const std::vector<std::vector<double>>& parts, std::size_t size) {
    std::vector<double> total(size, 0.0);
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < size; ++i) {
            total[i] += p[i];
        }
    }
    return total;
}

}  // namespace detail

struct MlConfig {
    double learning_rate = 0.5;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    std::size_t threads = 1;
    std::uint64_t seed = 0;
};

/// Maximum-likelihood SGD on the example targets (cross-entropy training).
inline std::shared_ptr<const SequenceScorer> pretrain_ml(std::shared_ptr<const SequenceScorer> scorer,
                                                         std::span<const TrainingExample> data,
                                                         const MlConfig& config) {
    if (data.empty() || config.epochs == 0) {
        return scorer;
    }
    const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = detail::shuffled_order(data.size(), derive_seed(config.seed, epoch));
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t count = std::min(batch, order.size() - start);
            const std::size_t dim = scorer->parameters().size();
            std::vector<std::vector<double>> parts(count);
            parallel_for(count, config.threads, [&](std::size_t i) {
                parts[i].assign(dim, 0.0);
                accumulate_likelihood_gradient(*scorer, data[order[start + i]], 1.0, parts[i]);
            });
            const auto g = detail::ordered_sum(parts, dim);
            std::vector<double> params(scorer->parameters().begin(), scorer->parameters().end());
            const double step = config.learning_rate / static_cast<double>(count);
            for (std::size_t i = 0; i < dim; ++i) {
                params[i] += step * g[i];
            }
            scorer = scorer->with_parameters(std::move(params));
        }
    }
    return scorer;
}

/// Best finished hypothesis of a search, by mass and then token order.
inline TokenSequence decode_best(const CombinedScorer& scorer, const InputFeatures& x, const SearchConfig& config) {
    const SearchResult r = search(scorer, x, config);
    const FinishedSequence* best = nullptr;
    for (const auto& f : r.finished) {
        if (!best || f.mass > best->mass || (f.mass == best->mass && lexicographic_less(f.tokens, best->tokens))) {
            best = &f;
        }
    }
    return best ? best->tokens : TokenSequence{};
}

/// Total edit distance over total reference length, eos excluded.
inline double token_error_rate(const CombinedScorer& scorer, std::span<const TrainingExample> data,
                               const SearchConfig& decode, std::size_t threads) {
    const TokenId eos = scorer.eos_id();
    auto strip = [eos](TokenSequence s) {
        s.erase(std::remove(s.begin(), s.end(), eos), s.end());
        return s;
    };
    std::vector<std::size_t> errors(data.size());
    std::vector<std::size_t> lengths(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) {
        const auto hyp = strip(decode_best(scorer, data[i].x, decode));
        const auto ref = strip(data[i].target);
        errors[i] = edit_distance(hyp, ref);
        lengths[i] = ref.size();
    });
    std::size_t e = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        e += errors[i];
        n += lengths[i];
    }
    return n == 0 ? 0.0 : static_cast<double>(e) / static_cast<double>(n);
}

struct TrainConfig {
    double learning_rate = 0.05;
    std::size_t epochs = 50;
    std::size_t batch_size = 8;
    bool include_target = true;
    /// Search producing the denominator lattice.
    SearchConfig search;
    /// Search used to decode held-out inputs for the error rate.
    SearchConfig decode{4, kInfiniteHistory, 16};
    /// Consecutive epochs of falling mean F tolerated before aborting.
    std::size_t patience = 5;
    std::size_t threads = 1;
    std::uint64_t seed = 0;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double mean_F = 0.0;
    double token_error_rate = 0.0;
    double mean_recombinations = 0.0;
};

struct TrainResult {
    std::shared_ptr<const SequenceScorer> am;
    /// Entry 0 describes the initial model; entry e the model after epoch e.
    std::vector<EpochMetrics> log;
    bool diverged = false;
};

struct CorpusCriterion {
    double mean_F = 0.0;
    double mean_recombinations = 0.0;
};

inline CorpusCriterion corpus_criterion(const CombinedScorer& scorer, std::span<const TrainingExample> data,
                                        const SearchConfig& config, bool include_target, std::size_t threads) {
    std::vector<CriterionResult> parts(data.size());
    parallel_for(data.size(), threads,
                 [&](std::size_t i) { parts[i] = compute_criterion(scorer, data[i], config, include_target); });
    CorpusCriterion c;
    for (const auto& p : parts) {
        c.mean_F += p.F;
        c.mean_recombinations += static_cast<double>(p.recombinations);
    }
    if (!data.empty()) {
        c.mean_F /= static_cast<double>(data.size());
        c.mean_recombinations /= static_cast<double>(data.size());
    }
    return c;
}

/// Sequence training: SGD ascent on the mean criterion over minibatches,
/// updating only the acoustic model. Stops early with `diverged` set when the
/// epoch mean F falls for `patience` consecutive epochs.
inline TrainResult train(const CombinedScorer& model, std::span<const TrainingExample> train_set,
                         std::span<const TrainingExample> heldout, const TrainConfig& config) {
    if (train_set.empty()) {
        throw std::invalid_argument("training set is empty");
    }
    CombinedScorer current = model;
    TrainResult result;
    auto measure = [&](std::size_t epoch) {
        const auto c = corpus_criterion(current, train_set, config.search, config.include_target, config.threads);
        result.log.push_back({epoch, c.mean_F, token_error_rate(current, heldout, config.decode, config.threads),
                              c.mean_recombinations});
    };
    measure(0);
    const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
    std::size_t falling = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = detail::shuffled_order(train_set.size(), derive_seed(config.seed, epoch));
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t count = std::min(batch, order.size() - start);
            std::vector<std::vector<double>> parts(count);
            parallel_for(count, config.threads, [&](std::size_t i) {
                parts[i] = compute_criterion(current, train_set[order[start + i]], config.search,
                                             config.include_target, true)
                               .gradient;
            });
            const std::size_t dim = current.am().parameters().size();
            const auto g = detail::ordered_sum(parts, dim);
            if (config.learning_rate != 0.0) {
                std::vector<double> params(current.am().parameters().begin(), current.am().parameters().end());
                const double step = config.learning_rate / static_cast<double>(count);
                for (std::size_t i = 0; i < dim; ++i) {
                    params[i] += step * g[i];
                }
                current = current.with_am(current.am().with_parameters(std::move(params)));
            }
        }
        measure(epoch);
        if (result.log[epoch].mean_F < result.log[epoch - 1].mean_F) {
            if (++falling >= config.patience) {
                result.diverged = true;
                break;
            }
        } else {
            falling = 0;
        }
    }
    result.am = current.am_ptr();
    return result;
}

}  // namespace latbeam

#endif  // LATBEAM_TRAINING_HPP
