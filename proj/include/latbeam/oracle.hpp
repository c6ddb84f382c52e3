#ifndef LATBEAM_ORACLE_HPP
#define LATBEAM_ORACLE_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "latbeam/core.hpp"
#include "latbeam/models.hpp"
#include "latbeam/search.hpp"

// Brute-force references. Everything here enumerates the sequence space
// directly and shares no code path with the search beyond the scorers.

namespace latbeam::oracle {

class BudgetExceeded : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bounds exhaustive enumeration: sequences carry at most max_length
/// non-eos tokens, and their number must stay within max_sequences.
struct EnumerationBudget {
    std::size_t max_length = 6;
    std::size_t max_sequences = 300000;

    /// Number of eos-terminated sequences with at most max_length tokens
    /// before eos, or throws when above the guard.
    std::size_t check(std::size_t vocab_size) const {
        const std::size_t branching = vocab_size - 1;
        std::size_t total = 0;
        std::size_t level = 1;
        for (std::size_t len = 0; len <= max_length; ++len) {
            total += level;
            if (total > max_sequences) {
                throw BudgetExceeded("enumeration of " + std::to_string(vocab_size) + " tokens up to length " +
                                     std::to_string(max_length) + " exceeds the guard of " +
                                     std::to_string(max_sequences) + " sequences");
            }
            if (branching != 0 && level > max_sequences / branching + 1) {
                level = max_sequences + 1;
            } else {
                level *= branching;
            }
        }
        return total;
    }
};

/// log(sum(exp(v))) accumulated in extended precision with compensation.
inline LogMass precise_log_sum(std::span<const double> values) {
    if (values.empty()) {
        return kLogZero;
    }
    const double top = *std::max_element(values.begin(), values.end());
    if (std::isinf(top)) {
        return top;
    }
    long double sum = 0.0L;
    long double carry = 0.0L;
    for (const double v : values) {
        const long double term = std::exp(static_cast<long double>(v) - static_cast<long double>(top));
        const long double t = sum + term;
        if (std::fabs(sum) >= std::fabs(term)) {
            carry += (sum - t) + term;
        } else {
            carry += (term - t) + sum;
        }
        sum = t;
    }
    return static_cast<double>(static_cast<long double>(top) + std::log(sum + carry));
}

struct ScoredSequence {
    TokenSequence tokens;
    LogMass score = 0.0;
};

/// Every eos-terminated sequence within the budget with its combined score,
/// accumulated token by token from 0.
inline std::vector<ScoredSequence> enumerate_sequences(const CombinedScorer& scorer, const InputFeatures& x,
                                                       const EnumerationBudget& budget) {
    budget.check(scorer.vocab_size());
    const TokenId eos = scorer.eos_id();
    std::vector<ScoredSequence> out;
    TokenSequence prefix;
    auto walk = [&](auto&& self, const CombinedState& state, LogMass score) -> void {
        const auto s = scorer.scores(state);
        prefix.push_back(eos);
        out.push_back({prefix, score + s[static_cast<std::size_t>(eos)]});
        prefix.pop_back();
        if (prefix.size() == budget.max_length) {
            return;
        }
        for (std::size_t w = 0; w < s.size(); ++w) {
            const auto token = static_cast<TokenId>(w);
            if (token == eos) {
                continue;
            }
            prefix.push_back(token);
            self(self, scorer.advance(state, token), score + s[w]);
            prefix.pop_back();
        }
    };
    walk(walk, scorer.init_state(x), 0.0);
    return out;
}

/// Every eos-free prefix of exactly `length` tokens with its combined score.
inline std::vector<ScoredSequence> enumerate_prefixes(const CombinedScorer& scorer, const InputFeatures& x,
                                                      std::size_t length, const EnumerationBudget& budget) {
    EnumerationBudget b = budget;
    b.max_length = std::max(budget.max_length, length);
    b.check(scorer.vocab_size());
    const TokenId eos = scorer.eos_id();
    std::vector<ScoredSequence> out;
    TokenSequence prefix;
    auto walk = [&](auto&& self, const CombinedState& state, LogMass score) -> void {
        if (prefix.size() == length) {
            out.push_back({prefix, score});
            return;
        }
        const auto s = scorer.scores(state);
        for (std::size_t w = 0; w < s.size(); ++w) {
            const auto token = static_cast<TokenId>(w);
            if (token == eos) {
                continue;
            }
            prefix.push_back(token);
            self(self, scorer.advance(state, token), score + s[w]);
            prefix.pop_back();
        }
    };
    walk(walk, scorer.init_state(x), 0.0);
    return out;
}

/// Log of the sum of combined scores over every sequence in the budget.
inline LogMass exact_normalizer(const CombinedScorer& scorer, const InputFeatures& x,
                                const EnumerationBudget& budget) {
    const auto all = enumerate_sequences(scorer, x, budget);
    std::vector<double> scores;
    scores.reserve(all.size());
    for (const auto& s : all) {
        scores.push_back(s.score);
    }
    return precise_log_sum(scores);
}

/// True top-n sequences, best first; ties in lexicographic order.
inline std::vector<ScoredSequence> exact_nbest(const CombinedScorer& scorer, const InputFeatures& x, std::size_t n,
                                               const EnumerationBudget& budget) {
    auto all = enumerate_sequences(scorer, x, budget);
    std::sort(all.begin(), all.end(), [](const ScoredSequence& a, const ScoredSequence& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return lexicographic_less(a.tokens, b.tokens);
    });
    if (all.size() > n) {
        all.resize(n);
    }
    return all;
}

/// Log mass of all eos-free prefixes of length step - 1 that end in `suffix`.
inline LogMass exact_prefix_mass(const CombinedScorer& scorer, const InputFeatures& x, std::size_t step,
                                 const TokenSequence& suffix, const EnumerationBudget& budget) {
    if (step < 1) {
        throw std::invalid_argument("step index starts at 1");
    }
    const auto prefixes = enumerate_prefixes(scorer, x, step - 1, budget);
    std::vector<double> scores;
    for (const auto& p : prefixes) {
        if (p.tokens.size() >= suffix.size() &&
            std::equal(suffix.begin(), suffix.end(), p.tokens.end() - static_cast<std::ptrdiff_t>(suffix.size()))) {
            scores.push_back(p.score);
        }
    }
    return precise_log_sum(scores);
}

/// Plain n-best beam search without lattices or recombination, written
/// independently of BeamSearch; finished sequences best first.
inline std::vector<ScoredSequence> reference_beam_search(const CombinedScorer& scorer, const InputFeatures& x,
                                                         std::size_t beam_size, std::size_t max_length,
                                                         FinishedPolicy policy = FinishedPolicy::kCompeteInBeam) {
    struct Entry {
        TokenSequence tokens;
        CombinedState state;
        LogMass score = 0.0;
        bool done = false;
    };
    const TokenId eos = scorer.eos_id();
    std::vector<Entry> active{{{}, scorer.init_state(x), 0.0, false}};
    std::vector<Entry> finished;
    for (std::size_t len = 0; !active.empty(); ++len) {
        std::vector<Entry> pool;
        for (const auto& e : active) {
            const auto s = scorer.scores(e.state);
            for (std::size_t w = 0; w < s.size(); ++w) {
                const auto token = static_cast<TokenId>(w);
                if (len >= max_length && token != eos) {
                    continue;
                }
                Entry c;
                c.tokens = e.tokens;
                c.tokens.push_back(token);
                c.score = e.score + s[w];
                c.done = token == eos;
                c.state = e.state;  // advanced only if kept
                pool.push_back(std::move(c));
            }
        }
        if (policy == FinishedPolicy::kCompeteInBeam) {
            for (auto& f : finished) {
                pool.push_back(std::move(f));
            }
            finished.clear();
        }
        std::stable_sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) {
                return a.score > b.score;
            }
            return lexicographic_less(a.tokens, b.tokens);
        });
        if (pool.size() > beam_size) {
            pool.resize(beam_size);
        }
        active.clear();
        for (auto& e : pool) {
            if (e.done) {
                finished.push_back(std::move(e));
            } else {
                e.state = scorer.advance(e.state, e.tokens.back());
                active.push_back(std::move(e));
            }
        }
    }
    std::vector<ScoredSequence> out;
    for (const auto& f : finished) {
        out.push_back({f.tokens, f.score});
    }
    std::sort(out.begin(), out.end(), [](const ScoredSequence& a, const ScoredSequence& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return lexicographic_less(a.tokens, b.tokens);
    });
    return out;
}

/// Replays a search trace on sets of sequences: each hypothesis stands for the
/// set of full histories merged into it. Returns every sequence represented by
/// a finished hypothesis at the end.
inline std::set<TokenSequence> replay_sequences(const SearchTrace& trace, TokenId eos) {
    std::map<TokenSequence, std::set<TokenSequence>> active{{{}, {{}}}};
    std::map<TokenSequence, std::set<TokenSequence>> finished;
    for (const auto& step : trace.steps) {
        for (const auto& group : step.merges) {
            auto& into = active.at(group.front());
            for (std::size_t i = 1; i < group.size(); ++i) {
                auto& from = active.at(group[i]);
                into.insert(from.begin(), from.end());
                active.erase(group[i]);
            }
        }
        std::map<TokenSequence, std::set<TokenSequence>> next;
        for (const auto& [parent, token] : step.expansions) {
            TokenSequence child = parent;
            child.push_back(token);
            std::set<TokenSequence> members;
            for (TokenSequence s : active.at(parent)) {
                s.push_back(token);
                members.insert(std::move(s));
            }
            (token == eos ? finished : next)[child] = std::move(members);
        }
        for (const auto& gone : step.evicted) {
            finished.erase(gone);
        }
        active = std::move(next);
    }
    std::set<TokenSequence> out;
    for (const auto& [_, members] : finished) {
        out.insert(members.begin(), members.end());
    }
    return out;
}

}  // namespace latbeam::oracle

#endif  // LATBEAM_ORACLE_HPP
