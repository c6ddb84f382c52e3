#ifndef LATBEAM_SEARCH_HPP
#define LATBEAM_SEARCH_HPP

#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "latbeam/core.hpp"
#include "latbeam/lattice.hpp"
#include "latbeam/models.hpp"

namespace latbeam {

/// History limit that disables recombination (plain n-best search).
inline constexpr std::size_t kInfiniteHistory = std::numeric_limits<std::size_t>::max();

/// Order among equal scores: by token-id sequence, ascending or descending.
enum class TieBreak { kLexicographic, kReverseLexicographic };

/// kCompeteInBeam keeps finished hypotheses in the beam, where later
/// candidates can displace them; kSetAside moves them out of the beam for good.
enum class FinishedPolicy { kCompeteInBeam, kSetAside };

struct SearchConfig {
    std::size_t beam_size = 8;
    std::size_t history_limit = kInfiniteHistory;
    /// Maximum number of non-eos tokens; hypotheses reaching it must end.
    std::size_t max_length = 16;
    TieBreak tie_break = TieBreak::kLexicographic;
    FinishedPolicy finished_policy = FinishedPolicy::kCompeteInBeam;
    DistanceForm distance_form = DistanceForm::kSquared;
    bool record_trace = false;

    bool recombines() const { return history_limit != kInfiniteHistory; }

    void validate() const {
        if (beam_size < 1) {
            throw std::invalid_argument("beam_size must be >= 1");
        }
        if (history_limit < 1) {
            throw std::invalid_argument("history_limit must be >= 1 or infinite");
        }
        if (max_length < 1) {
            throw std::invalid_argument("max_length must be >= 1");
        }
    }
};

struct Hypothesis {
    /// Tokens so far; a finished hypothesis ends with eos.
    TokenSequence prefix;
    CombinedState state;
    /// Score of this hypothesis' own path.
    LogMass path_score = 0.0;
    /// Score mass of every path merged into this hypothesis.
    LogMass mass = 0.0;
    bool finished = false;
    NodeId node = 0;
};

struct Beam {
    /// Label position n about to be predicted; active prefixes have n - 1 tokens.
    std::size_t step = 1;
    std::vector<Hypothesis> active;
    std::vector<Hypothesis> finished;
};

struct RecombinationEvent {
    std::size_t step = 0;
    TokenSequence suffix;
    TokenSequence survivor;
    std::vector<TokenSequence> removed;
    LogMass mass = kLogZero;
    /// Survivor node in the final lattice, unless it was trimmed away.
    std::optional<NodeId> node;
};

struct FinishedSequence {
    TokenSequence tokens;
    LogMass mass = kLogZero;
    LogMass path_score = kLogZero;
    NodeId node = 0;
};

/// Step-by-step record of search decisions, for replay checks.
struct SearchTrace {
    struct Step {
        std::size_t step = 0;
        /// Each group lists the survivor first.
        std::vector<std::vector<TokenSequence>> merges;
        std::vector<std::pair<TokenSequence, TokenId>> expansions;
        std::vector<TokenSequence> evicted;
    };
    std::vector<Step> steps;
};

struct SearchResult {
    Lattice lattice;
    std::vector<FinishedSequence> finished;
    LogMass total_mass = kLogZero;
    std::size_t recombination_count = 0;
    std::vector<double> distance_samples;
    std::vector<RecombinationEvent> recombinations;
    std::optional<SearchTrace> trace;
};

/// Partitions the active hypotheses by their last k tokens. Prefixes shorter
/// than k are keyed by the whole prefix; k = infinite gives singletons.
/// Groups and members keep beam order.
inline std::vector<std::vector<std::size_t>> recombination_groups(const std::vector<TokenSequence>& prefixes,
                                                                  std::size_t k) {
    std::vector<std::vector<std::size_t>> groups;
    std::map<TokenSequence, std::size_t> index;
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
        const auto& p = prefixes[i];
        TokenSequence key = (k == kInfiniteHistory || p.size() < k)
                                ? p
                                : TokenSequence(p.end() - static_cast<std::ptrdiff_t>(k), p.end());
        auto [it, inserted] = index.try_emplace(std::move(key), groups.size());
        if (inserted) {
            groups.emplace_back();
        }
        groups[it->second].push_back(i);
    }
    return groups;
}

inline std::vector<std::vector<std::size_t>> recombination_groups(const Beam& beam, std::size_t k) {
    std::vector<TokenSequence> prefixes;
    prefixes.reserve(beam.active.size());
    for (const auto& h : beam.active) {
        if (h.prefix.size() + 1 != beam.step) {
            throw std::logic_error("active hypothesis length does not match the beam step");
        }
        prefixes.push_back(h.prefix);
    }
    return recombination_groups(prefixes, k);
}

/// Label-synchronous beam search with approximative recombination. Each step
/// merges active hypotheses sharing their last k tokens into the one with
/// the highest mass, then expands every survivor by every token and keeps
/// the b best candidates by accumulated mass.
class BeamSearch {
public:
    BeamSearch(const CombinedScorer& scorer, const InputFeatures& x, SearchConfig config)
        : scorer_(scorer), config_(config) {
        config_.validate();
        if (config_.max_length > scorer_.max_steps()) {
            throw std::invalid_argument("max_length " + std::to_string(config_.max_length) +
                                        " exceeds the scorer length cap " + std::to_string(scorer_.max_steps()));
        }
        Hypothesis root;
        root.state = scorer_.init_state(x);
        root.node = builder_.add_node(0, {});
        root_ = root.node;
        beam_.active.push_back(std::move(root));
        if (config_.record_trace) {
            trace_.emplace();
        }
    }

    const Beam& beam() const { return beam_; }
    const SearchConfig& config() const { return config_; }
    bool done() const { return beam_.active.empty(); }
    std::size_t recombination_count() const { return recombination_count_; }
    const std::vector<double>& distance_samples() const { return distances_; }

    /// Merges every recombination group of the current beam.
    void recombine_all() {
        if (!config_.recombines()) {
            return;
        }
        const auto groups = recombination_groups(beam_, config_.history_limit);
        std::vector<bool> removed(beam_.active.size(), false);
        for (const auto& g : groups) {
            if (g.size() < 2) {
                continue;
            }
            const std::size_t keep = recombine(g);
            for (const std::size_t i : g) {
                removed[i] = i != keep;
            }
        }
        std::vector<Hypothesis> kept;
        kept.reserve(beam_.active.size());
        for (std::size_t i = 0; i < beam_.active.size(); ++i) {
            if (!removed[i]) {
                kept.push_back(std::move(beam_.active[i]));
            }
        }
        beam_.active = std::move(kept);
    }

    /// Folds a group of active hypotheses (indices into the beam) into its
    /// highest-mass member and returns that member's index. The caller drops
    /// the other members from the beam.
    std::size_t recombine(const std::vector<std::size_t>& group) {
        if (group.empty()) {
            throw std::invalid_argument("cannot recombine an empty group");
        }
        std::size_t best = group.front();
        for (const std::size_t i : group) {
            if (ranks_before(beam_.active[i].mass, beam_.active[i].prefix, beam_.active[best].mass,
                             beam_.active[best].prefix)) {
                best = i;
            }
        }
        if (group.size() == 1) {
            return best;
        }
        Hypothesis& survivor = beam_.active[best];
        std::vector<LogMass> masses;
        masses.reserve(group.size());
        for (const std::size_t i : group) {
            masses.push_back(beam_.active[i].mass);
        }

        RecombinationEvent event;
        event.step = beam_.step;
        event.survivor = survivor.prefix;
        const std::size_t k = std::min(config_.history_limit, survivor.prefix.size());
        event.suffix.assign(survivor.prefix.end() - static_cast<std::ptrdiff_t>(k), survivor.prefix.end());

        const LogDistribution best_next = scorer_.local_distribution(survivor.state);
        std::vector<TokenSequence> merge_record{survivor.prefix};
        for (const std::size_t i : group) {
            if (i == best) {
                continue;
            }
            const Hypothesis& other = beam_.active[i];
            distances_.push_back(
                distribution_distance(best_next, scorer_.local_distribution(other.state), config_.distance_form));
            builder_.redirect(other.node, survivor.node, other.mass);
            event.removed.push_back(other.prefix);
            merge_record.push_back(other.prefix);
            ++recombination_count_;
        }
        survivor.mass = log_sum(masses);
        event.mass = survivor.mass;
        event_nodes_.push_back(survivor.node);
        events_.push_back(std::move(event));
        if (trace_) {
            current_trace().merges.push_back(std::move(merge_record));
        }
        return best;
    }

    /// Scores every (hypothesis, token) continuation, keeps the best b and
    /// moves eos continuations to the finished set. At max_length only eos
    /// continuations are formed.
    void expand_and_prune() {
        struct Candidate {
            LogMass score;
            std::size_t parent;  // npos for an already finished hypothesis
            std::size_t finished_index;
            TokenId token;
            double step_score;
        };
        constexpr std::size_t npos = static_cast<std::size_t>(-1);
        const bool forced = beam_.step - 1 >= config_.max_length;
        const TokenId eos = scorer_.eos_id();

        std::vector<Candidate> pool;
        for (std::size_t p = 0; p < beam_.active.size(); ++p) {
            const auto scores = scorer_.scores(beam_.active[p].state);
            for (std::size_t w = 0; w < scores.size(); ++w) {
                const auto token = static_cast<TokenId>(w);
                if (forced && token != eos) {
                    continue;
                }
                pool.push_back({beam_.active[p].mass + scores[w], p, npos, token, scores[w]});
            }
        }
        const bool compete = config_.finished_policy == FinishedPolicy::kCompeteInBeam;
        if (compete) {
            for (std::size_t f = 0; f < beam_.finished.size(); ++f) {
                pool.push_back({beam_.finished[f].mass, npos, f, 0, 0.0});
            }
        }

        // Finished entries compare by their full sequence; candidates by
        // parent prefix followed by the new token.
        auto sequence_of = [&](const Candidate& c) {
            if (c.parent == npos) {
                return beam_.finished[c.finished_index].prefix;
            }
            TokenSequence s = beam_.active[c.parent].prefix;
            s.push_back(c.token);
            return s;
        };
        auto before = [&](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) {
                return a.score > b.score;
            }
            if (a.parent != npos && b.parent != npos) {
                if (a.parent != b.parent) {
                    return tie_less(beam_.active[a.parent].prefix, beam_.active[b.parent].prefix);
                }
                return config_.tie_break == TieBreak::kLexicographic ? a.token < b.token : a.token > b.token;
            }
            return tie_less(sequence_of(a), sequence_of(b));
        };
        const std::size_t keep = std::min(config_.beam_size, pool.size());
        std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), before);

        SearchTrace::Step* trace = trace_ ? &current_trace() : nullptr;
        std::vector<Hypothesis> next_active;
        std::vector<Hypothesis> next_finished;
        std::vector<bool> finished_kept(beam_.finished.size(), !compete);
        for (std::size_t i = 0; i < keep; ++i) {
            const Candidate& c = pool[i];
            if (c.parent == npos) {
                finished_kept[c.finished_index] = true;
                continue;
            }
            const Hypothesis& parent = beam_.active[c.parent];
            Hypothesis child;
            child.prefix = parent.prefix;
            child.prefix.push_back(c.token);
            child.path_score = parent.path_score + c.step_score;
            child.mass = c.score;
            child.node = builder_.add_node(beam_.step, child.prefix);
            builder_.add_arc(parent.node, child.node, c.token, c.step_score);
            if (trace) {
                trace->expansions.emplace_back(parent.prefix, c.token);
            }
            if (c.token == eos) {
                child.finished = true;
                builder_.set_final(child.node, true);
                next_finished.push_back(std::move(child));
            } else {
                child.state = scorer_.advance(parent.state, c.token);
                next_active.push_back(std::move(child));
            }
        }
        std::vector<Hypothesis> finished;
        for (std::size_t f = 0; f < beam_.finished.size(); ++f) {
            if (finished_kept[f]) {
                finished.push_back(std::move(beam_.finished[f]));
            } else {
                builder_.set_final(beam_.finished[f].node, false);
                if (trace) {
                    trace->evicted.push_back(beam_.finished[f].prefix);
                }
            }
        }
        for (auto& h : next_finished) {
            finished.push_back(std::move(h));
        }
        beam_.finished = std::move(finished);
        beam_.active = std::move(next_active);
        ++beam_.step;
    }

    SearchResult run() {
        while (!done()) {
            recombine_all();
            expand_and_prune();
        }
        return finish();
    }

    /// Builds the trimmed lattice and the statistics inputs.
    SearchResult finish() const {
        std::vector<std::optional<NodeId>> remap;
        Lattice lattice = builder_.finalize(root_, &remap);
        SearchResult result{std::move(lattice), {}, kLogZero, recombination_count_, distances_, events_, trace_};
        std::vector<LogMass> masses;
        for (const auto& h : beam_.finished) {
            result.finished.push_back({h.prefix, h.mass, h.path_score, remap[h.node].value()});
            masses.push_back(h.mass);
        }
        result.total_mass = log_sum(masses);
        for (std::size_t i = 0; i < result.recombinations.size(); ++i) {
            result.recombinations[i].node = remap[event_nodes_[i]];
        }
        return result;
    }

private:
    bool tie_less(const TokenSequence& a, const TokenSequence& b) const {
        return config_.tie_break == TieBreak::kLexicographic ? lexicographic_less(a, b) : lexicographic_less(b, a);
    }

    bool ranks_before(LogMass a, const TokenSequence& pa, LogMass b, const TokenSequence& pb) const {
        if (a != b) {
            return a > b;
        }
        return tie_less(pa, pb);
    }

    SearchTrace::Step& current_trace() {
        if (trace_->steps.empty() || trace_->steps.back().step != beam_.step) {
            trace_->steps.push_back({});
            trace_->steps.back().step = beam_.step;
        }
        return trace_->steps.back();
    }

    const CombinedScorer& scorer_;
    SearchConfig config_;
    Beam beam_;
    LatticeBuilder builder_;
    NodeId root_ = 0;
    std::size_t recombination_count_ = 0;
    std::vector<double> distances_;
    std::vector<RecombinationEvent> events_;
    std::vector<NodeId> event_nodes_;
    std::optional<SearchTrace> trace_;
};

inline SearchResult search(const CombinedScorer& scorer, const InputFeatures& x, const SearchConfig& config) {
    return BeamSearch(scorer, x, config).run();
}

}  // namespace latbeam

#endif  // LATBEAM_SEARCH_HPP
