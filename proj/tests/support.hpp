#ifndef LATBEAM_TEST_SUPPORT_HPP
#define LATBEAM_TEST_SUPPORT_HPP

#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "latbeam/experiment.hpp"

namespace latbeam::testing {

/// Scripted scorer: next-token probabilities looked up by the full prefix,
/// uniform for prefixes missing from the table. The state window holds the
/// whole prefix.
class TableScorer : public SequenceScorer {
public:
    TableScorer(std::size_t vocab_size, std::map<TokenSequence, std::vector<double>> table, std::size_t max_steps = 16)
        : vocab_size_(vocab_size), table_(std::move(table)), max_steps_(max_steps) {}

    std::string family() const override { return "table"; }
    std::size_t vocab_size() const override { return vocab_size_; }
    TokenId eos_id() const override { return static_cast<TokenId>(vocab_size_ - 1); }
    std::size_t max_steps() const override { return max_steps_; }

    ScorerState init_state(const InputFeatures&) const override { return {}; }

    ScorerState advance(const ScorerState& state, TokenId token) const override {
        check_token(token);
        check_can_advance(state);
        ScorerState next = state;
        next.window.push_back(token);
        ++next.step;
        return next;
    }

    LogDistribution log_distribution(const ScorerState& state) const override {
        LogDistribution out(vocab_size_, -std::log(static_cast<double>(vocab_size_)));
        if (const auto it = table_.find(state.window); it != table_.end()) {
            for (std::size_t w = 0; w < vocab_size_; ++w) {
                out[w] = std::log(it->second[w]);
            }
        }
        return out;
    }

    nlohmann::json to_json() const override { return {{"family", "table"}}; }

private:
    std::size_t vocab_size_;
    std::map<TokenSequence, std::vector<double>> table_;
    std::size_t max_steps_;
};

/// Scripted model for the worked example over A, B, C, D, </s>.
inline std::shared_ptr<const TableScorer> figure_one_scorer() {
    constexpr TokenId A = 0, B = 1, C = 2, D = 3;
    std::map<TokenSequence, std::vector<double>> t;
    t[{}] = {0.2, 0.35, 0.25, 0.19, 0.01};
    t[{B}] = {0.4, 0.4, 0.1, 0.09, 0.01};
    t[{C}] = {0.2, 0.5, 0.15, 0.14, 0.01};
    t[{D}] = {0.1, 0.1, 0.6, 0.19, 0.01};
    t[{A}] = {0.24, 0.24, 0.24, 0.27, 0.01};
    t[{B, B}] = {0.1, 0.09, 0.4, 0.4, 0.01};
    t[{B, A}] = {0.45, 0.05, 0.04, 0.45, 0.01};
    t[{B, B, D}] = {0.05, 0.04, 0.45, 0.45, 0.01};
    t[{B, A, A}] = {0.45, 0.45, 0.05, 0.04, 0.01};
    return std::make_shared<TableScorer>(5, std::move(t));
}

inline CombinedScorer am_only(std::shared_ptr<const SequenceScorer> am) {
    return CombinedScorer(std::move(am), nullptr, 1.0, 0.0);
}

inline ScorerShape tiny_shape(std::size_t vocab_size, std::size_t m, std::size_t max_steps, std::uint64_t seed,
                              std::size_t feature_dim = 2) {
    ScorerShape s;
    s.vocab_size = vocab_size;
    s.hidden_size = 4;
    s.feature_dim = feature_dim;
    s.context_length = m;
    s.max_steps = max_steps;
    s.init_scale = 1.0;
    s.seed = seed;
    return s;
}

/// AM + LM pair of one family with the default scales.
inline CombinedScorer tiny_model(const std::string& family, std::size_t vocab_size, std::size_t m,
                                 std::size_t max_steps, std::uint64_t seed, double alpha = 0.1, double beta = 0.035) {
    auto am = make_scorer(family, tiny_shape(vocab_size, m, max_steps, derive_seed(seed, 1)));
    auto lm = make_scorer(family, tiny_shape(vocab_size, m, max_steps, derive_seed(seed, 2), 0));
    return CombinedScorer(std::move(am), std::move(lm), alpha, beta);
}

inline SearchConfig config_of(std::size_t b, std::size_t k, std::size_t max_length) {
    SearchConfig c;
    c.beam_size = b;
    c.history_limit = k;
    c.max_length = max_length;
    return c;
}

}  // namespace latbeam::testing

#endif  // LATBEAM_TEST_SUPPORT_HPP
