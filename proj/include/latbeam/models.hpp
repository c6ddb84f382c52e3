#ifndef LATBEAM_MODELS_HPP
#define LATBEAM_MODELS_HPP

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "latbeam/core.hpp"

namespace latbeam {

/// Input sequence x_1^T stored row-major, T frames by F features.
class InputFeatures {
public:
    InputFeatures(std::size_t frames, std::size_t dims, std::vector<double> values)
        : frames_(frames), dims_(dims), values_(std::move(values)) {
        if (frames_ == 0) {
            throw std::invalid_argument("input features need at least one frame");
        }
        if (values_.size() != frames_ * dims_) {
            throw std::invalid_argument("feature matrix size does not match its shape");
        }
        for (const double v : values_) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("feature values must be finite");
            }
        }
    }

    /// Entries uniform in [-1, 1) from the given seed.
    static InputFeatures random(std::size_t frames, std::size_t dims, std::uint64_t seed) {
        Rng rng(seed);
        std::vector<double> values(frames * dims);
        for (auto& v : values) {
            v = rng.symmetric(1.0);
        }
        return InputFeatures(frames, dims, std::move(values));
    }

    std::size_t frames() const { return frames_; }
    std::size_t dims() const { return dims_; }
    double at(std::size_t t, std::size_t f) const { return values_[t * dims_ + f]; }
    std::span<const double> values() const { return values_; }

    /// Column means: the fixed pooling every scorer conditions on.
    std::vector<double> pooled() const {
        std::vector<double> out(dims_, 0.0);
        for (std::size_t t = 0; t < frames_; ++t) {
            for (std::size_t f = 0; f < dims_; ++f) {
                out[f] += at(t, f);
            }
        }
        for (auto& v : out) {
            v /= static_cast<double>(frames_);
        }
        return out;
    }

private:
    std::size_t frames_;
    std::size_t dims_;
    std::vector<double> values_;
};

/// Decoding state of a scorer. Limited-context scorers keep the last m tokens
/// in `window` (most recent first), recurrent ones keep a hidden vector.
/// Equality ignores the conditioning, which is fixed per input.
struct ScorerState {
    std::int32_t step = 0;
    TokenSequence window;
    std::vector<double> hidden;
    std::shared_ptr<const std::vector<double>> conditioning;

    friend bool operator==(const ScorerState& a, const ScorerState& b) {
        return a.step == b.step && a.window == b.window && a.hidden == b.hidden;
    }
};

using LogDistribution = std::vector<double>;

/// Left-to-right model producing a normalized next-token log distribution.
class SequenceScorer {
public:
    virtual ~SequenceScorer() = default;

    virtual std::string family() const = 0;
    virtual std::size_t vocab_size() const = 0;
    virtual TokenId eos_id() const = 0;
    /// Number of tokens a state may consume before advance() refuses.
    virtual std::size_t max_steps() const = 0;

    virtual ScorerState init_state(const InputFeatures& x) const = 0;
    virtual ScorerState advance(const ScorerState& state, TokenId token) const = 0;
    virtual LogDistribution log_distribution(const ScorerState& state) const = 0;

    /// Advances by `token` and returns the distribution for the following token.
    std::pair<ScorerState, LogDistribution> step(const ScorerState& state, TokenId token) const {
        ScorerState next = advance(state, token);
        LogDistribution dist = log_distribution(next);
        return {std::move(next), std::move(dist)};
    }

    virtual std::span<const double> parameters() const { return {}; }
    virtual std::shared_ptr<const SequenceScorer> with_parameters(std::vector<double> params) const {
        if (!params.empty()) {
            throw std::logic_error(family() + " scorer has no trainable parameters");
        }
        return nullptr;
    }

    /// grad += scale * sum_w weights[w] * d log p(w | history, x) / d params.
    virtual void accumulate_gradient(const InputFeatures& /*x*/, const TokenSequence& /*history*/,
                                     std::span<const double> /*weights*/, double /*scale*/,
                                     std::span<double> /*grad*/) const {
        throw std::logic_error(family() + " scorer is not differentiable");
    }

    virtual nlohmann::json to_json() const = 0;

    /// Replays `history` from the initial state.
    ScorerState state_after(const InputFeatures& x, const TokenSequence& history) const {
        ScorerState s = init_state(x);
        for (const TokenId t : history) {
            s = advance(s, t);
        }
        return s;
    }

protected:
    void check_token(TokenId token) const {
        if (token < 0 || static_cast<std::size_t>(token) >= vocab_size()) {
            throw std::out_of_range("token id " + std::to_string(token) + " outside the vocabulary");
        }
    }

    void check_can_advance(const ScorerState& state) const {
        if (static_cast<std::size_t>(state.step) >= max_steps()) {
            throw std::length_error("scorer state already at its length cap of " + std::to_string(max_steps()));
        }
    }
};

namespace detail {

/// Log-softmax of `logits` mixed with a point mass on eos so that
/// p(eos) >= floor: p = (1 - floor) * softmax + floor * [w == eos].
/// `probs` receives the plain softmax.
inline LogDistribution floored_log_softmax(std::span<const double> logits, TokenId eos, double floor,
                                           std::vector<double>* probs = nullptr) {
    const std::size_t n = logits.size();
    double top = logits[0];
    for (const double z : logits) {
        top = std::max(top, z);
    }
    double total = 0.0;
    for (const double z : logits) {
        total += std::exp(z - top);
    }
    const double log_total = top + std::log(total);
    LogDistribution out(n);
    if (probs) {
        probs->resize(n);
    }
    for (std::size_t w = 0; w < n; ++w) {
        const double ls = logits[w] - log_total;
        if (probs) {
            (*probs)[w] = std::exp(ls);
        }
        if (floor > 0.0) {
            const double scaled = std::log1p(-floor) + ls;
            out[w] = static_cast<TokenId>(w) == eos ? log_add(scaled, std::log(floor)) : scaled;
        } else {
            out[w] = ls;
        }
    }
    return out;
}

/// Gradient of sum_w weights[w] * log p(w) with respect to the logits, for
/// the floored distribution above.
inline std::vector<double> floored_logit_gradient(std::span<const double> softmax, std::span<const double> log_probs,
                                                  TokenId eos, double floor, std::span<const double> weights) {
    const std::size_t n = softmax.size();
    std::vector<double> ratio(n, 1.0);
    if (floor > 0.0) {
        ratio[static_cast<std::size_t>(eos)] =
            (1.0 - floor) * softmax[static_cast<std::size_t>(eos)] / std::exp(log_probs[static_cast<std::size_t>(eos)]);
    }
    double weighted = 0.0;
    for (std::size_t w = 0; w < n; ++w) {
        weighted += weights[w] * ratio[w];
    }
    std::vector<double> g(n);
    for (std::size_t j = 0; j < n; ++j) {
        g[j] = weights[j] * ratio[j] - softmax[j] * weighted;
    }
    return g;
}

}  // namespace detail

/// Dimensions and initialization of the neural toy scorers. The sentence-end
/// token is always the last vocabulary entry.
struct ScorerShape {
    std::size_t vocab_size = 5;
    std::size_t hidden_size = 8;
    /// 0 makes the scorer ignore its input (a language model).
    std::size_t feature_dim = 2;
    /// Limited-context family only.
    std::size_t context_length = 2;
    std::size_t max_steps = 16;
    double eos_floor = 1e-4;
    double init_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 1) {
            throw std::invalid_argument("vocab_size must be >= 1");
        }
        if (hidden_size < 1) {
            throw std::invalid_argument("hidden_size must be >= 1");
        }
        if (max_steps < 1) {
            throw std::invalid_argument("max_steps must be >= 1");
        }
        if (!(eos_floor >= 0.0 && eos_floor < 1.0)) {
            throw std::invalid_argument("eos_floor must lie in [0, 1)");
        }
        if (!std::isfinite(init_scale)) {
            throw std::invalid_argument("init_scale must be finite");
        }
    }
};

inline nlohmann::json shape_to_json(const ScorerShape& s) {
    return {{"vocab_size", s.vocab_size}, {"hidden_size", s.hidden_size}, {"feature_dim", s.feature_dim},
            {"context_length", s.context_length}, {"max_steps", s.max_steps}, {"eos_floor", s.eos_floor},
            {"init_scale", s.init_scale}, {"seed", s.seed}};
}

inline ScorerShape shape_from_json(const nlohmann::json& j) {
    ScorerShape s;
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.hidden_size = j.at("hidden_size").get<std::size_t>();
    s.feature_dim = j.at("feature_dim").get<std::size_t>();
    s.context_length = j.value("context_length", std::size_t{0});
    s.max_steps = j.at("max_steps").get<std::size_t>();
    s.eos_floor = j.at("eos_floor").get<double>();
    s.init_scale = j.at("init_scale").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

namespace detail {

/// Shared parameter storage for the two neural families. Parameters are
/// drawn in layout order from Rng(seed).symmetric(init_scale).
class NeuralScorer : public SequenceScorer {
public:
    std::size_t vocab_size() const override { return shape_.vocab_size; }
    TokenId eos_id() const override { return static_cast<TokenId>(shape_.vocab_size - 1); }
    std::size_t max_steps() const override { return shape_.max_steps; }
    std::span<const double> parameters() const override { return params_; }
    const ScorerShape& shape() const { return shape_; }

    nlohmann::json to_json() const override {
        return {{"format", "latbeam-scorer v1"}, {"family", family()}, {"shape", shape_to_json(shape_)},
                {"params", params_}};
    }

protected:
    NeuralScorer(ScorerShape shape, std::size_t count, std::vector<double> params) : shape_(shape) {
        shape_.validate();
        if (params.empty()) {
            Rng rng(shape_.seed);
            params_.resize(count);
            for (auto& p : params_) {
                p = rng.symmetric(shape_.init_scale);
            }
        } else {
            if (params.size() != count) {
                throw std::invalid_argument("expected " + std::to_string(count) + " parameters, got " +
                                            std::to_string(params.size()));
            }
            params_ = std::move(params);
        }
    }

    std::shared_ptr<const std::vector<double>> conditioning(const InputFeatures& x) const {
        if (shape_.feature_dim == 0) {
            return std::make_shared<const std::vector<double>>();
        }
        if (x.dims() != shape_.feature_dim) {
            throw std::invalid_argument("input has " + std::to_string(x.dims()) + " feature dims, scorer expects " +
                                        std::to_string(shape_.feature_dim));
        }
        return std::make_shared<const std::vector<double>>(x.pooled());
    }

    ScorerShape shape_;
    std::vector<double> params_;
};

}  // namespace detail

/// Feed-forward scorer whose next-token distribution depends only on the last
/// m tokens, the step index and the pooled input:
///
///   h = tanh(b_h + pos[step] + sum_i emb_i[w_{step-i}] + proj^T c)
///   p = floor-mix(softmax(b_o + out h))
///
/// Missing history positions use the padding index V. Layout: emb (m x (V+1)
/// x H), pos ((max_steps+1) x H), proj (F x H), b_h (H), out (V x H), b_o (V).
class LimitedContextScorer : public detail::NeuralScorer {
public:
    explicit LimitedContextScorer(ScorerShape shape, std::vector<double> params = {})
        : NeuralScorer(shape, count(shape), std::move(params)) {
        if (shape_.context_length < 1) {
            throw std::invalid_argument("context_length must be >= 1");
        }
    }

    static std::size_t count(const ScorerShape& s) {
        const std::size_t h = s.hidden_size;
        return s.context_length * (s.vocab_size + 1) * h + (s.max_steps + 1) * h + s.feature_dim * h + h +
               s.vocab_size * h + s.vocab_size;
    }

    std::string family() const override { return "limited"; }
    std::size_t context_length() const { return shape_.context_length; }

    ScorerState init_state(const InputFeatures& x) const override {
        ScorerState s;
        s.window.assign(shape_.context_length, pad());
        s.conditioning = conditioning(x);
        return s;
    }

    ScorerState advance(const ScorerState& state, TokenId token) const override {
        check_token(token);
        check_can_advance(state);
        ScorerState next = state;
        next.window.insert(next.window.begin(), token);
        next.window.pop_back();
        ++next.step;
        return next;
    }

    LogDistribution log_distribution(const ScorerState& state) const override {
        return forward(state, nullptr, nullptr);
    }

    std::shared_ptr<const SequenceScorer> with_parameters(std::vector<double> params) const override {
        return std::make_shared<LimitedContextScorer>(shape_, std::move(params));
    }

    void accumulate_gradient(const InputFeatures& x, const TokenSequence& history, std::span<const double> weights,
                             double scale, std::span<double> grad) const override {
        const ScorerState state = state_after(x, history);
        std::vector<double> hidden;
        std::vector<double> softmax;
        const LogDistribution logp = forward(state, &hidden, &softmax);
        const std::vector<double> dz =
            detail::floored_logit_gradient(softmax, logp, eos_id(), shape_.eos_floor, weights);
        const Layout l = layout();
        const std::size_t H = shape_.hidden_size;
        const std::size_t V = shape_.vocab_size;
        std::vector<double> dh(H, 0.0);
        for (std::size_t w = 0; w < V; ++w) {
            grad[l.out_bias + w] += scale * dz[w];
            for (std::size_t j = 0; j < H; ++j) {
                grad[l.out + w * H + j] += scale * dz[w] * hidden[j];
                dh[j] += dz[w] * params_[l.out + w * H + j];
            }
        }
        const std::size_t position = pos_index(state);
        const auto& c = *state.conditioning;
        for (std::size_t j = 0; j < H; ++j) {
            const double da = scale * dh[j] * (1.0 - hidden[j] * hidden[j]);
            grad[l.hidden_bias + j] += da;
            grad[l.pos + position * H + j] += da;
            for (std::size_t i = 0; i < shape_.context_length; ++i) {
                grad[l.emb + (i * (V + 1) + static_cast<std::size_t>(state.window[i])) * H + j] += da;
            }
            for (std::size_t f = 0; f < c.size(); ++f) {
                grad[l.proj + f * H + j] += da * c[f];
            }
        }
    }

private:
    struct Layout {
        std::size_t emb, pos, proj, hidden_bias, out, out_bias;
    };

    Layout layout() const {
        const std::size_t H = shape_.hidden_size;
        Layout l{};
        l.emb = 0;
        l.pos = l.emb + shape_.context_length * (shape_.vocab_size + 1) * H;
        l.proj = l.pos + (shape_.max_steps + 1) * H;
        l.hidden_bias = l.proj + shape_.feature_dim * H;
        l.out = l.hidden_bias + H;
        l.out_bias = l.out + shape_.vocab_size * H;
        return l;
    }

    TokenId pad() const { return static_cast<TokenId>(shape_.vocab_size); }

    std::size_t pos_index(const ScorerState& s) const {
        return std::min<std::size_t>(static_cast<std::size_t>(s.step), shape_.max_steps);
    }

    LogDistribution forward(const ScorerState& state, std::vector<double>* hidden_out,
                            std::vector<double>* softmax_out) const {
        const Layout l = layout();
        const std::size_t H = shape_.hidden_size;
        const std::size_t V = shape_.vocab_size;
        const std::size_t position = pos_index(state);
        const auto& c = *state.conditioning;
        std::vector<double> h(H);
        for (std::size_t j = 0; j < H; ++j) {
            double a = params_[l.hidden_bias + j] + params_[l.pos + position * H + j];
            for (std::size_t i = 0; i < shape_.context_length; ++i) {
                a += params_[l.emb + (i * (V + 1) + static_cast<std::size_t>(state.window[i])) * H + j];
            }
            for (std::size_t f = 0; f < c.size(); ++f) {
                a += params_[l.proj + f * H + j] * c[f];
            }
            h[j] = std::tanh(a);
        }
        std::vector<double> z(V);
        for (std::size_t w = 0; w < V; ++w) {
            double v = params_[l.out_bias + w];
            for (std::size_t j = 0; j < H; ++j) {
                v += params_[l.out + w * H + j] * h[j];
            }
            z[w] = v;
        }
        if (hidden_out) {
            *hidden_out = h;
        }
        return detail::floored_log_softmax(z, eos_id(), shape_.eos_floor, softmax_out);
    }
};

/// Elman-style recurrence over the full history:
///
///   h_0 = tanh(b_h + proj^T c)
///   h_n = tanh(b_h + proj^T c + rec h_{n-1} + emb[w_n])
///   p   = floor-mix(softmax(b_o + out h_n))
///
/// Layout: emb (V x H), rec (H x H, row = target unit), proj (F x H),
/// b_h (H), out (V x H), b_o (V).
class RecurrentScorer : public detail::NeuralScorer {
public:
    explicit RecurrentScorer(ScorerShape shape, std::vector<double> params = {})
        : NeuralScorer(shape, count(shape), std::move(params)) {}

    static std::size_t count(const ScorerShape& s) {
        const std::size_t h = s.hidden_size;
        return s.vocab_size * h + h * h + s.feature_dim * h + h + s.vocab_size * h + s.vocab_size;
    }

    std::string family() const override { return "recurrent"; }

    ScorerState init_state(const InputFeatures& x) const override {
        ScorerState s;
        s.conditioning = conditioning(x);
        s.hidden = base_activation(*s.conditioning);
        for (auto& v : s.hidden) {
            v = std::tanh(v);
        }
        return s;
    }

    ScorerState advance(const ScorerState& state, TokenId token) const override {
        check_token(token);
        check_can_advance(state);
        ScorerState next;
        next.step = state.step + 1;
        next.conditioning = state.conditioning;
        next.hidden = transition(state.hidden, token, *state.conditioning);
        return next;
    }

    LogDistribution log_distribution(const ScorerState& state) const override {
        return output(state.hidden, nullptr);
    }

    std::shared_ptr<const SequenceScorer> with_parameters(std::vector<double> params) const override {
        return std::make_shared<RecurrentScorer>(shape_, std::move(params));
    }

    void accumulate_gradient(const InputFeatures& x, const TokenSequence& history, std::span<const double> weights,
                             double scale, std::span<double> grad) const override {
        const Layout l = layout();
        const std::size_t H = shape_.hidden_size;
        const std::size_t V = shape_.vocab_size;
        if (history.size() > shape_.max_steps) {
            throw std::length_error("history exceeds the scorer length cap");
        }
        const auto cond = conditioning(x);
        std::vector<std::vector<double>> hs;
        hs.reserve(history.size() + 1);
        {
            auto h0 = base_activation(*cond);
            for (auto& v : h0) {
                v = std::tanh(v);
            }
            hs.push_back(std::move(h0));
        }
        for (const TokenId t : history) {
            check_token(t);
            hs.push_back(transition(hs.back(), t, *cond));
        }

        std::vector<double> softmax;
        const LogDistribution logp = output(hs.back(), &softmax);
        const std::vector<double> dz =
            detail::floored_logit_gradient(softmax, logp, eos_id(), shape_.eos_floor, weights);

        std::vector<double> dh(H, 0.0);
        const auto& last = hs.back();
        for (std::size_t w = 0; w < V; ++w) {
            grad[l.out_bias + w] += scale * dz[w];
            for (std::size_t j = 0; j < H; ++j) {
                grad[l.out + w * H + j] += scale * dz[w] * last[j];
                dh[j] += scale * dz[w] * params_[l.out + w * H + j];
            }
        }
        std::vector<double> da(H);
        for (std::size_t i = history.size() + 1; i-- > 0;) {
            const auto& h = hs[i];
            for (std::size_t j = 0; j < H; ++j) {
                da[j] = dh[j] * (1.0 - h[j] * h[j]);
                grad[l.hidden_bias + j] += da[j];
                for (std::size_t f = 0; f < cond->size(); ++f) {
                    grad[l.proj + f * H + j] += da[j] * (*cond)[f];
                }
            }
            if (i == 0) {
                break;
            }
            const auto& prev = hs[i - 1];
            const auto token = static_cast<std::size_t>(history[i - 1]);
            std::fill(dh.begin(), dh.end(), 0.0);
            for (std::size_t j = 0; j < H; ++j) {
                grad[l.emb + token * H + j] += da[j];
                for (std::size_t k = 0; k < H; ++k) {
                    grad[l.rec + j * H + k] += da[j] * prev[k];
                    dh[k] += da[j] * params_[l.rec + j * H + k];
                }
            }
        }
    }

private:
    struct Layout {
        std::size_t emb, rec, proj, hidden_bias, out, out_bias;
    };

    Layout layout() const {
        const std::size_t H = shape_.hidden_size;
        Layout l{};
        l.emb = 0;
        l.rec = l.emb + shape_.vocab_size * H;
        l.proj = l.rec + H * H;
        l.hidden_bias = l.proj + shape_.feature_dim * H;
        l.out = l.hidden_bias + H;
        l.out_bias = l.out + shape_.vocab_size * H;
        return l;
    }

    std::vector<double> base_activation(const std::vector<double>& c) const {
        const Layout l = layout();
        const std::size_t H = shape_.hidden_size;
        std::vector<double> a(H);
        for (std::size_t j = 0; j < H; ++j) {
            double v = params_[l.hidden_bias + j];
            for (std::size_t f = 0; f < c.size(); ++f) {
                v += params_[l.proj + f * H + j] * c[f];
            }
            a[j] = v;
        }
        return a;
    }

    std::vector<double> transition(const std::vector<double>& h, TokenId token, const std::vector<double>& c) const {
        const Layout l = layout();
        const std::size_t H = shape_.hidden_size;
        std::vector<double> a = base_activation(c);
        for (std::size_t j = 0; j < H; ++j) {
            double v = a[j] + params_[l.emb + static_cast<std::size_t>(token) * H + j];
            for (std::size_t k = 0; k < H; ++k) {
                v += params_[l.rec + j * H + k] * h[k];
            }
            a[j] = std::tanh(v);
        }
        return a;
    }

    LogDistribution output(const std::vector<double>& h, std::vector<double>* softmax_out) const {
        const Layout l = layout();
        const std::size_t H = shape_.hidden_size;
        const std::size_t V = shape_.vocab_size;
        std::vector<double> z(V);
        for (std::size_t w = 0; w < V; ++w) {
            double v = params_[l.out_bias + w];
            for (std::size_t j = 0; j < H; ++j) {
                v += params_[l.out + w * H + j] * h[j];
            }
            z[w] = v;
        }
        return detail::floored_log_softmax(z, eos_id(), shape_.eos_floor, softmax_out);
    }
};

/// Context-free scorer: the same distribution softmax(logits) at every step.
/// Parameters are the logits.
class MemorylessScorer : public SequenceScorer {
public:
    MemorylessScorer(std::vector<double> logits, TokenId eos, std::size_t max_steps = 64)
        : logits_(std::move(logits)), eos_(eos), max_steps_(max_steps) {
        if (logits_.empty()) {
            throw std::invalid_argument("memoryless scorer needs at least one token");
        }
        check_token(eos_);
    }

    static MemorylessScorer from_probabilities(std::span<const double> probs, TokenId eos, std::size_t max_steps = 64) {
        std::vector<double> logits(probs.size());
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (!(probs[i] > 0.0)) {
                throw std::invalid_argument("memoryless probabilities must be positive");
            }
            logits[i] = std::log(probs[i]);
        }
        return MemorylessScorer(std::move(logits), eos, max_steps);
    }

    std::string family() const override { return "memoryless"; }
    std::size_t vocab_size() const override { return logits_.size(); }
    TokenId eos_id() const override { return eos_; }
    std::size_t max_steps() const override { return max_steps_; }

    ScorerState init_state(const InputFeatures& /*x*/) const override { return ScorerState{}; }

    ScorerState advance(const ScorerState& state, TokenId token) const override {
        check_token(token);
        check_can_advance(state);
        ScorerState next = state;
        ++next.step;
        return next;
    }

    LogDistribution log_distribution(const ScorerState& /*state*/) const override {
        return detail::floored_log_softmax(logits_, eos_, 0.0);
    }

    std::span<const double> parameters() const override { return logits_; }

    std::shared_ptr<const SequenceScorer> with_parameters(std::vector<double> params) const override {
        return std::make_shared<MemorylessScorer>(std::move(params), eos_, max_steps_);
    }

    void accumulate_gradient(const InputFeatures& /*x*/, const TokenSequence& /*history*/,
                             std::span<const double> weights, double scale, std::span<double> grad) const override {
        std::vector<double> softmax;
        const LogDistribution logp = detail::floored_log_softmax(logits_, eos_, 0.0, &softmax);
        const auto dz = detail::floored_logit_gradient(softmax, logp, eos_, 0.0, weights);
        for (std::size_t w = 0; w < logits_.size(); ++w) {
            grad[w] += scale * dz[w];
        }
    }

    nlohmann::json to_json() const override {
        return {{"format", "latbeam-scorer v1"}, {"family", family()}, {"eos_id", eos_},
                {"max_steps", max_steps_}, {"params", logits_}};
    }

private:
    std::vector<double> logits_;
    TokenId eos_;
    std::size_t max_steps_;
};

/// Rebuilds a scorer from its JSON blob. A blob without "params" is
/// re-initialized from the seed in its shape.
inline std::shared_ptr<const SequenceScorer> scorer_from_json(const nlohmann::json& j) {
    if (j.value("format", std::string{}) != "latbeam-scorer v1") {
        throw std::invalid_argument("not a latbeam-scorer v1 blob");
    }
    const std::string family = j.at("family").get<std::string>();
    std::vector<double> params;
    if (j.contains("params")) {
        params = j.at("params").get<std::vector<double>>();
    }
    if (family == "limited") {
        return std::make_shared<LimitedContextScorer>(shape_from_json(j.at("shape")), std::move(params));
    }
    if (family == "recurrent") {
        return std::make_shared<RecurrentScorer>(shape_from_json(j.at("shape")), std::move(params));
    }
    if (family == "memoryless") {
        return std::make_shared<MemorylessScorer>(std::move(params), j.at("eos_id").get<TokenId>(),
                                                  j.at("max_steps").get<std::size_t>());
    }
    throw std::invalid_argument("unknown scorer family '" + family + "'");
}

/// Builds a limited-context or recurrent scorer by family name.
inline std::shared_ptr<const SequenceScorer> make_scorer(const std::string& family, const ScorerShape& shape) {
    if (family == "limited") {
        return std::make_shared<LimitedContextScorer>(shape);
    }
    if (family == "recurrent") {
        return std::make_shared<RecurrentScorer>(shape);
    }
    throw std::invalid_argument("unknown scorer family '" + family + "' (expected limited or recurrent)");
}

struct CombinedState {
    ScorerState am;
    ScorerState lm;

    friend bool operator==(const CombinedState&, const CombinedState&) = default;
};

/// Log-linear combination alpha * log p_AM + beta * log p_LM, left
/// unnormalized. The LM may be absent, in which case beta is ignored.
class CombinedScorer {
public:
    CombinedScorer(std::shared_ptr<const SequenceScorer> am, std::shared_ptr<const SequenceScorer> lm, double alpha,
                   double beta)
        : am_(std::move(am)), lm_(std::move(lm)), alpha_(alpha), beta_(beta) {
        if (!am_) {
            throw std::invalid_argument("combined scorer needs an acoustic model");
        }
        if (!(std::isfinite(alpha_) && alpha_ >= 0.0) || !(std::isfinite(beta_) && beta_ >= 0.0)) {
            throw std::invalid_argument("model scales must be finite and non-negative");
        }
        if (lm_ && (lm_->vocab_size() != am_->vocab_size() || lm_->eos_id() != am_->eos_id())) {
            throw std::invalid_argument("acoustic and language model vocabularies differ");
        }
    }

    const SequenceScorer& am() const { return *am_; }
    const std::shared_ptr<const SequenceScorer>& am_ptr() const { return am_; }
    const std::shared_ptr<const SequenceScorer>& lm_ptr() const { return lm_; }
    double alpha() const { return alpha_; }
    double beta() const { return beta_; }
    std::size_t vocab_size() const { return am_->vocab_size(); }
    TokenId eos_id() const { return am_->eos_id(); }
    std::size_t max_steps() const { return lm_ ? std::min(am_->max_steps(), lm_->max_steps()) : am_->max_steps(); }

    /// Same LM and scales, different acoustic model.
    CombinedScorer with_am(std::shared_ptr<const SequenceScorer> am) const {
        return CombinedScorer(std::move(am), lm_, alpha_, beta_);
    }

    CombinedState init_state(const InputFeatures& x) const {
        CombinedState s;
        s.am = am_->init_state(x);
        if (lm_) {
            s.lm = lm_->init_state(x);
        }
        return s;
    }

    CombinedState advance(const CombinedState& state, TokenId token) const {
        CombinedState next;
        next.am = am_->advance(state.am, token);
        if (lm_) {
            next.lm = lm_->advance(state.lm, token);
        }
        return next;
    }

    /// Unnormalized scores for the next token. A zero scale drops its model
    /// entirely, so alpha = 1, beta = 0 reproduces the AM bit for bit.
    std::vector<double> scores(const CombinedState& state) const {
        std::vector<double> out(vocab_size(), 0.0);
        if (alpha_ != 0.0) {
            const auto am = am_->log_distribution(state.am);
            for (std::size_t w = 0; w < out.size(); ++w) {
                out[w] = alpha_ * am[w];
            }
        }
        if (lm_ && beta_ != 0.0) {
            const auto lm = lm_->log_distribution(state.lm);
            for (std::size_t w = 0; w < out.size(); ++w) {
                out[w] += beta_ * lm[w];
            }
        }
        return out;
    }

    std::pair<CombinedState, std::vector<double>> combined_step(const CombinedState& state, TokenId token) const {
        CombinedState next = advance(state, token);
        std::vector<double> s = scores(next);
        return {std::move(next), std::move(s)};
    }

    /// Sum of per-token combined scores of a finished sequence, eos included.
    LogMass score_sequence(const InputFeatures& x, const TokenSequence& w) const {
        if (!is_finished(w, eos_id())) {
            throw std::invalid_argument("score_sequence needs a sequence ending in its only eos");
        }
        CombinedState state = init_state(x);
        LogMass total = 0.0;
        for (std::size_t n = 0; n < w.size(); ++n) {
            total += scores(state)[static_cast<std::size_t>(w[n])];
            if (n + 1 < w.size()) {
                state = advance(state, w[n]);
            }
        }
        return total;
    }

    /// exp(scores) renormalized over the vocabulary, as log probabilities.
    LogDistribution local_distribution(const CombinedState& state) const {
        auto s = scores(state);
        const LogMass z = log_sum(s);
        for (auto& v : s) {
            v -= z;
        }
        return s;
    }

private:
    std::shared_ptr<const SequenceScorer> am_;
    std::shared_ptr<const SequenceScorer> lm_;
    double alpha_;
    double beta_;
};

enum class DistanceForm { kSquared, kEuclidean };

/// sum_w (p(w) - q(w))^2 over probabilities given in the log domain; the
/// Euclidean form takes the square root.
inline double distribution_distance(std::span<const double> log_p, std::span<const double> log_q,
                                    DistanceForm form = DistanceForm::kSquared) {
    if (log_p.size() != log_q.size()) {
        throw std::invalid_argument("distributions are over different vocabularies");
    }
    double d = 0.0;
    for (std::size_t w = 0; w < log_p.size(); ++w) {
        const double diff = std::exp(log_p[w]) - std::exp(log_q[w]);
        d += diff * diff;
    }
    return form == DistanceForm::kEuclidean ? std::sqrt(d) : d;
}

}  // namespace latbeam

#endif  // LATBEAM_MODELS_HPP
