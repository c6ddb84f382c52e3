#ifndef LATBEAM_CORE_HPP
#define LATBEAM_CORE_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

namespace latbeam {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

/// Natural-log probability mass. Negative infinity encodes zero mass.
using LogMass = double;

inline constexpr LogMass kLogZero = -std::numeric_limits<double>::infinity();

/// Validates a value intended as log mass; NaN never is one.
inline LogMass checked_log_mass(double value) {
    if (std::isnan(value)) {
        throw std::invalid_argument("log mass must not be NaN");
    }
    return value;
}

inline LogMass log_add(LogMass a, LogMass b) {
    if (a < b) {
        std::swap(a, b);
    }
    if (b == kLogZero) {
        return a;
    }
    return a + std::log1p(std::exp(b - a));
}

/// log(sum(exp(values))), shifted by the maximum so that no term overflows.
inline LogMass log_sum(std::span<const LogMass> values) {
    if (values.empty()) {
        return kLogZero;
    }
    const LogMass top = *std::max_element(values.begin(), values.end());
    if (top == kLogZero) {
        return kLogZero;
    }
    if (std::isinf(top)) {
        return top;
    }
    // Neumaier compensated sum of the shifted terms.
    double sum = 0.0;
    double carry = 0.0;
    for (const LogMass v : values) {
        const double term = std::exp(v - top);
        const double t = sum + term;
        if (std::abs(sum) >= std::abs(term)) {
            carry += (sum - t) + term;
        } else {
            carry += (term - t) + sum;
        }
        sum = t;
    }
    return top + std::log(sum + carry);
}

/// Finite set of output symbols with a designated sentence-end token.
class Vocabulary {
public:
    Vocabulary(std::vector<std::string> tokens, TokenId eos_id)
        : tokens_(std::move(tokens)), eos_id_(eos_id) {
        if (tokens_.empty()) {
            throw std::invalid_argument("vocabulary must contain at least one token");
        }
        if (eos_id_ < 0 || static_cast<std::size_t>(eos_id_) >= tokens_.size()) {
            throw std::invalid_argument("eos id out of range");
        }
        std::unordered_set<std::string> seen;
        for (const auto& t : tokens_) {
            if (!seen.insert(t).second) {
                throw std::invalid_argument("duplicate vocabulary token '" + t + "'");
            }
        }
    }

    /// Tokens "a", "b", ... followed by "</s>" as the last entry.
    static Vocabulary letters(std::size_t size) {
        if (size == 0 || size > 27) {
            throw std::invalid_argument("letter vocabulary size must lie in [1, 27]");
        }
        std::vector<std::string> tokens;
        for (std::size_t i = 0; i + 1 < size; ++i) {
            tokens.emplace_back(1, static_cast<char>('a' + i));
        }
        tokens.emplace_back("</s>");
        return Vocabulary(std::move(tokens), static_cast<TokenId>(size - 1));
    }

    std::size_t size() const { return tokens_.size(); }
    TokenId eos_id() const { return eos_id_; }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }

    bool valid(const TokenSequence& seq) const {
        return std::all_of(seq.begin(), seq.end(), [this](TokenId t) { return contains(t); });
    }

    std::string render(const TokenSequence& seq, bool with_eos = false) const {
        std::string out;
        for (const TokenId t : seq) {
            if (t == eos_id_ && !with_eos) {
                continue;
            }
            out += token(t);
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    TokenId eos_id_;
};

/// True iff seq ends with eos and contains it nowhere else.
inline bool is_finished(const TokenSequence& seq, TokenId eos) {
    if (seq.empty() || seq.back() != eos) {
        return false;
    }
    return std::count(seq.begin(), seq.end(), eos) == 1;
}

/// Levenshtein distance with unit costs.
inline std::size_t edit_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        row[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            const std::size_t sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
            row[j] = std::min({sub, up + 1, row[j - 1] + 1});
            diag = up;
        }
    }
    return row[b.size()];
}

/// Lexicographic comparison on token ids.
inline bool lexicographic_less(const TokenSequence& a, const TokenSequence& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// Deterministic random numbers. The mapping from generator output to reals is
// spelled out here instead of relying on std::uniform_real_distribution, whose
// algorithm differs between standard libraries.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for the index-th member of a family derived from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    return splitmix64(splitmix64(base) ^ (index * 0xd1b54a32d192ed03ULL + 1));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        const std::uint64_t z = state_;
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(z);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [-scale, scale).
    double symmetric(double scale) { return scale * (2.0 * uniform() - 1.0); }

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

private:
    std::uint64_t state_;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// processed exactly once; callers write results into per-index slots so the
/// outcome does not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < n && !failed; i = next++) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
                failed = true;
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace latbeam

#endif  // LATBEAM_CORE_HPP
