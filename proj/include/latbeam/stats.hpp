#ifndef LATBEAM_STATS_HPP
#define LATBEAM_STATS_HPP

#include <optional>
#include <string>

#include "latbeam/lattice.hpp"
#include "latbeam/search.hpp"

namespace latbeam {

/// One lattice statistics row. Masses are natural-log; the sequence count is
/// the number of root-to-final lattice paths.
struct LatticeStats {
    LogMass log_score_mass = kLogZero;
    BigCount num_sequences = 0;
    double num_sequences_log10 = 0.0;
    std::size_t num_recombinations = 0;
    /// Mean distance over recombined branches; absent without recombinations.
    std::optional<double> mean_distance;
};

inline LatticeStats assemble_stats(const SearchResult& result) {
    LatticeStats s;
    s.log_score_mass = result.total_mass;
    s.num_sequences = count_paths(result.lattice);
    s.num_sequences_log10 = log10_count(s.num_sequences);
    s.num_recombinations = result.recombination_count;
    if (!result.distance_samples.empty()) {
        double sum = 0.0;
        for (const double d : result.distance_samples) {
            sum += d;
        }
        s.mean_distance = sum / static_cast<double>(result.distance_samples.size());
    }
    return s;
}

inline std::string history_limit_label(std::size_t k) {
    return k == kInfiniteHistory ? "inf" : std::to_string(k);
}

inline constexpr const char* kStatsCsvHeader =
    "k,b,log_score_mass,num_sequences_log10,num_recombinations,mean_distance";

/// CSV row matching kStatsCsvHeader; an absent distance is left empty.
inline std::string stats_csv_row(std::size_t k, std::size_t b, double log_score_mass, double num_sequences_log10,
                                 double num_recombinations, std::optional<double> mean_distance) {
    std::string row = history_limit_label(k) + "," + std::to_string(b) + "," + detail::format_real(log_score_mass) +
                      "," + detail::format_real(num_sequences_log10) + "," + detail::format_real(num_recombinations) +
                      ",";
    if (mean_distance) {
        row += detail::format_real(*mean_distance);
    }
    return row;
}

inline std::string stats_csv_row(std::size_t k, std::size_t b, const LatticeStats& s) {
    return stats_csv_row(k, b, s.log_score_mass, s.num_sequences_log10, static_cast<double>(s.num_recombinations),
                         s.mean_distance);
}

}  // namespace latbeam

#endif  // LATBEAM_STATS_HPP
