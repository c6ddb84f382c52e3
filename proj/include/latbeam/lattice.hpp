#ifndef LATBEAM_LATTICE_HPP
#define LATBEAM_LATTICE_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <istream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>

#include "latbeam/core.hpp"

namespace latbeam {

using NodeId = std::uint32_t;
using BigCount = boost::multiprecision::cpp_int;

/// A merged search state. `history` is the full prefix of the hypothesis that
/// survived at this node; its last k tokens are the recombination suffix.
struct LatticeNode {
    NodeId id = 0;
    std::size_t step = 0;
    TokenSequence history;
    bool final = false;

    TokenSequence suffix(std::size_t k) const {
        const std::size_t n = std::min(k, history.size());
        return TokenSequence(history.end() - static_cast<std::ptrdiff_t>(n), history.end());
    }

    friend bool operator==(const LatticeNode&, const LatticeNode&) = default;
};

/// Arc scores are the combined step scores computed from the source node's
/// surviving context. Arcs redirected by a recombination carry the mass the
/// removed branch had accumulated before the merge.
struct LatticeArc {
    NodeId from = 0;
    NodeId to = 0;
    TokenId token = 0;
    double score = 0.0;
    std::optional<double> premerge_mass;

    friend bool operator==(const LatticeArc& a, const LatticeArc& b) {
        auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
        if (a.from != b.from || a.to != b.to || a.token != b.token || !same(a.score, b.score)) {
            return false;
        }
        if (a.premerge_mass.has_value() != b.premerge_mass.has_value()) {
            return false;
        }
        return !a.premerge_mass || same(*a.premerge_mass, *b.premerge_mass);
    }
};

class LatticeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// DAG of search states. Node i has id i. Construction only checks that
/// references are in range; validate() checks the structural invariants.
class Lattice {
public:
    Lattice(std::vector<LatticeNode> nodes, std::vector<LatticeArc> arcs, NodeId root)
        : nodes_(std::move(nodes)), arcs_(std::move(arcs)), root_(root) {
        if (nodes_.empty()) {
            throw LatticeError("lattice has no nodes");
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].id != i) {
                throw LatticeError("node at position " + std::to_string(i) + " has id " +
                                   std::to_string(nodes_[i].id));
            }
        }
        if (root_ >= nodes_.size()) {
            throw LatticeError("root id out of range");
        }
        out_.resize(nodes_.size());
        in_.resize(nodes_.size());
        for (std::size_t a = 0; a < arcs_.size(); ++a) {
            const auto& arc = arcs_[a];
            if (arc.from >= nodes_.size() || arc.to >= nodes_.size()) {
                throw LatticeError("arc " + std::to_string(a) + " references a missing node");
            }
            if (arc.token < 0) {
                throw LatticeError("arc " + std::to_string(a) + " has a negative token");
            }
            out_[arc.from].push_back(a);
            in_[arc.to].push_back(a);
        }
    }

    const std::vector<LatticeNode>& nodes() const { return nodes_; }
    const std::vector<LatticeArc>& arcs() const { return arcs_; }
    const LatticeNode& node(NodeId id) const { return nodes_.at(id); }
    const LatticeArc& arc(std::size_t index) const { return arcs_.at(index); }
    NodeId root() const { return root_; }
    const std::vector<std::size_t>& out_arcs(NodeId id) const { return out_.at(id); }
    const std::vector<std::size_t>& in_arcs(NodeId id) const { return in_.at(id); }

    std::vector<NodeId> finals() const {
        std::vector<NodeId> out;
        for (const auto& n : nodes_) {
            if (n.final) {
                out.push_back(n.id);
            }
        }
        return out;
    }

    /// Kahn order over all nodes; throws LatticeError on a cycle.
    std::vector<NodeId> topological_order() const {
        std::vector<std::size_t> pending(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            pending[i] = in_[i].size();
        }
        std::deque<NodeId> ready;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (pending[i] == 0) {
                ready.push_back(static_cast<NodeId>(i));
            }
        }
        std::vector<NodeId> order;
        order.reserve(nodes_.size());
        while (!ready.empty()) {
            const NodeId n = ready.front();
            ready.pop_front();
            order.push_back(n);
            for (const std::size_t a : out_[n]) {
                if (--pending[arcs_[a].to] == 0) {
                    ready.push_back(arcs_[a].to);
                }
            }
        }
        if (order.size() != nodes_.size()) {
            throw LatticeError("cycle detected in lattice");
        }
        return order;
    }

    /// Steps increase by one along every arc, every node is reachable from the
    /// root, final nodes have no outgoing arcs, and there is no cycle.
    void validate() const {
        if (nodes_[root_].step != 0 || !in_[root_].empty()) {
            throw LatticeError("root must be at step 0 without incoming arcs");
        }
        for (std::size_t a = 0; a < arcs_.size(); ++a) {
            const auto& arc = arcs_[a];
            if (nodes_[arc.from].step + 1 != nodes_[arc.to].step) {
                throw LatticeError("arc " + std::to_string(a) + " does not advance the step by one");
            }
        }
        for (const auto& n : nodes_) {
            if (n.final && !out_[n.id].empty()) {
                throw LatticeError("final node " + std::to_string(n.id) + " has outgoing arcs");
            }
        }
        std::vector<bool> seen(nodes_.size(), false);
        std::vector<NodeId> stack{root_};
        seen[root_] = true;
        while (!stack.empty()) {
            const NodeId n = stack.back();
            stack.pop_back();
            for (const std::size_t a : out_[n]) {
                if (!seen[arcs_[a].to]) {
                    seen[arcs_[a].to] = true;
                    stack.push_back(arcs_[a].to);
                }
            }
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (!seen[i]) {
                throw LatticeError("node " + std::to_string(i) + " is unreachable from the root");
            }
        }
        topological_order();
    }

    friend bool operator==(const Lattice& a, const Lattice& b) {
        return a.root_ == b.root_ && a.nodes_ == b.nodes_ && a.arcs_ == b.arcs_;
    }

private:
    std::vector<LatticeNode> nodes_;
    std::vector<LatticeArc> arcs_;
    NodeId root_;
    std::vector<std::vector<std::size_t>> out_;
    std::vector<std::vector<std::size_t>> in_;
};

/// Number of distinct root-to-final paths, exact.
inline BigCount count_paths(const Lattice& lattice) {
    const auto order = lattice.topological_order();
    std::vector<BigCount> ways(lattice.nodes().size());
    ways[lattice.root()] = 1;
    BigCount total = 0;
    for (const NodeId n : order) {
        if (ways[n] == 0) {
            continue;
        }
        if (lattice.node(n).final) {
            total += ways[n];
        }
        for (const std::size_t a : lattice.out_arcs(n)) {
            ways[lattice.arc(a).to] += ways[n];
        }
    }
    return total;
}

inline double log10_count(const BigCount& count) {
    if (count <= 0) {
        return -std::numeric_limits<double>::infinity();
    }
    using Dec = boost::multiprecision::cpp_dec_float_50;
    return static_cast<double>(boost::multiprecision::log10(Dec(count)));
}

struct LatticePath {
    TokenSequence tokens;
    double score = 0.0;
};

/// All root-to-final paths with their summed arc scores, ordered
/// lexicographically by token sequence.
inline std::vector<LatticePath> enumerate_paths(const Lattice& lattice, std::size_t limit) {
    const BigCount count = count_paths(lattice);
    if (count > limit) {
        throw LatticeError("lattice has " + count.str() + " paths, above the enumeration limit of " +
                           std::to_string(limit));
    }
    std::vector<LatticePath> out;
    TokenSequence tokens;
    auto walk = [&](auto&& self, NodeId n, double score) -> void {
        if (lattice.node(n).final) {
            out.push_back({tokens, score});
        }
        for (const std::size_t a : lattice.out_arcs(n)) {
            const auto& arc = lattice.arc(a);
            tokens.push_back(arc.token);
            self(self, arc.to, score + arc.score);
            tokens.pop_back();
        }
    };
    walk(walk, lattice.root(), 0.0);
    std::sort(out.begin(), out.end(),
              [](const LatticePath& a, const LatticePath& b) { return lexicographic_less(a.tokens, b.tokens); });
    return out;
}

/// Log-semiring forward scores: log-sum of path scores from the root to each node.
inline std::vector<LogMass> forward_scores(const Lattice& lattice) {
    std::vector<LogMass> alpha(lattice.nodes().size(), kLogZero);
    alpha[lattice.root()] = 0.0;
    for (const NodeId n : lattice.topological_order()) {
        if (alpha[n] == kLogZero) {
            continue;
        }
        for (const std::size_t a : lattice.out_arcs(n)) {
            const auto& arc = lattice.arc(a);
            alpha[arc.to] = log_add(alpha[arc.to], alpha[n] + arc.score);
        }
    }
    return alpha;
}

/// Log-sum of path scores from each node to any final node.
inline std::vector<LogMass> backward_scores(const Lattice& lattice) {
    std::vector<LogMass> beta(lattice.nodes().size(), kLogZero);
    auto order = lattice.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const NodeId n = *it;
        LogMass acc = lattice.node(n).final ? 0.0 : kLogZero;
        for (const std::size_t a : lattice.out_arcs(n)) {
            const auto& arc = lattice.arc(a);
            acc = log_add(acc, arc.score + beta[arc.to]);
        }
        beta[n] = acc;
    }
    return beta;
}

/// Log-sum over all root-to-final path scores.
inline LogMass total_mass(const Lattice& lattice) {
    return backward_scores(lattice)[lattice.root()];
}

/// Arc indices of a root-to-final path spelling `tokens`, if one exists.
inline std::optional<std::vector<std::size_t>> find_path(const Lattice& lattice, const TokenSequence& tokens) {
    std::vector<std::size_t> arcs;
    auto walk = [&](auto&& self, NodeId n, std::size_t depth) -> bool {
        if (depth == tokens.size()) {
            return lattice.node(n).final;
        }
        for (const std::size_t a : lattice.out_arcs(n)) {
            const auto& arc = lattice.arc(a);
            if (arc.token != tokens[depth]) {
                continue;
            }
            arcs.push_back(a);
            if (self(self, arc.to, depth + 1)) {
                return true;
            }
            arcs.pop_back();
        }
        return false;
    };
    if (walk(walk, lattice.root(), 0)) {
        return arcs;
    }
    return std::nullopt;
}

/// Incremental construction used by the search. Removed nodes stay allocated
/// until finalize(), which drops every node that is not on a root-to-final
/// path and renumbers the rest in creation order.
class LatticeBuilder {
public:
    NodeId add_node(std::size_t step, TokenSequence history) {
        const auto id = static_cast<NodeId>(nodes_.size());
        nodes_.push_back({id, step, std::move(history), false});
        alive_.push_back(true);
        incoming_.emplace_back();
        return id;
    }

    void add_arc(NodeId from, NodeId to, TokenId token, double score) {
        incoming_[to].push_back(arcs_.size());
        arcs_.push_back({from, to, token, score, std::nullopt});
    }

    /// Points every arc entering `removed` at `survivor` and drops `removed`.
    void redirect(NodeId removed, NodeId survivor, double removed_mass) {
        for (const std::size_t a : incoming_[removed]) {
            arcs_[a].to = survivor;
            arcs_[a].premerge_mass = removed_mass;
            incoming_[survivor].push_back(a);
        }
        incoming_[removed].clear();
        alive_[removed] = false;
    }

    void set_final(NodeId id, bool final) { nodes_[id].final = final; }

    std::size_t node_count() const { return nodes_.size(); }

    /// remap[old] is the new id, or nullopt for dropped nodes.
    Lattice finalize(NodeId root, std::vector<std::optional<NodeId>>* remap = nullptr) const {
        const std::size_t n = nodes_.size();
        std::vector<std::vector<std::size_t>> outgoing(n);
        for (std::size_t a = 0; a < arcs_.size(); ++a) {
            if (alive_[arcs_[a].from] && alive_[arcs_[a].to]) {
                outgoing[arcs_[a].from].push_back(a);
            }
        }
        // Nodes that can reach a final node.
        std::vector<bool> useful(n, false);
        for (std::size_t i = n; i-- > 0;) {
            if (!alive_[i]) {
                continue;
            }
            bool u = nodes_[i].final;
            for (const std::size_t a : outgoing[i]) {
                u = u || useful[arcs_[a].to];
            }
            useful[i] = u;
        }
        useful[root] = true;
        std::vector<std::optional<NodeId>> map(n);
        std::vector<LatticeNode> nodes;
        for (std::size_t i = 0; i < n; ++i) {
            if (useful[i]) {
                map[i] = static_cast<NodeId>(nodes.size());
                LatticeNode node = nodes_[i];
                node.id = *map[i];
                nodes.push_back(std::move(node));
            }
        }
        std::vector<LatticeArc> arcs;
        for (std::size_t i = 0; i < n; ++i) {
            if (!useful[i]) {
                continue;
            }
            for (const std::size_t a : outgoing[i]) {
                const auto& arc = arcs_[a];
                if (!useful[arc.to]) {
                    continue;
                }
                LatticeArc copy = arc;
                copy.from = *map[arc.from];
                copy.to = *map[arc.to];
                arcs.push_back(copy);
            }
        }
        if (remap) {
            *remap = std::move(map);
        }
        return Lattice(std::move(nodes), std::move(arcs), 0);
    }

private:
    std::vector<LatticeNode> nodes_;
    std::vector<LatticeArc> arcs_;
    std::vector<bool> alive_;
    std::vector<std::vector<std::size_t>> incoming_;
};

// LATBEAM v1 text format:
//
//   LATBEAM v1
//   nodes <N> arcs <A> root <R>
//   node <id> <step> <final 0|1> <history: comma-separated ids or ->
//   arc <from> <to> <token> <score> <premerge mass or ->
//
// Node records come first in id order, then arc records. Reals are written
// with 17 significant digits so that parsing restores them exactly.

namespace detail {

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string serialize(const Lattice& lattice) {
    std::string out = "LATBEAM v1\n";
    out += "nodes " + std::to_string(lattice.nodes().size()) + " arcs " + std::to_string(lattice.arcs().size()) +
           " root " + std::to_string(lattice.root()) + "\n";
    for (const auto& n : lattice.nodes()) {
        out += "node " + std::to_string(n.id) + " " + std::to_string(n.step) + " " + (n.final ? "1" : "0") + " ";
        if (n.history.empty()) {
            out += "-";
        }
        for (std::size_t i = 0; i < n.history.size(); ++i) {
            out += (i ? "," : "") + std::to_string(n.history[i]);
        }
        out += "\n";
    }
    for (const auto& a : lattice.arcs()) {
        out += "arc " + std::to_string(a.from) + " " + std::to_string(a.to) + " " + std::to_string(a.token) + " " +
               detail::format_real(a.score) + " " + (a.premerge_mass ? detail::format_real(*a.premerge_mass) : "-") +
               "\n";
    }
    return out;
}

class LatticeParseError : public LatticeError {
public:
    LatticeParseError(std::size_t line, std::size_t field, const std::string& what)
        : LatticeError("line " + std::to_string(line) + ", field " + std::to_string(field) + ": " + what),
          line_(line),
          field_(field) {}

    std::size_t line() const { return line_; }
    std::size_t field() const { return field_; }

private:
    std::size_t line_;
    std::size_t field_;
};

namespace detail {

class RecordReader {
public:
    explicit RecordReader(std::string_view text) : text_(text) {}

    /// Splits the next line into whitespace-separated fields.
    bool next(std::vector<std::string_view>& fields) {
        fields.clear();
        if (pos_ >= text_.size()) {
            return false;
        }
        std::size_t end = text_.find('\n', pos_);
        if (end == std::string_view::npos) {
            end = text_.size();
        }
        std::string_view line = text_.substr(pos_, end - pos_);
        pos_ = end + 1;
        ++line_;
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) {
                ++i;
            }
            const std::size_t start = i;
            while (i < line.size() && line[i] != ' ' && line[i] != '\t') {
                ++i;
            }
            if (i > start) {
                fields.push_back(line.substr(start, i - start));
            }
        }
        return true;
    }

    std::size_t line() const { return line_; }

    template <class T>
    T integer(std::string_view s, std::size_t field) const {
        T value{};
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw LatticeParseError(line_, field, "expected an integer, got '" + std::string(s) + "'");
        }
        return value;
    }

    double real(std::string_view s, std::size_t field) const {
        double value = 0.0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw LatticeParseError(line_, field, "expected a real number, got '" + std::string(s) + "'");
        }
        return value;
    }

    void expect(const std::vector<std::string_view>& fields, std::size_t count, std::string_view keyword) const {
        if (fields.empty() || fields[0] != keyword) {
            throw LatticeParseError(line_, 1, "expected '" + std::string(keyword) + "' record");
        }
        if (fields.size() != count) {
            throw LatticeParseError(line_, std::min(fields.size(), count) + 1,
                                    "'" + std::string(keyword) + "' record needs " + std::to_string(count) +
                                        " fields, found " + std::to_string(fields.size()));
        }
    }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t line_ = 0;
};

}  // namespace detail

/// Parses LATBEAM v1 text and validates the result.
inline Lattice deserialize(std::string_view text) {
    detail::RecordReader reader(text);
    std::vector<std::string_view> f;
    if (!reader.next(f) || f.size() != 2 || f[0] != "LATBEAM" || f[1] != "v1") {
        throw LatticeParseError(1, 1, "missing 'LATBEAM v1' header");
    }
    if (!reader.next(f)) {
        throw LatticeParseError(2, 1, "missing counts line");
    }
    if (f.size() != 6 || f[0] != "nodes" || f[2] != "arcs" || f[4] != "root") {
        throw LatticeParseError(reader.line(), 1, "expected 'nodes <N> arcs <A> root <R>'");
    }
    const auto node_count = reader.integer<std::size_t>(f[1], 2);
    const auto arc_count = reader.integer<std::size_t>(f[3], 4);
    const auto root = reader.integer<NodeId>(f[5], 6);
    if (node_count == 0) {
        throw LatticeParseError(reader.line(), 2, "empty lattice");
    }
    std::vector<LatticeNode> nodes;
    nodes.reserve(std::min<std::size_t>(node_count, 1 << 16));
    for (std::size_t i = 0; i < node_count; ++i) {
        if (!reader.next(f)) {
            throw LatticeParseError(reader.line() + 1, 1, "expected " + std::to_string(node_count) + " node records");
        }
        reader.expect(f, 5, "node");
        LatticeNode n;
        n.id = reader.integer<NodeId>(f[1], 2);
        if (n.id != i) {
            throw LatticeParseError(reader.line(), 2, "node ids must be consecutive from 0");
        }
        n.step = reader.integer<std::size_t>(f[2], 3);
        if (f[3] != "0" && f[3] != "1") {
            throw LatticeParseError(reader.line(), 4, "final flag must be 0 or 1");
        }
        n.final = f[3] == "1";
        if (f[4] != "-") {
            std::string_view rest = f[4];
            while (true) {
                const std::size_t comma = rest.find(',');
                n.history.push_back(reader.integer<TokenId>(rest.substr(0, comma), 5));
                if (comma == std::string_view::npos) {
                    break;
                }
                rest.remove_prefix(comma + 1);
            }
        }
        nodes.push_back(std::move(n));
    }
    std::vector<LatticeArc> arcs;
    arcs.reserve(std::min<std::size_t>(arc_count, 1 << 16));
    for (std::size_t i = 0; i < arc_count; ++i) {
        if (!reader.next(f)) {
            throw LatticeParseError(reader.line() + 1, 1, "expected " + std::to_string(arc_count) + " arc records");
        }
        reader.expect(f, 6, "arc");
        LatticeArc a;
        a.from = reader.integer<NodeId>(f[1], 2);
        a.to = reader.integer<NodeId>(f[2], 3);
        if (a.from >= node_count || a.to >= node_count) {
            throw LatticeParseError(reader.line(), a.from >= node_count ? 2 : 3, "node id out of range");
        }
        a.token = reader.integer<TokenId>(f[3], 4);
        a.score = reader.real(f[4], 5);
        if (f[5] != "-") {
            a.premerge_mass = reader.real(f[5], 6);
        }
        arcs.push_back(a);
    }
    while (reader.next(f)) {
        if (!f.empty()) {
            throw LatticeParseError(reader.line(), 1, "unexpected trailing content");
        }
    }
    if (root >= node_count) {
        throw LatticeParseError(2, 6, "root id out of range");
    }
    Lattice lattice(std::move(nodes), std::move(arcs), root);
    lattice.validate();
    return lattice;
}

}  // namespace latbeam

#endif  // LATBEAM_LATTICE_HPP
