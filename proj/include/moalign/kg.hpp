#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moalign/errors.hpp"
#include "moalign/rng.hpp"

namespace moalign {

enum class RelationKind { Entity, TextAttr, ImageAttr };

inline const char* relation_kind_name(RelationKind k) {
    switch (k) {
        case RelationKind::Entity: return "entity";
        case RelationKind::TextAttr: return "text-attribute";
        case RelationKind::ImageAttr: return "image-attribute";
    }
    return "?";
}

/// Multi-modal knowledge graph with opaque string ids mapped to dense indices
/// at load time. Immutable once built; safe for concurrent reads.
struct MultiModalKG {
    std::vector<std::string> entity_ids;
    std::unordered_map<std::string, int> entity_index;

    std::vector<std::string> relation_ids;
    std::vector<RelationKind> relation_kinds;
    std::unordered_map<std::string, int> relation_index;

    struct RelTriplet {
        int head, relation, tail;
        bool operator==(const RelTriplet&) const = default;
    };
    struct TextTriplet {
        int entity, attribute;
        std::string value;  // raw text; embedding is the encoding module's job
        bool operator==(const TextTriplet&) const = default;
    };
    struct ImageTriplet {
        int entity, attribute;
        std::vector<double> value;
        bool operator==(const ImageTriplet&) const = default;
    };

    std::vector<RelTriplet> relational;
    std::vector<TextTriplet> text_attrs;
    std::vector<ImageTriplet> image_attrs;

    // type index 0 is the reserved "untyped" default
    std::vector<std::string> type_ids;
    std::unordered_map<std::string, int> type_index;
    std::vector<int> entity_types;  // per entity

    // per-entity adjacency over relational triplets, both directions
    struct NeighborRef {
        int neighbor, relation;
    };
    std::vector<std::vector<NeighborRef>> neighbors;
    std::vector<std::vector<int>> entity_text_attrs;   // triplet indices per entity
    std::vector<std::vector<int>> entity_image_attrs;  // triplet indices per entity

    int entity_count() const { return static_cast<int>(entity_ids.size()); }
    int type_count() const { return static_cast<int>(type_ids.size()); }

    int entity_or_throw(const std::string& id) const {
        const auto it = entity_index.find(id);
        if (it == entity_index.end()) throw DataError("unknown entity id '" + id + "'");
        return it->second;
    }

    void rebuild_adjacency() {
        neighbors.assign(entity_ids.size(), {});
        entity_text_attrs.assign(entity_ids.size(), {});
        entity_image_attrs.assign(entity_ids.size(), {});
        for (const auto& t : relational) {
            neighbors[static_cast<std::size_t>(t.head)].push_back({t.tail, t.relation});
            if (t.tail != t.head) neighbors[static_cast<std::size_t>(t.tail)].push_back({t.head, t.relation});
        }
        for (std::size_t i = 0; i < text_attrs.size(); ++i)
            entity_text_attrs[static_cast<std::size_t>(text_attrs[i].entity)].push_back(static_cast<int>(i));
        for (std::size_t i = 0; i < image_attrs.size(); ++i)
            entity_image_attrs[static_cast<std::size_t>(image_attrs[i].entity)].push_back(static_cast<int>(i));
    }
};

/// Known-equivalent entity pairs (kg1 id, kg2 id). One-to-one by invariant.
struct AlignmentSeedSet {
    std::vector<std::pair<std::string, std::string>> pairs;

    void validate_one_to_one() const {
        std::unordered_set<std::string> left, right;
        for (const auto& [a, b] : pairs) {
            if (!left.insert(a).second) throw DataError("seed set: left entity '" + a + "' appears twice");
            if (!right.insert(b).second) throw DataError("seed set: right entity '" + b + "' appears twice");
        }
    }
};

struct DatasetSplit {
    AlignmentSeedSet train;
    AlignmentSeedSet test;
    double train_fraction = 0.0;
    std::uint64_t split_seed = 0;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline double parse_real(std::string_view tok, const std::string& file, std::size_t lineno) {
    double v = 0.0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
        throw DataError(file + ":" + std::to_string(lineno) + ": bad real number '" + std::string(tok) + "'");
    return v;
}

inline void for_each_line(const std::string& path,
                          const std::function<void(std::size_t, std::string_view)>& fn) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        fn(lineno, line);
    }
}

}  // namespace detail

/// Loads and validates a multi-modal KG from the four TSV files. The entity
/// triples file declares the entity set (heads and tails); the attribute and
/// type files may only reference declared entities.
inline MultiModalKG load_kg(const std::string& entity_triple_path, const std::string& text_attr_path,
                            const std::string& image_attr_path, const std::string& type_path) {
    MultiModalKG kg;
    kg.type_ids.push_back("untyped");
    kg.type_index["untyped"] = 0;

    auto intern_entity = [&kg](std::string_view id) {
        const auto it = kg.entity_index.find(std::string(id));
        if (it != kg.entity_index.end()) return it->second;
        const int idx = static_cast<int>(kg.entity_ids.size());
        kg.entity_ids.emplace_back(id);
        kg.entity_index.emplace(kg.entity_ids.back(), idx);
        return idx;
    };
    auto intern_relation = [&kg](std::string_view id, RelationKind kind, const std::string& file,
                                 std::size_t lineno) {
        const auto it = kg.relation_index.find(std::string(id));
        if (it != kg.relation_index.end()) {
            const RelationKind have = kg.relation_kinds[static_cast<std::size_t>(it->second)];
            if (have != kind)
                throw DataError(file + ":" + std::to_string(lineno) + ": relation '" + std::string(id) +
                                "' already declared as " + relation_kind_name(have) + ", used as " +
                                relation_kind_name(kind));
            return it->second;
        }
        const int idx = static_cast<int>(kg.relation_ids.size());
        kg.relation_ids.emplace_back(id);
        kg.relation_kinds.push_back(kind);
        kg.relation_index.emplace(kg.relation_ids.back(), idx);
        return idx;
    };
    auto declared_entity = [&kg](std::string_view id, const std::string& file, std::size_t lineno) {
        const auto it = kg.entity_index.find(std::string(id));
        if (it == kg.entity_index.end())
            throw DataError(file + ":" + std::to_string(lineno) + ": dangling reference to entity '" +
                            std::string(id) + "'");
        return it->second;
    };

    detail::for_each_line(entity_triple_path, [&](std::size_t lineno, std::string_view line) {
        const auto cols = detail::split_tabs(line);
        if (cols.size() != 3)
            throw DataError(entity_triple_path + ":" + std::to_string(lineno) + ": expected 3 tab-separated columns, got " +
                            std::to_string(cols.size()));
        const int h = intern_entity(cols[0]);
        const int r = intern_relation(cols[1], RelationKind::Entity, entity_triple_path, lineno);
        const int t = intern_entity(cols[2]);
        kg.relational.push_back({h, r, t});
    });

    detail::for_each_line(text_attr_path, [&](std::size_t lineno, std::string_view line) {
        const auto cols = detail::split_tabs(line);
        if (cols.size() != 3)
            throw DataError(text_attr_path + ":" + std::to_string(lineno) + ": expected 3 tab-separated columns, got " +
                            std::to_string(cols.size()));
        if (cols[2].empty()) throw DataError(text_attr_path + ":" + std::to_string(lineno) + ": empty text value");
        const int e = declared_entity(cols[0], text_attr_path, lineno);
        const int a = intern_relation(cols[1], RelationKind::TextAttr, text_attr_path, lineno);
        kg.text_attrs.push_back({e, a, std::string(cols[2])});
    });

    detail::for_each_line(image_attr_path, [&](std::size_t lineno, std::string_view line) {
        const auto cols = detail::split_tabs(line);
        if (cols.size() != 3)
            throw DataError(image_attr_path + ":" + std::to_string(lineno) + ": expected 3 tab-separated columns, got " +
                            std::to_string(cols.size()));
        const int e = declared_entity(cols[0], image_attr_path, lineno);
        const int a = intern_relation(cols[1], RelationKind::ImageAttr, image_attr_path, lineno);
        std::vector<double> vec;
        std::string_view rest = cols[2];
        std::size_t pos = 0;
        while (pos < rest.size()) {
            while (pos < rest.size() && rest[pos] == ' ') ++pos;
            if (pos >= rest.size()) break;
            std::size_t end = rest.find(' ', pos);
            if (end == std::string_view::npos) end = rest.size();
            vec.push_back(detail::parse_real(rest.substr(pos, end - pos), image_attr_path, lineno));
            pos = end;
        }
        if (vec.empty())
            throw DataError(image_attr_path + ":" + std::to_string(lineno) + ": empty image vector");
        kg.image_attrs.push_back({e, a, std::move(vec)});
    });

    kg.entity_types.assign(kg.entity_ids.size(), 0);
    std::vector<bool> typed(kg.entity_ids.size(), false);
    detail::for_each_line(type_path, [&](std::size_t lineno, std::string_view line) {
        const auto cols = detail::split_tabs(line);
        if (cols.size() != 2)
            throw DataError(type_path + ":" + std::to_string(lineno) + ": expected 2 tab-separated columns, got " +
                            std::to_string(cols.size()));
        const int e = declared_entity(cols[0], type_path, lineno);
        if (typed[static_cast<std::size_t>(e)])
            throw DataError(type_path + ":" + std::to_string(lineno) + ": duplicate type assignment for entity '" +
                            std::string(cols[0]) + "'");
        typed[static_cast<std::size_t>(e)] = true;
        const std::string tid(cols[1]);
        auto it = kg.type_index.find(tid);
        int t;
        if (it == kg.type_index.end()) {
            t = static_cast<int>(kg.type_ids.size());
            kg.type_ids.push_back(tid);
            kg.type_index.emplace(tid, t);
        } else {
            t = it->second;
        }
        kg.entity_types[static_cast<std::size_t>(e)] = t;
    });

    kg.rebuild_adjacency();
    return kg;
}

namespace detail {

inline std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

/// Writes the four TSV files into `dir` (created if needed). Round-trips
/// exactly through load_kg: triplet order and id interning order are
/// preserved, and reals are printed shortest-round-trip.
inline void write_kg(const MultiModalKG& kg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir + "/triples.tsv");
        if (!out) throw DataError("cannot write '" + dir + "/triples.tsv'");
        for (const auto& t : kg.relational)
            out << kg.entity_ids[static_cast<std::size_t>(t.head)] << '\t'
                << kg.relation_ids[static_cast<std::size_t>(t.relation)] << '\t'
                << kg.entity_ids[static_cast<std::size_t>(t.tail)] << '\n';
    }
    {
        std::ofstream out(dir + "/text_attrs.tsv");
        if (!out) throw DataError("cannot write '" + dir + "/text_attrs.tsv'");
        for (const auto& t : kg.text_attrs)
            out << kg.entity_ids[static_cast<std::size_t>(t.entity)] << '\t'
                << kg.relation_ids[static_cast<std::size_t>(t.attribute)] << '\t' << t.value << '\n';
    }
    {
        std::ofstream out(dir + "/image_attrs.tsv");
        if (!out) throw DataError("cannot write '" + dir + "/image_attrs.tsv'");
        for (const auto& t : kg.image_attrs) {
            out << kg.entity_ids[static_cast<std::size_t>(t.entity)] << '\t'
                << kg.relation_ids[static_cast<std::size_t>(t.attribute)] << '\t';
            for (std::size_t i = 0; i < t.value.size(); ++i) {
                if (i) out << ' ';
                out << detail::format_real(t.value[i]);
            }
            out << '\n';
        }
    }
    {
        std::ofstream out(dir + "/types.tsv");
        if (!out) throw DataError("cannot write '" + dir + "/types.tsv'");
        for (std::size_t e = 0; e < kg.entity_ids.size(); ++e) {
            const int t = kg.entity_types[e];
            if (t != 0) out << kg.entity_ids[e] << '\t' << kg.type_ids[static_cast<std::size_t>(t)] << '\n';
        }
    }
}

inline MultiModalKG load_kg_dir(const std::string& dir) {
    return load_kg(dir + "/triples.tsv", dir + "/text_attrs.tsv", dir + "/image_attrs.tsv", dir + "/types.tsv");
}

inline AlignmentSeedSet load_seeds(const std::string& path) {
    AlignmentSeedSet seeds;
    detail::for_each_line(path, [&](std::size_t lineno, std::string_view line) {
        const auto cols = detail::split_tabs(line);
        if (cols.size() != 2)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected 2 tab-separated columns, got " +
                            std::to_string(cols.size()));
        seeds.pairs.emplace_back(std::string(cols[0]), std::string(cols[1]));
    });
    seeds.validate_one_to_one();
    return seeds;
}

inline void write_seeds(const AlignmentSeedSet& seeds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (const auto& [a, b] : seeds.pairs) out << a << '\t' << b << '\n';
}

/// Deterministic shuffle under split_seed, then prefix/suffix partition with
/// |train| = round(train_fraction * |pairs|).
inline DatasetSplit split_seeds(const AlignmentSeedSet& seeds, double train_fraction, std::uint64_t split_seed) {
    if (seeds.pairs.empty()) throw DataError("split_seeds: empty seed set");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw DataError("split_seeds: train fraction must lie in (0, 1)");
    std::vector<std::pair<std::string, std::string>> shuffled = seeds.pairs;
    Rng rng(split_seed);
    rng.shuffle(shuffled);
    const auto n_train = static_cast<std::size_t>(
        std::floor(train_fraction * static_cast<double>(shuffled.size()) + 0.5));
    DatasetSplit split;
    split.train_fraction = train_fraction;
    split.split_seed = split_seed;
    split.train.pairs.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.pairs.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train), shuffled.end());
    return split;
}

/// Uniform negative draws without replacement: left negatives come from kg1
/// excluding e, right negatives from kg2 excluding e'.
inline std::pair<std::vector<int>, std::vector<int>> sample_negatives(int e1, int e2, const MultiModalKG& kg1,
                                                                      const MultiModalKG& kg2,
                                                                      int count_per_side, Rng& rng) {
    auto draw = [&rng](const MultiModalKG& kg, int excluded, int count) {
        const int n = kg.entity_count();
        if (n < count + 1)
            throw DataError("sample_negatives: need " + std::to_string(count + 1) + " entities, have " +
                            std::to_string(n));
        // draw from [0, n-1) and skip over the excluded index
        std::vector<int> picks = rng.sample_without_replacement(n - 1, count);
        for (int& p : picks)
            if (p >= excluded) ++p;
        return picks;
    };
    return {draw(kg1, e1, count_per_side), draw(kg2, e2, count_per_side)};
}

}  // namespace moalign
