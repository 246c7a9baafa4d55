#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "moalign/kg.hpp"
#include "moalign/rng.hpp"

namespace moalign {

struct SynthParams {
    int n_entities = 100;
    int n_relations = 4;
    int n_text_attrs = 2;
    int n_image_attrs = 1;
    int n_types = 5;
    int image_dim = 16;
    double noise_sigma = 0.05;
    std::uint64_t seed = 42;
};

struct SynthResult {
    MultiModalKG kg1;
    MultiModalKG kg2;
    AlignmentSeedSet truth;
};

namespace detail {

inline std::string hex_token(Rng& rng) {
    static const char* digits = "0123456789abcdef";
    std::string s(8, '0');
    for (char& c : s) c = digits[rng.uniform_int(16)];
    return s;
}

}  // namespace detail

/// Generates a paired benchmark with planted ground truth. kg2 is a full
/// id-renamed copy of kg1 (entities and the relation/attribute schema both
/// renamed; only the type vocabulary is shared). Image vectors in kg2 carry
/// zero-mean Gaussian noise of scale noise_sigma; text values get a suffixed
/// variant. A ring backbone guarantees every entity appears in the relational
/// file and has neighbors.
inline SynthResult synth_paired_kgs(const SynthParams& p, Rng& rng) {
    if (p.n_entities <= 0 || p.n_relations <= 0 || p.n_text_attrs <= 0 || p.n_image_attrs <= 0 ||
        p.n_types <= 0 || p.image_dim <= 0)
        throw DataError("synth_paired_kgs: all counts must be positive");
    if (p.noise_sigma < 0.0) throw DataError("synth_paired_kgs: noise_sigma must be >= 0");

    MultiModalKG kg1;
    kg1.type_ids.push_back("untyped");
    kg1.type_index["untyped"] = 0;
    for (int t = 0; t < p.n_types; ++t) {
        kg1.type_ids.push_back("t" + std::to_string(t));
        kg1.type_index[kg1.type_ids.back()] = t + 1;
    }
    for (int i = 0; i < p.n_entities; ++i) {
        kg1.entity_ids.push_back("e" + std::to_string(i));
        kg1.entity_index[kg1.entity_ids.back()] = i;
    }
    auto add_relation = [&kg1](const std::string& id, RelationKind kind) {
        kg1.relation_index[id] = static_cast<int>(kg1.relation_ids.size());
        kg1.relation_ids.push_back(id);
        kg1.relation_kinds.push_back(kind);
    };
    for (int r = 0; r < p.n_relations; ++r) add_relation("r" + std::to_string(r), RelationKind::Entity);
    for (int a = 0; a < p.n_text_attrs; ++a) add_relation("ta" + std::to_string(a), RelationKind::TextAttr);
    for (int a = 0; a < p.n_image_attrs; ++a) add_relation("ia" + std::to_string(a), RelationKind::ImageAttr);

    kg1.entity_types.resize(static_cast<std::size_t>(p.n_entities));
    for (int i = 0; i < p.n_entities; ++i)
        kg1.entity_types[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng.uniform_int(p.n_types));

    // ring backbone + the same number of extra random edges
    std::unordered_set<std::uint64_t> seen;
    auto add_edge = [&](int h, int r, int t) {
        kg1.relational.push_back({h, r, t});
        seen.insert((static_cast<std::uint64_t>(h) << 32) | static_cast<std::uint64_t>(t));
    };
    for (int i = 0; i < p.n_entities; ++i)
        add_edge(i, static_cast<int>(rng.uniform_int(p.n_relations)), (i + 1) % p.n_entities);
    if (p.n_entities > 2) {
        int added = 0;
        int guard = 0;
        while (added < p.n_entities && guard < 20 * p.n_entities) {
            ++guard;
            const int h = static_cast<int>(rng.uniform_int(p.n_entities));
            const int t = static_cast<int>(rng.uniform_int(p.n_entities));
            if (h == t) continue;
            if (seen.count((static_cast<std::uint64_t>(h) << 32) | static_cast<std::uint64_t>(t))) continue;
            add_edge(h, static_cast<int>(rng.uniform_int(p.n_relations)), t);
            ++added;
        }
    }

    for (int i = 0; i < p.n_entities; ++i)
        for (int a = 0; a < p.n_text_attrs; ++a)
            kg1.text_attrs.push_back({i, p.n_relations + a, "w_" + detail::hex_token(rng)});
    for (int i = 0; i < p.n_entities; ++i)
        for (int a = 0; a < p.n_image_attrs; ++a) {
            std::vector<double> v(static_cast<std::size_t>(p.image_dim));
            for (double& x : v) x = rng.normal(0.0, 1.0);
            kg1.image_attrs.push_back({i, p.n_relations + p.n_text_attrs + a, std::move(v)});
        }
    kg1.rebuild_adjacency();

    // kg2: rename everything, perturb images, suffix text
    MultiModalKG kg2 = kg1;
    for (int i = 0; i < p.n_entities; ++i) kg2.entity_ids[static_cast<std::size_t>(i)] = "x" + std::to_string(i);
    kg2.entity_index.clear();
    for (int i = 0; i < p.n_entities; ++i) kg2.entity_index[kg2.entity_ids[static_cast<std::size_t>(i)]] = i;
    for (std::size_t r = 0; r < kg2.relation_ids.size(); ++r) kg2.relation_ids[r] = "k2_" + kg2.relation_ids[r];
    kg2.relation_index.clear();
    for (std::size_t r = 0; r < kg2.relation_ids.size(); ++r)
        kg2.relation_index[kg2.relation_ids[r]] = static_cast<int>(r);
    for (auto& t : kg2.text_attrs) t.value += "~2";
    for (auto& t : kg2.image_attrs)
        for (double& x : t.value) x += p.noise_sigma == 0.0 ? 0.0 : rng.normal(0.0, p.noise_sigma);

    SynthResult out;
    out.truth.pairs.reserve(static_cast<std::size_t>(p.n_entities));
    for (int i = 0; i < p.n_entities; ++i)
        out.truth.pairs.emplace_back(kg1.entity_ids[static_cast<std::size_t>(i)],
                                     kg2.entity_ids[static_cast<std::size_t>(i)]);
    out.kg1 = std::move(kg1);
    out.kg2 = std::move(kg2);
    return out;
}

namespace detail {

inline nlohmann::json kg_manifest(const MultiModalKG& kg) {
    int n_rel = 0, n_text_rel = 0, n_image_rel = 0;
    for (const RelationKind k : kg.relation_kinds) {
        if (k == RelationKind::Entity) ++n_rel;
        else if (k == RelationKind::TextAttr) ++n_text_rel;
        else ++n_image_rel;
    }
    return nlohmann::json{{"entities", kg.entity_count()},
                          {"entity_relations", n_rel},
                          {"text_attr_relations", n_text_rel},
                          {"image_attr_relations", n_image_rel},
                          {"relational_triplets", kg.relational.size()},
                          {"text_triplets", kg.text_attrs.size()},
                          {"image_triplets", kg.image_attrs.size()},
                          {"types", kg.type_count()}};
}

}  // namespace detail

/// Writes the benchmark layout consumed by `train --data` and `eval --data`:
/// kg1/ and kg2/ with the four TSV files each, seeds.tsv, manifest.json.
inline void write_synth_output(const SynthResult& data, const SynthParams& p, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_kg(data.kg1, dir + "/kg1");
    write_kg(data.kg2, dir + "/kg2");
    write_seeds(data.truth, dir + "/seeds.tsv");
    nlohmann::json manifest{{"kg1", detail::kg_manifest(data.kg1)},
                            {"kg2", detail::kg_manifest(data.kg2)},
                            {"seeds", data.truth.pairs.size()},
                            {"generator",
                             {{"n_entities", p.n_entities},
                              {"n_relations", p.n_relations},
                              {"n_text_attrs", p.n_text_attrs},
                              {"n_image_attrs", p.n_image_attrs},
                              {"n_types", p.n_types},
                              {"image_dim", p.image_dim},
                              {"noise_sigma", p.noise_sigma},
                              {"seed", p.seed}}}};
    std::ofstream out(dir + "/manifest.json", std::ios::binary);
    if (!out) throw DataError("cannot write '" + dir + "/manifest.json'");
    out << manifest.dump(2) << '\n';
}

struct BenchmarkData {
    MultiModalKG kg1, kg2;
    AlignmentSeedSet seeds;
};

inline BenchmarkData load_benchmark_dir(const std::string& dir) {
    BenchmarkData out;
    out.kg1 = load_kg_dir(dir + "/kg1");
    out.kg2 = load_kg_dir(dir + "/kg2");
    out.seeds = load_seeds(dir + "/seeds.tsv");
    return out;
}

enum class PerturbTarget { Neighbors, Attributes };

/// Replaces floor(fraction*n + 0.5) of the targeted triplets' tails/values
/// with a uniformly drawn alternative. Referential invariants are preserved
/// by construction.
inline MultiModalKG perturb_kg(const MultiModalKG& kg, double fraction, PerturbTarget target, Rng& rng) {
    if (fraction < 0.0 || fraction > 0.3)
        throw DataError("perturb_kg: fraction must lie in [0, 0.3], got " + std::to_string(fraction));
    MultiModalKG out = kg;
    auto pick_count = [fraction](std::size_t n) {
        return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    };
    if (target == PerturbTarget::Neighbors) {
        const std::size_t k = pick_count(out.relational.size());
        const auto idx = rng.sample_without_replacement(static_cast<int>(out.relational.size()), static_cast<int>(k));
        for (const int i : idx) {
            auto& t = out.relational[static_cast<std::size_t>(i)];
            if (out.entity_count() < 2) break;
            int alt = t.tail;
            while (alt == t.tail) alt = static_cast<int>(rng.uniform_int(out.entity_count()));
            t.tail = alt;
        }
    } else {
        const std::size_t kt = pick_count(out.text_attrs.size());
        const auto tidx = rng.sample_without_replacement(static_cast<int>(out.text_attrs.size()), static_cast<int>(kt));
        for (const int i : tidx) {
            auto& t = out.text_attrs[static_cast<std::size_t>(i)];
            std::string alt = t.value;
            int guard = 0;
            while (alt == t.value && guard++ < 32) {
                const auto j = rng.uniform_int(out.text_attrs.size());
                alt = out.text_attrs[j].value;
            }
            if (alt == t.value) alt = t.value + "*";
            t.value = std::move(alt);
        }
        const std::size_t ki = pick_count(out.image_attrs.size());
        const auto iidx =
            rng.sample_without_replacement(static_cast<int>(out.image_attrs.size()), static_cast<int>(ki));
        for (const int i : iidx) {
            auto& t = out.image_attrs[static_cast<std::size_t>(i)];
            std::vector<double> alt = t.value;
            int guard = 0;
            while (alt == t.value && guard++ < 32) {
                const auto j = rng.uniform_int(out.image_attrs.size());
                alt = out.image_attrs[j].value;
            }
            if (alt == t.value)
                for (double& x : alt) x = rng.normal(0.0, 1.0);
            t.value = std::move(alt);
        }
    }
    out.rebuild_adjacency();
    return out;
}

}  // namespace moalign
