#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "moalign/encoder.hpp"
#include "moalign/kg.hpp"
#include "moalign/loss.hpp"

namespace moalign {

struct RankingResult {
    int query = -1;             // entity index on the query side
    int true_counterpart = -1;  // entity index on the candidate side
    int rank = 0;               // 1-based
    int candidate_count = 0;
};

/// Ranks the true candidate among all candidates by ascending cosine distance
/// to the query; ties break by ascending candidate index.
inline RankingResult rank_candidates(const std::vector<double>& query,
                                     const std::vector<std::vector<double>>& candidates, int true_index) {
    if (candidates.empty()) throw DataError("rank_candidates: empty candidate list");
    if (true_index < 0 || true_index >= static_cast<int>(candidates.size()))
        throw DataError("rank_candidates: true_index out of range");
    const double d_true = cosine_distance_value(query, candidates[static_cast<std::size_t>(true_index)]);
    int rank = 1;
    for (int j = 0; j < static_cast<int>(candidates.size()); ++j) {
        if (j == true_index) continue;
        const double dj = cosine_distance_value(query, candidates[static_cast<std::size_t>(j)]);
        if (dj < d_true || (dj == d_true && j < true_index)) ++rank;
    }
    RankingResult r;
    r.rank = rank;
    r.candidate_count = static_cast<int>(candidates.size());
    r.true_counterpart = true_index;
    return r;
}

inline double mrr(const std::vector<RankingResult>& results) {
    if (results.empty()) throw DataError("mrr: empty result list");
    double s = 0.0;
    for (const auto& r : results) s += 1.0 / static_cast<double>(r.rank);
    return s / static_cast<double>(results.size());
}

inline double hits_at_k(const std::vector<RankingResult>& results, int k) {
    if (results.empty()) throw DataError("hits_at_k: empty result list");
    if (k < 1) throw DataError("hits_at_k: k must be >= 1");
    double s = 0.0;
    for (const auto& r : results)
        if (r.rank <= k) s += 1.0;
    return s / static_cast<double>(results.size());
}

enum class EvalDirection { LeftToRight, RightToLeft, Averaged };

inline const char* direction_name(EvalDirection d) {
    switch (d) {
        case EvalDirection::LeftToRight: return "left-to-right";
        case EvalDirection::RightToLeft: return "right-to-left";
        case EvalDirection::Averaged: return "averaged";
    }
    return "?";
}

inline EvalDirection parse_direction(const std::string& s) {
    if (s == "left-to-right" || s == "l2r") return EvalDirection::LeftToRight;
    if (s == "right-to-left" || s == "r2l") return EvalDirection::RightToLeft;
    if (s == "averaged" || s == "avg") return EvalDirection::Averaged;
    throw DataError("unknown direction '" + s + "'");
}

struct AlignmentMetrics {
    double mrr = 0.0;
    double hits_at_1 = 0.0;
    double hits_at_10 = 0.0;
    EvalDirection direction = EvalDirection::Averaged;
    int n_queries = 0;
};

namespace detail {

/// Eval-mode entity representations for the listed entities.
inline std::vector<std::vector<double>> encode_entity_reprs(Model& model, int side, const std::vector<int>& ents) {
    std::vector<std::vector<double>> reprs;
    reprs.reserve(ents.size());
    for (const int e : ents) reprs.push_back(model.encode(side, e).entity_repr.data());
    return reprs;
}

struct ResolvedSeeds {
    std::vector<int> left, right;
};

inline ResolvedSeeds resolve_seeds(const Model& model, const AlignmentSeedSet& seeds) {
    ResolvedSeeds out;
    out.left.reserve(seeds.pairs.size());
    out.right.reserve(seeds.pairs.size());
    for (const auto& [a, b] : seeds.pairs) {
        out.left.push_back(model.kg(0).entity_or_throw(a));
        out.right.push_back(model.kg(1).entity_or_throw(b));
    }
    return out;
}

inline AlignmentMetrics one_direction(Model& model, const std::vector<int>& queries,
                                      const std::vector<int>& counterparts, int query_side, bool pool_all,
                                      EvalDirection tag) {
    const int cand_side = 1 - query_side;
    std::vector<int> pool;
    std::vector<int> true_index(queries.size());
    if (pool_all) {
        const int n = model.kg(cand_side).entity_count();
        pool.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
        for (std::size_t i = 0; i < queries.size(); ++i) true_index[i] = counterparts[i];
    } else {
        pool = counterparts;
        for (std::size_t i = 0; i < queries.size(); ++i) true_index[i] = static_cast<int>(i);
    }
    const auto pool_reprs = encode_entity_reprs(model, cand_side, pool);
    const auto query_reprs = encode_entity_reprs(model, query_side, queries);
    std::vector<RankingResult> results(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        results[i] = rank_candidates(query_reprs[i], pool_reprs, true_index[i]);
        results[i].query = queries[i];
        results[i].true_counterpart = counterparts[i];
    }
    AlignmentMetrics m;
    m.mrr = mrr(results);
    m.hits_at_1 = hits_at_k(results, 1);
    m.hits_at_10 = hits_at_k(results, 10);
    m.direction = tag;
    m.n_queries = static_cast<int>(results.size());
    return m;
}

}  // namespace detail

/// Encodes both sides of the test seeds and ranks each query's true
/// counterpart. Candidate pool defaults to the test-side entities; pool_all
/// widens it to the full entity set of the candidate KG. "Averaged" is the
/// arithmetic mean of the two directions.
inline AlignmentMetrics evaluate(Model& model, const AlignmentSeedSet& test_seeds, EvalDirection direction,
                                 bool pool_all = false) {
    if (test_seeds.pairs.empty()) throw DataError("evaluate: empty seed set");
    const detail::ResolvedSeeds rs = detail::resolve_seeds(model, test_seeds);
    if (direction == EvalDirection::LeftToRight)
        return detail::one_direction(model, rs.left, rs.right, 0, pool_all, direction);
    if (direction == EvalDirection::RightToLeft)
        return detail::one_direction(model, rs.right, rs.left, 1, pool_all, direction);
    const AlignmentMetrics l2r = detail::one_direction(model, rs.left, rs.right, 0, pool_all, EvalDirection::LeftToRight);
    const AlignmentMetrics r2l = detail::one_direction(model, rs.right, rs.left, 1, pool_all, EvalDirection::RightToLeft);
    AlignmentMetrics m;
    m.mrr = 0.5 * (l2r.mrr + r2l.mrr);
    m.hits_at_1 = 0.5 * (l2r.hits_at_1 + r2l.hits_at_1);
    m.hits_at_10 = 0.5 * (l2r.hits_at_10 + r2l.hits_at_10);
    m.direction = EvalDirection::Averaged;
    m.n_queries = l2r.n_queries + r2l.n_queries;
    return m;
}

}  // namespace moalign
