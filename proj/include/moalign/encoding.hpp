#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "moalign/config.hpp"
#include "moalign/kg.hpp"
#include "moalign/params.hpp"
#include "moalign/rng.hpp"
#include "moalign/tensor.hpp"

namespace moalign {

enum class TokenType { Entity, Relation, TextAttrName, TextAttrValue, ImageAttrName, ImageAttrValue, EntityType, Cls };

inline const char* token_type_name(TokenType t) {
    switch (t) {
        case TokenType::Entity: return "entity";
        case TokenType::Relation: return "relation";
        case TokenType::TextAttrName: return "text_attr_name";
        case TokenType::TextAttrValue: return "text_attr_value";
        case TokenType::ImageAttrName: return "image_attr_name";
        case TokenType::ImageAttrValue: return "image_attr_value";
        case TokenType::EntityType: return "entity_type";
        case TokenType::Cls: return "cls";
    }
    return "?";
}

inline int modality_code_for(TokenType t) {
    switch (t) {
        case TokenType::Entity:
        case TokenType::Relation:
        case TokenType::Cls: return 1;
        case TokenType::TextAttrName:
        case TokenType::TextAttrValue: return 2;
        case TokenType::ImageAttrName:
        case TokenType::ImageAttrValue: return 3;
        case TokenType::EntityType: return 4;
    }
    return 0;
}

/// What a token stands for in the KG; value tokens are keyed by their triplet
/// index so the mask's triplet clause can resolve them.
struct TokenSource {
    enum class Kind { Entity, Relation, TextValue, ImageValue, Type, Cls };
    Kind kind = Kind::Cls;
    int index = -1;
};

struct TokenInfo {
    TokenType type_tag = TokenType::Cls;
    int modality_code = 1;
    int structure_code = 1;
    TokenSource source;
};

struct IndexRange {
    int begin = 0, end = 0;
    int size() const { return end - begin; }
    bool empty() const { return begin >= end; }
};

/// Token layout for one entity: [CLS, e, (e_i, r_i)..., (a_t, v_t)...,
/// (a_v, v_v)..., e_T]. Content-free; the embedding step materializes it.
struct SequencePlan {
    int side = 0;
    int entity = 0;
    std::vector<TokenInfo> tokens;
    int cls_index = 0, entity_index = 1, type_index = -1;
    IndexRange neighbor_range, text_range, image_range;

    int length() const { return static_cast<int>(tokens.size()); }
};

struct InputSequence {
    SequencePlan plan;
    Tensor embedded;  // seq_len × d, content + positional code embeddings
};

/// Binary pairwise visibility plus its additive-weight form (0 where visible,
/// -1e9 where masked).
struct MaskMatrix {
    int n = 0;
    std::vector<std::uint8_t> bits;
    std::vector<double> additive;

    bool bit(int i, int j) const { return bits[static_cast<std::size_t>(i * n + j)] != 0; }
    double weight(int i, int j) const { return additive[static_cast<std::size_t>(i * n + j)]; }
};

inline constexpr double kMaskNegative = -1e9;

// ---------------------------------------------------------------------------
// Embedding helpers
// ---------------------------------------------------------------------------

/// Deterministic stand-in for a pretrained text encoder: a truncated-normal
/// draw seeded by the hash of the raw string. Same text, same vector.
inline std::vector<double> pseudo_embed_text(const std::string& raw, int d, double lambda = 0.02) {
    if (raw.empty()) throw DataError("pseudo_embed_text: empty text");
    if (d < 8) throw DataError("pseudo_embed_text: d must be >= 8");
    Rng rng(mix_seed(0x7e87a951d1c2b3a4ULL, fnv1a(raw)));
    std::vector<double> v(static_cast<std::size_t>(d));
    for (double& x : v) x = rng.truncated_normal(lambda, 2.0 * lambda);
    return v;
}

/// Namespaced pseudo-embedding for KG ids, so an entity, a relation and a
/// text value with the same spelling get unrelated vectors.
inline std::vector<double> pseudo_embed_id(char kind, const std::string& id, int d, double lambda = 0.02) {
    return pseudo_embed_text(std::string(1, kind) + "\x1f" + id, d, lambda);
}

/// Zero-pads to a multiple of patch_len and concatenates the patches in
/// order (the flatten step; order-preserving by construction).
inline std::vector<double> flatten_patches(const std::vector<double>& raw, int patch_len) {
    if (raw.empty()) throw DataError("flatten_patches: empty image vector");
    if (patch_len <= 0) throw DataError("flatten_patches: patch_len must be positive");
    const std::size_t pl = static_cast<std::size_t>(patch_len);
    const std::size_t padded = (raw.size() + pl - 1) / pl * pl;
    std::vector<double> out = raw;
    out.resize(padded, 0.0);
    return out;
}

/// Eq.-style standardization: (v - mean) / max(std, 1e-6) * lambda with
/// population standard deviation. Constant vectors collapse to zero.
inline std::vector<double> standardize_image_embedding(const std::vector<double>& v, double lambda) {
    if (v.size() < 2) throw DataError("standardize_image_embedding: vector length must be >= 2");
    double mean = 0.0;
    for (const double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (const double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const double denom = std::max(std::sqrt(var), 1e-6);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / denom * lambda;
    return out;
}

/// Flattens patches and projects the result to model dimension d through the
/// learned projection (gradient flows into proj).
inline Tensor patchify_image_vector(const std::vector<double>& raw, int patch_len, const Tensor& proj) {
    std::vector<double> flat = flatten_patches(raw, patch_len);
    if (flat.size() > proj.rows())
        throw DataError("patchify_image_vector: padded length " + std::to_string(flat.size()) +
                        " exceeds projection rows " + std::to_string(proj.rows()));
    flat.resize(proj.rows(), 0.0);
    const std::size_t width = flat.size();
    return matmul(Tensor::from({1, width}, std::move(flat)), proj);
}

// ---------------------------------------------------------------------------
// Sequence building
// ---------------------------------------------------------------------------

/// Structure positional codes: 1 for the entity, its attributes, CLS and the
/// type token; the i-th neighbor (1-based, in the frozen reference order)
/// gets 2i and its relation 2i+1.
inline void assign_structure_codes(SequencePlan& plan) {
    for (auto& t : plan.tokens) t.structure_code = 1;
    for (int p = plan.neighbor_range.begin; p < plan.neighbor_range.end; ++p) {
        const int pair = (p - plan.neighbor_range.begin) / 2 + 1;  // 1-based neighbor index
        const bool is_relation = ((p - plan.neighbor_range.begin) % 2) == 1;
        plan.tokens[static_cast<std::size_t>(p)].structure_code = is_relation ? 2 * pair + 1 : 2 * pair;
    }
}

/// Builds the token layout for one entity. The neighbor reference order is a
/// deterministic shuffle under order_seed, frozen across calls; truncation
/// keeps the first max_neighbors/max_attributes under that order. Callers
/// derive one order_seed per entity.
inline SequencePlan plan_sequence(int entity, const MultiModalKG& kg, int side, const EncoderConfig& cfg,
                                  std::uint64_t order_seed) {
    if (entity < 0 || entity >= kg.entity_count())
        throw DataError("plan_sequence: unknown entity index " + std::to_string(entity));
    SequencePlan plan;
    plan.side = side;
    plan.entity = entity;

    auto push = [&plan](TokenType tag, TokenSource::Kind kind, int index) {
        plan.tokens.push_back({tag, modality_code_for(tag), 1, {kind, index}});
    };

    push(TokenType::Cls, TokenSource::Kind::Cls, -1);
    push(TokenType::Entity, TokenSource::Kind::Entity, entity);

    std::vector<MultiModalKG::NeighborRef> nbrs = kg.neighbors[static_cast<std::size_t>(entity)];
    Rng order_rng(order_seed);
    order_rng.shuffle(nbrs);
    if (static_cast<int>(nbrs.size()) > cfg.max_neighbors) nbrs.resize(static_cast<std::size_t>(cfg.max_neighbors));

    plan.neighbor_range.begin = plan.length();
    for (const auto& nb : nbrs) {
        push(TokenType::Entity, TokenSource::Kind::Entity, nb.neighbor);
        push(TokenType::Relation, TokenSource::Kind::Relation, nb.relation);
    }
    plan.neighbor_range.end = plan.length();

    plan.text_range.begin = plan.length();
    if (!cfg.drop_text) {
        const auto& tlist = kg.entity_text_attrs[static_cast<std::size_t>(entity)];
        const int n_text = std::min<int>(static_cast<int>(tlist.size()), cfg.max_attributes);
        for (int i = 0; i < n_text; ++i) {
            const int tr = tlist[static_cast<std::size_t>(i)];
            push(TokenType::TextAttrName, TokenSource::Kind::Relation,
                 kg.text_attrs[static_cast<std::size_t>(tr)].attribute);
            push(TokenType::TextAttrValue, TokenSource::Kind::TextValue, tr);
        }
    }
    plan.text_range.end = plan.length();

    plan.image_range.begin = plan.length();
    if (!cfg.drop_image) {
        const auto& ilist = kg.entity_image_attrs[static_cast<std::size_t>(entity)];
        const int n_img = std::min<int>(static_cast<int>(ilist.size()), cfg.max_attributes);
        for (int i = 0; i < n_img; ++i) {
            const int tr = ilist[static_cast<std::size_t>(i)];
            push(TokenType::ImageAttrName, TokenSource::Kind::Relation,
                 kg.image_attrs[static_cast<std::size_t>(tr)].attribute);
            push(TokenType::ImageAttrValue, TokenSource::Kind::ImageValue, tr);
        }
    }
    plan.image_range.end = plan.length();

    if (cfg.use_type_prefix) {
        plan.type_index = plan.length();
        push(TokenType::EntityType, TokenSource::Kind::Type, kg.entity_types[static_cast<std::size_t>(entity)]);
    }

    assign_structure_codes(plan);
    return plan;
}

/// Materializes content embeddings for a plan and adds the learned modality
/// and structure code embeddings (one table per code family). Entity,
/// relation, attribute-name and text-value content are fixed pseudo
/// embeddings (the pretrained-initializer replacement); type, CLS and the
/// image projection are trainable.
inline InputSequence build_sequence(const SequencePlan& plan, const MultiModalKG& kg, const PairVocab& vocab,
                                    ParamStore& params, const EncoderConfig& cfg) {
    const Tensor& type_tab = params.get("embed.type");
    const Tensor& cls_emb = params.get("embed.cls");
    const Tensor& image_proj = params.get("embed.image_proj");
    const std::size_t d = static_cast<std::size_t>(cfg.d);

    std::vector<Tensor> parts;
    parts.reserve(plan.tokens.size());
    for (const TokenInfo& tok : plan.tokens) {
        switch (tok.source.kind) {
            case TokenSource::Kind::Cls:
                parts.push_back(cls_emb);
                break;
            case TokenSource::Kind::Entity:
                parts.push_back(Tensor::from(
                    {1, d}, pseudo_embed_id('e', kg.entity_ids[static_cast<std::size_t>(tok.source.index)],
                                            cfg.d, cfg.lambda)));
                break;
            case TokenSource::Kind::Relation:
                parts.push_back(Tensor::from(
                    {1, d}, pseudo_embed_id('r', kg.relation_ids[static_cast<std::size_t>(tok.source.index)],
                                            cfg.d, cfg.lambda)));
                break;
            case TokenSource::Kind::Type:
                parts.push_back(rows_lookup(type_tab, {vocab.type_row(plan.side, tok.source.index)}));
                break;
            case TokenSource::Kind::TextValue: {
                const auto& t = kg.text_attrs[static_cast<std::size_t>(tok.source.index)];
                parts.push_back(Tensor::from({1, d}, pseudo_embed_text(t.value, cfg.d, cfg.lambda)));
                break;
            }
            case TokenSource::Kind::ImageValue: {
                // flatten -> project -> standardize, so the embedding that
                // enters the stack has the vocabulary's mean-0 / std-lambda
                // per-token distribution
                const auto& t = kg.image_attrs[static_cast<std::size_t>(tok.source.index)];
                parts.push_back(
                    standardize_rows(patchify_image_vector(t.value, cfg.patch_len, image_proj), cfg.lambda));
                break;
            }
        }
    }

    std::vector<int> modality_rows, structure_rows;
    modality_rows.reserve(plan.tokens.size());
    structure_rows.reserve(plan.tokens.size());
    const int structure_cap = 2 * cfg.max_neighbors + 1;  // codes beyond the table clamp to the last row
    for (const TokenInfo& tok : plan.tokens) {
        modality_rows.push_back(tok.modality_code - 1);
        structure_rows.push_back(std::min(tok.structure_code, structure_cap));
    }

    InputSequence seq;
    seq.plan = plan;
    seq.embedded = add(add(concat_rows(parts), rows_lookup(params.get("embed.modality"), modality_rows)),
                       rows_lookup(params.get("embed.structure"), structure_rows));
    return seq;
}

// ---------------------------------------------------------------------------
// Mask construction (the modifiable-attention matrix)
// ---------------------------------------------------------------------------

namespace detail {

/// Triplet clause: some triplet's head and tail are the two token sources, in
/// either direction. Heads are always entities; tails are entities for
/// relational triplets and the value marker for attribute triplets.
inline bool triplet_links(const TokenSource& a, const TokenSource& b, const MultiModalKG& kg) {
    using K = TokenSource::Kind;
    const TokenSource* ent = nullptr;
    const TokenSource* other = nullptr;
    if (a.kind == K::Entity) { ent = &a; other = &b; }
    else if (b.kind == K::Entity) { ent = &b; other = &a; }
    else return false;

    switch (other->kind) {
        case K::Entity: {
            for (const auto& nb : kg.neighbors[static_cast<std::size_t>(ent->index)])
                if (nb.neighbor == other->index) return true;
            return false;
        }
        case K::TextValue:
            return kg.text_attrs[static_cast<std::size_t>(other->index)].entity == ent->index;
        case K::ImageValue:
            return kg.image_attrs[static_cast<std::size_t>(other->index)].entity == ent->index;
        default:
            return false;
    }
}

}  // namespace detail

/// bits[i][j] = 1 iff a triplet links the two tokens' sources (head-tail,
/// either direction), or the tokens share a type-tag family, or either token
/// is CLS (global context). The additive form is 0 / -1e9.
inline MaskMatrix build_mask(const SequencePlan& plan, const MultiModalKG& kg) {
    const int n = plan.length();
    for (const TokenInfo& tok : plan.tokens) {
        const int idx = tok.source.index;
        switch (tok.source.kind) {
            case TokenSource::Kind::Entity:
                if (idx < 0 || idx >= kg.entity_count()) throw DataError("build_mask: unresolvable entity token");
                break;
            case TokenSource::Kind::Relation:
                if (idx < 0 || idx >= static_cast<int>(kg.relation_ids.size()))
                    throw DataError("build_mask: unresolvable relation token");
                break;
            case TokenSource::Kind::TextValue:
                if (idx < 0 || idx >= static_cast<int>(kg.text_attrs.size()))
                    throw DataError("build_mask: unresolvable text value token");
                break;
            case TokenSource::Kind::ImageValue:
                if (idx < 0 || idx >= static_cast<int>(kg.image_attrs.size()))
                    throw DataError("build_mask: unresolvable image value token");
                break;
            default:
                break;
        }
    }
    MaskMatrix m;
    m.n = n;
    m.bits.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
    m.additive.assign(m.bits.size(), kMaskNegative);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const TokenInfo& ti = plan.tokens[static_cast<std::size_t>(i)];
            const TokenInfo& tj = plan.tokens[static_cast<std::size_t>(j)];
            bool visible = ti.type_tag == TokenType::Cls || tj.type_tag == TokenType::Cls ||
                           ti.type_tag == tj.type_tag;
            if (!visible) visible = detail::triplet_links(ti.source, tj.source, kg);
            if (visible) {
                m.bits[static_cast<std::size_t>(i * n + j)] = 1;
                m.additive[static_cast<std::size_t>(i * n + j)] = 0.0;
            }
        }
    }
    return m;
}

inline InputSequence build_sequence(int entity, const MultiModalKG& kg, int side, const EncoderConfig& cfg,
                                    const PairVocab& vocab, ParamStore& params, std::uint64_t order_seed) {
    return build_sequence(plan_sequence(entity, kg, side, cfg, mix_seed(order_seed, static_cast<std::uint64_t>(entity))),
                          kg, vocab, params, cfg);
}

}  // namespace moalign
