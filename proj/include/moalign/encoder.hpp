#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moalign/config.hpp"
#include "moalign/encoding.hpp"
#include "moalign/kg.hpp"
#include "moalign/params.hpp"
#include "moalign/tensor.hpp"

namespace moalign {

/// Structural record of one prefixed multi-head attention call.
struct AttnTrace {
    std::vector<int> head_key_counts;
};

/// Scaled dot-product attention with additive mask weights applied before the
/// 1/sqrt(d_k) scaling: Softmax((Q·K^T + m) / sqrt(d_k)) · V.
inline Tensor pi_attn(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& additive) {
    if (q.cols() != k.cols())
        throw ShapeError("pi_attn: query/key width mismatch " + detail::shape_str(q.shape()) + " vs " +
                         detail::shape_str(k.shape()));
    if (k.rows() != v.rows())
        throw ShapeError("pi_attn: key/value count mismatch " + detail::shape_str(k.shape()) + " vs " +
                         detail::shape_str(v.shape()));
    if (additive.rows() != q.rows() || additive.cols() != k.rows())
        throw ShapeError("pi_attn: additive weights " + detail::shape_str(additive.shape()) + " do not cover " +
                         std::to_string(q.rows()) + "x" + std::to_string(k.rows()));
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor scores = scale(add(matmul(q, transpose(k)), additive), inv_sqrt_dk);
    return matmul(softmax_rows(scores), v);
}

/// Per-stage projection weights plus the optional key/value prefix bank.
struct StageParams {
    Tensor wq, wk, wv, wo;  // each d×d
    const Tensor* pk = nullptr;  // n_t×d when prefix injection is on
    const Tensor* pv = nullptr;
};

/// Multi-head attention with entity-type prefix rows concatenated to every
/// head's keys and values. The n_t×d banks are sliced per head to width d_N;
/// prefix columns are always visible (additive weight 0).
inline Tensor prefix_mh_attn(const Tensor& queries, const Tensor& kv, const Tensor& mask_rows,
                             const StageParams& sp, int num_heads, bool use_prefix,
                             AttnTrace* trace = nullptr) {
    if (queries.cols() != kv.cols())
        throw ShapeError("prefix_mh_attn: query/kv width mismatch " + detail::shape_str(queries.shape()) +
                         " vs " + detail::shape_str(kv.shape()));
    if (mask_rows.rows() != queries.rows() || mask_rows.cols() != kv.rows())
        throw ShapeError("prefix_mh_attn: mask rows " + detail::shape_str(mask_rows.shape()) +
                         " do not cover the kv bank");
    if (use_prefix && (sp.pk == nullptr || sp.pv == nullptr))
        throw ShapeError("prefix_mh_attn: prefix injection requested but no prefix bank given; "
                         "disabling it must be explicit");
    const std::size_t d = queries.cols();
    if (d % static_cast<std::size_t>(num_heads) != 0)
        throw ShapeError("prefix_mh_attn: width not divisible by head count");
    const std::size_t dn = d / static_cast<std::size_t>(num_heads);

    Tensor qf = matmul(queries, sp.wq);
    Tensor kf = matmul(kv, sp.wk);
    Tensor vf = matmul(kv, sp.wv);

    Tensor additive = mask_rows;
    if (use_prefix) {
        const std::size_t n_t = sp.pk->rows();
        additive = concat_cols(mask_rows, Tensor::zeros({mask_rows.rows(), n_t}));
    }

    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * dn, c1 = c0 + dn;
        Tensor qh = slice_cols(qf, c0, c1);
        Tensor kh = slice_cols(kf, c0, c1);
        Tensor vh = slice_cols(vf, c0, c1);
        if (use_prefix) {
            kh = concat_rows({kh, slice_cols(*sp.pk, c0, c1)});
            vh = concat_rows({vh, slice_cols(*sp.pv, c0, c1)});
        }
        if (trace) trace->head_key_counts.push_back(static_cast<int>(kh.rows()));
        heads.push_back(pi_attn(qh, kh, vh, additive));
    }
    Tensor cat = heads[0];
    for (std::size_t h = 1; h < heads.size(); ++h) cat = concat_cols(cat, heads[h]);
    return matmul(cat, sp.wo);
}

/// Realizes the bracket pairing [a; v]: feature concatenation of the name and
/// value tokens followed by a learned 2d -> d projection.
inline Tensor attr_pair_fuse(const Tensor& name_tok, const Tensor& value_tok, const Tensor& w_pair) {
    if (name_tok.cols() != value_tok.cols() || name_tok.rows() != value_tok.rows())
        throw ShapeError("attr_pair_fuse: name/value shape mismatch");
    if (w_pair.rows() != 2 * name_tok.cols() || w_pair.cols() != name_tok.cols())
        throw ShapeError("attr_pair_fuse: projection must map 2d -> d, got " + detail::shape_str(w_pair.shape()));
    return matmul(concat_cols(name_tok, value_tok), w_pair);
}

/// Prefix-injected position-wise feed-forward, Eq.-(9) form without biases:
/// f(E · [W_f^k; Φ^k]) · [W_f^v; Φ^v] with f = ReLU.
inline Tensor prefix_ffn(const Tensor& e, const Tensor& w_fk, const Tensor& w_fv, const Tensor* phi_k,
                         const Tensor* phi_v, bool use_prefix) {
    if (use_prefix && (phi_k == nullptr || phi_v == nullptr))
        throw ShapeError("prefix_ffn: prefix injection requested but no phi matrices given");
    Tensor w1 = use_prefix ? concat_cols(w_fk, transpose(*phi_k)) : w_fk;
    Tensor w2 = use_prefix ? concat_rows({w_fv, *phi_v}) : w_fv;
    return matmul(relu(matmul(e, w1)), w2);
}

/// Per-sequence kv banks, built once per forward pass and reused by every
/// block (banks hold input-token content; only the entity/CLS states evolve).
struct StageBanks {
    Tensor neighbor, text, image;              // undefined when the bank is empty
    Tensor neighbor_mask, text_mask, image_mask;  // 2×k additive rows: [entity; cls]

    const Tensor* bank(Stage s) const {
        switch (s) {
            case Stage::Neighbor: return neighbor.defined() ? &neighbor : nullptr;
            case Stage::Textual: return text.defined() ? &text : nullptr;
            case Stage::Visual: return image.defined() ? &image : nullptr;
        }
        return nullptr;
    }
    const Tensor* mask(Stage s) const {
        switch (s) {
            case Stage::Neighbor: return &neighbor_mask;
            case Stage::Textual: return &text_mask;
            case Stage::Visual: return &image_mask;
        }
        return nullptr;
    }
};

namespace detail {

inline Tensor bank_mask_rows(const SequencePlan& plan, const MaskMatrix& mask,
                             const std::vector<std::array<int, 2>>& columns, bool plain_attention) {
    // one additive row for the entity query, one for CLS; a fused pair column
    // is visible if either of its tokens is
    std::vector<double> vals;
    vals.reserve(2 * columns.size());
    const int qrows[2] = {plan.entity_index, plan.cls_index};
    for (const int q : qrows) {
        for (const auto& col : columns) {
            bool visible = plain_attention || mask.bit(q, col[0]) || (col[1] >= 0 && mask.bit(q, col[1]));
            vals.push_back(visible ? 0.0 : kMaskNegative);
        }
    }
    return Tensor::from({2, columns.size()}, std::move(vals));
}

}  // namespace detail

inline StageBanks build_banks(const InputSequence& seq, const MaskMatrix& mask, ParamStore& params,
                              const EncoderConfig& cfg) {
    const SequencePlan& plan = seq.plan;
    StageBanks banks;

    if (!plan.neighbor_range.empty()) {
        std::vector<int> rows;
        std::vector<std::array<int, 2>> cols;
        for (int p = plan.neighbor_range.begin; p < plan.neighbor_range.end; ++p) {
            const bool is_relation = ((p - plan.neighbor_range.begin) % 2) == 1;
            if (is_relation && cfg.neighbor_kv_entities_only) continue;
            rows.push_back(p);
            cols.push_back({p, -1});
        }
        banks.neighbor = rows_lookup(seq.embedded, rows);
        banks.neighbor_mask = detail::bank_mask_rows(plan, mask, cols, cfg.plain_attention);
    }
    auto fused_bank = [&](const IndexRange& range, const char* fuse_param, Tensor& bank, Tensor& bank_mask) {
        if (range.empty()) return;
        std::vector<int> name_rows, value_rows;
        std::vector<std::array<int, 2>> cols;
        for (int p = range.begin; p < range.end; p += 2) {
            name_rows.push_back(p);
            value_rows.push_back(p + 1);
            cols.push_back({p, p + 1});
        }
        bank = attr_pair_fuse(rows_lookup(seq.embedded, name_rows), rows_lookup(seq.embedded, value_rows),
                              params.get(fuse_param));
        bank_mask = detail::bank_mask_rows(plan, mask, cols, cfg.plain_attention);
    };
    fused_bank(plan.text_range, "fuse.text", banks.text, banks.text_mask);
    fused_bank(plan.image_range, "fuse.image", banks.image, banks.image_mask);
    return banks;
}

/// One hierarchical attention stage. Queries are the [entity; cls] state
/// rows; an empty kv bank makes the stage the identity on the state.
inline Tensor hierarchical_stage(Stage stage, const Tensor& state, const StageBanks& banks,
                                 const StageParams& sp, const EncoderConfig& cfg, Rng* dropout_rng) {
    const Tensor* bank = banks.bank(stage);
    if (bank == nullptr) return state;
    Tensor out = prefix_mh_attn(state, *bank, *banks.mask(stage), sp, cfg.num_heads, cfg.use_type_prefix);
    if (dropout_rng != nullptr) out = dropout(out, cfg.dropout_p, *dropout_rng, true);
    return out;
}

namespace detail {

inline StageParams stage_params(ParamStore& params, const EncoderConfig& cfg, int block, Stage stage) {
    const std::string sp = "block" + std::to_string(block) + "." + stage_name(stage) + ".";
    StageParams out{params.get(sp + "wq"), params.get(sp + "wk"), params.get(sp + "wv"), params.get(sp + "wo")};
    if (cfg.use_type_prefix) {
        if (cfg.shared_prefix) {
            out.pk = &params.get("prefix.pk");
            out.pv = &params.get("prefix.pv");
        } else {
            out.pk = &params.get(sp + "pk");
            out.pv = &params.get(sp + "pv");
        }
    }
    return out;
}

}  // namespace detail

/// One encoder block: the three hierarchical stages in config order, then
/// residual + layer norm around the prefix-injected FFN,
/// e^(l) = LayerNorm(e^(l-1) + FFN(e^(l.3))). The CLS row rides the same path.
inline Tensor block_forward(int block, const Tensor& state_in, const StageBanks& banks, ParamStore& params,
                            const EncoderConfig& cfg, Rng* dropout_rng) {
    Tensor s = state_in;
    for (const Stage st : cfg.block_order)
        s = hierarchical_stage(st, s, banks, detail::stage_params(params, cfg, block, st), cfg, dropout_rng);
    const std::string bp = "block" + std::to_string(block) + ".";
    const Tensor* phi_k = cfg.use_type_prefix ? &params.get(bp + "ffn.phik") : nullptr;
    const Tensor* phi_v = cfg.use_type_prefix ? &params.get(bp + "ffn.phiv") : nullptr;
    Tensor ffn = prefix_ffn(s, params.get(bp + "ffn.wk"), params.get(bp + "ffn.wv"), phi_k, phi_v,
                            cfg.use_type_prefix);
    return layer_norm(add(state_in, ffn), params.get(bp + "ln.gain"), params.get(bp + "ln.bias"), cfg.ln_eps);
}

struct EncodeResult {
    Tensor entity_repr;   // final entity-token state, 1×d
    Tensor context_repr;  // final CLS state, 1×d
};

/// A configured encoder bound to a KG pair: parameters, joint vocabulary, and
/// per-entity caches for the (frozen) sequence plans and mask matrices.
class Model {
public:
    Model(EncoderConfig cfg, const MultiModalKG& kg1, const MultiModalKG& kg2, std::uint64_t seed)
        : cfg_(std::move(cfg)),
          vocab_(PairVocab::build(kg1, kg2)),
          kgs_{&kg1, &kg2},
          order_seed_(mix_seed(seed, 0xa11c9e5eULL)) {
        cfg_.validate();
        params_ = init_params(cfg_, vocab_, seed);
        plan_cache_[0].resize(static_cast<std::size_t>(kg1.entity_count()));
        plan_cache_[1].resize(static_cast<std::size_t>(kg2.entity_count()));
    }

    Model(Checkpoint ck, const MultiModalKG& kg1, const MultiModalKG& kg2)
        : cfg_(ck.encoder), vocab_(std::move(ck.vocab)), kgs_{&kg1, &kg2}, order_seed_(ck.order_seed) {
        PairVocab fresh = PairVocab::build(kg1, kg2);
        if (fresh.n_entities_kg1 != vocab_.n_entities_kg1 || fresh.n_entities_kg2 != vocab_.n_entities_kg2 ||
            fresh.n_relations_kg1 != vocab_.n_relations_kg1 || fresh.n_relations_kg2 != vocab_.n_relations_kg2 ||
            fresh.type_ids != vocab_.type_ids)
            throw DataError("checkpoint vocabulary does not match the loaded KG pair");
        params_ = std::move(ck.params);
        plan_cache_[0].resize(static_cast<std::size_t>(kg1.entity_count()));
        plan_cache_[1].resize(static_cast<std::size_t>(kg2.entity_count()));
    }

    const EncoderConfig& cfg() const { return cfg_; }
    const PairVocab& vocab() const { return vocab_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const MultiModalKG& kg(int side) const { return *kgs_[side]; }
    std::uint64_t order_seed() const { return order_seed_; }

    const SequencePlan& plan(int side, int entity) const {
        auto& slot = plan_cache_[side][static_cast<std::size_t>(entity)];
        if (!slot) {
            slot = std::make_unique<CacheEntry>();
            slot->plan = plan_sequence(entity, *kgs_[side], side, cfg_,
                                       mix_seed(order_seed_, static_cast<std::uint64_t>(entity)));
            slot->mask = build_mask(slot->plan, *kgs_[side]);
        }
        return slot->plan;
    }
    const MaskMatrix& mask(int side, int entity) const {
        plan(side, entity);
        return plan_cache_[side][static_cast<std::size_t>(entity)]->mask;
    }

    /// Runs the full stack for one entity. Pass a dropout rng for training
    /// mode; eval mode (nullptr) is deterministic given parameters.
    EncodeResult encode(int side, int entity, Rng* dropout_rng = nullptr) {
        const SequencePlan& p = plan(side, entity);
        InputSequence seq = build_sequence(p, *kgs_[side], vocab_, params_, cfg_);
        StageBanks banks = build_banks(seq, mask(side, entity), params_, cfg_);
        Tensor state = concat_rows({slice_rows(seq.embedded, static_cast<std::size_t>(p.entity_index),
                                               static_cast<std::size_t>(p.entity_index) + 1),
                                    slice_rows(seq.embedded, static_cast<std::size_t>(p.cls_index),
                                               static_cast<std::size_t>(p.cls_index) + 1)});
        for (int b = 0; b < cfg_.num_blocks; ++b) state = block_forward(b, state, banks, params_, cfg_, dropout_rng);
        return {slice_rows(state, 0, 1), slice_rows(state, 1, 2)};
    }

    Checkpoint to_checkpoint(double train_fraction, std::uint64_t split_seed) const {
        Checkpoint ck;
        ck.encoder = cfg_;
        ck.vocab = vocab_;
        ck.order_seed = order_seed_;
        ck.train_fraction = train_fraction;
        ck.split_seed = split_seed;
        for (const auto& [name, t] : params_.all()) ck.params.add(name, Tensor::from(t.shape(), t.data()));
        return ck;
    }

private:
    struct CacheEntry {
        SequencePlan plan;
        MaskMatrix mask;
    };

    EncoderConfig cfg_;
    PairVocab vocab_;
    ParamStore params_;
    const MultiModalKG* kgs_[2];
    std::uint64_t order_seed_;
    mutable std::array<std::vector<std::unique_ptr<CacheEntry>>, 2> plan_cache_;
};

}  // namespace moalign
