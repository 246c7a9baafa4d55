#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moalign/adam.hpp"
#include "moalign/config.hpp"
#include "moalign/encoder.hpp"
#include "moalign/eval.hpp"
#include "moalign/kg.hpp"
#include "moalign/loss.hpp"

namespace moalign {

struct EpochStats {
    int epoch = 0;
    double total_loss = 0.0;
    double loss_ea = 0.0;
    double loss_con = 0.0;
    std::optional<double> val_mrr;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    int stopped_early_at = -1;  // epoch index, -1 when training ran to the end
    double wall_seconds = 0.0;  // console-only; never serialized (reports must be byte-identical)
};

/// One JSON object per epoch. Deterministic for a fixed (config, data, seed).
inline void write_report_jsonl(const TrainReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write report '" + path + "'");
    for (const auto& e : report.epochs) {
        nlohmann::json j{{"epoch", e.epoch},
                         {"total_loss", e.total_loss},
                         {"loss_ea", e.loss_ea},
                         {"loss_con", e.loss_con},
                         {"val_mrr", e.val_mrr ? nlohmann::json(*e.val_mrr) : nlohmann::json(nullptr)}};
        out << j.dump() << '\n';
    }
}

namespace detail {

struct IndexPairs {
    std::vector<std::pair<int, int>> pairs;
};

inline IndexPairs resolve_pairs(const MultiModalKG& kg1, const MultiModalKG& kg2, const AlignmentSeedSet& seeds) {
    IndexPairs out;
    out.pairs.reserve(seeds.pairs.size());
    for (const auto& [a, b] : seeds.pairs) out.pairs.emplace_back(kg1.entity_or_throw(a), kg2.entity_or_throw(b));
    return out;
}

/// Validation MRR: each held-out query ranked against the full opposite
/// entity pool, averaged over both directions.
inline double validation_mrr(Model& model, const std::vector<std::pair<int, int>>& val_pairs) {
    std::vector<int> left, right;
    for (const auto& [l, r] : val_pairs) {
        left.push_back(l);
        right.push_back(r);
    }
    const AlignmentMetrics l2r = detail::one_direction(model, left, right, 0, true, EvalDirection::LeftToRight);
    const AlignmentMetrics r2l = detail::one_direction(model, right, left, 1, true, EvalDirection::RightToLeft);
    return 0.5 * (l2r.mrr + r2l.mrr);
}

}  // namespace detail

/// One pass over the train pairs: shuffle, batch, encode both sides plus
/// freshly sampled negatives, sum the weighted loss over each batch,
/// backpropagate, and take one optimizer step per batch.
inline EpochStats train_epoch(Model& model, const std::vector<std::pair<int, int>>& train_pairs,
                              AdamOptimizer& opt, const TrainConfig& cfg, int epoch_index, Rng& epoch_rng,
                              Rng& dropout_rng) {
    EpochStats stats;
    stats.epoch = epoch_index;
    std::vector<std::pair<int, int>> order = train_pairs;
    epoch_rng.shuffle(order);

    const bool learnable = cfg.learn_loss_weights;
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
        const std::size_t b1 = std::min(order.size(), b0 + bs);
        const int batch_index = static_cast<int>(b0 / bs);
        model.params().zero_grads();
        for (std::size_t i = b0; i < b1; ++i) {
            const auto [li, ri] = order[i];
            const auto [neg_left, neg_right] =
                sample_negatives(li, ri, model.kg(0), model.kg(1), cfg.negatives_per_side, epoch_rng);

            Tape tape;
            const EncodeResult e = model.encode(0, li, &dropout_rng);
            const EncodeResult ep = model.encode(1, ri, &dropout_rng);
            Tensor lea, lcon;
            for (std::size_t k = 0; k < neg_left.size(); ++k) {
                const EncodeResult en = model.encode(0, neg_left[k], &dropout_rng);
                const EncodeResult epn = model.encode(1, neg_right[k], &dropout_rng);
                Tensor lea_k = loss_ea(e.entity_repr, ep.entity_repr, en.entity_repr, epn.entity_repr);
                Tensor lcon_k = loss_con(e.context_repr, ep.context_repr, en.context_repr, epn.context_repr);
                lea = lea.defined() ? add(lea, lea_k) : lea_k;
                lcon = lcon.defined() ? add(lcon, lcon_k) : lcon_k;
            }
            const double inv_k = 1.0 / static_cast<double>(neg_left.size());
            lea = scale(lea, inv_k);
            lcon = scale(lcon, inv_k);
            Tensor pair_loss = learnable
                                   ? total_loss(lea, lcon, model.params().get("loss.alpha"),
                                                model.params().get("loss.beta"))
                                   : add(scale(lea, cfg.loss_weights.alpha), scale(lcon, cfg.loss_weights.beta));
            if (!std::isfinite(pair_loss.at(0)))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch_index) + ", batch " +
                                   std::to_string(batch_index) + ", pair ('" +
                                   model.kg(0).entity_ids[static_cast<std::size_t>(li)] + "', '" +
                                   model.kg(1).entity_ids[static_cast<std::size_t>(ri)] + "')");
            stats.loss_ea += lea.at(0);
            stats.loss_con += lcon.at(0);
            stats.total_loss += pair_loss.at(0);
            tape.backward(pair_loss);
        }
        if (cfg.learning_rate > 0.0) opt.step(model.params());
    }
    return stats;
}

struct TrainOutput {
    Checkpoint checkpoint;
    TrainReport report;
};

/// Full training run over the train split of `seeds`, with the last 10% of
/// the (shuffled) train seeds held out for validation MRR and optional early
/// stopping on its plateau. Pass `init_from` to continue from a checkpoint
/// instead of a fresh initialization.
inline TrainOutput train(const TrainConfig& cfg, const MultiModalKG& kg1, const MultiModalKG& kg2,
                         const AlignmentSeedSet& seeds, const Checkpoint* init_from = nullptr,
                         const std::function<void(const EpochStats&)>& on_epoch = nullptr) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetSplit split = split_seeds(seeds, cfg.train_fraction, cfg.rng_seed);
    const detail::IndexPairs train_idx = detail::resolve_pairs(kg1, kg2, split.train);

    std::size_t n_val = static_cast<std::size_t>(
        std::floor(0.1 * static_cast<double>(train_idx.pairs.size()) + 0.5));
    if (n_val >= train_idx.pairs.size()) n_val = train_idx.pairs.size() - 1;
    const std::vector<std::pair<int, int>> fit_pairs(train_idx.pairs.begin(),
                                                     train_idx.pairs.end() - static_cast<std::ptrdiff_t>(n_val));
    const std::vector<std::pair<int, int>> val_pairs(train_idx.pairs.end() - static_cast<std::ptrdiff_t>(n_val),
                                                     train_idx.pairs.end());
    if (fit_pairs.empty()) throw DataError("train: no training pairs left after the validation holdout");

    Model model = init_from ? Model(Checkpoint{init_from->encoder, init_from->vocab, [&] {
                                                   ParamStore ps;
                                                   for (const auto& [name, t] : init_from->params.all())
                                                       ps.add(name, Tensor::from(t.shape(), t.data()));
                                                   return ps;
                                               }(),
                                               init_from->train_fraction, init_from->split_seed,
                                               init_from->order_seed},
                                    kg1, kg2)
                            : Model(cfg.encoder, kg1, kg2, cfg.rng_seed);
    if (cfg.learn_loss_weights && !model.params().has("loss.alpha")) {
        model.params().add("loss.alpha", Tensor::scalar(cfg.loss_weights.alpha));
        model.params().add("loss.beta", Tensor::scalar(cfg.loss_weights.beta));
    }
    AdamOptimizer opt(cfg.learning_rate);

    TrainReport report;
    double best_val = -1.0;
    int since_best = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng epoch_rng(mix_seed(cfg.rng_seed, 0x45504f43ULL + static_cast<std::uint64_t>(epoch)));
        Rng dropout_rng(mix_seed(cfg.rng_seed, 0x44524f50ULL + static_cast<std::uint64_t>(epoch)));
        EpochStats stats = train_epoch(model, fit_pairs, opt, cfg, epoch, epoch_rng, dropout_rng);
        if (!val_pairs.empty()) stats.val_mrr = detail::validation_mrr(model, val_pairs);
        report.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
        if (stats.val_mrr) {
            if (*stats.val_mrr > best_val) {
                best_val = *stats.val_mrr;
                since_best = 0;
            } else if (++since_best >= cfg.effective_patience()) {
                report.stopped_early_at = epoch;
                break;
            }
        }
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    TrainOutput out;
    out.checkpoint = model.to_checkpoint(cfg.train_fraction, cfg.rng_seed);
    out.report = std::move(report);
    return out;
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string variant;
    AlignmentMetrics metrics;
    double delta_mrr = 0.0, delta_hits1 = 0.0, delta_hits10 = 0.0;
};

inline TrainConfig apply_ablation_toggle(TrainConfig cfg, const std::string& toggle) {
    if (toggle == "drop_text") cfg.encoder.drop_text = true;
    else if (toggle == "drop_image") cfg.encoder.drop_image = true;
    else if (toggle == "drop_type_prefix") cfg.encoder.use_type_prefix = false;
    else if (toggle == "drop_context_loss") cfg.loss_weights.beta = 0.0;
    else if (toggle == "replace_modifiable_with_plain") cfg.encoder.plain_attention = true;
    else throw DataError("unknown ablation toggle '" + toggle + "'");
    return cfg;
}

/// Trains and evaluates the baseline plus one variant per toggle under
/// identical seeds; each row carries its metric deltas against the baseline.
inline std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<std::string>& toggles,
                                             const MultiModalKG& kg1, const MultiModalKG& kg2,
                                             const AlignmentSeedSet& seeds) {
    auto run_one = [&](const std::string& name, const TrainConfig& cfg) {
        TrainOutput out = train(cfg, kg1, kg2, seeds);
        Model model(std::move(out.checkpoint), kg1, kg2);
        const DatasetSplit split = split_seeds(seeds, cfg.train_fraction, cfg.rng_seed);
        AblationRow row;
        row.variant = name;
        row.metrics = evaluate(model, split.test, EvalDirection::Averaged);
        return row;
    };
    std::vector<AblationRow> rows;
    rows.push_back(run_one("baseline", base));
    for (const std::string& t : toggles) rows.push_back(run_one(t, apply_ablation_toggle(base, t)));
    for (std::size_t i = 1; i < rows.size(); ++i) {
        rows[i].delta_mrr = rows[i].metrics.mrr - rows[0].metrics.mrr;
        rows[i].delta_hits1 = rows[i].metrics.hits_at_1 - rows[0].metrics.hits_at_1;
        rows[i].delta_hits10 = rows[i].metrics.hits_at_10 - rows[0].metrics.hits_at_10;
    }
    return rows;
}

}  // namespace moalign
