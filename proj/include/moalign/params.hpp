#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moalign/config.hpp"
#include "moalign/kg.hpp"
#include "moalign/rng.hpp"
#include "moalign/tensor.hpp"

namespace moalign {

/// Joint vocabulary over a KG pair. Entity and relation rows are the two KGs'
/// dense indices laid side by side; types are merged by id string so aligned
/// entities share type rows.
struct PairVocab {
    int n_entities_kg1 = 0, n_entities_kg2 = 0;
    int n_relations_kg1 = 0, n_relations_kg2 = 0;
    std::vector<std::string> type_ids;            // merged, index 0 = untyped
    std::vector<int> type_row_kg1, type_row_kg2;  // per-KG type index -> merged row

    static PairVocab build(const MultiModalKG& kg1, const MultiModalKG& kg2) {
        PairVocab v;
        v.n_entities_kg1 = kg1.entity_count();
        v.n_entities_kg2 = kg2.entity_count();
        v.n_relations_kg1 = static_cast<int>(kg1.relation_ids.size());
        v.n_relations_kg2 = static_cast<int>(kg2.relation_ids.size());
        std::map<std::string, int> merged;
        auto merge = [&](const std::vector<std::string>& ids, std::vector<int>& rows) {
            rows.resize(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                auto it = merged.find(ids[i]);
                if (it == merged.end()) it = merged.emplace(ids[i], static_cast<int>(merged.size())).first;
                rows[i] = it->second;
            }
        };
        // seed with untyped so it keeps row 0
        merged.emplace("untyped", 0);
        merge(kg1.type_ids, v.type_row_kg1);
        merge(kg2.type_ids, v.type_row_kg2);
        v.type_ids.resize(merged.size());
        for (const auto& [id, row] : merged) v.type_ids[static_cast<std::size_t>(row)] = id;
        return v;
    }

    int type_rows() const { return static_cast<int>(type_ids.size()); }

    int type_row(int side, int type_idx) const {
        return side == 0 ? type_row_kg1[static_cast<std::size_t>(type_idx)]
                         : type_row_kg2[static_cast<std::size_t>(type_idx)];
    }
};

/// Name -> tensor map for all trainable parameters. Ordered so that
/// optimizers and serializers walk it deterministically.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        auto [it, inserted] = params_.emplace(name, std::move(t));
        if (!inserted) throw DataError("param store: duplicate parameter '" + name + "'");
        return it->second;
    }

    Tensor& get(const std::string& name) {
        const auto it = params_.find(name);
        if (it == params_.end()) throw DataError("param store: unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        const auto it = params_.find(name);
        if (it == params_.end()) throw DataError("param store: unknown parameter '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Tensor>& all() { return params_; }
    const std::map<std::string, Tensor>& all() const { return params_; }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

private:
    std::map<std::string, Tensor> params_;
};

namespace detail {

inline Tensor init_trunc_normal(std::vector<std::size_t> shape, double stddev, Rng& rng) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (double& x : data) x = rng.truncated_normal(stddev, 2.0 * stddev);
    return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace detail

/// Builds the full trainable parameter set. Weights use the truncated normal
/// with deviation lambda; layer-norm gain/bias start at 1/0; attention and
/// FFN prefixes start as copies of the type-embedding table. Entity, relation
/// and text content embeddings are fixed pseudo-embeddings and so appear
/// nowhere here.
inline ParamStore init_params(const EncoderConfig& cfg, const PairVocab& vocab, std::uint64_t seed) {
    cfg.validate();
    ParamStore ps;
    Rng rng(seed);
    const auto d = static_cast<std::size_t>(cfg.d);
    const int n_t = vocab.type_rows();
    const double lam = cfg.lambda;

    Tensor type_emb = detail::init_trunc_normal({static_cast<std::size_t>(n_t), d}, lam, rng);
    ps.add("embed.type", type_emb);
    ps.add("embed.cls", detail::init_trunc_normal({1, d}, lam, rng));
    ps.add("embed.modality", detail::init_trunc_normal({4, d}, lam, rng));
    ps.add("embed.structure",
           detail::init_trunc_normal({static_cast<std::size_t>(2 * cfg.max_neighbors + 2), d}, lam, rng));
    ps.add("embed.image_proj",
           detail::init_trunc_normal({static_cast<std::size_t>(cfg.image_input_len), d}, lam, rng));
    ps.add("fuse.text", detail::init_trunc_normal({2 * d, d}, lam, rng));
    ps.add("fuse.image", detail::init_trunc_normal({2 * d, d}, lam, rng));

    auto type_copy = [&type_emb] { return Tensor::from(type_emb.shape(), type_emb.data()); };

    if (cfg.shared_prefix && cfg.use_type_prefix) {
        ps.add("prefix.pk", type_copy());
        ps.add("prefix.pv", type_copy());
    }
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const std::string bp = "block" + std::to_string(b) + ".";
        for (const Stage st : {Stage::Neighbor, Stage::Textual, Stage::Visual}) {
            const std::string sp = bp + stage_name(st) + ".";
            ps.add(sp + "wq", detail::init_trunc_normal({d, d}, lam, rng));
            ps.add(sp + "wk", detail::init_trunc_normal({d, d}, lam, rng));
            ps.add(sp + "wv", detail::init_trunc_normal({d, d}, lam, rng));
            ps.add(sp + "wo", detail::init_trunc_normal({d, d}, lam, rng));
            if (!cfg.shared_prefix && cfg.use_type_prefix) {
                ps.add(sp + "pk", type_copy());
                ps.add(sp + "pv", type_copy());
            }
        }
        ps.add(bp + "ffn.wk", detail::init_trunc_normal({d, static_cast<std::size_t>(cfg.ffn_hidden)}, lam, rng));
        ps.add(bp + "ffn.wv", detail::init_trunc_normal({static_cast<std::size_t>(cfg.ffn_hidden), d}, lam, rng));
        if (cfg.use_type_prefix) {
            ps.add(bp + "ffn.phik", type_copy());
            ps.add(bp + "ffn.phiv", type_copy());
        }
        ps.add(bp + "ln.gain", Tensor::full({d}, 1.0));
        ps.add(bp + "ln.bias", Tensor::zeros({d}));
    }
    return ps;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON {config, vocab, params} with sorted keys, so
// identical runs serialize byte-identically.
// ---------------------------------------------------------------------------

inline nlohmann::json encoder_config_json(const EncoderConfig& c) {
    return nlohmann::json{{"d", c.d},
                          {"num_heads", c.num_heads},
                          {"num_blocks", c.num_blocks},
                          {"ffn_hidden", c.ffn_hidden},
                          {"dropout_p", c.dropout_p},
                          {"block_order", block_order_string(c.block_order)},
                          {"max_neighbors", c.max_neighbors},
                          {"max_attributes", c.max_attributes},
                          {"patch_len", c.patch_len},
                          {"image_input_len", c.image_input_len},
                          {"lambda", c.lambda},
                          {"neighbor_kv_entities_only", c.neighbor_kv_entities_only},
                          {"shared_prefix", c.shared_prefix},
                          {"use_type_prefix", c.use_type_prefix},
                          {"plain_attention", c.plain_attention},
                          {"drop_text", c.drop_text},
                          {"drop_image", c.drop_image}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d = j.at("d").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.ffn_hidden = j.at("ffn_hidden").get<int>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.block_order = parse_block_order(j.at("block_order").get<std::string>());
    c.max_neighbors = j.at("max_neighbors").get<int>();
    c.max_attributes = j.at("max_attributes").get<int>();
    c.patch_len = j.at("patch_len").get<int>();
    c.image_input_len = j.at("image_input_len").get<int>();
    c.lambda = j.at("lambda").get<double>();
    c.neighbor_kv_entities_only = j.at("neighbor_kv_entities_only").get<bool>();
    c.shared_prefix = j.at("shared_prefix").get<bool>();
    c.use_type_prefix = j.at("use_type_prefix").get<bool>();
    c.plain_attention = j.at("plain_attention").get<bool>();
    c.drop_text = j.at("drop_text").get<bool>();
    c.drop_image = j.at("drop_image").get<bool>();
    c.validate();
    return c;
}

struct Checkpoint {
    EncoderConfig encoder;
    PairVocab vocab;
    ParamStore params;
    double train_fraction = 0.2;  // split recipe, so eval reproduces the test set
    std::uint64_t split_seed = 42;
    std::uint64_t order_seed = 0;  // frozen neighbor reference order
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, t] : ck.params.all()) {
        params[name] = {{"shape", t.shape()}, {"data", t.data()}};
    }
    return nlohmann::json{{"format", "moalign-checkpoint"},
                          {"version", 1},
                          {"encoder", encoder_config_json(ck.encoder)},
                          {"order_seed", ck.order_seed},
                          {"split", {{"train_fraction", ck.train_fraction}, {"split_seed", ck.split_seed}}},
                          {"vocab",
                           {{"n_entities_kg1", ck.vocab.n_entities_kg1},
                            {"n_entities_kg2", ck.vocab.n_entities_kg2},
                            {"n_relations_kg1", ck.vocab.n_relations_kg1},
                            {"n_relations_kg2", ck.vocab.n_relations_kg2},
                            {"type_ids", ck.vocab.type_ids},
                            {"type_row_kg1", ck.vocab.type_row_kg1},
                            {"type_row_kg2", ck.vocab.type_row_kg2}}},
                          {"params", std::move(params)}};
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << checkpoint_to_json(ck).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint '" + path + "': " + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != "moalign-checkpoint")
            throw DataError("checkpoint '" + path + "': unknown format tag");
        if (j.at("version").get<int>() != 1)
            throw DataError("checkpoint '" + path + "': unsupported version");
        Checkpoint ck;
        ck.encoder = encoder_config_from_json(j.at("encoder"));
        ck.order_seed = j.at("order_seed").get<std::uint64_t>();
        ck.train_fraction = j.at("split").at("train_fraction").get<double>();
        ck.split_seed = j.at("split").at("split_seed").get<std::uint64_t>();
        const auto& v = j.at("vocab");
        ck.vocab.n_entities_kg1 = v.at("n_entities_kg1").get<int>();
        ck.vocab.n_entities_kg2 = v.at("n_entities_kg2").get<int>();
        ck.vocab.n_relations_kg1 = v.at("n_relations_kg1").get<int>();
        ck.vocab.n_relations_kg2 = v.at("n_relations_kg2").get<int>();
        ck.vocab.type_ids = v.at("type_ids").get<std::vector<std::string>>();
        ck.vocab.type_row_kg1 = v.at("type_row_kg1").get<std::vector<int>>();
        ck.vocab.type_row_kg2 = v.at("type_row_kg2").get<std::vector<int>>();
        for (const auto& [name, pj] : j.at("params").items()) {
            auto shape = pj.at("shape").get<std::vector<std::size_t>>();
            auto data = pj.at("data").get<std::vector<double>>();
            if (detail::shape_numel(shape) != data.size())
                throw DataError("checkpoint '" + path + "': parameter '" + name + "' shape/data mismatch");
            ck.params.add(name, Tensor::from(std::move(shape), std::move(data)));
        }
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint '" + path + "': " + e.what());
    }
}

/// Validates a loaded parameter set against the shapes init_params would
/// produce for this config + vocab.
inline void validate_checkpoint_shapes(const Checkpoint& ck) {
    ParamStore expect = init_params(ck.encoder, ck.vocab, 0);
    if (expect.all().size() != ck.params.all().size())
        throw DataError("checkpoint: expected " + std::to_string(expect.all().size()) + " parameters, found " +
                        std::to_string(ck.params.all().size()));
    for (const auto& [name, t] : expect.all()) {
        if (!ck.params.has(name)) throw DataError("checkpoint: missing parameter '" + name + "'");
        if (ck.params.get(name).shape() != t.shape())
            throw DataError("checkpoint: parameter '" + name + "' has shape " +
                            detail::shape_str(ck.params.get(name).shape()) + ", expected " +
                            detail::shape_str(t.shape()));
    }
}

}  // namespace moalign
