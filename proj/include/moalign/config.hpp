#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "moalign/errors.hpp"

namespace moalign {

enum class Stage { Neighbor, Textual, Visual };

inline char stage_letter(Stage s) {
    switch (s) {
        case Stage::Neighbor: return 'N';
        case Stage::Textual: return 'T';
        case Stage::Visual: return 'V';
    }
    return '?';
}

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Neighbor: return "neighbor";
        case Stage::Textual: return "textual";
        case Stage::Visual: return "visual";
    }
    return "?";
}

/// Parses an order string like "NTV" or "N,T,V" into a stage permutation.
inline std::array<Stage, 3> parse_block_order(const std::string& s) {
    std::array<Stage, 3> order{};
    int n = 0;
    bool seen[3] = {false, false, false};
    for (const char raw : s) {
        if (raw == ',' || raw == ' ' || raw == '-' || raw == '>') continue;
        Stage st;
        switch (raw) {
            case 'N': case 'n': st = Stage::Neighbor; break;
            case 'T': case 't': st = Stage::Textual; break;
            case 'V': case 'v': st = Stage::Visual; break;
            default: throw DataError("block_order: unknown stage letter '" + std::string(1, raw) + "'");
        }
        if (n >= 3 || seen[static_cast<int>(st)])
            throw DataError("block_order: '" + s + "' must name each of N, T, V exactly once");
        seen[static_cast<int>(st)] = true;
        order[static_cast<std::size_t>(n++)] = st;
    }
    if (n != 3) throw DataError("block_order: '" + s + "' must name each of N, T, V exactly once");
    return order;
}

inline std::string block_order_string(const std::array<Stage, 3>& order) {
    std::string s;
    for (const Stage st : order) s += stage_letter(st);
    return s;
}

struct EncoderConfig {
    int d = 64;
    int num_heads = 4;
    int num_blocks = 2;
    int ffn_hidden = 256;
    double dropout_p = 0.35;
    std::array<Stage, 3> block_order = {Stage::Neighbor, Stage::Textual, Stage::Visual};
    int max_neighbors = 8;
    int max_attributes = 8;
    int patch_len = 4;
    int image_input_len = 16;
    double lambda = 0.02;  // truncated-normal stddev; also the Eq.-1 scale
    double ln_eps = 1e-5;
    bool neighbor_kv_entities_only = false;
    bool shared_prefix = false;
    bool use_type_prefix = true;
    bool plain_attention = false;  // ablation: ignore the mask entirely
    bool drop_text = false;
    bool drop_image = false;

    int head_dim() const { return d / num_heads; }

    void validate() const {
        if (d <= 0 || num_heads <= 0 || num_blocks <= 0 || ffn_hidden <= 0)
            throw DataError("encoder config: dimensions and counts must be positive");
        if (d % num_heads != 0)
            throw DataError("encoder config: d=" + std::to_string(d) + " not divisible by num_heads=" +
                            std::to_string(num_heads));
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw DataError("encoder config: dropout_p must lie in [0, 1)");
        if (max_neighbors <= 0 || max_attributes <= 0)
            throw DataError("encoder config: truncation limits must be positive");
        if (patch_len <= 0 || image_input_len <= 0 || image_input_len % patch_len != 0)
            throw DataError("encoder config: image_input_len must be a positive multiple of patch_len");
        if (lambda <= 0.0) throw DataError("encoder config: lambda must be positive");
    }
};

struct LossWeights {
    double alpha = 5.0;
    double beta = 2.0;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0 || alpha + beta <= 0.0)
            throw DataError("loss weights: need alpha >= 0, beta >= 0, alpha + beta > 0");
    }
};

struct TrainConfig {
    int epochs = 200;
    int batch_size = 32;
    double learning_rate = 1e-3;
    int negatives_per_side = 1;
    std::uint64_t rng_seed = 42;
    LossWeights loss_weights;
    EncoderConfig encoder;
    int early_stop_patience = 0;  // 0 = defaults to `epochs` (effectively off)
    double train_fraction = 0.2;
    bool learn_loss_weights = false;

    int effective_patience() const { return early_stop_patience > 0 ? early_stop_patience : epochs; }

    void validate() const {
        if (epochs < 0) throw DataError("train config: epochs must be >= 0");
        if (batch_size <= 0 || negatives_per_side <= 0)
            throw DataError("train config: batch_size and negatives_per_side must be positive");
        if (learning_rate < 0.0) throw DataError("train config: learning_rate must be >= 0");
        if (early_stop_patience < 0) throw DataError("train config: early_stop_patience must be >= 0");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw DataError("train config: train_fraction must lie in (0, 1)");
        loss_weights.validate();
        encoder.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw DataError("config: bad boolean for '" + key + "': " + v);
}

}  // namespace detail

/// Flat `key = value` config file mirroring TrainConfig. '#' starts a comment;
/// unknown keys are errors.
inline TrainConfig parse_train_config(std::istream& in, const std::string& origin) {
    TrainConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const std::size_t eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw DataError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(trimmed.substr(0, eq));
        const std::string val = detail::trim(trimmed.substr(eq + 1));
        try {
            if (key == "epochs") cfg.epochs = std::stoi(val);
            else if (key == "batch_size") cfg.batch_size = std::stoi(val);
            else if (key == "learning_rate") cfg.learning_rate = std::stod(val);
            else if (key == "negatives_per_side") cfg.negatives_per_side = std::stoi(val);
            else if (key == "rng_seed") cfg.rng_seed = std::stoull(val);
            else if (key == "alpha") cfg.loss_weights.alpha = std::stod(val);
            else if (key == "beta") cfg.loss_weights.beta = std::stod(val);
            else if (key == "early_stop_patience") cfg.early_stop_patience = std::stoi(val);
            else if (key == "train_fraction") cfg.train_fraction = std::stod(val);
            else if (key == "learn_loss_weights") cfg.learn_loss_weights = detail::parse_bool(val, key);
            else if (key == "d") cfg.encoder.d = std::stoi(val);
            else if (key == "num_heads") cfg.encoder.num_heads = std::stoi(val);
            else if (key == "num_blocks") cfg.encoder.num_blocks = std::stoi(val);
            else if (key == "ffn_hidden") cfg.encoder.ffn_hidden = std::stoi(val);
            else if (key == "dropout_p") cfg.encoder.dropout_p = std::stod(val);
            else if (key == "block_order") cfg.encoder.block_order = parse_block_order(val);
            else if (key == "max_neighbors") cfg.encoder.max_neighbors = std::stoi(val);
            else if (key == "max_attributes") cfg.encoder.max_attributes = std::stoi(val);
            else if (key == "patch_len") cfg.encoder.patch_len = std::stoi(val);
            else if (key == "image_input_len") cfg.encoder.image_input_len = std::stoi(val);
            else if (key == "lambda") cfg.encoder.lambda = std::stod(val);
            else if (key == "neighbor_kv") {
                if (val == "entities-only") cfg.encoder.neighbor_kv_entities_only = true;
                else if (val == "all") cfg.encoder.neighbor_kv_entities_only = false;
                else throw DataError("config: neighbor_kv must be 'all' or 'entities-only'");
            }
            else if (key == "shared_prefix") cfg.encoder.shared_prefix = detail::parse_bool(val, key);
            else if (key == "use_type_prefix") cfg.encoder.use_type_prefix = detail::parse_bool(val, key);
            else if (key == "plain_attention") cfg.encoder.plain_attention = detail::parse_bool(val, key);
            else if (key == "drop_text") cfg.encoder.drop_text = detail::parse_bool(val, key);
            else if (key == "drop_image") cfg.encoder.drop_image = detail::parse_bool(val, key);
            else throw DataError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw DataError(origin + ":" + std::to_string(lineno) + ": bad value for '" + key + "': " + val);
        } catch (const std::out_of_range&) {
            throw DataError(origin + ":" + std::to_string(lineno) + ": value out of range for '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config '" + path + "'");
    return parse_train_config(in, path);
}

}  // namespace moalign
