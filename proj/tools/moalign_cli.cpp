#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moalign/moalign.hpp"

namespace {

using namespace moalign;

struct GlobalOpts {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    bool verbose = false;
};

TrainConfig resolve_config(const GlobalOpts& g) {
    TrainConfig cfg = g.config_path.empty() ? TrainConfig{} : load_train_config(g.config_path);
    if (g.seed) cfg.rng_seed = *g.seed;
    cfg.validate();
    return cfg;
}

struct SynthOpts {
    int entities = 100;
    int types = 5;
    int relations = 4;
    int text_attrs = 2;
    int image_attrs = 1;
    int image_dim = 16;
    double noise = 0.05;
    std::string out;
};

void add_synth_options(CLI::App* cmd, SynthOpts& o, bool require_out) {
    cmd->add_option("--entities", o.entities, "entities per KG");
    cmd->add_option("--types", o.types, "entity types");
    cmd->add_option("--relations", o.relations, "entity relations");
    cmd->add_option("--text-attrs", o.text_attrs, "text attributes per entity");
    cmd->add_option("--image-attrs", o.image_attrs, "image attributes per entity");
    cmd->add_option("--image-dim", o.image_dim, "raw image vector length");
    cmd->add_option("--noise", o.noise, "image noise sigma planted between the KGs");
    auto* out = cmd->add_option("--out", o.out, "output directory");
    if (require_out) out->required();
}

SynthResult run_synth(const SynthOpts& o, std::uint64_t seed) {
    SynthParams p;
    p.n_entities = o.entities;
    p.n_types = o.types;
    p.n_relations = o.relations;
    p.n_text_attrs = o.text_attrs;
    p.n_image_attrs = o.image_attrs;
    p.image_dim = o.image_dim;
    p.noise_sigma = o.noise;
    p.seed = seed;
    Rng rng(seed);
    return synth_paired_kgs(p, rng);
}

BenchmarkData obtain_data(const std::string& data_dir, bool use_synth, const SynthOpts& synth_opts,
                          std::uint64_t seed) {
    if (use_synth != data_dir.empty())
        throw DataError("exactly one of --data DIR or --synth must be given");
    if (use_synth) {
        const SynthResult s = run_synth(synth_opts, seed);
        return {std::move(s.kg1), std::move(s.kg2), std::move(s.truth)};
    }
    return load_benchmark_dir(data_dir);
}

nlohmann::json metrics_json(const AlignmentMetrics& m) {
    return nlohmann::json{{"mrr", m.mrr},
                          {"hits1", m.hits_at_1},
                          {"hits10", m.hits_at_10},
                          {"direction", direction_name(m.direction)},
                          {"n_queries", m.n_queries}};
}

const char* source_kind_name(TokenSource::Kind k) {
    switch (k) {
        case TokenSource::Kind::Entity: return "entity";
        case TokenSource::Kind::Relation: return "relation";
        case TokenSource::Kind::TextValue: return "text_value";
        case TokenSource::Kind::ImageValue: return "image_value";
        case TokenSource::Kind::Type: return "type";
        case TokenSource::Kind::Cls: return "cls";
    }
    return "?";
}

std::string resolve_source_id(const TokenSource& s, const MultiModalKG& kg) {
    switch (s.kind) {
        case TokenSource::Kind::Entity: return kg.entity_ids[static_cast<std::size_t>(s.index)];
        case TokenSource::Kind::Relation: return kg.relation_ids[static_cast<std::size_t>(s.index)];
        case TokenSource::Kind::TextValue: return kg.text_attrs[static_cast<std::size_t>(s.index)].value;
        case TokenSource::Kind::ImageValue:
            return kg.relation_ids[static_cast<std::size_t>(
                       kg.image_attrs[static_cast<std::size_t>(s.index)].attribute)] +
                   "#" + std::to_string(s.index);
        case TokenSource::Kind::Type: return kg.type_ids[static_cast<std::size_t>(s.index)];
        case TokenSource::Kind::Cls: return "[CLS]";
    }
    return "?";
}

int cmd_synth(const GlobalOpts& g, const SynthOpts& o) {
    const std::uint64_t seed = g.seed.value_or(42);
    SynthParams p;
    p.n_entities = o.entities;
    p.n_types = o.types;
    p.n_relations = o.relations;
    p.n_text_attrs = o.text_attrs;
    p.n_image_attrs = o.image_attrs;
    p.image_dim = o.image_dim;
    p.noise_sigma = o.noise;
    p.seed = seed;
    Rng rng(seed);
    const SynthResult data = synth_paired_kgs(p, rng);
    write_synth_output(data, p, o.out);
    std::cout << "wrote " << o.out << ": " << data.kg1.entity_count() << " entities/KG, "
              << data.kg1.relational.size() << " relational triplets, " << data.truth.pairs.size()
              << " planted seeds\n";
    return 0;
}

int cmd_train(const GlobalOpts& g, const std::string& data_dir, bool use_synth, const SynthOpts& synth_opts,
              const std::string& save_to, const std::string& report_path, const std::string& init_from) {
    TrainConfig cfg = resolve_config(g);
    const BenchmarkData data = obtain_data(data_dir, use_synth, synth_opts, cfg.rng_seed);

    std::optional<Checkpoint> init;
    if (!init_from.empty()) {
        init = load_checkpoint(init_from);
        validate_checkpoint_shapes(*init);
    }
    const auto on_epoch = [&](const EpochStats& s) {
        if (!g.verbose) return;
        std::cerr << "epoch " << s.epoch << "  loss " << s.total_loss << "  L_EA " << s.loss_ea << "  L_Con "
                  << s.loss_con;
        if (s.val_mrr) std::cerr << "  val_mrr " << *s.val_mrr;
        std::cerr << '\n';
    };
    const TrainOutput out = train(cfg, data.kg1, data.kg2, data.seeds, init ? &*init : nullptr, on_epoch);
    save_checkpoint(out.checkpoint, save_to);
    if (!report_path.empty()) write_report_jsonl(out.report, report_path);
    std::cout << "trained " << out.report.epochs.size() << " epochs";
    if (out.report.stopped_early_at > 0) std::cout << " (early stop at " << out.report.stopped_early_at << ")";
    if (!out.report.epochs.empty()) {
        std::cout << ", final loss " << out.report.epochs.back().total_loss;
        if (out.report.epochs.back().val_mrr) std::cout << ", val MRR " << *out.report.epochs.back().val_mrr;
    }
    std::cout << ", wall " << out.report.wall_seconds << " s\n";
    std::cout << "checkpoint: " << save_to << '\n';
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& direction, const std::string& pool, const std::string& which_seeds) {
    (void)g;
    Checkpoint ck = load_checkpoint(checkpoint_path);
    validate_checkpoint_shapes(ck);
    const BenchmarkData data = load_benchmark_dir(data_dir);
    const double train_fraction = ck.train_fraction;
    const std::uint64_t split_seed = ck.split_seed;
    Model model(std::move(ck), data.kg1, data.kg2);

    AlignmentSeedSet eval_seeds;
    if (which_seeds == "test") {
        eval_seeds = split_seeds(data.seeds, train_fraction, split_seed).test;
    } else if (which_seeds == "all") {
        eval_seeds = data.seeds;
    } else {
        throw DataError("--seeds must be 'test' or 'all'");
    }
    if (pool != "test" && pool != "all") throw DataError("--pool must be 'test' or 'all'");
    const AlignmentMetrics m = evaluate(model, eval_seeds, parse_direction(direction), pool == "all");
    std::cout << metrics_json(m).dump() << '\n';
    return 0;
}

int cmd_ablate(const GlobalOpts& g, const std::string& data_dir, bool use_synth, const SynthOpts& synth_opts,
               const std::vector<std::string>& toggles, const std::string& json_out) {
    TrainConfig cfg = resolve_config(g);
    const BenchmarkData data = obtain_data(data_dir, use_synth, synth_opts, cfg.rng_seed);
    const std::vector<AblationRow> rows = run_ablation(cfg, toggles, data.kg1, data.kg2, data.seeds);

    std::printf("%-32s %8s %8s %8s %8s %8s %8s\n", "variant", "MRR", "Hits@1", "Hits@10", "dMRR", "dH@1",
                "dH@10");
    for (const auto& r : rows)
        std::printf("%-32s %8.4f %8.4f %8.4f %+8.4f %+8.4f %+8.4f\n", r.variant.c_str(), r.metrics.mrr,
                    r.metrics.hits_at_1, r.metrics.hits_at_10, r.delta_mrr, r.delta_hits1, r.delta_hits10);
    if (!json_out.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows)
            j.push_back({{"variant", r.variant},
                         {"metrics", metrics_json(r.metrics)},
                         {"delta_mrr", r.delta_mrr},
                         {"delta_hits1", r.delta_hits1},
                         {"delta_hits10", r.delta_hits10}});
        std::ofstream out(json_out, std::ios::binary);
        if (!out) throw DataError("cannot write '" + json_out + "'");
        out << j.dump(2) << '\n';
    }
    return 0;
}

int cmd_gradcheck(const GlobalOpts& g) {
    const std::uint64_t seed = g.seed.value_or(3);
    const double tolerance = 1e-4;
    bool ok = true;
    auto report = [&](const std::vector<GradCheckItem>& items) {
        for (const auto& item : items) {
            const bool pass = item.max_rel_error < tolerance;
            ok = ok && pass;
            std::printf("%-34s %.3e  %s\n", item.name.c_str(), item.max_rel_error, pass ? "ok" : "FAIL");
        }
    };
    std::puts("primitive audit:");
    report(run_gradient_audit(seed));
    std::puts("full-loss audit (3 pairs, d=8, L=1), per parameter:");
    report(run_full_loss_audit(seed));
    std::printf("gradcheck %s (tolerance %.0e)\n", ok ? "PASS" : "FAIL", tolerance);
    return ok ? 0 : 3;
}

int cmd_dump_sequences(const GlobalOpts& g, const std::string& data_dir, const std::string& entity_id,
                       int side, const std::string& out_path) {
    TrainConfig cfg = resolve_config(g);
    const BenchmarkData data = load_benchmark_dir(data_dir);
    Model model(cfg.encoder, data.kg1, data.kg2, cfg.rng_seed);
    const MultiModalKG& kg = model.kg(side);

    std::vector<int> entities;
    if (entity_id.empty()) {
        entities.resize(static_cast<std::size_t>(kg.entity_count()));
        for (int e = 0; e < kg.entity_count(); ++e) entities[static_cast<std::size_t>(e)] = e;
    } else {
        entities.push_back(kg.entity_or_throw(entity_id));
    }

    nlohmann::json dump = nlohmann::json::array();
    for (const int e : entities) {
        const SequencePlan& plan = model.plan(side, e);
        const MaskMatrix& mask = model.mask(side, e);
        nlohmann::json tokens = nlohmann::json::array();
        for (std::size_t i = 0; i < plan.tokens.size(); ++i) {
            const TokenInfo& t = plan.tokens[i];
            tokens.push_back({{"position", i},
                              {"type", token_type_name(t.type_tag)},
                              {"modality_code", t.modality_code},
                              {"structure_code", t.structure_code},
                              {"source_kind", source_kind_name(t.source.kind)},
                              {"source_id", resolve_source_id(t.source, kg)}});
        }
        nlohmann::json mask_rows = nlohmann::json::array();
        for (int i = 0; i < mask.n; ++i) {
            std::string row(static_cast<std::size_t>(mask.n), '0');
            for (int j = 0; j < mask.n; ++j)
                if (mask.bit(i, j)) row[static_cast<std::size_t>(j)] = '1';
            mask_rows.push_back(row);
        }
        dump.push_back({{"entity", kg.entity_ids[static_cast<std::size_t>(e)]},
                        {"side", side == 0 ? "kg1" : "kg2"},
                        {"tokens", std::move(tokens)},
                        {"mask", std::move(mask_rows)}});
    }
    if (out_path.empty()) {
        std::cout << dump.dump(2) << '\n';
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw DataError("cannot write '" + out_path + "'");
        out << dump.dump(2) << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoAlign: multi-modal entity alignment encoder toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--seed", g.seed, "global RNG seed (overrides the config file)");
    app.add_option("--config", g.config_path, "key = value config file");
    app.add_flag("--verbose", g.verbose, "progress output on stderr");

    auto* synth_cmd = app.add_subcommand("synth", "generate a paired benchmark with planted alignment");
    SynthOpts synth_opts;
    add_synth_options(synth_cmd, synth_opts, true);

    auto* train_cmd = app.add_subcommand("train", "train the alignment encoder");
    std::string train_data, save_to, report_path, init_from;
    bool train_synth = false;
    SynthOpts train_synth_opts;
    train_cmd->add_option("--data", train_data, "benchmark directory (kg1/, kg2/, seeds.tsv)");
    train_cmd->add_flag("--synth", train_synth, "generate a synthetic pair instead of loading --data");
    add_synth_options(train_cmd, train_synth_opts, false);
    train_cmd->add_option("--save-to", save_to, "checkpoint output path")->required();
    train_cmd->add_option("--report", report_path, "JSONL per-epoch report path");
    train_cmd->add_option("--init-from", init_from, "warm-start checkpoint (keeps its encoder config)");

    auto* eval_cmd = app.add_subcommand("eval", "rank test seeds and report MRR / Hits@k");
    std::string eval_ckpt, eval_data, eval_dir = "averaged", eval_pool = "test", eval_seed_set = "test";
    eval_cmd->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
    eval_cmd->add_option("--data", eval_data, "benchmark directory")->required();
    eval_cmd->add_option("--direction", eval_dir, "l2r | r2l | averaged");
    eval_cmd->add_option("--pool", eval_pool, "candidate pool: test | all");
    eval_cmd->add_option("--seeds", eval_seed_set, "which seeds to evaluate: test | all");

    auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate toggled variants");
    std::string ablate_data, ablate_json;
    bool ablate_synth = false;
    SynthOpts ablate_synth_opts;
    std::vector<std::string> toggles = {"drop_text", "drop_image", "drop_type_prefix", "drop_context_loss",
                                        "replace_modifiable_with_plain"};
    ablate_cmd->add_option("--data", ablate_data, "benchmark directory");
    ablate_cmd->add_flag("--synth", ablate_synth, "generate a synthetic pair instead of loading --data");
    add_synth_options(ablate_cmd, ablate_synth_opts, false);
    ablate_cmd->add_option("--toggles", toggles, "variants to run")->delimiter(',');
    ablate_cmd->add_option("--json", ablate_json, "write the table as JSON");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference audit of gradients");

    auto* dump_cmd = app.add_subcommand("dump-sequences", "dump token sequences and masks as JSON");
    std::string dump_data, dump_entity, dump_out;
    int dump_side = 0;
    dump_cmd->add_option("--data", dump_data, "benchmark directory")->required();
    dump_cmd->add_option("--entity", dump_entity, "entity id (default: all)");
    dump_cmd->add_option("--side", dump_side, "0 = kg1, 1 = kg2")->check(CLI::Range(0, 1));
    dump_cmd->add_option("--out", dump_out, "output path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(g, synth_opts);
        if (train_cmd->parsed())
            return cmd_train(g, train_data, train_synth, train_synth_opts, save_to, report_path, init_from);
        if (eval_cmd->parsed()) return cmd_eval(g, eval_ckpt, eval_data, eval_dir, eval_pool, eval_seed_set);
        if (ablate_cmd->parsed())
            return cmd_ablate(g, ablate_data, ablate_synth, ablate_synth_opts, toggles, ablate_json);
        if (grad_cmd->parsed()) return cmd_gradcheck(g);
        if (dump_cmd->parsed()) return cmd_dump_sequences(g, dump_data, dump_entity, dump_side, dump_out);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
