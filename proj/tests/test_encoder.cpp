#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "moalign/encoder.hpp"
#include "moalign/synth.hpp"

using namespace moalign;
using Catch::Approx;

namespace {

Tensor randn(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    const std::size_t n = detail::shape_numel(shape);
    std::vector<double> data(n);
    for (double& x : data) x = rng.normal(0.0, scale);
    return Tensor::from(std::move(shape), std::move(data));
}

// Scalar-loop single-head attention: softmax((q k^T + m) / sqrt(dk)) v.
std::vector<double> naive_attention(const std::vector<double>& q, int qr, const std::vector<double>& k,
                                    const std::vector<double>& v, int kr, int dk, int dv,
                                    const std::vector<double>& additive) {
    std::vector<double> out(static_cast<std::size_t>(qr * dv), 0.0);
    for (int i = 0; i < qr; ++i) {
        std::vector<double> scores(static_cast<std::size_t>(kr));
        for (int j = 0; j < kr; ++j) {
            double dot = 0.0;
            for (int p = 0; p < dk; ++p) dot += q[static_cast<std::size_t>(i * dk + p)] * k[static_cast<std::size_t>(j * dk + p)];
            scores[static_cast<std::size_t>(j)] =
                (dot + additive[static_cast<std::size_t>(i * kr + j)]) / std::sqrt(static_cast<double>(dk));
        }
        double mx = scores[0];
        for (const double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        std::vector<double> w(scores.size());
        for (std::size_t j = 0; j < scores.size(); ++j) {
            w[j] = std::exp(scores[j] - mx);
            z += w[j];
        }
        for (std::size_t j = 0; j < scores.size(); ++j) w[j] /= z;
        for (int j = 0; j < kr; ++j)
            for (int p = 0; p < dv; ++p)
                out[static_cast<std::size_t>(i * dv + p)] += w[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j * dv + p)];
    }
    return out;
}

// Scalar-loop plain multi-head attention, full visibility, no prefixes.
std::vector<double> naive_mha(const std::vector<double>& q, int qr, const std::vector<double>& kv, int kr,
                              int d, int heads, const std::vector<double>& wq, const std::vector<double>& wk,
                              const std::vector<double>& wv, const std::vector<double>& wo) {
    const int dn = d / heads;
    auto project = [d](const std::vector<double>& x, int rows, const std::vector<double>& w) {
        std::vector<double> out(static_cast<std::size_t>(rows * d), 0.0);
        for (int i = 0; i < rows; ++i)
            for (int p = 0; p < d; ++p)
                for (int j = 0; j < d; ++j)
                    out[static_cast<std::size_t>(i * d + j)] +=
                        x[static_cast<std::size_t>(i * d + p)] * w[static_cast<std::size_t>(p * d + j)];
        return out;
    };
    const std::vector<double> qf = project(q, qr, wq);
    const std::vector<double> kf = project(kv, kr, wk);
    const std::vector<double> vf = project(kv, kr, wv);
    std::vector<double> cat(static_cast<std::size_t>(qr * d), 0.0);
    const std::vector<double> zeros(static_cast<std::size_t>(qr * kr), 0.0);
    for (int h = 0; h < heads; ++h) {
        std::vector<double> qh(static_cast<std::size_t>(qr * dn)), kh(static_cast<std::size_t>(kr * dn)),
            vh(static_cast<std::size_t>(kr * dn));
        for (int i = 0; i < qr; ++i)
            for (int p = 0; p < dn; ++p) qh[static_cast<std::size_t>(i * dn + p)] = qf[static_cast<std::size_t>(i * d + h * dn + p)];
        for (int i = 0; i < kr; ++i)
            for (int p = 0; p < dn; ++p) {
                kh[static_cast<std::size_t>(i * dn + p)] = kf[static_cast<std::size_t>(i * d + h * dn + p)];
                vh[static_cast<std::size_t>(i * dn + p)] = vf[static_cast<std::size_t>(i * d + h * dn + p)];
            }
        const std::vector<double> head = naive_attention(qh, qr, kh, vh, kr, dn, dn, zeros);
        for (int i = 0; i < qr; ++i)
            for (int p = 0; p < dn; ++p) cat[static_cast<std::size_t>(i * d + h * dn + p)] = head[static_cast<std::size_t>(i * dn + p)];
    }
    std::vector<double> out(static_cast<std::size_t>(qr * d), 0.0);
    for (int i = 0; i < qr; ++i)
        for (int p = 0; p < d; ++p)
            for (int j = 0; j < d; ++j)
                out[static_cast<std::size_t>(i * d + j)] +=
                    cat[static_cast<std::size_t>(i * d + p)] * wo[static_cast<std::size_t>(p * d + j)];
    return out;
}

SynthResult make_pair(int n, std::uint64_t seed) {
    SynthParams sp;
    sp.n_entities = n;
    sp.n_types = 3;
    sp.noise_sigma = 0.05;
    sp.seed = seed;
    Rng rng(seed);
    return synth_paired_kgs(sp, rng);
}

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.d = 16;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    cfg.ffn_hidden = 8;
    cfg.max_neighbors = 4;
    cfg.max_attributes = 4;
    cfg.image_input_len = 16;
    cfg.patch_len = 4;
    cfg.dropout_p = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("pi_attn masked-key and single-key limits") {
    Rng rng(1);
    Tensor q = randn({1, 4}, rng);
    Tensor k = randn({2, 4}, rng);
    Tensor v = randn({2, 4}, rng);
    Tensor masked = Tensor::from({1, 2}, {0.0, -1e9});
    Tensor out = pi_attn(q, k, v, masked);
    for (int p = 0; p < 4; ++p) REQUIRE(out.at(p) == Approx(v.at(0, p)).margin(1e-9));

    Tensor k1 = randn({1, 4}, rng);
    Tensor v1 = randn({1, 4}, rng);
    Tensor out1 = pi_attn(q, k1, v1, Tensor::zeros({1, 1}));
    for (int p = 0; p < 4; ++p) REQUIRE(out1.at(p) == v1.at(0, p));

    REQUIRE_THROWS_AS(pi_attn(q, randn({2, 3}, rng), v, masked), ShapeError);
    REQUIRE_THROWS_AS(pi_attn(q, k, randn({3, 4}, rng), masked), ShapeError);
    REQUIRE_THROWS_AS(pi_attn(q, k, v, Tensor::zeros({1, 3})), ShapeError);
}

TEST_CASE("pi_attn equals the scalar-loop oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor q = randn({2, 5}, rng);
        Tensor k = randn({3, 5}, rng);
        Tensor v = randn({3, 5}, rng);
        std::vector<double> add(6);
        for (double& x : add) x = rng.uniform() < 0.3 ? -1e9 : rng.normal(0.0, 0.5);
        add[0] = 0.0;  // keep at least one visible key in row 0
        add[3] = 0.0;
        Tensor additive = Tensor::from({2, 3}, add);
        Tensor out = pi_attn(q, k, v, additive);
        const auto expect = naive_attention(q.data(), 2, k.data(), v.data(), 3, 5, 5, add);
        for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(out.at(i) == Approx(expect[i]).margin(1e-12));
    }
}

TEST_CASE("masked positions carry attention weight below 1e-12") {
    Rng rng(3);
    Tensor q = randn({2, 6}, rng);
    Tensor k = randn({4, 6}, rng);
    const std::vector<double> mask_vals = {0, -1e9, 0, -1e9, -1e9, 0, 0, -1e9};
    Tensor additive = Tensor::from({2, 4}, mask_vals);
    // the weights are the softmax factor of the pi_attn formula
    Tensor weights = softmax_rows(scale(add(matmul(q, transpose(k)), additive), 1.0 / std::sqrt(6.0)));
    for (std::size_t i = 0; i < 2; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            if (mask_vals[i * 4 + j] != 0.0) REQUIRE(weights.at(i, j) < 1e-12);
            row_sum += weights.at(i, j);
        }
        REQUIRE(row_sum == Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("prefix_mh_attn with no prefix equals plain multi-head attention") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 8, heads = 2;
        const int kv_count = 1 + static_cast<int>(rng.uniform_int(8));
        StageParams sp{randn({8, 8}, rng, 0.4), randn({8, 8}, rng, 0.4), randn({8, 8}, rng, 0.4),
                       randn({8, 8}, rng, 0.4)};
        Tensor queries = randn({2, 8}, rng);
        Tensor kv = randn({static_cast<std::size_t>(kv_count), 8}, rng);
        Tensor mask = Tensor::zeros({2, static_cast<std::size_t>(kv_count)});
        Tensor out = prefix_mh_attn(queries, kv, mask, sp, heads, false);
        const auto expect = naive_mha(queries.data(), 2, kv.data(), kv_count, d, heads, sp.wq.data(),
                                      sp.wk.data(), sp.wv.data(), sp.wo.data());
        for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(out.at(i) == Approx(expect[i]).margin(1e-12));
    }
}

TEST_CASE("prefix rows extend every head's key count by n_t") {
    Rng rng(5);
    for (const int n_t : {1, 3, 7}) {
        StageParams sp{randn({8, 8}, rng, 0.3), randn({8, 8}, rng, 0.3), randn({8, 8}, rng, 0.3),
                       randn({8, 8}, rng, 0.3)};
        Tensor pk = randn({static_cast<std::size_t>(n_t), 8}, rng, 0.3);
        Tensor pv = randn({static_cast<std::size_t>(n_t), 8}, rng, 0.3);
        sp.pk = &pk;
        sp.pv = &pv;
        Tensor queries = randn({2, 8}, rng);
        Tensor kv = randn({4, 8}, rng);
        AttnTrace trace;
        prefix_mh_attn(queries, kv, Tensor::zeros({2, 4}), sp, 4, true, &trace);
        REQUIRE(trace.head_key_counts.size() == 4);
        for (const int c : trace.head_key_counts) REQUIRE(c == 4 + n_t);
    }

    StageParams no_prefix{randn({8, 8}, rng), randn({8, 8}, rng), randn({8, 8}, rng), randn({8, 8}, rng)};
    REQUIRE_THROWS_AS(
        prefix_mh_attn(randn({2, 8}, rng), randn({3, 8}, rng), Tensor::zeros({2, 3}), no_prefix, 2, true),
        ShapeError);
}

TEST_CASE("fully masked kv leaves only the prefix path, finite and kv-independent") {
    Rng rng(6);
    StageParams sp{randn({8, 8}, rng, 0.3), randn({8, 8}, rng, 0.3), randn({8, 8}, rng, 0.3),
                   randn({8, 8}, rng, 0.3)};
    Tensor pk = randn({3, 8}, rng, 0.3);
    Tensor pv = randn({3, 8}, rng, 0.3);
    sp.pk = &pk;
    sp.pv = &pv;
    Tensor queries = randn({2, 8}, rng);
    Tensor mask = Tensor::full({2, 4}, -1e9);
    Tensor kv_a = randn({4, 8}, rng);
    Tensor kv_b = randn({4, 8}, rng);
    Tensor out_a = prefix_mh_attn(queries, kv_a, mask, sp, 2, true);
    Tensor out_b = prefix_mh_attn(queries, kv_b, mask, sp, 2, true);
    for (std::size_t i = 0; i < out_a.size(); ++i) {
        REQUIRE(std::isfinite(out_a.at(i)));
        REQUIRE(out_a.at(i) == Approx(out_b.at(i)).margin(1e-12));
    }
}

TEST_CASE("attr_pair_fuse selects halves under identity-block projections") {
    Rng rng(7);
    const std::size_t d = 6;
    Tensor name_tok = randn({1, d}, rng);
    Tensor value_tok = randn({1, d}, rng);
    std::vector<double> top(2 * d * d, 0.0), bottom(2 * d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        top[i * d + i] = 1.0;            // [I; 0]
        bottom[(d + i) * d + i] = 1.0;   // [0; I]
    }
    Tensor w_top = Tensor::from({2 * d, d}, top);
    Tensor w_bottom = Tensor::from({2 * d, d}, bottom);
    Tensor picked_name = attr_pair_fuse(name_tok, value_tok, w_top);
    Tensor picked_value = attr_pair_fuse(name_tok, value_tok, w_bottom);
    for (std::size_t i = 0; i < d; ++i) {
        REQUIRE(picked_name.at(i) == name_tok.at(i));
        REQUIRE(picked_value.at(i) == value_tok.at(i));
    }
    REQUIRE_THROWS_AS(attr_pair_fuse(name_tok, value_tok, Tensor::zeros({d, d})), ShapeError);
}

TEST_CASE("prefix_ffn reduces to a plain two-layer network without prefixes") {
    Rng rng(8);
    Tensor e = randn({2, 6}, rng);
    Tensor wfk = randn({6, 10}, rng, 0.4);
    Tensor wfv = randn({10, 6}, rng, 0.4);
    Tensor out = prefix_ffn(e, wfk, wfv, nullptr, nullptr, false);
    // scalar-loop reference
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            double acc = 0.0;
            for (std::size_t h = 0; h < 10; ++h) {
                double pre = 0.0;
                for (std::size_t p = 0; p < 6; ++p) pre += e.at(i, p) * wfk.at(p, h);
                acc += std::max(0.0, pre) * wfv.at(h, j);
            }
            REQUIRE(out.at(i, j) == Approx(acc).margin(1e-12));
        }

    Tensor zero_in = Tensor::zeros({3, 6});
    Tensor phik = randn({2, 6}, rng);
    Tensor phiv = randn({2, 6}, rng);
    Tensor zout = prefix_ffn(zero_in, wfk, wfv, &phik, &phiv, true);
    for (std::size_t i = 0; i < zout.size(); ++i) REQUIRE(zout.at(i) == 0.0);
    REQUIRE(zout.cols() == 6);

    REQUIRE_THROWS_AS(prefix_ffn(e, wfk, wfv, nullptr, nullptr, true), ShapeError);
}

TEST_CASE("empty banks make a stage the identity, bit for bit") {
    const SynthResult data = make_pair(8, 17);
    EncoderConfig cfg = tiny_cfg();
    cfg.drop_image = true;  // visual bank empty for every entity
    Model model(cfg, data.kg1, data.kg2, 3);
    InputSequence seq = build_sequence(model.plan(0, 1), data.kg1, model.vocab(), model.params(), cfg);
    StageBanks banks = build_banks(seq, model.mask(0, 1), model.params(), cfg);
    REQUIRE(!banks.image.defined());
    Rng rng(4);
    Tensor state = randn({2, 16}, rng);
    Tensor out = hierarchical_stage(Stage::Visual, state, banks,
                                    detail::stage_params(model.params(), cfg, 0, Stage::Visual), cfg, nullptr);
    REQUIRE(out.node() == state.node());
}

TEST_CASE("single-head neighbor stage matches a hand-rolled attention") {
    MultiModalKG kg;
    kg.type_ids = {"untyped", "t"};
    kg.type_index = {{"untyped", 0}, {"t", 1}};
    kg.entity_ids = {"e", "n"};
    kg.entity_index = {{"e", 0}, {"n", 1}};
    kg.relation_ids = {"r"};
    kg.relation_kinds = {RelationKind::Entity};
    kg.relation_index = {{"r", 0}};
    kg.relational = {{0, 0, 1}};
    kg.entity_types = {1, 1};
    kg.rebuild_adjacency();

    EncoderConfig cfg = tiny_cfg();
    cfg.num_heads = 1;
    cfg.use_type_prefix = false;
    cfg.plain_attention = true;  // all visible
    Model model(cfg, kg, kg, 9);
    InputSequence seq = build_sequence(model.plan(0, 0), kg, model.vocab(), model.params(), cfg);
    StageBanks banks = build_banks(seq, model.mask(0, 0), model.params(), cfg);
    REQUIRE(banks.neighbor.rows() == 2);  // neighbor and relation tokens

    Rng rng(5);
    Tensor state = randn({2, 16}, rng);
    const StageParams sp = detail::stage_params(model.params(), cfg, 0, Stage::Neighbor);
    Tensor out = hierarchical_stage(Stage::Neighbor, state, banks, sp, cfg, nullptr);
    REQUIRE(out.rows() == 2);
    REQUIRE(out.cols() == 16);

    const auto expect = naive_mha(state.data(), 2, banks.neighbor.data(), 2, 16, 1, sp.wq.data(),
                                  sp.wk.data(), sp.wv.data(), sp.wo.data());
    for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(out.at(i) == Approx(expect[i]).margin(1e-12));
}

TEST_CASE("zeroed attention outputs expose the residual + FFN path") {
    const SynthResult data = make_pair(8, 23);
    EncoderConfig cfg = tiny_cfg();
    Model model(cfg, data.kg1, data.kg2, 11);
    for (const Stage st : {Stage::Neighbor, Stage::Textual, Stage::Visual}) {
        auto& wo = model.params().get("block0." + std::string(stage_name(st)) + ".wo");
        for (double& x : wo.data_mut()) x = 0.0;
    }
    InputSequence seq = build_sequence(model.plan(0, 0), data.kg1, model.vocab(), model.params(), cfg);
    StageBanks banks = build_banks(seq, model.mask(0, 0), model.params(), cfg);
    Rng rng(6);
    Tensor state = randn({2, 16}, rng);
    Tensor out = block_forward(0, state, banks, model.params(), cfg, nullptr);

    Tensor ffn_zero = prefix_ffn(Tensor::zeros({2, 16}), model.params().get("block0.ffn.wk"),
                                 model.params().get("block0.ffn.wv"), &model.params().get("block0.ffn.phik"),
                                 &model.params().get("block0.ffn.phiv"), true);
    Tensor expect = layer_norm(add(state, ffn_zero), model.params().get("block0.ln.gain"),
                               model.params().get("block0.ln.bias"), cfg.ln_eps);
    for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(out.at(i) == Approx(expect.at(i)).margin(1e-12));
}

TEST_CASE("block order changes the output (stages do not commute)") {
    const SynthResult data = make_pair(10, 29);
    EncoderConfig a = tiny_cfg();
    a.block_order = parse_block_order("NTV");
    EncoderConfig b = tiny_cfg();
    b.block_order = parse_block_order("VTN");
    Model ma(a, data.kg1, data.kg2, 31);
    Model mb(b, data.kg1, data.kg2, 31);  // identical parameters, different order
    const EncodeResult ra = ma.encode(0, 0);
    const EncodeResult rb = mb.encode(0, 0);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < ra.entity_repr.size(); ++i)
        max_diff = std::max(max_diff, std::abs(ra.entity_repr.at(i) - rb.entity_repr.at(i)));
    REQUIRE(max_diff > 1e-9);
}

TEST_CASE("block outputs stay finite across 100 random parameter draws") {
    const SynthResult data = make_pair(6, 37);
    EncoderConfig cfg = tiny_cfg();
    cfg.num_blocks = 2;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Model model(cfg, data.kg1, data.kg2, seed);
        const EncodeResult r = model.encode(0, static_cast<int>(seed % 6));
        for (std::size_t i = 0; i < r.entity_repr.size(); ++i) {
            REQUIRE(std::isfinite(r.entity_repr.at(i)));
            REQUIRE(std::isfinite(r.context_repr.at(i)));
        }
    }
}

TEST_CASE("encode is deterministic in eval mode and returns d-vectors") {
    const SynthResult data = make_pair(10, 41);
    EncoderConfig cfg = tiny_cfg();
    cfg.num_blocks = 2;
    Model model(cfg, data.kg1, data.kg2, 43);
    const EncodeResult r1 = model.encode(1, 4);
    const EncodeResult r2 = model.encode(1, 4);
    REQUIRE(r1.entity_repr.data() == r2.entity_repr.data());
    REQUIRE(r1.context_repr.data() == r2.context_repr.data());
    REQUIRE(r1.entity_repr.rows() == 1);
    REQUIRE(r1.entity_repr.cols() == 16);
    REQUIRE(r1.context_repr.cols() == 16);
}

TEST_CASE("entities with identical token content encode identically") {
    // isomorphic-input oracle: the same KG mounted as both sides gives every
    // entity literally identical token content on the two sides, so the two
    // encodings must coincide under shared parameters
    const SynthResult data = make_pair(10, 47);
    EncoderConfig cfg = tiny_cfg();
    cfg.num_blocks = 2;
    Model model(cfg, data.kg1, data.kg1, 47);
    for (int e = 0; e < 10; e += 3) {
        const EncodeResult ra = model.encode(0, e);
        const EncodeResult rb = model.encode(1, e);
        for (std::size_t i = 0; i < ra.entity_repr.size(); ++i) {
            REQUIRE(ra.entity_repr.at(i) == Approx(rb.entity_repr.at(i)).margin(1e-9));
            REQUIRE(ra.context_repr.at(i) == Approx(rb.context_repr.at(i)).margin(1e-9));
        }
    }
    // distinct ids inside one KG keep distinct content even with identical
    // neighborhoods: the pseudo-embedding is the identity signal
    const EncodeResult r0 = model.encode(0, 0);
    const EncodeResult r1 = model.encode(0, 1);
    double diff = 0.0;
    for (std::size_t i = 0; i < r0.entity_repr.size(); ++i)
        diff = std::max(diff, std::abs(r0.entity_repr.at(i) - r1.entity_repr.at(i)));
    REQUIRE(diff > 1e-9);
}

TEST_CASE("block gradient passes the finite-difference audit on a small stack") {
    const SynthResult data = make_pair(6, 53);
    EncoderConfig cfg;
    cfg.d = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    cfg.ffn_hidden = 8;
    cfg.max_neighbors = 2;
    cfg.max_attributes = 1;
    cfg.image_input_len = 16;
    cfg.patch_len = 4;
    // init scale large enough that ReLU pre-activations sit clear of the kink
    // relative to the finite-difference step
    cfg.lambda = 0.5;
    Model model(cfg, data.kg1, data.kg2, 59);
    Rng rng(60);
    Tensor probe = randn({1, 8}, rng);
    auto f = [&] { return sum_all(mul(model.encode(0, 0).entity_repr, probe)); };
    for (const char* pname : {"block0.neighbor.wq", "block0.ffn.wk", "block0.ffn.phiv", "embed.type",
                              "embed.image_proj", "block0.ln.gain"}) {
        const double err = grad_check(f, model.params().get(pname), 1e-5);
        INFO(pname);
        REQUIRE(err < 1e-4);
    }
}

TEST_CASE("checkpoints round-trip the model exactly") {
    const SynthResult data = make_pair(9, 61);
    EncoderConfig cfg = tiny_cfg();
    Model model(cfg, data.kg1, data.kg2, 67);
    const EncodeResult before = model.encode(0, 2);

    const auto path = std::filesystem::temp_directory_path() / "moalign_ck_test.json";
    save_checkpoint(model.to_checkpoint(0.2, 67), path.string());
    Checkpoint ck = load_checkpoint(path.string());
    validate_checkpoint_shapes(ck);
    Model re(std::move(ck), data.kg1, data.kg2);
    const EncodeResult after = re.encode(0, 2);
    REQUIRE(before.entity_repr.data() == after.entity_repr.data());

    Checkpoint bad = load_checkpoint(path.string());
    bad.params.get("embed.cls") = Tensor::zeros({2, 16});
    REQUIRE_THROWS_AS(validate_checkpoint_shapes(bad), DataError);
}
