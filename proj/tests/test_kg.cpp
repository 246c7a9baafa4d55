#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "moalign/kg.hpp"
#include "moalign/synth.hpp"

using namespace moalign;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    static int counter = 0;
    const fs::path dir = fs::temp_directory_path() / ("moalign_kg_" + tag + "_" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

fs::path write_basic_kg(const std::string& tag, const std::string& triples, const std::string& text,
                        const std::string& image, const std::string& types) {
    const fs::path dir = fresh_dir(tag);
    write_file(dir / "triples.tsv", triples);
    write_file(dir / "text_attrs.tsv", text);
    write_file(dir / "image_attrs.tsv", image);
    write_file(dir / "types.tsv", types);
    return dir;
}

bool kg_equal(const MultiModalKG& a, const MultiModalKG& b) {
    return a.entity_ids == b.entity_ids && a.relation_ids == b.relation_ids &&
           a.relation_kinds == b.relation_kinds && a.relational == b.relational &&
           a.text_attrs == b.text_attrs && a.image_attrs == b.image_attrs && a.type_ids == b.type_ids &&
           a.entity_types == b.entity_types;
}

}  // namespace

TEST_CASE("load_kg parses a consistent three-line triple file") {
    const auto dir = write_basic_kg("basic",
                                    "a\tr0\tb\n"
                                    "b\tr0\tc\n"
                                    "c\tr1\ta\n",
                                    "a\tname\tAlpha Centauri\n",
                                    "b\timg\t0.5 -1.25 3\n",
                                    "a\ttype1\n");
    const MultiModalKG kg = load_kg_dir(dir.string());
    REQUIRE(kg.relational.size() == 3);
    REQUIRE(kg.entity_ids == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(kg.text_attrs.size() == 1);
    REQUIRE(kg.text_attrs[0].value == "Alpha Centauri");
    REQUIRE(kg.image_attrs[0].value == std::vector<double>{0.5, -1.25, 3.0});
    REQUIRE(kg.entity_types[0] == 1);
    REQUIRE(kg.entity_types[1] == 0);  // untyped default
    REQUIRE(kg.relation_kinds[static_cast<std::size_t>(kg.relation_index.at("img"))] == RelationKind::ImageAttr);
}

TEST_CASE("load_kg rejects dangling references with the line number") {
    const auto dir = write_basic_kg("dangling", "a\tr0\tb\n", "a\tname\tok\nzz\tname\tbad\n", "", "");
    try {
        load_kg_dir(dir.string());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find(":2") != std::string::npos);
        REQUIRE(msg.find("zz") != std::string::npos);
        REQUIRE(msg.find("dangling") != std::string::npos);
    }
}

TEST_CASE("load_kg rejects duplicate type assignments and bad columns") {
    const auto dup = write_basic_kg("duptype", "a\tr0\tb\n", "", "", "a\tt1\na\tt1\n");
    REQUIRE_THROWS_AS(load_kg_dir(dup.string()), DataError);

    const auto cols = write_basic_kg("cols", "a\tr0\n", "", "", "");
    REQUIRE_THROWS_AS(load_kg_dir(cols.string()), DataError);

    const auto badnum = write_basic_kg("badnum", "a\tr0\tb\n", "", "a\timg\t1.0 zebra\n", "");
    REQUIRE_THROWS_AS(load_kg_dir(badnum.string()), DataError);

    const auto kindclash = write_basic_kg("kind", "a\tr0\tb\n", "a\tr0\toops\n", "", "");
    REQUIRE_THROWS_AS(load_kg_dir(kindclash.string()), DataError);
}

TEST_CASE("load_kg then write_kg then load_kg is the identity") {
    Rng rng(77);
    SynthParams sp;
    sp.n_entities = 15;
    sp.n_types = 3;
    sp.noise_sigma = 0.07;
    sp.seed = 77;
    const SynthResult data = synth_paired_kgs(sp, rng);
    const auto dir = fresh_dir("roundtrip");
    write_kg(data.kg1, (dir / "kg1").string());
    const MultiModalKG re = load_kg_dir((dir / "kg1").string());
    // loading reorders ids by first appearance, so compare id-level content
    auto triplet_strings = [](const MultiModalKG& kg) {
        std::multiset<std::string> out;
        for (const auto& t : kg.relational)
            out.insert(kg.entity_ids[static_cast<std::size_t>(t.head)] + "|" +
                       kg.relation_ids[static_cast<std::size_t>(t.relation)] + "|" +
                       kg.entity_ids[static_cast<std::size_t>(t.tail)]);
        return out;
    };
    REQUIRE(triplet_strings(data.kg1) == triplet_strings(re));
    REQUIRE(re.text_attrs.size() == data.kg1.text_attrs.size());
    REQUIRE(re.image_attrs.size() == data.kg1.image_attrs.size());
    for (std::size_t i = 0; i < re.image_attrs.size(); ++i)
        REQUIRE(re.image_attrs[i].value == data.kg1.image_attrs[i].value);  // reals survive exactly
    for (int e = 0; e < re.entity_count(); ++e) {
        const int orig = data.kg1.entity_or_throw(re.entity_ids[static_cast<std::size_t>(e)]);
        REQUIRE(re.type_ids[static_cast<std::size_t>(re.entity_types[static_cast<std::size_t>(e)])] ==
                data.kg1.type_ids[static_cast<std::size_t>(data.kg1.entity_types[static_cast<std::size_t>(orig)])]);
    }
    // once loaded, serialize + re-load is the exact identity
    write_kg(re, (dir / "kg1b").string());
    const MultiModalKG re2 = load_kg_dir((dir / "kg1b").string());
    REQUIRE(kg_equal(re, re2));
}

TEST_CASE("split_seeds honors the 2:8, 5:5 and 8:2 protocol") {
    AlignmentSeedSet seeds;
    for (int i = 0; i < 10; ++i) seeds.pairs.emplace_back("e" + std::to_string(i), "x" + std::to_string(i));

    const DatasetSplit s28 = split_seeds(seeds, 0.2, 11);
    REQUIRE(s28.train.pairs.size() == 2);
    REQUIRE(s28.test.pairs.size() == 8);

    const DatasetSplit a = split_seeds(seeds, 0.5, 12);
    const DatasetSplit b = split_seeds(seeds, 0.5, 12);
    REQUIRE(a.train.pairs == b.train.pairs);
    REQUIRE(a.test.pairs == b.test.pairs);

    const DatasetSplit s82 = split_seeds(seeds, 0.8, 13);
    REQUIRE(s82.train.pairs.size() == 8);
    REQUIRE(s82.test.pairs.size() == 2);
    // brute-force disjointness and exhaustiveness
    std::set<std::string> train_left, test_left;
    for (const auto& [l, r] : s82.train.pairs) train_left.insert(l);
    for (const auto& [l, r] : s82.test.pairs) test_left.insert(l);
    for (const auto& l : train_left) REQUIRE(test_left.count(l) == 0);
    std::set<std::string> all = train_left;
    all.insert(test_left.begin(), test_left.end());
    REQUIRE(all.size() == 10);

    REQUIRE_THROWS_AS(split_seeds(AlignmentSeedSet{}, 0.5, 1), DataError);
    REQUIRE_THROWS_AS(split_seeds(seeds, 0.0, 1), DataError);
}

TEST_CASE("sample_negatives excludes the counterpart and never repeats") {
    Rng rng(5);
    SynthParams small;
    small.n_entities = 2;
    small.n_types = 1;
    small.seed = 5;
    const SynthResult two = synth_paired_kgs(small, rng);
    Rng draw_rng(9);
    const auto [left, right] = sample_negatives(0, 0, two.kg1, two.kg2, 1, draw_rng);
    REQUIRE(left == std::vector<int>{1});  // forced choice
    REQUIRE(right == std::vector<int>{1});

    SynthParams big;
    big.n_entities = 100;
    big.n_types = 4;
    big.seed = 6;
    Rng rng2(6);
    const SynthResult hundred = synth_paired_kgs(big, rng2);
    Rng draw2(10);
    const auto [l5, r5] = sample_negatives(42, 42, hundred.kg1, hundred.kg2, 5, draw2);
    std::set<int> uniq(l5.begin(), l5.end());
    REQUIRE(uniq.size() == 5);
    REQUIRE(uniq.count(42) == 0);
    std::set<int> uniq_r(r5.begin(), r5.end());
    REQUIRE(uniq_r.size() == 5);
    REQUIRE(uniq_r.count(42) == 0);

    REQUIRE_THROWS_AS(sample_negatives(0, 0, two.kg1, two.kg2, 2, draw2), DataError);
}

TEST_CASE("sample_negatives draws uniformly (chi-square style bound)") {
    Rng rng(21);
    SynthParams sp;
    sp.n_entities = 11;  // excluding the counterpart leaves 10 candidates
    sp.n_types = 2;
    sp.seed = 21;
    const SynthResult data = synth_paired_kgs(sp, rng);
    Rng draw(20250809);
    std::map<int, int> freq;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        const auto [l, r] = sample_negatives(0, 0, data.kg1, data.kg2, 1, draw);
        ++freq[r[0]];
    }
    REQUIRE(freq.size() == 10);
    // expected 1000 per bucket, sigma = sqrt(n p (1-p)) = 30; allow 3 sigma
    for (const auto& [id, count] : freq) {
        REQUIRE(count > 1000 - 90);
        REQUIRE(count < 1000 + 90);
    }
}

TEST_CASE("synth_paired_kgs plants an exact isomorphic copy") {
    Rng rng(31);
    SynthParams sp;
    sp.n_entities = 40;
    sp.n_relations = 3;
    sp.n_types = 4;
    sp.noise_sigma = 0.0;
    sp.seed = 31;
    const SynthResult data = synth_paired_kgs(sp, rng);
    REQUIRE(data.truth.pairs.size() == 40);
    data.truth.validate_one_to_one();

    // remap kg2 onto kg1 through the planted truth and compare triplet sets
    std::map<std::string, std::string> ent_map;  // kg2 id -> kg1 id
    for (const auto& [a, b] : data.truth.pairs) ent_map[b] = a;
    std::multiset<std::string> kg1_triplets, kg2_remapped;
    for (const auto& t : data.kg1.relational)
        kg1_triplets.insert(data.kg1.entity_ids[static_cast<std::size_t>(t.head)] + "|" +
                            data.kg1.relation_ids[static_cast<std::size_t>(t.relation)] + "|" +
                            data.kg1.entity_ids[static_cast<std::size_t>(t.tail)]);
    for (const auto& t : data.kg2.relational) {
        const std::string rel = data.kg2.relation_ids[static_cast<std::size_t>(t.relation)].substr(3);
        kg2_remapped.insert(ent_map.at(data.kg2.entity_ids[static_cast<std::size_t>(t.head)]) + "|" + rel + "|" +
                            ent_map.at(data.kg2.entity_ids[static_cast<std::size_t>(t.tail)]));
    }
    REQUIRE(kg1_triplets == kg2_remapped);

    // zero noise: image vectors equal under the renaming
    REQUIRE(data.kg1.image_attrs.size() == data.kg2.image_attrs.size());
    for (std::size_t i = 0; i < data.kg1.image_attrs.size(); ++i) {
        REQUIRE(data.kg1.image_attrs[i].value == data.kg2.image_attrs[i].value);
        REQUIRE(ent_map.at(data.kg2.entity_ids[static_cast<std::size_t>(data.kg2.image_attrs[i].entity)]) ==
                data.kg1.entity_ids[static_cast<std::size_t>(data.kg1.image_attrs[i].entity)]);
    }
    // text values are suffixed variants of the originals
    for (std::size_t i = 0; i < data.kg1.text_attrs.size(); ++i)
        REQUIRE(data.kg2.text_attrs[i].value == data.kg1.text_attrs[i].value + "~2");
    // aligned entities share types
    for (std::size_t e = 0; e < 40; ++e)
        REQUIRE(data.kg1.type_ids[static_cast<std::size_t>(data.kg1.entity_types[e])] ==
                data.kg2.type_ids[static_cast<std::size_t>(data.kg2.entity_types[e])]);
}

TEST_CASE("perturb_kg modifies exactly the rounded fraction") {
    Rng rng(41);
    SynthParams sp;
    sp.n_entities = 50;
    sp.n_types = 3;
    sp.seed = 41;
    SynthResult data = synth_paired_kgs(sp, rng);
    // pin the relational list at exactly 100 triplets
    while (data.kg1.relational.size() > 100) data.kg1.relational.pop_back();
    while (data.kg1.relational.size() < 100) data.kg1.relational.push_back(data.kg1.relational[0]);
    data.kg1.rebuild_adjacency();

    Rng p0(1);
    const MultiModalKG same = perturb_kg(data.kg1, 0.0, PerturbTarget::Neighbors, p0);
    REQUIRE(same.relational == data.kg1.relational);

    Rng p1(2);
    const MultiModalKG ten = perturb_kg(data.kg1, 0.1, PerturbTarget::Neighbors, p1);
    int diff = 0;
    for (std::size_t i = 0; i < ten.relational.size(); ++i)
        if (!(ten.relational[i] == data.kg1.relational[i])) ++diff;
    REQUIRE(diff == 10);

    Rng p2(3);
    const MultiModalKG attrs = perturb_kg(data.kg1, 0.1, PerturbTarget::Attributes, p2);
    int tdiff = 0;
    for (std::size_t i = 0; i < attrs.text_attrs.size(); ++i)
        if (!(attrs.text_attrs[i] == data.kg1.text_attrs[i])) ++tdiff;
    REQUIRE(tdiff == static_cast<int>(std::floor(0.1 * static_cast<double>(data.kg1.text_attrs.size()) + 0.5)));

    REQUIRE_THROWS_AS(perturb_kg(data.kg1, 0.5, PerturbTarget::Neighbors, p2), DataError);

    // perturbed KG still passes load-time validation
    const auto dir = fresh_dir("perturb");
    write_kg(ten, (dir / "kg").string());
    REQUIRE_NOTHROW(load_kg_dir((dir / "kg").string()));
}

TEST_CASE("seeds file round-trips and enforces one-to-one pairs") {
    const auto dir = fresh_dir("seeds");
    AlignmentSeedSet seeds;
    seeds.pairs = {{"a", "x"}, {"b", "y"}};
    write_seeds(seeds, (dir / "seeds.tsv").string());
    const AlignmentSeedSet re = load_seeds((dir / "seeds.tsv").string());
    REQUIRE(re.pairs == seeds.pairs);

    write_file(dir / "bad.tsv", "a\tx\na\ty\n");
    REQUIRE_THROWS_AS(load_seeds((dir / "bad.tsv").string()), DataError);
}
