#include "doctest.h"
#include "test_support.hpp"

#include "tensorlens/error.hpp"
#include "tensorlens/modelio.hpp"

#include <cstring>
#include <sstream>

using namespace tensorlens;
using namespace tltest;

namespace {

Model sample_model(bool biases = true, bool final_norm = true) {
    auto c = small_config(2, NormPlacement::pre_ln, biases);
    c.final_norm = final_norm;
    c.mask_token = 0;
    return random_model(c, 77);
}

bool same_weights(const ModelWeights& a, const ModelWeights& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t n = 0; n < a.layers.size(); ++n) {
        const auto &x = a.layers[n], &y = b.layers[n];
        if (!(x.w_q == y.w_q && x.w_k == y.w_k && x.w_v == y.w_v && x.w_o == y.w_o && x.w_1 == y.w_1 &&
              x.w_2 == y.w_2 && x.b_q == y.b_q && x.b_k == y.b_k && x.b_v == y.b_v && x.b_o == y.b_o &&
              x.b_1 == y.b_1 && x.b_2 == y.b_2 && x.ln1.gamma == y.ln1.gamma && x.ln1.beta == y.ln1.beta &&
              x.ln2.gamma == y.ln2.gamma && x.ln2.beta == y.ln2.beta))
            return false;
    }
    return a.tok_embed == b.tok_embed && a.pos_embed == b.pos_embed && a.unembed == b.unembed &&
           a.final_norm.gamma == b.final_norm.gamma && a.final_norm.beta == b.final_norm.beta;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) { std::memcpy(b.data() + at, &v, 4); }
void put_u64(std::vector<std::uint8_t>& b, std::size_t at, std::uint64_t v) { std::memcpy(b.data() + at, &v, 8); }

std::uint64_t meta_len(const std::vector<std::uint8_t>& b) {
    std::uint64_t v;
    std::memcpy(&v, b.data() + 8, 8);
    return v;
}

// Rewrites the metadata JSON of an encoded container (payload untouched).
std::vector<std::uint8_t> with_metadata(const std::vector<std::uint8_t>& bytes, const std::string& meta) {
    const std::uint64_t old = meta_len(bytes);
    std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 16);
    put_u64(out, 8, meta.size());
    out.insert(out.end(), meta.begin(), meta.end());
    out.insert(out.end(), bytes.begin() + static_cast<std::ptrdiff_t>(16 + old), bytes.end());
    return out;
}

std::string metadata_of(const std::vector<std::uint8_t>& bytes) {
    return std::string(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(16 + meta_len(bytes)));
}

void replace_once(std::string& s, const std::string& from, const std::string& to) {
    auto p = s.find(from);
    REQUIRE(p != std::string::npos);
    s.replace(p, from.size(), to);
}

} // namespace

TEST_CASE("config JSON round trip") {
    auto m = sample_model();
    CHECK(config_from_json(config_to_json(m.config)) == m.config);
    CHECK_THROWS_AS(config_from_json("{"), MetadataError);
    CHECK_THROWS_AS(config_from_json("{\"n_layers\": 1}"), MetadataError);
    auto bad = config_to_json(m.config);
    replace_once(bad, "\"d_model\":6", "\"d_model\":7");
    CHECK_THROWS_AS(config_from_json(bad), MetadataError);
}

TEST_CASE("model round trips") {
    auto m = sample_model();
    SUBCASE("f64 is bit-exact") {
        auto bytes = encode_container(container_from_model(m));
        auto back = model_from_container(decode_container(bytes));
        CHECK(back.config == m.config);
        CHECK(same_weights(back.weights, m.weights));
        CHECK(encode_container(container_from_model(back)) == bytes);
    }
    SUBCASE("f32 round trips its own values exactly") {
        auto bytes = encode_container(container_from_model(m, Dtype::f32));
        auto once = model_from_container(decode_container(bytes));
        auto twice = model_from_container(decode_container(encode_container(container_from_model(once, Dtype::f32))));
        CHECK(same_weights(once.weights, twice.weights));
        CHECK(std::abs(once.weights.tok_embed(3, 2) - m.weights.tok_embed(3, 2)) < 1e-6);
    }
    SUBCASE("files") {
        auto path = std::filesystem::temp_directory_path() / "tensorlens_test_model.tlns";
        save_model(m, path);
        auto back = load_model(path);
        CHECK(same_weights(back.weights, m.weights));
        std::filesystem::remove(path);
        CHECK_THROWS_AS(load_model(path), IoError);
    }
    SUBCASE("optional biases") {
        auto nb = sample_model(false, false);
        auto c = container_from_model(nb);
        std::erase_if(c.tensors, [](const RawTensor& t) {
            return t.name.find(".b_") != std::string::npos || t.name.find(".beta") != std::string::npos;
        });
        auto back = model_from_container(decode_container(encode_container(c)));
        CHECK(same_weights(back.weights, nb.weights));

        auto c2 = container_from_model(nb);
        for (auto& t : c2.tensors)
            if (t.name == "layers.1.ffn.b_2") t.values[0] = 1.0;
        CHECK_THROWS_AS(model_from_container(c2), MetadataError);
    }
}

TEST_CASE("typed container errors") {
    auto m = sample_model();
    const auto good = encode_container(container_from_model(m));

    auto b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_container(b), BadMagicError);

    b = good;
    put_u32(b, 4, 2);
    CHECK_THROWS_AS(decode_container(b), VersionMismatchError);

    CHECK_THROWS_AS(decode_container(std::span(good.data(), 10)), TruncatedPayloadError);
    CHECK_THROWS_AS(decode_container(std::span(good.data(), good.size() - 1)), TruncatedPayloadError);

    b = good;
    put_u64(b, 8, 1u << 30);
    CHECK_THROWS_AS(decode_container(b), TruncatedPayloadError);

    b = good;
    b.push_back(0);
    CHECK_THROWS_AS(decode_container(b), MetadataError);

    b = with_metadata(good, "{not json");
    CHECK_THROWS_AS(decode_container(b), MetadataError);

    auto meta = metadata_of(good);
    auto shape = meta;
    replace_once(shape, "\"shape\":[", "\"shape\":[-");
    CHECK_THROWS_AS(decode_container(with_metadata(good, shape)), ShapeMismatchError);

    auto dtype = meta;
    replace_once(dtype, "\"f64\"", "\"i8\"");
    CHECK_THROWS_AS(decode_container(with_metadata(good, dtype)), MetadataError);

    SUBCASE("shape disagreeing with the config") {
        auto c = container_from_model(m);
        for (auto& t : c.tensors)
            if (t.name == "layers.0.attn.w_q") {
                t.shape = {3, 12};
            }
        CHECK_THROWS_AS(model_from_container(decode_container(encode_container(c))), ShapeMismatchError);
    }
    SUBCASE("missing tensor") {
        auto c = container_from_model(m);
        std::erase_if(c.tensors, [](const RawTensor& t) { return t.name == "unembed"; });
        CHECK_THROWS_AS(model_from_container(c), MetadataError);
    }
}

TEST_CASE("fuzzed containers raise only typed errors") {
    auto m = sample_model();
    const auto good = encode_container(fixture_container(m, {TokenSequence{{1, 2, 3}}}, true));
    std::mt19937_64 rng(2024);
    std::size_t typed = 0, accepted = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto b = good;
        switch (trial % 4) {
        case 0:  // truncate
            b.resize(rng() % b.size());
            break;
        case 1:  // flip bytes in the header or metadata
            for (int k = 0; k < 3; ++k) b[rng() % std::min<std::size_t>(b.size(), 16 + meta_len(good))] ^= static_cast<std::uint8_t>(1 + rng() % 255);
            break;
        case 2:  // flip bytes anywhere
            for (int k = 0; k < 4; ++k) b[rng() % b.size()] ^= static_cast<std::uint8_t>(1 + rng() % 255);
            break;
        default:  // random garbage with a valid header
            b.resize(16 + rng() % 200);
            for (std::size_t i = 16; i < b.size(); ++i) b[i] = static_cast<std::uint8_t>(rng());
            put_u64(b, 8, rng() % 300);
            break;
        }
        try {
            (void)fixture_from_container(decode_container(b));
            ++accepted;
        } catch (const FormatError&) {
            ++typed;
        }
    }
    CHECK(typed + accepted == 1000);
    CHECK(typed >= 500);
}

TEST_CASE("fixtures and goldens") {
    auto m = sample_model();
    std::vector<TokenSequence> inputs{TokenSequence{{1, 2, 3, 4}}, TokenSequence{{5, 6, 7, 8}}};
    auto fx = fixture_from_container(decode_container(encode_container(fixture_container(m, inputs, true))));
    CHECK(fx.inputs == inputs);
    REQUIRE(fx.goldens.size() == 2);
    CHECK(fx.goldens[0].hidden.size() == 3);
    CHECK(fx.goldens[1].attn[1].size() == 2);
    auto check = compare_goldens(fx.model, fx);
    CHECK(check.pass);
    CHECK(check.max_rel_error < 1e-6);

    auto single = fixture_from_container(fixture_container(m, {inputs[0]}, true));
    CHECK(single.inputs.size() == 1);
    CHECK(compare_goldens(single.model, single).pass);

    SUBCASE("a corrupted weight fails the golden check") {
        auto bad = fx.model;
        bad.weights.layers[1].w_o(0, 0) += 5.0;
        auto r = compare_goldens(bad, fx);
        CHECK_FALSE(r.pass);
        CHECK(r.max_rel_error > 1e-4);
        CHECK_FALSE(r.worst.empty());
    }
    SUBCASE("no goldens") {
        auto plain = fixture_from_container(fixture_container(m, inputs, false));
        CHECK(plain.goldens.empty());
    }
    CHECK_THROWS_AS(fixture_container(m, {TokenSequence{{1, 2}}, TokenSequence{{1}}}, true), DimensionError);
}

TEST_CASE("map export") {
    std::ostringstream os;
    write_map_csv(os, DenseMatrix::identity(2));
    CHECK(os.str() == "i,j,value\n0,0,1\n0,1,0\n1,0,0\n1,1,1\n");

    std::mt19937_64 rng(5);
    auto m = random_matrix(4, 4, rng);
    std::ostringstream o2;
    write_map_csv(o2, m);
    std::istringstream in(o2.str());
    CHECK(max_abs_diff(read_map_csv(in), m) <= 1e-15);

    CHECK(decode_map_raw(encode_map_raw(m)) == m);
    auto raw = encode_map_raw(m);
    raw.pop_back();
    CHECK_THROWS_AS(decode_map_raw(raw), TruncatedPayloadError);
    std::istringstream badcsv("x,y\n");
    CHECK_THROWS_AS(read_map_csv(badcsv), FormatError);
}

TEST_CASE("dataset parsing") {
    std::istringstream empty("");
    CHECK(parse_dataset(empty).empty());

    std::istringstream ok(
        "{\"tokens\": [1, 2, 3], \"label\": 1}\n"
        "\n"
        "{\"tokens\": [4, 5], \"relation\": \"capital\", \"subject_span\": [1, 2], \"object_token\": 7}\n"
        "{\"tokens\": [4, 6], \"relation\": 3, \"subject_span\": [1, 2], \"object_token\": 8}\n");
    auto recs = parse_dataset(ok);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].label == 1u);
    CHECK(recs[1].relation == "capital");
    CHECK(recs[2].relation == "3");
    CHECK(recs[1].subject_span == std::pair<std::size_t, std::size_t>{1, 2});

    auto sets = relation_sets(recs);
    CHECK(sets.size() == 2);

    std::ostringstream out;
    write_dataset(out, recs);
    std::istringstream again(out.str());
    auto recs2 = parse_dataset(again);
    CHECK(recs2.size() == 3);
    CHECK(recs2[1].object_token == 7u);
    CHECK(recs2[0].tokens == recs[0].tokens);

    std::istringstream bad("{\"tokens\": [1]}\n{\"tokens\": [-1]}\n");
    try {
        parse_dataset(bad);
        FAIL("expected a DatasetError");
    } catch (const DatasetError& e) {
        CHECK(e.line() == 2);
    }
    std::istringstream badjson("{\"tokens\": [1]}\n\n{oops\n");
    try {
        parse_dataset(badjson);
        FAIL("expected a DatasetError");
    } catch (const DatasetError& e) {
        CHECK(e.line() == 3);
    }
    std::istringstream span("{\"tokens\": [1, 2], \"subject_span\": [1, 3]}\n");
    CHECK_THROWS_AS(parse_dataset(span), DatasetError);
}
