#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "rrg/errors.hpp"
#include "rrg/text.hpp"

using namespace rrg;

TEST_CASE("normalize: lowercasing, punctuation, digits, whitespace") {
    CHECK(normalize("The cat, sat.") == "the cat sat");
    CHECK(normalize("X-ray  shows 2 nodules") == "x-ray shows num nodules");
    CHECK(normalize("") == "");
    CHECK(normalize("   ") == "");
    CHECK(normalize("A!B") == "a b");
    CHECK(normalize("2000 IMAGES") == "num images");
    CHECK(normalize("2.5 cm") == "num num cm");
    CHECK(normalize("-leading and trailing- hyphens-") == "leading and trailing hyphens");
    CHECK(normalize("intra-word stays") == "intra-word stays");
}

TEST_CASE("vocab build: threshold, ordering, determinism") {
    // "b" occurs once, below min_freq=2, so it maps to UNK
    auto v = Vocab::build({"a b", "a"}, 2);
    CHECK(v.size() == Vocab::kReserved + 1);
    CHECK(v.id_of("a") == 4);
    CHECK(v.id_of("b") == Vocab::kUnk);

    // equal counts order lexicographically after count ordering
    auto v2 = Vocab::build({"a b", "a b"}, 1);
    CHECK(v2.id_of("a") == 4);
    CHECK(v2.id_of("b") == 5);

    // higher count wins regardless of lex order
    auto v3 = Vocab::build({"zz zz zz yy", "yy zz"}, 1);
    CHECK(v3.id_of("zz") == 4);
    CHECK(v3.id_of("yy") == 5);

    // identical corpus -> identical assignment
    auto v4 = Vocab::build({"zz zz zz yy", "yy zz"}, 1);
    for (int id = 0; id < static_cast<int>(v3.size()); ++id)
        CHECK(v3.token_of(id) == v4.token_of(id));

    CHECK(Vocab::build({}, 1).size() == Vocab::kReserved);
    CHECK_THROWS_AS(Vocab::build({"a"}, 0), UsageError);
}

TEST_CASE("encode wraps with control tokens and truncates") {
    auto v = Vocab::build({"a b c"}, 1);
    CHECK(v.encode("a", 8) == TokenSequence{Vocab::kBos, 4, Vocab::kEos});
    CHECK(v.decode({Vocab::kBos, 4, Vocab::kEos}) == "a");

    std::string long_text;
    for (int i = 0; i < 100; ++i) long_text += "a ";
    auto ids = v.encode(long_text, 10);
    CHECK(ids.size() == 10); // BOS + 8 content + EOS
    CHECK(ids.front() == Vocab::kBos);
    CHECK(ids.back() == Vocab::kEos);

    CHECK_THROWS_AS(v.encode("a", 1), UsageError);
}

TEST_CASE("encode/decode round trip on in-vocab text") {
    auto v = Vocab::build({"no acute disease seen", "acute process"}, 1);
    const std::string text = "No ACUTE disease, seen.";
    CHECK(v.decode(v.encode(text, 32)) == normalize(text));
}

TEST_CASE("decode rejects out-of-range ids, renders unk literally") {
    auto v = Vocab::build({"a"}, 1);
    CHECK_THROWS_AS(v.decode({99}), DataError);
    CHECK(v.decode({Vocab::kBos, Vocab::kUnk, 4, Vocab::kEos}) == "<unk> a");
}

TEST_CASE("vocab save/load preserves ids and fingerprint") {
    auto v = Vocab::build({"alpha beta gamma beta", "beta gamma"}, 1);
    const std::string path = "vocab_roundtrip_test.txt";
    v.save(path);
    auto loaded = Vocab::load(path);
    CHECK(loaded.size() == v.size());
    for (int id = Vocab::kReserved; id < static_cast<int>(v.size()); ++id)
        CHECK(loaded.token_of(id) == v.token_of(id));
    CHECK(loaded.fingerprint() == v.fingerprint());

    // fingerprint is sensitive to content
    auto other = Vocab::build({"alpha beta"}, 1);
    CHECK(other.fingerprint() != v.fingerprint());
    std::remove(path.c_str());
}

TEST_CASE("vocab file format is one token per line") {
    auto v = Vocab::build({"down up up"}, 1);
    const std::string path = "vocab_format_test.txt";
    v.save(path);
    std::ifstream is(path);
    std::string l1, l2;
    std::getline(is, l1);
    std::getline(is, l2);
    CHECK(l1 == "up");   // count 2, id 4 = line 0
    CHECK(l2 == "down"); // count 1, id 5 = line 1
    std::remove(path.c_str());
}
