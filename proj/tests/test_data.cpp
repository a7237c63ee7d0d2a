#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "ikd/data.hpp"
#include "ikd/errors.hpp"
#include "ikd/tensor_io.hpp"

using namespace ikd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("ikd_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("vocabulary reserves specials and round-trips") {
    Vocabulary v = Vocabulary::build({"the cat sat", "a cat"});
    CHECK(v.id("<pad>") == 0);
    CHECK(v.id("<unk>") == 1);
    CHECK(v.id("<bos>") == 2);
    CHECK(v.id("<eos>") == 3);
    CHECK(v.id("[U]") == 4);
    CHECK(v.size() == 5 + 4);
    CHECK(v.id("dog") == Vocabulary::kUnk);
    CHECK(v.decode(v.encode("the cat sat")) == "the cat sat");
    CHECK_THROWS_AS(v.token(99), IndexError);

    auto dir = scratch("vocab");
    v.save(dir / "vocab.txt");
    CHECK(read_lines(dir / "vocab.txt").size() == v.size());
    CHECK(Vocabulary::load(dir / "vocab.txt") == v);

    write_lines(dir / "bad.txt", {"<pad>", "<bos>"});
    CHECK_THROWS_AS(Vocabulary::load(dir / "bad.txt"), FormatError);
}

TEST_CASE("load_corpus") {
    auto dir = scratch("corpus");
    write_lines(dir / "src.txt", {"a b", "b zz"});
    write_lines(dir / "tgt.txt", {"x", "y x"});
    Vocabulary v = Vocabulary::build({"a b", "x y"});

    SUBCASE("two lines without images") {
        auto c = load_corpus(dir / "src.txt", dir / "tgt.txt", std::nullopt, v);
        REQUIRE(c.size() == 2);
        CHECK_FALSE(c[0].image.has_value());
        CHECK(c[1].source[1] == Vocabulary::kUnk);
        CHECK(c[0].target.front() == Vocabulary::kBos);
        CHECK(c[0].target.back() == Vocabulary::kEos);
        CHECK(c[1].target.size() == 4);
    }
    SUBCASE("line-count mismatch names both counts") {
        write_lines(dir / "tgt3.txt", {"x", "y", "x"});
        try {
            load_corpus(dir / "src.txt", dir / "tgt3.txt", std::nullopt, v);
            FAIL("expected AlignmentError");
        } catch (const AlignmentError& e) {
            std::string msg = e.what();
            CHECK(msg.find(" 2 ") != std::string::npos);
            CHECK(msg.find(" 3") != std::string::npos);
        }
    }
    SUBCASE("images") {
        fs::create_directories(dir / "img");
        write_tensor(dir / "img" / "0.tnsr", Tensor::full({3, 4, 4}, 0.5));
        write_tensor(dir / "img" / "1.tnsr", Tensor::full({3, 4, 4}, 0.25));
        auto c = load_corpus(dir / "src.txt", dir / "tgt.txt", dir / "img", v, 4);
        REQUIRE(c[1].image.has_value());
        CHECK(c[1].image->at({2, 3, 3}) == 0.25);
        CHECK_THROWS_AS(load_corpus(dir / "src.txt", dir / "tgt.txt", dir / "img", v, 8), FormatError);
        write_lines(dir / "img" / "1.tnsr", {"garbage"});
        try {
            load_corpus(dir / "src.txt", dir / "tgt.txt", dir / "img", v);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("1.tnsr") != std::string::npos);
        }
    }
}

TEST_CASE("mask_tokens") {
    Vocabulary v = Vocabulary::build({"red car drives fast", "blue car"});
    auto ex = make_example("red car drives fast", "x", v);

    CHECK(mask_tokens(ex, {}, v).source == ex.source);
    auto all = mask_tokens(ex, {"red", "car", "drives", "fast"}, v);
    for (int id : all.source) CHECK(id == Vocabulary::kMask);
    CHECK(all.target == ex.target);

    auto once = mask_tokens(ex, {"red", "blue"}, v);
    CHECK(mask_tokens(once, {"red", "blue"}, v).source == once.source);
    CHECK(once.source[0] == Vocabulary::kMask);
    CHECK(once.source[1] == v.id("car"));
}

TEST_CASE("mask_corpus fraction matches a hand count") {
    const std::vector<std::string> lines{
        "a red car",           "the blue sky",   "green grass grows", "a man",  "red red red",
        "blue and green",      "nothing here",   "one two three four", "white", "a blue red car",
    };
    // red: 1 + 3 + 1 = 5; blue: 1 + 1 + 1 = 3 -> 8 of 3+3+3+2+3+3+2+4+1+4 = 28 tokens.
    Vocabulary v = Vocabulary::build(lines);
    std::vector<TripletExample> corpus;
    for (const auto& l : lines) corpus.push_back(make_example(l, "t", v));
    MaskStats st;
    mask_corpus(corpus, {"red", "blue"}, v, &st);
    CHECK(st.total == 28);
    CHECK(st.masked == 8);
    CHECK(st.fraction() == doctest::Approx(8.0 / 28.0));
}

TEST_CASE("batchify") {
    Vocabulary v = Vocabulary::build({"a b c d e f"});
    std::vector<TripletExample> c{make_example("a", "b c", v), make_example("a b c d", "d", v),
                                  make_example("e f", "a b c d e", v)};

    SUBCASE("batch size covering the corpus gives one batch") {
        auto bs = batchify(c, 10, 3);
        REQUIRE(bs.size() == 1);
        CHECK(bs[0].size == 3);
    }
    SUBCASE("pad mask count equals the sum of padding per row") {
        auto b = batchify(c, 3, std::nullopt)[0];
        CHECK(b.src_len == 4);
        // (4 - 1) + (4 - 4) + (4 - 2) = 5
        std::size_t pads = 0;
        for (auto m : b.source_pad) pads += m;
        CHECK(pads == 5);
        for (std::size_t i = 0; i < b.source.size(); ++i)
            CHECK((b.source_pad[i] == 1) == (b.source[i] == Vocabulary::kPad));
        CHECK(b.target[0 * b.tgt_len + 3] == Vocabulary::kEos);
        CHECK(b.target[0 * b.tgt_len + 4] == Vocabulary::kPad);
    }
    SUBCASE("same seed, same sequence") {
        auto a = batchify(c, 2, 11);
        auto b = batchify(c, 2, 11);
        REQUIRE(a.size() == 2);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].indices == b[i].indices);
            CHECK(a[i].source == b[i].source);
        }
    }
    SUBCASE("images stack when every example has one") {
        for (auto& ex : c) ex.image = Tensor::full({3, 2, 2}, 0.5);
        auto b = batchify(c, 2, std::nullopt)[0];
        REQUIRE(b.images.has_value());
        CHECK(b.images->shape() == Shape{2, 3, 2, 2});
    }
}

TEST_CASE("synthetic corpus") {
    SUBCASE("deterministic under a fixed seed") {
        auto a = synth_generate(50, 7, 0.5);
        auto b = synth_generate(50, 7, 0.5);
        CHECK(a.source == b.source);
        CHECK(a.target == b.target);
        CHECK(checksum(a.images) == checksum(b.images));
        CHECK(synth_generate(50, 8, 0.5).source != a.source);
    }
    SUBCASE("rate 0 is a pure dictionary task") {
        auto c = synth_generate(200, 1, 0.0);
        for (std::size_t i = 0; i < c.source.size(); ++i) {
            auto s = split_tokens(c.source[i]);
            auto t = split_tokens(c.target[i]);
            REQUIRE(s.size() == t.size());
            for (std::size_t j = 0; j < s.size(); ++j) CHECK(t[j] == s[j] + ".de");
        }
    }
    SUBCASE("senses are balanced") {
        auto c = synth_generate(1000, 3, 1.0);
        std::size_t red = 0, amb = 0;
        for (std::size_t i = 0; i < c.target.size(); ++i) {
            auto t = split_tokens(c.target[i]);
            for (const auto& tok : t) {
                if (tok == sense_token(PatchColor::Red)) ++red;
                if (tok == sense_token(PatchColor::Red) || tok == sense_token(PatchColor::Blue)) ++amb;
            }
        }
        CHECK(amb == 1000);
        CHECK(std::fabs(static_cast<double>(red) / 1000.0 - 0.5) <= 0.05);
    }
    SUBCASE("(source, colour) -> target is a function") {
        SynthOptions o;
        auto c = synth_generate(1000, 4, 0.5, o);
        o.split = SynthSplit::Transfer;
        auto t = synth_generate(300, 5, 0.5, o);
        std::map<std::pair<std::string, int>, std::string> seen;
        auto scan = [&](const SynthCorpus& k) {
            for (std::size_t i = 0; i < k.source.size(); ++i) {
                auto key = std::make_pair(k.source[i], static_cast<int>(k.meta[i].color));
                auto [it, fresh] = seen.emplace(key, k.target[i]);
                if (!fresh) CHECK(it->second == k.target[i]);
            }
        };
        scan(c);
        scan(t);
    }
    SUBCASE("patch colour dominates the image") {
        auto c = synth_generate(20, 9, 1.0);
        for (std::size_t i = 0; i < c.images.size(); ++i) {
            const auto& img = c.images[i];
            CHECK(img.shape() == Shape{3, 32, 32});
            double r = 0, b = 0;
            for (std::size_t k = 0; k < 32 * 32; ++k) {
                r += img.data()[k];
                b += img.data()[2 * 32 * 32 + k];
                CHECK(img.data()[k] >= 0.0);
                CHECK(img.data()[k] <= 1.0);
            }
            if (c.meta[i].color == PatchColor::Red)
                CHECK(r > b);
            else
                CHECK(b > r);
        }
    }
    SUBCASE("split structure") {
        SynthOptions o;
        auto train = synth_generate(500, 2, 0.5, o);
        for (std::size_t i = 0; i < train.meta.size(); ++i) {
            const bool has_bank = split_tokens(train.source[i])[0] != kAmbiguousWord &&
                                  train.source[i].find(kAmbiguousWord) != std::string::npos;
            CHECK(has_bank == train.meta[i].ambiguous);
            if (train.meta[i].ambiguous) CHECK(train.meta[i].cue < o.num_cues / 2);
        }
        o.split = SynthSplit::Transfer;
        auto transfer = synth_generate(100, 2, 0.0, o);
        for (const auto& m : transfer.meta) {
            CHECK(m.ambiguous);
            CHECK(m.cue >= o.num_cues / 2);
        }
    }
    CHECK_THROWS_AS(synth_generate(0, 1, 0.5), ContractError);
}

TEST_CASE("ambiguous accuracy") {
    std::vector<SynthMeta> meta(3);
    meta[0] = {0, PatchColor::Red, true};
    meta[1] = {1, PatchColor::Blue, true};
    meta[2] = {2, PatchColor::Red, false};
    CHECK(ambiguous_accuracy({"a bank.red", "bank.red bank.blue", "x"}, meta) == doctest::Approx(0.5));
}

TEST_CASE("write_corpus round-trips through load_corpus") {
    auto dir = scratch("write");
    auto c = synth_generate(5, 1, 1.0, {.image_size = 8});
    write_corpus(dir, c);
    auto all = c.source;
    all.insert(all.end(), c.target.begin(), c.target.end());
    auto loaded = load_corpus(dir / "src.txt", dir / "tgt.txt", dir / "images", Vocabulary::build(all), 8);
    REQUIRE(loaded.size() == 5);
    REQUIRE(loaded[0].image.has_value());
    // f32 payload: within single precision of the source.
    for (std::size_t k = 0; k < loaded[0].image->numel(); ++k)
        CHECK(loaded[0].image->data()[k] == doctest::Approx(c.images[0].data()[k]).epsilon(1e-6));
}
