#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ikd/errors.hpp"
#include "ikd/eval.hpp"
#include "ikd/random.hpp"

using namespace ikd;

TEST_CASE("bleu: repeated word is clipped to its reference count") {
    auto r = bleu4({"the the the the the the the"}, {"the cat is on the mat"});
    CHECK(r.matches[0] == 2);
    CHECK(r.totals[0] == 7);
    CHECK(r.precisions[0] == doctest::Approx(2.0 / 7.0).epsilon(1e-12));
    CHECK(r.precisions[1] == 0.0);
    CHECK(r.brevity_penalty == doctest::Approx(1.0));
    CHECK(r.score == 0.0);
}

TEST_CASE("bleu: case-folded hypothesis longer than the reference") {
    // unigrams 6/7, bigrams 5/6, trigrams 4/5, 4-grams 3/4; BP = 1
    // BLEU = 100 * (3/7)^(1/4) = 80.9107
    auto r = bleu4({"The cat sat on the mat today"}, {"the cat sat on THE mat"});
    CHECK(r.precisions[0] == doctest::Approx(0.857143).epsilon(1e-5));
    CHECK(r.precisions[1] == doctest::Approx(0.833333).epsilon(1e-5));
    CHECK(r.precisions[2] == doctest::Approx(0.8).epsilon(1e-5));
    CHECK(r.precisions[3] == doctest::Approx(0.75).epsilon(1e-5));
    CHECK(r.brevity_penalty == 1.0);
    CHECK(std::fabs(r.score - 80.9107) < 5e-5);
}

TEST_CASE("bleu: corpus-level counts with a brevity penalty") {
    // c = 9, r = 11, all n-grams match: BP = exp(1 - 11/9) = 0.800737
    auto r = bleu4({"a b c d e", "x y z w"}, {"a b c d e f g", "x y z w"});
    CHECK(r.hyp_length == 9);
    CHECK(r.ref_length == 11);
    CHECK(r.matches == std::array<std::size_t, 4>{9, 7, 5, 3});
    CHECK(r.totals == std::array<std::size_t, 4>{9, 7, 5, 3});
    CHECK(std::fabs(r.brevity_penalty - 0.800737) < 5e-5);
    CHECK(std::fabs(r.score - 80.0737) < 5e-5);
}

TEST_CASE("bleu: identity scores 100 and an empty corpus is an error") {
    std::vector<std::string> lines{"ein hund rennt durch das gras", "zwei katzen sitzen auf dem dach heute"};
    CHECK(bleu4(lines, lines).score == doctest::Approx(100.0).epsilon(1e-12));
    CHECK_THROWS_AS(bleu4({}, {}), ContractError);
    CHECK_THROWS_AS(bleu4({"a"}, {"a", "b"}), ContractError);
    CHECK(bleu4({""}, {"a b c d"}).score == 0.0);
}

namespace {

// Rank of gallery i among all gallery items for query i: sort by
// (similarity desc, index asc) and locate i.
std::size_t enumerated_rank(const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& g,
                            std::size_t i) {
    auto cos = [](const std::vector<double>& a, const std::vector<double>& b) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t k = 0; k < a.size(); ++k) ab += a[k] * b[k], aa += a[k] * a[k], bb += b[k] * b[k];
        return (aa < 1e-24 || bb < 1e-24) ? 0.0 : ab / std::sqrt(aa * bb);
    };
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t j = 0; j < g.size(); ++j) scored.push_back({cos(q[i], g[j]), j});
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t r = 0; r < scored.size(); ++r)
        if (scored[r].second == i) return r;
    return scored.size();
}

}  // namespace

TEST_CASE("retrieval matches exhaustive enumeration") {
    const std::vector<std::size_t> ks{1, 5, 10, 15};
    for (std::uint64_t seed : {3u, 11u, 29u}) {
        Rng rng(seed);
        std::vector<std::vector<double>> q(20, std::vector<double>(6)), g(20, std::vector<double>(6));
        for (std::size_t i = 0; i < 20; ++i)
            for (std::size_t k = 0; k < 6; ++k) {
                g[i][k] = rng.normal();
                q[i][k] = g[i][k] + 1.2 * rng.normal();
            }
        // Exact ties: duplicated gallery items.
        g[7] = g[3];
        g[12] = g[3];
        auto rep = retrieval_rk(q, g, ks);
        REQUIRE(rep.recalls.size() == ks.size());
        for (std::size_t k = 0; k < ks.size(); ++k) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < 20; ++i) hits += enumerated_rank(q, g, i) < ks[k];
            CHECK(rep.recalls[k] == doctest::Approx(hits / 20.0));
            if (k) CHECK(rep.recalls[k] >= rep.recalls[k - 1]);
        }
    }
}

TEST_CASE("retrieval tie goes to the lower gallery index") {
    std::vector<std::vector<double>> g{{1, 0}, {1, 0}, {0, 1}};
    std::vector<std::vector<double>> q{{1, 0}, {1, 0}, {0, 1}};
    auto rep = retrieval_rk(q, g, {1});
    // Query 1 ties with gallery 0, which ranks first.
    CHECK(rep.recalls[0] == doctest::Approx(2.0 / 3.0));
    auto m = cosine_matrix(q, g);
    CHECK(m.shape() == Shape{3, 3});
    CHECK(m.data()[2] == doctest::Approx(0.0));
    CHECK_THROWS_AS(retrieval_rk(q, {{1, 0}}, {1}), ContractError);
}

TEST_CASE("default ablation grid shape") {
    auto g = default_ablation_grid();
    CHECK(g.size() == 11);
    CHECK(g.front().overlay == Json::object());
    CHECK(default_ablation_grid(true).size() == 13);
    std::size_t both = 0;
    for (const auto& c : g)
        if (c.overlay.contains("distill") && c.overlay["distill"].value("enable_irm", true) == false &&
            c.overlay["distill"].value("enable_iam", true) == false)
            ++both;
    CHECK(both == 1);
    auto parsed = parse_grid(Json{{"cells", {{{"name", "x"}, {"overlay", {{"train", {{"lr", 0.01}}}}}}}}});
    CHECK(parsed.size() == 1);
    CHECK_THROWS_AS(parse_grid(Json::array()), ConfigError);
    CHECK(round2(1.005000001) == doctest::Approx(1.01));
    CHECK(round2(-0.444) == doctest::Approx(-0.44));
}

namespace {

Config tiny_config() {
    Config c;
    c.model.d_model = 8;
    c.model.heads = 2;
    c.model.enc_layers = 1;
    c.model.dec_layers = 1;
    c.model.ffn = 16;
    c.model.max_len = 24;
    c.vision.image_size = 8;
    c.vision.stem_channels = 4;
    c.vision.stage_channels = {4, 8};
    c.vision.bottleneck_divisor = 2;
    c.train.epochs = 1;
    c.train.batch_size = 4;
    c.train.max_steps = 3;
    return c;
}

}  // namespace

TEST_CASE("ablation runs every cell, isolates failures and logs zero KD") {
    SynthOptions so;
    so.image_size = 8;
    auto synth = synth_generate(12, 5, 0.5, so);
    std::vector<std::string> lines = synth.source;
    lines.insert(lines.end(), synth.target.begin(), synth.target.end());
    Vocabulary vocab = Vocabulary::build(lines);
    std::vector<TripletExample> corpus;
    for (std::size_t i = 0; i < synth.source.size(); ++i)
        corpus.push_back(make_example(synth.source[i], synth.target[i], vocab, synth.images[i]));

    auto grid = default_ablation_grid();
    grid.push_back({"broken", Json{{"model", {{"heads", 3}}}}});
    AblationData data{&corpus, &corpus, &vocab, &synth.meta};
    auto table = ablate(grid, tiny_config(), data, 2);
    REQUIRE(table.rows.size() == 12);
    for (std::size_t i = 0; i < 11; ++i) {
        CAPTURE(table.rows[i].name);
        CHECK(table.rows[i].ok);
        CHECK(table.rows[i].steps == 3);
        CHECK(table.rows[i].delta == doctest::Approx(round2(round2(table.rows[i].bleu) - round2(table.rows[0].bleu))));
    }
    CHECK_FALSE(table.rows.back().ok);
    CHECK_FALSE(table.rows.back().error.empty());
    for (const auto& r : table.rows) {
        if (r.name == "w/o (IrM-KD+IaM-KD)") CHECK(r.kd_zero_every_step);
        if (r.name.rfind("base", 0) == 0) CHECK_FALSE(r.kd_zero_every_step);
    }
    auto j = table.to_json();
    CHECK(j["rows"].size() == 12);
    CHECK(j["rows"][11].contains("error"));
    CHECK(table.to_text().find("w/o IaM-KD") != std::string::npos);
}

TEST_CASE("degradation reports masked fraction and drop") {
    SynthOptions so;
    so.image_size = 8;
    auto synth = synth_generate(6, 9, 1.0, so);
    std::vector<std::string> lines = synth.source;
    lines.insert(lines.end(), synth.target.begin(), synth.target.end());
    Vocabulary vocab = Vocabulary::build(lines);
    std::vector<TripletExample> corpus;
    std::size_t words = 0;
    for (std::size_t i = 0; i < synth.source.size(); ++i) {
        corpus.push_back(make_example(synth.source[i], synth.target[i], vocab));
        words += split_tokens(synth.source[i]).size();
    }
    IkdModel model(tiny_config(), vocab.size());
    auto rep = degradation_eval(model, corpus, synth_cue_tokens(so), vocab);
    CHECK(rep.masked_tokens == 6);
    CHECK(rep.total_tokens == words);
    CHECK(rep.masked_fraction == doctest::Approx(6.0 / static_cast<double>(words)));
    CHECK(rep.drop == doctest::Approx(rep.clean.score - rep.masked.score));
    CHECK(rep.mode == "zero-shot");
    CHECK(to_json(rep)["mode"] == "zero-shot");
}
