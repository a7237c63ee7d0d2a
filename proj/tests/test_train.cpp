#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "ikd/errors.hpp"
#include "ikd/eval.hpp"
#include "ikd/ops.hpp"
#include "ikd/train.hpp"

using namespace ikd;
namespace fs = std::filesystem;

namespace {

Config small_config() {
    Config c;
    c.model.d_model = 8;
    c.model.heads = 2;
    c.model.enc_layers = 1;
    c.model.dec_layers = 1;
    c.model.ffn = 16;
    c.model.max_len = 24;
    c.vision.image_size = 8;
    c.vision.stem_channels = 4;
    c.vision.stage_channels = {4, 6};
    c.vision.bottleneck_divisor = 2;
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c.train.lr = 3e-3;
    return c;
}

struct Fixture {
    SynthCorpus synth;
    Vocabulary vocab;
    std::vector<TripletExample> corpus;
};

Fixture make_fixture(std::size_t n, std::uint64_t seed = 3) {
    Fixture f;
    SynthOptions so;
    so.image_size = 8;
    so.num_cues = 8;
    so.num_nouns = 4;
    f.synth = synth_generate(n, seed, 0.5, so);
    std::vector<std::string> lines = f.synth.source;
    lines.insert(lines.end(), f.synth.target.begin(), f.synth.target.end());
    f.vocab = Vocabulary::build(lines);
    for (std::size_t i = 0; i < n; ++i)
        f.corpus.push_back(make_example(f.synth.source[i], f.synth.target[i], f.vocab, f.synth.images[i]));
    return f;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("ikd_test_train_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace

TEST_CASE("joint loss is the sum of its parts") {
    auto f = make_fixture(6);
    IkdModel model(small_config(), f.vocab.size());
    auto batch = make_batch(f.corpus, all_indices(6));
    DistillConfig d;
    auto l = joint_loss(batch, model, d);
    CHECK(l.j_trans.item() > 0.0);
    CHECK(l.irm.item() > 0.0);
    CHECK(l.iam.item() > 0.0);
    CHECK(l.total.item() == doctest::Approx(l.j_trans.item() + l.irm.item() + l.iam.item()).epsilon(1e-14));
    CHECK(l.j_trans.item() == model.translation_loss(batch).sum.item());

    for (auto g : {Granularity::Block, Granularity::Layer})
        for (auto s : {Similarity::L1, Similarity::Linf, Similarity::Cosine, Similarity::KL}) {
            d.granularity = g;
            d.similarity = s;
            auto x = joint_loss(batch, model, d);
            CHECK(x.irm.item() >= 0.0);
            CHECK(x.iam.item() >= 0.0);
        }
}

TEST_CASE("disabled distillation leaves the translation loss bit-exact") {
    auto f = make_fixture(6);
    IkdModel model(small_config(), f.vocab.size());
    auto batch = make_batch(f.corpus, all_indices(6));
    DistillConfig off;
    off.enable_irm = off.enable_iam = false;
    auto l = joint_loss(batch, model, off);
    CHECK(l.total.item() == model.translation_loss(batch).sum.item());
    CHECK(l.irm.item() == 0.0);
    CHECK(l.iam.item() == 0.0);

    // Text-only batches are fine without distillation, not with it.
    std::vector<TripletExample> bare = f.corpus;
    for (auto& e : bare) e.image.reset();
    auto text_batch = make_batch(bare, all_indices(6));
    CHECK_NOTHROW(joint_loss(text_batch, model, off));
    CHECK_THROWS_AS(joint_loss(text_batch, model, DistillConfig{}), ContractError);
}

TEST_CASE("adam matches a scalar reference") {
    TrainConfig cfg;
    cfg.lr = 0.1;
    Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
    Adam adam({w}, cfg);
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
    for (int t = 1; t <= 5; ++t) {
        w.zero_grad();
        Tensor loss = sum(mul(w, w));
        loss.backward();
        adam.step();
        for (int k = 0; k < 2; ++k) {
            double g = 2 * ref[k];
            m[k] = 0.9 * m[k] + 0.1 * g;
            v[k] = 0.98 * v[k] + 0.02 * g * g;
            double mh = m[k] / (1 - std::pow(0.9, t)), vh = v[k] / (1 - std::pow(0.98, t));
            ref[k] -= 0.1 * mh / (std::sqrt(vh) + 1e-9);
        }
        CHECK(w.data()[0] == doctest::Approx(ref[0]).epsilon(1e-14));
        CHECK(w.data()[1] == doctest::Approx(ref[1]).epsilon(1e-14));
    }
    CHECK(adam.steps() == 5);
}

TEST_CASE("training overfits a tiny corpus") {
    auto f = make_fixture(4, 8);
    Config c = small_config();
    c.model.d_model = 16;
    c.model.ffn = 32;
    c.train.batch_size = 4;
    c.train.epochs = 500;
    c.train.lr = 1e-2;
    IkdModel model(c, f.vocab.size());
    Trainer trainer(model, f.corpus);
    auto logs = trainer.fit();
    CHECK(logs.size() == 500);
    const double first = logs.front().j_trans, last = logs.back().j_trans;
    CHECK(last < 0.05 * first);
    auto hyps = translate_corpus(model, f.corpus, f.vocab);
    CHECK(hyps == reference_strings(f.corpus, f.vocab));
}

TEST_CASE("same seed gives bit-identical trajectories and teacher stays frozen") {
    auto f = make_fixture(10);
    Config c = small_config();
    c.train.max_steps = 6;
    auto run = [&](std::uint64_t* checksum) {
        IkdModel model(c, f.vocab.size());
        const auto before = model.teacher().params().checksum();
        Trainer trainer(model, f.corpus);
        auto logs = trainer.fit();
        CHECK(model.teacher().params().checksum() == before);
        if (checksum) *checksum = model.params().checksum();
        return logs;
    };
    std::uint64_t a = 0, b = 0;
    auto la = run(&a), lb = run(&b);
    CHECK(la.size() == 6);
    CHECK(la == lb);
    CHECK(a == b);

    Config other = c;
    other.train.seed = 2;
    IkdModel m2(other, f.vocab.size());
    Trainer t2(m2, f.corpus);
    CHECK(t2.fit() != la);
}

TEST_CASE("checkpoint resume matches the uninterrupted run") {
    auto f = make_fixture(10);
    Config c = small_config();
    c.train.epochs = 4;
    c.train.max_steps = 10;

    IkdModel full(c, f.vocab.size());
    Trainer tf(full, f.corpus);
    auto whole = tf.fit();
    REQUIRE(whole.size() == 10);

    auto dir = scratch("ckpt");
    IkdModel part(c, f.vocab.size());
    Trainer tp(part, f.corpus);
    auto head = tp.fit(4);
    tp.save(dir, f.vocab);
    CHECK(fs::exists(dir / "manifest.json"));
    CHECK(fs::exists(dir / "vocab.txt"));

    Config later = c;
    later.train.epochs = 9;
    IkdModel resumed(later, f.vocab.size());
    Trainer tr(resumed, f.corpus);
    tr.load(dir);
    CHECK(tr.step() == 4);
    std::vector<StepLog> tail;
    tr.fit(10, [&](const StepLog& s) { tail.push_back(s); });
    std::vector<StepLog> joined = head;
    joined.insert(joined.end(), tail.begin(), tail.end());
    CHECK(joined == whole);
    CHECK(resumed.params().checksum() == full.params().checksum());

    auto info = read_checkpoint_info(dir);
    CHECK(info.step == 4);
    CHECK(info.vocab == f.vocab);
    Vocabulary vocab;
    auto loaded = load_model(dir, &vocab);
    CHECK(vocab == f.vocab);
    CHECK(loaded->params().checksum() == part.params().checksum());
    fs::remove_all(dir);
}

TEST_CASE("checkpoints reject mismatched configs and corrupt manifests") {
    auto f = make_fixture(6);
    Config c = small_config();
    IkdModel model(c, f.vocab.size());
    Trainer t(model, f.corpus);
    t.fit(1);
    auto dir = scratch("bad");
    t.save(dir, f.vocab);

    Config wider = c;
    wider.model.d_model = 16;
    IkdModel other(wider, f.vocab.size());
    Trainer to(other, f.corpus);
    const auto before = other.params().checksum();
    CHECK_THROWS_AS(to.load(dir), ConfigError);
    CHECK(other.params().checksum() == before);

    Config lr = c;
    lr.train.lr = 1.0;
    CHECK_FALSE(resume_compatible(c, lr));
    Config ep = c;
    ep.train.epochs = 50;
    ep.train.max_steps = 3;
    ep.train.checkpoint_interval = 7;
    CHECK(resume_compatible(c, ep));

    {
        std::ofstream os(dir / "manifest.json", std::ios::trunc);
        os << "{ not json";
    }
    CHECK_THROWS_AS(t.load(dir), FormatError);
    {
        std::ofstream os(dir / "manifest.json", std::ios::trunc);
        os << R"({"format": "ikd-checkpoint", "version": 99})";
    }
    CHECK_THROWS_AS(t.load(dir), FormatError);
    CHECK_THROWS_AS(t.load(scratch("missing")), IoError);
    fs::remove_all(dir);
}

TEST_CASE("non-finite loss raises a divergence error") {
    auto f = make_fixture(4);
    IkdModel model(small_config(), f.vocab.size());
    auto b = model.params().at("decoder.b_h");
    b.mutable_data()[5] = std::numeric_limits<double>::quiet_NaN();
    Trainer t(model, f.corpus);
    CHECK_THROWS_AS(t.fit(1), DivergenceError);
}

TEST_CASE("train writes metrics and a final checkpoint") {
    auto f = make_fixture(8);
    Config c = small_config();
    c.train.max_steps = 3;
    c.train.checkpoint_interval = 2;
    IkdModel model(c, f.vocab.size());
    auto dir = scratch("run");
    fs::create_directories(dir);
    TrainOptions opt;
    opt.metrics_path = dir / "metrics.jsonl";
    opt.checkpoint_dir = dir / "ckpt";
    opt.vocab = &f.vocab;
    auto logs = train(model, f.corpus, opt);
    CHECK(logs.size() == 3);
    auto lines = read_lines(dir / "metrics.jsonl");
    REQUIRE(lines.size() == 3);
    auto j = Json::parse(lines[2]);
    CHECK(j["step"] == 3);
    for (const char* k : {"J_trans", "Loss_IrM", "Loss_IaM", "total"}) CHECK(j.contains(k));
    CHECK(read_checkpoint_info(dir / "ckpt").step == 3);
    fs::remove_all(dir);
}
