// ikd-mmt: data preparation, training, image-free translation and analysis.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ikd/errors.hpp"
#include "ikd/eval.hpp"
#include "ikd/gradsuite.hpp"
#include "ikd/ops.hpp"
#include "ikd/tensor_io.hpp"
#include "ikd/train.hpp"
#include "ikd/version.hpp"

namespace fs = std::filesystem;
using namespace ikd;

namespace {

class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct RunManifest {
    std::string command;
    Json config = nullptr;
    Json inputs = Json::object();
    Json outputs = Json::object();
    std::optional<std::uint64_t> seed;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void write(const fs::path& path) const {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        Json j{{"command", command},
               {"config", config},
               {"inputs", inputs},
               {"outputs", outputs},
               {"seed", seed ? Json(*seed) : Json(nullptr)},
               {"version", kVersion},
               {"wall_clock_seconds", secs}};
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw IoError("cannot write run manifest " + path.string());
        os << j.dump(2) << '\n';
    }
};

fs::path manifest_beside(const fs::path& out) {
    return out.parent_path() / (out.filename().string() + ".manifest.json");
}

void write_json(const fs::path& path, const Json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& s) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << s;
}

// Global --seed; unset means "use what the config or defaults say".
std::optional<std::uint64_t> g_seed;

Config resolve_config(const std::string& path, const std::string& overlay) {
    Config c = path.empty() ? Config{} : load_config(path);
    if (!overlay.empty()) {
        Json patch;
        try {
            patch = Json::parse(overlay);
        } catch (const Json::parse_error& e) {
            throw UsageError(std::string("--set is not valid JSON: ") + e.what());
        }
        c = apply_overlay(c, patch);
    }
    if (g_seed) {
        c.train.seed = *g_seed;
        c.model.seed = *g_seed;
    }
    validate(c);
    return c;
}

std::vector<TripletExample> text_only_examples(const std::vector<std::string>& lines, const Vocabulary& vocab) {
    std::vector<TripletExample> out;
    for (const auto& l : lines) {
        TripletExample e;
        e.source = vocab.encode(l);
        e.target = {Vocabulary::kBos, Vocabulary::kEos};
        out.push_back(std::move(e));
    }
    return out;
}

// --- prepare ---------------------------------------------------------------

struct PrepareArgs {
    std::size_t synthetic = 0;
    std::string src, tgt, images, out, vocab_out, vocab_in, split = "train";
    double ambiguity_rate = 0.5;
    std::size_t image_size = 32, num_cues = 48, num_nouns = 16;
};

void cmd_prepare(const PrepareArgs& a) {
    const bool synth = a.synthetic > 0;
    const bool real = !a.src.empty() || !a.tgt.empty();
    if (synth == real) throw UsageError("prepare: give exactly one of --synthetic N or --src/--tgt");
    if (real && (a.src.empty() || a.tgt.empty())) throw UsageError("prepare: --src and --tgt go together");
    const fs::path out = a.out;
    fs::create_directories(out);
    const fs::path vocab_path = a.vocab_out.empty() ? out / "vocab.txt" : fs::path(a.vocab_out);
    RunManifest m;
    m.command = "prepare";
    m.seed = g_seed.value_or(1);

    std::vector<std::string> src, tgt;
    if (synth) {
        SynthOptions so;
        so.image_size = a.image_size;
        so.num_cues = a.num_cues;
        so.num_nouns = a.num_nouns;
        if (a.split == "transfer")
            so.split = SynthSplit::Transfer;
        else if (a.split != "train")
            throw UsageError("prepare: --split must be train or transfer");
        auto corpus = synth_generate(a.synthetic, *m.seed, a.ambiguity_rate, so);
        write_corpus(out, corpus);
        Json meta = Json::array();
        for (const auto& x : corpus.meta)
            meta.push_back({{"cue", x.cue}, {"color", x.color == PatchColor::Red ? "red" : "blue"}, {"ambiguous", x.ambiguous}});
        write_json(out / "meta.json", meta);
        src = corpus.source;
        tgt = corpus.target;
        m.inputs = {{"synthetic", a.synthetic},
                    {"split", a.split},
                    {"ambiguity_rate", a.ambiguity_rate},
                    {"image_size", a.image_size},
                    {"num_cues", a.num_cues},
                    {"num_nouns", a.num_nouns}};
        m.outputs = {{"src", (out / "src.txt").string()},
                     {"tgt", (out / "tgt.txt").string()},
                     {"images", (out / "images").string()},
                     {"meta", (out / "meta.json").string()}};
    } else {
        src = read_lines(a.src);
        tgt = read_lines(a.tgt);
        if (src.size() != tgt.size())
            throw AlignmentError(a.src + " has " + std::to_string(src.size()) + " lines but " + a.tgt + " has " +
                                 std::to_string(tgt.size()));
        write_lines(out / "src.txt", src);
        write_lines(out / "tgt.txt", tgt);
        m.inputs = {{"src", a.src}, {"tgt", a.tgt}};
        m.outputs = {{"src", (out / "src.txt").string()}, {"tgt", (out / "tgt.txt").string()}};
        if (!a.images.empty()) {
            // Validate every image before copying any.
            Vocabulary probe = Vocabulary::build(src);
            for (const auto& l : tgt)
                for (const auto& t : split_tokens(l))
                    if (!probe.contains(t)) probe.add(t);
            load_corpus(out / "src.txt", out / "tgt.txt", fs::path(a.images), probe);
            fs::create_directories(out / "images");
            for (std::size_t i = 0; i < src.size(); ++i) {
                const auto name = std::to_string(i) + ".tnsr";
                fs::copy_file(fs::path(a.images) / name, out / "images" / name, fs::copy_options::overwrite_existing);
            }
            m.inputs["images"] = a.images;
            m.outputs["images"] = (out / "images").string();
        }
    }

    Vocabulary vocab;
    if (a.vocab_in.empty()) {
        std::vector<std::string> all = src;
        all.insert(all.end(), tgt.begin(), tgt.end());
        vocab = Vocabulary::build(all);
        vocab.save(vocab_path);
        m.outputs["vocab"] = vocab_path.string();
    } else {
        vocab = Vocabulary::load(a.vocab_in);
        m.inputs["vocab"] = a.vocab_in;
    }
    m.outputs["vocab_size"] = vocab.size();
    m.write(out / "run_manifest.json");
    std::cout << "prepared " << src.size() << " examples in " << out.string() << " (vocabulary " << vocab.size()
              << ")\n";
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config, overlay, data, src, tgt, images, vocab, out, resume;
};

void cmd_train(const TrainArgs& a) {
    Config cfg = resolve_config(a.config, a.overlay);
    const fs::path data = a.data;
    const fs::path src = a.src.empty() ? data / "src.txt" : fs::path(a.src);
    const fs::path tgt = a.tgt.empty() ? data / "tgt.txt" : fs::path(a.tgt);
    if (a.src.empty() != a.tgt.empty() || (a.data.empty() && a.src.empty()))
        throw UsageError("train: give --data DIR or both --src and --tgt");
    fs::path vocab_path = a.vocab;
    if (vocab_path.empty()) vocab_path = data.empty() ? fs::path() : data / "vocab.txt";
    Vocabulary vocab;
    if (!vocab_path.empty() && fs::exists(vocab_path)) {
        vocab = Vocabulary::load(vocab_path);
    } else {
        std::vector<std::string> all = read_lines(src), t = read_lines(tgt);
        all.insert(all.end(), t.begin(), t.end());
        vocab = Vocabulary::build(all);
    }
    auto corpus = load_corpus(src, tgt, fs::path(a.images), vocab, cfg.vision.image_size);

    const fs::path out = a.out;
    fs::create_directories(out);
    RunManifest m;
    m.command = "train";
    m.config = to_json(cfg);
    m.seed = cfg.train.seed;
    m.inputs = {{"src", src.string()}, {"tgt", tgt.string()}, {"images", a.images}, {"examples", corpus.size()}};
    if (!a.resume.empty()) m.inputs["resume"] = a.resume;

    IkdModel model(cfg, vocab.size());
    TrainOptions opt;
    opt.metrics_path = out / "metrics.jsonl";
    opt.checkpoint_dir = out / "checkpoint";
    opt.vocab = &vocab;
    if (!a.resume.empty()) opt.resume_from = fs::path(a.resume);
    auto logs = train(model, corpus, opt);
    m.outputs = {{"checkpoint", (out / "checkpoint").string()},
                 {"metrics", (out / "metrics.jsonl").string()},
                 {"steps", logs.empty() ? 0 : logs.back().step}};
    if (!logs.empty()) m.outputs["final"] = to_json(logs.back());
    m.write(out / "run_manifest.json");
    if (!logs.empty()) {
        const auto& s = logs.back();
        std::cout << "step " << s.step << "  total " << s.total << "  J_trans " << s.j_trans << "  IrM " << s.irm
                  << "  IaM " << s.iam << '\n';
    }
    std::cout << "checkpoint: " << (out / "checkpoint").string() << '\n';
}

// --- translate -------------------------------------------------------------

struct TranslateArgs {
    std::string checkpoint, src, out;
    std::size_t beam = 1, max_len = 0;
};

void cmd_translate(const TranslateArgs& a) {
    Vocabulary vocab;
    auto model = load_model(a.checkpoint, &vocab);
    auto lines = read_lines(a.src);
    std::vector<std::string> hyps(lines.size());
    std::vector<std::vector<int>> sources;
    std::vector<std::size_t> where;
    std::size_t max_len = a.max_len;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto ids = vocab.encode(lines[i]);
        if (ids.empty()) continue;
        if (!a.max_len) max_len = std::max(max_len, default_max_len(ids, model->config().model));
        sources.push_back(std::move(ids));
        where.push_back(i);
    }
    if (!sources.empty()) {
        auto out = model->translate(sources, a.beam, std::max<std::size_t>(max_len, 1));
        for (std::size_t k = 0; k < out.size(); ++k) hyps[where[k]] = vocab.decode(out[k]);
    }
    write_lines(a.out, hyps);
    RunManifest m;
    m.command = "translate";
    m.config = to_json(model->config());
    m.seed = g_seed;
    m.inputs = {{"checkpoint", a.checkpoint}, {"src", a.src}, {"beam", a.beam}, {"max_len", a.max_len}};
    m.outputs = {{"hypotheses", a.out}, {"lines", hyps.size()}};
    m.write(manifest_beside(a.out));
    std::cout << "translated " << hyps.size() << " lines -> " << a.out << '\n';
}

// --- evaluate --------------------------------------------------------------

struct EvaluateArgs {
    std::string hyp, ref, out;
};

void cmd_evaluate(const EvaluateArgs& a) {
    auto report = bleu4(read_lines(a.hyp), read_lines(a.ref));
    const fs::path out = a.out.empty() ? fs::path(a.hyp + ".bleu.json") : fs::path(a.out);
    write_json(out, to_json(report));
    RunManifest m;
    m.command = "evaluate";
    m.seed = g_seed;
    m.inputs = {{"hyp", a.hyp}, {"ref", a.ref}};
    m.outputs = {{"report", out.string()}, {"bleu", report.score}};
    m.write(manifest_beside(out));
    std::cout << std::fixed << std::setprecision(2) << report.score << '\n';
    std::cout.unsetf(std::ios::fixed);
    std::cout << "p1-p4 " << report.precisions[0] << ' ' << report.precisions[1] << ' ' << report.precisions[2] << ' '
              << report.precisions[3] << "  BP " << report.brevity_penalty << "  hyp_len " << report.hyp_length
              << "  ref_len " << report.ref_length << '\n';
}

// --- retrieve / export-features ---------------------------------------------

std::vector<TripletExample> corpus_from_dir(const fs::path& dir, const Vocabulary& vocab, bool images,
                                            std::size_t image_size) {
    return load_corpus(dir / "src.txt", dir / "tgt.txt",
                       images ? std::optional<fs::path>(dir / "images") : std::nullopt, vocab, image_size);
}

std::vector<std::size_t> range(std::size_t a, std::size_t b) {
    std::vector<std::size_t> v;
    for (std::size_t i = a; i < b; ++i) v.push_back(i);
    return v;
}

// Generated maps m [N, C, p, p] for every source sentence.
Tensor multimodal_maps(const IkdModel& model, const std::vector<TripletExample>& corpus) {
    NoGradGuard ng;
    std::vector<Tensor> parts;
    for (std::size_t s = 0; s < corpus.size(); s += 32) {
        auto batch = make_batch(corpus, range(s, std::min(corpus.size(), s + 32)));
        parts.push_back(model.encode_source(batch).m.map);
    }
    return concat(parts, 0);
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
    const std::size_t n = t.dim(0), w = t.numel() / n;
    std::vector<std::vector<double>> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i].assign(t.data().begin() + i * w, t.data().begin() + (i + 1) * w);
    return out;
}

struct RetrieveArgs {
    std::string checkpoint, corpus, out;
};

void cmd_retrieve(const RetrieveArgs& a) {
    Vocabulary vocab;
    auto model = load_model(a.checkpoint, &vocab);
    auto corpus = corpus_from_dir(a.corpus, vocab, true, model->config().vision.image_size);
    auto queries = rows_of(multimodal_maps(*model, corpus));
    std::vector<Tensor> visual;
    {
        NoGradGuard ng;
        for (std::size_t s = 0; s < corpus.size(); s += 32) {
            auto batch = make_batch(corpus, range(s, std::min(corpus.size(), s + 32)));
            auto trace = model->teacher().forward(*batch.images);
            visual.push_back(model->teacher().last(trace));
        }
    }
    auto gallery = rows_of(concat(visual, 0));
    auto cos = cosine_matrix(queries, gallery);
    auto report = retrieval_from_matrix(cos, {1, 5, 10, 15});
    const fs::path out = a.out;
    fs::create_directories(out);
    write_json(out / "retrieval.json", to_json(report));
    write_tensor(out / "cosine.tnsr", cos, TensorPrecision::Float32);
    RunManifest m;
    m.command = "retrieve";
    m.config = to_json(model->config());
    m.seed = g_seed;
    m.inputs = {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}};
    m.outputs = {{"report", (out / "retrieval.json").string()}, {"cosine", (out / "cosine.tnsr").string()}};
    m.write(out / "run_manifest.json");
    std::cout << to_json(report)["recall"].dump() << '\n';
}

struct ExportFeaturesArgs {
    std::string checkpoint, src, out;
};

void cmd_export_features(const ExportFeaturesArgs& a) {
    Vocabulary vocab;
    auto model = load_model(a.checkpoint, &vocab);
    auto lines = read_lines(a.src);
    auto corpus = text_only_examples(lines, vocab);
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus[i].source.empty()) throw ContractError(a.src + ":" + std::to_string(i + 1) + ": empty source line");
    auto maps = multimodal_maps(*model, corpus);
    const fs::path out = a.out;
    fs::create_directories(out);
    write_tensor(out / "features.tnsr", maps, TensorPrecision::Float32);
    RunManifest m;
    m.command = "export-features";
    m.config = to_json(model->config());
    m.seed = g_seed;
    m.inputs = {{"checkpoint", a.checkpoint}, {"src", a.src}};
    m.outputs = {{"features", (out / "features.tnsr").string()}, {"shape", maps.shape()}};
    m.write(out / "run_manifest.json");
    std::cout << "features " << shape_str(maps.shape()) << " -> " << (out / "features.tnsr").string() << '\n';
}

struct ExportAttentionArgs {
    std::string checkpoint, src, out;
};

void cmd_export_attention(const ExportAttentionArgs& a) {
    Vocabulary vocab;
    auto model = load_model(a.checkpoint, &vocab);
    auto corpus = text_only_examples(read_lines(a.src), vocab);
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus[i].source.empty()) throw ContractError(a.src + ":" + std::to_string(i + 1) + ": empty source line");
    if (corpus.empty()) throw ContractError(a.src + ": no sentences");
    export_attention(*model, make_batch(corpus, range(0, corpus.size())), a.out);
    RunManifest m;
    m.command = "export-attention";
    m.config = to_json(model->config());
    m.seed = g_seed;
    m.inputs = {{"checkpoint", a.checkpoint}, {"src", a.src}};
    m.outputs = {{"attention", a.out}};
    m.write(manifest_beside(a.out));
    std::cout << "attention -> " << a.out << '\n';
}

// --- degrade ---------------------------------------------------------------

struct DegradeArgs {
    std::string checkpoint, corpus, mask_file, out, mode = "zero-shot";
    bool mask_synthetic_cues = false;
    std::size_t num_cues = 48;
};

void cmd_degrade(const DegradeArgs& a) {
    if (a.mask_file.empty() == !a.mask_synthetic_cues)
        throw UsageError("degrade: give exactly one of --mask FILE or --mask-synthetic-cues");
    if (a.mode != "zero-shot" && a.mode != "retrained") throw UsageError("degrade: --mode is zero-shot or retrained");
    Vocabulary vocab;
    auto model = load_model(a.checkpoint, &vocab);
    auto corpus = corpus_from_dir(a.corpus, vocab, false, 0);
    std::vector<std::string> mask;
    if (a.mask_synthetic_cues) {
        SynthOptions so;
        so.num_cues = a.num_cues;
        mask = synth_cue_tokens(so);
    } else {
        for (const auto& l : read_lines(a.mask_file))
            for (const auto& t : split_tokens(l)) mask.push_back(t);
    }
    auto report = degradation_eval(*model, corpus, mask, vocab, a.mode);
    const fs::path out = a.out;
    write_json(out, to_json(report));
    RunManifest m;
    m.command = "degrade";
    m.config = to_json(model->config());
    m.seed = g_seed;
    m.inputs = {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}, {"mask_tokens", mask.size()}, {"mode", a.mode}};
    m.outputs = {{"report", a.out}};
    m.write(manifest_beside(out));
    std::cout << std::fixed << std::setprecision(2) << "clean " << report.clean.score << "  masked "
              << report.masked.score << "  drop " << report.drop << "  masked fraction " << report.masked_fraction
              << "  (" << report.mode << ")\n";
}

// --- ablate ----------------------------------------------------------------

struct AblateArgs {
    std::string grid, config, overlay, out;
    std::size_t train_size = 1000, eval_size = 200, jobs = 1;
    double ambiguity_rate = 0.5;
    std::size_t num_cues = 48;
    bool backbone = false;
    bool transfer = false;
};

void cmd_ablate(const AblateArgs& a) {
    Config base = resolve_config(a.config, a.overlay);
    std::vector<AblationCell> grid;
    if (a.grid.empty()) {
        grid = default_ablation_grid(a.backbone);
    } else {
        std::ifstream is(a.grid);
        if (!is) throw IoError("cannot open grid " + a.grid);
        try {
            grid = parse_grid(Json::parse(is));
        } catch (const Json::parse_error& e) {
            throw FormatError(a.grid + ": " + e.what());
        }
    }
    const std::uint64_t seed = base.train.seed;
    SynthOptions so;
    so.image_size = base.vision.image_size;
    so.num_cues = a.num_cues;
    auto train_synth = synth_generate(a.train_size, seed, a.ambiguity_rate, so);
    SynthOptions eo = so;
    if (a.transfer) eo.split = SynthSplit::Transfer;
    auto eval_synth = synth_generate(a.eval_size, seed + 1000003, a.ambiguity_rate, eo);
    std::vector<std::string> all = train_synth.source;
    all.insert(all.end(), train_synth.target.begin(), train_synth.target.end());
    all.insert(all.end(), eval_synth.source.begin(), eval_synth.source.end());
    all.insert(all.end(), eval_synth.target.begin(), eval_synth.target.end());
    Vocabulary vocab = Vocabulary::build(all);
    std::vector<TripletExample> train_set, eval_set;
    for (std::size_t i = 0; i < train_synth.source.size(); ++i)
        train_set.push_back(make_example(train_synth.source[i], train_synth.target[i], vocab, train_synth.images[i]));
    for (std::size_t i = 0; i < eval_synth.source.size(); ++i)
        eval_set.push_back(make_example(eval_synth.source[i], eval_synth.target[i], vocab));

    AblationData data{&train_set, &eval_set, &vocab, &eval_synth.meta};
    auto table = ablate(grid, base, data, a.jobs);
    const fs::path out = a.out;
    fs::create_directories(out);
    write_json(out / "ablation.json", table.to_json());
    write_text(out / "ablation.txt", table.to_text());
    RunManifest m;
    m.command = "ablate";
    m.config = to_json(base);
    m.seed = seed;
    m.inputs = {{"grid", a.grid.empty() ? Json("default") : Json(a.grid)},
                {"cells", grid.size()},
                {"train_size", a.train_size},
                {"eval_size", a.eval_size},
                {"eval_split", a.transfer ? "transfer" : "train"},
                {"jobs", a.jobs}};
    m.outputs = {{"json", (out / "ablation.json").string()}, {"text", (out / "ablation.txt").string()}};
    m.write(out / "run_manifest.json");
    std::cout << table.to_text();
}

// --- gradcheck -------------------------------------------------------------

struct GradcheckArgs {
    std::string out;
};

bool cmd_gradcheck(const GradcheckArgs& a) {
    GradSuiteOptions opt;
    opt.seed = g_seed.value_or(0);
    auto entries = run_gradient_suite(opt);
    std::size_t w = 2;
    for (const auto& e : entries) w = std::max(w, e.name.size());
    bool all = true;
    Json rows = Json::array();
    std::cout << std::left << std::setw(static_cast<int>(w)) << "check" << "  " << std::setw(11) << "max rel err"
              << "  " << std::setw(7) << "tol" << "  result\n";
    for (const auto& e : entries) {
        all = all && e.report.passed;
        std::cout << std::left << std::setw(static_cast<int>(w)) << e.name << "  " << std::scientific
                  << std::setprecision(3) << std::setw(11) << e.report.max_rel_error << "  " << std::setprecision(0)
                  << std::setw(7) << e.tol << "  " << (e.report.passed ? "pass" : "FAIL") << '\n';
        std::cout.unsetf(std::ios::scientific);
        rows.push_back({{"name", e.name},
                        {"max_rel_error", e.report.max_rel_error},
                        {"tol", e.tol},
                        {"coords", e.report.coords_checked},
                        {"passed", e.report.passed}});
    }
    std::cout << (all ? "all checks passed" : "gradient check FAILED") << " (" << entries.size() << " checks)\n";
    if (!a.out.empty()) {
        write_json(a.out, Json{{"checks", rows}, {"passed", all}});
        RunManifest m;
        m.command = "gradcheck";
        m.seed = opt.seed;
        m.outputs = {{"report", a.out}};
        m.write(manifest_beside(a.out));
    }
    return all;
}

// --- help-json -------------------------------------------------------------

Json option_schema(const CLI::Option* o) {
    return Json{{"name", o->get_name()},
                {"description", o->get_description()},
                {"required", o->get_required()},
                {"type", o->get_type_name()},
                {"default", o->get_default_str()},
                {"flag", o->get_expected_min() == 0}};
}

Json app_schema(CLI::App& app) {
    Json opts = Json::array();
    for (const auto* o : app.get_options())
        if (o->get_name() != "--help" && o->get_name() != "--help-json") opts.push_back(option_schema(o));
    Json j{{"name", app.get_name()}, {"description", app.get_description()}, {"options", opts}};
    Json subs = Json::array();
    for (auto* s : app.get_subcommands({})) subs.push_back(app_schema(*s));
    if (!subs.empty()) j["subcommands"] = subs;
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Image-free multimodal translation with inverse knowledge distillation", "ikd-mmt"};
    app.require_subcommand(0, 1);
    app.fallthrough();
    bool version = false, help_json = false;
    std::uint64_t seed = 0;
    app.add_flag("--version", version, "Print the tool version");
    app.add_flag("--help-json", help_json, "Dump the command and flag schema as JSON");
    auto* seed_opt = app.add_option("--seed", seed, "Seed for every random choice of the run");

    PrepareArgs pa;
    auto* prepare = app.add_subcommand("prepare", "Write a corpus directory and vocabulary");
    prepare->add_option("--synthetic", pa.synthetic, "Generate N synthetic examples");
    prepare->add_option("--src", pa.src, "Source sentences, one per line");
    prepare->add_option("--tgt", pa.tgt, "Target sentences, one per line");
    prepare->add_option("--images", pa.images, "Directory of {index}.tnsr images");
    prepare->add_option("--out", pa.out, "Output corpus directory")->required();
    prepare->add_option("--vocab-out", pa.vocab_out, "Vocabulary path (default OUT/vocab.txt)");
    prepare->add_option("--vocab", pa.vocab_in, "Reuse an existing vocabulary instead of building one");
    prepare->add_option("--split", pa.split, "Synthetic split: train or transfer")->capture_default_str();
    prepare->add_option("--ambiguity-rate", pa.ambiguity_rate, "Synthetic: share of ambiguous sentences")
        ->capture_default_str();
    prepare->add_option("--image-size", pa.image_size, "Synthetic image side")->capture_default_str();
    prepare->add_option("--num-cues", pa.num_cues, "Synthetic object words")->capture_default_str();
    prepare->add_option("--num-nouns", pa.num_nouns, "Synthetic filler nouns")->capture_default_str();

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "Train on text-image triplets");
    trn->add_option("--config", ta.config, "JSON config (defaults for anything missing)");
    trn->add_option("--set", ta.overlay, "JSON merge patch applied over the config");
    trn->add_option("--data", ta.data, "Corpus directory with src.txt, tgt.txt and vocab.txt");
    trn->add_option("--src", ta.src, "Source sentences");
    trn->add_option("--tgt", ta.tgt, "Target sentences");
    trn->add_option("--images", ta.images, "Directory of {index}.tnsr images aligned with the corpus")->required();
    trn->add_option("--vocab", ta.vocab, "Vocabulary file");
    trn->add_option("--out", ta.out, "Run directory (checkpoint/, metrics.jsonl)")->required();
    trn->add_option("--resume", ta.resume, "Checkpoint directory to continue from");

    TranslateArgs tr;
    auto* translate = app.add_subcommand("translate", "Translate source sentences (text only)");
    translate->add_option("--checkpoint", tr.checkpoint, "Checkpoint directory")->required();
    translate->add_option("--src", tr.src, "Source sentences, one per line")->required();
    translate->add_option("--out", tr.out, "Hypothesis file")->required();
    translate->add_option("--beam", tr.beam, "Beam width (1 = greedy)")->capture_default_str();
    translate->add_option("--max-len", tr.max_len, "Output length cap (0 = 2 x source + 10)")->capture_default_str();

    EvaluateArgs ea;
    auto* evaluate = app.add_subcommand("evaluate", "Corpus BLEU-4 of hypotheses against references");
    evaluate->add_option("--hyp", ea.hyp, "Hypotheses, one per line")->required();
    evaluate->add_option("--ref", ea.ref, "References, one per line")->required();
    evaluate->add_option("--out", ea.out, "Report path (default HYP.bleu.json)");

    RetrieveArgs ra;
    auto* retrieve = app.add_subcommand("retrieve", "R@K of generated features against real image features");
    retrieve->add_option("--checkpoint", ra.checkpoint, "Checkpoint directory")->required();
    retrieve->add_option("--corpus", ra.corpus, "Corpus directory with src.txt, tgt.txt, images/")->required();
    retrieve->add_option("--out", ra.out, "Output directory")->required();

    AblateArgs aa;
    auto* abl = app.add_subcommand("ablate", "Train and score one model per grid cell on synthetic data");
    abl->add_option("--grid", aa.grid, "JSON list of {name, overlay} (default: the standard grid)");
    abl->add_option("--config", aa.config, "Base config");
    abl->add_option("--set", aa.overlay, "JSON merge patch over the base config");
    abl->add_option("--out", aa.out, "Output directory")->required();
    abl->add_option("--train-size", aa.train_size, "Synthetic training examples")->capture_default_str();
    abl->add_option("--eval-size", aa.eval_size, "Held-out synthetic examples")->capture_default_str();
    abl->add_option("--ambiguity-rate", aa.ambiguity_rate, "Share of ambiguous sentences")->capture_default_str();
    abl->add_option("--num-cues", aa.num_cues, "Synthetic object words")->capture_default_str();
    abl->add_flag("--transfer", aa.transfer, "Score on the transfer split");
    abl->add_flag("--backbone", aa.backbone, "Append the backbone-size rows");
    abl->add_option("--jobs", aa.jobs, "Parallel workers")->capture_default_str();

    GradcheckArgs ga;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and the joint loss");
    gradcheck->add_option("--out", ga.out, "Optional JSON report");

    ExportFeaturesArgs fa;
    auto* feats = app.add_subcommand("export-features", "Write generated multimodal maps as TNSR");
    feats->add_option("--checkpoint", fa.checkpoint, "Checkpoint directory")->required();
    feats->add_option("--src", fa.src, "Source sentences")->required();
    feats->add_option("--out", fa.out, "Output directory")->required();

    ExportAttentionArgs xa;
    auto* attn = app.add_subcommand("export-attention", "Write encoder attention over text and region rows");
    attn->add_option("--checkpoint", xa.checkpoint, "Checkpoint directory")->required();
    attn->add_option("--src", xa.src, "Source sentences")->required();
    attn->add_option("--out", xa.out, "Output JSON")->required();

    DegradeArgs da;
    auto* degrade = app.add_subcommand("degrade", "BLEU on clean vs [U]-masked sources");
    degrade->add_option("--checkpoint", da.checkpoint, "Checkpoint directory")->required();
    degrade->add_option("--corpus", da.corpus, "Corpus directory with src.txt and tgt.txt")->required();
    degrade->add_option("--mask", da.mask_file, "Whitespace-separated tokens to mask");
    degrade->add_flag("--mask-synthetic-cues", da.mask_synthetic_cues, "Mask the synthetic object words");
    degrade->add_option("--num-cues", da.num_cues, "Synthetic object words")->capture_default_str();
    degrade->add_option("--mode", da.mode, "zero-shot or retrained (report label)")->capture_default_str();
    degrade->add_option("--out", da.out, "Report JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        if (help_json || version) {
            // --help-json / --version next to otherwise incomplete flags.
        } else {
            app.exit(e);
            return 2;
        }
    }
    if (version) {
        std::cout << "ikd-mmt " << kVersion << '\n';
        return 0;
    }
    if (help_json) {
        std::cout << app_schema(app).dump(2) << '\n';
        return 0;
    }
    if (seed_opt->count()) g_seed = seed;
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return 2;
    }

    try {
        if (prepare->parsed()) cmd_prepare(pa);
        if (trn->parsed()) cmd_train(ta);
        if (translate->parsed()) cmd_translate(tr);
        if (evaluate->parsed()) cmd_evaluate(ea);
        if (retrieve->parsed()) cmd_retrieve(ra);
        if (abl->parsed()) cmd_ablate(aa);
        if (gradcheck->parsed() && !cmd_gradcheck(ga)) return 1;
        if (feats->parsed()) cmd_export_features(fa);
        if (attn->parsed()) cmd_export_attention(xa);
        if (degrade->parsed()) cmd_degrade(da);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
