#include "ikd/train.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ikd/errors.hpp"
#include "ikd/ops.hpp"
#include "ikd/tensor_io.hpp"

namespace ikd {

namespace {

Tensor weighted(const Tensor& x, double w) { return w == 1.0 ? x : scale(x, w); }

}  // namespace

JointLoss joint_loss(const Batch& batch, const IkdModel& model, const DistillConfig& distill, const TrainConfig& train) {
    JointLoss out;
    auto encoding = model.encode_source(batch);
    out.j_trans = weighted(model.translation_loss(batch, encoding).sum, train.weight_trans);
    out.total = out.j_trans;
    out.irm = Tensor::scalar(0.0);
    out.iam = Tensor::scalar(0.0);
    if (!distill.any()) return out;
    if (!batch.images) throw ContractError("distillation is enabled but the batch has no images: training requires triplets; inference does not");

    const Tensor& real = *batch.images;
    ActivationTrace real_trace;
    {
        NoGradGuard ng;
        real_trace = model.teacher().forward(real);
    }
    auto [inverse, student_trace] = model.student().forward(encoding.m.map);
    if (distill.enable_irm) {
        out.irm = weighted(irm_kd_loss(real_trace, student_trace, encoding.m.map, real, inverse, distill), distill.weight_irm);
        out.total = add(out.total, out.irm);
    }
    if (distill.enable_iam) {
        out.iam = weighted(iam_kd_loss(real_trace, real, inverse, model.teacher(), distill), distill.weight_iam);
        out.total = add(out.total, out.iam);
    }
    return out;
}

Adam::Adam(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.lr), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.requires_grad()) continue;
        const bool has = p.has_grad();
        auto g = has ? p.grad() : std::span<const double>{};
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = has ? g[k] : 0.0;
            m[k] = b1_ * m[k] + (1.0 - b1_) * gk;
            v[k] = b2_ * v[k] + (1.0 - b2_) * gk * gk;
            w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        }
    }
}

void Adam::restore(std::size_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw FormatError("optimizer state has the wrong number of slots");
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size())
            throw FormatError("optimizer slot " + std::to_string(i) + " has the wrong size");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

Json to_json(const StepLog& s) {
    return Json{{"step", s.step}, {"J_trans", s.j_trans}, {"Loss_IrM", s.irm}, {"Loss_IaM", s.iam}, {"total", s.total}};
}

void RunningStats::add(const StepLog& s) {
    ++count;
    sum_total += s.total;
    sum_j_trans += s.j_trans;
    sum_irm += s.irm;
    sum_iam += s.iam;
    last = s;
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
    return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1;
}

Trainer::Trainer(IkdModel& model, const std::vector<TripletExample>& corpus)
    : model_(model), corpus_(corpus), adam_(model.params().tensors(), model.config().train) {
    if (corpus_.empty()) throw ContractError("training corpus is empty");
}

std::size_t Trainer::steps_per_epoch() const {
    const std::size_t bs = model_.config().train.batch_size;
    return (corpus_.size() + bs - 1) / bs;
}

std::size_t Trainer::total_steps() const {
    const auto& t = model_.config().train;
    std::size_t n = t.epochs * steps_per_epoch();
    if (t.max_steps) n = std::min(n, t.max_steps);
    return n;
}

const Batch& Trainer::batch_for(std::size_t step) {
    const std::size_t epoch = step / steps_per_epoch();
    if (epoch != cached_epoch_) {
        cached_batches_ = batchify(corpus_, model_.config().train.batch_size, epoch_seed(model_.config().train.seed, epoch));
        cached_epoch_ = epoch;
    }
    return cached_batches_[step % steps_per_epoch()];
}

StepLog Trainer::train_step(const Batch& batch) {
    const auto& cfg = model_.config();
    model_.params().zero_grad();
    auto loss = joint_loss(batch, model_, cfg.distill, cfg.train);
    StepLog log;
    log.step = step_ + 1;
    log.j_trans = loss.j_trans.item();
    log.irm = loss.irm.item();
    log.iam = loss.iam.item();
    log.total = loss.total.item();
    if (!std::isfinite(log.total)) {
        std::ostringstream os;
        os << "training diverged at step " << log.step << ": total=" << log.total << " (J_trans=" << log.j_trans
           << ", Loss_IrM=" << log.irm << ", Loss_IaM=" << log.iam << ")";
        throw DivergenceError(os.str());
    }
    loss.total.backward();
    adam_.step();
    ++step_;
    stats_.add(log);
    return log;
}

std::vector<StepLog> Trainer::fit(std::size_t until, const std::function<void(const StepLog&)>& on_step) {
    std::size_t end = total_steps();
    if (until) end = std::min(end, until);
    std::vector<StepLog> logs;
    while (step_ < end) {
        logs.push_back(train_step(batch_for(step_)));
        if (on_step) on_step(logs.back());
    }
    return logs;
}

namespace {

constexpr const char* kCheckpointFormat = "ikd-checkpoint";
constexpr int kCheckpointVersion = 1;

Json stats_json(const RunningStats& s) {
    return Json{{"count", s.count},         {"sum_total", s.sum_total}, {"sum_j_trans", s.sum_j_trans},
                {"sum_irm", s.sum_irm},     {"sum_iam", s.sum_iam},     {"last", to_json(s.last)}};
}

RunningStats stats_from_json(const Json& j) {
    RunningStats s;
    s.count = j.at("count").get<std::size_t>();
    s.sum_total = j.at("sum_total").get<double>();
    s.sum_j_trans = j.at("sum_j_trans").get<double>();
    s.sum_irm = j.at("sum_irm").get<double>();
    s.sum_iam = j.at("sum_iam").get<double>();
    const auto& l = j.at("last");
    s.last = {l.at("step").get<std::size_t>(), l.at("J_trans").get<double>(), l.at("Loss_IrM").get<double>(),
              l.at("Loss_IaM").get<double>(), l.at("total").get<double>()};
    return s;
}

Json read_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream is(path);
    if (!is) throw IoError("cannot open checkpoint manifest " + path.string());
    Json j;
    try {
        j = Json::parse(is);
    } catch (const Json::parse_error& e) {
        throw FormatError(path.string() + ": corrupt manifest: " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != kCheckpointFormat)
        throw FormatError(path.string() + ": not a checkpoint manifest");
    if (j.value("version", 0) != kCheckpointVersion)
        throw FormatError(path.string() + ": checkpoint version " + j.value("version", Json(0)).dump() +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    for (const char* key : {"step", "config", "params", "optimizer", "stats"})
        if (!j.contains(key)) throw FormatError(path.string() + ": corrupt manifest, missing '" + key + "'");
    return j;
}

Json comparable(const Config& c) {
    Json j = to_json(c);
    for (const char* k : {"epochs", "max_steps", "checkpoint_interval"}) j["train"].erase(k);
    j["vision"].erase("teacher_weights");
    return j;
}

std::vector<double> read_values(const std::filesystem::path& path, std::size_t expected) {
    auto t = read_tensor(path);
    if (t.numel() != expected)
        throw FormatError(path.string() + ": holds " + std::to_string(t.numel()) + " values, expected " +
                          std::to_string(expected));
    return t.to_vector();
}

}  // namespace

bool resume_compatible(const Config& a, const Config& b) { return comparable(a) == comparable(b); }

void Trainer::save(const std::filesystem::path& dir, const Vocabulary& vocab) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    fs::create_directories(dir / "optimizer");
    Json params = Json::array();
    Json moments = Json::array();
    const auto& items = model_.params().items();
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& [name, t] = items[i];
        const std::string file = "params/" + name + ".tnsr";
        write_tensor(dir / file, t, TensorPrecision::Float64);
        params.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
        const std::string mf = "optimizer/" + name + ".m.tnsr", vf = "optimizer/" + name + ".v.tnsr";
        write_tensor(dir / mf, Tensor::from(t.shape(), adam_.first_moments()[i]), TensorPrecision::Float64);
        write_tensor(dir / vf, Tensor::from(t.shape(), adam_.second_moments()[i]), TensorPrecision::Float64);
        moments.push_back({{"m", mf}, {"v", vf}});
    }
    vocab.save(dir / "vocab.txt");
    Json manifest{{"format", kCheckpointFormat},
                  {"version", kCheckpointVersion},
                  {"step", step_},
                  {"config", to_json(model_.config())},
                  {"vocab", "vocab.txt"},
                  {"vocab_size", model_.vocab_size()},
                  {"params", params},
                  {"optimizer", {{"t", adam_.steps()}, {"moments", moments}}},
                  {"stats", stats_json(stats_)}};
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
    os << manifest.dump(2) << '\n';
    if (!os) throw IoError("failed writing checkpoint manifest in " + dir.string());
}

void Trainer::load(const std::filesystem::path& dir) {
    Json j = read_manifest(dir);
    Config saved;
    try {
        saved = config_from_json(j["config"]);
    } catch (const ConfigError& e) {
        throw FormatError((dir / "manifest.json").string() + ": corrupt config: " + e.what());
    }
    if (!resume_compatible(saved, model_.config()))
        throw ConfigError("checkpoint " + dir.string() + " was written with a different configuration");
    if (j.value("vocab_size", std::size_t{0}) != model_.vocab_size())
        throw ConfigError("checkpoint vocabulary size " + j.value("vocab_size", Json(0)).dump() + " differs from " +
                          std::to_string(model_.vocab_size()));

    // Stage every value first so a bad file leaves the model untouched.
    const auto& items = model_.params().items();
    const auto& files = j["params"];
    const auto& moments = j["optimizer"]["moments"];
    if (!files.is_array() || files.size() != items.size() || !moments.is_array() || moments.size() != items.size())
        throw FormatError(dir.string() + ": checkpoint lists " + std::to_string(files.size()) + " parameters, model has " +
                          std::to_string(items.size()));
    std::vector<std::vector<double>> values, m, v;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& [name, t] = items[i];
        if (files[i].value("name", "") != name)
            throw FormatError(dir.string() + ": parameter " + std::to_string(i) + " is '" + files[i].value("name", "") +
                              "', expected '" + name + "'");
        values.push_back(read_values(dir / files[i].at("file").get<std::string>(), t.numel()));
        m.push_back(read_values(dir / moments[i].at("m").get<std::string>(), t.numel()));
        v.push_back(read_values(dir / moments[i].at("v").get<std::string>(), t.numel()));
    }
    RunningStats stats;
    try {
        stats = stats_from_json(j["stats"]);
    } catch (const Json::exception& e) {
        throw FormatError(dir.string() + ": corrupt stats: " + e.what());
    }
    adam_.restore(j["optimizer"].value("t", std::size_t{0}), std::move(m), std::move(v));
    for (std::size_t i = 0; i < items.size(); ++i) {
        Tensor t = items[i].second;
        auto d = t.mutable_data();
        std::copy(values[i].begin(), values[i].end(), d.begin());
    }
    step_ = j["step"].get<std::size_t>();
    stats_ = stats;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    Json j = read_manifest(dir);
    CheckpointInfo info;
    try {
        info.config = config_from_json(j["config"]);
    } catch (const ConfigError& e) {
        throw FormatError((dir / "manifest.json").string() + ": corrupt config: " + e.what());
    }
    info.vocab = Vocabulary::load(dir / j.value("vocab", "vocab.txt"));
    info.step = j["step"].get<std::size_t>();
    info.stats = j["stats"];
    return info;
}

std::unique_ptr<IkdModel> load_model(const std::filesystem::path& dir, Vocabulary* vocab) {
    auto info = read_checkpoint_info(dir);
    auto model = std::make_unique<IkdModel>(info.config, info.vocab.size());
    Json j = read_manifest(dir);
    const auto& items = model->params().items();
    const auto& files = j["params"];
    if (files.size() != items.size()) throw FormatError(dir.string() + ": parameter count mismatch");
    std::vector<std::vector<double>> values;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (files[i].value("name", "") != items[i].first)
            throw FormatError(dir.string() + ": unexpected parameter " + files[i].value("name", ""));
        values.push_back(read_values(dir / files[i].at("file").get<std::string>(), items[i].second.numel()));
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        Tensor t = items[i].second;
        auto d = t.mutable_data();
        std::copy(values[i].begin(), values[i].end(), d.begin());
    }
    if (vocab) *vocab = std::move(info.vocab);
    return model;
}

std::vector<StepLog> train(IkdModel& model, const std::vector<TripletExample>& corpus, const TrainOptions& options) {
    Trainer trainer(model, corpus);
    if (options.resume_from) trainer.load(*options.resume_from);
    std::ofstream metrics;
    if (options.metrics_path) {
        metrics.open(*options.metrics_path, options.resume_from ? std::ios::app : std::ios::trunc);
        if (!metrics) throw IoError("cannot write metrics log " + options.metrics_path->string());
    }
    const std::size_t interval = model.config().train.checkpoint_interval;
    auto logs = trainer.fit(0, [&](const StepLog& s) {
        if (metrics.is_open()) metrics << to_json(s).dump() << '\n' << std::flush;
        if (options.checkpoint_dir && options.vocab && interval && s.step % interval == 0)
            trainer.save(*options.checkpoint_dir, *options.vocab);
    });
    if (options.checkpoint_dir) {
        if (!options.vocab) throw ContractError("saving a checkpoint requires the vocabulary");
        trainer.save(*options.checkpoint_dir, *options.vocab);
    }
    return logs;
}

}  // namespace ikd
