#include "ikd/config.hpp"

#include <fstream>
#include <set>

#include "ikd/errors.hpp"

namespace ikd {

std::string to_string(Similarity s) {
    switch (s) {
        case Similarity::L2: return "L2";
        case Similarity::L1: return "L1";
        case Similarity::Linf: return "Linf";
        case Similarity::Cosine: return "Cosine";
        case Similarity::KL: return "KL";
    }
    return "?";
}

std::string to_string(Granularity g) {
    switch (g) {
        case Granularity::Model: return "Model";
        case Granularity::Block: return "Block";
        case Granularity::Layer: return "Layer";
    }
    return "?";
}

Similarity parse_similarity(const std::string& s) {
    for (auto k : {Similarity::L2, Similarity::L1, Similarity::Linf, Similarity::Cosine, Similarity::KL})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown similarity '" + s + "' (expected L2, L1, Linf, Cosine or KL)");
}

Granularity parse_granularity(const std::string& s) {
    for (auto k : {Granularity::Model, Granularity::Block, Granularity::Layer})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown granularity '" + s + "' (expected Model, Block or Layer)");
}

Json to_json(const Config& c) {
    const auto& m = c.model;
    const auto& v = c.vision;
    const auto& d = c.distill;
    const auto& t = c.train;
    return Json{
        {"model",
         {{"d_model", m.d_model},
          {"heads", m.heads},
          {"enc_layers", m.enc_layers},
          {"dec_layers", m.dec_layers},
          {"ffn", m.ffn},
          {"max_len", m.max_len},
          {"init_std", m.init_std},
          {"use_multimodal", m.use_multimodal},
          {"text_features", m.text_features},
          {"generator_bias", m.generator_bias},
          {"seed", m.seed}}},
        {"vision",
         {{"image_size", v.image_size},
          {"stem_channels", v.stem_channels},
          {"stage_channels", v.stage_channels},
          {"blocks_per_stage", v.blocks_per_stage},
          {"bottleneck_divisor", v.bottleneck_divisor},
          {"mean", v.mean},
          {"std", v.std},
          {"teacher_seed", v.teacher_seed},
          {"teacher_weights", v.teacher_weights}}},
        {"distill",
         {{"similarity", to_string(d.similarity)},
          {"granularity", to_string(d.granularity)},
          {"enable_irm", d.enable_irm},
          {"enable_iam", d.enable_iam},
          {"image_space_only", d.image_space_only},
          {"weight_irm", d.weight_irm},
          {"weight_iam", d.weight_iam}}},
        {"train",
         {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"max_steps", t.max_steps},
          {"lr", t.lr},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"weight_trans", t.weight_trans},
          {"seed", t.seed},
          {"checkpoint_interval", t.checkpoint_interval}}},
    };
}

namespace {

// Reads the keys of one section, refusing anything it was not asked for.
class Section {
  public:
    Section(const Json& root, const char* name) : name_(name) {
        if (!root.contains(name)) return;
        node_ = &root.at(name);
        if (!node_->is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!node_ || !node_->contains(key)) return;
        try {
            out = node_->at(key).get<T>();
        } catch (const Json::exception& e) {
            throw ConfigError(std::string("config ") + name_ + "." + key + ": " + e.what());
        }
    }

    void finish() const {
        if (!node_) return;
        for (auto it = node_->begin(); it != node_->end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(std::string("unknown config key ") + name_ + "." + it.key());
    }

  private:
    const char* name_;
    const Json* node_ = nullptr;
    std::set<std::string> seen_;
};

}  // namespace

Config config_from_json(const Json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k != "model" && k != "vision" && k != "distill" && k != "train")
            throw ConfigError("unknown config section '" + k + "'");
    }
    Config c;
    {
        Section s(j, "model");
        auto& m = c.model;
        s.get("d_model", m.d_model);
        s.get("heads", m.heads);
        s.get("enc_layers", m.enc_layers);
        s.get("dec_layers", m.dec_layers);
        s.get("ffn", m.ffn);
        s.get("max_len", m.max_len);
        s.get("init_std", m.init_std);
        s.get("use_multimodal", m.use_multimodal);
        s.get("text_features", m.text_features);
        s.get("generator_bias", m.generator_bias);
        s.get("seed", m.seed);
        s.finish();
    }
    {
        Section s(j, "vision");
        auto& v = c.vision;
        s.get("image_size", v.image_size);
        s.get("stem_channels", v.stem_channels);
        s.get("stage_channels", v.stage_channels);
        s.get("blocks_per_stage", v.blocks_per_stage);
        s.get("bottleneck_divisor", v.bottleneck_divisor);
        s.get("mean", v.mean);
        s.get("std", v.std);
        s.get("teacher_seed", v.teacher_seed);
        s.get("teacher_weights", v.teacher_weights);
        s.finish();
    }
    {
        Section s(j, "distill");
        auto& d = c.distill;
        std::string sim = to_string(d.similarity), gran = to_string(d.granularity);
        s.get("similarity", sim);
        s.get("granularity", gran);
        d.similarity = parse_similarity(sim);
        d.granularity = parse_granularity(gran);
        s.get("enable_irm", d.enable_irm);
        s.get("enable_iam", d.enable_iam);
        s.get("image_space_only", d.image_space_only);
        s.get("weight_irm", d.weight_irm);
        s.get("weight_iam", d.weight_iam);
        s.finish();
    }
    {
        Section s(j, "train");
        auto& t = c.train;
        s.get("epochs", t.epochs);
        s.get("batch_size", t.batch_size);
        s.get("max_steps", t.max_steps);
        s.get("lr", t.lr);
        s.get("beta1", t.beta1);
        s.get("beta2", t.beta2);
        s.get("adam_eps", t.adam_eps);
        s.get("weight_trans", t.weight_trans);
        s.get("seed", t.seed);
        s.get("checkpoint_interval", t.checkpoint_interval);
        s.finish();
    }
    validate(c);
    return c;
}

void validate(const Config& c) {
    const auto& m = c.model;
    if (m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0)
        throw ConfigError("model.d_model (" + std::to_string(m.d_model) + ") must be a positive multiple of model.heads (" +
                          std::to_string(m.heads) + ")");
    if (m.enc_layers == 0 || m.dec_layers == 0 || m.ffn == 0) throw ConfigError("model layer counts and ffn must be positive");
    if (m.max_len < 2) throw ConfigError("model.max_len must be at least 2");
    const auto& v = c.vision;
    if (v.stage_channels.empty()) throw ConfigError("vision.stage_channels must be non-empty");
    if (v.blocks_per_stage == 0 || v.bottleneck_divisor == 0) throw ConfigError("vision block settings must be positive");
    if (v.image_size >> (v.stage_channels.size() + 1) == 0 || v.image_size % (std::size_t{1} << (v.stage_channels.size() + 1)) != 0)
        throw ConfigError("vision.image_size " + std::to_string(v.image_size) + " is not divisible by 2^" +
                          std::to_string(v.stage_channels.size() + 1));
    for (auto ch : v.stage_channels)
        if (ch < v.bottleneck_divisor) throw ConfigError("vision stage channels narrower than the bottleneck divisor");
    for (double s : v.std)
        if (!(s > 0)) throw ConfigError("vision.std entries must be positive");
    const auto& t = c.train;
    if (!(t.lr > 0)) throw ConfigError("train.lr must be > 0");
    if (t.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (t.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(t.beta1 >= 0 && t.beta1 < 1 && t.beta2 >= 0 && t.beta2 < 1)) throw ConfigError("train betas must lie in [0, 1)");
}

Config load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    Json j;
    try {
        j = Json::parse(is);
    } catch (const Json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const Config& c) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write config " + path.string());
    os << to_json(c).dump(2) << '\n';
}

Config apply_overlay(const Config& base, const Json& overlay) {
    Json j = to_json(base);
    j.merge_patch(overlay);
    return config_from_json(j);
}

}  // namespace ikd
