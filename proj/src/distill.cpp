#include "ikd/distill.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "ikd/errors.hpp"
#include "ikd/ops.hpp"

namespace ikd {

const TraceEntry* find_entry(const ActivationTrace& trace, const std::string& name) {
    for (const auto& e : trace)
        if (e.name == name) return &e;
    return nullptr;
}

VisionLayout::VisionLayout(const VisionConfig& cfg)
    : stem_channels_(cfg.stem_channels), image_size_(cfg.image_size), stage_count_(cfg.stage_channels.size() + 1) {
    std::size_t in = cfg.stem_channels;
    std::string prev = "stem";
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
        const std::size_t out = cfg.stage_channels[s];
        for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
            BottleneckSpec spec;
            spec.name = "stage" + std::to_string(s + 2) + ".block" + std::to_string(b);
            spec.in_channels = in;
            spec.mid_channels = std::max<std::size_t>(1, out / cfg.bottleneck_divisor);
            spec.out_channels = out;
            spec.stride = b == 0 ? 2 : 1;
            spec.input_name = prev;
            spec.stage_output = b + 1 == cfg.blocks_per_stage;
            blocks_.push_back(spec);
            in = out;
            prev = spec.name;
        }
    }
    feature_side_ = cfg.image_size >> stage_count_;
}

namespace {

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

void require_images(const Tensor& images, const VisionLayout& layout) {
    const std::size_t s = layout.image_size();
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s)
        throw DimensionError("teacher expects images [B x 3 x " + std::to_string(s) + " x " + std::to_string(s) +
                             "], got " + shape_str(images.shape()));
}

}  // namespace

TeacherNet::TeacherNet(const VisionConfig& cfg) : cfg_(cfg), layout_(cfg) {
    Rng rng(cfg.teacher_seed);
    params_.normal("stem.w", {cfg.stem_channels, 3, 3, 3}, rng, he_std(27), false);
    params_.zeros("stem.b", {cfg.stem_channels}, false);
    for (const auto& b : layout_.blocks()) {
        params_.normal(b.name + ".c1.w", {b.mid_channels, b.in_channels, 1, 1}, rng, he_std(b.in_channels), false);
        params_.zeros(b.name + ".c1.b", {b.mid_channels}, false);
        params_.normal(b.name + ".c2.w", {b.mid_channels, b.mid_channels, 3, 3}, rng, he_std(9 * b.mid_channels), false);
        params_.zeros(b.name + ".c2.b", {b.mid_channels}, false);
        params_.normal(b.name + ".c3.w", {b.out_channels, b.mid_channels, 1, 1}, rng, he_std(b.mid_channels), false);
        params_.zeros(b.name + ".c3.b", {b.out_channels}, false);
        if (b.stride != 1 || b.in_channels != b.out_channels) {
            params_.normal(b.name + ".proj.w", {b.out_channels, b.in_channels, 1, 1}, rng, he_std(b.in_channels), false);
            params_.zeros(b.name + ".proj.b", {b.out_channels}, false);
        }
    }
    if (!cfg.teacher_weights.empty()) import_weights(cfg.teacher_weights);
}

ActivationTrace TeacherNet::forward(const Tensor& images) const {
    require_images(images, layout_);
    std::vector<double> sc(3), sh(3);
    for (std::size_t c = 0; c < 3; ++c) {
        sc[c] = 1.0 / cfg_.std[c];
        sh[c] = -cfg_.mean[c] / cfg_.std[c];
    }
    ActivationTrace trace;
    Tensor x = channel_affine(images, sc, sh);
    x = relu(conv2d(x, params_.at("stem.w"), params_.at("stem.b"), 2, 1));
    trace.push_back({"stem", x, true, true, ""});
    for (const auto& b : layout_.blocks()) {
        auto c1 = relu(conv2d(x, params_.at(b.name + ".c1.w"), params_.at(b.name + ".c1.b"), 1, 0));
        trace.push_back({b.name + ".c1", c1, true, false, ""});
        auto c2 = relu(conv2d(c1, params_.at(b.name + ".c2.w"), params_.at(b.name + ".c2.b"), b.stride, 1));
        trace.push_back({b.name + ".c2", c2, true, false, ""});
        auto c3 = conv2d(c2, params_.at(b.name + ".c3.w"), params_.at(b.name + ".c3.b"), 1, 0);
        Tensor shortcut = x;
        if (params_.contains(b.name + ".proj.w"))
            shortcut = conv2d(x, params_.at(b.name + ".proj.w"), params_.at(b.name + ".proj.b"), b.stride, 0);
        x = relu(add(c3, shortcut));
        trace.push_back({b.name, x, true, b.stage_output, ""});
    }
    return trace;
}

const Tensor& TeacherNet::last(const ActivationTrace& trace) const {
    const auto* e = find_entry(trace, layout_.last_name());
    if (!e) throw ContractError("trace lacks the teacher's last stage " + layout_.last_name());
    return e->value;
}

void TeacherNet::import_weights(const std::filesystem::path& dir) { import_params(params_, dir); }

void TeacherNet::export_weights(const std::filesystem::path& dir) const { export_params(params_, dir); }

StudentNet::StudentNet(const VisionConfig& cfg, ParamStore& store, Rng& rng) : layout_(cfg) {
    const auto& specs = layout_.blocks();
    for (auto it = specs.rbegin(); it != specs.rend(); ++it) {
        Block blk;
        blk.spec = *it;
        const auto& b = *it;
        const std::string p = "student." + b.name;
        blk.c1w = store.normal(p + ".c1.w", {b.mid_channels, b.out_channels, 1, 1}, rng, he_std(b.out_channels));
        blk.c1b = store.zeros(p + ".c1.b", {b.mid_channels});
        blk.c2w = store.normal(p + ".c2.w", {b.mid_channels, b.mid_channels, 3, 3}, rng, he_std(9 * b.mid_channels));
        blk.c2b = store.zeros(p + ".c2.b", {b.mid_channels});
        blk.c3w = store.normal(p + ".c3.w", {b.in_channels, b.mid_channels, 1, 1}, rng, he_std(b.mid_channels));
        blk.c3b = store.zeros(p + ".c3.b", {b.in_channels});
        if (b.stride != 1 || b.in_channels != b.out_channels) {
            blk.pw = store.normal(p + ".proj.w", {b.in_channels, b.out_channels, 1, 1}, rng, he_std(b.out_channels));
            blk.pb = store.zeros(p + ".proj.b", {b.in_channels});
        }
        blocks_.push_back(blk);
    }
    out_w_ = store.normal("student.out.w", {3, layout_.stem_channels(), 3, 3}, rng, he_std(9 * layout_.stem_channels()) * 0.5);
    out_b_ = store.zeros("student.out.b", {3});
}

std::pair<Tensor, ActivationTrace> StudentNet::forward(const Tensor& m_map) const {
    const std::size_t c = layout_.feature_channels(), p = layout_.feature_side();
    if (m_map.rank() != 4 || m_map.dim(1) != c || m_map.dim(2) != p || m_map.dim(3) != p)
        throw DimensionError("student expects m [B x " + std::to_string(c) + " x " + std::to_string(p) + " x " +
                             std::to_string(p) + "], got " + shape_str(m_map.shape()));
    ActivationTrace trace;
    Tensor x = m_map;
    for (const auto& blk : blocks_) {
        const auto& b = blk.spec;
        const std::string n = "student." + b.name;
        auto c1 = relu(conv2d(x, blk.c1w, blk.c1b, 1, 0));
        trace.push_back({n + ".c1", c1, true, false, b.name + ".c2"});
        auto up = b.stride > 1 ? upsample_nearest(c1, b.stride) : c1;
        auto c2 = relu(conv2d(up, blk.c2w, blk.c2b, 1, 1));
        trace.push_back({n + ".c2", c2, true, false, b.name + ".c1"});
        auto c3 = conv2d(c2, blk.c3w, blk.c3b, 1, 0);
        Tensor shortcut = x;
        if (blk.pw.defined())
            shortcut = conv2d(b.stride > 1 ? upsample_nearest(x, b.stride) : x, blk.pw, blk.pb, 1, 0);
        x = relu(add(c3, shortcut));
        trace.push_back({n + ".out", x, true, false, b.input_name});
    }
    auto image = sigmoid(conv2d(upsample_nearest(x, 2), out_w_, out_b_, 1, 1));
    return {image, trace};
}

namespace {

bool selected(const TraceEntry& e, Granularity g, const std::string& last) {
    switch (g) {
        case Granularity::Model: return e.name == last;
        case Granularity::Block: return e.block;
        case Granularity::Layer: return e.layer;
    }
    return false;
}

}  // namespace

std::vector<RepresentationPair> pair_representations(const ActivationTrace& teacher, const ActivationTrace& student,
                                                     const Tensor& m_map, Granularity granularity) {
    if (teacher.empty()) throw ConfigError("empty teacher trace");
    const std::string& last = teacher.back().name;
    std::vector<RepresentationPair> pairs;
    for (const auto& t : teacher) {
        if (!selected(t, granularity, last)) continue;
        Tensor s;
        if (t.name == last) {
            s = m_map;
        } else {
            for (const auto& e : student)
                if (e.mirror_of == t.name) s = e.value;
            if (!s.defined())
                throw ConfigError("no student representation mirrors teacher stage '" + t.name + "' at " +
                                  to_string(granularity) + " granularity");
        }
        if (s.shape() != t.value.shape())
            throw ConfigError("teacher stage '" + t.name + "' has shape " + shape_str(t.value.shape()) +
                              " but its student mirror has " + shape_str(s.shape()));
        pairs.emplace_back(t.value, s);
    }
    return pairs;
}

std::vector<RepresentationPair> pair_traces(const ActivationTrace& real, const ActivationTrace& pseudo,
                                            Granularity granularity) {
    if (real.empty() || real.size() != pseudo.size()) throw ConfigError("teacher traces differ in length");
    const std::string& last = real.back().name;
    std::vector<RepresentationPair> pairs;
    for (std::size_t i = 0; i < real.size(); ++i) {
        if (!selected(real[i], granularity, last)) continue;
        if (pseudo[i].name != real[i].name || pseudo[i].value.shape() != real[i].value.shape())
            throw ConfigError("teacher traces disagree at stage '" + real[i].name + "'");
        pairs.emplace_back(real[i].value, pseudo[i].value);
    }
    return pairs;
}

Tensor similarity(const Tensor& a, const Tensor& b, Similarity kind) {
    if (a.shape() != b.shape())
        throw DimensionError("similarity of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    switch (kind) {
        case Similarity::L2: return l2_norm(sub(a, b));
        case Similarity::L1: return sum(abs(sub(a, b)));
        case Similarity::Linf: return max_all(abs(sub(a, b)));
        case Similarity::Cosine: {
            auto aa = dot(a, a), bb = dot(b, b);
            if (std::sqrt(aa.item()) < 1e-12 || std::sqrt(bb.item()) < 1e-12) return Tensor::scalar(0.0);
            return add_scalar(scale(div(dot(a, b), sqrt(mul(aa, bb))), -1.0), 1.0);
        }
        case Similarity::KL: {
            auto fa = reshape(a, {a.numel()}), fb = reshape(b, {b.numel()});
            auto la = log_softmax(fa, 0), lb = log_softmax(fb, 0);
            return sum(mul(exp(la), sub(la, lb)));
        }
    }
    throw ContractError("unknown similarity kind");
}

Tensor batch_similarity(const Tensor& a, const Tensor& b, Similarity kind) {
    if (a.shape() != b.shape())
        throw DimensionError("similarity of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.rank() == 0) return similarity(a, b, kind);
    Tensor total;
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        auto s = similarity(slice(a, 0, i, 1), slice(b, 0, i, 1), kind);
        total = total.defined() ? add(total, s) : s;
    }
    return total;
}

namespace {

Tensor sum_pairs(const std::vector<RepresentationPair>& pairs, Similarity kind, Tensor acc) {
    for (const auto& [t, s] : pairs) acc = add(acc, batch_similarity(t, s, kind));
    return acc;
}

}  // namespace

Tensor irm_kd_loss(const ActivationTrace& teacher_real, const ActivationTrace& student, const Tensor& m_map,
                   const Tensor& image_real, const Tensor& image_student, const DistillConfig& cfg) {
    Tensor loss = batch_similarity(image_real, image_student, Similarity::L2);
    if (cfg.image_space_only) return loss;
    return sum_pairs(pair_representations(teacher_real, student, m_map, cfg.granularity), cfg.similarity, loss);
}

Tensor iam_kd_loss(const ActivationTrace& teacher_real, const Tensor& image_real, const Tensor& image_student,
                   const TeacherNet& teacher, const DistillConfig& cfg) {
    if (cfg.image_space_only) return Tensor::scalar(0.0);
    Tensor loss = batch_similarity(image_real, image_student, Similarity::L2);
    auto pseudo = teacher.forward(image_student);
    return sum_pairs(pair_traces(teacher_real, pseudo, cfg.granularity), cfg.similarity, loss);
}

Tensor iam_kd_loss(const Tensor& image_real, const Tensor& image_student, const TeacherNet& teacher,
                   const DistillConfig& cfg) {
    ActivationTrace real;
    {
        NoGradGuard ng;
        real = teacher.forward(image_real);
    }
    return iam_kd_loss(real, image_real, image_student, teacher, cfg);
}

void export_params(const ParamStore& params, const std::filesystem::path& dir, TensorPrecision precision) {
    std::filesystem::create_directories(dir);
    Json manifest{{"format", "ikd-params"}, {"version", 1}, {"params", Json::array()}};
    for (const auto& [name, t] : params.items()) {
        const std::string file = name + ".tnsr";
        write_tensor(dir / file, t, precision);
        manifest["params"].push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
    }
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
    os << manifest.dump(2) << '\n';
}

void import_params(ParamStore& params, const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    std::ifstream is(mpath);
    if (!is) throw IoError("cannot open " + mpath.string());
    Json manifest;
    try {
        manifest = Json::parse(is);
    } catch (const Json::parse_error& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "ikd-params" || manifest.value("version", 0) != 1 ||
        !manifest.contains("params") || !manifest["params"].is_array())
        throw FormatError(mpath.string() + ": not an ikd-params version 1 manifest");
    std::map<std::string, Tensor> loaded;
    for (const auto& entry : manifest["params"]) {
        if (!entry.contains("name") || !entry.contains("file")) throw FormatError(mpath.string() + ": malformed entry");
        loaded[entry["name"].get<std::string>()] = read_tensor(dir / entry["file"].get<std::string>());
    }
    // Validate everything before touching any parameter.
    for (const auto& [name, t] : params.items()) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw FormatError(mpath.string() + ": missing parameter " + name);
        if (it->second.shape() != t.shape())
            throw FormatError(mpath.string() + ": parameter " + name + " has shape " + shape_str(it->second.shape()) +
                              ", expected " + shape_str(t.shape()));
    }
    for (const auto& [name, t] : params.items()) {
        Tensor dst = t;
        auto src = loaded.at(name).data();
        auto d = dst.mutable_data();
        std::copy(src.begin(), src.end(), d.begin());
    }
}

}  // namespace ikd
