#include "ikd/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ikd/errors.hpp"
#include "ikd/ops.hpp"

namespace ikd {

Tensor global_text_feature(const Tensor& t, const std::vector<std::uint8_t>& pad) {
    if (t.rank() != 3) throw DimensionError("global_text_feature expects [B, I, d], got " + shape_str(t.shape()));
    const std::size_t b = t.dim(0), len = t.dim(1), d = t.dim(2);
    if (!pad.empty() && pad.size() != b * len) throw DimensionError("pad mask does not match " + shape_str(t.shape()));
    std::vector<double> w(b * len, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t real = 0;
        for (std::size_t j = 0; j < len; ++j) real += pad.empty() || !pad[i * len + j];
        if (real == 0) throw ContractError("global_text_feature: sentence " + std::to_string(i) + " has no real tokens");
        for (std::size_t j = 0; j < len; ++j)
            if (pad.empty() || !pad[i * len + j]) w[i * len + j] = 1.0 / static_cast<double>(real);
    }
    auto weights = Tensor::from({b, 1, len}, std::move(w));
    return reshape(bmm(weights, t), {b, d});
}

Tensor global_text_feature(const Tensor& t) {
    if (t.rank() != 2) throw DimensionError("global_text_feature expects [I, d], got " + shape_str(t.shape()));
    return reshape(global_text_feature(reshape(t, {1, t.dim(0), t.dim(1)}), {}), {t.dim(1)});
}

MultimodalFeature generate_multimodal(const Tensor& t_bar, const Tensor& w_t, const Tensor& bias, std::size_t side) {
    Tensor tb = t_bar.rank() == 1 ? reshape(t_bar, {1, t_bar.dim(0)}) : t_bar;
    if (tb.rank() != 2 || w_t.rank() != 2 || tb.dim(1) != w_t.dim(0))
        throw DimensionError("generate_multimodal: t_bar " + shape_str(t_bar.shape()) + " does not match W^t " +
                             shape_str(w_t.shape()));
    const std::size_t b = tb.dim(0), c = w_t.dim(1);
    auto v = bias.defined() ? linear(tb, w_t, bias) : linear(tb, w_t);
    MultimodalFeature m;
    m.map = avg_unpool2d(reshape(v, {b, c, 1, 1}), side);
    m.rows = permute(reshape(m.map, {b, c, side * side}), {0, 2, 1});
    return m;
}

Tensor fuse_query(const Tensor& t, const Tensor& m_rows, const Tensor& w_m) {
    if (w_m.rank() != 2 || m_rows.rank() != t.rank() || (t.rank() != 2 && t.rank() != 3))
        throw DimensionError("fuse_query: t " + shape_str(t.shape()) + ", m " + shape_str(m_rows.shape()) + ", W^m " +
                             shape_str(w_m.shape()));
    if (m_rows.shape().back() != w_m.dim(0) || t.shape().back() != w_m.dim(1))
        throw DimensionError("fuse_query: width mismatch between t " + shape_str(t.shape()) + ", m " +
                             shape_str(m_rows.shape()) + " and W^m " + shape_str(w_m.shape()));
    if (t.rank() == 3 && t.dim(0) != m_rows.dim(0))
        throw DimensionError("fuse_query: batch mismatch " + shape_str(t.shape()) + " vs " + shape_str(m_rows.shape()));
    auto projected = linear(m_rows, w_m);
    return concat({t, projected}, t.rank() - 2);
}

Tensor sinusoidal_table(std::size_t length, std::size_t d) {
    std::vector<double> pe(length * d);
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) * rate;
            pe[pos * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    return Tensor::from({length, d}, std::move(pe));
}

IkdModel::IkdModel(const Config& cfg, std::size_t vocab_size) : cfg_(cfg), vocab_size_(vocab_size), layout_(cfg.vision) {
    validate(cfg_);
    if (vocab_size_ <= static_cast<std::size_t>(Vocabulary::kNumSpecials))
        throw ConfigError("vocabulary of " + std::to_string(vocab_size_) + " entries has no ordinary tokens");
    const auto& mc = cfg_.model;
    const std::size_t d = mc.d_model, c = layout_.feature_channels();
    Rng rng(mc.seed);
    const double sd = mc.init_std;

    teacher_ = std::make_unique<TeacherNet>(cfg_.vision);
    src_embed_ = params_.normal("encoder.embed", {vocab_size_, d}, rng, 1.0);
    tgt_embed_ = params_.normal("decoder.embed", {vocab_size_, d}, rng, 1.0);
    positions_ = sinusoidal_table(mc.max_len, d);
    w_m_ = params_.normal("encoder.w_m", {c, d}, rng, 1.0 / std::sqrt(static_cast<double>(c)));
    w_t_ = params_.normal("generator.w_t", {d, c}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    if (mc.generator_bias) b_t_ = params_.zeros("generator.b_t", {c});
    for (std::size_t l = 0; l < mc.enc_layers; ++l) {
        const std::string p = "encoder.layer" + std::to_string(l);
        EncoderLayer layer;
        layer.ln_attn = make_layer_norm(params_, p + ".ln_attn", d);
        layer.attn = make_attention(params_, p + ".attn", d, rng, sd);
        layer.ln_ffn = make_layer_norm(params_, p + ".ln_ffn", d);
        layer.ffn = make_feed_forward(params_, p + ".ffn", d, mc.ffn, rng, sd);
        enc_layers_.push_back(layer);
    }
    enc_out_ = make_layer_norm(params_, "encoder.ln_out", d);
    for (std::size_t l = 0; l < mc.dec_layers; ++l) {
        const std::string p = "decoder.layer" + std::to_string(l);
        DecoderLayer layer;
        layer.ln_self = make_layer_norm(params_, p + ".ln_self", d);
        layer.self_attn = make_attention(params_, p + ".self_attn", d, rng, sd);
        layer.ln_cross = make_layer_norm(params_, p + ".ln_cross", d);
        layer.cross_attn = make_attention(params_, p + ".cross_attn", d, rng, sd);
        layer.ln_ffn = make_layer_norm(params_, p + ".ln_ffn", d);
        layer.ffn = make_feed_forward(params_, p + ".ffn", d, mc.ffn, rng, sd);
        dec_layers_.push_back(layer);
    }
    dec_out_ = make_layer_norm(params_, "decoder.ln_out", d);
    w_h_ = params_.normal("decoder.w_h", {d, vocab_size_}, rng, sd);
    b_h_ = params_.zeros("decoder.b_h", {vocab_size_});
    student_ = std::make_unique<StudentNet>(cfg_.vision, params_, rng);

    // m must have the teacher's last-stage activation shape.
    NoGradGuard ng;
    const std::size_t s = layout_.image_size();
    auto trace = teacher_->forward(Tensor::zeros({1, 3, s, s}));
    auto m = generate_multimodal(Tensor::zeros({1, d}), w_t_, b_t_, layout_.feature_side());
    if (teacher_->last(trace).shape() != m.map.shape())
        throw ConfigError("multimodal feature shape " + shape_str(m.map.shape()) +
                          " differs from the teacher's last stage " + shape_str(teacher_->last(trace).shape()));
}

Tensor IkdModel::embed_source(const std::vector<int>& ids) const {
    auto e = embed(ids, 1, ids.size(), false);
    return reshape(e, {ids.size(), cfg_.model.d_model});
}

Tensor IkdModel::embed(const std::vector<int>& ids, std::size_t batch, std::size_t len, bool target) const {
    if (ids.size() != batch * len) throw DimensionError("embed: id count does not match batch x len");
    if (len > cfg_.model.max_len)
        throw ContractError("sequence of length " + std::to_string(len) + " exceeds model.max_len " +
                            std::to_string(cfg_.model.max_len));
    const std::size_t d = cfg_.model.d_model;
    auto rows = embedding_lookup(target ? tgt_embed_ : src_embed_, ids);
    std::vector<double> pos(batch * len * d);
    auto pd = positions_.data();
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(pd.begin(), len * d, pos.begin() + b * len * d);
    return add(reshape(rows, {batch, len, d}), Tensor::from({batch, len, d}, std::move(pos)));
}

EncoderOutput IkdModel::encode_multimodal(const Tensor& t, const Tensor& m_rows, const std::vector<std::uint8_t>& pad,
                                          std::vector<AttentionRecord>* records) const {
    if (t.rank() != 3) throw DimensionError("encode_multimodal expects t [B, I, d], got " + shape_str(t.shape()));
    const std::size_t b = t.dim(0), len = t.dim(1), p = m_rows.dim(1), heads = cfg_.model.heads;
    if (pad.size() != b * len) throw DimensionError("encode_multimodal: pad mask does not match " + shape_str(t.shape()));
    std::vector<std::size_t> lengths(b, 0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < len; ++j) lengths[i] += !pad[i * len + j];
        if (lengths[i] == 0) throw ContractError("encode_multimodal: source " + std::to_string(i) + " is all padding");
    }
    const bool text = cfg_.model.text_features;
    Tensor m = cfg_.model.use_multimodal ? m_rows : Tensor::zeros(m_rows.shape());
    Tensor x = text ? fuse_query(t, m, w_m_) : linear(m, w_m_);
    const std::size_t total = x.dim(1);

    for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
        const auto& layer = enc_layers_[l];
        auto h = apply(layer.ln_attn, x);
        auto kv = text ? slice(h, 1, 0, len) : h;
        AttentionWeights w;
        auto a = multi_head_attention(layer.attn, h, kv, heads, text ? pad : std::vector<std::uint8_t>{}, false,
                                      records ? &w : nullptr);
        if (records) {
            for (std::size_t ex = 0; ex < b; ++ex)
                for (std::size_t hd = 0; hd < heads; ++hd) {
                    AttentionRecord r;
                    r.layer = l;
                    r.head = hd;
                    r.example = ex;
                    r.text_rows = text ? lengths[ex] : 0;
                    const std::size_t cols = text ? lengths[ex] : p;
                    r.cols = cols;
                    for (std::size_t q = 0; q < total; ++q) {
                        if (text && q >= lengths[ex] && q < len) continue;
                        for (std::size_t k = 0; k < cols; ++k) r.weights.push_back(w.at(ex, hd, q, k));
                        ++r.rows;
                    }
                    records->push_back(std::move(r));
                }
        }
        x = add(x, a);
        x = add(x, apply(layer.ffn, apply(layer.ln_ffn, x)));
    }
    EncoderOutput out;
    out.hidden = apply(enc_out_, x);
    out.text_len = text ? len : 0;
    out.regions = p;
    out.pad.assign(b * total, 0);
    if (text)
        for (std::size_t i = 0; i < b; ++i) std::copy_n(pad.begin() + i * len, len, out.pad.begin() + i * total);
    return out;
}

SourceEncoding IkdModel::encode_source(const std::vector<int>& ids, std::size_t batch, std::size_t len,
                                       const std::vector<std::uint8_t>& pad,
                                       std::vector<AttentionRecord>* records) const {
    SourceEncoding s;
    s.t = embed(ids, batch, len, false);
    s.t_bar = global_text_feature(s.t, pad);
    s.m = generate_multimodal(s.t_bar, w_t_, b_t_, layout_.feature_side());
    s.enc = encode_multimodal(s.t, s.m.rows, pad, records);
    return s;
}

SourceEncoding IkdModel::encode_source(const Batch& batch, std::vector<AttentionRecord>* records) const {
    return encode_source(batch.source, batch.size, batch.src_len, batch.source_pad, records);
}

Tensor IkdModel::forward_decoder(const Tensor& y, const EncoderOutput& enc) const {
    const std::size_t heads = cfg_.model.heads;
    Tensor x = y;
    for (const auto& layer : dec_layers_) {
        auto h = apply(layer.ln_self, x);
        x = add(x, multi_head_attention(layer.self_attn, h, h, heads, {}, true));
        auto hc = apply(layer.ln_cross, x);
        x = add(x, multi_head_attention(layer.cross_attn, hc, enc.hidden, heads, enc.pad, false));
        x = add(x, apply(layer.ffn, apply(layer.ln_ffn, x)));
    }
    return linear(apply(dec_out_, x), w_h_, b_h_);
}

Tensor IkdModel::decode_logits(const std::vector<int>& prefix, std::size_t batch, std::size_t len,
                               const EncoderOutput& enc) const {
    if (len == 0 || prefix.empty()) throw ContractError("decode_logits: empty prefix");
    if (enc.hidden.dim(0) != batch) throw DimensionError("decode_logits: prefix batch differs from encoder batch");
    for (std::size_t b = 0; b < batch; ++b)
        if (prefix[b * len] != Vocabulary::kBos) throw ContractError("decode_logits: prefix must begin with <bos>");
    return forward_decoder(embed(prefix, batch, len, true), enc);
}

TranslationLoss IkdModel::translation_loss(const Batch& batch) const {
    return translation_loss(batch, encode_source(batch));
}

TranslationLoss IkdModel::translation_loss(const Batch& batch, const SourceEncoding& encoding) const {
    const std::size_t b = batch.size, tl = batch.tgt_len;
    if (tl < 2) throw ContractError("translation_loss: targets must hold <bos> and at least one more token");
    std::vector<int> prefix(b * (tl - 1)), labels(b * (tl - 1));
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j + 1 < tl; ++j) {
            prefix[i * (tl - 1) + j] = batch.target[i * tl + j];
            labels[i * (tl - 1) + j] = batch.target[i * tl + j + 1];
            tokens += labels[i * (tl - 1) + j] != Vocabulary::kPad;
        }
    auto logits = decode_logits(prefix, b, tl - 1, encoding.enc);
    auto flat = reshape(logits, {b * (tl - 1), vocab_size_});
    TranslationLoss out;
    out.sum = cross_entropy(flat, labels, Reduction::Sum, Vocabulary::kPad);
    out.tokens = tokens;
    out.mean = scale(out.sum, 1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1)));
    return out;
}

EncoderOutput IkdModel::replicate(const EncoderOutput& enc, std::size_t copies) const {
    if (copies == 1) return enc;
    EncoderOutput out = enc;
    out.hidden = concat(std::vector<Tensor>(copies, enc.hidden), 0);
    out.pad.clear();
    for (std::size_t i = 0; i < copies; ++i) out.pad.insert(out.pad.end(), enc.pad.begin(), enc.pad.end());
    return out;
}

std::vector<double> IkdModel::next_log_probs(const EncoderOutput& enc,
                                             const std::vector<std::vector<int>>& prefixes) const {
    const std::size_t n = prefixes.size(), len = prefixes.front().size();
    std::vector<int> ids;
    ids.reserve(n * len);
    for (const auto& p : prefixes) ids.insert(ids.end(), p.begin(), p.end());
    auto logits = decode_logits(ids, n, len, enc);
    auto last = reshape(slice(logits, 1, len - 1, 1), {n, vocab_size_});
    return log_softmax(last, 1).to_vector();
}

namespace {

void check_decode_args(std::size_t max_len, std::size_t beam) {
    if (max_len < 1) throw ContractError("max_len must be at least 1");
    if (beam < 1) throw ContractError("beam must be at least 1");
}

// <pad> and <bos> are never generated.
bool emittable(std::size_t v) { return v != Vocabulary::kPad && v != Vocabulary::kBos; }

std::size_t argmax(const double* row, std::size_t n) {
    std::size_t best = Vocabulary::kUnk;
    for (std::size_t j = best + 1; j < n; ++j)
        if (emittable(j) && row[j] > row[best]) best = j;
    return best;
}

}  // namespace

Hypothesis IkdModel::decode_greedy(const std::vector<int>& source, std::size_t max_len) const {
    check_decode_args(max_len, 1);
    max_len = std::min(max_len, cfg_.model.max_len - 1);
    NoGradGuard ng;
    auto enc = encode_source(source, 1, source.size(), std::vector<std::uint8_t>(source.size(), 0)).enc;
    std::vector<int> prefix{Vocabulary::kBos};
    double total = 0.0;
    Hypothesis h;
    while (h.tokens.size() < max_len) {
        auto lp = next_log_probs(enc, {prefix});
        const auto tok = static_cast<int>(argmax(lp.data(), vocab_size_));
        total += lp[static_cast<std::size_t>(tok)];
        h.tokens.push_back(tok);
        prefix.push_back(tok);
        if (tok == Vocabulary::kEos) break;
    }
    h.score = total / static_cast<double>(h.tokens.size());
    return h;
}

Hypothesis IkdModel::decode_beam(const std::vector<int>& source, std::size_t beam, std::size_t max_len) const {
    check_decode_args(max_len, beam);
    auto greedy = decode_greedy(source, max_len);
    if (beam == 1) return greedy;
    max_len = std::min(max_len, cfg_.model.max_len - 1);
    NoGradGuard ng;
    auto enc = encode_source(source, 1, source.size(), std::vector<std::uint8_t>(source.size(), 0)).enc;

    struct Beam {
        std::vector<int> tokens;
        double logp = 0.0;
        bool done = false;
        double score() const { return tokens.empty() ? 0.0 : logp / static_cast<double>(tokens.size()); }
    };
    auto better = [](const Beam& a, const Beam& b) {
        const double sa = a.score(), sb = b.score();
        if (sa != sb) return sa > sb;
        return a.tokens < b.tokens;
    };
    std::vector<Beam> beams{Beam{}};
    for (std::size_t step = 0; step < max_len; ++step) {
        std::vector<std::vector<int>> prefixes;
        std::vector<std::size_t> active;
        for (std::size_t i = 0; i < beams.size(); ++i) {
            if (beams[i].done) continue;
            std::vector<int> p{Vocabulary::kBos};
            p.insert(p.end(), beams[i].tokens.begin(), beams[i].tokens.end());
            prefixes.push_back(std::move(p));
            active.push_back(i);
        }
        if (active.empty()) break;
        auto lp = next_log_probs(replicate(enc, active.size()), prefixes);
        std::vector<Beam> next;
        for (const auto& b : beams)
            if (b.done) next.push_back(b);
        for (std::size_t a = 0; a < active.size(); ++a) {
            const Beam& src = beams[active[a]];
            for (std::size_t v = 0; v < vocab_size_; ++v) {
                if (!emittable(v)) continue;
                Beam c = src;
                c.tokens.push_back(static_cast<int>(v));
                c.logp += lp[a * vocab_size_ + v];
                c.done = static_cast<int>(v) == Vocabulary::kEos;
                next.push_back(std::move(c));
            }
        }
        const std::size_t keep = std::min(beam, next.size());
        std::partial_sort(next.begin(), next.begin() + static_cast<long>(keep), next.end(), better);
        next.resize(keep);
        beams = std::move(next);
    }
    const Beam& best = *std::min_element(beams.begin(), beams.end(), better);
    Hypothesis h{best.tokens, best.score()};
    // The beam may prune the greedy path; keep whichever scores higher.
    if (greedy.score > h.score) return greedy;
    return h;
}

double IkdModel::score(const std::vector<int>& source, const std::vector<int>& continuation) const {
    if (continuation.empty()) throw ContractError("score: empty continuation");
    NoGradGuard ng;
    auto enc = encode_source(source, 1, source.size(), std::vector<std::uint8_t>(source.size(), 0)).enc;
    std::vector<int> prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), continuation.begin(), continuation.end() - 1);
    auto logits = decode_logits(prefix, 1, prefix.size(), enc);
    auto lp = log_softmax(reshape(logits, {prefix.size(), vocab_size_}), 1);
    double total = 0.0;
    for (std::size_t j = 0; j < continuation.size(); ++j)
        total += lp.data()[j * vocab_size_ + static_cast<std::size_t>(continuation[j])];
    return total / static_cast<double>(continuation.size());
}

std::vector<std::vector<int>> IkdModel::translate(const std::vector<std::vector<int>>& sources, std::size_t beam,
                                                  std::size_t max_len) const {
    check_decode_args(max_len, beam);
    std::vector<std::vector<int>> out;
    if (beam > 1) {
        for (const auto& s : sources) out.push_back(decode_beam(s, beam, max_len).tokens);
        return out;
    }
    // Batched greedy rollout; rows past <eos> keep decoding but are ignored.
    max_len = std::min(max_len, cfg_.model.max_len - 1);
    NoGradGuard ng;
    const std::size_t chunk = 64;
    for (std::size_t start = 0; start < sources.size(); start += chunk) {
        const std::size_t n = std::min(chunk, sources.size() - start);
        std::size_t len = 0;
        for (std::size_t i = 0; i < n; ++i) len = std::max(len, sources[start + i].size());
        std::vector<int> ids(n * len, Vocabulary::kPad);
        std::vector<std::uint8_t> pad(n * len, 1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < sources[start + i].size(); ++j) {
                ids[i * len + j] = sources[start + i][j];
                pad[i * len + j] = 0;
            }
        auto enc = encode_source(ids, n, len, pad).enc;
        std::vector<std::vector<int>> prefixes(n, std::vector<int>{Vocabulary::kBos});
        std::vector<std::vector<int>> hyps(n);
        std::vector<bool> done(n, false);
        for (std::size_t step = 0; step < max_len; ++step) {
            auto lp = next_log_probs(enc, prefixes);
            bool all = true;
            for (std::size_t i = 0; i < n; ++i) {
                const auto tok = static_cast<int>(argmax(lp.data() + i * vocab_size_, vocab_size_));
                prefixes[i].push_back(tok);
                if (!done[i]) hyps[i].push_back(tok);
                if (tok == Vocabulary::kEos) done[i] = true;
                all = all && done[i];
            }
            if (all) break;
        }
        for (auto& h : hyps) out.push_back(std::move(h));
    }
    return out;
}

Json attention_to_json(const std::vector<AttentionRecord>& records) {
    Json layers = Json::array();
    for (const auto& r : records) {
        Json rows = Json::array();
        Json labels = Json::array();
        for (std::size_t i = 0; i < r.rows; ++i) {
            rows.push_back(std::vector<double>(r.weights.begin() + static_cast<long>(i * r.cols),
                                               r.weights.begin() + static_cast<long>((i + 1) * r.cols)));
            labels.push_back(i < r.text_rows ? "t" + std::to_string(i) : "m" + std::to_string(i - r.text_rows));
        }
        layers.push_back({{"layer", r.layer},
                          {"head", r.head},
                          {"example", r.example},
                          {"text_rows", r.text_rows},
                          {"row_labels", labels},
                          {"rows", rows}});
    }
    return Json{{"layers", layers}};
}

void export_attention(const IkdModel& model, const Batch& batch, const std::filesystem::path& out) {
    std::vector<AttentionRecord> records;
    {
        NoGradGuard ng;
        model.encode_source(batch, &records);
    }
    std::ofstream os(out, std::ios::trunc);
    if (!os) throw IoError("cannot write attention export " + out.string());
    os << attention_to_json(records).dump() << '\n';
    if (!os) throw IoError("failed writing " + out.string());
}

}  // namespace ikd
