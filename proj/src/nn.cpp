#include "ikd/nn.hpp"

#include <cmath>

#include "ikd/errors.hpp"
#include "ikd/ops.hpp"

namespace ikd {

Tensor ParamStore::add(const std::string& name, Tensor value, bool trainable) {
    if (contains(name)) throw ContractError("duplicate parameter name " + name);
    value.set_requires_grad(trainable);
    items_.emplace_back(name, value);
    return value;
}

Tensor ParamStore::normal(const std::string& name, Shape shape, Rng& rng, double stddev, bool trainable) {
    return add(name, randn(std::move(shape), rng, stddev), trainable);
}

Tensor ParamStore::zeros(const std::string& name, Shape shape, bool trainable) {
    return add(name, Tensor::zeros(std::move(shape)), trainable);
}

Tensor ParamStore::ones(const std::string& name, Shape shape, bool trainable) {
    return add(name, Tensor::full(std::move(shape), 1.0), trainable);
}

std::vector<Tensor> ParamStore::tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
}

Tensor ParamStore::at(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return t;
    throw ContractError("no parameter named " + name);
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return true;
    return false;
}

std::size_t ParamStore::numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [n, t] : items_) t.zero_grad();
}

std::uint64_t ParamStore::checksum() const {
    auto ts = tensors();
    return ikd::checksum(ts);
}

LayerNormParams make_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t width) {
    return {ps.ones(prefix + ".gain", {width}), ps.zeros(prefix + ".bias", {width})};
}

AttentionParams make_attention(ParamStore& ps, const std::string& prefix, std::size_t d, Rng& rng, double stddev) {
    AttentionParams a;
    a.wq = ps.normal(prefix + ".wq", {d, d}, rng, stddev);
    a.bq = ps.zeros(prefix + ".bq", {d});
    a.wk = ps.normal(prefix + ".wk", {d, d}, rng, stddev);
    a.bk = ps.zeros(prefix + ".bk", {d});
    a.wv = ps.normal(prefix + ".wv", {d, d}, rng, stddev);
    a.bv = ps.zeros(prefix + ".bv", {d});
    a.wo = ps.normal(prefix + ".wo", {d, d}, rng, stddev);
    a.bo = ps.zeros(prefix + ".bo", {d});
    return a;
}

FeedForwardParams make_feed_forward(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t hidden,
                                    Rng& rng, double stddev) {
    FeedForwardParams f;
    f.w1 = ps.normal(prefix + ".w1", {d, hidden}, rng, stddev);
    f.b1 = ps.zeros(prefix + ".b1", {hidden});
    f.w2 = ps.normal(prefix + ".w2", {hidden, d}, rng, stddev);
    f.b2 = ps.zeros(prefix + ".b2", {d});
    return f;
}

Tensor apply(const LayerNormParams& p, const Tensor& x) { return layer_norm(x, p.gain, p.bias, 1e-9); }

Tensor apply(const FeedForwardParams& p, const Tensor& x) { return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2); }

namespace {

// [B, L, d] -> [B*h, L, d/h]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
    auto r = reshape(x, {b, l, heads, d / heads});
    return reshape(permute(r, {0, 2, 1, 3}), {b * heads, l, d / heads});
}

// [B*h, L, dk] -> [B, L, h*dk]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
    const std::size_t l = x.dim(1), dk = x.dim(2);
    auto r = reshape(x, {batch, heads, l, dk});
    return reshape(permute(r, {0, 2, 1, 3}), {batch, l, heads * dk});
}

}  // namespace

Tensor multi_head_attention(const AttentionParams& p, const Tensor& q_in, const Tensor& kv_in, std::size_t heads,
                            const std::vector<std::uint8_t>& key_pad, bool causal, AttentionWeights* capture) {
    if (q_in.rank() != 3 || kv_in.rank() != 3 || q_in.dim(0) != kv_in.dim(0) || q_in.dim(2) != kv_in.dim(2))
        throw DimensionError("attention inputs " + shape_str(q_in.shape()) + " and " + shape_str(kv_in.shape()) +
                             " are not [B, L, d] with matching B and d");
    const std::size_t b = q_in.dim(0), lq = q_in.dim(1), lk = kv_in.dim(1), d = q_in.dim(2);
    if (d % heads != 0) throw DimensionError("width " + std::to_string(d) + " not divisible by heads");
    if (!key_pad.empty() && key_pad.size() != b * lk)
        throw DimensionError("key pad mask has " + std::to_string(key_pad.size()) + " entries, expected " +
                             std::to_string(b * lk));

    auto q = split_heads(linear(q_in, p.wq, p.bq), heads);
    auto k = split_heads(linear(kv_in, p.wk, p.bk), heads);
    auto v = split_heads(linear(kv_in, p.wv, p.bv), heads);
    auto scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d / heads)));

    if (!key_pad.empty() || causal) {
        std::vector<std::uint8_t> mask(b * heads * lq * lk, 0);
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < lq; ++i)
                    for (std::size_t j = 0; j < lk; ++j) {
                        bool m = (!key_pad.empty() && key_pad[bi * lk + j]) || (causal && j > i);
                        mask[((bi * heads + h) * lq + i) * lk + j] = m ? 1 : 0;
                    }
        scores = masked_fill(scores, mask, -INFINITY);
    }
    auto weights = softmax(scores, 2);
    if (capture) {
        capture->batch = b;
        capture->heads = heads;
        capture->queries = lq;
        capture->keys = lk;
        capture->values = weights.to_vector();
    }
    auto ctx = merge_heads(bmm(weights, v), b, heads);
    return linear(ctx, p.wo, p.bo);
}

}  // namespace ikd
