#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ikd/random.hpp"
#include "ikd/tensor.hpp"

namespace ikd {

// Ordered, named parameter set. Registration order fixes the optimizer and
// checkpoint layout.
class ParamStore {
  public:
    Tensor add(const std::string& name, Tensor value, bool trainable = true);
    Tensor normal(const std::string& name, Shape shape, Rng& rng, double stddev, bool trainable = true);
    Tensor zeros(const std::string& name, Shape shape, bool trainable = true);
    Tensor ones(const std::string& name, Shape shape, bool trainable = true);

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<Tensor> tensors() const;
    Tensor at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t size() const { return items_.size(); }
    std::size_t numel() const;
    void zero_grad();
    std::uint64_t checksum() const;

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
    Tensor w1, b1, w2, b2;
};

LayerNormParams make_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t width);
AttentionParams make_attention(ParamStore& ps, const std::string& prefix, std::size_t d, Rng& rng, double stddev);
FeedForwardParams make_feed_forward(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t hidden,
                                    Rng& rng, double stddev);

Tensor apply(const LayerNormParams& p, const Tensor& x);
Tensor apply(const FeedForwardParams& p, const Tensor& x);

// Softmax weights of one attention call, [batch, heads, queries, keys].
struct AttentionWeights {
    std::size_t batch = 0, heads = 0, queries = 0, keys = 0;
    std::vector<double> values;
    double at(std::size_t b, std::size_t h, std::size_t q, std::size_t k) const {
        return values[((b * heads + h) * queries + q) * keys + k];
    }
};

// Multi-head scaled dot-product attention. q_in [B, Lq, d], kv_in [B, Lk, d].
// key_pad (size B*Lk, may be empty) masks key columns; causal masks k > q.
// Scores are scaled by 1/sqrt(d / heads).
Tensor multi_head_attention(const AttentionParams& p, const Tensor& q_in, const Tensor& kv_in, std::size_t heads,
                            const std::vector<std::uint8_t>& key_pad, bool causal,
                            AttentionWeights* capture = nullptr);

}  // namespace ikd
