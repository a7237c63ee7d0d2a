#include "ikd/gradsuite.hpp"

#include <cmath>
#include <functional>

#include "ikd/model.hpp"
#include "ikd/nn.hpp"
#include "ikd/ops.hpp"
#include "ikd/random.hpp"
#include "ikd/train.hpp"

namespace ikd {

namespace {

using Fn = std::function<Tensor(const Tensor&)>;

// Keeps entries away from the kinks of relu / abs.
Tensor away_from_zero(Tensor x) {
    for (auto& v : x.mutable_data()) v = v >= 0 ? v + 0.2 : v - 0.2;
    return x;
}

class Suite {
  public:
    Suite(const GradSuiteOptions& o) : opt_(o), rng_(o.seed + 17) {}

    // d/dx <op(x), r> for a fixed random r, so every output coordinate counts.
    void op(const std::string& name, const Fn& f, const Tensor& x) {
        Tensor probe;
        {
            NoGradGuard ng;
            probe = randn(f(x).shape(), rng_);
        }
        Fn g = [f, probe](const Tensor& v) { return sum(mul(f(v), probe)); };
        GradSuiteEntry e{name, opt_.op_tol, grad_check(g, x, {.eps = 1e-5, .tol = opt_.op_tol})};
        entries_.push_back(std::move(e));
    }

    void scalar(const std::string& name, const Fn& f, const Tensor& x) {
        entries_.push_back({name, opt_.op_tol, grad_check(f, x, {.eps = 1e-5, .tol = opt_.op_tol})});
    }

    void push(GradSuiteEntry e) { entries_.push_back(std::move(e)); }

    Tensor randn_t(Shape s) { return randn(std::move(s), rng_); }
    Rng& rng() { return rng_; }
    std::vector<GradSuiteEntry> take() { return std::move(entries_); }

  private:
    GradSuiteOptions opt_;
    Rng rng_;
    std::vector<GradSuiteEntry> entries_;
};

Config suite_model_config() {
    Config c;
    c.model.d_model = 8;
    c.model.heads = 2;
    c.model.enc_layers = 1;
    c.model.dec_layers = 1;
    c.model.ffn = 12;
    c.model.max_len = 16;
    c.vision.image_size = 8;
    c.vision.stem_channels = 4;
    c.vision.stage_channels = {4, 6};
    c.vision.bottleneck_divisor = 2;
    c.distill.granularity = Granularity::Layer;
    return c;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options) {
    Suite s(options);
    auto A = s.randn_t({3, 4});
    auto B = s.randn_t({3, 4});
    auto pos = away_from_zero(s.randn_t({3, 4}));
    auto positive = add_scalar(abs(s.randn_t({3, 4})), 0.5);

    s.op("add", [B](const Tensor& x) { return add(x, B); }, A);
    s.op("sub", [B](const Tensor& x) { return sub(B, x); }, A);
    s.op("mul", [B](const Tensor& x) { return mul(x, B); }, A);
    s.op("div.numerator", [positive](const Tensor& x) { return div(x, positive); }, A);
    s.op("div.denominator", [B](const Tensor& x) { return div(B, x); }, positive);
    s.op("scale", [](const Tensor& x) { return scale(x, -1.7); }, A);
    s.op("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, A);
    auto bias = s.randn_t({4});
    s.op("add_bias.input", [bias](const Tensor& x) { return add_bias(x, bias); }, A);
    s.op("add_bias.bias", [A](const Tensor& b) { return add_bias(A, b); }, bias);
    s.op("relu", [](const Tensor& x) { return relu(x); }, pos);
    s.op("sigmoid", [](const Tensor& x) { return sigmoid(x); }, A);
    s.op("abs", [](const Tensor& x) { return abs(x); }, pos);
    s.op("exp", [](const Tensor& x) { return exp(x); }, A);
    s.op("log", [](const Tensor& x) { return log(x); }, positive);
    s.op("sqrt", [](const Tensor& x) { return sqrt(x); }, positive);
    s.scalar("sum", [](const Tensor& x) { return sum(mul(x, x)); }, A);
    s.scalar("mean", [](const Tensor& x) { return mean(mul(x, x)); }, A);
    s.scalar("max_all", [](const Tensor& x) { return max_all(x); }, A);
    s.scalar("l2_norm", [](const Tensor& x) { return l2_norm(x); }, A);
    s.scalar("dot", [B](const Tensor& x) { return dot(x, B); }, A);

    auto M = s.randn_t({4, 5});
    s.op("matmul.left", [M](const Tensor& x) { return matmul(x, M); }, A);
    s.op("matmul.right", [A](const Tensor& x) { return matmul(A, x); }, M);
    auto P = s.randn_t({2, 3, 4}), Q = s.randn_t({2, 4, 5}), R = s.randn_t({2, 5, 4});
    s.op("bmm.left", [Q](const Tensor& x) { return bmm(x, Q); }, P);
    s.op("bmm.right", [P](const Tensor& x) { return bmm(P, x); }, Q);
    s.op("bmm.transposed", [P](const Tensor& x) { return bmm(P, x, true); }, R);
    auto lb = s.randn_t({5});
    s.op("linear.input", [M, lb](const Tensor& x) { return linear(x, M, lb); }, P);
    s.op("linear.weight", [P, lb](const Tensor& w) { return linear(P, w, lb); }, M);
    s.op("linear.bias", [P, M](const Tensor& b) { return linear(P, M, b); }, lb);

    s.op("reshape", [](const Tensor& x) { return reshape(x, {2, 6}); }, A);
    s.op("permute", [](const Tensor& x) { return permute(x, {2, 0, 1}); }, P);
    s.op("concat", [B](const Tensor& x) { return concat({B, x, x}, 1); }, A);
    s.op("slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }, A);
    s.op("softmax", [](const Tensor& x) { return softmax(x, 1); }, A);
    s.op("softmax.axis0", [](const Tensor& x) { return softmax(x, 0); }, P);
    s.op("log_softmax", [](const Tensor& x) { return log_softmax(x, 2); }, P);
    std::vector<std::uint8_t> mask{0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0};
    s.op("masked_fill", [mask](const Tensor& x) { return masked_fill(x, mask, -3.0); }, A);

    auto gain = add_scalar(s.randn_t({4}), 1.0), lnb = s.randn_t({4});
    s.op("layer_norm.input", [gain, lnb](const Tensor& x) { return layer_norm(x, gain, lnb); }, P);
    s.op("layer_norm.gain", [P, lnb](const Tensor& g) { return layer_norm(P, g, lnb); }, gain);
    s.op("layer_norm.bias", [P, gain](const Tensor& b) { return layer_norm(P, gain, b); }, lnb);

    auto img = s.randn_t({2, 3, 6, 6});
    auto kw = s.randn_t({4, 3, 3, 3}), kb = s.randn_t({4});
    s.op("conv2d.input", [kw, kb](const Tensor& x) { return conv2d(x, kw, kb, 1, 1); }, img);
    s.op("conv2d.weight", [img, kb](const Tensor& w) { return conv2d(img, w, kb, 2, 1); }, kw);
    s.op("conv2d.bias", [img, kw](const Tensor& b) { return conv2d(img, kw, b, 2, 1); }, kb);
    s.op("conv2d.1x1", [](const Tensor& x) { return conv2d(x, Tensor::full({2, 3, 1, 1}, 0.5)); }, img);
    s.op("avg_pool2d", [](const Tensor& x) { return avg_pool2d(x, 2); }, img);
    s.op("avg_unpool2d", [](const Tensor& x) { return avg_unpool2d(x, 3); }, img);
    s.op("upsample_nearest", [](const Tensor& x) { return upsample_nearest(x, 2); }, img);
    std::vector<double> csc{0.5, 2.0, -1.0}, csh{0.1, 0.2, 0.3};
    s.op("channel_affine", [csc, csh](const Tensor& x) { return channel_affine(x, csc, csh); }, img);

    auto table = s.randn_t({7, 3});
    s.op("embedding_lookup", [](const Tensor& t) { return embedding_lookup(t, {3, 0, 3, 6}); }, table);
    auto logits = s.randn_t({4, 6});
    s.scalar("cross_entropy.sum", [](const Tensor& x) { return cross_entropy(x, {1, 5, 0, 2}, Reduction::Sum, 0); },
             logits);
    s.scalar("cross_entropy.mean", [](const Tensor& x) { return cross_entropy(x, {1, 5, 0, 2}, Reduction::Mean); },
             logits);

    {
        ParamStore ps;
        auto ap = make_attention(ps, "attn", 4, s.rng(), 0.5);
        auto kv = s.randn_t({2, 3, 4});
        std::vector<std::uint8_t> pad{0, 0, 1, 0, 0, 0};
        s.op("attention.query", [ap, kv, pad](const Tensor& x) { return multi_head_attention(ap, x, kv, 2, pad, false); },
             P);
        s.op("attention.keys", [ap, P, pad](const Tensor& x) { return multi_head_attention(ap, P, x, 2, pad, false); },
             kv);
        s.op("attention.causal", [ap](const Tensor& x) { return multi_head_attention(ap, x, x, 2, {}, true); }, P);
        auto ffn = make_feed_forward(ps, "ffn", 4, 6, s.rng(), 0.5);
        s.op("feed_forward", [ffn](const Tensor& x) { return apply(ffn, x); }, P);
    }

    auto va = s.randn_t({2, 5}), vb = s.randn_t({2, 5});
    for (auto k : {Similarity::L2, Similarity::L1, Similarity::Linf, Similarity::Cosine, Similarity::KL})
        s.scalar("similarity." + to_string(k), [vb, k](const Tensor& x) { return batch_similarity(x, vb, k); }, va);

    // End to end: the joint loss over sampled parameter coordinates.
    {
        Config cfg = suite_model_config();
        SynthOptions so;
        so.image_size = cfg.vision.image_size;
        so.num_cues = 4;
        so.num_nouns = 3;
        auto synth = synth_generate(3, options.seed + 5, 1.0, so);
        std::vector<std::string> lines = synth.source;
        lines.insert(lines.end(), synth.target.begin(), synth.target.end());
        auto vocab = Vocabulary::build(lines);
        std::vector<TripletExample> corpus;
        for (std::size_t i = 0; i < synth.source.size(); ++i)
            corpus.push_back(make_example(synth.source[i], synth.target[i], vocab, synth.images[i]));
        auto batch = make_batch(corpus, {0, 1, 2});
        IkdModel model(cfg, vocab.size());
        auto report = grad_check_params([&] { return joint_loss(batch, model, cfg.distill, cfg.train).total; },
                                        model.params().tensors(),
                                        {.eps = 1e-5,
                                         .tol = options.model_tol,
                                         .floor = 1e-4,
                                         .max_coords = options.model_coords,
                                         .seed = options.seed + 1});
        s.push({"joint_loss (" + std::to_string(report.coords_checked) + " parameters)", options.model_tol, report});
    }
    return s.take();
}

}  // namespace ikd
