#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "ikd/config.hpp"
#include "ikd/data.hpp"
#include "ikd/distill.hpp"
#include "ikd/nn.hpp"

namespace ikd {

// Masked mean over the real (non-pad) rows. t [B, I, d] -> [B, d].
Tensor global_text_feature(const Tensor& t, const std::vector<std::uint8_t>& pad);
// Single sentence: t [I, d] -> [d].
Tensor global_text_feature(const Tensor& t);

struct MultimodalFeature {
    // [B, C_m, p, p], the layout the student and the teacher use.
    Tensor map;
    // [B, P, C_m], one pseudo-token per region.
    Tensor rows;
};

// v = W^t t_bar (+ bias), replicated over a p x p grid by average unpooling.
MultimodalFeature generate_multimodal(const Tensor& t_bar, const Tensor& w_t, const Tensor& bias, std::size_t side);

// Concatenates text rows and projected regions along the sequence axis.
// t [I, d] or [B, I, d]; m_rows [P, C_m] or [B, P, C_m]; w_m [C_m, d].
Tensor fuse_query(const Tensor& t, const Tensor& m_rows, const Tensor& w_m);

Tensor sinusoidal_table(std::size_t length, std::size_t d);

struct AttentionRecord {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t example = 0;
    std::size_t text_rows = 0;
    // [(I + P) x I], row-major.
    std::size_t rows = 0, cols = 0;
    std::vector<double> weights;
};

struct EncoderOutput {
    // [B, L, d] with L = I + P (or P without text features).
    Tensor hidden;
    // [B * L], 1 on padded source rows.
    std::vector<std::uint8_t> pad;
    std::size_t text_len = 0;
    std::size_t regions = 0;
};

struct SourceEncoding {
    Tensor t;
    Tensor t_bar;
    MultimodalFeature m;
    EncoderOutput enc;
};

struct TranslationLoss {
    Tensor sum;
    Tensor mean;
    std::size_t tokens = 0;
};

struct Hypothesis {
    std::vector<int> tokens;
    // Length-normalized log-probability: sum(log p) / tokens.size().
    double score = 0.0;
};

class IkdModel {
  public:
    IkdModel(const Config& cfg, std::size_t vocab_size);
    IkdModel(const IkdModel&) = delete;
    IkdModel& operator=(const IkdModel&) = delete;

    const Config& config() const { return cfg_; }
    std::size_t vocab_size() const { return vocab_size_; }
    std::size_t regions() const { return layout_.regions(); }
    std::size_t feature_channels() const { return layout_.feature_channels(); }
    const VisionLayout& layout() const { return layout_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const TeacherNet& teacher() const { return *teacher_; }
    const StudentNet& student() const { return *student_; }
    Tensor w_m() const { return w_m_; }
    Tensor w_t() const { return w_t_; }

    // t_i = E[x_i] + PE[i]: [I, d].
    Tensor embed_source(const std::vector<int>& ids) const;
    // Row-major ids [batch x len] -> [batch, len, d].
    Tensor embed(const std::vector<int>& ids, std::size_t batch, std::size_t len, bool target) const;

    EncoderOutput encode_multimodal(const Tensor& t, const Tensor& m_rows, const std::vector<std::uint8_t>& pad,
                                    std::vector<AttentionRecord>* records = nullptr) const;
    // Text -> t, t_bar, m -> encoder states. No image enters here.
    SourceEncoding encode_source(const std::vector<int>& ids, std::size_t batch, std::size_t len,
                                 const std::vector<std::uint8_t>& pad,
                                 std::vector<AttentionRecord>* records = nullptr) const;
    SourceEncoding encode_source(const Batch& batch, std::vector<AttentionRecord>* records = nullptr) const;

    // Teacher-forced prefix [batch x len] (each row starting with <bos>) -> [batch, len, V].
    Tensor decode_logits(const std::vector<int>& prefix, std::size_t batch, std::size_t len,
                         const EncoderOutput& enc) const;

    TranslationLoss translation_loss(const Batch& batch) const;
    TranslationLoss translation_loss(const Batch& batch, const SourceEncoding& encoding) const;

    // Image-free inference entry points.
    Hypothesis decode_greedy(const std::vector<int>& source, std::size_t max_len) const;
    Hypothesis decode_beam(const std::vector<int>& source, std::size_t beam, std::size_t max_len) const;
    std::vector<std::vector<int>> translate(const std::vector<std::vector<int>>& sources, std::size_t beam,
                                            std::size_t max_len) const;
    // Scores a continuation under the same length-normalized scorer.
    double score(const std::vector<int>& source, const std::vector<int>& continuation) const;

  private:
    struct EncoderLayer {
        LayerNormParams ln_attn, ln_ffn;
        AttentionParams attn;
        FeedForwardParams ffn;
    };
    struct DecoderLayer {
        LayerNormParams ln_self, ln_cross, ln_ffn;
        AttentionParams self_attn, cross_attn;
        FeedForwardParams ffn;
    };

    Tensor forward_decoder(const Tensor& y, const EncoderOutput& enc) const;
    std::vector<double> next_log_probs(const EncoderOutput& enc, const std::vector<std::vector<int>>& prefixes) const;
    EncoderOutput replicate(const EncoderOutput& enc, std::size_t copies) const;

    Config cfg_;
    std::size_t vocab_size_;
    VisionLayout layout_;
    ParamStore params_;
    std::unique_ptr<TeacherNet> teacher_;
    std::unique_ptr<StudentNet> student_;
    Tensor src_embed_, tgt_embed_, positions_;
    Tensor w_m_, w_t_, b_t_;
    std::vector<EncoderLayer> enc_layers_;
    LayerNormParams enc_out_;
    std::vector<DecoderLayer> dec_layers_;
    LayerNormParams dec_out_;
    Tensor w_h_, b_h_;
};

// JSON {"layers": [{layer, head, example, row_labels, rows}]} with token rows
// labelled "t<i>" and region rows "m<j>".
Json attention_to_json(const std::vector<AttentionRecord>& records);
void export_attention(const IkdModel& model, const Batch& batch, const std::filesystem::path& out);

}  // namespace ikd
