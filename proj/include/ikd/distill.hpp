#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ikd/config.hpp"
#include "ikd/nn.hpp"
#include "ikd/tensor.hpp"
#include "ikd/tensor_io.hpp"

namespace ikd {

struct TraceEntry {
    std::string name;
    Tensor value;
    // Granularity membership. The teacher's last stage output is also the
    // Model-level representation.
    bool layer = false;
    bool block = false;
    // Student entries: the teacher entry this one inverts.
    std::string mirror_of;
};

using ActivationTrace = std::vector<TraceEntry>;

const TraceEntry* find_entry(const ActivationTrace& trace, const std::string& name);

struct BottleneckSpec {
    std::string name;
    std::size_t in_channels, mid_channels, out_channels, stride;
    // Teacher entry feeding this block.
    std::string input_name;
    // Last block of its stage (a Block-level representation).
    bool stage_output;
};

// Block layout shared by teacher and student.
class VisionLayout {
  public:
    explicit VisionLayout(const VisionConfig& cfg);
    const std::vector<BottleneckSpec>& blocks() const { return blocks_; }
    std::size_t stem_channels() const { return stem_channels_; }
    std::size_t image_size() const { return image_size_; }
    // Teacher last-stage activation: [C_m, p, p].
    std::size_t feature_channels() const { return blocks_.back().out_channels; }
    std::size_t feature_side() const { return feature_side_; }
    std::size_t regions() const { return feature_side_ * feature_side_; }
    std::size_t stage_count() const { return stage_count_; }
    const std::string& last_name() const { return blocks_.back().name; }

  private:
    std::vector<BottleneckSpec> blocks_;
    std::size_t stem_channels_, image_size_, feature_side_, stage_count_;
};

// Frozen convolutional feature extractor: stem conv (stride 2) followed by
// bottleneck stages that each halve the spatial size.
class TeacherNet {
  public:
    explicit TeacherNet(const VisionConfig& cfg);

    // images [B, 3, H, W] -> trace in execution order. Gradients flow to the
    // input through the frozen weights.
    ActivationTrace forward(const Tensor& images) const;
    const Tensor& last(const ActivationTrace& trace) const;

    const VisionLayout& layout() const { return layout_; }
    const ParamStore& params() const { return params_; }
    void import_weights(const std::filesystem::path& dir);
    void export_weights(const std::filesystem::path& dir) const;

  private:
    VisionConfig cfg_;
    VisionLayout layout_;
    ParamStore params_;
};

// Inverted student: mirrors every teacher block in reverse, ending with a
// nearest upsample, a 3-channel conv and a sigmoid.
class StudentNet {
  public:
    StudentNet(const VisionConfig& cfg, ParamStore& store, Rng& rng);

    // m_map [B, C_m, p, p] -> (I_s [B, 3, H, W], trace).
    std::pair<Tensor, ActivationTrace> forward(const Tensor& m_map) const;

  private:
    struct Block {
        BottleneckSpec spec;
        Tensor c1w, c1b, c2w, c2b, c3w, c3b, pw, pb;
    };
    VisionLayout layout_;
    std::vector<Block> blocks_;
    Tensor out_w_, out_b_;
};

using RepresentationPair = std::pair<Tensor, Tensor>;

// Teacher-side entry first in every pair. m_map stands in as the mirror of
// the teacher's last stage output.
std::vector<RepresentationPair> pair_representations(const ActivationTrace& teacher, const ActivationTrace& student,
                                                     const Tensor& m_map, Granularity granularity);

// Teacher-vs-teacher pairs for the intra-modal loss.
std::vector<RepresentationPair> pair_traces(const ActivationTrace& real, const ActivationTrace& pseudo,
                                            Granularity granularity);

// Flattened similarity of one pair.
Tensor similarity(const Tensor& a, const Tensor& b, Similarity kind);
// Sum over the leading (batch) axis of per-example similarities.
Tensor batch_similarity(const Tensor& a, const Tensor& b, Similarity kind);

// Sum of per-pair similarities plus ||I_r - I_s||_2 per example.
Tensor irm_kd_loss(const ActivationTrace& teacher_real, const ActivationTrace& student, const Tensor& m_map,
                   const Tensor& image_real, const Tensor& image_student, const DistillConfig& cfg);
Tensor iam_kd_loss(const Tensor& image_real, const Tensor& image_student, const TeacherNet& teacher,
                   const DistillConfig& cfg);
// Same, reusing an already computed trace of the real images.
Tensor iam_kd_loss(const ActivationTrace& teacher_real, const Tensor& image_real, const Tensor& image_student,
                   const TeacherNet& teacher, const DistillConfig& cfg);

// Directory of TNSR files plus manifest.json {"format", "params": {name: file}}.
void export_params(const ParamStore& params, const std::filesystem::path& dir,
                   TensorPrecision precision = TensorPrecision::Float32);
// Copies values into existing parameters by name; shapes must match.
void import_params(ParamStore& params, const std::filesystem::path& dir);

}  // namespace ikd
