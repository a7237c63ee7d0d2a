#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "ikd/config.hpp"
#include "ikd/data.hpp"
#include "ikd/model.hpp"

namespace ikd {

struct JointLoss {
    Tensor total;
    Tensor j_trans;
    Tensor irm;
    Tensor iam;
};

// total = J_trans + Loss_IrM + Loss_IaM; disabled terms are constant zeros
// and are not added to the total.
JointLoss joint_loss(const Batch& batch, const IkdModel& model, const DistillConfig& distill,
                     const TrainConfig& train = {});

class Adam {
  public:
    Adam(std::vector<Tensor> params, const TrainConfig& cfg);
    void step();
    std::size_t steps() const { return t_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore(std::size_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

  private:
    std::vector<Tensor> params_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct StepLog {
    std::size_t step = 0;
    double j_trans = 0, irm = 0, iam = 0, total = 0;
    bool operator==(const StepLog&) const = default;
};

Json to_json(const StepLog& log);

struct RunningStats {
    std::size_t count = 0;
    double sum_total = 0, sum_j_trans = 0, sum_irm = 0, sum_iam = 0;
    StepLog last;
    void add(const StepLog& s);
};

class Trainer {
  public:
    Trainer(IkdModel& model, const std::vector<TripletExample>& corpus);

    // One optimizer step on `batch`; throws DivergenceError on a non-finite total.
    StepLog train_step(const Batch& batch);
    // Continues from the current step until the configured budget (epochs x
    // batches, capped by train.max_steps) or `until` steps, whichever is first.
    std::vector<StepLog> fit(std::size_t until = 0, const std::function<void(const StepLog&)>& on_step = {});

    std::size_t step() const { return step_; }
    std::size_t steps_per_epoch() const;
    std::size_t total_steps() const;
    const RunningStats& stats() const { return stats_; }
    IkdModel& model() { return model_; }
    const IkdModel& model() const { return model_; }
    const Adam& optimizer() const { return adam_; }

    void save(const std::filesystem::path& dir, const Vocabulary& vocab) const;
    // Restores parameters, optimizer moments and the step counter. The
    // checkpoint's config must match this trainer's model config.
    void load(const std::filesystem::path& dir);

  private:
    const Batch& batch_for(std::size_t step);

    IkdModel& model_;
    const std::vector<TripletExample>& corpus_;
    Adam adam_;
    std::size_t step_ = 0;
    RunningStats stats_;
    std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
    std::vector<Batch> cached_batches_;
};

// Seed used to shuffle epoch `epoch`; batch order is a pure function of it.
std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch);

struct CheckpointInfo {
    Config config;
    Vocabulary vocab;
    std::size_t step = 0;
    Json stats;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
// Builds a model from a checkpoint and loads its parameters.
std::unique_ptr<IkdModel> load_model(const std::filesystem::path& dir, Vocabulary* vocab = nullptr);
// Configs agree on every field that shapes parameters or the optimization path.
bool resume_compatible(const Config& a, const Config& b);

struct TrainOptions {
    std::optional<std::filesystem::path> metrics_path;
    std::optional<std::filesystem::path> checkpoint_dir;
    const Vocabulary* vocab = nullptr;
    std::optional<std::filesystem::path> resume_from;
};

std::vector<StepLog> train(IkdModel& model, const std::vector<TripletExample>& corpus, const TrainOptions& options = {});

}  // namespace ikd
