#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ikd/config.hpp"
#include "ikd/data.hpp"
#include "ikd/model.hpp"

namespace ikd {

struct BleuReport {
    double score = 0.0;
    std::array<double, 4> precisions{};
    std::array<std::size_t, 4> matches{};
    std::array<std::size_t, 4> totals{};
    double brevity_penalty = 0.0;
    std::size_t hyp_length = 0;
    std::size_t ref_length = 0;
};

// Corpus-level, case-insensitive BLEU-4 against one reference per line,
// without smoothing.
BleuReport bleu4(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);
Json to_json(const BleuReport& r);

struct RetrievalReport {
    std::vector<std::size_t> ks;
    std::vector<double> recalls;
    std::size_t queries = 0;
};

// [Q x G] cosine similarities; zero vectors score 0 against everything.
Tensor cosine_matrix(const std::vector<std::vector<double>>& queries, const std::vector<std::vector<double>>& gallery);
// Query i's ground truth is gallery i. Ties rank the lower gallery index first.
RetrievalReport retrieval_rk(const std::vector<std::vector<double>>& queries,
                             const std::vector<std::vector<double>>& gallery, const std::vector<std::size_t>& ks);
RetrievalReport retrieval_from_matrix(const Tensor& cosine, const std::vector<std::size_t>& ks);
Json to_json(const RetrievalReport& r);

// Greedy (beam 1) or beam decoding of every source, scored against the corpus targets.
std::vector<std::string> translate_corpus(const IkdModel& model, const std::vector<TripletExample>& corpus,
                                          const Vocabulary& vocab, std::size_t beam = 1);
std::vector<std::string> reference_strings(const std::vector<TripletExample>& corpus, const Vocabulary& vocab);
std::size_t default_max_len(const std::vector<int>& source, const ModelConfig& cfg);

struct AblationCell {
    std::string name;
    // Merge patch over the base config.
    Json overlay;
};

// Base, similarity (4), granularity (2) and loss-switch (4) rows; with
// backbone rows, two alternative encoder/decoder shapes are appended.
std::vector<AblationCell> default_ablation_grid(bool include_backbone = false);
std::vector<AblationCell> parse_grid(const Json& j);

struct AblationRow {
    std::string name;
    Json overlay;
    bool ok = false;
    std::string error;
    double bleu = 0.0;
    double delta = 0.0;
    double ambiguous_accuracy = -1.0;
    std::size_t steps = 0;
    bool kd_zero_every_step = false;
    double final_total = 0.0;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    Json to_json() const;
    std::string to_text() const;
};

struct AblationData {
    const std::vector<TripletExample>* train = nullptr;
    const std::vector<TripletExample>* eval = nullptr;
    const Vocabulary* vocab = nullptr;
    // Optional: enables the ambiguous-token accuracy column.
    const std::vector<SynthMeta>* eval_meta = nullptr;
};

double round2(double x);

// Trains one model per cell from the common base config; a failing cell
// records its error and the grid continues. Deltas are against the first row.
AblationTable ablate(const std::vector<AblationCell>& grid, const Config& base, const AblationData& data,
                     std::size_t jobs = 1);

struct DegradationReport {
    BleuReport clean;
    BleuReport masked;
    double drop = 0.0;
    double masked_fraction = 0.0;
    std::size_t masked_tokens = 0;
    std::size_t total_tokens = 0;
    // "zero-shot" when the model never saw masked sources in training.
    std::string mode = "zero-shot";
};

DegradationReport degradation_eval(const IkdModel& model, const std::vector<TripletExample>& corpus,
                                   const std::vector<std::string>& mask_set, const Vocabulary& vocab,
                                   const std::string& mode = "zero-shot");
Json to_json(const DegradationReport& r);

}  // namespace ikd
