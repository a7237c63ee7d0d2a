#include "ikd/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "ikd/errors.hpp"
#include "ikd/train.hpp"

namespace ikd {

namespace {

std::vector<std::string> folded_tokens(const std::string& line) {
    auto toks = split_tokens(line);
    for (auto& t : toks)
        for (auto& ch : t) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return toks;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i)
        ++counts[std::vector<std::string>(toks.begin() + static_cast<long>(i), toks.begin() + static_cast<long>(i + n))];
    return counts;
}

}  // namespace

BleuReport bleu4(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
    if (hypotheses.empty()) throw ContractError("bleu4: empty corpus");
    if (hypotheses.size() != references.size())
        throw ContractError("bleu4: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                            std::to_string(references.size()) + " references");
    BleuReport r;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        auto h = folded_tokens(hypotheses[s]);
        auto ref = folded_tokens(references[s]);
        r.hyp_length += h.size();
        r.ref_length += ref.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            auto hc = ngram_counts(h, n);
            auto rc = ngram_counts(ref, n);
            for (const auto& [g, c] : hc) {
                auto it = rc.find(g);
                r.matches[n - 1] += std::min(c, it == rc.end() ? 0 : it->second);
            }
            r.totals[n - 1] += h.size() >= n ? h.size() - n + 1 : 0;
        }
    }
    double log_sum = 0.0;
    bool zero = false;
    for (std::size_t n = 0; n < 4; ++n) {
        r.precisions[n] = r.totals[n] ? static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]) : 0.0;
        if (r.precisions[n] == 0.0)
            zero = true;
        else
            log_sum += std::log(r.precisions[n]);
    }
    const double c = static_cast<double>(r.hyp_length), rl = static_cast<double>(r.ref_length);
    r.brevity_penalty = r.hyp_length == 0 ? 0.0 : (c < rl ? std::exp(1.0 - rl / c) : 1.0);
    r.score = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
    return r;
}

Json to_json(const BleuReport& r) {
    return Json{{"bleu", r.score},
                {"precisions", r.precisions},
                {"matches", r.matches},
                {"totals", r.totals},
                {"brevity_penalty", r.brevity_penalty},
                {"hyp_length", r.hyp_length},
                {"ref_length", r.ref_length}};
}

Tensor cosine_matrix(const std::vector<std::vector<double>>& queries, const std::vector<std::vector<double>>& gallery) {
    if (queries.empty() || gallery.empty()) throw ContractError("cosine_matrix: empty query or gallery set");
    const std::size_t d = queries.front().size();
    auto norm = [&](const std::vector<double>& v) {
        if (v.size() != d) throw DimensionError("cosine_matrix: feature widths differ");
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };
    std::vector<double> qn, gn;
    for (const auto& q : queries) qn.push_back(norm(q));
    for (const auto& g : gallery) gn.push_back(norm(g));
    std::vector<double> out(queries.size() * gallery.size(), 0.0);
    for (std::size_t i = 0; i < queries.size(); ++i)
        for (std::size_t j = 0; j < gallery.size(); ++j) {
            if (qn[i] < 1e-12 || gn[j] < 1e-12) continue;
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += queries[i][k] * gallery[j][k];
            out[i * gallery.size() + j] = dot / (qn[i] * gn[j]);
        }
    return Tensor::from({queries.size(), gallery.size()}, std::move(out));
}

RetrievalReport retrieval_from_matrix(const Tensor& cosine, const std::vector<std::size_t>& ks) {
    if (cosine.rank() != 2 || cosine.dim(0) != cosine.dim(1))
        throw ContractError("retrieval: query and gallery counts differ");
    const std::size_t n = cosine.dim(0);
    auto c = cosine.data();
    RetrievalReport r;
    r.ks = ks;
    r.queries = n;
    std::vector<std::size_t> rank(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double own = c[i * n + i];
        for (std::size_t j = 0; j < n; ++j) {
            const double s = c[i * n + j];
            if (s > own || (s == own && j < i)) ++rank[i];
        }
    }
    for (std::size_t k : ks) {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < n; ++i) hit += rank[i] < k;
        r.recalls.push_back(static_cast<double>(hit) / static_cast<double>(n));
    }
    return r;
}

RetrievalReport retrieval_rk(const std::vector<std::vector<double>>& queries,
                             const std::vector<std::vector<double>>& gallery, const std::vector<std::size_t>& ks) {
    if (queries.size() != gallery.size())
        throw ContractError("retrieval_rk: " + std::to_string(queries.size()) + " queries for " +
                            std::to_string(gallery.size()) + " gallery items");
    return retrieval_from_matrix(cosine_matrix(queries, gallery), ks);
}

Json to_json(const RetrievalReport& r) {
    Json recalls = Json::object();
    for (std::size_t i = 0; i < r.ks.size(); ++i) recalls["R@" + std::to_string(r.ks[i])] = r.recalls[i];
    return Json{{"queries", r.queries}, {"recall", recalls}};
}

std::size_t default_max_len(const std::vector<int>& source, const ModelConfig& cfg) {
    return std::min<std::size_t>(2 * source.size() + 10, cfg.max_len - 1);
}

std::vector<std::string> translate_corpus(const IkdModel& model, const std::vector<TripletExample>& corpus,
                                          const Vocabulary& vocab, std::size_t beam) {
    std::vector<std::vector<int>> sources;
    std::size_t max_len = 1;
    for (const auto& ex : corpus) {
        sources.push_back(ex.source);
        max_len = std::max(max_len, default_max_len(ex.source, model.config().model));
    }
    std::vector<std::string> out;
    for (const auto& ids : model.translate(sources, beam, max_len)) out.push_back(vocab.decode(ids));
    return out;
}

std::vector<std::string> reference_strings(const std::vector<TripletExample>& corpus, const Vocabulary& vocab) {
    std::vector<std::string> out;
    for (const auto& ex : corpus) out.push_back(vocab.decode(ex.target));
    return out;
}

std::vector<AblationCell> default_ablation_grid(bool include_backbone) {
    std::vector<AblationCell> g;
    g.push_back({"base (L2 / Model / IrM+IaM)", Json::object()});
    for (const char* s : {"L1", "Linf", "Cosine", "KL"})
        g.push_back({std::string("similarity ") + s, Json{{"distill", {{"similarity", s}}}}});
    for (const char* gr : {"Block", "Layer"})
        g.push_back({std::string("granularity ") + gr, Json{{"distill", {{"granularity", gr}}}}});
    g.push_back({"w/o IrM-KD", Json{{"distill", {{"enable_irm", false}}}}});
    g.push_back({"w/o IaM-KD", Json{{"distill", {{"enable_iam", false}}}}});
    g.push_back({"w/o (IrM-KD+IaM-KD)", Json{{"distill", {{"enable_irm", false}, {"enable_iam", false}}}}});
    g.push_back({"image space loss only", Json{{"distill", {{"image_space_only", true}}}}});
    if (include_backbone) {
        g.push_back({"backbone deeper (+2 layers)",
                     Json{{"model", {{"enc_layers", 6}, {"dec_layers", 6}}}}});
        g.push_back({"backbone narrower (d/2)", Json{{"model", {{"d_model", 32}, {"ffn", 64}}}}});
    }
    return g;
}

std::vector<AblationCell> parse_grid(const Json& j) {
    const Json* cells = &j;
    if (j.is_object() && j.contains("cells")) cells = &j.at("cells");
    if (!cells->is_array()) throw ConfigError("ablation grid must be a JSON array of {name, overlay}");
    std::vector<AblationCell> out;
    for (const auto& c : *cells) {
        if (!c.is_object() || !c.contains("name")) throw ConfigError("ablation cell without a name");
        out.push_back({c.at("name").get<std::string>(), c.value("overlay", Json::object())});
    }
    if (out.empty()) throw ConfigError("ablation grid is empty");
    return out;
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

namespace {

AblationRow run_cell(const AblationCell& cell, const Config& base, const AblationData& data) {
    AblationRow row;
    row.name = cell.name;
    row.overlay = cell.overlay;
    try {
        Config cfg = apply_overlay(base, cell.overlay);
        IkdModel model(cfg, data.vocab->size());
        Trainer trainer(model, *data.train);
        row.kd_zero_every_step = true;
        trainer.fit(0, [&](const StepLog& s) {
            if (s.irm != 0.0 || s.iam != 0.0) row.kd_zero_every_step = false;
            row.final_total = s.total;
        });
        row.steps = trainer.step();
        auto hyps = translate_corpus(model, *data.eval, *data.vocab);
        row.bleu = bleu4(hyps, reference_strings(*data.eval, *data.vocab)).score;
        if (data.eval_meta) row.ambiguous_accuracy = ambiguous_accuracy(hyps, *data.eval_meta);
        row.ok = true;
    } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
    }
    return row;
}

}  // namespace

AblationTable ablate(const std::vector<AblationCell>& grid, const Config& base, const AblationData& data,
                     std::size_t jobs) {
    if (!data.train || !data.eval || !data.vocab) throw ContractError("ablate: training data, eval data and vocabulary are required");
    AblationTable table;
    table.rows.resize(grid.size());
    jobs = std::max<std::size_t>(1, std::min(jobs, grid.size()));
    if (jobs == 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) table.rows[i] = run_cell(grid[i], base, data);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        for (std::size_t w = 0; w < jobs; ++w)
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < grid.size(); i = next++) table.rows[i] = run_cell(grid[i], base, data);
            });
        for (auto& t : workers) t.join();
    }
    const auto& ref = table.rows.front();
    for (auto& r : table.rows) r.delta = (r.ok && ref.ok) ? round2(round2(r.bleu) - round2(ref.bleu)) : 0.0;
    return table;
}

Json AblationTable::to_json() const {
    Json rows_j = Json::array();
    for (const auto& r : rows) {
        Json j{{"name", r.name},
               {"overlay", r.overlay},
               {"ok", r.ok},
               {"bleu", round2(r.bleu)},
               {"delta", r.delta},
               {"steps", r.steps},
               {"kd_zero_every_step", r.kd_zero_every_step},
               {"final_total", r.final_total}};
        if (r.ambiguous_accuracy >= 0) j["ambiguous_accuracy"] = r.ambiguous_accuracy;
        if (!r.ok) j["error"] = r.error;
        rows_j.push_back(j);
    }
    return Json{{"base", rows.empty() ? "" : rows.front().name}, {"rows", rows_j}};
}

std::string AblationTable::to_text() const {
    std::size_t w = 4;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(w)) << "row" << "  " << std::right << std::setw(7) << "BLEU"
       << "  " << std::setw(7) << "delta" << "  " << std::setw(7) << "amb.acc" << "  status\n";
    os << std::fixed << std::setprecision(2);
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::right;
        if (r.ok) {
            os << std::setw(7) << round2(r.bleu) << "  " << std::showpos << std::setw(7) << r.delta << std::noshowpos
               << "  ";
            if (r.ambiguous_accuracy >= 0)
                os << std::setw(7) << r.ambiguous_accuracy;
            else
                os << std::setw(7) << "-";
            os << "  ok\n";
        } else {
            os << std::setw(7) << "-" << "  " << std::setw(7) << "-" << "  " << std::setw(7) << "-"
               << "  error: " << r.error << '\n';
        }
    }
    return os.str();
}

DegradationReport degradation_eval(const IkdModel& model, const std::vector<TripletExample>& corpus,
                                   const std::vector<std::string>& mask_set, const Vocabulary& vocab,
                                   const std::string& mode) {
    if (!vocab.contains("[U]")) throw ContractError("degradation_eval: vocabulary lacks [U]");
    DegradationReport r;
    r.mode = mode;
    MaskStats stats;
    auto masked = mask_corpus(corpus, mask_set, vocab, &stats);
    auto refs = reference_strings(corpus, vocab);
    r.clean = bleu4(translate_corpus(model, corpus, vocab), refs);
    r.masked = bleu4(translate_corpus(model, masked, vocab), refs);
    r.drop = r.clean.score - r.masked.score;
    r.masked_tokens = stats.masked;
    r.total_tokens = stats.total;
    r.masked_fraction = stats.fraction();
    return r;
}

Json to_json(const DegradationReport& r) {
    return Json{{"mode", r.mode},
                {"clean", to_json(r.clean)},
                {"masked", to_json(r.masked)},
                {"drop", r.drop},
                {"masked_tokens", r.masked_tokens},
                {"total_tokens", r.total_tokens},
                {"masked_fraction", r.masked_fraction}};
}

}  // namespace ikd
