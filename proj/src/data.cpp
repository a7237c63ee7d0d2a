#include "ikd/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "ikd/errors.hpp"
#include "ikd/random.hpp"
#include "ikd/tensor_io.hpp"

namespace ikd {

std::vector<std::string> split_tokens(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

const std::vector<std::string>& Vocabulary::specials() {
    static const std::vector<std::string> s{"<pad>", "<unk>", "<bos>", "<eos>", "[U]"};
    return s;
}

Vocabulary::Vocabulary() {
    for (const auto& s : specials()) add(s);
}

int Vocabulary::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

int Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
    return tokens_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines) {
    std::set<std::string> distinct;
    for (const auto& line : lines)
        for (auto& tok : split_tokens(line)) distinct.insert(tok);
    Vocabulary v;
    for (const auto& tok : distinct) v.add(tok);
    return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    auto lines = read_lines(path);
    if (lines.size() < specials().size())
        throw FormatError(path.string() + ": vocabulary shorter than the reserved entries");
    for (std::size_t i = 0; i < specials().size(); ++i)
        if (lines[i] != specials()[i])
            throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": expected reserved token " +
                              specials()[i]);
    Vocabulary v;
    for (std::size_t i = specials().size(); i < lines.size(); ++i) {
        if (lines[i].empty() || v.contains(lines[i]))
            throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": empty or duplicate token");
        v.add(lines[i]);
    }
    return v;
}

void Vocabulary::save(const std::filesystem::path& path) const { write_lines(path, tokens_); }

std::vector<int> Vocabulary::encode(const std::string& line) const {
    std::vector<int> ids;
    for (const auto& tok : split_tokens(line)) ids.push_back(id(tok));
    return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> toks;
    for (int i : ids) {
        if (i == kEos) break;
        if (i == kPad || i == kBos) continue;
        toks.push_back(token(i));
    }
    return join_tokens(toks);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& l : lines) os << l << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

TripletExample make_example(const std::string& src, const std::string& tgt, const Vocabulary& vocab,
                            std::optional<Tensor> image) {
    TripletExample ex;
    ex.source = vocab.encode(src);
    if (ex.source.empty()) throw ContractError("empty source sentence");
    auto t = vocab.encode(tgt);
    if (t.empty()) throw ContractError("empty target sentence");
    ex.target.reserve(t.size() + 2);
    ex.target.push_back(Vocabulary::kBos);
    ex.target.insert(ex.target.end(), t.begin(), t.end());
    ex.target.push_back(Vocabulary::kEos);
    ex.image = std::move(image);
    return ex;
}

std::vector<TripletExample> load_corpus(const std::filesystem::path& src, const std::filesystem::path& tgt,
                                        const std::optional<std::filesystem::path>& image_dir,
                                        const Vocabulary& vocab, std::size_t image_size) {
    auto s = read_lines(src);
    auto t = read_lines(tgt);
    if (s.size() != t.size())
        throw AlignmentError("source " + src.string() + " has " + std::to_string(s.size()) + " lines but target " +
                             tgt.string() + " has " + std::to_string(t.size()));
    std::vector<TripletExample> out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::optional<Tensor> image;
        if (image_dir) {
            auto path = *image_dir / (std::to_string(i) + ".tnsr");
            Tensor img;
            try {
                img = read_tensor(path);
            } catch (const IoError&) {
                throw FormatError(path.string() + ": missing image for line " + std::to_string(i + 1));
            }
            if (img.rank() != 3 || img.dim(0) != 3 || (image_size && (img.dim(1) != image_size || img.dim(2) != image_size)))
                throw FormatError(path.string() + ": image shape " + shape_str(img.shape()) + " is not [3x" +
                                  std::to_string(image_size) + "x" + std::to_string(image_size) + "]");
            image = img;
        }
        try {
            out.push_back(make_example(s[i], t[i], vocab, std::move(image)));
        } catch (const ContractError& e) {
            throw FormatError(src.string() + ":" + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

TripletExample mask_tokens(const TripletExample& example, const std::vector<std::string>& tokens,
                           const Vocabulary& vocab) {
    std::unordered_set<int> ids;
    for (const auto& t : tokens)
        if (vocab.contains(t)) ids.insert(vocab.id(t));
    TripletExample out = example;
    for (auto& id : out.source)
        if (ids.count(id)) id = Vocabulary::kMask;
    return out;
}

std::vector<TripletExample> mask_corpus(const std::vector<TripletExample>& corpus,
                                        const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                        MaskStats* stats) {
    std::vector<TripletExample> out;
    out.reserve(corpus.size());
    MaskStats st;
    for (const auto& ex : corpus) {
        out.push_back(mask_tokens(ex, tokens, vocab));
        for (std::size_t i = 0; i < ex.source.size(); ++i) {
            ++st.total;
            if (out.back().source[i] == Vocabulary::kMask && ex.source[i] != Vocabulary::kMask) ++st.masked;
        }
    }
    if (stats) *stats = st;
    return out;
}

Batch make_batch(const std::vector<TripletExample>& examples, const std::vector<std::size_t>& indices) {
    Batch b;
    b.size = indices.size();
    b.indices = indices;
    bool all_images = !indices.empty();
    for (auto i : indices) {
        b.src_len = std::max(b.src_len, examples[i].source.size());
        b.tgt_len = std::max(b.tgt_len, examples[i].target.size());
        all_images = all_images && examples[i].image.has_value();
    }
    b.source.assign(b.size * b.src_len, Vocabulary::kPad);
    b.source_pad.assign(b.size * b.src_len, 1);
    b.target.assign(b.size * b.tgt_len, Vocabulary::kPad);
    for (std::size_t r = 0; r < b.size; ++r) {
        const auto& ex = examples[indices[r]];
        b.lengths.push_back(ex.source.size());
        for (std::size_t j = 0; j < ex.source.size(); ++j) {
            b.source[r * b.src_len + j] = ex.source[j];
            b.source_pad[r * b.src_len + j] = ex.source[j] == Vocabulary::kPad ? 1 : 0;
        }
        std::copy(ex.target.begin(), ex.target.end(), b.target.begin() + static_cast<long>(r * b.tgt_len));
    }
    if (all_images) {
        const Shape& s = examples[indices[0]].image->shape();
        std::vector<double> data;
        data.reserve(b.size * shape_numel(s));
        for (auto i : indices) {
            const auto& img = *examples[i].image;
            if (img.shape() != s)
                throw DimensionError("batch images differ in shape: " + shape_str(s) + " vs " + shape_str(img.shape()));
            data.insert(data.end(), img.data().begin(), img.data().end());
        }
        b.images = Tensor::from(Shape{b.size, s[0], s[1], s[2]}, std::move(data));
    }
    return b;
}

std::vector<Batch> batchify(const std::vector<TripletExample>& examples, std::size_t batch_size,
                            std::optional<std::uint64_t> seed) {
    if (batch_size == 0) throw ContractError("batch size must be positive");
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (seed) {
        Rng rng(*seed);
        rng.shuffle(order);
    }
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                     order.begin() + static_cast<long>(std::min(order.size(), start + batch_size)));
        out.push_back(make_batch(examples, idx));
    }
    return out;
}

std::string sense_token(PatchColor color) { return color == PatchColor::Red ? "bank.red" : "bank.blue"; }

std::string cue_token(std::size_t cue) {
    std::string s = std::to_string(cue);
    return "obj" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

PatchColor cue_color(std::size_t cue) { return cue % 2 == 0 ? PatchColor::Red : PatchColor::Blue; }

std::vector<std::string> synth_cue_tokens(const SynthOptions& options) {
    std::vector<std::string> out;
    for (std::size_t c = 0; c < options.num_cues; ++c) out.push_back(cue_token(c));
    return out;
}

namespace {

const std::vector<std::string>& determiners() {
    static const std::vector<std::string> d{"a", "the", "one", "this"};
    return d;
}

std::string noun_token(std::size_t i) {
    std::string s = std::to_string(i);
    return "noun" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

std::string translate_word(const std::string& w) { return w + ".de"; }

Tensor render_image(PatchColor color, std::size_t size, Rng& rng) {
    static constexpr double kRed[3] = {0.85, 0.15, 0.15};
    static constexpr double kBlue[3] = {0.15, 0.15, 0.85};
    const double* rgb = color == PatchColor::Red ? kRed : kBlue;
    const std::size_t patch = std::max<std::size_t>(1, size / 2);
    const std::size_t top = rng.index(size - patch + 1);
    const std::size_t left = rng.index(size - patch + 1);
    std::vector<double> px(3 * size * size);
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) {
            const bool inside = i >= top && i < top + patch && j >= left && j < left + patch;
            const double grey = rng.uniform(0.35, 0.65);
            for (std::size_t c = 0; c < 3; ++c) {
                double v = inside ? rgb[c] + rng.uniform(-0.05, 0.05) : grey + rng.uniform(-0.03, 0.03);
                px[(c * size + i) * size + j] = std::clamp(v, 0.0, 1.0);
            }
        }
    return Tensor::from({3, size, size}, std::move(px));
}

}  // namespace

SynthCorpus synth_generate(std::size_t n, std::uint64_t seed, double ambiguity_rate, const SynthOptions& options) {
    if (n == 0) throw ContractError("synth_generate: n must be positive");
    if (ambiguity_rate < 0.0 || ambiguity_rate > 1.0) throw ContractError("synth_generate: ambiguity_rate outside [0, 1]");
    if (options.num_cues < 4 || options.num_cues % 4 != 0)
        throw ContractError("synth_generate: num_cues must be a positive multiple of 4");
    if (options.num_nouns == 0) throw ContractError("synth_generate: num_nouns must be positive");
    const std::size_t half = options.num_cues / 2;
    Rng rng(seed);
    SynthCorpus out;
    for (std::size_t k = 0; k < n; ++k) {
        SynthMeta meta;
        if (options.split == SynthSplit::Transfer) {
            meta.ambiguous = true;
            meta.cue = half + rng.index(half);
        } else {
            meta.ambiguous = rng.bernoulli(ambiguity_rate);
            meta.cue = meta.ambiguous ? rng.index(half) : rng.index(options.num_cues);
        }
        meta.color = cue_color(meta.cue);

        std::vector<std::string> src{determiners()[rng.index(determiners().size())], cue_token(meta.cue)};
        const std::size_t nouns = 1 + rng.index(3);
        for (std::size_t j = 0; j < nouns; ++j) src.push_back(noun_token(rng.index(options.num_nouns)));
        if (meta.ambiguous) {
            const std::size_t pos = 2 + rng.index(nouns + 1);
            src.insert(src.begin() + static_cast<long>(pos), kAmbiguousWord);
        }
        std::vector<std::string> tgt;
        for (const auto& w : src) tgt.push_back(w == kAmbiguousWord ? sense_token(meta.color) : translate_word(w));

        out.source.push_back(join_tokens(src));
        out.target.push_back(join_tokens(tgt));
        out.images.push_back(render_image(meta.color, options.image_size, rng));
        out.meta.push_back(meta);
    }
    return out;
}

void write_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus) {
    std::filesystem::create_directories(dir / "images");
    write_lines(dir / "src.txt", corpus.source);
    write_lines(dir / "tgt.txt", corpus.target);
    for (std::size_t i = 0; i < corpus.images.size(); ++i)
        write_tensor(dir / "images" / (std::to_string(i) + ".tnsr"), corpus.images[i]);
}

double ambiguous_accuracy(const std::vector<std::string>& hypotheses, const std::vector<SynthMeta>& meta) {
    if (hypotheses.size() != meta.size()) throw ContractError("ambiguous_accuracy: hypothesis/meta count mismatch");
    std::size_t total = 0, correct = 0;
    for (std::size_t i = 0; i < meta.size(); ++i) {
        if (!meta[i].ambiguous) continue;
        ++total;
        const auto toks = split_tokens(hypotheses[i]);
        const auto want = sense_token(meta[i].color);
        const auto other = sense_token(meta[i].color == PatchColor::Red ? PatchColor::Blue : PatchColor::Red);
        const bool has_want = std::find(toks.begin(), toks.end(), want) != toks.end();
        const bool has_other = std::find(toks.begin(), toks.end(), other) != toks.end();
        if (has_want && !has_other) ++correct;
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace ikd
