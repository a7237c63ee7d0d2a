#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ikd/tensor.hpp"

namespace ikd {

std::vector<std::string> split_tokens(const std::string& line);
std::string join_tokens(const std::vector<std::string>& tokens);

// Shared source/target vocabulary. Ids 0..3 are reserved for <pad>, <unk>,
// <bos>, <eos>; id 4 is the degradation mask token [U]. The file form lists
// every entry, one per line, line index == id.
class Vocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr int kMask = 4;
    static constexpr int kNumSpecials = 5;
    static const std::vector<std::string>& specials();

    Vocabulary();

    // Distinct tokens of all sentences, sorted, after the specials.
    static Vocabulary build(const std::vector<std::string>& lines);
    static Vocabulary load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    int add(const std::string& token);
    int id(const std::string& token) const;
    bool contains(const std::string& token) const { return index_.count(token) > 0; }
    const std::string& token(int id) const;
    std::size_t size() const { return tokens_.size(); }

    std::vector<int> encode(const std::string& line) const;
    // Drops pad/bos/eos; stops at the first <eos>.
    std::string decode(const std::vector<int>& ids) const;

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

struct TripletExample {
    std::vector<int> source;
    // Wrapped as <bos> ... <eos>.
    std::vector<int> target;
    // [3, H, W] with values in [0, 1].
    std::optional<Tensor> image;
};

TripletExample make_example(const std::string& src, const std::string& tgt, const Vocabulary& vocab,
                            std::optional<Tensor> image = std::nullopt);

// Whitespace-tokenized parallel text, plus `{index}.tnsr` images when
// image_dir is given. image_size, when non-zero, is the required H == W.
std::vector<TripletExample> load_corpus(const std::filesystem::path& src, const std::filesystem::path& tgt,
                                        const std::optional<std::filesystem::path>& image_dir,
                                        const Vocabulary& vocab, std::size_t image_size = 0);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

// Replaces every source token listed in `tokens` by [U].
TripletExample mask_tokens(const TripletExample& example, const std::vector<std::string>& tokens,
                           const Vocabulary& vocab);

struct MaskStats {
    std::size_t masked = 0;
    std::size_t total = 0;
    double fraction() const { return total ? static_cast<double>(masked) / static_cast<double>(total) : 0.0; }
};

std::vector<TripletExample> mask_corpus(const std::vector<TripletExample>& corpus,
                                        const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                        MaskStats* stats = nullptr);

struct Batch {
    std::size_t size = 0;
    std::size_t src_len = 0;
    std::size_t tgt_len = 0;
    // Row-major [size x src_len] / [size x tgt_len], right-padded with <pad>.
    std::vector<int> source;
    std::vector<int> target;
    // 1 exactly where source == <pad>.
    std::vector<std::uint8_t> source_pad;
    std::vector<std::size_t> lengths;
    // [size, 3, H, W] when every example carries an image.
    std::optional<Tensor> images;
    // Positions of the examples in the corpus passed to batchify.
    std::vector<std::size_t> indices;
};

Batch make_batch(const std::vector<TripletExample>& examples, const std::vector<std::size_t>& indices);

// Shuffles with `seed` (if given) and cuts into padded batches.
std::vector<Batch> batchify(const std::vector<TripletExample>& examples, std::size_t batch_size,
                            std::optional<std::uint64_t> seed);

// ---------------------------------------------------------------------------
// Synthetic colour-disambiguation corpus.
//
// Every sentence names one object ("cue"); its paired image shows a patch in
// that object's colour. Sentences may contain the ambiguous word "bank",
// whose translation is "bank.red" or "bank.blue" according to the patch
// colour. All other words translate one-to-one ("w" -> "w.de").
//
// Objects are split in two halves. In the Train split "bank" only ever
// co-occurs with first-half objects; second-half objects appear with images
// but never with "bank". The Transfer split pairs "bank" with second-half
// objects only, so the colour of the patch is the only route to the right
// sense: a text-only model has never seen any evidence linking those
// objects to a sense, while a model whose text features were distilled
// against the images has.
enum class SynthSplit { Train, Transfer };

struct SynthOptions {
    std::size_t image_size = 32;
    std::size_t num_cues = 48;
    std::size_t num_nouns = 16;
    SynthSplit split = SynthSplit::Train;
};

enum class PatchColor : std::uint8_t { Red = 0, Blue = 1 };

struct SynthMeta {
    std::size_t cue = 0;
    PatchColor color = PatchColor::Red;
    bool ambiguous = false;
};

struct SynthCorpus {
    std::vector<std::string> source;
    std::vector<std::string> target;
    std::vector<Tensor> images;
    std::vector<SynthMeta> meta;
};

inline constexpr const char* kAmbiguousWord = "bank";
std::string sense_token(PatchColor color);
std::string cue_token(std::size_t cue);
// Colour of a cue; fixed by the synthetic language, not by the seed.
PatchColor cue_color(std::size_t cue);
// Every word the synthetic source language uses that denotes an object.
std::vector<std::string> synth_cue_tokens(const SynthOptions& options);

SynthCorpus synth_generate(std::size_t n, std::uint64_t seed, double ambiguity_rate, const SynthOptions& options = {});

void write_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus);

// Fraction of ambiguous examples whose hypothesis contains the correct sense
// token and not the other one.
double ambiguous_accuracy(const std::vector<std::string>& hypotheses, const std::vector<SynthMeta>& meta);

}  // namespace ikd
