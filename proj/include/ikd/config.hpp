#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace ikd {

using Json = nlohmann::json;

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t enc_layers = 4;
    std::size_t dec_layers = 4;
    std::size_t ffn = 128;
    // Maximum position for the sinusoidal table; also the decode cap.
    std::size_t max_len = 128;
    double init_std = 0.1;
    // false: m is replaced by zeros (text-only baseline).
    bool use_multimodal = true;
    // false: encoder attends over the multimodal rows only (text feature removal probe).
    bool text_features = true;
    bool generator_bias = false;
    std::uint64_t seed = 1;
};

struct VisionConfig {
    std::size_t image_size = 32;
    std::size_t stem_channels = 32;
    // Each stage halves the spatial size.
    std::vector<std::size_t> stage_channels{64, 128};
    std::size_t blocks_per_stage = 1;
    // Bottleneck width = stage channels / this.
    std::size_t bottleneck_divisor = 4;
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.25, 0.25, 0.25};
    std::uint64_t teacher_seed = 1234;
    // Directory with a weight manifest; empty means random frozen init.
    std::string teacher_weights;
};

enum class Similarity { L2, L1, Linf, Cosine, KL };
enum class Granularity { Model, Block, Layer };

std::string to_string(Similarity s);
std::string to_string(Granularity g);
Similarity parse_similarity(const std::string& s);
Granularity parse_granularity(const std::string& s);

struct DistillConfig {
    Similarity similarity = Similarity::L2;
    Granularity granularity = Granularity::Model;
    bool enable_irm = true;
    bool enable_iam = true;
    // Only the image-space term: no representation pairs, no IaM.
    bool image_space_only = false;
    double weight_irm = 1.0;
    double weight_iam = 1.0;

    bool any() const { return enable_irm || enable_iam; }
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    // 0 = run all epochs.
    std::size_t max_steps = 0;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-9;
    double weight_trans = 1.0;
    std::uint64_t seed = 1;
    // Steps between checkpoints; 0 = only at the end.
    std::size_t checkpoint_interval = 0;
};

struct Config {
    ModelConfig model;
    VisionConfig vision;
    DistillConfig distill;
    TrainConfig train;
};

Json to_json(const Config& c);
// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
Config config_from_json(const Json& j);
Config load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const Config& c);
// RFC 7386 merge patch over the serialized config.
Config apply_overlay(const Config& base, const Json& overlay);
void validate(const Config& c);

}  // namespace ikd
