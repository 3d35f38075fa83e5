#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mudjack {

// Parse failure with the offending location; the CLI maps this to exit
// code 2.
class ConfigError : public std::runtime_error {
  public:
    ConfigError(int line, int column, const std::string& message)
        : std::runtime_error("config:" + std::to_string(line) + ":" + std::to_string(column) +
                             ": " + message),
          line_(line),
          column_(column) {}
    int line() const { return line_; }
    int column() const { return column_; }

  private:
    int line_;
    int column_;
};

// Fully resolved run settings. The file format is line-oriented
// `key = value` with `[section]` headers; unknown sections or keys are
// rejected with line/column diagnostics.
struct RunConfig {
    uint64_t seed = 42;
    std::string out_dir = "runs/default";

    struct Data {
        int num_classes = 8;
        int pretrain_per_class = 500;
        int pretrain_test_per_class = 100;
        int downstream_train_per_class = 250;
        int downstream_test_per_class = 200;
        double validation_fraction = 0.10;
        int image_size = 32;
    } data;

    struct Pretrain {
        std::string mode = "proxy";  // proxy | contrastive
        int epochs = 12;
        double learning_rate = 1e-3;
        int batch_size = 64;
        int conv1_channels = 8;
        int conv2_channels = 16;
        int feature_dim = 64;
    } pretrain;

    struct Attack {
        std::string kind = "badencoder";  // badencoder | source-specific | dynamic | latent
        int target_class = 0;
        int source_class = 3;
        double alpha1 = 0.8;
        double alpha2 = 0.2;
        double beta = 1.0;
        int epochs = 24;
        double learning_rate = 1e-3;
        int batch_size = 50;
        int shadow_size = 400;
        std::string trigger = "white-square";  // white-square | random-square
        int trigger_size = 10;
        std::string trigger_location = "fixed";  // fixed | random
        double latent_epsilon = 0.01;
    } attack;

    struct Patch {
        std::string method = "mudjacking";  // mudjacking | ft | ft-l2 | ft-linf | unlearning |
                                            // fine-pruning
        double lambda_l = 1.0;
        double lambda_g = 1.0;
        int epochs = 200;
        int batch_size = 50;
        double learning_rate = 1e-3;
        std::string location_mode = "as-reversed";  // as-reversed | random-per-item
        std::string trigger_source = "reversed";    // reversed | exact
        std::string attribution = "occlusion";      // occlusion | saliency
        int occlusion_window = 8;
        int occlusion_stride = 1;
    } patch;

    struct Baselines {
        double delta = 0.01;
        double prune_fraction = 0.5;
        int post_prune_epochs = 50;
        double unlearning_delta_scale = 0.01;
    } baselines;

    struct Eval {
        int downstream_epochs = 100;
        double downstream_learning_rate = 1e-3;
        int downstream_batch_size = 64;
        int downstream_hidden = 32;
    } eval;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

// Canonical serialization of the fully resolved settings, emitted next to
// every run's artifacts.
std::string render_config(const RunConfig& config);

}  // namespace mudjack
