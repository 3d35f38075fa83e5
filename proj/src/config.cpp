#include "mudjack/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "mudjack/artifact_io.hpp"

namespace mudjack {

namespace {

struct KeyBinding {
    std::function<void(RunConfig&, const std::string&, int, int)> set;
};

void parse_into_int(int& dst, const std::string& value, int line, int col) {
    try {
        size_t used = 0;
        int v = std::stoi(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument("trailing characters");
        }
        dst = v;
    } catch (const std::exception&) {
        throw ConfigError(line, col, "expected an integer, got '" + value + "'");
    }
}

void parse_into_u64(uint64_t& dst, const std::string& value, int line, int col) {
    try {
        size_t used = 0;
        unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument("trailing characters");
        }
        dst = v;
    } catch (const std::exception&) {
        throw ConfigError(line, col, "expected an unsigned integer, got '" + value + "'");
    }
}

void parse_into_double(double& dst, const std::string& value, int line, int col) {
    try {
        size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument("trailing characters");
        }
        dst = v;
    } catch (const std::exception&) {
        throw ConfigError(line, col, "expected a number, got '" + value + "'");
    }
}

using Schema = std::map<std::string, std::map<std::string, KeyBinding>>;

Schema build_schema() {
    Schema schema;

#define BIND_INT(section, key, field)                                              \
    schema[section][key] = KeyBinding{[](RunConfig& c, const std::string& v, int l, \
                                         int col) { parse_into_int(c.field, v, l, col); }}
#define BIND_DOUBLE(section, key, field)                                            \
    schema[section][key] = KeyBinding{[](RunConfig& c, const std::string& v, int l,  \
                                         int col) { parse_into_double(c.field, v, l, col); }}
#define BIND_STRING(section, key, field)                                  \
    schema[section][key] = KeyBinding{                                    \
        [](RunConfig& c, const std::string& v, int l, int col) {          \
            (void)l;                                                      \
            (void)col;                                                    \
            c.field = v;                                                  \
        }}

    schema[""]["seed"] = KeyBinding{[](RunConfig& c, const std::string& v, int l, int col) {
        parse_into_u64(c.seed, v, l, col);
    }};
    BIND_STRING("", "out_dir", out_dir);

    BIND_INT("data", "num_classes", data.num_classes);
    BIND_INT("data", "pretrain_per_class", data.pretrain_per_class);
    BIND_INT("data", "pretrain_test_per_class", data.pretrain_test_per_class);
    BIND_INT("data", "downstream_train_per_class", data.downstream_train_per_class);
    BIND_INT("data", "downstream_test_per_class", data.downstream_test_per_class);
    BIND_DOUBLE("data", "validation_fraction", data.validation_fraction);
    BIND_INT("data", "image_size", data.image_size);

    BIND_STRING("pretrain", "mode", pretrain.mode);
    BIND_INT("pretrain", "epochs", pretrain.epochs);
    BIND_DOUBLE("pretrain", "learning_rate", pretrain.learning_rate);
    BIND_INT("pretrain", "batch_size", pretrain.batch_size);
    BIND_INT("pretrain", "conv1_channels", pretrain.conv1_channels);
    BIND_INT("pretrain", "conv2_channels", pretrain.conv2_channels);
    BIND_INT("pretrain", "feature_dim", pretrain.feature_dim);

    BIND_STRING("attack", "kind", attack.kind);
    BIND_INT("attack", "target_class", attack.target_class);
    BIND_INT("attack", "source_class", attack.source_class);
    BIND_DOUBLE("attack", "alpha1", attack.alpha1);
    BIND_DOUBLE("attack", "alpha2", attack.alpha2);
    BIND_DOUBLE("attack", "beta", attack.beta);
    BIND_INT("attack", "epochs", attack.epochs);
    BIND_DOUBLE("attack", "learning_rate", attack.learning_rate);
    BIND_INT("attack", "batch_size", attack.batch_size);
    BIND_INT("attack", "shadow_size", attack.shadow_size);
    BIND_STRING("attack", "trigger", attack.trigger);
    BIND_INT("attack", "trigger_size", attack.trigger_size);
    BIND_STRING("attack", "trigger_location", attack.trigger_location);
    BIND_DOUBLE("attack", "latent_epsilon", attack.latent_epsilon);

    BIND_STRING("patch", "method", patch.method);
    BIND_DOUBLE("patch", "lambda_l", patch.lambda_l);
    BIND_DOUBLE("patch", "lambda_g", patch.lambda_g);
    BIND_INT("patch", "epochs", patch.epochs);
    BIND_INT("patch", "batch_size", patch.batch_size);
    BIND_DOUBLE("patch", "learning_rate", patch.learning_rate);
    BIND_STRING("patch", "location_mode", patch.location_mode);
    BIND_STRING("patch", "trigger_source", patch.trigger_source);
    BIND_STRING("patch", "attribution", patch.attribution);
    BIND_INT("patch", "occlusion_window", patch.occlusion_window);
    BIND_INT("patch", "occlusion_stride", patch.occlusion_stride);

    BIND_DOUBLE("baselines", "delta", baselines.delta);
    BIND_DOUBLE("baselines", "prune_fraction", baselines.prune_fraction);
    BIND_INT("baselines", "post_prune_epochs", baselines.post_prune_epochs);
    BIND_DOUBLE("baselines", "unlearning_delta_scale", baselines.unlearning_delta_scale);

    BIND_INT("eval", "downstream_epochs", eval.downstream_epochs);
    BIND_DOUBLE("eval", "downstream_learning_rate", eval.downstream_learning_rate);
    BIND_INT("eval", "downstream_batch_size", eval.downstream_batch_size);
    BIND_INT("eval", "downstream_hidden", eval.downstream_hidden);

#undef BIND_INT
#undef BIND_DOUBLE
#undef BIND_STRING
    return schema;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    static const Schema schema = build_schema();
    RunConfig config;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    std::string section;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(line_no, static_cast<int>(raw.size()),
                                  "unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (schema.find(section) == schema.end()) {
                throw ConfigError(line_no, 1, "unknown section [" + section + "]");
            }
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(line_no, 1, "expected 'key = value'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(line_no, 1, "empty key");
        }
        int col = static_cast<int>(raw.find(key)) + 1;
        auto section_it = schema.find(section);
        auto key_it = section_it->second.find(key);
        if (key_it == section_it->second.end()) {
            std::string where = section.empty() ? "top level" : "section [" + section + "]";
            throw ConfigError(line_no, col, "unknown key '" + key + "' in " + where);
        }
        key_it->second.set(config, value, line_no, col);
    }
    return config;
}

RunConfig load_config(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

std::string render_config(const RunConfig& c) {
    std::ostringstream o;
    o << "seed = " << c.seed << "\n";
    o << "out_dir = " << c.out_dir << "\n\n";
    o << "[data]\n";
    o << "num_classes = " << c.data.num_classes << "\n";
    o << "pretrain_per_class = " << c.data.pretrain_per_class << "\n";
    o << "pretrain_test_per_class = " << c.data.pretrain_test_per_class << "\n";
    o << "downstream_train_per_class = " << c.data.downstream_train_per_class << "\n";
    o << "downstream_test_per_class = " << c.data.downstream_test_per_class << "\n";
    o << "validation_fraction = " << format_double(c.data.validation_fraction, 4) << "\n";
    o << "image_size = " << c.data.image_size << "\n\n";
    o << "[pretrain]\n";
    o << "mode = " << c.pretrain.mode << "\n";
    o << "epochs = " << c.pretrain.epochs << "\n";
    o << "learning_rate = " << format_double(c.pretrain.learning_rate, 6) << "\n";
    o << "batch_size = " << c.pretrain.batch_size << "\n";
    o << "conv1_channels = " << c.pretrain.conv1_channels << "\n";
    o << "conv2_channels = " << c.pretrain.conv2_channels << "\n";
    o << "feature_dim = " << c.pretrain.feature_dim << "\n\n";
    o << "[attack]\n";
    o << "kind = " << c.attack.kind << "\n";
    o << "target_class = " << c.attack.target_class << "\n";
    o << "source_class = " << c.attack.source_class << "\n";
    o << "alpha1 = " << format_double(c.attack.alpha1, 4) << "\n";
    o << "alpha2 = " << format_double(c.attack.alpha2, 4) << "\n";
    o << "beta = " << format_double(c.attack.beta, 4) << "\n";
    o << "epochs = " << c.attack.epochs << "\n";
    o << "learning_rate = " << format_double(c.attack.learning_rate, 6) << "\n";
    o << "batch_size = " << c.attack.batch_size << "\n";
    o << "shadow_size = " << c.attack.shadow_size << "\n";
    o << "trigger = " << c.attack.trigger << "\n";
    o << "trigger_size = " << c.attack.trigger_size << "\n";
    o << "trigger_location = " << c.attack.trigger_location << "\n";
    o << "latent_epsilon = " << format_double(c.attack.latent_epsilon, 6) << "\n\n";
    o << "[patch]\n";
    o << "method = " << c.patch.method << "\n";
    o << "lambda_l = " << format_double(c.patch.lambda_l, 4) << "\n";
    o << "lambda_g = " << format_double(c.patch.lambda_g, 4) << "\n";
    o << "epochs = " << c.patch.epochs << "\n";
    o << "batch_size = " << c.patch.batch_size << "\n";
    o << "learning_rate = " << format_double(c.patch.learning_rate, 6) << "\n";
    o << "location_mode = " << c.patch.location_mode << "\n";
    o << "trigger_source = " << c.patch.trigger_source << "\n";
    o << "attribution = " << c.patch.attribution << "\n";
    o << "occlusion_window = " << c.patch.occlusion_window << "\n";
    o << "occlusion_stride = " << c.patch.occlusion_stride << "\n\n";
    o << "[baselines]\n";
    o << "delta = " << format_double(c.baselines.delta, 6) << "\n";
    o << "prune_fraction = " << format_double(c.baselines.prune_fraction, 4) << "\n";
    o << "post_prune_epochs = " << c.baselines.post_prune_epochs << "\n";
    o << "unlearning_delta_scale = " << format_double(c.baselines.unlearning_delta_scale, 6)
      << "\n\n";
    o << "[eval]\n";
    o << "downstream_epochs = " << c.eval.downstream_epochs << "\n";
    o << "downstream_learning_rate = " << format_double(c.eval.downstream_learning_rate, 6)
      << "\n";
    o << "downstream_batch_size = " << c.eval.downstream_batch_size << "\n";
    o << "downstream_hidden = " << c.eval.downstream_hidden << "\n";
    return o.str();
}

}  // namespace mudjack
