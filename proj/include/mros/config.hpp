#pragma once

// Flat key = value run configuration. Every field has a default; values the
// published setup states (s, P, K, beta, base learning rate, schedule
// constants) default to those values.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mros/data.hpp"
#include "mros/error.hpp"
#include "mros/evaluator.hpp"
#include "mros/losses.hpp"
#include "mros/model.hpp"

namespace mros {

inline AblationSetting parse_setting(const std::string& s) {
  if (s == "I") return AblationSetting::kI;
  if (s == "II") return AblationSetting::kII;
  if (s == "III") return AblationSetting::kIII;
  if (s == "IV") return AblationSetting::kIV;
  raise<ConfigError>("invalid setting '", s, "' (expected one of I, II, III, IV)");
}

struct RunConfig {
  std::uint64_t seed = 0;
  AblationSetting setting = AblationSetting::kIV;
  std::size_t stripes = 6;

  // losses
  double alpha = 0.3;
  double beta = 0.0005;
  double epsilon = 0.1;
  double center_update_rate = 0.5;

  // optimization
  double base_lr = 0.001;
  std::size_t warmup_epochs = 10;
  double warmup_coefficient = 0.01;
  double decay_factor = 0.1;
  std::size_t decay_period = 30;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t P = 32;
  std::size_t K = 4;
  std::size_t epochs = 120;
  std::size_t eval_every = 10;

  // head
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double fc_init_std = 0.001;

  // augmentation
  bool augment = true;
  std::size_t aug_pad = 10;
  double aug_flip_prob = 0.5;
  double aug_erase_prob = 0.5;
  double aug_erase_area_min = 0.02;
  double aug_erase_area_max = 0.4;
  double aug_erase_aspect_min = 0.3;

  // evaluation
  std::string metric = "l2";
  bool protocol_filter = true;

  // input and backbone
  std::size_t input_height = 48;
  std::size_t input_width = 24;
  std::string backbone = "toy";  // toy | features
  std::string backbone_widths = "16,32,64";
  std::size_t backbone_kernel = 2;
  std::size_t backbone_stride = 2;
  std::string features_manifest;

  // data: "synthetic" or a Market-1501 root directory
  std::string dataset = "synthetic";
  std::size_t synth_identities = 20;
  std::size_t synth_images_per_identity = 12;
  std::size_t synth_cameras = 3;
  double synth_noise = 0.08;

  std::size_t threads = 0;

  // Budget for desk-scale synthetic runs: batches of 4 identities × 4
  // images over the 20-identity synthetic dataset, 30 epochs.
  static RunConfig synthetic_profile() {
    RunConfig c;
    c.P = 4;
    c.K = 4;
    c.epochs = 30;
    c.eval_every = 5;
    return c;
  }

  HeadConfig head_config(std::size_t num_classes) const {
    HeadConfig h;
    h.stripes = stripes;
    h.num_classes = num_classes;
    h.bn = {bn_eps, bn_momentum};
    h.fc_init_std = fc_init_std;
    return apply_setting(h, setting);
  }

  LossWeights loss_weights() const { return {alpha, beta, epsilon}; }

  AugmentConfig augment_config() const {
    AugmentConfig a;
    a.enabled = augment;
    a.pad = aug_pad;
    a.flip_prob = aug_flip_prob;
    a.erase_prob = aug_erase_prob;
    a.erase_area_min = aug_erase_area_min;
    a.erase_area_max = aug_erase_area_max;
    a.erase_aspect_min = aug_erase_aspect_min;
    return a;
  }

  SyntheticSpec synthetic_spec() const {
    return {synth_identities, synth_images_per_identity, synth_cameras, input_height, input_width, synth_noise, seed};
  }

  ToyBackboneConfig toy_backbone() const {
    ToyBackboneConfig t;
    t.input_height = input_height;
    t.input_width = input_width;
    t.widths.clear();
    std::istringstream ss(backbone_widths);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        t.widths.push_back(std::stoul(item));
      } catch (const std::logic_error&) {
        raise<ConfigError>("backbone_widths: '", item, "' is not a channel count");
      }
    }
    t.kernel = backbone_kernel;
    t.stride = backbone_stride;
    return t;
  }

  EvalOptions eval_options() const { return {parse_metric(metric), protocol_filter, 50}; }

  // Canonical text: one `key = value` line per field, sorted by key.
  std::string to_text() const;
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::string fingerprint() const;
  void validate() const;

  static RunConfig parse(const std::string& text, RunConfig base);
  static RunConfig parse(const std::string& text) { return parse(text, RunConfig()); }
  static RunConfig load(const std::filesystem::path& path, RunConfig base);
  static RunConfig load(const std::filesystem::path& path) { return load(path, RunConfig()); }
};

namespace detail {

struct ConfigField {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
ConfigField field(T RunConfig::*member) {
  ConfigField f;
  f.get = [member](const RunConfig& c) -> std::string {
    const T& v = c.*member;
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, double>) {
      return format_double(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else {
      return std::to_string(v);
    }
  };
  f.set = [member](RunConfig& c, const std::string& s) {
    T& v = c.*member;
    if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1" || s == "yes") v = true;
      else if (s == "false" || s == "0" || s == "no") v = false;
      else raise<ConfigError>("expected a boolean, got '", s, "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = s;
    } else {
      std::size_t used = 0;
      try {
        if constexpr (std::is_same_v<T, double>) v = std::stod(s, &used);
        else {
          if (!s.empty() && s[0] == '-') raise<ConfigError>("expected a non-negative integer, got '", s, "'");
          v = static_cast<T>(std::stoull(s, &used));
        }
      } catch (const std::logic_error&) {
        raise<ConfigError>("cannot parse number from '", s, "'");
      }
      if (used != s.size()) raise<ConfigError>("trailing characters in number '", s, "'");
    }
  };
  return f;
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> m;
    m["seed"] = field(&RunConfig::seed);
    m["setting"] = {[](const RunConfig& c) { return std::string(setting_name(c.setting)); },
                    [](RunConfig& c, const std::string& s) { c.setting = parse_setting(s); }};
    m["stripes"] = field(&RunConfig::stripes);
    m["alpha"] = field(&RunConfig::alpha);
    m["beta"] = field(&RunConfig::beta);
    m["epsilon"] = field(&RunConfig::epsilon);
    m["center_update_rate"] = field(&RunConfig::center_update_rate);
    m["base_lr"] = field(&RunConfig::base_lr);
    m["warmup_epochs"] = field(&RunConfig::warmup_epochs);
    m["warmup_coefficient"] = field(&RunConfig::warmup_coefficient);
    m["decay_factor"] = field(&RunConfig::decay_factor);
    m["decay_period"] = field(&RunConfig::decay_period);
    m["adam_beta1"] = field(&RunConfig::adam_beta1);
    m["adam_beta2"] = field(&RunConfig::adam_beta2);
    m["adam_eps"] = field(&RunConfig::adam_eps);
    m["weight_decay"] = field(&RunConfig::weight_decay);
    m["P"] = field(&RunConfig::P);
    m["K"] = field(&RunConfig::K);
    m["epochs"] = field(&RunConfig::epochs);
    m["eval_every"] = field(&RunConfig::eval_every);
    m["bn_eps"] = field(&RunConfig::bn_eps);
    m["bn_momentum"] = field(&RunConfig::bn_momentum);
    m["fc_init_std"] = field(&RunConfig::fc_init_std);
    m["augment"] = field(&RunConfig::augment);
    m["aug_pad"] = field(&RunConfig::aug_pad);
    m["aug_flip_prob"] = field(&RunConfig::aug_flip_prob);
    m["aug_erase_prob"] = field(&RunConfig::aug_erase_prob);
    m["aug_erase_area_min"] = field(&RunConfig::aug_erase_area_min);
    m["aug_erase_area_max"] = field(&RunConfig::aug_erase_area_max);
    m["aug_erase_aspect_min"] = field(&RunConfig::aug_erase_aspect_min);
    m["metric"] = field(&RunConfig::metric);
    m["protocol_filter"] = field(&RunConfig::protocol_filter);
    m["input_height"] = field(&RunConfig::input_height);
    m["input_width"] = field(&RunConfig::input_width);
    m["backbone"] = field(&RunConfig::backbone);
    m["backbone_widths"] = field(&RunConfig::backbone_widths);
    m["backbone_kernel"] = field(&RunConfig::backbone_kernel);
    m["backbone_stride"] = field(&RunConfig::backbone_stride);
    m["features_manifest"] = field(&RunConfig::features_manifest);
    m["dataset"] = field(&RunConfig::dataset);
    m["synth_identities"] = field(&RunConfig::synth_identities);
    m["synth_images_per_identity"] = field(&RunConfig::synth_images_per_identity);
    m["synth_cameras"] = field(&RunConfig::synth_cameras);
    m["synth_noise"] = field(&RunConfig::synth_noise);
    m["threads"] = field(&RunConfig::threads);
    return m;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [key, f] : detail::config_fields()) out += key + " = " + f.get(*this) + "\n";
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) raise<ConfigError>("unknown config key '", key, "'");
  try {
    it->second.set(*this, value);
  } catch (const ConfigError& e) {
    raise<ConfigError>("config key '", key, "': ", e.what());
  }
}

inline std::string RunConfig::get(const std::string& key) const {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) raise<ConfigError>("unknown config key '", key, "'");
  return it->second.get(*this);
}

inline std::string RunConfig::fingerprint() const {
  std::uint64_t hash = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : to_text()) hash = (hash ^ c) * 1099511628211ULL;
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash));
  return hex;
}

inline void RunConfig::validate() const {
  if (stripes < 1) raise<ConfigError>("stripes must be >= 1");
  if (setting != AblationSetting::kI && stripes < 2) raise<ConfigError>("overlapping stripes need stripes >= 2");
  if (P < 2) raise<ConfigError>("P must be >= 2 so every anchor has negatives");
  if (K < 1) raise<ConfigError>("K must be >= 1");
  if (epsilon < 0.0 || epsilon >= 1.0) raise<ConfigError>("epsilon must lie in [0, 1)");
  if (alpha < 0.0) raise<ConfigError>("alpha must be non-negative");
  if (center_update_rate <= 0.0 || center_update_rate > 1.0) raise<ConfigError>("center_update_rate must lie in (0, 1]");
  if (base_lr <= 0.0 || warmup_coefficient <= 0.0 || decay_factor <= 0.0 || decay_period == 0) {
    raise<ConfigError>("learning-rate schedule constants must be positive");
  }
  if (eval_every == 0) raise<ConfigError>("eval_every must be >= 1");
  if (backbone != "toy" && backbone != "features") raise<ConfigError>("backbone must be 'toy' or 'features'");
  if (backbone == "features" && features_manifest.empty()) {
    raise<ConfigError>("backbone=features requires features_manifest");
  }
  parse_metric(metric);
  toy_backbone();
}

inline RunConfig RunConfig::parse(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) raise<ConfigError>("config line ", lineno, ": expected key = value");
    base.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) raise<ConfigError>("cannot read config file ", path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), std::move(base));
}

}  // namespace mros
