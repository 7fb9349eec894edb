#include "moase/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace moase {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::string& path,
                    std::initializer_list<const char*> known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool found = false;
    for (const char* k : known) {
      if (it.key() == k) {
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key: " + path + it.key());
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
  }
}

void parse_task(const json& obj, TaskConfig& task) {
  reject_unknown(obj, "task.", {"classes", "input_dim", "class_separation", "blob_sigma"});
  read(obj, "classes", task.classes);
  read(obj, "input_dim", task.input_dim);
  read(obj, "class_separation", task.class_separation);
  read(obj, "blob_sigma", task.blob_sigma);
}

void parse_model(const json& obj, BackboneConfig& model) {
  reject_unknown(obj, "model.",
                 {"tokens", "channels", "experts", "hidden_size", "agnostic_experts", "eta",
                  "q_min", "q_max", "reducer"});
  read(obj, "tokens", model.tokens);
  read(obj, "channels", model.channels);
  read(obj, "experts", model.experts);
  read(obj, "hidden_size", model.hidden_size);
  read(obj, "agnostic_experts", model.agnostic_experts);
  read(obj, "eta", model.gating.eta);
  read(obj, "q_min", model.gating.q_min);
  read(obj, "q_max", model.gating.q_max);
  if (obj.contains("reducer")) {
    const auto name = obj.at("reducer").get<std::string>();
    if (name == "l2") {
      model.gating.reducer = ScoreReducer::L2Norm;
    } else if (name == "mean-abs") {
      model.gating.reducer = ScoreReducer::MeanAbs;
    } else {
      throw ConfigError("model.reducer: expected \"l2\" or \"mean-abs\", got " + name);
    }
  }
}

void parse_domains(const json& arr, std::vector<DomainSpec>& domains) {
  if (!arr.is_array()) throw ConfigError("stream.domains: expected an array");
  domains.clear();
  std::size_t index = 0;
  for (const auto& item : arr) {
    const std::string path = "stream.domains[" + std::to_string(index) + "].";
    reject_unknown(item, path, {"name", "family", "severity", "duration"});
    DomainSpec spec;
    read(item, "name", spec.name);
    if (item.contains("family")) {
      spec.family = corruption_from_string(item.at("family").get<std::string>());
    }
    read(item, "severity", spec.severity);
    read(item, "duration", spec.duration);
    if (spec.name.empty()) spec.name = to_string(spec.family);
    domains.push_back(std::move(spec));
    ++index;
  }
}

void parse_stream(const json& obj, StreamConfig& stream) {
  reject_unknown(obj, "stream.", {"batch_size", "rounds", "domains"});
  read(obj, "batch_size", stream.batch_size);
  read(obj, "rounds", stream.rounds);
  if (obj.contains("domains")) parse_domains(obj.at("domains"), stream.domains);
}

void parse_daopd(const json& obj, DaopdConfig& daopd) {
  reject_unknown(obj, "daopd.",
                 {"ema_alpha", "views", "temperature", "opd_weight", "strength_penalty",
                  "policy_beta", "baseline_momentum", "restore_rate", "rl_enabled",
                  "fixed_strength", "student_dropout", "train_input_noise"});
  read(obj, "ema_alpha", daopd.ema_alpha);
  read(obj, "views", daopd.views);
  read(obj, "temperature", daopd.temperature);
  read(obj, "opd_weight", daopd.opd_weight);
  read(obj, "strength_penalty", daopd.strength_penalty);
  read(obj, "policy_beta", daopd.policy_beta);
  read(obj, "baseline_momentum", daopd.baseline_momentum);
  read(obj, "restore_rate", daopd.restore_rate);
  read(obj, "rl_enabled", daopd.rl_enabled);
  read(obj, "fixed_strength", daopd.fixed_strength);
  read(obj, "student_dropout", daopd.student_dropout);
  read(obj, "train_input_noise", daopd.train_input_noise);
}

void parse_policy(const json& obj, PolicyConfig& policy) {
  reject_unknown(obj, "policy.",
                 {"sigma_min", "strength_scales", "data_min", "data_max", "lr"});
  read(obj, "sigma_min", policy.sigma_min);
  read(obj, "strength_scales", policy.strength_scales);
  read(obj, "data_min", policy.data_min);
  read(obj, "data_max", policy.data_max);
  read(obj, "lr", policy.lr);
}

void parse_train(const json& obj, TrainConfig& train) {
  reject_unknown(obj, "train.",
                 {"lr", "beta1", "beta2", "policy_lr", "pretrain_lr", "pretrain_steps",
                  "pretrain_batch", "pretrain_target_acc", "val_samples"});
  read(obj, "lr", train.lr);
  read(obj, "beta1", train.beta1);
  read(obj, "beta2", train.beta2);
  read(obj, "policy_lr", train.policy_lr);
  read(obj, "pretrain_lr", train.pretrain_lr);
  read(obj, "pretrain_steps", train.pretrain_steps);
  read(obj, "pretrain_batch", train.pretrain_batch);
  read(obj, "pretrain_target_acc", train.pretrain_target_acc);
  read(obj, "val_samples", train.val_samples);
}

void parse_diagnostics(const json& obj, DiagnosticsConfig& diag) {
  reject_unknown(obj, "diagnostics.",
                 {"window_per_class", "bins", "range_sigmas", "source_feature_samples"});
  read(obj, "window_per_class", diag.window_per_class);
  read(obj, "bins", diag.bins);
  read(obj, "range_sigmas", diag.range_sigmas);
  read(obj, "source_feature_samples", diag.source_feature_samples);
}

}  // namespace

std::vector<DomainSpec> default_domains() {
  return {
      {"noise", CorruptionFamily::GaussNoise, 5, 50},
      {"smooth", CorruptionFamily::Smooth, 5, 50},
      {"contrast", CorruptionFamily::Contrast, 5, 50},
      {"brightness", CorruptionFamily::Brightness, 5, 50},
      {"occlude", CorruptionFamily::Occlude, 5, 50},
      {"noise-mild", CorruptionFamily::GaussNoise, 3, 50},
  };
}

std::vector<DomainSpec> identity_domains() {
  return {{"identity", CorruptionFamily::Identity, 1, 50}};
}

HarnessConfig default_config() {
  HarnessConfig config;
  config.setup.stream.domains = default_domains();
  apply_preset(config, config.preset);
  config.setup.stream.seed = config.seed;
  config.setup.model.input_dim = config.setup.stream.task.input_dim;
  config.setup.model.classes = config.setup.stream.task.classes;
  return config;
}

void apply_preset(HarnessConfig& config, const std::string& name) {
  DaopdConfig& d = config.setup.daopd;
  if (name == "cifar10-like") {
    d.ema_alpha = 0.999;
    d.views = 2;
    d.temperature = 1.0;
    d.opd_weight = 0.5;
    config.setup.stream.batch_size = 40;
    config.setup.model.hidden_size = 48;
  } else if (name == "cifar100-like") {
    d.ema_alpha = 0.998;
    d.views = 1;
    d.temperature = 2.5;
    d.opd_weight = 0.1;
    config.setup.stream.batch_size = 40;
    config.setup.model.hidden_size = 192;
  } else if (name == "imagenet-like") {
    d.ema_alpha = 0.995;
    d.views = 1;
    d.temperature = 2.0;
    d.opd_weight = 0.3;
    config.setup.stream.batch_size = 16;
    config.setup.model.hidden_size = 192;
  } else if (name == "acdc-like") {
    d.ema_alpha = 0.999;
    d.views = 1;
    d.temperature = 1.5;
    d.opd_weight = 0.1;
    config.setup.stream.batch_size = 1;
    config.setup.model.hidden_size = 64;
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  config.preset = name;
}

HarnessConfig parse_config_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config root must be an object");

  reject_unknown(doc, "",
                 {"seed", "preset", "task", "model", "stream", "daopd", "policy", "train",
                  "diagnostics"});

  HarnessConfig config = default_config();
  if (doc.contains("preset")) apply_preset(config, doc.at("preset").get<std::string>());
  read(doc, "seed", config.seed);
  if (doc.contains("task")) parse_task(doc.at("task"), config.setup.stream.task);
  if (doc.contains("model")) parse_model(doc.at("model"), config.setup.model);
  if (doc.contains("stream")) parse_stream(doc.at("stream"), config.setup.stream);
  if (doc.contains("daopd")) parse_daopd(doc.at("daopd"), config.setup.daopd);
  if (doc.contains("policy")) parse_policy(doc.at("policy"), config.setup.policy);
  if (doc.contains("train")) parse_train(doc.at("train"), config.setup.train);
  if (doc.contains("diagnostics")) parse_diagnostics(doc.at("diagnostics"), config.setup.diagnostics);

  config.setup.stream.seed = config.seed;
  config.setup.model.input_dim = config.setup.stream.task.input_dim;
  config.setup.model.classes = config.setup.stream.task.classes;
  return config;
}

HarnessConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

}  // namespace moase
