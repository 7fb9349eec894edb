// Command-line front end: pretrain / adapt / sweep / diag over the
// synthetic continual-domain streams. Exit codes: 0 success, 2 config
// error, 3 numeric abort.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "moase/config.hpp"
#include "moase/stream.hpp"

namespace {

using namespace moase;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string stream_preset;
  std::size_t rounds = 0;
  std::string out_path;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file")->envname("MOASE_CONFIG");
  cmd->add_option("--seed", args.seed, "random seed")->envname("MOASE_SEED")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--stream", args.stream_preset, "stream preset: default | identity")
      ->envname("MOASE_STREAM");
  cmd->add_option("--rounds", args.rounds, "number of domain cycles")->envname("MOASE_ROUNDS");
  cmd->add_option("--out", args.out_path, "metrics output path (JSON lines)")
      ->envname("MOASE_OUT");
}

HarnessConfig resolve_config(const CommonArgs& args) {
  HarnessConfig config =
      args.config_path.empty() ? default_config() : load_config_file(args.config_path);
  if (args.seed_set) {
    config.seed = args.seed;
    config.setup.stream.seed = args.seed;
  }
  if (!args.stream_preset.empty()) {
    if (args.stream_preset == "default") {
      config.setup.stream.domains = default_domains();
    } else if (args.stream_preset == "identity") {
      config.setup.stream.domains = identity_domains();
    } else {
      throw ConfigError("unknown stream preset: " + args.stream_preset);
    }
  }
  if (args.rounds > 0) config.setup.stream.rounds = args.rounds;
  config.setup.stream.validate();
  config.setup.model.validate();
  config.setup.train.validate();
  config.setup.daopd.validate();
  config.setup.policy.validate();
  config.setup.diagnostics.validate();
  return config;
}

void emit_metrics(const EpisodeMetrics& metrics, const std::string& out_path,
                  const std::string& summary_path) {
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw ConfigError("cannot open output path: " + out_path);
    write_metrics_jsonl(metrics, out);
  }
  std::ostream* summary = &std::cout;
  std::ofstream file;
  if (!summary_path.empty()) {
    file.open(summary_path);
    if (!file) throw ConfigError("cannot open summary path: " + summary_path);
    summary = &file;
  }
  write_summary_csv(metrics, *summary);
}

int cmd_pretrain(const CommonArgs& args, const std::string& checkpoint_path) {
  const HarnessConfig config = resolve_config(args);
  const PretrainResult result =
      pretrain_source(config.setup.stream, config.setup.model, config.setup.train);
  std::cout << "source accuracy " << result.accuracy << " after " << result.steps << " steps\n";
  if (!result.reached_target) {
    std::cerr << "warning: pretraining stopped below the target accuracy\n";
  }
  if (!checkpoint_path.empty()) {
    save_checkpoint(result.pair.student, checkpoint_path);
    std::cout << "checkpoint written to " << checkpoint_path << "\n";
  }
  return kExitOk;
}

int cmd_adapt(const CommonArgs& args, const std::string& mode_name,
              const std::string& checkpoint_path, const std::string& summary_path) {
  const HarnessConfig config = resolve_config(args);
  const Mode mode = mode_from_string(mode_name);

  EpisodeMetrics metrics;
  if (checkpoint_path.empty()) {
    metrics = run_episode(config.setup, mode);
  } else {
    Rng model_rng(config.setup.stream.seed, rng_streams::kModelInit);
    ModelPair pair = build_model(config.setup.model, model_rng);
    load_checkpoint(pair.student, checkpoint_path);
    pair.teacher = pair.student;
    pair.snapshot = pair.student;
    metrics = run_episode(config.setup, mode, pair, 0.0, false);
  }
  emit_metrics(metrics, args.out_path, summary_path);
  std::cout << "mode " << to_string(mode) << " mean error " << metrics.overall_error << "\n";
  return kExitOk;
}

int cmd_sweep(const CommonArgs& args, const std::string& param, const std::string& values_csv,
              const std::string& mode_name) {
  const HarnessConfig base = resolve_config(args);
  const Mode mode = mode_from_string(mode_name);

  std::vector<double> values;
  std::stringstream ss(values_csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      values.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("sweep: bad value " + item);
    }
  }
  if (values.empty()) throw ConfigError("sweep: no values given");

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!args.out_path.empty()) {
    file.open(args.out_path);
    if (!file) throw ConfigError("cannot open output path: " + args.out_path);
    out = &file;
  }
  *out << "param,value,mean_error\n";
  for (double value : values) {
    HarnessConfig config = base;
    if (param == "ema_alpha") {
      config.setup.daopd.ema_alpha = value;
    } else if (param == "views") {
      config.setup.daopd.views = static_cast<std::size_t>(value);
    } else if (param == "temperature") {
      config.setup.daopd.temperature = value;
    } else if (param == "opd_weight") {
      config.setup.daopd.opd_weight = value;
    } else {
      throw ConfigError("sweep: unknown parameter " + param +
                        " (expected ema_alpha | views | temperature | opd_weight)");
    }
    config.setup.daopd.validate();
    const EpisodeMetrics metrics = run_episode(config.setup, mode);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s,%g,%.6f\n", param.c_str(), value, metrics.overall_error);
    *out << buf;
    out->flush();
  }
  return kExitOk;
}

int cmd_diag(const CommonArgs& args, const std::string& mode_name) {
  const HarnessConfig config = resolve_config(args);
  const Mode mode = mode_from_string(mode_name);
  const EpisodeMetrics metrics = run_episode(config.setup, mode);

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!args.out_path.empty()) {
    file.open(args.out_path);
    if (!file) throw ConfigError("cannot open output path: " + args.out_path);
    out = &file;
  }
  *out << "step,domain,js_source,ic_mean\n";
  for (const auto& r : metrics.steps) {
    double ic_sum = 0.0;
    std::size_t ic_n = 0;
    for (double ic : r.ic_per_class) {
      if (!std::isnan(ic)) {
        ic_sum += ic;
        ++ic_n;
      }
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu,%s,%.6f,%.6f\n", r.step, r.domain.c_str(), r.js_source,
                  ic_n ? ic_sum / static_cast<double>(ic_n) : 0.0);
    *out << buf;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual test-time adaptation testbed on synthetic domain streams"};
  app.require_subcommand(1);

  CommonArgs pretrain_args, adapt_args, sweep_args, diag_args;
  std::string checkpoint_out, adapt_mode = "moase++", adapt_checkpoint, adapt_summary;
  std::string sweep_param, sweep_values, sweep_mode = "moase++", diag_mode = "moase++";

  auto* pretrain = app.add_subcommand("pretrain", "train the source model on clean data");
  add_common(pretrain, pretrain_args);
  pretrain->add_option("--checkpoint", checkpoint_out, "write the source checkpoint here");

  auto* adapt = app.add_subcommand("adapt", "run one adaptation episode");
  add_common(adapt, adapt_args);
  adapt->add_option("--mode", adapt_mode,
                    "source-frozen | mean-teacher-only | moase | moase++")
      ->envname("MOASE_MODE");
  adapt->add_option("--checkpoint", adapt_checkpoint, "start from a saved source checkpoint");
  adapt->add_option("--summary", adapt_summary, "summary CSV path (stdout when omitted)");

  auto* sweep = app.add_subcommand("sweep", "grid over one DA-OPD hyperparameter");
  add_common(sweep, sweep_args);
  sweep->add_option("--param", sweep_param, "ema_alpha | views | temperature | opd_weight")
      ->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();
  sweep->add_option("--mode", sweep_mode, "episode mode");

  auto* diag = app.add_subcommand("diag", "emit per-step JS/IC diagnostic data");
  add_common(diag, diag_args);
  diag->add_option("--mode", diag_mode, "episode mode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(pretrain_args, checkpoint_out);
    if (adapt->parsed()) return cmd_adapt(adapt_args, adapt_mode, adapt_checkpoint, adapt_summary);
    if (sweep->parsed()) return cmd_sweep(sweep_args, sweep_param, sweep_values, sweep_mode);
    if (diag->parsed()) return cmd_diag(diag_args, diag_mode);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
