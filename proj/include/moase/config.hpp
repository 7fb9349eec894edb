#pragma once

// JSON configuration for the harness: one document, unknown keys rejected
// with their field path, per-benchmark presets for the DA-OPD settings.

#include <string>

#include "moase/stream.hpp"

namespace moase {

struct HarnessConfig {
  std::uint64_t seed = 1;
  std::string preset = "cifar10-like";
  EpisodeSetup setup;
};

// Resolved defaults: cifar10-like preset over the 6-domain stream.
HarnessConfig default_config();

std::vector<DomainSpec> default_domains();
std::vector<DomainSpec> identity_domains();

// Presets mirror the per-benchmark DA-OPD settings (alpha, views,
// temperature, weight) plus batch and hidden size.
void apply_preset(HarnessConfig& config, const std::string& name);

HarnessConfig load_config_file(const std::string& path);
HarnessConfig parse_config_text(const std::string& text);

}  // namespace moase
