// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

namespace voxflow {

// Entry point behind the voxflow binary. Exit codes: 0 success, 1 internal
// failure, 2 user/config error.
int cli_main(int argc, char** argv);

// Defaults merged with the config file and --set overrides, rendered in the
// canonical form (sorted keys, two-space indent). Canonical input re-renders
// byte-identically. Unknown keys raise ConfigError.
std::string render_config(const std::string& config_path, const std::vector<std::string>& overrides);

}  // namespace voxflow
