#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bondlab/types.hpp"

namespace bondlab {

// Scenario-driven batch runs. A scenario file is a JSON document holding one
// market block, a list of named claims, and a list of experiments executed
// in order. Each experiment writes <output>/<name>.json plus CSV tables and
// may declare assertions; the run exits 0 only when every assertion passes.

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<Index> paths;
  std::optional<std::string> output_dir;
  std::vector<std::string> only_experiments;  // empty: run all
};

struct RunOutcome {
  int exit_code = 0;  // 0 ok, 1 assertion failure, 2 config error, 3 io error
  std::vector<std::string> failed_experiments;
  std::vector<std::string> messages;
};

RunOutcome run_scenario(const std::string& config_path,
                        const RunOverrides& overrides = {});

}  // namespace bondlab
