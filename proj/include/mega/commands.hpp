#pragma once

#include "mega/runconfig.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace mega::cli {

// Every command returns a process exit code: 0 iff all requested outputs were
// written; per-case failures are listed on `err` and turn the exit nonzero.

struct AttributeOptions {
    std::string edited_weights_path; // empty: contrast against the IKE context
};

int cmd_attribute(const RunConfig& config, const AttributeOptions& options, std::ostream& log,
                  std::ostream& err);

int cmd_steer_fit(const RunConfig& config, std::ostream& log, std::ostream& err);

enum class EvalMode { BaselineNone, BaselineIke, Policies };

int cmd_eval(const RunConfig& config, EvalMode mode, const std::string& policies_dir,
             std::ostream& log, std::ostream& err);

// Renders one SVG bar chart per token_role found in each CSV (mean delta per
// layer and component).
int cmd_report(const std::vector<std::string>& csv_paths, const std::string& out_dir,
               std::ostream& log, std::ostream& err);

int cmd_gen_toy(const std::string& out_dir, uint64_t seed, size_t n_cases, std::ostream& log,
                std::ostream& err);

int cmd_convert(const std::string& in_path, const std::string& out_path, std::ostream& log,
                std::ostream& err);

// Policy file name for a case under a directory.
std::string policy_path(const std::string& dir, const std::string& case_id);

} // namespace mega::cli
