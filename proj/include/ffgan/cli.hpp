#pragma once

#include "ffgan/synth_data.hpp"
#include "ffgan/training.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace ffgan {

/// Settings a command can draw on: the dataset recipe and the training schedule.
struct RunConfig {
    DatasetSpec data;
    TrainConfig train;
};

// Config files are line based. Each line is `key = value`; surrounding spaces are
// trimmed, blank lines and lines starting with '#' are skipped. A number must
// parse completely with std::from_chars (no leading '+', no suffix), flags take
// true/false/1/0, and a key may appear only once. Keys:
//   seed                         dataset and training seed
//   data.<field>                 any DatasetSpec field
//   batch_size beta1 beta2 adam_eps lr_pretrain lr_gd lr_joint pose_weight
//   r_through_g analytic_flip ablation
//   epochs.{pretrain_r,pretrain_c,stage1,stage2,stage3}
//   stage{1,2,3}.lambda_{rec,tv,sym,gan,id}
/// Applies a config file's settings; throws InvalidArgument naming the line.
void apply_config_text(const std::string& text, RunConfig& config);
/// Config text listing every key; apply_config_text of it reproduces `config`.
std::string config_text(const RunConfig& config);

/// Exit codes of the command-line front end.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2 };

/// Runs one command. `args` excludes the program name. Progress goes to `out`,
/// diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace ffgan
