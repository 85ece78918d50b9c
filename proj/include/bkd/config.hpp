#pragma once

#include <cstdint>
#include <ostream>
#include <string>

#include "bkd/losses.hpp"

namespace bkd {

// Bad config file, unknown key, or unusable value. `line` is the offending
// config-file line, or 0 when the problem came from a flag.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}

  int line() const { return line_; }

 private:
  int line_ = 0;
};

// Everything an experiment run needs, with documented defaults. Config files
// are line-oriented `key = value` text; command-line flags override file
// values key for key.
struct ExperimentConfig {
  std::string task = "mnist";        // mnist | synthetic | token
  std::string mode = "backward_kd";  // scratch | vanilla_kd | backward_kd
  KdHyperParams hp;

  // data and artifacts
  std::string data_dir = "data/mnist";
  std::string out_dir;  // default <BKD_OUTPUT_ROOT or ./runs>/<task>_<mode>_seed<seed>
  std::string teacher_ckpt;
  std::string student_ckpt;
  int teacher_epochs = 15;
  double teacher_learning_rate = 0.1;
  std::uint64_t teacher_seed = 7;

  // mnist architecture
  int teacher_hidden = 800;
  int student_hidden = 5;

  // few-sample mode
  double subsample_fraction = 1.0;
  bool stratified = true;
  std::uint64_t subsample_seed = 1234;

  // synthetic task
  int teacher_degree = 20;
  int student_degree = 15;
  int synthetic_samples = 8;
  double interval_lo = -1.0;
  double interval_hi = 1.0;
  bool equal_spacing = false;
  int grid_points = 1000;

  // token task
  int vocab = 20;
  int seq_len = 4;
  int token_train_samples = 4000;
  int token_test_samples = 2000;
  int teacher_embed_dim = 8;
  int student_embed_dim = 4;
  int token_teacher_hidden = 64;
  int token_student_hidden = 8;
  // token-level distillation epochs that produce the pretrained compact
  // student before any distill mode runs (token task only; 0 disables)
  int student_pretrain_epochs = 20;
  double student_pretrain_learning_rate = 0.4;

  void validate() const;  // throws ConfigError
  std::string default_out_dir() const;
};

// Parses a config file; throws ConfigError (with line numbers) on unknown
// keys or bad values, DataError if the file cannot be opened.
ExperimentConfig parse_config_file(const std::string& path);

// Applies one `key`, `value` pair; used for both file lines and flags.
void apply_config_value(ExperimentConfig& config, const std::string& key,
                        const std::string& value, int line = 0);

// Full echo, one `key = value` per line in a fixed order; reparsing the echo
// reproduces the config.
void echo_config(const ExperimentConfig& config, std::ostream& os);

// All recognized keys with defaults and meaning, for --help.
void print_config_keys(std::ostream& os);

}  // namespace bkd
