#include "bkd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace bkd {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) {
    return "";
  }
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) {
      throw std::invalid_argument("trailing characters");
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value + "' as a number", line);
  }
}

long parse_int(const std::string& key, const std::string& value, int line) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size()) {
      throw std::invalid_argument("trailing characters");
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value + "' as an integer", line);
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value, int line) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) {
      throw std::invalid_argument("trailing characters");
    }
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value + "' as an unsigned integer",
                      line);
  }
}

bool parse_bool(const std::string& key, const std::string& value, int line) {
  if (value == "1" || value == "true") {
    return true;
  }
  if (value == "0" || value == "false") {
    return false;
  }
  throw ConfigError("key '" + key + "': expected 0/1/true/false, got '" + value + "'", line);
}

}  // namespace

void apply_config_value(ExperimentConfig& c, const std::string& key, const std::string& value,
                        int line) {
  if (key == "task") {
    if (value != "mnist" && value != "synthetic" && value != "token") {
      throw ConfigError("task must be mnist, synthetic or token; got '" + value + "'", line);
    }
    c.task = value;
  } else if (key == "mode") {
    if (value != "scratch" && value != "vanilla_kd" && value != "backward_kd") {
      throw ConfigError("mode must be scratch, vanilla_kd or backward_kd; got '" + value + "'",
                        line);
    }
    c.mode = value;
  } else if (key == "alpha") {
    c.hp.alpha = parse_double(key, value, line);
  } else if (key == "lambda") {
    c.hp.lambda = parse_double(key, value, line);
  } else if (key == "temperature") {
    c.hp.temperature = parse_double(key, value, line);
  } else if (key == "perturb_rate") {
    c.hp.perturb_rate = parse_double(key, value, line);
  } else if (key == "train_epochs") {
    c.hp.train_epochs = static_cast<int>(parse_int(key, value, line));
  } else if (key == "hyper_epochs") {
    c.hp.hyper_epochs = static_cast<int>(parse_int(key, value, line));
  } else if (key == "perturb_steps") {
    c.hp.perturb_steps = static_cast<int>(parse_int(key, value, line));
  } else if (key == "learning_rate") {
    c.hp.learning_rate = parse_double(key, value, line);
  } else if (key == "momentum") {
    c.hp.momentum = parse_double(key, value, line);
  } else if (key == "batch_size") {
    c.hp.batch_size = static_cast<int>(parse_int(key, value, line));
  } else if (key == "seed") {
    c.hp.seed = parse_u64(key, value, line);
  } else if (key == "aux_retention") {
    if (value == "reset_each_hyper_epoch") {
      c.hp.aux_retention = AuxRetention::reset_each_hyper_epoch;
    } else if (value == "accumulate") {
      c.hp.aux_retention = AuxRetention::accumulate;
    } else {
      throw ConfigError("aux_retention must be reset_each_hyper_epoch or accumulate", line);
    }
  } else if (key == "input_clip") {
    if (value == "none") {
      c.hp.input_clip.reset();
    } else {
      const auto comma = value.find(',');
      if (comma == std::string::npos) {
        throw ConfigError("input_clip wants 'lo,hi' or 'none', got '" + value + "'", line);
      }
      const double lo = parse_double(key, trim(value.substr(0, comma)), line);
      const double hi = parse_double(key, trim(value.substr(comma + 1)), line);
      c.hp.input_clip = {{lo, hi}};
    }
  } else if (key == "aux_kl_only") {
    c.hp.aux_kl_only = parse_bool(key, value, line);
  } else if (key == "kd_loss_form") {
    if (value == "lambda") {
      c.hp.kd_loss_form = KdLossForm::lambda_form;
    } else if (value == "alpha") {
      c.hp.kd_loss_form = KdLossForm::alpha_form;
    } else {
      throw ConfigError("kd_loss_form must be lambda or alpha", line);
    }
  } else if (key == "bkd_on_probabilities") {
    c.hp.bkd_on_probabilities = parse_bool(key, value, line);
  } else if (key == "data_dir") {
    c.data_dir = value;
  } else if (key == "out_dir") {
    c.out_dir = value;
  } else if (key == "teacher_ckpt") {
    c.teacher_ckpt = value;
  } else if (key == "student_ckpt") {
    c.student_ckpt = value;
  } else if (key == "teacher_epochs") {
    c.teacher_epochs = static_cast<int>(parse_int(key, value, line));
  } else if (key == "teacher_learning_rate") {
    c.teacher_learning_rate = parse_double(key, value, line);
  } else if (key == "teacher_seed") {
    c.teacher_seed = parse_u64(key, value, line);
  } else if (key == "teacher_hidden") {
    c.teacher_hidden = static_cast<int>(parse_int(key, value, line));
  } else if (key == "student_hidden") {
    c.student_hidden = static_cast<int>(parse_int(key, value, line));
  } else if (key == "subsample_fraction") {
    c.subsample_fraction = parse_double(key, value, line);
  } else if (key == "stratified") {
    c.stratified = parse_bool(key, value, line);
  } else if (key == "subsample_seed") {
    c.subsample_seed = parse_u64(key, value, line);
  } else if (key == "teacher_degree") {
    c.teacher_degree = static_cast<int>(parse_int(key, value, line));
  } else if (key == "student_degree") {
    c.student_degree = static_cast<int>(parse_int(key, value, line));
  } else if (key == "synthetic_samples") {
    c.synthetic_samples = static_cast<int>(parse_int(key, value, line));
  } else if (key == "interval_lo") {
    c.interval_lo = parse_double(key, value, line);
  } else if (key == "interval_hi") {
    c.interval_hi = parse_double(key, value, line);
  } else if (key == "equal_spacing") {
    c.equal_spacing = parse_bool(key, value, line);
  } else if (key == "grid_points") {
    c.grid_points = static_cast<int>(parse_int(key, value, line));
  } else if (key == "vocab") {
    c.vocab = static_cast<int>(parse_int(key, value, line));
  } else if (key == "seq_len") {
    c.seq_len = static_cast<int>(parse_int(key, value, line));
  } else if (key == "token_train_samples") {
    c.token_train_samples = static_cast<int>(parse_int(key, value, line));
  } else if (key == "token_test_samples") {
    c.token_test_samples = static_cast<int>(parse_int(key, value, line));
  } else if (key == "teacher_embed_dim") {
    c.teacher_embed_dim = static_cast<int>(parse_int(key, value, line));
  } else if (key == "student_embed_dim") {
    c.student_embed_dim = static_cast<int>(parse_int(key, value, line));
  } else if (key == "token_teacher_hidden") {
    c.token_teacher_hidden = static_cast<int>(parse_int(key, value, line));
  } else if (key == "token_student_hidden") {
    c.token_student_hidden = static_cast<int>(parse_int(key, value, line));
  } else if (key == "student_pretrain_epochs") {
    c.student_pretrain_epochs = static_cast<int>(parse_int(key, value, line));
  } else if (key == "student_pretrain_learning_rate") {
    c.student_pretrain_learning_rate = parse_double(key, value, line);
  } else {
    throw ConfigError("unknown key '" + key + "'", line);
  }
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) {
    throw ConfigError("cannot open config file '" + path + "'");
  }
  ExperimentConfig config;
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string stripped = trim(raw);
    if (stripped.empty() || stripped[0] == '#') {
      continue;
    }
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("expected 'key = value', got '" + stripped + "'", line_no);
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("missing key before '='", line_no);
    }
    apply_config_value(config, key, value, line_no);
  }
  return config;
}

void ExperimentConfig::validate() const {
  hp.validate();
  if (teacher_epochs < 1) {
    throw ConfigError("teacher_epochs must be >= 1");
  }
  if (teacher_hidden < 1 || student_hidden < 1 || token_teacher_hidden < 1 ||
      token_student_hidden < 1) {
    throw ConfigError("hidden layer sizes must be positive");
  }
  if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0)) {
    throw ConfigError("subsample_fraction must lie in (0,1]");
  }
  if (teacher_degree < 0 || student_degree < 0) {
    throw ConfigError("polynomial degrees must be nonnegative");
  }
  if (synthetic_samples < 2) {
    throw ConfigError("synthetic_samples must be >= 2");
  }
  if (!(interval_lo < interval_hi)) {
    throw ConfigError("interval_lo must be < interval_hi");
  }
  if (grid_points < 2) {
    throw ConfigError("grid_points must be >= 2");
  }
  if (vocab < 2 || seq_len < 1) {
    throw ConfigError("token task needs vocab >= 2 and seq_len >= 1");
  }
  if (token_train_samples < 1 || token_test_samples < 1) {
    throw ConfigError("token sample counts must be positive");
  }
  if (teacher_embed_dim < 1 || student_embed_dim < 1) {
    throw ConfigError("embedding dims must be positive");
  }
  if (student_pretrain_epochs < 0) {
    throw ConfigError("student_pretrain_epochs must be >= 0");
  }
}

std::string ExperimentConfig::default_out_dir() const {
  const char* root = std::getenv("BKD_OUTPUT_ROOT");
  const std::string base = (root != nullptr && *root != '\0') ? root : "runs";
  return base + "/" + task + "_" + mode + "_seed" + std::to_string(hp.seed);
}

void echo_config(const ExperimentConfig& c, std::ostream& os) {
  os.precision(17);
  os << "task = " << c.task << "\n";
  os << "mode = " << c.mode << "\n";
  os << "alpha = " << c.hp.alpha << "\n";
  os << "lambda = " << c.hp.lambda << "\n";
  os << "temperature = " << c.hp.temperature << "\n";
  os << "perturb_rate = " << c.hp.perturb_rate << "\n";
  os << "train_epochs = " << c.hp.train_epochs << "\n";
  os << "hyper_epochs = " << c.hp.hyper_epochs << "\n";
  os << "perturb_steps = " << c.hp.perturb_steps << "\n";
  os << "learning_rate = " << c.hp.learning_rate << "\n";
  os << "momentum = " << c.hp.momentum << "\n";
  os << "batch_size = " << c.hp.batch_size << "\n";
  os << "seed = " << c.hp.seed << "\n";
  os << "aux_retention = "
     << (c.hp.aux_retention == AuxRetention::accumulate ? "accumulate"
                                                        : "reset_each_hyper_epoch")
     << "\n";
  if (c.hp.input_clip) {
    os << "input_clip = " << (*c.hp.input_clip)[0] << "," << (*c.hp.input_clip)[1] << "\n";
  } else {
    os << "input_clip = none\n";
  }
  os << "aux_kl_only = " << (c.hp.aux_kl_only ? 1 : 0) << "\n";
  os << "kd_loss_form = "
     << (c.hp.kd_loss_form == KdLossForm::alpha_form ? "alpha" : "lambda") << "\n";
  os << "bkd_on_probabilities = " << (c.hp.bkd_on_probabilities ? 1 : 0) << "\n";
  os << "data_dir = " << c.data_dir << "\n";
  os << "out_dir = " << c.out_dir << "\n";
  os << "teacher_ckpt = " << c.teacher_ckpt << "\n";
  os << "student_ckpt = " << c.student_ckpt << "\n";
  os << "teacher_epochs = " << c.teacher_epochs << "\n";
  os << "teacher_learning_rate = " << c.teacher_learning_rate << "\n";
  os << "teacher_seed = " << c.teacher_seed << "\n";
  os << "teacher_hidden = " << c.teacher_hidden << "\n";
  os << "student_hidden = " << c.student_hidden << "\n";
  os << "subsample_fraction = " << c.subsample_fraction << "\n";
  os << "stratified = " << (c.stratified ? 1 : 0) << "\n";
  os << "subsample_seed = " << c.subsample_seed << "\n";
  os << "teacher_degree = " << c.teacher_degree << "\n";
  os << "student_degree = " << c.student_degree << "\n";
  os << "synthetic_samples = " << c.synthetic_samples << "\n";
  os << "interval_lo = " << c.interval_lo << "\n";
  os << "interval_hi = " << c.interval_hi << "\n";
  os << "equal_spacing = " << (c.equal_spacing ? 1 : 0) << "\n";
  os << "grid_points = " << c.grid_points << "\n";
  os << "vocab = " << c.vocab << "\n";
  os << "seq_len = " << c.seq_len << "\n";
  os << "token_train_samples = " << c.token_train_samples << "\n";
  os << "token_test_samples = " << c.token_test_samples << "\n";
  os << "teacher_embed_dim = " << c.teacher_embed_dim << "\n";
  os << "student_embed_dim = " << c.student_embed_dim << "\n";
  os << "token_teacher_hidden = " << c.token_teacher_hidden << "\n";
  os << "token_student_hidden = " << c.token_student_hidden << "\n";
  os << "student_pretrain_epochs = " << c.student_pretrain_epochs << "\n";
  os << "student_pretrain_learning_rate = " << c.student_pretrain_learning_rate << "\n";
}

void print_config_keys(std::ostream& os) {
  os << "config keys (file: 'key = value' lines, flags: --key value):\n"
     << "  task                  mnist | synthetic | token          (mnist)\n"
     << "  mode                  scratch | vanilla_kd | backward_kd (backward_kd)\n"
     << "  alpha                 label/teacher mix, alpha-form loss (0.5)\n"
     << "  lambda                teacher weight, lambda-form loss   (0.9)\n"
     << "  temperature           softmax temperature tau            (4)\n"
     << "  perturb_rate          ascent step size eta               (0.05)\n"
     << "  train_epochs          epochs per phase, e                (3)\n"
     << "  hyper_epochs          max/min rounds, h                  (3)\n"
     << "  perturb_steps         ascent steps per sample, k         (10)\n"
     << "  learning_rate         SGD step size                      (0.1)\n"
     << "  momentum              SGD momentum                       (0)\n"
     << "  batch_size            minibatch size                     (64)\n"
     << "  seed                  student/run seed                   (1)\n"
     << "  aux_retention         reset_each_hyper_epoch | accumulate\n"
     << "  input_clip            lo,hi | none                       (none)\n"
     << "  aux_kl_only           0|1: drop hard labels on aux rows  (0)\n"
     << "  kd_loss_form          lambda | alpha                     (lambda)\n"
     << "  bkd_on_probabilities  0|1: ascent on softmax outputs     (0)\n"
     << "  data_dir              MNIST IDX directory                (data/mnist)\n"
     << "  out_dir               output directory (default from BKD_OUTPUT_ROOT)\n"
     << "  teacher_ckpt          teacher checkpoint path\n"
     << "  student_ckpt          student checkpoint path\n"
     << "  teacher_epochs        teacher scratch-training epochs    (15)\n"
     << "  teacher_learning_rate teacher SGD step size              (0.1)\n"
     << "  teacher_seed          teacher init/run seed              (7)\n"
     << "  teacher_hidden        MNIST teacher hidden width         (800)\n"
     << "  student_hidden        MNIST student hidden width         (5)\n"
     << "  subsample_fraction    few-sample fraction of train data  (1)\n"
     << "  stratified            0|1 per-class proportional subsample (1)\n"
     << "  subsample_seed        subsample selection seed           (1234)\n"
     << "  teacher_degree        synthetic teacher poly degree      (20)\n"
     << "  student_degree        synthetic student poly degree      (15)\n"
     << "  synthetic_samples     synthetic training points          (8)\n"
     << "  interval_lo/hi        synthetic input interval           (-1, 1)\n"
     << "  equal_spacing         0|1 equally spaced synthetic xs    (0)\n"
     << "  grid_points           export/eval grid resolution        (1000)\n"
     << "  vocab                 token task vocabulary size         (20)\n"
     << "  seq_len               token sequence length              (4)\n"
     << "  token_train_samples   token training set size            (4000)\n"
     << "  token_test_samples    token held-out set size            (2000)\n"
     << "  teacher_embed_dim     token teacher embedding dim        (8)\n"
     << "  student_embed_dim     token student embedding dim        (4)\n"
     << "  token_teacher_hidden  token teacher head hidden width    (64)\n"
     << "  token_student_hidden  token student head hidden width    (8)\n"
     << "  student_pretrain_epochs        token-level KD epochs before any mode (20)\n"
     << "  student_pretrain_learning_rate step size for that pretraining (0.4)\n";
}

}  // namespace bkd
