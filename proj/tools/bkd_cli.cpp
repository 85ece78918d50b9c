// bkd: backward knowledge distillation experiments.
//
// Subcommands:
//   train-teacher   train (or construct) the teacher for a task
//   distill         train a student: scratch, vanilla_kd or backward_kd
//   gen-aux         dump an auxiliary batch generated from a model pair
//   eval            evaluate a checkpoint on the task's held-out data
//   export-curve    dump x, T(x), S(x), divergence over a 1-D grid
//
// Every run writes its full config echo, reports and checkpoints into the
// output directory, so results are reproducible from the artifacts alone.
// Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "bkd/config.hpp"
#include "bkd/data.hpp"
#include "bkd/distill.hpp"
#include "bkd/rng.hpp"

namespace fs = std::filesystem;

namespace {

using namespace bkd;

void print_usage(std::ostream& os) {
  os << "usage: bkd <subcommand> [--config FILE] [--key value]...\n"
     << "subcommands: train-teacher | distill | gen-aux | eval | export-curve | help\n"
     << "flags override config-file values key for key\n\n";
  print_config_keys(os);
  os << "\noutput files per run: config_echo.txt, report.csv (one row per epoch plus a\n"
     << "summary line), hyper.csv (backward_kd), metrics.csv (eval), checkpoints\n";
}

ExperimentConfig parse_args(const std::vector<std::string>& args) {
  ExperimentConfig config;
  bool have_file = false;
  // a --config flag is applied first, wherever it appears
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) {
        throw ConfigError("--config needs a file path");
      }
      if (have_file) {
        throw ConfigError("--config given twice");
      }
      config = parse_config_file(args[i + 1]);
      have_file = true;
      ++i;
    }
  }
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& arg = args[i];
    if (arg == "--config") {
      ++i;
      continue;
    }
    if (arg.rfind("--", 0) != 0) {
      throw ConfigError("expected a --key, got '" + arg + "'");
    }
    std::string key = arg.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= args.size()) {
        throw ConfigError("flag --" + key + " needs a value");
      }
      value = args[++i];
    }
    apply_config_value(config, key, value);
  }
  config.validate();
  return config;
}

std::string ensure_out_dir(ExperimentConfig& config) {
  if (config.out_dir.empty()) {
    config.out_dir = config.default_out_dir();
  }
  fs::create_directories(config.out_dir);
  return config.out_dir;
}

void write_config_echo(const ExperimentConfig& config) {
  std::ofstream os(config.out_dir + "/config_echo.txt");
  echo_config(config, os);
}

void write_report(const TrainReport& report, const std::string& dir) {
  {
    std::ofstream os(dir + "/report.csv");
    report.write_csv(os);
  }
  if (!report.hyper_aux_divergence.empty()) {
    std::ofstream os(dir + "/hyper.csv");
    report.write_hyper_csv(os);
  }
}

// ------------------------------------------------------------------
// task data
// ------------------------------------------------------------------

Dataset load_mnist_split(const ExperimentConfig& config, bool train) {
  const std::string prefix = config.data_dir + (train ? "/train" : "/t10k");
  return load_idx(prefix + "-images-idx3-ubyte", prefix + "-labels-idx1-ubyte");
}

// datasets derive from teacher_seed so student seeds vary only the student
PolynomialModel make_synthetic_teacher(const ExperimentConfig& config) {
  Rng rng(config.teacher_seed);
  PolynomialModel teacher;
  teacher.coeffs.resize(static_cast<std::size_t>(config.teacher_degree) + 1);
  for (double& c : teacher.coeffs) {
    c = rng.uniform(-1.0, 1.0);
  }
  return teacher;
}

Dataset synthetic_train_data(const ExperimentConfig& config, const PolynomialModel& teacher) {
  return gen_synthetic(teacher, config.synthetic_samples, config.interval_lo, config.interval_hi,
                       config.teacher_seed + 1, config.equal_spacing);
}

Dataset synthetic_grid_data(const ExperimentConfig& config, const PolynomialModel& teacher) {
  return gen_synthetic(teacher, config.grid_points, config.interval_lo, config.interval_hi, 0,
                       /*equal_spacing=*/true);
}

Dataset token_data(const ExperimentConfig& config, bool train) {
  return gen_token_task(config.vocab, config.seq_len,
                        train ? config.token_train_samples : config.token_test_samples,
                        config.teacher_seed * 2 + (train ? 1 : 2));
}

double half_width(const ExperimentConfig& config) {
  return (config.interval_hi - config.interval_lo) / 2.0;
}

std::vector<LayerSpec> mnist_layers(int hidden) {
  return {{784, hidden, Activation::relu}, {hidden, 10, Activation::identity}};
}

std::vector<LayerSpec> token_head_layers(int embed_dim, int seq_len, int hidden) {
  return {{embed_dim * seq_len, hidden, Activation::relu}, {hidden, 2, Activation::identity}};
}

// ------------------------------------------------------------------
// subcommands
// ------------------------------------------------------------------

int cmd_train_teacher(ExperimentConfig config) {
  ensure_out_dir(config);
  const std::string ckpt =
      config.teacher_ckpt.empty() ? config.out_dir + "/teacher.ckpt" : config.teacher_ckpt;
  config.teacher_ckpt = ckpt;
  write_config_echo(config);

  KdHyperParams hp = config.hp;
  hp.seed = config.teacher_seed;
  hp.train_epochs = config.teacher_epochs;
  hp.learning_rate = config.teacher_learning_rate;

  if (config.task == "mnist") {
    const Dataset train = load_mnist_split(config, true);
    const Dataset test = load_mnist_split(config, false);
    Network teacher = make_mlp(mnist_layers(config.teacher_hidden), config.teacher_seed);
    const TrainReport report = train_scratch(teacher, train, &test, hp);
    save_network(teacher, ckpt);
    write_report(report, config.out_dir);
    std::cout << "teacher params=" << param_count(teacher)
              << " test_accuracy=" << report.final_metric << " ckpt=" << ckpt << "\n";
  } else if (config.task == "synthetic") {
    const PolynomialModel poly = make_synthetic_teacher(config);
    const Network teacher = from_polynomial(poly, half_width(config));
    const Dataset train = synthetic_train_data(config, poly);
    const EvalMetrics fit = evaluate(teacher, train);
    save_network(teacher, ckpt);
    std::cout << "teacher degree=" << poly.degree() << " train_mse=" << fit.mse
              << " ckpt=" << ckpt << "\n";
  } else {
    const Dataset train = token_data(config, true);
    const Dataset test = token_data(config, false);
    EmbeddingModel teacher = make_embedding_model(
        config.vocab, config.teacher_embed_dim, config.seq_len,
        token_head_layers(config.teacher_embed_dim, config.seq_len, config.token_teacher_hidden),
        config.teacher_seed);
    const TrainReport report = train_scratch(teacher, train, &test, hp);
    save_embedding_model(teacher, ckpt);
    write_report(report, config.out_dir);
    std::cout << "teacher params=" << param_count(teacher)
              << " test_accuracy=" << report.final_metric << " ckpt=" << ckpt << "\n";
  }
  return 0;
}

int cmd_distill(ExperimentConfig config) {
  ensure_out_dir(config);
  if (config.teacher_ckpt.empty()) {
    throw ConfigError("distill needs teacher_ckpt");
  }
  write_config_echo(config);
  const std::string student_ckpt =
      config.student_ckpt.empty() ? config.out_dir + "/student_final.ckpt" : config.student_ckpt;

  // equal budget across modes: every student trains e*(h+2) total epochs
  KdHyperParams hp = config.hp;
  const int budget = hp.train_epochs * (hp.hyper_epochs + 2);

  TrainReport report;
  if (config.task == "token") {
    const EmbeddingModel teacher = load_embedding_model(config.teacher_ckpt);
    Dataset train = token_data(config, true);
    const Dataset test = token_data(config, false);
    if (config.subsample_fraction < 1.0) {
      train = subsample(train, config.subsample_fraction, config.subsample_seed,
                        config.stratified);
    }
    EmbeddingModel student = make_embedding_model(
        config.vocab, config.student_embed_dim, config.seq_len,
        token_head_layers(config.student_embed_dim, config.seq_len, config.token_student_hidden),
        hp.seed);
    if (config.student_pretrain_epochs > 0 && config.mode != "scratch") {
      KdHyperParams pretrain = hp;
      pretrain.train_epochs = config.student_pretrain_epochs;
      pretrain.learning_rate = config.student_pretrain_learning_rate;
      vanilla_kd_tokens(student, teacher, train, nullptr, pretrain);
    }
    if (config.mode == "scratch") {
      KdHyperParams budget_hp = hp;
      budget_hp.train_epochs = budget;
      report = train_scratch(student, train, &test, budget_hp);
    } else if (config.mode == "vanilla_kd") {
      KdHyperParams budget_hp = hp;
      budget_hp.train_epochs = budget;
      report = vanilla_kd_embedding(student, teacher, train, &test, budget_hp);
    } else {
      const auto hook = [&config](const std::string& phase, const EmbeddingModel& model) {
        save_embedding_model(model, config.out_dir + "/student_" + phase + ".ckpt");
      };
      report = backward_kd_embedding(student, teacher, train, &test, hp, hook);
    }
    save_embedding_model(student, student_ckpt);
  } else {
    const Network teacher = load_network(config.teacher_ckpt);
    Dataset train, test;
    Network student;
    if (config.task == "mnist") {
      train = load_mnist_split(config, true);
      test = load_mnist_split(config, false);
      if (config.subsample_fraction < 1.0) {
        train = subsample(train, config.subsample_fraction, config.subsample_seed,
                          config.stratified);
      }
      student = make_mlp(mnist_layers(config.student_hidden), hp.seed);
    } else {
      const PolynomialModel poly = to_polynomial(teacher);
      train = synthetic_train_data(config, poly);
      test = synthetic_grid_data(config, poly);
      student = make_polynomial(config.student_degree, half_width(config), hp.seed);
      if (!hp.input_clip) {
        hp.input_clip = {{config.interval_lo, config.interval_hi}};
      }
    }
    if (config.mode == "scratch") {
      KdHyperParams budget_hp = hp;
      budget_hp.train_epochs = budget;
      report = train_scratch(student, train, &test, budget_hp);
    } else if (config.mode == "vanilla_kd") {
      KdHyperParams budget_hp = hp;
      budget_hp.train_epochs = budget;
      report = vanilla_kd(student, teacher, train, &test, budget_hp);
    } else {
      const auto hook = [&config](const std::string& phase, const Network& model) {
        save_network(model, config.out_dir + "/student_" + phase + ".ckpt");
      };
      report = backward_kd(student, teacher, train, &test, hp, hook);
    }
    save_network(student, student_ckpt);
  }
  write_report(report, config.out_dir);
  std::cout << "mode=" << config.mode << " final_metric=" << report.final_metric
            << " final_loss=" << report.final_loss << " steps=" << report.optimizer_steps
            << " ckpt=" << student_ckpt << "\n";
  return 0;
}

int cmd_gen_aux(ExperimentConfig config) {
  ensure_out_dir(config);
  if (config.teacher_ckpt.empty() || config.student_ckpt.empty()) {
    throw ConfigError("gen-aux needs teacher_ckpt and student_ckpt");
  }
  write_config_echo(config);

  Tensor aux_inputs;
  std::vector<double> before, after;
  std::vector<std::uint8_t> aborted;
  Dataset dump;

  if (config.task == "token") {
    const EmbeddingModel teacher = load_embedding_model(config.teacher_ckpt);
    const EmbeddingModel student = load_embedding_model(config.student_ckpt);
    const Dataset train = token_data(config, true);
    const EmbeddingTransform transform =
        compute_transform(student.embedding, teacher.embedding);
    const Tensor z = embed_tokens(student.embedding, train.tokens, train.size(),
                                  train.seq_len).detach();
    EmbeddingAuxBatch aux =
        generate_auxiliary_embedding(z, student, teacher, transform, config.hp);
    aux_inputs = aux.z_student;
    before = aux.origin_divergence;
    after = aux.divergence;
    aborted = aux.aborted;
    dump.kind = DatasetKind::classification;
    dump.inputs = aux.z_student;
    dump.labels = aux.pseudo_labels;
    dump.num_classes = 2;
  } else {
    const Network teacher = load_network(config.teacher_ckpt);
    const Network student = load_network(config.student_ckpt);
    Dataset train;
    KdHyperParams hp = config.hp;
    if (config.task == "mnist") {
      train = load_mnist_split(config, true);
      if (config.subsample_fraction < 1.0) {
        train = subsample(train, config.subsample_fraction, config.subsample_seed,
                          config.stratified);
      }
    } else {
      const PolynomialModel poly = to_polynomial(teacher);
      train = synthetic_train_data(config, poly);
      if (!hp.input_clip) {
        hp.input_clip = {{config.interval_lo, config.interval_hi}};
      }
    }
    AuxiliaryBatch aux = generate_auxiliary(train, student, teacher, hp);
    aux_inputs = aux.inputs;
    before = aux.origin_divergence;
    after = aux.divergence;
    aborted = aux.aborted;
    dump.kind = train.kind;
    dump.inputs = aux.inputs;
    if (train.kind == DatasetKind::classification) {
      dump.labels = aux.pseudo_labels;
      dump.num_classes = train.num_classes;
    } else {
      dump.targets = std::vector<double>(aux.teacher_outputs.data());
    }
  }

  dump.provenance = "gen-aux";
  save_dataset(dump, config.out_dir + "/aux.bkdd");
  std::ofstream os(config.out_dir + "/aux.csv");
  os.precision(17);
  os << "origin";
  for (int c = 0; c < aux_inputs.cols(); ++c) {
    os << ",x" << c;
  }
  os << ",bkd_before,bkd_after,aborted\n";
  for (int i = 0; i < aux_inputs.rows(); ++i) {
    os << i;
    for (int c = 0; c < aux_inputs.cols(); ++c) {
      os << "," << aux_inputs.at(i, c);
    }
    os << "," << before[static_cast<std::size_t>(i)] << "," << after[static_cast<std::size_t>(i)]
       << "," << static_cast<int>(aborted[static_cast<std::size_t>(i)]) << "\n";
  }
  double mean_before = 0.0, mean_after = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    mean_before += before[i];
    mean_after += after[i];
  }
  mean_before /= before.empty() ? 1 : before.size();
  mean_after /= after.empty() ? 1 : after.size();
  std::cout << "aux_samples=" << aux_inputs.rows() << " mean_bkd_before=" << mean_before
            << " mean_bkd_after=" << mean_after << " out=" << config.out_dir << "/aux.csv\n";
  return 0;
}

int cmd_eval(ExperimentConfig config) {
  ensure_out_dir(config);
  if (config.student_ckpt.empty()) {
    throw ConfigError("eval needs student_ckpt");
  }
  write_config_echo(config);

  EvalMetrics metrics;
  if (config.task == "token") {
    const EmbeddingModel model = load_embedding_model(config.student_ckpt);
    metrics = evaluate(model, token_data(config, false));
  } else if (config.task == "mnist") {
    const Network model = load_network(config.student_ckpt);
    metrics = evaluate(model, load_mnist_split(config, false));
  } else {
    const Network model = load_network(config.student_ckpt);
    if (config.teacher_ckpt.empty()) {
      throw ConfigError("synthetic eval needs teacher_ckpt for the reference grid");
    }
    const PolynomialModel poly = to_polynomial(load_network(config.teacher_ckpt));
    metrics = evaluate(model, synthetic_grid_data(config, poly));
  }

  std::ofstream os(config.out_dir + "/metrics.csv");
  os.precision(17);
  os << "accuracy,mean_loss,mse,count\n";
  os << metrics.accuracy << "," << metrics.mean_loss << "," << metrics.mse << ","
     << metrics.count << "\n";
  std::cout << "accuracy=" << metrics.accuracy << " mean_loss=" << metrics.mean_loss
            << " mse=" << metrics.mse << " n=" << metrics.count << "\n";
  return 0;
}

int cmd_export_curve(ExperimentConfig config) {
  ensure_out_dir(config);
  if (config.teacher_ckpt.empty() || config.student_ckpt.empty()) {
    throw ConfigError("export-curve needs teacher_ckpt and student_ckpt");
  }
  write_config_echo(config);
  const Network teacher = load_network(config.teacher_ckpt);
  const Network student = load_network(config.student_ckpt);
  if (teacher.input_dim() != 1 || student.input_dim() != 1) {
    throw ConfigError("export-curve is for 1-D tasks; got input dims " +
                      std::to_string(teacher.input_dim()) + " and " +
                      std::to_string(student.input_dim()));
  }
  const int n = config.grid_points;
  std::vector<double> xs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    xs[static_cast<std::size_t>(i)] =
        config.interval_lo +
        (config.interval_hi - config.interval_lo) * static_cast<double>(i) / (n - 1);
  }
  const Tensor grid = Tensor::from_data({n, 1}, std::move(xs));
  const Tensor t_out = forward(teacher, grid);
  const Tensor s_out = forward(student, grid);
  const std::string path = config.out_dir + "/curve.csv";
  std::ofstream os(path);
  os.precision(17);
  os << "x,teacher,student,bkd\n";
  for (int i = 0; i < n; ++i) {
    const double diff = s_out.at(i, 0) - t_out.at(i, 0);
    os << grid.at(i, 0) << "," << t_out.at(i, 0) << "," << s_out.at(i, 0) << "," << diff * diff
       << "\n";
  }
  std::cout << "curve=" << path << " points=" << n << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    print_usage(std::cerr);
    return 1;
  }
  const std::string cmd = argv[1];
  if (cmd == "help" || cmd == "--help" || cmd == "-h") {
    print_usage(std::cout);
    return 0;
  }
  std::vector<std::string> args(argv + 2, argv + argc);
  try {
    const ExperimentConfig config = parse_args(args);
    if (cmd == "train-teacher") {
      return cmd_train_teacher(config);
    }
    if (cmd == "distill") {
      return cmd_distill(config);
    }
    if (cmd == "gen-aux") {
      return cmd_gen_aux(config);
    }
    if (cmd == "eval") {
      return cmd_eval(config);
    }
    if (cmd == "export-curve") {
      return cmd_export_curve(config);
    }
    std::cerr << "unknown subcommand '" << cmd << "'\n";
    print_usage(std::cerr);
    return 1;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 1;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 2;
  } catch (const CheckpointError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "numeric abort: " << err.what() << "\n";
    return 3;
  }
}
