#include "pointformer/cli.hpp"

#include "pointformer/gradcheck.hpp"
#include "pointformer/model.hpp"
#include "pointformer/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace pf::cli {
namespace {

namespace fs = std::filesystem;
using Scalar = double;

// ---------------------------------------------------------------------------
// Run configuration: everything a training run needs, addressable through
// "key = value" lines.  The same table drives parsing, unknown-key
// rejection, and the effective-config dump, so a dumped config always
// reloads to an identical run.

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  Index train_samples = 800;
  Index test_samples = 200;
  double noise = 0.02;

  RunConfig() {
    train.epochs = 30;
    train.batch_size = 11;
    train.optim.lr = 1e-3;
    train.optim.weight_decay = 1e-6;
  }
};

void apply_task_defaults(RunConfig& rc, Task task) {
  rc.model.task = task;
  if (task != Task::segmentation) return;
  rc.model.num_classes = 2;
  rc.model.num_categories = 4;
  rc.train.epochs = 20;
  rc.train.batch_size = 8;
  rc.train.optim.lr = 5e-3;
  rc.train.optim.weight_decay = 1e-4;
  rc.train_samples = 160;
  rc.test_samples = 40;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

Index parse_index(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw ConfigError("key " + key + ": not an integer: '" + text + "'");
  }
}

std::uint64_t parse_seed(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + ": not a non-negative integer: '" + text + "'");
  }
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + ": not a number: '" + text + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw ConfigError("key " + key + ": expected 0/1/true/false, got '" + text + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& text, F&& one) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(one(key, trim(item)));
  if (out.empty()) throw ConfigError("key " + key + ": empty list");
  return out;
}

Task parse_task(const std::string& key, const std::string& text) {
  if (text == "classification") return Task::classification;
  if (text == "segmentation") return Task::segmentation;
  throw ConfigError("key " + key + ": expected classification or segmentation, got '" + text + "'");
}

SelectionMode parse_selection(const std::string& key, const std::string& text) {
  if (text == "learned") return SelectionMode::learned;
  if (text == "fps") return SelectionMode::fps;
  if (text == "random") return SelectionMode::random;
  throw ConfigError("key " + key + ": expected learned, fps or random, got '" + text + "'");
}

GlobalMode parse_global_mode(const std::string& key, const std::string& text) {
  if (text == "msg") return GlobalMode::msg;
  if (text == "fps") return GlobalMode::fps;
  if (text == "nosample") return GlobalMode::nosample;
  throw ConfigError("key " + key + ": expected msg, fps or nosample, got '" + text + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_index_list(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string fmt_double_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt_double(v[i]);
  }
  return out;
}

struct KeyHandler {
  const char* key;
  std::string (*get)(const RunConfig&);
  void (*set)(RunConfig&, const std::string&);
};

const std::vector<KeyHandler>& key_table() {
  static const std::vector<KeyHandler> table = {
      {"task", [](const RunConfig& rc) { return std::string(to_string(rc.model.task)); },
       [](RunConfig& rc, const std::string& v) { rc.model.task = parse_task("task", v); }},
      {"n_points", [](const RunConfig& rc) { return std::to_string(rc.model.n_points); },
       [](RunConfig& rc, const std::string& v) { rc.model.n_points = parse_index("n_points", v); }},
      {"point_dim", [](const RunConfig& rc) { return std::to_string(rc.model.point_dim); },
       [](RunConfig& rc, const std::string& v) { rc.model.point_dim = parse_index("point_dim", v); }},
      {"model_dim", [](const RunConfig& rc) { return std::to_string(rc.model.d_model); },
       [](RunConfig& rc, const std::string& v) { rc.model.d_model = parse_index("model_dim", v); }},
      {"reduced_dim", [](const RunConfig& rc) { return std::to_string(rc.model.d_reduced); },
       [](RunConfig& rc, const std::string& v) { rc.model.d_reduced = parse_index("reduced_dim", v); }},
      {"seg_dim", [](const RunConfig& rc) { return std::to_string(rc.model.d_seg); },
       [](RunConfig& rc, const std::string& v) { rc.model.d_seg = parse_index("seg_dim", v); }},
      {"heads", [](const RunConfig& rc) { return std::to_string(rc.model.heads); },
       [](RunConfig& rc, const std::string& v) { rc.model.heads = parse_index("heads", v); }},
      {"num_sortnets", [](const RunConfig& rc) { return std::to_string(rc.model.num_sortnets); },
       [](RunConfig& rc, const std::string& v) { rc.model.num_sortnets = parse_index("num_sortnets", v); }},
      {"top_k", [](const RunConfig& rc) { return std::to_string(rc.model.k_selected); },
       [](RunConfig& rc, const std::string& v) { rc.model.k_selected = parse_index("top_k", v); }},
      {"reduced_point_set", [](const RunConfig& rc) { return std::to_string(rc.model.n_global); },
       [](RunConfig& rc, const std::string& v) { rc.model.n_global = parse_index("reduced_point_set", v); }},
      {"num_classes", [](const RunConfig& rc) { return std::to_string(rc.model.num_classes); },
       [](RunConfig& rc, const std::string& v) { rc.model.num_classes = parse_index("num_classes", v); }},
      {"num_categories", [](const RunConfig& rc) { return std::to_string(rc.model.num_categories); },
       [](RunConfig& rc, const std::string& v) { rc.model.num_categories = parse_index("num_categories", v); }},
      {"global_mode", [](const RunConfig& rc) { return std::string(to_string(rc.model.global_mode)); },
       [](RunConfig& rc, const std::string& v) { rc.model.global_mode = parse_global_mode("global_mode", v); }},
      {"local_only", [](const RunConfig& rc) { return std::string(rc.model.local_only ? "1" : "0"); },
       [](RunConfig& rc, const std::string& v) { rc.model.local_only = parse_bool("local_only", v); }},
      {"lg_layers", [](const RunConfig& rc) { return std::to_string(rc.model.lg_layers); },
       [](RunConfig& rc, const std::string& v) { rc.model.lg_layers = parse_index("lg_layers", v); }},
      {"local_layers", [](const RunConfig& rc) { return std::to_string(rc.model.local_layers); },
       [](RunConfig& rc, const std::string& v) { rc.model.local_layers = parse_index("local_layers", v); }},
      {"global_layers", [](const RunConfig& rc) { return std::to_string(rc.model.global_layers); },
       [](RunConfig& rc, const std::string& v) { rc.model.global_layers = parse_index("global_layers", v); }},
      {"sortnet_radius", [](const RunConfig& rc) { return fmt_double(rc.model.sortnet_radius); },
       [](RunConfig& rc, const std::string& v) { rc.model.sortnet_radius = parse_double("sortnet_radius", v); }},
      {"sortnet_ball_k", [](const RunConfig& rc) { return std::to_string(rc.model.sortnet_ball_k); },
       [](RunConfig& rc, const std::string& v) { rc.model.sortnet_ball_k = parse_index("sortnet_ball_k", v); }},
      {"msg_radii", [](const RunConfig& rc) { return fmt_double_list(rc.model.msg_radii); },
       [](RunConfig& rc, const std::string& v) {
         rc.model.msg_radii = parse_list<double>("msg_radii", v, parse_double);
       }},
      {"msg_samples", [](const RunConfig& rc) { return fmt_index_list(rc.model.msg_samples); },
       [](RunConfig& rc, const std::string& v) {
         rc.model.msg_samples = parse_list<Index>("msg_samples", v, parse_index);
       }},
      {"msg_scale_out", [](const RunConfig& rc) { return std::to_string(rc.model.msg_scale_out); },
       [](RunConfig& rc, const std::string& v) { rc.model.msg_scale_out = parse_index("msg_scale_out", v); }},
      {"ln_eps", [](const RunConfig& rc) { return fmt_double(rc.model.ln_eps); },
       [](RunConfig& rc, const std::string& v) { rc.model.ln_eps = parse_double("ln_eps", v); }},
      {"dropout", [](const RunConfig& rc) { return fmt_double(rc.train.dropout); },
       [](RunConfig& rc, const std::string& v) {
         rc.train.dropout = parse_double("dropout", v);
         rc.model.dropout = rc.train.dropout;
       }},
      {"epochs", [](const RunConfig& rc) { return std::to_string(rc.train.epochs); },
       [](RunConfig& rc, const std::string& v) { rc.train.epochs = parse_index("epochs", v); }},
      {"batch_size", [](const RunConfig& rc) { return std::to_string(rc.train.batch_size); },
       [](RunConfig& rc, const std::string& v) { rc.train.batch_size = parse_index("batch_size", v); }},
      {"lr", [](const RunConfig& rc) { return fmt_double(rc.train.optim.lr); },
       [](RunConfig& rc, const std::string& v) { rc.train.optim.lr = parse_double("lr", v); }},
      {"beta1", [](const RunConfig& rc) { return fmt_double(rc.train.optim.beta1); },
       [](RunConfig& rc, const std::string& v) { rc.train.optim.beta1 = parse_double("beta1", v); }},
      {"beta2", [](const RunConfig& rc) { return fmt_double(rc.train.optim.beta2); },
       [](RunConfig& rc, const std::string& v) { rc.train.optim.beta2 = parse_double("beta2", v); }},
      {"adam_eps", [](const RunConfig& rc) { return fmt_double(rc.train.optim.eps); },
       [](RunConfig& rc, const std::string& v) { rc.train.optim.eps = parse_double("adam_eps", v); }},
      {"weight_decay", [](const RunConfig& rc) { return fmt_double(rc.train.optim.weight_decay); },
       [](RunConfig& rc, const std::string& v) { rc.train.optim.weight_decay = parse_double("weight_decay", v); }},
      {"augment", [](const RunConfig& rc) { return std::string(rc.train.augment ? "1" : "0"); },
       [](RunConfig& rc, const std::string& v) { rc.train.augment = parse_bool("augment", v); }},
      {"selection", [](const RunConfig& rc) { return std::string(to_string(rc.train.selection)); },
       [](RunConfig& rc, const std::string& v) { rc.train.selection = parse_selection("selection", v); }},
      {"seed", [](const RunConfig& rc) { return std::to_string(rc.train.seed); },
       [](RunConfig& rc, const std::string& v) { rc.train.seed = parse_seed("seed", v); }},
      {"train_samples", [](const RunConfig& rc) { return std::to_string(rc.train_samples); },
       [](RunConfig& rc, const std::string& v) { rc.train_samples = parse_index("train_samples", v); }},
      {"test_samples", [](const RunConfig& rc) { return std::to_string(rc.test_samples); },
       [](RunConfig& rc, const std::string& v) { rc.test_samples = parse_index("test_samples", v); }},
      {"noise", [](const RunConfig& rc) { return fmt_double(rc.noise); },
       [](RunConfig& rc, const std::string& v) { rc.noise = parse_double("noise", v); }},
  };
  return table;
}

const KeyHandler* find_key(const std::string& key) {
  for (const auto& h : key_table()) {
    if (key == h.key) return &h;
  }
  return nullptr;
}

void apply_key(RunConfig& rc, const std::string& key, const std::string& value) {
  const KeyHandler* h = find_key(key);
  if (!h) throw ConfigError("unknown config key: " + key);
  h->set(rc, value);
}

std::string dump_config(const RunConfig& rc) {
  std::string out;
  for (const auto& h : key_table()) {
    out += h.key;
    out += " = ";
    out += h.get(rc);
    out += "\n";
  }
  return out;
}

// One "key = value" line; '#' starts a comment, blank lines are skipped.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  Index lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string text = trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    pairs.emplace_back(key, value);
  }
  return pairs;
}

std::pair<std::string, std::string> split_set_pair(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + text + "'");
  const std::string key = trim(text.substr(0, eq));
  const std::string value = trim(text.substr(eq + 1));
  if (key.empty() || value.empty()) {
    throw ConfigError("--set expects KEY=VALUE, got '" + text + "'");
  }
  return {key, value};
}

// Defaults, then task defaults, then config file, then --set pairs, then
// named flags (already folded into `sets` by the caller).  The task is
// scanned out of all three layers first so switching it swaps the default
// block before any explicit key lands on top.
RunConfig build_run_config(const std::string& config_path,
                           const std::vector<std::string>& sets,
                           const std::string& task_flag) {
  std::vector<std::pair<std::string, std::string>> file_pairs;
  if (!config_path.empty()) file_pairs = read_config_file(config_path);

  std::vector<std::pair<std::string, std::string>> set_pairs;
  for (const auto& s : sets) set_pairs.push_back(split_set_pair(s));

  std::string task_text = task_flag;
  if (task_text.empty()) {
    for (const auto& [k, v] : file_pairs) {
      if (k == "task") task_text = v;
    }
    for (const auto& [k, v] : set_pairs) {
      if (k == "task") task_text = v;
    }
  }

  RunConfig rc;
  if (!task_text.empty()) apply_task_defaults(rc, parse_task("task", task_text));
  for (const auto& [k, v] : file_pairs) apply_key(rc, k, v);
  for (const auto& [k, v] : set_pairs) apply_key(rc, k, v);
  return rc;
}

SplitData<Scalar> make_synthetic(const RunConfig& rc, bool rotate) {
  if (rc.model.task == Task::segmentation) {
    return make_segmentation_dataset<Scalar>(rc.train_samples, rc.test_samples, rc.model.n_points,
                                             rc.noise, rc.train.seed, rotate);
  }
  return make_classification_dataset<Scalar>(rc.train_samples, rc.test_samples, rc.model.n_points,
                                             rc.noise, rc.train.seed, rotate);
}

void check_data_matches(const ModelConfig& cfg, const std::vector<Sample<Scalar>>& data,
                        const char* what) {
  for (const auto& s : data) {
    if (s.cloud.dim() != cfg.point_dim) {
      throw ConfigError(std::string(what) + ": checkpoint expects point_dim " +
                        std::to_string(cfg.point_dim) + " but data has dimension " +
                        std::to_string(s.cloud.dim()));
    }
    if (cfg.task == Task::classification && (s.label < 0 || s.label >= cfg.num_classes)) {
      throw ConfigError(std::string(what) + ": label " + std::to_string(s.label) +
                        " outside the checkpoint's " + std::to_string(cfg.num_classes) +
                        " classes");
    }
    if (cfg.task == Task::segmentation && s.part_labels.empty()) {
      throw DataError(std::string(what) + ": segmentation eval needs per-point part labels");
    }
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string task;
  std::string data_manifest;
  std::string test_manifest;
  bool synthetic = false;
  bool rotate = false;
  std::string out_dir = ".";
  std::string checkpoint_path;
  std::string metrics_path;
  bool dump_only = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& args) {
  RunConfig rc = build_run_config(args.config_path, args.sets, args.task);
  if (args.dump_only) {
    std::fputs(dump_config(rc).c_str(), stdout);
    return 0;
  }
  if (args.synthetic == !args.data_manifest.empty()) {
    throw ConfigError("train: pass exactly one of --synthetic or --data");
  }

  SplitData<Scalar> data;
  if (args.synthetic) {
    data = make_synthetic(rc, args.rotate);
  } else {
    data.train = load_dataset<Scalar>(args.data_manifest);
    if (!args.test_manifest.empty()) data.test = load_dataset<Scalar>(args.test_manifest);
    check_data_matches(rc.model, data.train, "train");
    check_data_matches(rc.model, data.test, "train");
  }

  fs::create_directories(args.out_dir);
  TrainConfig tc = rc.train;
  tc.verbose = !args.quiet;
  tc.checkpoint_path =
      args.checkpoint_path.empty() ? (fs::path(args.out_dir) / "model.ckpt").string()
                                   : args.checkpoint_path;
  tc.metrics_path = args.metrics_path.empty() ? (fs::path(args.out_dir) / "metrics.tsv").string()
                                              : args.metrics_path;
  {
    const std::string cfg_path = (fs::path(args.out_dir) / "effective_config.txt").string();
    std::ofstream out(cfg_path);
    if (!out) throw DataError(cfg_path + ": cannot open for writing");
    out << dump_config(rc);
    if (!out) throw DataError(cfg_path + ": write failed");
  }

  ModelParams<Scalar> params = init_params<Scalar>(rc.model, rc.train.seed);
  if (!args.quiet) {
    std::printf("task\t%s\nparameters\t%zu\ntrain\t%zu\ntest\t%zu\n", to_string(rc.model.task),
                params.parameter_count(), data.train.size(), data.test.size());
  }
  TrainResult res = train_loop(params, data.train, data.test, tc);
  if (!res.history.empty()) {
    const EpochMetrics& last = res.history.back();
    if (params.cfg.task == Task::segmentation) {
      std::printf("final\taccuracy %.4f\tmiou %.4f\n", last.accuracy, last.miou);
    } else {
      std::printf("final\taccuracy %.4f\n", last.accuracy);
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint_path;
  std::string data_manifest;
  bool synthetic = false;
  bool rotate = false;
  bool rotate_data = false;
  bool permute = false;
  std::string selection = "learned";
  std::uint64_t seed = 1;
  Index test_samples = -1;
  double noise = 0.02;
};

int cmd_eval(const EvalArgs& args) {
  ModelParams<Scalar> params = load_checkpoint<Scalar>(args.checkpoint_path);
  if (args.synthetic == !args.data_manifest.empty()) {
    throw ConfigError("eval: pass exactly one of --synthetic or --data");
  }

  std::vector<Sample<Scalar>> data;
  if (args.synthetic) {
    RunConfig rc;
    apply_task_defaults(rc, params.cfg.task);
    rc.model = params.cfg;
    rc.noise = args.noise;
    rc.train.seed = args.seed;
    if (args.test_samples >= 0) rc.test_samples = args.test_samples;
    rc.train_samples = 0;
    data = std::move(make_synthetic(rc, args.rotate_data).test);
  } else {
    data = load_dataset<Scalar>(args.data_manifest);
  }
  check_data_matches(params.cfg, data, "eval");

  EvalOptions opts;
  opts.selection = parse_selection("selection", args.selection);
  opts.seed = args.seed;
  opts.rotate = args.rotate;
  opts.permute = args.permute;
  const EvalReport rep = evaluate(params, data, opts);

  std::printf("samples\t%zu\n", data.size());
  std::printf("loss\t%.6f\n", rep.loss);
  std::printf("accuracy\t%.4f\n", rep.accuracy);
  if (params.cfg.task == Task::segmentation) {
    std::printf("miou\t%.4f\n", rep.miou);
  } else {
    std::printf("miou\t-\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string checkpoint_path;
  std::string input_path;
  Index category = -1;
  bool normalize = false;
};

int cmd_predict(const PredictArgs& args) {
  ModelParams<Scalar> params = load_checkpoint<Scalar>(args.checkpoint_path);
  Sample<Scalar> sample = load_cloud<Scalar>(args.input_path);
  if (args.normalize) sample.cloud = normalize_unit_sphere(std::move(sample.cloud));
  if (sample.cloud.dim() != params.cfg.point_dim) {
    throw ConfigError("predict: checkpoint expects point_dim " +
                      std::to_string(params.cfg.point_dim) + " but input has dimension " +
                      std::to_string(sample.cloud.dim()));
  }

  Tape<Scalar> t;
  EvalMode mode;
  if (params.cfg.task == Task::segmentation) {
    const Index category = args.category >= 0 ? args.category : sample.category;
    auto fwd = segment_forward(t, sample.cloud, category, params, mode);
    const Matrix2D<Scalar>& logits = t.value(fwd.logits);
    for (Index i = 0; i < logits.rows(); ++i) {
      Index best = 0;
      logits.row(i).maxCoeff(&best);
      std::printf("part\t%lld\n", static_cast<long long>(best));
    }
  } else {
    auto fwd = classify_forward(t, sample.cloud, params, mode);
    const Matrix2D<Scalar>& logits = t.value(fwd.logits);
    Index best = 0;
    logits.row(0).maxCoeff(&best);
    std::printf("label\t%lld\n", static_cast<long long>(best));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// dump-selections

struct DumpArgs {
  std::string checkpoint_path;
  std::string input_path;
  bool synthetic = false;
  Index sample_index = 0;
  std::uint64_t seed = 1;
  std::uint64_t rotate_seed = 0;  // 0: no rotation
  double noise = 0.02;
  std::string out_dir = ".";
};

int cmd_dump_selections(const DumpArgs& args) {
  ModelParams<Scalar> params = load_checkpoint<Scalar>(args.checkpoint_path);
  if (args.synthetic == !args.input_path.empty()) {
    throw ConfigError("dump-selections: pass exactly one of --synthetic or --input");
  }

  Sample<Scalar> sample;
  if (args.synthetic) {
    if (args.sample_index < 0) throw ConfigError("dump-selections: sample index must be >= 0");
    const std::uint64_t i = static_cast<std::uint64_t>(args.sample_index);
    if (params.cfg.task == Task::segmentation) {
      sample = generate_synthetic<Scalar>(ShapeKind::cylinder, params.cfg.n_points, args.noise,
                                          derive_seed(args.seed, 0x5E57u, i));
      sample.label = 0;
      sample.category = static_cast<Index>(ShapeKind::cylinder);
    } else {
      const auto kind = static_cast<ShapeKind>(args.sample_index % kNumShapeKinds);
      sample = generate_synthetic<Scalar>(kind, params.cfg.n_points, args.noise,
                                          derive_seed(args.seed, 0x7E57u, i));
    }
    sample.cloud = normalize_unit_sphere(std::move(sample.cloud));
  } else {
    sample = load_cloud<Scalar>(args.input_path);
  }
  if (args.rotate_seed != 0) {
    RngStream rot_rng(args.rotate_seed);
    sample = apply_rotation(std::move(sample), random_rotation<Scalar>(rot_rng));
  }
  if (sample.cloud.dim() != params.cfg.point_dim) {
    throw ConfigError("dump-selections: checkpoint expects point_dim " +
                      std::to_string(params.cfg.point_dim) + " but input has dimension " +
                      std::to_string(sample.cloud.dim()));
  }

  Tape<Scalar> t;
  EvalMode mode;
  ForwardOut<Scalar> fwd =
      params.cfg.task == Task::segmentation
          ? segment_forward(t, sample.cloud, sample.category, params, mode)
          : classify_forward(t, sample.cloud, params, mode);

  fs::create_directories(args.out_dir);
  const std::string cloud_path = (fs::path(args.out_dir) / "cloud.txt").string();
  save_cloud(cloud_path, sample, params.cfg.num_classes);

  for (std::size_t m = 0; m < fwd.selections.size(); ++m) {
    const std::string path =
        (fs::path(args.out_dir) / ("selection_" + std::to_string(m) + ".txt")).string();
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    for (const Index idx : fwd.selections[m]) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%lld %.17g %.17g %.17g\n", static_cast<long long>(idx),
                    sample.cloud.data(idx, 0), sample.cloud.data(idx, 1),
                    sample.cloud.data(idx, 2));
      out << buf;
    }
    if (!out) throw DataError(path + ": write failed");
  }
  std::printf("wrote %zu selection files of %lld points to %s\n", fwd.selections.size(),
              static_cast<long long>(params.cfg.k_selected), args.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  Index reps = 5;
  Index d_model = 64;
  Index heads = 4;
};

double median_seconds(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double fit_exponent(const std::vector<double>& ns, const std::vector<double>& ts) {
  const std::size_t n = ns.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = std::log(ns[i]);
    const double y = std::log(ts[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

int cmd_bench(const BenchArgs& args) {
  if (args.reps < 1) throw ConfigError("bench: reps must be at least 1");
  const std::vector<Index> sizes = {128, 256, 512, 1024};
  RngStream rng(7u);
  MhaBlockParams<Scalar> block("bench", args.d_model, args.heads, {2 * args.d_model});
  {
    RngStream init(3u);
    block.visit([&](Parameter<Scalar>& p) {
      for (Index r = 0; r < p.value.rows(); ++r) {
        for (Index c = 0; c < p.value.cols(); ++c) p.value(r, c) += 0.05 * init.gaussian();
      }
    });
  }

  std::vector<double> ns, attn_ts, block_ts;
  std::printf("n\tattention_seconds\tblock_seconds\n");
  for (const Index n : sizes) {
    Matrix2D<Scalar> x(n, args.d_model);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < args.d_model; ++c) x(r, c) = rng.gaussian();
    }
    auto time_one = [&](auto&& body) {
      std::vector<double> times;
      for (Index rep = 0; rep <= args.reps; ++rep) {
        const auto start = std::chrono::steady_clock::now();
        body();
        const auto stop = std::chrono::steady_clock::now();
        if (rep == 0) continue;  // warmup
        times.push_back(std::chrono::duration<double>(stop - start).count());
      }
      return median_seconds(std::move(times));
    };
    const double attn_s = time_one([&] {
      Tape<Scalar> t;
      Var<Scalar> q = t.constant(x);
      volatile double sink = t.value(attention(t, q, q, q)).sum();
      (void)sink;
    });
    EvalMode mode;
    const double block_s = time_one([&] {
      Tape<Scalar> t;
      Var<Scalar> q = t.constant(x);
      volatile double sink = t.value(self_mha(t, q, block, Scalar(1e-5), mode)).sum();
      (void)sink;
    });
    ns.push_back(double(n));
    attn_ts.push_back(attn_s);
    block_ts.push_back(block_s);
    std::printf("%lld\t%.6f\t%.6f\n", static_cast<long long>(n), attn_s, block_s);
  }
  std::printf("attention_exponent\t%.3f\n", fit_exponent(ns, attn_ts));
  std::printf("block_exponent\t%.3f\n", fit_exponent(ns, block_ts));
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double eps = 1e-5;
  double tolerance = 1e-4;
  bool corrupt = false;
};

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.task = Task::classification;
  cfg.n_points = 8;
  cfg.point_dim = 3;
  cfg.d_model = 16;
  cfg.d_reduced = 8;
  cfg.d_seg = 8;
  cfg.heads = 2;
  cfg.num_sortnets = 1;
  cfg.k_selected = 4;
  cfg.n_global = 4;
  cfg.num_classes = 3;
  cfg.num_categories = 4;
  cfg.lg_layers = 1;
  cfg.local_layers = 1;
  cfg.global_layers = 1;
  cfg.sortnet_radius = 0.8;
  cfg.sortnet_ball_k = 4;
  cfg.msg_radii = {0.8};
  cfg.msg_samples = {4};
  cfg.msg_scale_out = 8;
  cfg.head_hidden = {16};
  cfg.score_hidden = {8};
  return cfg;
}

int cmd_gradcheck(const GradcheckArgs& args) {
  const ModelConfig cfg = tiny_config();
  ModelParams<Scalar> params = init_params<Scalar>(cfg, args.seed);
  {
    // Fresh parameters sit exactly on ReLU kinks (zero biases meet the
    // all-zero relative coordinates of self-grouped rows), where central
    // differences disagree with any one-sided derivative.  Jitter moves
    // the check to a generic point.
    RngStream jitter(derive_seed(args.seed, 0x31F7u));
    params.visit([&](Parameter<Scalar>& p) {
      for (Index r = 0; r < p.value.rows(); ++r) {
        for (Index c = 0; c < p.value.cols(); ++c) p.value(r, c) += 0.05 * jitter.gaussian();
      }
    });
  }
  std::vector<Parameter<Scalar>*> plist = params.parameter_list();

  RngStream rng(derive_seed(args.seed, 0x9CADu));
  Matrix2D<Scalar> pts(cfg.n_points, 3);
  for (Index r = 0; r < pts.rows(); ++r) {
    for (Index c = 0; c < 3; ++c) pts(r, c) = rng.gaussian();
  }
  PointCloud<Scalar> cloud{normalize_unit_sphere(PointCloud<Scalar>{std::move(pts)}).data};
  const Index label = 1;

  auto loss_fn = [&](bool accumulate) -> Scalar {
    Tape<Scalar> t;
    EvalMode mode;
    auto fwd = classify_forward(t, cloud, params, mode);
    Var<Scalar> loss = cross_entropy(t, fwd.logits, label);
    const Scalar value = t.value(loss)(0, 0);
    if (accumulate) {
      t.backward(loss);
      if (args.corrupt) plist.front()->grad(0, 0) += 0.5;
    }
    return value;
  };

  const GradCheckReport rep = check_gradients<Scalar>(loss_fn, plist, args.eps);
  std::printf("entries\t%zu\n", rep.entries);
  std::printf("max_rel_err\t%.3e\n", rep.max_rel_err);
  std::printf("worst_param\t%s (%lld,%lld)\n", rep.worst_param.c_str(),
              static_cast<long long>(rep.worst_row), static_cast<long long>(rep.worst_col));
  std::printf("autodiff\t%.10e\nnumeric\t%.10e\n", rep.autodiff, rep.numeric);
  const bool ok = rep.max_rel_err < args.tolerance;
  std::printf("gradcheck\t%s (tolerance %.1e)\n", ok ? "PASS" : "FAIL", args.tolerance);
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// ablation: train the three selection variants on identical data and print
// their test accuracies.

struct AblationArgs {
  Index epochs = 10;
  Index train_samples = 200;
  Index test_samples = 80;
  std::uint64_t seed = 1;
  double noise = 0.02;
  bool rotate = false;
  bool full_pipeline = false;
  std::vector<std::string> sets;
  bool quiet = true;
};

// Compares the three selection mechanisms where selection is all the model
// has: the selection branch feeds the head directly, so accuracy tracks
// which points were kept.  --full-pipeline ablates inside the complete
// model instead.
int cmd_ablation(const AblationArgs& args) {
  RunConfig rc = build_run_config("", args.sets, "classification");
  rc.model.local_only = !args.full_pipeline;
  rc.train.epochs = args.epochs;
  rc.train.seed = args.seed;
  rc.train_samples = args.train_samples;
  rc.test_samples = args.test_samples;
  rc.noise = args.noise;

  const SplitData<Scalar> data = make_synthetic(rc, args.rotate);
  const SelectionMode modes[] = {SelectionMode::learned, SelectionMode::fps,
                                 SelectionMode::random};
  for (const SelectionMode mode : modes) {
    ModelParams<Scalar> params = init_params<Scalar>(rc.model, rc.train.seed);
    TrainConfig tc = rc.train;
    tc.selection = mode;
    tc.verbose = !args.quiet;
    tc.checkpoint_path.clear();
    tc.metrics_path.clear();
    TrainResult res = train_loop(params, data.train, data.test, tc);
    const double acc = res.history.empty() ? 0.0 : res.history.back().accuracy;
    std::printf("%s\t%.4f\n", to_string(mode), acc);
    std::fflush(stdout);
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"point transformer toolkit: attention over point sets with learned top-k selection"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", train_args.config_path, "key = value config file");
  train->add_option("--set", train_args.sets, "override a config key (KEY=VALUE)");
  train->add_option("--task", train_args.task, "classification or segmentation");
  train->add_flag("--synthetic", train_args.synthetic, "generate the synthetic benchmark data");
  train->add_option("--data", train_args.data_manifest, "training manifest");
  train->add_option("--test-data", train_args.test_manifest, "held-out manifest");
  train->add_flag("--rotate", train_args.rotate, "rotate generated training data");
  train->add_option("--out", train_args.out_dir, "output directory");
  train->add_option("--checkpoint", train_args.checkpoint_path, "checkpoint path override");
  train->add_option("--metrics", train_args.metrics_path, "metric log path override");
  train->add_flag("--dump-config", train_args.dump_only, "print the effective config and exit");
  train->add_flag("--quiet", train_args.quiet, "suppress per-epoch output");

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_args.checkpoint_path, "checkpoint to evaluate")
      ->required();
  eval->add_option("--data", eval_args.data_manifest, "evaluation manifest");
  eval->add_flag("--synthetic", eval_args.synthetic, "regenerate the synthetic test split");
  eval->add_flag("--rotate", eval_args.rotate, "random rotation per sample");
  eval->add_flag("--rotate-data", eval_args.rotate_data, "regenerate the pose-diverse split");
  eval->add_flag("--permute", eval_args.permute, "random point order per sample");
  eval->add_option("--selection", eval_args.selection, "learned, fps or random");
  eval->add_option("--seed", eval_args.seed, "seed for rotation/permutation/data");
  eval->add_option("--test-samples", eval_args.test_samples, "synthetic test split size");
  eval->add_option("--noise", eval_args.noise, "synthetic noise level");

  PredictArgs predict_args;
  CLI::App* predict = app.add_subcommand("predict", "predict labels for one cloud file");
  predict->add_option("--checkpoint", predict_args.checkpoint_path, "checkpoint")->required();
  predict->add_option("--input", predict_args.input_path, "cloud file")->required();
  predict->add_option("--category", predict_args.category, "segmentation category override");
  predict->add_flag("--normalize", predict_args.normalize, "normalize the cloud first");

  DumpArgs dump_args;
  CLI::App* dump = app.add_subcommand("dump-selections", "write the points each SortNet kept");
  dump->add_option("--checkpoint", dump_args.checkpoint_path, "checkpoint")->required();
  dump->add_option("--input", dump_args.input_path, "cloud file");
  dump->add_flag("--synthetic", dump_args.synthetic, "use a synthetic test sample");
  dump->add_option("--sample-index", dump_args.sample_index, "synthetic sample index");
  dump->add_option("--seed", dump_args.seed, "synthetic data seed");
  dump->add_option("--rotate-seed", dump_args.rotate_seed, "rotate input by this seed (0: off)");
  dump->add_option("--noise", dump_args.noise, "synthetic noise level");
  dump->add_option("--out", dump_args.out_dir, "output directory");

  BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("bench", "time the attention stage across input sizes");
  bench->add_option("--reps", bench_args.reps, "repetitions per size");
  bench->add_option("--d-model", bench_args.d_model, "feature width");
  bench->add_option("--heads", bench_args.heads, "attention heads");

  GradcheckArgs grad_args;
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--seed", grad_args.seed, "parameter init seed");
  grad->add_option("--eps", grad_args.eps, "finite-difference step");
  grad->add_option("--tolerance", grad_args.tolerance, "max relative error allowed");
  grad->add_flag("--corrupt", grad_args.corrupt, "corrupt one gradient (self-test; must fail)");

  AblationArgs abl_args;
  CLI::App* abl = app.add_subcommand("ablation", "compare learned/fps/random selection");
  abl->add_option("--epochs", abl_args.epochs, "epochs per variant");
  abl->add_option("--train-samples", abl_args.train_samples, "training set size");
  abl->add_option("--test-samples", abl_args.test_samples, "test set size");
  abl->add_option("--seed", abl_args.seed, "shared seed");
  abl->add_option("--noise", abl_args.noise, "synthetic noise level");
  abl->add_flag("--rotate", abl_args.rotate, "rotate generated data");
  abl->add_flag("--full-pipeline", abl_args.full_pipeline,
                "ablate inside the complete model instead of the selection-only pipeline");
  abl->add_option("--set", abl_args.sets, "override a config key (KEY=VALUE)");
  abl->add_flag("!--verbose", abl_args.quiet, "print per-epoch lines");

  // Named flags that feed the shared key table are folded into --set pairs
  // so the precedence is uniform: config file, then --set, then flags.
  std::string train_epochs, train_batch, train_lr, train_wd, train_seed, train_selection,
      train_global_mode, train_dropout, train_train_samples, train_test_samples, train_noise,
      train_n_points, train_augment;
  train->add_option("--epochs", train_epochs, "training epochs");
  train->add_option("--batch-size", train_batch, "batch size");
  train->add_option("--lr", train_lr, "learning rate");
  train->add_option("--weight-decay", train_wd, "decoupled weight decay");
  train->add_option("--seed", train_seed, "run seed");
  train->add_option("--selection", train_selection, "learned, fps or random");
  train->add_option("--global-mode", train_global_mode, "msg, fps or nosample");
  train->add_option("--dropout", train_dropout, "dropout rate");
  train->add_option("--train-samples", train_train_samples, "synthetic training set size");
  train->add_option("--test-samples", train_test_samples, "synthetic test set size");
  train->add_option("--noise", train_noise, "synthetic noise level");
  train->add_option("--n-points", train_n_points, "points per cloud");
  train->add_option("--augment", train_augment, "augment training data (0/1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (*train) {
      auto fold = [&](const char* key, const std::string& value) {
        if (!value.empty()) train_args.sets.push_back(std::string(key) + "=" + value);
      };
      fold("epochs", train_epochs);
      fold("batch_size", train_batch);
      fold("lr", train_lr);
      fold("weight_decay", train_wd);
      fold("seed", train_seed);
      fold("selection", train_selection);
      fold("global_mode", train_global_mode);
      fold("dropout", train_dropout);
      fold("train_samples", train_train_samples);
      fold("test_samples", train_test_samples);
      fold("noise", train_noise);
      fold("n_points", train_n_points);
      fold("augment", train_augment);
      return cmd_train(train_args);
    }
    if (*eval) return cmd_eval(eval_args);
    if (*predict) return cmd_predict(predict_args);
    if (*dump) return cmd_dump_selections(dump_args);
    if (*bench) return cmd_bench(bench_args);
    if (*grad) return cmd_gradcheck(grad_args);
    if (*abl) return cmd_ablation(abl_args);
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace pf::cli
