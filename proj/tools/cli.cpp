#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hydet/checkpoint.hpp"
#include "hydet/config.hpp"
#include "hydet/data.hpp"
#include "hydet/error.hpp"
#include "hydet/image.hpp"
#include "hydet/model.hpp"
#include "hydet/postprocess.hpp"
#include "hydet/trainer.hpp"

namespace hydet::cli {

namespace fs = std::filesystem;

namespace {

// Thrown for a failure that already carries its exit code.
struct Exit {
  int code;
  std::string kind, message;
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Exit{kFailure, "io", "cannot write " + p.string()};
}

// Layered key-value view: defaults < config file < flags.
struct RunConfig {
  KeyValueConfig kv;

  void load_file(const std::string& path) {
    if (!path.empty()) kv.merge(KeyValueConfig::load(path));
  }
  void apply_sets(const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
  }
  template <typename V>
  void flag(const std::string& key, const V& v, bool given) {
    if (!given) return;
    std::ostringstream os;
    os.precision(17);
    os << v;
    kv.set(key, os.str());
  }
};

std::unique_ptr<Detector<float>> model_from(const std::string& weights, const std::string& config_path,
                                            CheckpointInfo* info = nullptr) {
  if (!weights.empty()) return load_checkpoint(weights, info);
  KeyValueConfig kv;
  if (!config_path.empty()) kv = KeyValueConfig::load(config_path);
  return std::make_unique<Detector<float>>(ModelConfig::from_kv(kv));
}

std::vector<std::string> names_for(const std::string& manifest_path, int nc) {
  std::vector<std::string> names;
  if (!manifest_path.empty()) names = load_dataset(manifest_path).class_names;
  names.resize(static_cast<std::size_t>(std::max<int>(nc, static_cast<int>(names.size()))));
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (names[c].empty()) names[c] = "class_" + std::to_string(c);
  }
  return names;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::uint64_t seed = 0;
  int epochs = 0, batch = 0, img = 0;
  long long max_iters = 0;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a, CLI::App& sub, std::ostream& out) {
  RunConfig rc;
  rc.load_file(a.config);
  rc.apply_sets(a.sets);
  rc.flag("data", a.data, !a.data.empty());
  rc.flag("out_dir", a.out, !a.out.empty());
  rc.flag("seed", a.seed, sub.count("--seed") > 0);
  rc.flag("init_seed", a.seed, sub.count("--seed") > 0);
  rc.flag("epochs", a.epochs, sub.count("--epochs") > 0);
  rc.flag("batch_size", a.batch, sub.count("--batch") > 0);
  rc.flag("image_size", a.img, sub.count("--img") > 0);
  rc.flag("max_iters", a.max_iters, sub.count("--max-iters") > 0);
  if (!rc.kv.has("data")) throw ConfigError("no dataset given (--data or 'data' in the config file)");
  if (!rc.kv.has("out_dir")) rc.kv.set("out_dir", "runs/train");
  if (!rc.kv.has("input_size") && rc.kv.has("image_size")) rc.kv.set("input_size", rc.kv.get("image_size"));

  TrainConfig tc = TrainConfig::from_kv(rc.kv);
  ModelConfig mc = ModelConfig::from_kv(rc.kv);
  const DatasetManifest data = load_dataset(rc.kv.get("data"));
  if (!rc.kv.has("num_classes")) {
    mc.num_classes = data.num_classes();
    mc.validate();
  }

  // Fully resolved view, echoed verbatim.
  KeyValueConfig resolved;
  resolved.set("data", rc.kv.get("data"));
  resolved.merge(mc.to_kv());
  resolved.merge(tc.to_kv());
  fs::create_directories(tc.out_dir);
  write_text(fs::path(tc.out_dir) / "config.echo", resolved.to_string());

  Detector<float> model(mc);
  out << "training " << count_params(model) << " parameters on " << data.split(tc.train_split).size()
      << " images for " << tc.epochs << " epochs\n";
  TrainCallbacks cb;
  cb.on_validation = [&](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %4d  iter %7lld  P %.3f  R %.3f  mAP50 %.3f  mAP50-95 %.3f\n", r.epoch,
                  static_cast<long long>(r.iteration), r.precision, r.recall, r.map50, r.map50_95);
    out << line << std::flush;
    return true;
  };
  const TrainLog log = train(model, data, tc, cb);
  if (!log.stop_reason.empty()) out << "stopped: " << log.stop_reason << '\n';
  if (log.best_index >= 0) {
    const auto& b = log.validations[static_cast<std::size_t>(log.best_index)];
    out << "best mAP50-95 " << b.map50_95 << " at epoch " << b.epoch << '\n';
  }
  out << "run directory: " << tc.out_dir << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string weights, data, split = "val", out = ".";
  double conf = 0.001, iou = 0.45;
  double pr_conf = -1;
  int img = 0, batch = 8, bench = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  auto model = load_checkpoint(a.weights);
  const DatasetManifest data = load_dataset(a.data);
  EvalConfig ec;
  ec.split = a.split;
  ec.image_size = a.img > 0 ? a.img : model->config().input_size;
  ec.batch_size = a.batch;
  ec.post.conf_threshold = a.conf;
  ec.post.iou_threshold = a.iou;
  if (a.pr_conf >= 0) ec.metrics.pr_conf = a.pr_conf;
  ec.bench_iterations = a.bench;
  if (data.split(a.split).empty()) {
    throw DatasetError(DatasetErrc::empty_split, "split '" + a.split + "' has no images");
  }
  const EvalReport rep = evaluate(*model, data, ec);
  out << rep.text_table(data.class_names);
  write_text(fs::path(a.out) / "report.csv", EvalReport::csv_header() + '\n' + rep.csv_row() + '\n');
  write_text(fs::path(a.out) / "confusion_matrix.csv", rep.confusion_csv(data.class_names));
  return kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string weights, input, data, save_txt, save_img;
  double conf = 0.25, iou = 0.45;
  int img = 0;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  auto model = load_checkpoint(a.weights);
  const int size = a.img > 0 ? a.img : model->config().input_size;
  const auto names = names_for(a.data, model->config().num_classes);

  std::vector<fs::path> inputs;
  const fs::path in(a.input);
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.is_regular_file() && is_image_file(e.path())) inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::exists(in)) {
    inputs.push_back(in);
  } else {
    throw Exit{kUndecodableInput, "input", "no such input: " + a.input};
  }

  PostprocessOptions post;
  post.conf_threshold = a.conf;
  post.iou_threshold = a.iou;
  model->set_mode(NormMode::eval);
  NoGradGuard no_grad;
  for (const auto& path : inputs) {
    Image src = load_image(path.string());
    auto [lb, tf] = letterbox(src, size);
    auto x = Tensor<float>::from_data({1, 3, size, size}, lb.data);
    const auto dets = postprocess(model->forward(x), size, size, post)[0];
    out << "image " << path.string() << " (" << src.width << "x" << src.height << "): " << dets.size()
        << " detections\n";
    std::string txt;
    for (const auto& d : dets) {
      Box b = tf.to_source(d.box);
      b = {std::clamp(b.x1, 0.0, double(src.width)), std::clamp(b.y1, 0.0, double(src.height)),
           std::clamp(b.x2, 0.0, double(src.width)), std::clamp(b.y2, 0.0, double(src.height))};
      char line[256];
      std::snprintf(line, sizeof line, "  %-16s %.4f  %.1f %.1f %.1f %.1f\n", names[d.class_id].c_str(), d.score,
                    b.x1, b.y1, b.x2, b.y2);
      out << line;
      if (b.width() > 0 && b.height() > 0) {
        const BBox c = to_center(b);
        std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f\n", d.class_id, c.cx / src.width,
                      c.cy / src.height, c.w / src.width, c.h / src.height);
        txt += line;
      }
      if (!a.save_img.empty()) draw_box(src, b, {1.0f, 0.15f, 0.1f}, 2);
    }
    const std::string stem = path.stem().string();
    if (!a.save_txt.empty()) write_text(fs::path(a.save_txt) / (stem + ".txt"), txt);
    if (!a.save_img.empty()) {
      fs::create_directories(a.save_img);
      save_png(src, (fs::path(a.save_img) / (stem + ".png")).string());
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string weights, config;
  int img = 0, iterations = 100, warmup = 10;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  auto model = model_from(a.weights, a.config);
  const int size = a.img > 0 ? a.img : model->config().input_size;
  const BenchResult r = bench(*model, size, a.iterations, a.warmup);
  char line[256];
  std::snprintf(line, sizeof line,
                "input %d  runs %zu  mean %.2f ms  p50 %.2f ms  p95 %.2f ms  min %.2f ms  max %.2f ms\n", size,
                r.samples_ms.size(), r.mean_ms, r.p50_ms, r.p95_ms, r.min_ms, r.max_ms);
  out << line << "hardware: " << r.hardware << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string weights, config;
  int img = 0;
  bool summary = false;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  auto model = model_from(a.weights, a.config);
  const int size = a.img > 0 ? a.img : model->config().input_size;
  const Profiler prof = model->profile(size);
  char line[256];
  if (!a.summary) {
    std::snprintf(line, sizeof line, "%-36s %-14s %-22s %12s %16s\n", "layer", "kind", "output", "params", "FLOPs");
    out << line;
    for (const auto& r : prof.rows()) {
      std::snprintf(line, sizeof line, "%-36s %-14s %-22s %12lld %16lld\n", r.name.c_str(), r.kind.c_str(),
                    to_string(r.output).c_str(), static_cast<long long>(r.params), static_cast<long long>(r.flops));
      out << line;
    }
  }
  std::snprintf(line, sizeof line, "total  Size %d  Param(M) %.3f  FLOPs(B) %.2f  params %lld  flops %lld\n", size,
                prof.total_params() / 1e6, prof.total_flops() / 1e9, static_cast<long long>(prof.total_params()),
                static_cast<long long>(prof.total_flops()));
  out << line;
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"hydet: anchor-free detector with an SPP transformer neck"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes a run directory");
  train_cmd->add_option("--config", ta.config, "key = value config file");
  train_cmd->add_option("--data", ta.data, "dataset manifest or root directory");
  train_cmd->add_option("--out", ta.out, "run directory");
  train_cmd->add_option("--seed", ta.seed, "training and initialization seed");
  train_cmd->add_option("--epochs", ta.epochs);
  train_cmd->add_option("--batch", ta.batch);
  train_cmd->add_option("--img", ta.img, "square input size");
  train_cmd->add_option("--max-iters", ta.max_iters, "stop after this many iterations");
  train_cmd->add_option("--set", ta.sets, "override any config key: key=value");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--weights", ea.weights)->required();
  eval_cmd->add_option("--data", ea.data)->required();
  eval_cmd->add_option("--split", ea.split, "")->capture_default_str();
  eval_cmd->add_option("--conf", ea.conf, "postprocess score threshold")->capture_default_str();
  eval_cmd->add_option("--iou", ea.iou, "NMS IoU threshold")->capture_default_str();
  eval_cmd->add_option("--pr-conf", ea.pr_conf, "fixed precision/recall cut (default: max F1)");
  eval_cmd->add_option("--img", ea.img);
  eval_cmd->add_option("--batch", ea.batch)->capture_default_str();
  eval_cmd->add_option("--bench", ea.bench, "latency iterations (0: skip)")->capture_default_str();
  eval_cmd->add_option("--out", ea.out, "directory for report.csv and confusion_matrix.csv")->capture_default_str();

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "detect objects in an image or a directory of images");
  infer_cmd->add_option("--weights", ia.weights)->required();
  infer_cmd->add_option("--input", ia.input)->required();
  infer_cmd->add_option("--conf", ia.conf)->capture_default_str();
  infer_cmd->add_option("--iou", ia.iou)->capture_default_str();
  infer_cmd->add_option("--img", ia.img);
  infer_cmd->add_option("--data", ia.data, "manifest supplying class names");
  infer_cmd->add_option("--save-txt", ia.save_txt, "directory for label-format results");
  infer_cmd->add_option("--save-img", ia.save_img, "directory for annotated PNGs");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "time single-image forward + postprocess");
  bench_cmd->add_option("--weights", ba.weights);
  bench_cmd->add_option("--config", ba.config);
  bench_cmd->add_option("--img", ba.img);
  bench_cmd->add_option("--iterations", ba.iterations)->capture_default_str();
  bench_cmd->add_option("--warmup", ba.warmup)->capture_default_str();

  InspectArgs sa;
  auto* inspect_cmd = app.add_subcommand("inspect", "per-layer shapes, parameters and FLOPs");
  inspect_cmd->add_option("--weights", sa.weights);
  inspect_cmd->add_option("--config", sa.config);
  inspect_cmd->add_option("--img", sa.img);
  inspect_cmd->add_flag("--summary", sa.summary, "print only the totals line");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error[config]: " << one_line(e.what()) << '\n';
    return kConfigError;
  }

  const bool infer = infer_cmd->parsed();
  try {
    if (train_cmd->parsed()) return cmd_train(ta, *train_cmd, out);
    if (eval_cmd->parsed()) return cmd_eval(ea, out);
    if (infer) return cmd_infer(ia, out);
    if (bench_cmd->parsed()) return cmd_bench(ba, out);
    if (inspect_cmd->parsed()) return cmd_inspect(sa, out);
  } catch (const Exit& e) {
    err << "error[" << e.kind << "]: " << one_line(e.message) << '\n';
    return e.code;
  } catch (const ConfigError& e) {
    err << "error[config]: " << one_line(e.what()) << '\n';
    return kConfigError;
  } catch (const DatasetError& e) {
    if (infer && e.code() == DatasetErrc::undecodable_image) {
      err << "error[undecodable]: " << one_line(e.what()) << '\n';
      return kUndecodableInput;
    }
    err << "error[dataset]: " << one_line(e.what()) << '\n';
    return kDatasetError;
  } catch (const NumericError& e) {
    err << "error[numeric]: " << one_line(e.what()) << '\n';
    return kNumericError;
  } catch (const CheckpointError& e) {
    err << "error[checkpoint]: " << one_line(e.what()) << '\n';
    return kCheckpointError;
  } catch (const std::exception& e) {
    err << "error[internal]: " << one_line(e.what()) << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace hydet::cli
