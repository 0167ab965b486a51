#include "hydet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "hydet/checkpoint.hpp"
#include "hydet/error.hpp"
#include "hydet/optim.hpp"
#include "hydet/plot.hpp"

namespace hydet {

namespace fs = std::filesystem;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

std::vector<double> parse_double_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split(text, ',')) {
    if (item.empty()) continue;
    KeyValueConfig one;
    one.set(key, item);
    out.push_back(one.get_double(key, 0.0));
  }
  return out;
}

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - static_cast<double>(lo));
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (image_size <= 0 || image_size % 32 != 0) fail("image_size must be a positive multiple of 32");
  if (!(lr0 > 0)) fail("lr0 must be > 0");
  if (!(lrf > 0 && lrf <= 1)) fail("lrf must lie in (0, 1]");
  if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (warmup_epochs < 0) fail("warmup_epochs must be >= 0");
  if (val_interval < 0 || patience < 0 || max_iters < 0) fail("val_interval, patience and max_iters must be >= 0");
  if (mosaic_prob < 0 || mosaic_prob > 1 || flip_prob < 0 || flip_prob > 1) fail("probabilities must lie in [0, 1]");
  if (loss.cls < 0 || loss.dfl < 0 || loss.ciou < 0) fail("loss weights must be >= 0");
  focal.validate();
}

KeyValueConfig TrainConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("epochs", std::to_string(epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("image_size", std::to_string(image_size));
  kv.set("lr0", g17(lr0));
  kv.set("lrf", g17(lrf));
  kv.set("momentum", g17(momentum));
  kv.set("weight_decay", g17(weight_decay));
  kv.set("warmup_epochs", g17(warmup_epochs));
  kv.set("warmup_iters", std::to_string(warmup_iters));
  kv.set("seed", std::to_string(seed));
  kv.set("val_interval", std::to_string(val_interval));
  kv.set("patience", std::to_string(patience));
  kv.set("max_iters", std::to_string(max_iters));
  kv.set("augment", augment ? "true" : "false");
  kv.set("mosaic_prob", g17(mosaic_prob));
  kv.set("flip_prob", g17(flip_prob));
  kv.set("train_split", train_split);
  kv.set("val_split", val_split);
  kv.set("val_conf", g17(val_conf));
  kv.set("val_iou", g17(val_iou));
  kv.set("w_cls", g17(loss.cls));
  kv.set("w_dfl", g17(loss.dfl));
  kv.set("w_ciou", g17(loss.ciou));
  kv.set("focal_gamma", g17(focal.gamma));
  std::string alpha;
  for (std::size_t i = 0; i < focal.alpha.size(); ++i) alpha += (i ? "," : "") + g17(focal.alpha[i]);
  kv.set("focal_alpha", alpha);
  kv.set("out_dir", out_dir);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
  TrainConfig c;
  c.epochs = kv.get_int("epochs", c.epochs);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.image_size = kv.get_int("image_size", kv.get_int("input_size", c.image_size));
  c.lr0 = kv.get_double("lr0", c.lr0);
  c.lrf = kv.get_double("lrf", c.lrf);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.warmup_epochs = kv.get_double("warmup_epochs", c.warmup_epochs);
  c.warmup_iters = kv.get_int64("warmup_iters", c.warmup_iters);
  c.seed = static_cast<std::uint64_t>(kv.get_int64("seed", 0));
  c.val_interval = kv.get_int("val_interval", c.val_interval);
  c.patience = kv.get_int("patience", c.patience);
  c.max_iters = kv.get_int64("max_iters", c.max_iters);
  c.augment = kv.get_bool("augment", c.augment);
  c.mosaic_prob = kv.get_double("mosaic_prob", c.mosaic_prob);
  c.flip_prob = kv.get_double("flip_prob", c.flip_prob);
  c.train_split = kv.get_or("train_split", c.train_split);
  c.val_split = kv.get_or("val_split", c.val_split);
  c.val_conf = kv.get_double("val_conf", c.val_conf);
  c.val_iou = kv.get_double("val_iou", c.val_iou);
  c.loss.cls = kv.get_double("w_cls", c.loss.cls);
  c.loss.dfl = kv.get_double("w_dfl", c.loss.dfl);
  c.loss.ciou = kv.get_double("w_ciou", c.loss.ciou);
  c.focal.gamma = kv.get_double("focal_gamma", c.focal.gamma);
  if (kv.has("focal_alpha")) c.focal.alpha = parse_double_list("focal_alpha", kv.get("focal_alpha"));
  c.out_dir = kv.get_or("out_dir", c.out_dir);
  c.validate();
  return c;
}

double lr_at(double epoch, const TrainConfig& cfg, std::int64_t iteration, std::int64_t warmup_iters) {
  const double e = std::clamp(epoch, 0.0, static_cast<double>(cfg.epochs));
  double lr = cfg.lr0 * ((1.0 - e / cfg.epochs) * (1.0 - cfg.lrf) + cfg.lrf);
  if (iteration >= 0 && iteration < warmup_iters) {
    lr *= static_cast<double>(iteration + 1) / static_cast<double>(warmup_iters);
  }
  return lr;
}

std::string TrainLog::losses_csv() const {
  std::string out = "iteration,epoch,lr,cls,dfl,ciou,total,num_pos\n";
  for (const auto& r : iters) {
    out += std::to_string(r.iteration) + ',' + std::to_string(r.epoch) + ',' + g9(r.lr) + ',' + g9(r.loss.cls) +
           ',' + g9(r.loss.dfl) + ',' + g9(r.loss.ciou) + ',' + g9(r.loss.total) + ',' +
           std::to_string(r.loss.num_positive) + '\n';
  }
  return out;
}

std::string TrainLog::metrics_csv() const {
  std::string out = "epoch,iteration,precision,recall,mAP50,mAP50-95\n";
  for (const auto& v : validations) {
    out += std::to_string(v.epoch) + ',' + std::to_string(v.iteration) + ',' + g9(v.precision) + ',' +
           g9(v.recall) + ',' + g9(v.map50) + ',' + g9(v.map50_95) + '\n';
  }
  return out;
}

std::string TrainLog::timings_csv() const {
  std::string out = "iteration,seconds\n";
  for (std::size_t i = 0; i < iter_seconds.size(); ++i) out += std::to_string(i) + ',' + g9(iter_seconds[i]) + '\n';
  return out;
}

TrainLog train(Detector<float>& model, const DatasetManifest& data, const TrainConfig& cfg,
               const TrainCallbacks& callbacks) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  if (data.num_classes() != mc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                      std::to_string(mc.num_classes));
  }
  if (cfg.val_interval > 0 && data.split(cfg.val_split).empty()) {
    throw DatasetError(DatasetErrc::empty_split, "validation split '" + cfg.val_split + "' has no images");
  }
  BatchOptions bo;
  bo.batch_size = cfg.batch_size;
  bo.image_size = cfg.image_size;
  bo.augment = cfg.augment;
  bo.mosaic_prob = cfg.mosaic_prob;
  bo.flip_prob = cfg.flip_prob;
  bo.seed = cfg.seed;
  BatchIterator it(data, cfg.train_split, bo);
  const auto per_epoch = static_cast<std::int64_t>(it.num_batches());
  const std::int64_t warmup =
      cfg.warmup_iters >= 0 ? cfg.warmup_iters : std::llround(cfg.warmup_epochs * static_cast<double>(per_epoch));
  const AnchorSet anchors = make_anchors(cfg.image_size, cfg.image_size, mc.strides);

  auto ps = model.parameters();
  std::vector<Tensor<float>> params = ps.tensors();
  std::vector<char> decay(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) decay[i] = ps.params[i].kind == ParamKind::weight;
  std::vector<std::vector<float>> velocity;

  const bool write = !cfg.out_dir.empty();
  if (write) fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);

  TrainLog log;
  EvalConfig ec;
  ec.split = cfg.val_split;
  ec.image_size = cfg.image_size;
  ec.batch_size = cfg.batch_size;
  ec.post.conf_threshold = cfg.val_conf;
  ec.post.iou_threshold = cfg.val_iou;

  auto save = [&](const std::string& name, int epoch, std::int64_t iteration) {
    KeyValueConfig meta;
    meta.set("epoch", std::to_string(epoch));
    meta.set("iteration", std::to_string(iteration));
    meta.set("seed", std::to_string(cfg.seed));
    std::string hist;
    for (std::size_t i = 0; i < log.validations.size(); ++i) hist += (i ? "," : "") + g9(log.validations[i].map50_95);
    meta.set("map50_95_history", hist);
    save_checkpoint((out / name).string(), model, meta, velocity.empty() ? nullptr : &velocity);
  };
  auto write_logs = [&]() {
    write_file(out / "losses.csv", log.losses_csv());
    write_file(out / "metrics.csv", log.metrics_csv());
    write_file(out / "timings.csv", log.timings_csv());
    PlotSeries s{"mAP50-95", {}};
    for (const auto& v : log.validations) s.points.emplace_back(v.epoch, v.map50_95);
    write_file(out / "map_curve.svg", svg_line_plot({s}, "mAP50-95 vs epoch", "epoch", "mAP50-95"));
  };

  std::int64_t iteration = 0;
  int stale = 0;
  bool stop = false;
  model.set_mode(NormMode::train);
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    it.start_epoch(epoch);
    Batch batch;
    std::int64_t b = 0;
    bool capped = false;
    while (it.next(batch)) {
      const auto t0 = std::chrono::steady_clock::now();
      const double frac = epoch + static_cast<double>(b) / static_cast<double>(per_epoch);
      const double lr = lr_at(frac, cfg, iteration, warmup);
      auto head = model.forward(batch.images);
      std::vector<Assignment> as;
      as.reserve(batch.boxes.size());
      for (const auto& boxes : batch.boxes) as.push_back(assign(anchors, boxes, mc.reg_bins));
      auto res = total_loss(head, as, anchors, cfg.loss, cfg.focal);
      if (!std::isfinite(res.parts.total)) {
        char msg[256];
        std::snprintf(msg, sizeof msg, "non-finite loss at epoch %d batch %lld: cls=%g dfl=%g ciou=%g", epoch,
                      static_cast<long long>(b), res.parts.cls, res.parts.dfl, res.parts.ciou);
        throw NumericError(msg);
      }
      zero_grad(params);
      res.total.backward();
      for (auto& p : params) {
        if (!p.has_grad()) p.mutable_grad();
      }
      sgd_step(params, velocity, {lr, cfg.momentum, cfg.weight_decay}, decay);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      IterRecord rec{iteration, epoch, lr, res.parts};
      log.iters.push_back(rec);
      log.iter_seconds.push_back(secs);
      if (callbacks.on_iteration) callbacks.on_iteration(rec);
      ++iteration;
      ++b;
      if (cfg.max_iters > 0 && iteration >= cfg.max_iters) {
        capped = true;
        break;
      }
    }
    const int done = epoch + 1;
    const bool last = capped || done == cfg.epochs;
    if (cfg.val_interval > 0 && (done % cfg.val_interval == 0 || last)) {
      const EvalReport rep = evaluate(model, data, ec);
      model.set_mode(NormMode::train);
      EpochRecord v{done, iteration, rep.map50, rep.map50_95, rep.pr.precision, rep.pr.recall};
      const double prev_best = log.best_index >= 0 ? log.validations[log.best_index].map50_95 : -1.0;
      log.validations.push_back(v);
      if (v.map50_95 > prev_best) {
        log.best_index = static_cast<int>(log.validations.size()) - 1;
        if (write) save("best.ckpt", done, iteration);
      }
      stale = v.map50_95 > prev_best + 1e-4 ? 0 : stale + 1;
      if (cfg.patience > 0 && stale >= cfg.patience) {
        stop = true;
        log.stopped_early = true;
        log.stop_reason = "no mAP50-95 improvement for " + std::to_string(cfg.patience) + " validations";
      }
      if (callbacks.on_validation && !callbacks.on_validation(v)) {
        stop = true;
        log.stopped_early = true;
        log.stop_reason = "stopped by validation callback";
      }
    }
    if (write) {
      save("last.ckpt", done, iteration);
      write_logs();
    }
    if (capped) {
      if (!log.stopped_early) log.stop_reason = "iteration cap reached";
      break;
    }
  }
  return log;
}

void collect_predictions(Detector<float>& model, const DatasetManifest& data, const EvalConfig& cfg,
                         std::vector<Detection>& dets, std::vector<GroundTruth>& gts) {
  BatchOptions bo;
  bo.batch_size = cfg.batch_size;
  bo.image_size = cfg.image_size;
  bo.augment = false;
  bo.shuffle = false;
  BatchIterator it(data, cfg.split, bo);
  const NormMode prev = model.mode();
  model.set_mode(NormMode::eval);
  NoGradGuard no_grad;
  Batch batch;
  while (it.next(batch)) {
    auto head = model.forward(batch.images);
    auto per_image = postprocess(head, cfg.image_size, cfg.image_size, cfg.post);
    for (std::size_t b = 0; b < per_image.size(); ++b) {
      const int id = static_cast<int>(batch.indices[b]);
      for (auto d : per_image[b]) {
        d.image_id = id;
        dets.push_back(d);
      }
      for (const auto& g : batch.boxes[b]) gts.push_back({to_corners(g), g.class_id, id});
    }
  }
  model.set_mode(prev);
}

EvalReport evaluate(Detector<float>& model, const DatasetManifest& data, const EvalConfig& cfg) {
  if (data.num_classes() != model.config().num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                      std::to_string(model.config().num_classes));
  }
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  collect_predictions(model, data, cfg, dets, gts);
  EvalReport rep = evaluate_detections(dets, gts, model.config().num_classes, cfg.metrics);
  rep.image_size = cfg.image_size;
  rep.params = count_params(model);
  rep.flops = count_flops(model, cfg.image_size);
  if (cfg.bench_iterations > 0) {
    const BenchResult br = bench(model, cfg.image_size, cfg.bench_iterations, cfg.bench_warmup);
    rep.latency = {br.mean_ms, br.p50_ms, br.p95_ms, br.min_ms, br.max_ms, static_cast<int>(br.samples_ms.size()),
                   br.hardware};
  }
  return rep;
}

BenchResult bench(Detector<float>& model, int input_size, int iterations, int warmup) {
  if (iterations < 1 || warmup < 0) throw ConfigError("bench: iterations must be >= 1 and warmup >= 0");
  if (input_size <= 0 || input_size % 32 != 0) throw ConfigError("bench: input size must be a multiple of 32");
  Rng rng(0xbe4c5eedULL);
  std::vector<float> px(static_cast<std::size_t>(3) * input_size * input_size);
  for (auto& v : px) v = static_cast<float>(rng.uniform());
  const auto input = Tensor<float>::from_data({1, 3, input_size, input_size}, std::move(px));
  const NormMode prev = model.mode();
  model.set_mode(NormMode::eval);
  NoGradGuard no_grad;
  const PostprocessOptions post;
  auto run = [&]() { return postprocess(model.forward(input), input_size, input_size, post); };
  for (int i = 0; i < warmup; ++i) run();
  BenchResult r;
  for (int i = 0; i < iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  model.set_mode(prev);
  std::vector<double> s = r.samples_ms;
  std::sort(s.begin(), s.end());
  double acc = 0.0;
  for (double v : s) acc += v;
  r.mean_ms = acc / static_cast<double>(s.size());
  r.p50_ms = percentile(s, 0.50);
  r.p95_ms = percentile(s, 0.95);
  r.min_ms = s.front();
  r.max_ms = s.back();
  r.hardware = hardware_descriptor();
  return r;
}

std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = trim(line.substr(colon + 1));
      break;
    }
  }
  std::ostringstream os;
  os << cpu << ", " << std::thread::hardware_concurrency() << " hw threads, single-threaded inference, ";
#if defined(__clang__)
  os << "clang " << __clang_major__ << '.' << __clang_minor__;
#elif defined(__GNUC__)
  os << "gcc " << __GNUC__ << '.' << __GNUC_MINOR__;
#else
  os << "unknown compiler";
#endif
  return os.str();
}

}  // namespace hydet
