#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hydet/config.hpp"
#include "hydet/data.hpp"
#include "hydet/loss.hpp"
#include "hydet/metrics.hpp"
#include "hydet/model.hpp"
#include "hydet/postprocess.hpp"

namespace hydet {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  int image_size = 640;
  double lr0 = 0.01;
  double lrf = 0.01;
  double momentum = 0.937;
  double weight_decay = 5e-4;
  double warmup_epochs = 3.0;
  std::int64_t warmup_iters = -1;  // negative: derived from warmup_epochs
  std::uint64_t seed = 0;
  int val_interval = 1;            // epochs between validations; 0 disables
  int patience = 0;                // 0 disables early stopping
  std::int64_t max_iters = 0;      // 0: no cap
  bool augment = true;
  double mosaic_prob = 1.0;
  double flip_prob = 0.5;
  std::string train_split = "train";
  std::string val_split = "val";
  double val_conf = 0.001;
  double val_iou = 0.45;
  LossWeights loss;
  FocalParams focal;
  std::string out_dir;             // empty: no files written

  void validate() const;
  KeyValueConfig to_kv() const;
  static TrainConfig from_kv(const KeyValueConfig& kv);
};

/// Linear lambda schedule lr0*((1 - e/E)(1 - lrf) + lrf) at fractional
/// epoch e, times the warmup factor (iteration+1)/warmup_iters while
/// iteration < warmup_iters. A negative iteration means "after warmup".
double lr_at(double epoch, const TrainConfig& cfg, std::int64_t iteration = -1, std::int64_t warmup_iters = 0);

struct IterRecord {
  std::int64_t iteration = 0;
  int epoch = 0;
  double lr = 0;
  LossComponents loss;
};

struct EpochRecord {
  int epoch = 0;  // 1-based count of completed epochs
  std::int64_t iteration = 0;
  double map50 = 0, map50_95 = 0, precision = 0, recall = 0;
};

struct TrainLog {
  std::vector<IterRecord> iters;
  std::vector<EpochRecord> validations;
  std::vector<double> iter_seconds;
  int best_index = -1;  // into validations
  bool stopped_early = false;
  std::string stop_reason;

  std::string losses_csv() const;
  std::string metrics_csv() const;
  std::string timings_csv() const;
};

struct TrainCallbacks {
  std::function<void(const IterRecord&)> on_iteration;
  /// Return false to stop training after this validation.
  std::function<bool(const EpochRecord&)> on_validation;
};

/// Runs the loop; writes last/best checkpoints, CSV logs and the mAP curve
/// into cfg.out_dir when it is set. Throws NumericError on a non-finite loss.
TrainLog train(Detector<float>& model, const DatasetManifest& data, const TrainConfig& cfg,
               const TrainCallbacks& callbacks = {});

struct EvalConfig {
  std::string split = "val";
  int image_size = 640;
  int batch_size = 8;
  PostprocessOptions post{0.001, 0.45, true, 300};
  EvalOptions metrics;
  int bench_iterations = 0;  // 0: no latency measurement
  int bench_warmup = 3;
};

/// Inference, postprocessing and metrics over a split, in letterbox pixel
/// space. Fills params/FLOPs and, when requested, latency.
EvalReport evaluate(Detector<float>& model, const DatasetManifest& data, const EvalConfig& cfg);

/// Detections and ground truths used by evaluate(), exposed for tests.
void collect_predictions(Detector<float>& model, const DatasetManifest& data, const EvalConfig& cfg,
                         std::vector<Detection>& dets, std::vector<GroundTruth>& gts);

/// Single-image forward + postprocess timings after `warmup` untimed runs.
struct BenchResult {
  std::vector<double> samples_ms;
  double mean_ms = 0, p50_ms = 0, p95_ms = 0, min_ms = 0, max_ms = 0;
  std::string hardware;
};

BenchResult bench(Detector<float>& model, int input_size, int iterations, int warmup);

/// "cpu model, N hw threads, compiler" string.
std::string hardware_descriptor();

}  // namespace hydet
