#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "hydet/checkpoint.hpp"
#include "hydet/error.hpp"
#include "hydet/trainer.hpp"

using namespace hydet;
using namespace hydet::testing;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig small_train(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.image_size = 64;
  c.augment = false;
  c.warmup_iters = 5;
  c.val_interval = 0;
  c.seed = 5;
  return c;
}

DatasetManifest small_data(const std::string& name, int images = 8) {
  FixtureOptions o;
  o.images = images;
  o.width = o.height = 64;
  return load_dataset(make_fixture(scratch_dir(name), o));
}

}  // namespace

TEST_CASE("lr schedule") {
  TrainConfig c;
  c.epochs = 200;
  c.lr0 = 0.01;
  c.lrf = 0.01;
  CHECK(lr_at(0, c) == 0.01);
  CHECK(lr_at(200, c) == 0.01 * 0.01);
  CHECK(lr_at(100, c) == doctest::Approx(0.01 * 0.505).epsilon(1e-14));
  double prev = lr_at(0, c);
  for (int i = 1; i <= 400; ++i) {
    const double v = lr_at(i * 0.5, c);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK(lr_at(0, c, 0, 10) == doctest::Approx(0.001));
  CHECK(lr_at(0, c, 9, 10) == doctest::Approx(0.01));
  CHECK(lr_at(0, c, 10, 10) == 0.01);
}

TEST_CASE("train config validation and round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lrf = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr0 = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 17;
  c.lr0 = 0.0123;
  c.loss.ciou = 3.25;
  c.focal.gamma = 2;
  c.augment = false;
  const auto back = TrainConfig::from_kv(c.to_kv());
  CHECK(back.to_kv().to_string() == c.to_kv().to_string());
  CHECK(back.loss.ciou == 3.25);
  CHECK_FALSE(back.augment);
}

TEST_CASE("training loss decreases and logs are consistent") {
  const auto data = small_data("train_decrease");
  Detector<float> model(tiny_config());
  auto cfg = small_train(300);
  const auto log = train(model, data, cfg);
  REQUIRE(log.iters.size() == 300);
  std::vector<double> window;
  for (int w = 0; w < 6; ++w) {
    double s = 0;
    for (int i = 0; i < 50; ++i) s += log.iters[static_cast<std::size_t>(w * 50 + i)].loss.total;
    window.push_back(s / 50);
  }
  for (std::size_t w = 1; w < window.size(); ++w) CHECK(window[w] < window[w - 1]);
  for (const auto& r : log.iters) {
    CHECK(r.lr == lr_at(static_cast<double>(r.epoch), cfg, r.iteration, 5));
    CHECK(std::abs(r.loss.cls + r.loss.dfl + r.loss.ciou - r.loss.total) <= 1e-6);
  }
}

TEST_CASE("training is deterministic") {
  const auto data = small_data("train_det");
  auto cfg = small_train(3);
  cfg.augment = true;
  cfg.max_iters = 3;
  std::string csv[2];
  std::vector<float> bytes[2];
  for (int r = 0; r < 2; ++r) {
    Detector<float> model(tiny_config());
    csv[r] = train(model, data, cfg).losses_csv();
    for (const auto& t : model.parameters().tensors()) bytes[r].insert(bytes[r].end(), t.data().begin(), t.data().end());
  }
  CHECK(csv[0] == csv[1]);
  CHECK(std::memcmp(bytes[0].data(), bytes[1].data(), bytes[0].size() * sizeof(float)) == 0);
}

TEST_CASE("run directory, validation records and best checkpoint") {
  const auto data = small_data("train_rundir");
  const auto out = scratch_dir("train_rundir_out");
  Detector<float> model(tiny_config());
  auto cfg = small_train(4);
  cfg.val_interval = 2;
  cfg.out_dir = out.string();
  const auto log = train(model, data, cfg);
  REQUIRE(log.validations.size() == 2);
  CHECK(log.validations[0].epoch == 2);
  CHECK(log.validations[1].epoch == 4);
  for (const char* f : {"last.ckpt", "best.ckpt", "losses.csv", "metrics.csv", "timings.csv", "map_curve.svg"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  CHECK(slurp(out / "losses.csv").rfind("iteration,epoch,lr,cls,dfl,ciou,total,num_pos\n", 0) == 0);
  CHECK(slurp(out / "metrics.csv").rfind("epoch,iteration,precision,recall,mAP50,mAP50-95\n", 0) == 0);
  double best = -1;
  for (const auto& v : log.validations) best = std::max(best, v.map50_95);
  CHECK(log.validations[static_cast<std::size_t>(log.best_index)].map50_95 == best);
  CheckpointInfo info;
  load_checkpoint((out / "best.ckpt").string(), &info);
  CHECK(info.meta.get_int64("epoch", -1) == log.validations[static_cast<std::size_t>(log.best_index)].epoch);

  int calls = 0;
  TrainCallbacks cb;
  cb.on_validation = [&](const EpochRecord&) { return ++calls < 1; };
  auto c2 = small_train(6);
  c2.val_interval = 1;
  Detector<float> m2(tiny_config());
  const auto l2 = train(m2, data, c2, cb);
  CHECK(l2.validations.size() == 1);
  CHECK(l2.iters.size() == 1);
}

TEST_CASE("train rejects mismatched or empty inputs") {
  const auto data = small_data("train_reject");
  Detector<float> wrong(tiny_config(3));
  CHECK_THROWS_AS(train(wrong, data, small_train(1)), ConfigError);
  auto cfg = small_train(1);
  cfg.val_interval = 1;
  cfg.val_split = "test";
  Detector<float> model(tiny_config());
  CHECK_THROWS(train(model, data, cfg));
}

TEST_CASE("evaluate is deterministic and fills accounting") {
  const auto data = small_data("train_eval", 4);
  Detector<float> model(tiny_config());
  EvalConfig ec;
  ec.split = "val";
  ec.image_size = 64;
  ec.batch_size = 3;
  const auto a = evaluate(model, data, ec);
  const auto b = evaluate(model, data, ec);
  CHECK(a.csv_row() == b.csv_row());
  CHECK(a.confusion == b.confusion);
  CHECK(a.params == model.parameters().count());
  CHECK(a.flops == model.profile(64).total_flops());
  CHECK(a.image_size == 64);
}

TEST_CASE("bench statistics") {
  Detector<float> model(tiny_config());
  const auto r = bench(model, 64, 12, 2);
  REQUIRE(r.samples_ms.size() == 12);
  CHECK(r.min_ms <= r.p50_ms);
  CHECK(r.p50_ms <= r.p95_ms);
  CHECK(r.p95_ms <= r.max_ms);
  CHECK(r.mean_ms > 0);
  CHECK_FALSE(r.hardware.empty());
  CHECK_THROWS(bench(model, 64, 0, 0));
}
