#include <doctest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "fixtures.hpp"
#include "hydet/checkpoint.hpp"
#include "hydet/data.hpp"
#include "hydet/metrics.hpp"

using namespace hydet;
using namespace hydet::testing;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "hydet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double field(const std::string& text, const std::string& column) {
  // report.csv: header line then one data row.
  std::istringstream in(text);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  auto split = [](const std::string& s) {
    std::vector<std::string> v;
    std::stringstream ss(s);
    std::string x;
    while (std::getline(ss, x, ',')) v.push_back(x);
    return v;
  };
  const auto h = split(header), r = split(row);
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] == column) return std::stod(r.at(i));
  }
  return -1;
}

std::string tiny_config_file(const fs::path& dir) {
  auto kv = tiny_config().to_kv();
  const auto p = dir / "model.cfg";
  std::ofstream(p) << kv.to_string();
  return p.string();
}

std::string oracle_checkpoint(const fs::path& dir) {
  Detector<float> m(tiny_config(2, 64));
  oracle_weights(m);
  const auto p = (dir / "oracle.ckpt").string();
  save_checkpoint(p, m);
  return p;
}

}  // namespace

TEST_CASE("usage and config errors") {
  CHECK(run_cli({}).code == cli::kConfigError);
  CHECK(run_cli({"bogus"}).code == cli::kConfigError);
  CHECK(run_cli({"--help"}).code == cli::kOk);
  const auto r = run_cli({"train"});
  CHECK(r.code == cli::kConfigError);
  CHECK(r.err.rfind("error[config]: ", 0) == 0);
  const auto dir = scratch_dir("cli_cfg");
  std::ofstream(dir / "bad.cfg") << "num_classes = 0\n";
  CHECK(run_cli({"inspect", "--config", (dir / "bad.cfg").string()}).code == cli::kConfigError);
}

TEST_CASE("train: missing dataset root exits 3 naming the path") {
  const auto dir = scratch_dir("cli_missing");
  std::ofstream(dir / "data.txt") << "root = no_such_root\nnames = a\n";
  const auto r = run_cli({"train", "--data", (dir / "data.txt").string(), "--out", (dir / "run").string()});
  CHECK(r.code == cli::kDatasetError);
  CHECK(r.err.find("no_such_root") != std::string::npos);
}

TEST_CASE("train: run directory and determinism") {
  const auto dir = scratch_dir("cli_train");
  FixtureOptions o;
  o.images = 4;
  o.width = o.height = 64;
  const auto data = make_fixture(dir / "data", o);
  std::ofstream(dir / "run.cfg") << tiny_config().to_kv().to_string() << "epochs = 2\nbatch_size = 4\n"
                                 << "image_size = 64\nwarmup_iters = 1\n";
  std::string csv[2];
  for (int r = 0; r < 2; ++r) {
    const auto out = dir / ("run" + std::to_string(r));
    const auto res = run_cli({"train", "--config", (dir / "run.cfg").string(), "--data", data, "--out",
                              out.string(), "--seed", "7"});
    REQUIRE_MESSAGE(res.code == cli::kOk, res.err);
    for (const char* f : {"config.echo", "last.ckpt", "best.ckpt", "losses.csv", "metrics.csv", "map_curve.svg"}) {
      CHECK_MESSAGE(fs::exists(out / f), f);
    }
    csv[r] = slurp(out / "losses.csv");
    const auto echo = KeyValueConfig::load((out / "config.echo").string());
    CHECK(echo.get("seed") == "7");
    CHECK(echo.get("epochs") == "2");
    CHECK(echo.get("width_mult") == "0.125");
  }
  CHECK(csv[0] == csv[1]);
  const auto res = run_cli({"train", "--config", (dir / "run.cfg").string(), "--data", data, "--out",
                            (dir / "run2").string(), "--epochs", "1", "--set", "lr0=0.02"});
  REQUIRE(res.code == cli::kOk);
  const auto echo = KeyValueConfig::load((dir / "run2" / "config.echo").string());
  CHECK(echo.get("epochs") == "1");
  CHECK(echo.get("lr0") == "0.02");
  CHECK(run_cli({"train", "--data", data, "--set", "lr0"}).code == cli::kConfigError);
}

TEST_CASE("eval: oracle weights, monotone recall and checkpoint errors") {
  const auto dir = scratch_dir("cli_eval");
  const auto data = make_quadrant_fixture(dir / "data");
  const auto ckpt = oracle_checkpoint(dir);
  const auto r = run_cli({"eval", "--weights", ckpt, "--data", data, "--out", dir.string(), "--conf", "0.25"});
  REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
  {
    std::istringstream table(r.out);
    std::string header, row, tok;
    std::getline(table, header);
    std::getline(table, row);
    std::istringstream cols(row);
    std::vector<std::string> v;
    while (cols >> tok) v.push_back(tok);
    REQUIRE(v.size() == 8);
    CHECK(v[5] == "1.000");
  }
  const auto report = slurp(dir / "report.csv");
  CHECK(report.rfind(EvalReport::csv_header(), 0) == 0);
  CHECK(field(report, "mAP50") == 1.0);
  CHECK(field(report, "mAP50/95") == 1.0);
  const double recall_low = field(report, "Recall");
  CHECK(fs::exists(dir / "confusion_matrix.csv"));

  const auto hi = run_cli({"eval", "--weights", ckpt, "--data", data, "--out", dir.string(), "--conf", "0.99"});
  REQUIRE(hi.code == cli::kOk);
  CHECK(field(slurp(dir / "report.csv"), "Recall") <= recall_low);

  std::string bytes = slurp(ckpt);
  bytes[bytes.size() / 2] ^= 0x5a;
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
  const auto bad = run_cli({"eval", "--weights", (dir / "bad.ckpt").string(), "--data", data});
  CHECK(bad.code == cli::kCheckpointError);
  CHECK(bad.err.rfind("error[checkpoint]: ", 0) == 0);
  CHECK(run_cli({"eval", "--weights", (dir / "absent.ckpt").string(), "--data", data}).code ==
        cli::kCheckpointError);
}

TEST_CASE("infer: zero head, ordering, label output and bad input") {
  const auto dir = scratch_dir("cli_infer");
  Detector<float> zero(tiny_config(2, 64));
  oracle_weights(zero, 0.0f);
  for (auto& p : zero.parameters().params) {
    if (p.name.find(".pred.bias") != std::string::npos) {
      auto d = p.tensor.mutable_data();
      std::fill(d.begin(), d.end(), 0.0f);
    }
  }
  save_checkpoint((dir / "zero.ckpt").string(), zero);
  fs::create_directories(dir / "imgs");
  for (const char* n : {"b.png", "a.png", "c.png"}) save_png(Image(64, 48, 0.5f), (dir / "imgs" / n).string());
  const auto blank = run_cli({"infer", "--weights", (dir / "zero.ckpt").string(), "--input",
                              (dir / "imgs").string(), "--conf", "0.9"});
  REQUIRE_MESSAGE(blank.code == cli::kOk, blank.err);
  const auto a = blank.out.find("a.png"), b = blank.out.find("b.png"), c = blank.out.find("c.png");
  CHECK(a < b);
  CHECK(b < c);
  CHECK(c != std::string::npos);
  std::size_t blocks = 0;
  for (std::size_t p = blank.out.find("image "); p != std::string::npos; p = blank.out.find("image ", p + 1)) ++blocks;
  CHECK(blocks == 3);
  CHECK(blank.out.find(": 0 detections") != std::string::npos);

  const auto data = make_quadrant_fixture(dir / "q");
  const auto ckpt = oracle_checkpoint(dir);
  const auto img = (dir / "q" / "images" / "val" / "q_00.png").string();
  const auto r = run_cli({"infer", "--weights", ckpt, "--input", img, "--data", data, "--save-txt",
                          (dir / "txt").string(), "--save-img", (dir / "vis").string()});
  REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
  CHECK(r.out.find(": 4 detections") != std::string::npos);
  CHECK(r.out.find("box ") != std::string::npos);
  const auto labels = parse_labels(slurp(dir / "txt" / "q_00.txt"), 2, "q_00.txt");
  REQUIRE(labels.size() == 4);
  for (const auto& l : labels) {
    CHECK(l.class_id == 0);
    CHECK(l.w == doctest::Approx(0.5).epsilon(1e-4));
  }
  CHECK(fs::exists(dir / "vis" / "q_00.png"));

  std::ofstream(dir / "junk.png") << "not an image";
  const auto junk = run_cli({"infer", "--weights", ckpt, "--input", (dir / "junk.png").string()});
  CHECK(junk.code == cli::kUndecodableInput);
  CHECK(junk.err.rfind("error[undecodable]: ", 0) == 0);
  CHECK(run_cli({"infer", "--weights", ckpt, "--input", (dir / "nothing.png").string()}).code ==
        cli::kUndecodableInput);
}

TEST_CASE("inspect and bench") {
  const auto r = run_cli({"inspect", "--summary"});
  REQUIRE(r.code == cli::kOk);
  std::smatch m;
  REQUIRE(std::regex_search(r.out, m, std::regex("params (\\d+)  flops (\\d+)")));
  const long long params = std::stoll(m[1]);
  CHECK(params >= 2360000);
  CHECK(params <= 3190000);
  CHECK(r.out.find("layer") == std::string::npos);

  const auto dir = scratch_dir("cli_inspect");
  const auto cfg = tiny_config_file(dir);
  const auto full = run_cli({"inspect", "--config", cfg});
  REQUIRE(full.code == cli::kOk);
  std::istringstream in(full.out);
  std::string line;
  long long sum = 0, total = -1;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.rfind("total", 0) == 0) {
      std::regex_search(line, m, std::regex("params (\\d+)"));
      total = std::stoll(m[1]);
      continue;
    }
    std::istringstream ls(line);
    std::string name, kind, shape;
    long long p = 0, f = 0;
    ls >> name >> kind >> shape >> p >> f;
    sum += p;
  }
  CHECK(sum == total);

  const auto b = run_cli({"bench", "--config", cfg, "--iterations", "5", "--warmup", "1"});
  REQUIRE(b.code == cli::kOk);
  CHECK(b.out.find("runs 5") != std::string::npos);
  CHECK(b.out.find("hardware: ") != std::string::npos);
}
