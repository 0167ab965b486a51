#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hydet/image.hpp"
#include "hydet/model.hpp"
#include "hydet/rng.hpp"

namespace hydet::testing {

namespace fs = std::filesystem;

inline fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("hydet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct FixtureOptions {
  int images = 8;
  int width = 320, height = 320;
  int num_classes = 2;
  int max_boxes = 1;
  double min_side = 0.2, max_side = 0.45;  // fraction of the short image side
  std::uint64_t seed = 1;
  std::string split = "train";
  bool also_val = true;                     // same images under "val"
};

inline std::array<float, 3> class_color(int c) {
  static const std::array<float, 3> table[] = {
      {0.9f, 0.1f, 0.1f}, {0.1f, 0.2f, 0.9f}, {0.1f, 0.8f, 0.2f}, {0.9f, 0.8f, 0.1f}, {0.7f, 0.1f, 0.8f}};
  return table[c % 5];
}

/// Writes <root>/images/<split>/*.png, labels and a manifest file holding
/// solid class-colored rectangles on a mildly textured background. Returns
/// the manifest path.
inline std::string make_fixture(const fs::path& root, const FixtureOptions& o) {
  Rng rng(mix_seed(o.seed, 0x66697874));
  std::vector<std::string> splits{o.split};
  if (o.also_val && o.split != "val") splits.push_back("val");
  for (const auto& s : splits) {
    fs::create_directories(root / "images" / s);
    fs::create_directories(root / "labels" / s);
  }
  for (int i = 0; i < o.images; ++i) {
    Image img(o.width, o.height);
    for (int y = 0; y < o.height; ++y) {
      for (int x = 0; x < o.width; ++x) {
        const float g = 0.45f + 0.1f * static_cast<float>(rng.uniform());
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = g;
      }
    }
    std::string labels;
    const int nb = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(o.max_boxes)));
    const double short_side = std::min(o.width, o.height);
    for (int b = 0; b < nb; ++b) {
      const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.num_classes)));
      const int w = static_cast<int>(short_side * rng.uniform(o.min_side, o.max_side));
      const int h = static_cast<int>(short_side * rng.uniform(o.min_side, o.max_side));
      const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.width - w)));
      const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.height - h)));
      const auto col = class_color(cls);
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
        }
      }
      char line[128];
      std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f\n", cls, (x0 + w / 2.0) / o.width,
                    (y0 + h / 2.0) / o.height, static_cast<double>(w) / o.width, static_cast<double>(h) / o.height);
      labels += line;
    }
    char stem[32];
    std::snprintf(stem, sizeof stem, "img_%03d", i);
    for (const auto& s : splits) {
      save_png(img, (root / "images" / s / (std::string(stem) + ".png")).string());
      std::ofstream(root / "labels" / s / (std::string(stem) + ".txt")) << labels;
    }
  }
  std::string names;
  for (int c = 0; c < o.num_classes; ++c) names += (c ? ", " : "") + std::string("shape") + std::to_string(c);
  const fs::path manifest = root / "data.txt";
  std::ofstream(manifest) << "root = .\nnames = " << names << "\n";
  return manifest.string();
}

/// Small network for fast tests.
inline ModelConfig tiny_config(int num_classes = 2, int input = 64) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.input_size = input;
  c.width_mult = 0.125;
  c.depth_mult = 0.33;
  c.stage_channels = {64, 128, 128, 128};
  c.stage_depths = {1, 1, 1, 1};
  c.neck_depth = 1;
  c.head_reg_channels = 64;
  c.head_cls_channels = 64;
  c.reg_bins = 8;
  c.attn_heads = 2;
  return c;
}

/// Images of size x size whose labels are the four class-0 quadrant boxes.
inline std::string make_quadrant_fixture(const fs::path& root, int images = 5, int size = 64) {
  for (const char* s : {"train", "val"}) {
    fs::create_directories(root / "images" / s);
    fs::create_directories(root / "labels" / s);
  }
  Rng rng(9);
  for (int i = 0; i < images; ++i) {
    Image img(size, size);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    char stem[32];
    std::snprintf(stem, sizeof stem, "q_%02d", i);
    for (const char* s : {"train", "val"}) {
      save_png(img, (root / "images" / s / (std::string(stem) + ".png")).string());
      std::ofstream(root / "labels" / s / (std::string(stem) + ".txt"))
          << "0 0.25 0.25 0.5 0.5\n0 0.75 0.25 0.5 0.5\n0 0.25 0.75 0.5 0.5\n0 0.75 0.75 0.5 0.5\n";
    }
  }
  const fs::path manifest = root / "data.txt";
  std::ofstream(manifest) << "root = .\nnames = box, other\n";
  return manifest.string();
}

/// Turns a tiny_config(2, 64) model into a perfect detector for
/// make_quadrant_fixture: every feature is zero, so the head emits its
/// biases. Stride 32 predicts class 0 with half a stride on every side,
/// which is exactly the quadrant box around each of its four anchors.
inline void oracle_weights(Detector<float>& model, float cls_logit = 3.0f) {
  auto ps = model.parameters();
  for (auto& p : ps.params) {
    auto d = p.tensor.mutable_data();
    std::fill(d.begin(), d.end(), 0.0f);
  }
  const int bins = model.config().reg_bins;
  const int last = static_cast<int>(model.config().strides.size()) - 1;
  for (auto& p : ps.params) {
    auto d = p.tensor.mutable_data();
    for (int s = 0; s <= last; ++s) {
      if (p.name == "head.cls" + std::to_string(s) + ".pred.bias") {
        std::fill(d.begin(), d.end(), -30.0f);
        if (s == last) d[0] = cls_logit;
      }
      if (p.name == "head.reg" + std::to_string(s) + ".pred.bias") {
        std::fill(d.begin(), d.end(), -30.0f);
        for (int side = 0; side < 4; ++side) d[side * bins] = d[side * bins + 1] = 0.0f;
      }
    }
  }
}

}  // namespace hydet::testing
