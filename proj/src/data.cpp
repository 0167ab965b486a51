#include "hydet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hydet/config.hpp"
#include "hydet/error.hpp"

namespace hydet {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm";
}

template <typename N>
bool parse_token(const std::string& tok, N& out) {
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc() && ptr == tok.data() + tok.size();
}

}  // namespace

const std::vector<Sample>& DatasetManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw DatasetError(DatasetErrc::empty_split, "dataset has no split '" + name + "'");
  return it->second;
}

std::string DatasetManifest::class_name(int id) const {
  if (id >= 0 && id < num_classes() && !class_names[id].empty()) return class_names[id];
  return "class_" + std::to_string(id);
}

std::vector<BBox> parse_labels(const std::string& text, int num_classes, const std::string& source) {
  std::vector<BBox> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (tok.size() != 5) {
      throw DatasetError(DatasetErrc::malformed_label, where + "expected 'class cx cy w h', got " +
                                                           std::to_string(tok.size()) + " fields");
    }
    int cls = 0;
    if (!parse_token(tok[0], cls)) throw DatasetError(DatasetErrc::malformed_label, where + "bad class id '" + tok[0] + "'");
    if (cls < 0 || cls >= num_classes) {
      throw DatasetError(DatasetErrc::class_out_of_range, where + "class id " + std::to_string(cls) +
                                                              " outside [0, " + std::to_string(num_classes) + ")");
    }
    double v[4];
    for (int k = 0; k < 4; ++k) {
      if (!parse_token(tok[k + 1], v[k]) || !std::isfinite(v[k])) {
        throw DatasetError(DatasetErrc::malformed_label, where + "bad coordinate '" + tok[k + 1] + "'");
      }
    }
    if (v[0] < 0 || v[0] > 1 || v[1] < 0 || v[1] > 1 || !(v[2] > 0 && v[2] <= 1) || !(v[3] > 0 && v[3] <= 1)) {
      throw DatasetError(DatasetErrc::malformed_label, where + "coordinates must be normalized with positive extent");
    }
    out.push_back({v[0], v[1], v[2], v[3], cls, 0.0});
  }
  return out;
}

DatasetManifest load_dataset(const std::string& manifest_path) {
  fs::path mpath(manifest_path);
  KeyValueConfig kv;
  fs::path base;
  if (fs::is_directory(mpath)) {
    base = mpath;
    kv.set("root", ".");
    if (fs::exists(mpath / "classes.txt")) kv.set("names_file", "classes.txt");
  } else {
    if (!fs::exists(mpath)) {
      throw DatasetError(DatasetErrc::missing_root, "dataset manifest not found: " + manifest_path);
    }
    try {
      kv = KeyValueConfig::load(manifest_path);
    } catch (const ConfigError& e) {
      throw DatasetError(DatasetErrc::bad_manifest, e.what());
    }
    base = mpath.parent_path();
  }
  DatasetManifest m;
  fs::path root(kv.get_or("root", "."));
  if (root.is_relative()) root = base / root;
  m.root = root.lexically_normal().string();
  if (!fs::is_directory(root)) throw DatasetError(DatasetErrc::missing_root, "dataset root not found: " + m.root);

  if (kv.has("names")) {
    for (const auto& n : split(kv.get("names"), ',')) {
      if (n.empty()) throw DatasetError(DatasetErrc::bad_class_file, "empty class name in manifest " + manifest_path);
      m.class_names.push_back(n);
    }
  } else if (kv.has("names_file")) {
    fs::path nf(kv.get("names_file"));
    if (nf.is_relative()) nf = base / nf;
    if (!fs::exists(nf)) throw DatasetError(DatasetErrc::bad_class_file, "class file not found: " + nf.string());
    std::istringstream is(read_text(nf));
    int lineno = 0;
    for (std::string line; std::getline(is, line);) {
      ++lineno;
      line = trim(line);
      if (line.empty()) continue;
      if (line.find_first_of(",\t") != std::string::npos) {
        throw DatasetError(DatasetErrc::bad_class_file,
                           nf.string() + ":" + std::to_string(lineno) + ": class names may not contain ',' or tabs");
      }
      m.class_names.push_back(line);
    }
  }
  if (kv.has("nc")) {
    int nc = 0;
    if (!parse_token(kv.get("nc"), nc) || nc < 1) {
      throw DatasetError(DatasetErrc::bad_manifest, "manifest key 'nc' must be a positive integer");
    }
    if (m.class_names.empty()) {
      for (int i = 0; i < nc; ++i) m.class_names.push_back("class_" + std::to_string(i));
    } else if (static_cast<int>(m.class_names.size()) != nc) {
      throw DatasetError(DatasetErrc::bad_class_file, "manifest lists " + std::to_string(m.class_names.size()) +
                                                          " class names but nc = " + std::to_string(nc));
    }
  }
  if (m.class_names.empty()) throw DatasetError(DatasetErrc::bad_class_file, "dataset declares no classes");

  std::vector<std::string> split_names;
  if (kv.has("splits")) {
    split_names = split(kv.get("splits"), ',');
  } else {
    for (const char* s : {"train", "val", "test"}) {
      if (fs::is_directory(root / "images" / s)) split_names.emplace_back(s);
    }
  }
  m.class_histogram.assign(m.class_names.size(), 0);
  for (const auto& s : split_names) {
    const fs::path idir = root / "images" / s;
    if (!fs::is_directory(idir)) throw DatasetError(DatasetErrc::missing_root, "split directory not found: " + idir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(idir)) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    auto& samples = m.splits[s];
    for (const auto& f : files) {
      Sample smp;
      smp.id = f.stem().string();
      smp.image_path = f.string();
      const fs::path lp = root / "labels" / s / (smp.id + ".txt");
      if (fs::exists(lp)) {
        smp.label_path = lp.string();
        smp.boxes = parse_labels(read_text(lp), m.num_classes(), smp.label_path);
        for (const auto& b : smp.boxes) ++m.class_histogram[b.class_id];
      }
      samples.push_back(std::move(smp));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

BBox LetterboxTransform::forward(const BBox& b) const {
  BBox o = b;
  o.cx = (b.cx * src_w * scale_x + pad_x) / target;
  o.cy = (b.cy * src_h * scale_y + pad_y) / target;
  o.w = b.w * src_w * scale_x / target;
  o.h = b.h * src_h * scale_y / target;
  return o;
}

BBox LetterboxTransform::inverse(const BBox& b) const {
  BBox o = b;
  o.cx = (b.cx * target - pad_x) / (scale_x * src_w);
  o.cy = (b.cy * target - pad_y) / (scale_y * src_h);
  o.w = b.w * target / (scale_x * src_w);
  o.h = b.h * target / (scale_y * src_h);
  return o;
}

Box LetterboxTransform::to_source(const Box& b) const {
  return {(b.x1 - pad_x) / scale_x, (b.y1 - pad_y) / scale_y, (b.x2 - pad_x) / scale_x, (b.y2 - pad_y) / scale_y};
}

std::pair<Image, LetterboxTransform> letterbox(const Image& img, int target) {
  if (img.empty()) throw Error("letterbox: zero-extent image");
  if (target <= 0 || target % 32 != 0) throw Error("letterbox: target must be a positive multiple of 32");
  const double scale = std::min(static_cast<double>(target) / img.width, static_cast<double>(target) / img.height);
  const int nw = std::clamp(static_cast<int>(std::lround(img.width * scale)), 1, target);
  const int nh = std::clamp(static_cast<int>(std::lround(img.height * scale)), 1, target);
  LetterboxTransform t;
  t.src_w = img.width;
  t.src_h = img.height;
  t.target = target;
  t.scale_x = static_cast<double>(nw) / img.width;
  t.scale_y = static_cast<double>(nh) / img.height;
  t.pad_x = (target - nw) / 2;
  t.pad_y = (target - nh) / 2;
  const Image resized = resize_bilinear(img, nw, nh);
  Image out(target, target, kPadValue);
  const int px = static_cast<int>(t.pad_x), py = static_cast<int>(t.pad_y);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < nh; ++y) {
      std::copy_n(&resized.data[(static_cast<std::size_t>(c) * nh + y) * nw], nw, &out.at(c, y + py, px));
    }
  }
  return {std::move(out), t};
}

// ---------------------------------------------------------------------------

namespace {

float sample_bilinear(const Image& img, int c, double sx, double sy) {
  sx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const float fx = static_cast<float>(sx - x0), fy = static_cast<float>(sy - y0);
  const float top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
  const float bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace

LabeledImage mosaic_at(const std::vector<LabeledImage>& samples, int size, int cx, int cy,
                       const MosaicOptions& opts) {
  if (samples.size() != 4) throw Error("mosaic: exactly four samples required");
  if (size <= 0 || cx < 0 || cy < 0 || cx > size || cy > size) throw Error("mosaic: center outside the canvas");
  LabeledImage out;
  out.pixels = Image(size, size, kPadValue);
  out.id = "mosaic";
  for (int q = 0; q < 4; ++q) {
    const LabeledImage& s = samples[q];
    if (s.pixels.empty()) throw Error("mosaic: empty source image");
    const bool right = q & 1, bottom = q & 2;
    const int qx0 = right ? cx : 0, qx1 = right ? size : cx;
    const int qy0 = bottom ? cy : 0, qy1 = bottom ? size : cy;
    const int qw = qx1 - qx0, qh = qy1 - qy0;
    if (qw <= 0 || qh <= 0) continue;
    const double r = std::max(static_cast<double>(qw) / s.pixels.width, static_cast<double>(qh) / s.pixels.height);
    const double ox = right ? cx : cx - r * s.pixels.width;
    const double oy = bottom ? cy : cy - r * s.pixels.height;
    for (int c = 0; c < 3; ++c) {
      for (int y = qy0; y < qy1; ++y) {
        const double sy = (y + 0.5 - oy) / r - 0.5;
        for (int x = qx0; x < qx1; ++x) {
          out.pixels.at(c, y, x) = sample_bilinear(s.pixels, c, (x + 0.5 - ox) / r - 0.5, sy);
        }
      }
    }
    for (const BBox& b : s.boxes) {
      const Box full{ox + (b.cx - b.w / 2) * s.pixels.width * r, oy + (b.cy - b.h / 2) * s.pixels.height * r,
                     ox + (b.cx + b.w / 2) * s.pixels.width * r, oy + (b.cy + b.h / 2) * s.pixels.height * r};
      const Box clipped{std::clamp<double>(full.x1, qx0, qx1), std::clamp<double>(full.y1, qy0, qy1),
                        std::clamp<double>(full.x2, qx0, qx1), std::clamp<double>(full.y2, qy0, qy1)};
      const double a = clipped.area();
      if (a <= 0 || a < opts.min_area_fraction * full.area() || a < opts.min_area_px) continue;
      BBox nb = to_center(clipped, b.class_id);
      nb.cx /= size;
      nb.cy /= size;
      nb.w /= size;
      nb.h /= size;
      out.boxes.push_back(nb);
    }
  }
  return out;
}

LabeledImage mosaic(const std::vector<LabeledImage>& samples, int size, Rng& rng, const MosaicOptions& opts) {
  if (samples.size() != 4) throw Error("mosaic: exactly four samples required");
  const int cx = static_cast<int>(std::floor(rng.uniform(opts.center_lo * size, opts.center_hi * size)));
  const int cy = static_cast<int>(std::floor(rng.uniform(opts.center_lo * size, opts.center_hi * size)));
  return mosaic_at(samples, size, cx, cy, opts);
}

void flip_horizontal(LabeledImage& img) {
  Image& p = img.pixels;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < p.height; ++y) {
      float* row = &p.at(c, y, 0);
      std::reverse(row, row + p.width);
    }
  }
  for (auto& b : img.boxes) b.cx = 1.0 - b.cx;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

std::vector<BBox> to_pixels(const std::vector<BBox>& normalized, int size) {
  std::vector<BBox> out = normalized;
  for (auto& b : out) {
    b.cx *= size;
    b.cy *= size;
    b.w *= size;
    b.h *= size;
  }
  return out;
}

// ---------------------------------------------------------------------------

BatchIterator::BatchIterator(const DatasetManifest& manifest, const std::string& split, BatchOptions opts)
    : samples_(&manifest.split(split)), opts_(opts) {
  if (samples_->empty()) throw DatasetError(DatasetErrc::empty_split, "split '" + split + "' has no images");
  if (opts_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (opts_.image_size <= 0 || opts_.image_size % 32 != 0) throw ConfigError("image size must be a multiple of 32");
  start_epoch(0);
}

void BatchIterator::start_epoch(int epoch) {
  epoch_ = epoch;
  cursor_ = 0;
  if (opts_.shuffle) {
    Rng rng(mix_seed(opts_.seed, static_cast<std::uint64_t>(epoch), 0x7065726dULL));
    order_ = seeded_permutation(samples_->size(), rng);
  } else {
    order_.resize(samples_->size());
    std::iota(order_.begin(), order_.end(), 0);
  }
}

std::size_t BatchIterator::num_batches() const {
  const std::size_t b = static_cast<std::size_t>(opts_.batch_size);
  return (samples_->size() + b - 1) / b;
}

const Image& BatchIterator::source(std::size_t index) const {
  auto it = cache_.find(index);
  if (it != cache_.end()) return *it->second;
  auto img = std::make_shared<Image>(load_image((*samples_)[index].image_path));
  if (cache_.size() < opts_.cache_images) {
    cache_[index] = img;
    return *img;
  }
  // Cache full: keep a single transient slot.
  static thread_local std::shared_ptr<Image> transient;
  transient = img;
  return *transient;
}

LabeledImage BatchIterator::letterboxed(std::size_t index) const {
  auto [img, t] = letterbox(source(index), opts_.image_size);
  LabeledImage out;
  out.pixels = std::move(img);
  out.id = (*samples_)[index].id;
  for (const auto& b : (*samples_)[index].boxes) out.boxes.push_back(t.forward(b));
  return out;
}

LabeledImage BatchIterator::produce(std::size_t position) const {
  const std::size_t index = order_.at(position);
  if (!opts_.augment) return letterboxed(index);
  Rng rng(mix_seed(opts_.seed, static_cast<std::uint64_t>(epoch_) + 1, position));
  LabeledImage out;
  if (rng.bernoulli(opts_.mosaic_prob)) {
    const std::size_t n = samples_->size();
    std::vector<std::size_t> picks{index};
    while (picks.size() < 4) {
      const std::size_t j = rng.below(n);
      if (n >= 4 && std::find(picks.begin(), picks.end(), j) != picks.end()) continue;
      picks.push_back(j);
    }
    std::vector<LabeledImage> parts;
    for (std::size_t j : picks) parts.push_back({source(j), (*samples_)[j].boxes, (*samples_)[j].id});
    out = mosaic(parts, opts_.image_size, rng, opts_.mosaic);
    out.id = (*samples_)[index].id;
  } else {
    out = letterboxed(index);
  }
  if (rng.bernoulli(opts_.flip_prob)) flip_horizontal(out);
  return out;
}

bool BatchIterator::next(Batch& batch) {
  const std::size_t n = samples_->size();
  if (cursor_ >= n) return false;
  const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(opts_.batch_size), n - cursor_);
  const int S = opts_.image_size;
  const std::size_t plane = static_cast<std::size_t>(3) * S * S;
  std::vector<float> data(B * plane);
  batch.boxes.assign(B, {});
  batch.indices.assign(B, 0);
  for (std::size_t i = 0; i < B; ++i) {
    LabeledImage li = produce(cursor_ + i);
    std::copy(li.pixels.data.begin(), li.pixels.data.end(), data.begin() + static_cast<std::ptrdiff_t>(i * plane));
    batch.boxes[i] = to_pixels(li.boxes, S);
    batch.indices[i] = order_[cursor_ + i];
  }
  batch.images = Tensor<float>::from_data({static_cast<std::int64_t>(B), 3, S, S}, std::move(data));
  cursor_ += B;
  return true;
}

}  // namespace hydet
