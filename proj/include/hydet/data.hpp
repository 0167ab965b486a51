#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hydet/bbox.hpp"
#include "hydet/image.hpp"
#include "hydet/rng.hpp"
#include "hydet/tensor.hpp"

namespace hydet {

/// One image of a split with its normalized labels.
struct Sample {
  std::string id;          // file stem
  std::string image_path;
  std::string label_path;  // empty when the image has no label file
  std::vector<BBox> boxes;  // normalized center form
};

/// Parsed dataset layout:
///   <root>/images/<split>/*.{png,jpg,jpeg,ppm}
///   <root>/labels/<split>/<stem>.txt   lines "class cx cy w h"
struct DatasetManifest {
  std::string root;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<Sample>> splits;
  std::vector<std::int64_t> class_histogram;  // instances over all splits

  int num_classes() const { return static_cast<int>(class_names.size()); }
  const std::vector<Sample>& split(const std::string& name) const;
  std::string class_name(int id) const;
};

/// Parses one label file body; throws DatasetError with file:line context.
std::vector<BBox> parse_labels(const std::string& text, int num_classes, const std::string& source);

/// Manifest file (key = value):
///   root = <dir>           relative paths resolve against the manifest
///   names = a, b, c        or  names_file = <file>, one name per line
///   nc = <int>             optional cross-check
///   splits = train, val    optional; default: whichever of train/val/test exist
DatasetManifest load_dataset(const std::string& manifest_path);

/// Maps coordinates between a source image and its letterboxed square.
struct LetterboxTransform {
  int src_w = 0, src_h = 0, target = 0;
  double scale_x = 1, scale_y = 1;  // resized extent / source extent
  double pad_x = 0, pad_y = 0;      // left / top padding in pixels

  /// Normalized source box -> normalized letterbox box.
  BBox forward(const BBox& b) const;
  BBox inverse(const BBox& b) const;
  /// Pixel box in the letterbox -> pixel box in the source image.
  Box to_source(const Box& b) const;
};

inline constexpr float kPadValue = 114.0f / 255.0f;

/// Aspect-preserving bilinear resize with symmetric gray padding.
std::pair<Image, LetterboxTransform> letterbox(const Image& img, int target);

struct LabeledImage {
  Image pixels;
  std::vector<BBox> boxes;  // normalized
  std::string id;
};

struct MosaicOptions {
  double center_lo = 0.25, center_hi = 0.75;
  double min_area_fraction = 0.10;
  double min_area_px = 4.0;
};

/// Four-image mosaic with the center drawn from rng.
LabeledImage mosaic(const std::vector<LabeledImage>& samples, int size, Rng& rng, const MosaicOptions& opts = {});

/// Same with an explicit integer center (cx, cy). Quadrants are 0 top-left,
/// 1 top-right, 2 bottom-left, 3 bottom-right; each source is scaled to
/// cover its quadrant and anchored at the center corner.
LabeledImage mosaic_at(const std::vector<LabeledImage>& samples, int size, int cx, int cy,
                       const MosaicOptions& opts = {});

/// Mirrors pixels and labels about the vertical axis.
void flip_horizontal(LabeledImage& img);

struct BatchOptions {
  int batch_size = 16;
  int image_size = 640;
  bool augment = true;
  double mosaic_prob = 1.0;
  double flip_prob = 0.5;
  bool shuffle = true;
  std::uint64_t seed = 0;
  MosaicOptions mosaic;
  std::size_t cache_images = 512;  // decoded images kept in memory
};

struct Batch {
  Tensor<float> images;                  // [B,3,S,S]
  std::vector<std::vector<BBox>> boxes;  // pixels in the S x S canvas
  std::vector<std::size_t> indices;      // sample indices within the split
};

/// Deterministic batch stream over one split. Sample order per epoch is a
/// permutation seeded by (seed, epoch); every sample's pixels depend only on
/// (seed, epoch, position). The last batch may be short.
class BatchIterator {
 public:
  BatchIterator(const DatasetManifest& manifest, const std::string& split, BatchOptions opts);

  void start_epoch(int epoch);
  std::size_t num_batches() const;
  std::size_t num_samples() const { return samples_->size(); }
  bool next(Batch& batch);

  /// The sample at `position` of the current epoch's order, as it would be
  /// delivered (letterboxed or augmented).
  LabeledImage produce(std::size_t position) const;

  /// Decoded source image (cached).
  const Image& source(std::size_t index) const;

 private:
  LabeledImage letterboxed(std::size_t index) const;

  const std::vector<Sample>* samples_;
  BatchOptions opts_;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
  mutable std::map<std::size_t, std::shared_ptr<Image>> cache_;
};

/// Fisher-Yates permutation of [0, n) driven by rng.
std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng);

/// Normalized boxes -> pixel boxes on a square canvas.
std::vector<BBox> to_pixels(const std::vector<BBox>& normalized, int size);

}  // namespace hydet
