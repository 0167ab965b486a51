#pragma once

#include <vector>

namespace hydet {

/// Center-format box; pixels unless stated otherwise.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;
  int class_id = -1;
  double score = 0;
};

/// Corner-format box (x1 <= x2, y1 <= y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const;
  bool operator==(const Box&) const = default;
};

Box to_corners(const BBox& b);
BBox to_center(const Box& b, int class_id = -1, double score = 0);

double intersection(const Box& a, const Box& b);
/// Zero when the union is empty.
double iou(const Box& a, const Box& b);
/// Row-major |a| x |b| IoU table.
std::vector<double> iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b);

/// A scored prediction in image pixels.
struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
  int image_id = 0;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
  int image_id = 0;
};

}  // namespace hydet
