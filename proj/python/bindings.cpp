#include <array>
#include <tuple>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hydet/checkpoint.hpp"
#include "hydet/data.hpp"
#include "hydet/loss.hpp"
#include "hydet/metrics.hpp"
#include "hydet/model.hpp"
#include "hydet/postprocess.hpp"
#include "hydet/trainer.hpp"

namespace py = pybind11;
using namespace hydet;

using Box4 = std::array<double, 4>;

static Box to_box(const Box4& b) { return {b[0], b[1], b[2], b[3]}; }

static std::vector<int> nms_indices(const std::vector<Box4>& boxes, const std::vector<double>& scores,
                                    const std::vector<int>& classes, double iou_threshold, bool class_aware) {
  if (boxes.size() != scores.size() || boxes.size() != classes.size()) throw Error("nms: length mismatch");
  std::vector<Detection> d;
  for (std::size_t i = 0; i < boxes.size(); ++i) d.push_back({to_box(boxes[i]), classes[i], scores[i], static_cast<int>(i)});
  std::vector<int> keep;
  for (const auto& k : nms(d, iou_threshold, class_aware)) keep.push_back(k.image_id);
  return keep;
}

static double ap(const std::vector<std::tuple<Box4, int, double, int>>& dets,
                 const std::vector<std::tuple<Box4, int, int>>& gts, double iou_threshold) {
  std::vector<Detection> d;
  for (const auto& [b, c, s, im] : dets) d.push_back({to_box(b), c, s, im});
  std::vector<GroundTruth> g;
  for (const auto& [b, c, im] : gts) g.push_back({to_box(b), c, im});
  return average_precision(d, g, iou_threshold);
}

static py::dict summary(const std::map<std::string, std::string>& overrides, int input_size) {
  KeyValueConfig kv;
  for (const auto& [k, v] : overrides) kv.set(k, v);
  const ModelConfig cfg = ModelConfig::from_kv(kv);
  Detector<float> m(cfg);
  const int size = input_size > 0 ? input_size : cfg.input_size;
  py::dict out;
  out["params"] = count_params(m);
  out["flops"] = count_flops(m, size);
  out["input_size"] = size;
  return out;
}

static std::vector<std::tuple<Box4, int, double>> detect(const std::string& weights, const std::string& image,
                                                         double conf, double iou) {
  auto model = load_checkpoint(weights);
  const int size = model->config().input_size;
  auto [lb, tf] = letterbox(load_image(image), size);
  model->set_mode(NormMode::eval);
  NoGradGuard ng;
  PostprocessOptions o;
  o.conf_threshold = conf;
  o.iou_threshold = iou;
  const auto dets = postprocess(model->forward(Tensor<float>::from_data({1, 3, size, size}, lb.data)), size, size, o)[0];
  std::vector<std::tuple<Box4, int, double>> out;
  for (const auto& d : dets) {
    const Box b = tf.to_source(d.box);
    out.emplace_back(Box4{b.x1, b.y1, b.x2, b.y2}, d.class_id, d.score);
  }
  return out;
}

PYBIND11_MODULE(_hydet, m) {
  m.def("iou", [](const Box4& a, const Box4& b) { return iou(to_box(a), to_box(b)); });
  m.def("nms", &nms_indices, py::arg("boxes"), py::arg("scores"), py::arg("classes"), py::arg("iou_threshold") = 0.45,
        py::arg("class_aware") = true);
  m.def("dfl_decode", [](const std::vector<double>& p) { return dfl_decode(p); });
  m.def("ciou_loss", [](const Box4& p, const Box4& t) { return ciou_loss(to_center(to_box(p)), to_center(to_box(t))).loss; });
  m.def("bce", [](const std::vector<double>& p, const std::vector<double>& y) {
    const auto n = static_cast<std::int64_t>(p.size());
    return bce(Tensor<double>::from_data({n}, p), Tensor<double>::from_data({static_cast<std::int64_t>(y.size())}, y)).item();
  });
  m.def("average_precision", &ap, py::arg("detections"), py::arg("ground_truths"), py::arg("iou_threshold") = 0.5);
  m.def("lr_at", [](double epoch, int epochs, double lr0, double lrf) {
    TrainConfig c;
    c.epochs = epochs;
    c.lr0 = lr0;
    c.lrf = lrf;
    return lr_at(epoch, c);
  });
  m.def("model_summary", &summary, py::arg("config") = std::map<std::string, std::string>{},
        py::arg("input_size") = 0);
  m.def("detect", &detect, py::arg("weights"), py::arg("image"), py::arg("conf") = 0.25, py::arg("iou") = 0.45);
}
