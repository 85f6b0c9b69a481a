#include "smat/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace smat {

namespace {

VideoMetrics video_metrics(const std::vector<BoundingBox>& pred,
                           const std::vector<BoundingBox>& gt) {
  VideoMetrics m;
  m.frames = (int)gt.size();
  std::vector<double> ious(gt.size());
  int n50 = 0, n75 = 0, np = 0, npn = 0;
  double iou_sum = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    double v = iou(pred[i], gt[i]);
    ious[i] = v;
    iou_sum += v;
    if (v > 0.5) ++n50;
    if (v > 0.75) ++n75;
    if (center_distance(pred[i], gt[i]) <= 20.0) ++np;
    double dx = (pred[i].cx() - gt[i].cx()) / gt[i].w;
    double dy = (pred[i].cy() - gt[i].cy()) / gt[i].h;
    if (std::hypot(dx, dy) <= 0.2) ++npn;
  }
  double n = (double)gt.size();
  m.ao = iou_sum / n;
  m.sr050 = n50 / n;
  m.sr075 = n75 / n;
  m.p = np / n;
  m.p_norm = npn / n;
  // success curve over the fine threshold grid
  double auc_sum = 0;
  for (int t = 0; t <= 100; ++t) {
    double tau = t / 100.0;
    int ok = 0;
    for (double v : ious)
      if (v > tau) ++ok;
    auc_sum += ok / n;
  }
  m.auc = auc_sum / 101.0;
  return m;
}

}  // namespace

TrackMetrics compute_metrics(const std::vector<std::vector<BoundingBox>>& pred,
                             const std::vector<std::vector<BoundingBox>>& gt,
                             const std::vector<std::string>& names) {
  if (pred.size() != gt.size() || pred.size() != names.size())
    throw std::invalid_argument(
        "compute_metrics: got " + std::to_string(pred.size()) +
        " prediction lists, " + std::to_string(gt.size()) + " groundtruth lists, " +
        std::to_string(names.size()) + " names");
  if (pred.empty()) throw std::invalid_argument("compute_metrics: no videos");
  TrackMetrics out;
  for (std::size_t v = 0; v < gt.size(); ++v) {
    if (pred[v].size() != gt[v].size())
      throw std::invalid_argument("compute_metrics: video '" + names[v] + "' has " +
                                  std::to_string(pred[v].size()) + " predictions vs " +
                                  std::to_string(gt[v].size()) + " groundtruth boxes");
    if (gt[v].empty())
      throw std::invalid_argument("compute_metrics: video '" + names[v] +
                                  "' is empty");
    auto m = video_metrics(pred[v], gt[v]);
    out.per_video[names[v]] = m;
    out.ao += m.ao;
    out.sr050 += m.sr050;
    out.sr075 += m.sr075;
    out.auc += m.auc;
    out.p += m.p;
    out.p_norm += m.p_norm;
  }
  double n = (double)gt.size();
  out.ao /= n;
  out.sr050 /= n;
  out.sr075 /= n;
  out.auc /= n;
  out.p /= n;
  out.p_norm /= n;
  out.op50 = out.sr050;
  out.op75 = out.sr075;
  return out;
}

std::vector<BoundingBox> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_annotations: cannot open " + path);
  std::vector<BoundingBox> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream ss(line);
    BoundingBox b;
    char c1, c2, c3;
    if (!(ss >> b.x >> c1 >> b.y >> c2 >> b.w >> c3 >> b.h) || c1 != ',' ||
        c2 != ',' || c3 != ',')
      throw std::runtime_error("load_annotations: " + path + " line " +
                               std::to_string(lineno) +
                               ": expected x,y,w,h, got '" + line + "'");
    boxes.push_back(b);
  }
  if (boxes.empty())
    throw std::runtime_error("load_annotations: " + path + " has no boxes");
  return boxes;
}

void save_annotations(const std::string& path,
                      const std::vector<BoundingBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_annotations: cannot open " + path);
  out.precision(6);
  out << std::fixed;
  for (const auto& b : boxes)
    out << b.x << "," << b.y << "," << b.w << "," << b.h << "\n";
  if (!out) throw std::runtime_error("save_annotations: write failed for " + path);
}

std::string metrics_to_json(const TrackMetrics& m) {
  nlohmann::json j;
  j["ao"] = m.ao;
  j["sr050"] = m.sr050;
  j["sr075"] = m.sr075;
  j["auc"] = m.auc;
  j["p"] = m.p;
  j["p_norm"] = m.p_norm;
  j["op50"] = m.op50;
  j["op75"] = m.op75;
  nlohmann::json pv = nlohmann::json::object();
  for (const auto& [name, v] : m.per_video) {
    pv[name] = {{"ao", v.ao},       {"sr050", v.sr050}, {"sr075", v.sr075},
                {"auc", v.auc},     {"p", v.p},         {"p_norm", v.p_norm},
                {"frames", v.frames}};
  }
  j["per_video"] = pv;
  return j.dump(2);
}

}  // namespace smat
