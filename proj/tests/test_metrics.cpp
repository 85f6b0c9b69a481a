#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "smat/metrics.hpp"

using namespace smat;

namespace {

// pred/gt pair with an exact IoU of `frac` (shared corner, shrunk height)
std::pair<BoundingBox, BoundingBox> pair_with_iou(double frac) {
  BoundingBox gt{0, 0, 10, 10};
  BoundingBox pred{0, 0, 10, 10 * frac};
  return {pred, gt};
}

}  // namespace

TEST_CASE("average overlap and success rates on a hand-built video") {
  auto [p1, g1] = pair_with_iou(0.8);
  auto [p2, g2] = pair_with_iou(0.4);
  auto m = compute_metrics({{p1, p2}}, {{g1, g2}}, {"clip"});
  CHECK(m.ao == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(m.sr050 == doctest::Approx(0.5).epsilon(1e-12));  // strict: only 0.8
  CHECK(m.sr075 == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.op50 == m.sr050);
  CHECK(m.op75 == m.sr075);
  // centers are 1 px and 3 px off: both within 20 px
  CHECK(m.p == doctest::Approx(1.0));
  // normalized offsets: 1/8 passes 0.2, 3/4 fails
  CHECK(m.p_norm == doctest::Approx(0.5));
  CHECK(m.per_video.at("clip").frames == 2);
}

TEST_CASE("perfect tracking scores one everywhere except the discretized curve") {
  std::vector<BoundingBox> gt;
  for (int i = 0; i < 7; ++i)
    gt.push_back({10.0 + i, 20.0, 30.0, 40.0});
  auto m = compute_metrics({gt}, {gt}, {"ideal"});
  CHECK(m.ao == 1.0);
  CHECK(m.sr050 == 1.0);
  CHECK(m.sr075 == 1.0);
  CHECK(m.p == 1.0);
  CHECK(m.p_norm == 1.0);
  // IoU == 1 clears 100 of the 101 strict thresholds
  CHECK(m.auc == doctest::Approx(100.0 / 101.0).epsilon(1e-12));
  CHECK(std::abs(m.auc - m.ao) < 0.01);
}

TEST_CASE("area under the success curve stays within a percent of overlap") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(5, 50);
  std::vector<BoundingBox> pred, gt;
  for (int i = 0; i < 200; ++i) {
    BoundingBox g{u(rng), u(rng), u(rng), u(rng)};
    BoundingBox p{g.x + u(rng) * 0.2, g.y + u(rng) * 0.2, g.w, g.h};
    pred.push_back(p);
    gt.push_back(g);
  }
  auto m = compute_metrics({pred}, {gt}, {"drift"});
  CHECK(std::abs(m.auc - m.ao) < 0.01);
  CHECK(m.ao > 0.0);
  CHECK(m.ao < 1.0);
}

TEST_CASE("videos average uniformly regardless of length") {
  // one long perfect clip, one short total miss: the summary is the mean of
  // the per-video numbers, not frame-weighted
  std::vector<BoundingBox> long_gt(50, BoundingBox{0, 0, 10, 10});
  std::vector<BoundingBox> short_gt(2, BoundingBox{0, 0, 10, 10});
  std::vector<BoundingBox> miss(2, BoundingBox{500, 500, 10, 10});
  auto m = compute_metrics({long_gt, miss}, {long_gt, short_gt}, {"a", "b"});
  CHECK(m.ao == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.sr050 == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.per_video.at("a").ao == 1.0);
  CHECK(m.per_video.at("b").ao == 0.0);
}

TEST_CASE("summary numbers equal an independent recount") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 100);
  std::uniform_real_distribution<double> us(4, 60);
  std::vector<std::vector<BoundingBox>> pred, gt;
  std::vector<std::string> names;
  for (int v = 0; v < 5; ++v) {
    std::vector<BoundingBox> pv, gv;
    int frames = 3 + v * 2;
    for (int i = 0; i < frames; ++i) {
      gv.push_back({u(rng), u(rng), us(rng), us(rng)});
      pv.push_back({u(rng), u(rng), us(rng), us(rng)});
    }
    pred.push_back(pv);
    gt.push_back(gv);
    names.push_back("v" + std::to_string(v));
  }
  auto m = compute_metrics(pred, gt, names);

  double ao = 0, sr50 = 0, sr75 = 0, auc = 0, p = 0, pn = 0;
  for (size_t v = 0; v < gt.size(); ++v) {
    double n = (double)gt[v].size();
    double vao = 0, v50 = 0, v75 = 0, vauc = 0, vp = 0, vpn = 0;
    for (size_t i = 0; i < gt[v].size(); ++i) {
      double ov = iou(pred[v][i], gt[v][i]);
      vao += ov;
      if (ov > 0.5) v50 += 1;
      if (ov > 0.75) v75 += 1;
      if (center_distance(pred[v][i], gt[v][i]) <= 20.0) vp += 1;
      double dx = (pred[v][i].cx() - gt[v][i].cx()) / gt[v][i].w;
      double dy = (pred[v][i].cy() - gt[v][i].cy()) / gt[v][i].h;
      if (std::hypot(dx, dy) <= 0.2) vpn += 1;
    }
    for (int t = 0; t <= 100; ++t) {
      int ok = 0;
      for (size_t i = 0; i < gt[v].size(); ++i)
        if (iou(pred[v][i], gt[v][i]) > t / 100.0) ++ok;
      vauc += ok / n;
    }
    ao += vao / n;
    sr50 += v50 / n;
    sr75 += v75 / n;
    auc += vauc / 101.0;
    p += vp / n;
    pn += vpn / n;
  }
  double nv = (double)gt.size();
  CHECK(m.ao == ao / nv);
  CHECK(m.sr050 == sr50 / nv);
  CHECK(m.sr075 == sr75 / nv);
  CHECK(m.auc == auc / nv);
  CHECK(m.p == p / nv);
  CHECK(m.p_norm == pn / nv);
}

TEST_CASE("metric input validation") {
  std::vector<BoundingBox> two(2, BoundingBox{0, 0, 5, 5});
  std::vector<BoundingBox> three(3, BoundingBox{0, 0, 5, 5});
  CHECK_THROWS(compute_metrics({two}, {three}, {"clip"}));
  CHECK_THROWS(compute_metrics({two}, {two}, {"a", "b"}));
  CHECK_THROWS(compute_metrics({}, {}, {}));
  CHECK_THROWS(compute_metrics({{}}, {{}}, {"empty"}));
}

TEST_CASE("annotation files round trip") {
  std::vector<BoundingBox> boxes = {
      {1.25, 2.5, 30.125, 40.0}, {-3.5, 7.0, 11.75, 22.25}, {0, 0, 1, 1}};
  const char* path = "/tmp/smat_ann_test.txt";
  save_annotations(path, boxes);
  auto back = load_annotations(path);
  REQUIRE(back.size() == boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) {
    CHECK(back[i].x == doctest::Approx(boxes[i].x).epsilon(1e-6));
    CHECK(back[i].y == doctest::Approx(boxes[i].y).epsilon(1e-6));
    CHECK(back[i].w == doctest::Approx(boxes[i].w).epsilon(1e-6));
    CHECK(back[i].h == doctest::Approx(boxes[i].h).epsilon(1e-6));
  }
  std::remove(path);
}

TEST_CASE("malformed annotation lines name the offending line") {
  const char* path = "/tmp/smat_ann_bad.txt";
  {
    std::ofstream f(path);
    f << "12 34 5 6\n";  // spaces, not commas
  }
  bool threw = false;
  try {
    load_annotations(path);
  } catch (const std::exception& e) {
    threw = true;
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
  CHECK(threw);
  {
    std::ofstream f(path);
    f << "\n\n";
  }
  CHECK_THROWS(load_annotations(path));  // no boxes at all
  CHECK_THROWS(load_annotations("/tmp/smat_no_such_file.txt"));
  std::remove(path);
}

TEST_CASE("json report carries every summary key") {
  auto [p1, g1] = pair_with_iou(0.8);
  auto m = compute_metrics({{p1, p1}}, {{g1, g1}}, {"clip"});
  auto j = nlohmann::json::parse(metrics_to_json(m));
  for (const char* key :
       {"ao", "sr050", "sr075", "auc", "p", "p_norm", "op50", "op75"})
    REQUIRE(j.contains(key));
  CHECK(j["ao"].get<double>() == doctest::Approx(0.8));
  CHECK(j["op50"].get<double>() == j["sr050"].get<double>());
  REQUIRE(j.contains("per_video"));
  CHECK(j["per_video"]["clip"]["frames"].get<int>() == 2);
}
