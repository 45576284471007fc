#pragma once

// Loss-curve charts and qualitative comparison panels (OpenCV rasterization).

#include "apma/checkpoint.hpp"
#include "apma/datapipe.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace apma {

inline constexpr int kPanelGap = 4;

/// One row: input | ground truth | one binarized prediction per run, separated
/// by `kPanelGap` columns of mid gray. The gt column is the label mask at 0/255.
inline cv::Mat comparison_panel(const Image& input, const Mask& gt, const std::vector<Mask>& predictions) {
  if (gt.height != input.height || gt.width != input.width) throw DataError("panel: label dimensions differ from input");
  const int h = static_cast<int>(input.height), w = static_cast<int>(input.width);
  const int cols = 2 + static_cast<int>(predictions.size());
  cv::Mat panel(h, cols * w + (cols - 1) * kPanelGap, CV_8U, cv::Scalar(128));
  auto tile = [&](int k) { return panel(cv::Rect(k * (w + kPanelGap), 0, w, h)); };
  cv::Mat in = tile(0), g = tile(1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto sy = static_cast<std::size_t>(y), sx = static_cast<std::size_t>(x);
      in.at<std::uint8_t>(y, x) = quantize(input.at(sy, sx));
      g.at<std::uint8_t>(y, x) = gt.at(sy, sx) ? 255 : 0;
    }
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const auto& p = predictions[k];
    if (p.height != input.height || p.width != input.width) throw DataError("panel: prediction dimensions differ");
    cv::Mat t = tile(static_cast<int>(k) + 2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at<std::uint8_t>(y, x) = p.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) ? 255 : 0;
  }
  return panel;
}

/// Line chart of every non-constant loss term in `rows` (log-free, min-max scaled per chart).
inline cv::Mat loss_chart(const std::vector<HistoryRow>& rows, const std::string& title) {
  const int W = 800, H = 480, L = 60, R = 170, T = 40, B = 50;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(img, title, {L, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  struct Series {
    const char* name;
    double LossValues::*field;
    cv::Scalar color;
  };
  const Series series[] = {{"seg", &LossValues::seg, {200, 60, 20}},
                           {"rec", &LossValues::rec, {30, 140, 30}},
                           {"d_pred", &LossValues::d_pred_loss, {20, 20, 200}},
                           {"d_feat", &LossValues::d_feat_loss, {160, 30, 160}},
                           {"g_pred", &LossValues::g_pred_loss, {0, 140, 220}},
                           {"g_feat", &LossValues::g_feat_loss, {120, 120, 0}}};
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& r : rows)
    for (const auto& s : series) {
      lo = std::min(lo, r.loss.*s.field);
      hi = std::max(hi, r.loss.*s.field);
    }
  cv::rectangle(img, {L, T}, {W - R, H - B}, {0, 0, 0});
  if (rows.size() < 2 || !(hi > lo)) return img;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", hi);
  cv::putText(img, buf, {5, T + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  std::snprintf(buf, sizeof buf, "%.3g", lo);
  cv::putText(img, buf, {5, H - B}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  std::snprintf(buf, sizeof buf, "iter %zu", rows.back().iter);
  cv::putText(img, buf, {W - R - 70, H - B + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  int legend_y = T + 15;
  for (const auto& s : series) {
    const bool used = std::any_of(rows.begin(), rows.end(), [&](const HistoryRow& r) { return r.loss.*s.field != 0; });
    if (!used) continue;
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double fx = static_cast<double>(i) / static_cast<double>(rows.size() - 1);
      const double fy = (rows[i].loss.*s.field - lo) / (hi - lo);
      pts.emplace_back(L + static_cast<int>(std::lround(fx * (W - L - R))), H - B - static_cast<int>(std::lround(fy * (H - T - B))));
    }
    cv::polylines(img, pts, false, s.color, 1, cv::LINE_AA);
    cv::line(img, {W - R + 10, legend_y - 4}, {W - R + 30, legend_y - 4}, s.color, 2);
    cv::putText(img, s.name, {W - R + 36, legend_y}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
    legend_y += 20;
  }
  return img;
}

}  // namespace apma
