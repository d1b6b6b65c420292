// SPDX-License-Identifier: Apache-2.0
#include "amn/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace amn::plot {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 70;

std::string esc(const std::string &s) {
  std::string out;
  for (char c : s) {
    switch (c) {
    case '&': out += "&amp;"; break;
    case '<': out += "&lt;"; break;
    case '>': out += "&gt;"; break;
    case '"': out += "&quot;"; break;
    default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

void header(std::ostringstream &os, const std::string &title) {
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" "
     << "font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << esc(title) << "</text>\n";
}

void axes(std::ostringstream &os, double lo, double hi, const std::string &ylabel) {
  const double x0 = kLeft, y0 = kHeight - kBottom, x1 = kWidth - kRight, y1 = kTop;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    const double y = y0 - (y0 - y1) * i / 4.0;
    os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << num(y) << "\" x2=\"" << x0 << "\" y2=\""
       << num(y) << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << x0 - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">"
       << tick(v) << "</text>\n";
  }
  os << "<text x=\"16\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (y0 + y1) / 2 << ")\">" << esc(ylabel) << "</text>\n";
}

} // namespace

std::string loss_curves_svg(const std::vector<EpochRecord> &history, const std::string &title) {
  std::ostringstream os;
  header(os, title);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto &r : history)
    for (double v : {r.train_loss, r.val_loss})
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  lo = std::min(lo, 0.0);
  axes(os, lo, hi, "loss");
  const double x0 = kLeft, y0 = kHeight - kBottom, x1 = kWidth - kRight, y1 = kTop;
  const std::size_t n = history.size();
  auto px = [&](std::size_t i) { return n <= 1 ? (x0 + x1) / 2 : x0 + (x1 - x0) * i / (n - 1.0); };
  auto py = [&](double v) { return y0 - (y0 - y1) * (v - lo) / (hi - lo); };
  auto series = [&](auto value, const char *colour, const char *label, double ly) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = value(history[i]);
      if (std::isfinite(v))
        pts += num(px(i)) + "," + num(py(v)) + " ";
    }
    if (!pts.empty())
      os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\""
         << pts << "\"/>\n";
    os << "<rect x=\"" << x1 - 110 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"3\" fill=\""
       << colour << "\"/>\n<text x=\"" << x1 - 92 << "\" y=\"" << ly - 4 << "\">" << label
       << "</text>\n";
  };
  series([](const EpochRecord &r) { return r.train_loss; }, "#1f77b4", "train", kTop + 14);
  series([](const EpochRecord &r) { return r.val_loss; }, "#d62728", "validation", kTop + 30);
  for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, n / 10))
    os << "<text x=\"" << num(px(i)) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">"
       << history[i].epoch << "</text>\n";
  os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 20
     << "\" text-anchor=\"middle\">epoch</text>\n</svg>\n";
  return os.str();
}

std::string study_bars_svg(const std::vector<StudyCsvRow> &rows, const std::string &title) {
  std::ostringstream os;
  header(os, title);
  axes(os, 0.0, 1.0, "F1");
  const double x0 = kLeft, y0 = kHeight - kBottom, x1 = kWidth - kRight, y1 = kTop;
  const char *colours[3] = {"#1f77b4", "#ff7f0e", "#2ca02c"};
  const char *labels[3] = {"tagging", "segment", "event"};
  const double group = (x1 - x0) / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  const double bar = group * 0.8 / 3.0;
  auto py = [&](double v) { return y0 - (y0 - y1) * std::clamp(v, 0.0, 1.0); };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double means[3] = {rows[r].tagging_mean, rows[r].segment_mean, rows[r].event_mean};
    const double cis[3] = {rows[r].tagging_ci, rows[r].segment_ci, rows[r].event_ci};
    for (int m = 0; m < 3; ++m) {
      const double x = x0 + group * r + group * 0.1 + bar * m;
      os << "<rect x=\"" << num(x) << "\" y=\"" << num(py(means[m])) << "\" width=\"" << num(bar)
         << "\" height=\"" << num(y0 - py(means[m])) << "\" fill=\"" << colours[m] << "\"/>\n";
      if (cis[m] > 0.0) {
        const double cx = x + bar / 2;
        os << "<line x1=\"" << num(cx) << "\" y1=\"" << num(py(means[m] - cis[m])) << "\" x2=\""
           << num(cx) << "\" y2=\"" << num(py(means[m] + cis[m]))
           << "\" stroke=\"black\"/>\n";
      }
    }
    os << "<text x=\"" << num(x0 + group * (r + 0.5)) << "\" y=\"" << y0 + 16
       << "\" text-anchor=\"middle\">" << esc(rows[r].row) << "</text>\n";
  }
  for (int m = 0; m < 3; ++m)
    os << "<rect x=\"" << x0 + 10 + 90 * m << "\" y=\"" << kHeight - 30
       << "\" width=\"12\" height=\"12\" fill=\"" << colours[m] << "\"/>\n<text x=\""
       << x0 + 26 + 90 * m << "\" y=\"" << kHeight - 20 << "\">" << labels[m] << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

} // namespace amn::plot
