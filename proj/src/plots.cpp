#include "hwnas/plots.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "hwnas/textio.hpp"

namespace hwnas {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string node_name(CellKind k, int node, int m) {
  if (is_seg_kind(k)) {
    if (node < 2) return node == 0 ? "in0" : "in1";
    if (node == m + 2) return "out";
    return "n" + std::to_string(node);
  }
  if (node == 0) return "in";
  return "n" + std::to_string(node);
}

}  // namespace

std::string svg_panels(const std::string& title, const std::vector<Series>& panels) {
  const int width = 640, panel_h = 160, top = 30, left = 70, right = 20, gap = 30;
  const int height = top + static_cast<int>(panels.size()) * (panel_h + gap);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const auto& s = panels[p];
    const int y0 = top + static_cast<int>(p) * (panel_h + gap);
    const int pw = width - left - right;
    os << "<rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << pw << "\" height=\"" << panel_h
       << "\" fill=\"none\" stroke=\"#888\"/>\n";
    os << "<text x=\"" << left + 6 << "\" y=\"" << y0 + 14 << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.name
       << "</text>\n";
    if (s.y.empty()) continue;
    double lo = *std::min_element(s.y.begin(), s.y.end()), hi = *std::max_element(s.y.begin(), s.y.end());
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    os << "<text x=\"" << left - 6 << "\" y=\"" << y0 + 10 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
       << label(hi) << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << y0 + panel_h << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
       << label(lo) << "</text>\n";
    os << "<text x=\"" << left + pw << "\" y=\"" << y0 + panel_h + 14
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">epoch " << s.y.size() << "</text>\n";
    os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
    const std::size_t n = s.y.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = left + (n == 1 ? pw / 2.0 : pw * static_cast<double>(i) / (n - 1));
      const double y = y0 + panel_h - (s.y[i] - lo) / (hi - lo) * panel_h;
      os << (i ? " " : "") << num(x) << "," << num(y);
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_cells_text(const Genotype& g) {
  std::ostringstream os;
  for (CellKind k : kSearchedKinds) {
    const int m = is_seg_kind(k) ? g.seg.m : g.qc.m;
    const auto specs = cell_edges(k, m);
    os << cell_kind_name(k) << " cell (" << specs.size() << " edges)\n";
    for (std::size_t e = 0; e < specs.size(); ++e)
      os << "  " << node_name(k, specs[e].source, m) << " -> " << node_name(k, specs[e].target, m) << " : "
         << op_name(g.ops.at(k)[e]) << "\n";
  }
  return os.str();
}

std::string render_cells_dot(const Genotype& g) {
  std::ostringstream os;
  for (CellKind k : kSearchedKinds) {
    const int m = is_seg_kind(k) ? g.seg.m : g.qc.m;
    const auto specs = cell_edges(k, m);
    os << "digraph " << cell_kind_name(k) << " {\n  rankdir=LR;\n";
    for (std::size_t e = 0; e < specs.size(); ++e) {
      const PrimitiveOp op = g.ops.at(k)[e];
      os << "  " << node_name(k, specs[e].source, m) << " -> " << node_name(k, specs[e].target, m) << " [label=\""
         << op_name(op) << "\"" << (op == PrimitiveOp::Zero ? ", style=dashed" : "") << "];\n";
    }
    if (!is_seg_kind(k))
      for (int n = 1; n <= m; ++n) os << "  n" << n << " -> out [style=dotted];\n";
    else
      for (int n = 2; n <= m + 1; ++n) os << "  n" << n << " -> out [style=dotted];\n";
    os << "}\n";
  }
  return os.str();
}

void emit_plots(const History& h, const Genotype& g, const std::filesystem::path& dir) {
  if (h.epochs.empty()) throw std::invalid_argument("emit_plots: history has no epochs");
  std::filesystem::create_directories(dir);
  Series ce{"CE", {}}, mse{"MSE", {}}, lat{"LAT (ms)", {}}, ent{"alpha entropy (nats)", {}};
  for (const auto& e : h.epochs) {
    ce.y.push_back(e.ce);
    mse.y.push_back(e.mse);
    lat.y.push_back(e.lat_ms);
    ent.y.push_back(e.entropy);
  }
  write_text(dir / "loss.svg", svg_panels("search losses, seed " + std::to_string(h.seed), {ce, mse, lat}));
  write_text(dir / "entropy.svg", svg_panels("architecture entropy, seed " + std::to_string(h.seed), {ent}));
  write_text(dir / "cells.txt", render_cells_text(g));
  write_text(dir / "cells.dot", render_cells_dot(g));
}

double trend_slope(const std::vector<double>& y) {
  const double n = static_cast<double>(y.size());
  if (y.size() < 2) return 0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sx += i;
    sy += y[i];
    sxx += static_cast<double>(i) * i;
    sxy += i * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace hwnas
