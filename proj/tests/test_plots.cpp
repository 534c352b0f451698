#include <filesystem>

#include "doctest.h"
#include "hwnas/plots.hpp"
#include "hwnas/textio.hpp"

using namespace hwnas;
namespace fs = std::filesystem;

namespace {

History sample_history() {
  History h;
  h.seed = 2;
  for (int e = 1; e <= 4; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.phase = e <= 2 ? "warmup" : "search";
    r.ce = 1.0 / e;
    r.mse = 0.2 / e;
    r.lat_ms = 2.0 - 0.1 * e;
    r.entropy = 1.5 - 0.01 * e;
    h.epochs.push_back(r);
  }
  return h;
}

int count(const std::string& s, const std::string& needle) {
  int n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("cell rendering lists every searched edge") {
  const Genotype g = baseline_genotype({}, {});
  const std::string text = render_cells_text(g);
  CHECK(text.find("down cell (12 edges)\n") != std::string::npos);
  CHECK(text.find("up cell (12 edges)\n") != std::string::npos);
  CHECK(text.find("contracting cell (6 edges)\n") != std::string::npos);
  CHECK(text.find("nonscaling cell (6 edges)\n") != std::string::npos);
  CHECK(text.find("  in0 -> n2 : down_conv\n") != std::string::npos);
  CHECK(text.find("  n4 -> out : conv\n") != std::string::npos);
  CHECK(count(text, " -> ") == 36);

  const std::string dot = render_cells_dot(g);
  CHECK(count(dot, "digraph ") == 4);
  CHECK(count(dot, "[label=") == 36);
}

TEST_CASE("pruned edges are drawn dashed") {
  Genotype g = baseline_genotype({}, {});
  g.ops[CellKind::Up][0] = PrimitiveOp::Zero;
  CHECK(count(render_cells_dot(g), "style=dashed") == 1);
  CHECK(render_cells_text(g).find("  in0 -> n2 : zero\n") != std::string::npos);
}

TEST_CASE("plots regenerate identically and need a non-empty history") {
  const fs::path a = fs::temp_directory_path() / "hwnas_test_plots_a", b = fs::temp_directory_path() / "hwnas_test_plots_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const Genotype g = baseline_genotype({}, {});
  emit_plots(sample_history(), g, a);
  emit_plots(sample_history(), g, b);
  for (const char* f : {"loss.svg", "entropy.svg", "cells.txt", "cells.dot"}) {
    REQUIRE(fs::exists(a / f));
    CHECK(read_text(a / f) == read_text(b / f));
  }
  const std::string svg = read_text(a / "loss.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(count(svg, "<polyline") == 3);
  CHECK(svg.find("LAT (ms)") != std::string::npos);
  CHECK_THROWS_WITH(emit_plots(History{}, g, a), doctest::Contains("no epochs"));
}

TEST_CASE("trend slope") {
  CHECK(trend_slope({1, 3, 5, 7}) == doctest::Approx(2));
  CHECK(trend_slope({4, 4, 4}) == doctest::Approx(0));
  CHECK(trend_slope({5}) == 0);
}
