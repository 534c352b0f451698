#pragma once

// Plain-file visualizations of a search run.
//
//   loss.svg      CE, MSE and LAT (ms) per epoch, one panel each
//   entropy.svg   mean alpha entropy per epoch
//   cells.txt     every searched cell as an edge list with the chosen ops
//   cells.dot     the same cells as Graphviz digraphs

#include <filesystem>
#include <string>
#include <vector>

#include "hwnas/genotype.hpp"
#include "hwnas/search.hpp"

namespace hwnas {

struct Series {
  std::string name;
  std::vector<double> y;
};

// Stacked line panels sharing the epoch axis.
std::string svg_panels(const std::string& title, const std::vector<Series>& panels);

std::string render_cells_text(const Genotype& g);
std::string render_cells_dot(const Genotype& g);

// Writes the four files into `dir`; throws on an empty history.
void emit_plots(const History& h, const Genotype& g, const std::filesystem::path& dir);

// Least-squares slope of y against its index.
double trend_slope(const std::vector<double>& y);

}  // namespace hwnas
