#pragma once

// Discrete architectures.
//
// Genotype file grammar:
//
//   # hwnas-genotype 1
//   seg_depth <int>
//   seg_m <int>
//   seg_filters <int>
//   qc_pairs <int>
//   qc_m <int>
//   qc_filters <int>
//   qc_growth <int>
//   <cell_kind> <source> <target> <op_id>     (one per searched edge)
//
// cell_kind is one of down, up, contracting, nonscaling; source and target
// are node indices as in cell.hpp; op_id is a primitive name. Edge lines
// appear grouped by kind in the order above and, within a kind, in cell
// edge order. A `zero` op marks an edge removed from the built network; it
// is accepted on every edge, including those whose candidate set has no
// zero op (path pruning).

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hwnas/qc_net.hpp"
#include "hwnas/seg_net.hpp"

namespace hwnas {

inline constexpr CellKind kSearchedKinds[] = {CellKind::Down, CellKind::Up, CellKind::Contracting,
                                              CellKind::NonScaling};

struct Genotype {
  SegNetConfig seg;
  QcNetConfig qc;
  std::map<CellKind, std::vector<PrimitiveOp>> ops;  // one op per edge

  // Throws when edge counts or op sets disagree with the structural config.
  void validate() const;
  EdgeChoices choices(CellKind kind) const;  // zero -> no candidates

  std::string serialize() const;
  static Genotype parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Genotype load(const std::filesystem::path& path);

  bool operator==(const Genotype& o) const;
};

// Per-edge argmax of the logits; ties go to the lowest candidate index.
Genotype derive(const ArchParams& alpha, const SegNetConfig& seg, const QcNetConfig& qc);

// Like derive, then every intermediate node keeps only its two strongest
// incoming edges (strength = largest non-zero probability); the rest become
// zero. Output edges of segmentation cells are left as derived.
Genotype derive_top2(const ArchParams& alpha, const SegNetConfig& seg, const QcNetConfig& qc);

// Reads the op list back from built networks.
Genotype genotype_of(const SegNet& seg, const QcNet& qc);

struct DerivedPipeline {
  Genotype genotype;
  SegNet seg;
  QcNet qc;
};

DerivedPipeline build(const Genotype& g, Rng& rng);

// Hand-designed reference: plain 3x3 convolutions on every edge, wider
// segmentation stem.
Genotype baseline_genotype(const SegNetConfig& seg, const QcNetConfig& qc);

}  // namespace hwnas
