#pragma once

// Cell DAGs shared by both supernets and their derived networks.
//
// Segmentation cells (Down/Up): nodes 0 and 1 are the two preprocessed cell
// inputs, nodes 2..m+1 are intermediate, node m+2 is the output. Every
// intermediate node receives one edge from each input (Down or Up set) and
// one from every earlier intermediate node (Normal set); every intermediate
// node also has a Normal-set edge into the output node. The output is the
// sum of all intermediate nodes plus the contributions of those output
// edges, giving 2m + m(m+1)/2 searched edges.
//
// Quality-control cells (Contracting/NonScaling): node 0 is the single
// input, nodes 1..m are intermediate. Each intermediate node receives one
// edge from the input (Down set for Contracting, Normal for NonScaling) and
// one from every earlier intermediate node, m + m(m-1)/2 edges in total.
// The output is the sum of the intermediate nodes; the residual path is
// owned by the quality-control network.
//
// An edge holds the candidate ops it mixes. Supernet edges hold the whole
// set; derived edges hold exactly one op, or none when the edge was pruned.

#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "hwnas/lut_key.hpp"
#include "hwnas/primitives.hpp"

namespace hwnas {

std::string_view cell_kind_name(CellKind kind);
std::optional<CellKind> parse_cell_kind(std::string_view name);
bool is_seg_kind(CellKind kind);

struct EdgeSpec {
  int source = 0;
  int target = 0;
  OpSet set = OpSet::Normal;
};

std::vector<EdgeSpec> cell_edges(CellKind kind, int m);
int searched_edge_count(CellKind kind, int m);

// Candidate ops per edge, in edge order.
using EdgeChoices = std::vector<std::vector<PrimitiveOp>>;
EdgeChoices full_choices(CellKind kind, int m);

// Per-kind, per-edge mixing weights (probabilities over the edge's candidates).
using ArchWeights = std::map<CellKind, std::vector<Tensor>>;

// Architecture logits: one vector per edge per cell kind, shared by every
// cell of that kind.
struct ArchParams {
  std::map<CellKind, std::vector<Tensor>> logits;

  static ArchParams zeros(const std::vector<CellKind>& kinds, int m);
  ArchWeights probabilities() const;
  std::vector<Tensor> tensors() const;
  ArchParams clone() const;
  StateDict state();
};

class Cell {
 public:
  // All edge ops run at `channels` in and out.
  Cell(CellKind kind, int m, int channels, const EdgeChoices& choices, Rng& rng);

  CellKind kind() const { return kind_; }
  int m() const { return m_; }
  int channels() const { return channels_; }
  const std::vector<EdgeSpec>& edges() const { return specs_; }

  // `inputs` holds 2 tensors for segmentation cells, 1 for QC cells, all of
  // the same shape. `weights` (one tensor per edge) is required whenever an
  // edge has more than one candidate. Returns nullopt when every path into
  // the output was pruned.
  std::optional<Tensor> forward(const std::vector<Tensor>& inputs, const std::vector<Tensor>* weights, bool training);

  EdgeChoices choices() const;
  OpInstance& op(int edge, int k) { return ops_.at(edge).at(k); }
  int output_extent(int in_extent) const;
  std::int64_t flops(const Shape& input) const;
  std::vector<EdgeSite> edge_sites(int cell_index, const Shape& input) const;
  void collect(StateDict& sd, const std::string& prefix);

 private:
  Shape node_shape(int node, const Shape& input) const;

  CellKind kind_;
  int m_, channels_, inputs_;
  std::vector<EdgeSpec> specs_;
  std::vector<std::vector<OpInstance>> ops_;
  std::vector<std::vector<int>> incoming_;  // edge indices per target node
};

// ReLU -> 1x1 conv (stride 1 or 2) -> affine BN.
struct Preprocess {
  Preprocess() = default;
  Preprocess(int cin, int cout, int stride, Rng& rng);

  Tensor forward(const Tensor& x, bool training);
  std::int64_t flops(const Shape& in) const { return conv.flops(in); }
  Shape output_shape(const Shape& in) const { return conv.output_shape(in); }
  LutKey key(const Shape& in) const;
  void collect(StateDict& sd, const std::string& prefix);

  Conv2d conv;
  BatchNorm2d bn;
};

}  // namespace hwnas
