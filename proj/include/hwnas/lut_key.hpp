#pragma once

#include <compare>
#include <string>
#include <vector>

namespace hwnas {

// Identifies one profiled configuration: an operation (a primitive op id or
// a fixed network component such as "seg_stem") at a concrete input shape.
// `extra` carries op hyperparameters that the shape does not pin down
// ("-" when there are none).
struct LutKey {
  std::string op;
  int n = 1, cin = 0, cout = 0, h = 0, w = 0;
  std::string extra = "-";

  auto operator<=>(const LutKey&) const = default;
  std::string str() const;
};

enum class CellKind { Down, Up, Contracting, NonScaling };

// A searched edge of a concrete cell: its candidates' keys, in candidate order.
struct EdgeSite {
  CellKind kind;
  int cell = 0;  // position of the cell within its network
  int edge = 0;  // edge index within the cell
  std::vector<LutKey> candidates;
};

}  // namespace hwnas
