#include "hwnas/cell.hpp"

#include <stdexcept>

namespace hwnas {

std::string LutKey::str() const {
  return op + " " + std::to_string(n) + " " + std::to_string(cin) + " " + std::to_string(cout) + " " +
         std::to_string(h) + " " + std::to_string(w) + " " + extra;
}

std::string_view cell_kind_name(CellKind kind) {
  switch (kind) {
    case CellKind::Down: return "down";
    case CellKind::Up: return "up";
    case CellKind::Contracting: return "contracting";
    case CellKind::NonScaling: return "nonscaling";
  }
  return "?";
}

std::optional<CellKind> parse_cell_kind(std::string_view name) {
  for (CellKind k : {CellKind::Down, CellKind::Up, CellKind::Contracting, CellKind::NonScaling})
    if (cell_kind_name(k) == name) return k;
  return std::nullopt;
}

bool is_seg_kind(CellKind kind) { return kind == CellKind::Down || kind == CellKind::Up; }

namespace {

OpSet input_set(CellKind kind) {
  switch (kind) {
    case CellKind::Down:
    case CellKind::Contracting: return OpSet::Down;
    case CellKind::Up: return OpSet::Up;
    case CellKind::NonScaling: return OpSet::Normal;
  }
  return OpSet::Normal;
}

int input_count(CellKind kind) { return is_seg_kind(kind) ? 2 : 1; }

}  // namespace

std::vector<EdgeSpec> cell_edges(CellKind kind, int m) {
  if (m < 1) throw std::invalid_argument("cell_edges: m must be >= 1");
  const int in = input_count(kind);
  const OpSet io = input_set(kind);
  std::vector<EdgeSpec> edges;
  for (int j = in; j < in + m; ++j) {
    for (int i = 0; i < in; ++i) edges.push_back({i, j, io});
    for (int i = in; i < j; ++i) edges.push_back({i, j, OpSet::Normal});
  }
  if (is_seg_kind(kind)) {
    const int out = in + m;
    for (int i = in; i < out; ++i) edges.push_back({i, out, OpSet::Normal});
  }
  return edges;
}

int searched_edge_count(CellKind kind, int m) {
  return is_seg_kind(kind) ? 2 * m + m * (m + 1) / 2 : m + m * (m - 1) / 2;
}

EdgeChoices full_choices(CellKind kind, int m) {
  EdgeChoices c;
  for (const EdgeSpec& e : cell_edges(kind, m)) {
    const auto ops = ops_in(e.set);
    c.emplace_back(ops.begin(), ops.end());
  }
  return c;
}

ArchParams ArchParams::zeros(const std::vector<CellKind>& kinds, int m) {
  ArchParams a;
  for (CellKind k : kinds) {
    auto& v = a.logits[k];
    for (const EdgeSpec& e : cell_edges(k, m)) {
      v.emplace_back(Shape{static_cast<int>(ops_in(e.set).size())}, Real(0), true);
    }
  }
  return a;
}

ArchWeights ArchParams::probabilities() const {
  ArchWeights w;
  for (const auto& [k, v] : logits) {
    auto& out = w[k];
    for (const Tensor& t : v) out.push_back(softmax(t, 0));
  }
  return w;
}

std::vector<Tensor> ArchParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& [k, v] : logits) out.insert(out.end(), v.begin(), v.end());
  return out;
}

ArchParams ArchParams::clone() const {
  ArchParams a;
  for (const auto& [k, v] : logits) {
    auto& out = a.logits[k];
    for (const Tensor& t : v) out.emplace_back(t.shape(), std::vector<Real>(t.values().begin(), t.values().end()), true);
  }
  return a;
}

StateDict ArchParams::state() {
  StateDict sd;
  for (auto& [k, v] : logits)
    for (std::size_t e = 0; e < v.size(); ++e)
      sd.params.push_back({"alpha." + std::string(cell_kind_name(k)) + ".e" + std::to_string(e), v[e]});
  return sd;
}

Cell::Cell(CellKind kind, int m, int channels, const EdgeChoices& choices, Rng& rng)
    : kind_(kind), m_(m), channels_(channels), inputs_(input_count(kind)), specs_(cell_edges(kind, m)) {
  if (choices.size() != specs_.size()) {
    throw std::invalid_argument("Cell: " + std::to_string(choices.size()) + " edge choices for a " +
                                std::string(cell_kind_name(kind)) + " cell with " + std::to_string(specs_.size()) +
                                " edges");
  }
  const int nodes = inputs_ + m + (is_seg_kind(kind) ? 1 : 0);
  incoming_.resize(nodes);
  for (std::size_t e = 0; e < specs_.size(); ++e) {
    std::vector<OpInstance> ops;
    for (PrimitiveOp op : choices[e]) {
      if (set_of(op) != specs_[e].set) {
        throw std::invalid_argument("Cell: op " + std::string(op_name(op)) + " is not in the " +
                                    std::string(set_name(specs_[e].set)) + " set of edge " + std::to_string(e));
      }
      ops.emplace_back(op, channels, channels, rng);
    }
    ops_.push_back(std::move(ops));
    incoming_[specs_[e].target].push_back(static_cast<int>(e));
  }
}

std::optional<Tensor> Cell::forward(const std::vector<Tensor>& inputs, const std::vector<Tensor>* weights,
                                    bool training) {
  if (static_cast<int>(inputs.size()) != inputs_) {
    throw std::invalid_argument("Cell: expected " + std::to_string(inputs_) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
  for (const Tensor& x : inputs) {
    if (x.shape() != inputs[0].shape() || x.ndim() != 4 || x.dim(1) != channels_) {
      throw std::invalid_argument("Cell: incompatible inputs " + shape_str(inputs[0].shape()) + " and " +
                                  shape_str(x.shape()) + " for " + std::to_string(channels_) + " channels");
    }
  }
  if (weights && weights->size() != specs_.size()) throw std::invalid_argument("Cell: weight count mismatch");

  std::vector<std::optional<Tensor>> node(incoming_.size());
  for (int i = 0; i < inputs_; ++i) node[i] = inputs[i];

  auto node_value = [&](int j) -> std::optional<Tensor> {
    std::vector<Tensor> terms;
    for (int e : incoming_[j]) {
      auto& ops = ops_[e];
      const auto& src = node[specs_[e].source];
      if (ops.empty() || !src) continue;
      if (ops.size() == 1 && !weights) {
        terms.push_back(ops[0].apply(*src, training));
        continue;
      }
      if (!weights) throw std::invalid_argument("Cell: mixed edge " + std::to_string(e) + " needs weights");
      const Tensor& w = (*weights)[e];
      if (w.numel() != ops.size()) throw std::invalid_argument("Cell: weight size mismatch on edge " + std::to_string(e));
      std::vector<Tensor> outs;
      for (auto& op : ops) outs.push_back(op.apply(*src, training));
      terms.push_back(weighted_sum(outs, w));
    }
    if (terms.empty()) return std::nullopt;
    return terms.size() == 1 ? terms[0] : add_n(terms);
  };

  std::vector<Tensor> sum_terms;
  for (int j = inputs_; j < inputs_ + m_; ++j) {
    node[j] = node_value(j);
    if (node[j]) sum_terms.push_back(*node[j]);
  }
  if (is_seg_kind(kind_)) {
    if (auto out = node_value(inputs_ + m_)) sum_terms.push_back(*out);
  }
  if (sum_terms.empty()) return std::nullopt;
  return sum_terms.size() == 1 ? sum_terms[0] : add_n(sum_terms);
}

EdgeChoices Cell::choices() const {
  EdgeChoices c;
  for (const auto& ops : ops_) {
    std::vector<PrimitiveOp> ids;
    for (const auto& op : ops) ids.push_back(op.id());
    c.push_back(std::move(ids));
  }
  return c;
}

int Cell::output_extent(int in_extent) const { return spatial_out(input_set(kind_), in_extent); }

Shape Cell::node_shape(int node, const Shape& input) const {
  if (node < inputs_) return input;
  return {input[0], channels_, output_extent(input[2]), output_extent(input[3])};
}

std::int64_t Cell::flops(const Shape& input) const {
  std::int64_t f = 0;
  for (std::size_t e = 0; e < specs_.size(); ++e)
    for (const auto& op : ops_[e]) f += op.flops(node_shape(specs_[e].source, input));
  return f;
}

std::vector<EdgeSite> Cell::edge_sites(int cell_index, const Shape& input) const {
  std::vector<EdgeSite> sites;
  for (std::size_t e = 0; e < specs_.size(); ++e) {
    EdgeSite s{kind_, cell_index, static_cast<int>(e), {}};
    const Shape in = node_shape(specs_[e].source, input);
    for (const auto& op : ops_[e]) s.candidates.push_back({std::string(op_name(op.id())), in[0], channels_, channels_, in[2], in[3], "-"});
    sites.push_back(std::move(s));
  }
  return sites;
}

void Cell::collect(StateDict& sd, const std::string& prefix) {
  for (std::size_t e = 0; e < ops_.size(); ++e)
    for (auto& op : ops_[e]) op.collect(sd, prefix + "e" + std::to_string(e) + "." + std::string(op_name(op.id())) + ".");
}

Preprocess::Preprocess(int cin, int cout, int stride, Rng& rng)
    : conv(cin, cout, 1, {.stride = stride}, rng), bn(cout, true) {}

Tensor Preprocess::forward(const Tensor& x, bool training) { return bn.forward(conv.forward(relu(x)), training); }

LutKey Preprocess::key(const Shape& in) const {
  return {"preprocess", in[0], conv.cin, conv.cout, in[2], in[3], "s" + std::to_string(conv.opt.stride)};
}

void Preprocess::collect(StateDict& sd, const std::string& prefix) {
  conv.collect(sd, prefix + "conv.");
  bn.collect(sd, prefix + "bn.");
}

}  // namespace hwnas
