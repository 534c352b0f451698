#include "hwnas/genotype.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hwnas/textio.hpp"

namespace hwnas {

namespace {

int m_of(const Genotype& g, CellKind k) { return is_seg_kind(k) ? g.seg.m : g.qc.m; }

int argmax_lowest(std::span<const Real> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

Genotype derive_impl(const ArchParams& alpha, const SegNetConfig& seg, const QcNetConfig& qc) {
  Genotype g;
  g.seg = seg;
  g.qc = qc;
  for (CellKind k : kSearchedKinds) {
    auto it = alpha.logits.find(k);
    if (it == alpha.logits.end()) throw std::invalid_argument("derive: no logits for " + std::string(cell_kind_name(k)));
    const EdgeChoices full = full_choices(k, m_of(g, k));
    if (it->second.size() != full.size()) throw std::invalid_argument("derive: edge count mismatch for " + std::string(cell_kind_name(k)));
    for (std::size_t e = 0; e < full.size(); ++e) {
      const auto v = it->second[e].values();
      for (Real x : v)
        if (!std::isfinite(x)) throw std::invalid_argument("derive: non-finite logit");
      g.ops[k].push_back(full[e].at(argmax_lowest(v)));
    }
  }
  g.validate();
  return g;
}

}  // namespace

void Genotype::validate() const {
  for (CellKind k : kSearchedKinds) {
    const std::string name(cell_kind_name(k));
    auto it = ops.find(k);
    if (it == ops.end()) throw std::invalid_argument("genotype: no edges for " + name);
    const auto specs = cell_edges(k, m_of(*this, k));
    if (it->second.size() != specs.size())
      throw std::invalid_argument("genotype: " + name + " has " + std::to_string(it->second.size()) + " edges, structure needs " +
                                  std::to_string(specs.size()));
    for (std::size_t e = 0; e < specs.size(); ++e) {
      const PrimitiveOp op = it->second[e];
      if (op != PrimitiveOp::Zero && set_of(op) != specs[e].set)
        throw std::invalid_argument("genotype: op " + std::string(op_name(op)) + " not allowed on " + name + " edge " +
                                    std::to_string(specs[e].source) + "->" + std::to_string(specs[e].target));
    }
  }
  if (ops.size() != std::size(kSearchedKinds)) throw std::invalid_argument("genotype: unexpected cell kind");
}

EdgeChoices Genotype::choices(CellKind kind) const {
  EdgeChoices out;
  for (PrimitiveOp op : ops.at(kind)) {
    if (op == PrimitiveOp::Zero) out.emplace_back();
    else out.push_back({op});
  }
  return out;
}

std::string Genotype::serialize() const {
  validate();
  std::ostringstream os;
  os << "# hwnas-genotype 1\n";
  os << "seg_depth " << seg.depth << "\nseg_m " << seg.m << "\nseg_filters " << seg.filters << "\n";
  os << "qc_pairs " << qc.pairs << "\nqc_m " << qc.m << "\nqc_filters " << qc.filters << "\nqc_growth " << qc.growth
     << "\n";
  for (CellKind k : kSearchedKinds) {
    const auto specs = cell_edges(k, m_of(*this, k));
    for (std::size_t e = 0; e < specs.size(); ++e)
      os << cell_kind_name(k) << " " << specs[e].source << " " << specs[e].target << " " << op_name(ops.at(k)[e]) << "\n";
  }
  return os.str();
}

Genotype Genotype::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "# hwnas-genotype 1")
    throw std::runtime_error("genotype: missing '# hwnas-genotype 1' header");
  Genotype g;
  struct Rec {
    int source, target;
    PrimitiveOp op;
    int lineno;
  };
  std::map<CellKind, std::vector<Rec>> recs;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto f = split_words(line);
    if (f.empty()) continue;
    const std::string where = "genotype line " + std::to_string(lineno);
    if (f.size() == 2) {
      const int v = parse_int(f[1], f[0]);
      if (f[0] == "seg_depth") g.seg.depth = v;
      else if (f[0] == "seg_m") g.seg.m = v;
      else if (f[0] == "seg_filters") g.seg.filters = v;
      else if (f[0] == "qc_pairs") g.qc.pairs = v;
      else if (f[0] == "qc_m") g.qc.m = v;
      else if (f[0] == "qc_filters") g.qc.filters = v;
      else if (f[0] == "qc_growth") g.qc.growth = v;
      else throw std::runtime_error(where + ": unknown key '" + f[0] + "'");
      continue;
    }
    if (f.size() != 4) throw std::runtime_error(where + ": expected 'cell_kind source target op_id'");
    const auto kind = parse_cell_kind(f[0]);
    if (!kind) throw std::runtime_error(where + ": unknown cell kind '" + f[0] + "'");
    const auto op = parse_op(f[3]);
    if (!op) throw std::runtime_error(where + ": unknown op '" + f[3] + "'");
    recs[*kind].push_back({parse_int(f[1], "source"), parse_int(f[2], "target"), *op, lineno});
  }
  for (CellKind k : kSearchedKinds) {
    const auto specs = cell_edges(k, m_of(g, k));
    const auto& r = recs[k];
    if (r.size() != specs.size())
      throw std::runtime_error("genotype: " + std::string(cell_kind_name(k)) + " lists " + std::to_string(r.size()) +
                               " edges, structure needs " + std::to_string(specs.size()));
    for (std::size_t e = 0; e < specs.size(); ++e) {
      if (r[e].source != specs[e].source || r[e].target != specs[e].target)
        throw std::runtime_error("genotype line " + std::to_string(r[e].lineno) + ": expected edge " +
                                 std::to_string(specs[e].source) + "->" + std::to_string(specs[e].target));
      g.ops[k].push_back(r[e].op);
    }
  }
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(e.what());
  }
  return g;
}

void Genotype::save(const std::filesystem::path& path) const { write_text(path, serialize()); }

Genotype Genotype::load(const std::filesystem::path& path) { return parse(read_text(path)); }

bool Genotype::operator==(const Genotype& o) const {
  auto tie_seg = [](const SegNetConfig& c) { return std::tie(c.depth, c.m, c.filters, c.in_channels); };
  auto tie_qc = [](const QcNetConfig& c) { return std::tie(c.pairs, c.m, c.filters, c.growth, c.in_channels); };
  return tie_seg(seg) == tie_seg(o.seg) && tie_qc(qc) == tie_qc(o.qc) && ops == o.ops;
}

Genotype derive(const ArchParams& alpha, const SegNetConfig& seg, const QcNetConfig& qc) {
  return derive_impl(alpha, seg, qc);
}

Genotype derive_top2(const ArchParams& alpha, const SegNetConfig& seg, const QcNetConfig& qc) {
  Genotype g = derive_impl(alpha, seg, qc);
  for (CellKind k : kSearchedKinds) {
    const int m = m_of(g, k);
    const auto specs = cell_edges(k, m);
    const EdgeChoices full = full_choices(k, m);
    const int first = is_seg_kind(k) ? 2 : 1, last = is_seg_kind(k) ? m + 1 : m;
    std::vector<double> strength(specs.size(), 0.0);
    for (std::size_t e = 0; e < specs.size(); ++e) {
      const Tensor p = softmax(alpha.logits.at(k)[e], 0);
      for (std::size_t i = 0; i < full[e].size(); ++i)
        if (full[e][i] != PrimitiveOp::Zero) strength[e] = std::max(strength[e], static_cast<double>(p.at(i)));
    }
    for (int node = first; node <= last; ++node) {
      std::vector<int> in;
      for (std::size_t e = 0; e < specs.size(); ++e)
        if (specs[e].target == node && g.ops[k][e] != PrimitiveOp::Zero) in.push_back(static_cast<int>(e));
      std::stable_sort(in.begin(), in.end(), [&](int a, int b) { return strength[a] > strength[b]; });
      for (std::size_t i = 2; i < in.size(); ++i) g.ops[k][in[i]] = PrimitiveOp::Zero;
    }
  }
  g.validate();
  return g;
}

Genotype genotype_of(const SegNet& seg, const QcNet& qc) {
  Genotype g;
  g.seg = seg.config();
  g.qc = qc.config();
  for (CellKind k : kSearchedKinds) {
    const EdgeChoices c = is_seg_kind(k) ? seg.choices(k) : qc.choices(k);
    for (const auto& e : c) {
      if (e.size() > 1) throw std::invalid_argument("genotype_of: network still mixes several ops on an edge");
      g.ops[k].push_back(e.empty() ? PrimitiveOp::Zero : e[0]);
    }
  }
  g.validate();
  return g;
}

DerivedPipeline build(const Genotype& g, Rng& rng) {
  g.validate();
  SegNet seg(g.seg, g.choices(CellKind::Down), g.choices(CellKind::Up), rng);
  QcNet qc(g.qc, g.choices(CellKind::Contracting), g.choices(CellKind::NonScaling), rng);
  return {g, std::move(seg), std::move(qc)};
}

Genotype baseline_genotype(const SegNetConfig& seg, const QcNetConfig& qc) {
  Genotype g;
  g.seg = seg;
  g.seg.filters = 8;
  g.qc = qc;
  for (CellKind k : kSearchedKinds)
    for (const EdgeSpec& e : cell_edges(k, m_of(g, k)))
      g.ops[k].push_back(e.set == OpSet::Down ? PrimitiveOp::DownConv
                         : e.set == OpSet::Up ? PrimitiveOp::UpConv
                                              : PrimitiveOp::Conv);
  g.validate();
  return g;
}

}  // namespace hwnas
