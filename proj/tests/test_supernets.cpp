#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "cell_oracles.hpp"
#include "gradcheck.hpp"
#include "hwnas/qc_net.hpp"
#include "hwnas/seg_net.hpp"

using namespace hwnas;
using namespace hwnas::testing;

namespace {

const std::vector<CellKind> kAllKinds{CellKind::Down, CellKind::Up, CellKind::Contracting, CellKind::NonScaling};

}  // namespace

TEST_CASE("edge counts follow the cell formulas") {
  CHECK(cell_edges(CellKind::Down, 3).size() == 12);
  CHECK(cell_edges(CellKind::Up, 3).size() == 12);
  CHECK(cell_edges(CellKind::Contracting, 3).size() == 6);
  CHECK(cell_edges(CellKind::NonScaling, 3).size() == 6);
  for (int m = 1; m <= 6; ++m) {
    for (CellKind k : kAllKinds) {
      const auto edges = cell_edges(k, m);
      const int expected = is_seg_kind(k) ? 2 * m + m * (m + 1) / 2 : m + m * (m - 1) / 2;
      CHECK(static_cast<int>(edges.size()) == expected);
      CHECK(searched_edge_count(k, m) == expected);
      const int inputs = is_seg_kind(k) ? 2 : 1;
      for (const auto& e : edges) {
        CHECK(e.source < e.target);
        if (e.source < inputs) {
          const OpSet want = k == CellKind::Up ? OpSet::Up
                             : (k == CellKind::NonScaling ? OpSet::Normal : OpSet::Down);
          CHECK(e.set == want);
        } else {
          CHECK(e.set == OpSet::Normal);
        }
      }
    }
  }
}

TEST_CASE("cell kind names round-trip") {
  for (CellKind k : kAllKinds) CHECK(*parse_cell_kind(cell_kind_name(k)) == k);
  CHECK_FALSE(parse_cell_kind("sideways").has_value());
}

TEST_CASE("uniform weights match the per-candidate enumeration oracle") {
  for (CellKind kind : kAllKinds) CHECK_MESSAGE(uniform_cell_error(kind, 21) <= 1e-5, cell_kind_name(kind));
}

TEST_CASE("one-hot weights match the single-op cell") {
  for (CellKind kind : kAllKinds) CHECK_MESSAGE(one_hot_cell_error(kind, 4, 31) <= 1e-5, cell_kind_name(kind));
}

TEST_CASE("all-zero normal edges leave only the input-edge contributions") {
  Rng rng(41);
  const auto choices = full_choices(CellKind::Down, 3);
  const auto edges = cell_edges(CellKind::Down, 3);
  Cell cell(CellKind::Down, 3, 2, choices, rng);
  std::vector<int> pick;
  for (std::size_t e = 0; e < edges.size(); ++e)
    pick.push_back(edges[e].set == OpSet::Normal ? index_in_set(PrimitiveOp::Zero) : 0);
  const auto w = one_hot(choices, pick);
  std::vector<Tensor> in{random_tensor({1, 2, 8, 8}, rng, -1, 1, false), random_tensor({1, 2, 8, 8}, rng, -1, 1, false)};
  const Tensor got = *cell.forward(in, &w, false);

  // Each intermediate node is down_conv(in0) + down_conv(in1) on its own edges.
  std::vector<double> expect(got.numel(), 0.0);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    if (edges[e].set == OpSet::Normal) continue;
    const Tensor y = cell.op(static_cast<int>(e), 0).apply(in[edges[e].source], false);
    for (std::size_t p = 0; p < y.numel(); ++p) expect[p] += y.at(p);
  }
  for (std::size_t p = 0; p < expect.size(); ++p) CHECK(got.at(p) == doctest::Approx(expect[p]).epsilon(1e-9));
}

TEST_CASE("cell rejects bad inputs and choices") {
  Rng rng(1);
  CHECK_THROWS_AS(Cell(CellKind::Down, 3, 2, full_choices(CellKind::Up, 3), rng), std::invalid_argument);
  CHECK_THROWS_AS(Cell(CellKind::Down, 3, 2, EdgeChoices(5), rng), std::invalid_argument);
  Cell cell(CellKind::Down, 3, 2, full_choices(CellKind::Down, 3), rng);
  const auto w = uniform(full_choices(CellKind::Down, 3));
  CHECK_THROWS_AS(cell.forward({random_tensor({1, 2, 8, 8}, rng)}, &w, true), std::invalid_argument);
  CHECK_THROWS_AS(cell.forward({random_tensor({1, 2, 8, 8}, rng), random_tensor({1, 2, 4, 4}, rng)}, &w, true),
                  std::invalid_argument);
  CHECK_THROWS_AS(cell.forward({random_tensor({1, 2, 8, 8}, rng), random_tensor({1, 2, 8, 8}, rng)}, nullptr, true),
                  std::invalid_argument);
}

TEST_CASE("segmentation supernet output shapes and heads") {
  Rng rng(51);
  SegNet net = SegNet::supernet({}, rng);
  ArchParams alpha = ArchParams::zeros({CellKind::Down, CellKind::Up}, 3);
  const auto w = alpha.probabilities();
  const Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1, false);
  const SegOutput out = net.forward(x, &w, true);
  CHECK(out.logits.shape() == Shape{2, 2, 32, 32});
  CHECK(out.uncertainty.shape() == Shape{2, 1, 32, 32});
  CHECK(out.mask.size() == 2u * 32 * 32);
  for (Real u : out.uncertainty.values()) {
    CHECK(u >= 0);
    CHECK(u <= std::log(2.0) + 1e-12);
  }
  const auto v = out.logits.values();
  for (int b = 0; b < 2; ++b)
    for (int p = 0; p < 1024; ++p)
      CHECK(out.mask[b * 1024 + p] == (v[(b * 2 + 1) * 1024 + p] > v[b * 2 * 1024 + p] ? 1 : 0));

  CHECK_THROWS_WITH_AS(net.forward(random_tensor({1, 3, 20, 20}, rng), &w, true), doctest::Contains("divisible"),
                       std::invalid_argument);
  CHECK(net.choices(CellKind::Down).size() == 12);
  CHECK(net.choices(CellKind::Up).size() == 12);
}

TEST_CASE("uncertainty is softmax entropy") {
  const Tensor flat({1, 2, 2, 2}, Real(0.3));
  const Tensor hf = softmax_entropy(flat, 1);
  for (Real u : hf.values()) CHECK(u == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const Tensor peaked({1, 2, 1, 2}, std::vector<Real>{-40, 40, 40, -40});
  const Tensor hp = softmax_entropy(peaked, 1);
  for (Real u : hp.values()) CHECK(u < 1e-12);
}

TEST_CASE("dice") {
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1}, empty(4, 0);
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == 0.0);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(dice(a, empty) == 0.0);
  std::vector<std::uint8_t> left(16, 0), full(16, 1);
  for (int r = 0; r < 4; ++r) left[r * 4] = left[r * 4 + 1] = 1;
  CHECK(dice(left, full) == doctest::Approx(2.0 * 8 / (8 + 16)).epsilon(1e-12));
  const auto per = batch_dice(std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 0, 0}, std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 1, 1}, 2);
  CHECK(per == std::vector<double>{1.0, 0.0});
}

TEST_CASE("one optimization step reaches almost every architecture logit") {
  Rng rng(61);
  SegNet seg = SegNet::supernet({}, rng);
  QcNet qc = QcNet::supernet({}, rng);
  ArchParams alpha = ArchParams::zeros(kAllKinds, 3);
  const auto w = alpha.probabilities();
  const Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1, false);
  std::vector<std::uint8_t> target(2 * 32 * 32);
  for (auto& t : target) t = std::uniform_int_distribution<int>(0, 1)(rng);
  const SegOutput out = seg.forward(x, &w, true);
  const Tensor pred = qc.predict_dice(x, softmax(out.logits, 1), out.uncertainty, &w, true);
  const Tensor label({2}, std::vector<Real>{0.3, 0.8});
  add(cross_entropy_2d(out.logits, target), mse(pred, label)).backward();

  std::size_t total = 0, live = 0;
  for (const Tensor& a : alpha.tensors()) {
    REQUIRE(a.has_grad());
    for (Real g : a.grad()) {
      ++total;
      live += g != 0;
    }
  }
  // down 6x5 + 6x5, up 6x3 + 6x5, contracting 3x5 + 3x5, nonscaling 6x5
  CHECK(total == 60 + 48 + 30 + 30);
  CHECK(double(live) / double(total) >= 0.9);
}

TEST_CASE("qc supernet structure, range and per-sample independence") {
  Rng rng(71);
  QcNet qc = QcNet::supernet({.growth = 2}, rng);
  REQUIRE(qc.block_count() == 6);
  for (int i = 0; i < 6; ++i)
    CHECK(qc.block_kind(i) == ((i + 1) % 2 == 1 ? CellKind::Contracting : CellKind::NonScaling));
  ArchParams alpha = ArchParams::zeros({CellKind::Contracting, CellKind::NonScaling}, 3);
  const auto w = alpha.probabilities();

  const Tensor x = random_tensor({4, 6, 32, 32}, rng, -2, 2, false);
  const Tensor y = qc.forward(x, &w, false);
  CHECK(y.shape() == Shape{4});
  for (Real v : y.values()) {
    CHECK(v > 0);
    CHECK(v < 1);
  }
  // Reverse the batch.
  std::vector<Real> rev(x.numel());
  const std::size_t per = x.numel() / 4;
  for (int b = 0; b < 4; ++b)
    std::copy_n(x.values().begin() + b * per, per, rev.begin() + (3 - b) * per);
  const Tensor yr = qc.forward(Tensor(x.shape(), rev), &w, false);
  for (int b = 0; b < 4; ++b) CHECK(yr.at(3 - b) == doctest::Approx(y.at(b)).epsilon(1e-12));

  CHECK_THROWS_AS(qc.predict_dice(random_tensor({1, 3, 32, 32}, rng), random_tensor({1, 2, 16, 16}, rng),
                                  random_tensor({1, 1, 32, 32}, rng), &w, false),
                  std::invalid_argument);

  const Tensor c = qc.block_forward(0, random_tensor({2, 8, 16, 16}, rng), &w, true);
  CHECK(c.shape() == Shape{2, 16, 8, 8});

  QcNet flat = QcNet::supernet({}, rng);
  CHECK(flat.out_channels() == 8);
  const Tensor yf = flat.forward(x, &w, true);
  for (Real v : yf.values()) {
    CHECK(v > 0);
    CHECK(v < 1);
  }
}

TEST_CASE("zeroed nonscaling cell is the identity; pruned contracting cell is its projection") {
  Rng rng(81);
  const auto cc = full_choices(CellKind::Contracting, 3);
  const auto nc = full_choices(CellKind::NonScaling, 3);
  QcNet qc(QcNetConfig{.growth = 2}, cc, nc, rng);
  ArchParams alpha = ArchParams::zeros({CellKind::Contracting, CellKind::NonScaling}, 3);
  auto w = alpha.probabilities();
  w[CellKind::NonScaling] = one_hot(nc, std::vector<int>(6, index_in_set(PrimitiveOp::Zero)));
  const Tensor x = random_tensor({2, 16, 8, 8}, rng);
  const Tensor y = qc.block_forward(1, x, &w, true);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  // Every contracting edge removed: only the stride-2 projection remains.
  QcNet pruned(QcNetConfig{.growth = 2}, EdgeChoices(6), nc, rng);
  StateDict sd = pruned.state();
  Tensor pw, gamma, beta;
  for (auto& p : sd.params) {
    if (p.name == "qc.cell0.proj.conv.weight") pw = p.tensor;
    if (p.name == "qc.cell0.proj.bn.gamma") gamma = p.tensor;
    if (p.name == "qc.cell0.proj.bn.beta") beta = p.tensor;
  }
  REQUIRE(pw.defined());
  const Tensor in = random_tensor({2, 8, 16, 16}, rng, -1, 1, false);
  BatchNormState st{std::vector<Real>(16, 0), std::vector<Real>(16, 1)};
  const Tensor expect = batch_norm(conv2d(in, pw, {.stride = 2}), gamma, beta, st, false, 0.1, 1e-5);
  CHECK(max_abs_diff(pruned.block_forward(0, in, nullptr, false), expect) <= 1e-12);
}

TEST_CASE("qc loss reaches segmentation weights only when the mask path is attached") {
  Rng rng(91);
  SegNet seg = SegNet::supernet({}, rng);
  QcNet qc = QcNet::supernet({}, rng);
  ArchParams alpha = ArchParams::zeros(kAllKinds, 3);
  const auto w = alpha.probabilities();
  const Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1, false);
  const Tensor label({2}, std::vector<Real>{0.2, 0.9});

  auto seg_grad_norm = [&](bool frozen) {
    for (auto& p : seg.state().params) p.tensor.zero_grad();
    const SegOutput out = seg.forward(x, &w, true);
    Tensor probs = softmax(out.logits, 1), unc = out.uncertainty;
    if (frozen) probs = probs.detach(), unc = unc.detach();
    mse(qc.predict_dice(x, probs, unc, &w, true), label).backward();
    double n = 0;
    for (auto& p : seg.state().params)
      if (p.tensor.has_grad())
        for (Real g : p.tensor.grad()) n += double(g) * g;
    return n;
  };
  CHECK(seg_grad_norm(false) > 0);
  CHECK(seg_grad_norm(true) == 0);
}

TEST_CASE("supernet forced to one-hot equals the derived network with copied weights") {
  Rng rng(101);
  SegNet seg = SegNet::supernet({}, rng);
  QcNet qc = QcNet::supernet({}, rng);
  std::map<CellKind, std::vector<int>> pick;
  ArchWeights w;
  for (CellKind k : kAllKinds) {
    const auto c = full_choices(k, 3);
    pick[k] = random_picks(c, rng);
    w[k] = one_hot(c, pick[k]);
  }
  auto sub = [&](CellKind k) { return picked(full_choices(k, 3), pick[k]); };
  SegNet dseg({}, sub(CellKind::Down), sub(CellKind::Up), rng);
  QcNet dqc({}, sub(CellKind::Contracting), sub(CellKind::NonScaling), rng);
  StateDict s1 = seg.state(), d1 = dseg.state(), s2 = qc.state(), d2 = dqc.state();
  CHECK(copy_matching(s1, d1) == d1.params.size() + d1.buffers.size());
  CHECK(copy_matching(s2, d2) == d2.params.size() + d2.buffers.size());

  const Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1, false);
  const SegOutput a = seg.forward(x, &w, true), b = dseg.forward(x, nullptr, true);
  CHECK(max_abs_diff(a.logits, b.logits) <= 1e-4);
  const Tensor qa = qc.predict_dice(x, softmax(a.logits, 1), a.uncertainty, &w, true);
  const Tensor qb = dqc.predict_dice(x, softmax(b.logits, 1), b.uncertainty, nullptr, true);
  CHECK(max_abs_diff(qa, qb) <= 1e-4);

  CHECK(dseg.flops({1, 3, 32, 32}) < seg.flops({1, 3, 32, 32}));
  CHECK(dqc.flops({1, 6, 32, 32}) < qc.flops({1, 6, 32, 32}));
  for (CellKind k : {CellKind::Down, CellKind::Up}) CHECK(dseg.choices(k) == sub(k));
  for (CellKind k : {CellKind::Contracting, CellKind::NonScaling}) CHECK(dqc.choices(k) == sub(k));
}

TEST_CASE("latency sites cover every edge at its own shape") {
  Rng rng(111);
  SegNet seg = SegNet::supernet({}, rng);
  QcNet qc = QcNet::supernet({}, rng);
  const auto ss = seg.edge_sites({1, 3, 32, 32});
  CHECK(ss.size() == 6 * 12);
  CHECK(ss.front().candidates.size() == 5);
  CHECK(ss.front().candidates[0].h == 32);
  CHECK(ss.front().candidates[0].cin == 8);
  CHECK(qc.edge_sites({1, 6, 32, 32}).size() == 6 * 6);
  CHECK(seg.fixed_keys({1, 3, 32, 32}).size() == 2 + 4 * 3);
  CHECK(qc.fixed_keys({1, 6, 32, 32}).size() == 2 + 2 * 3);
}
