#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "sineseg/error.hpp"
#include "sineseg/infer.hpp"
#include "sineseg/train.hpp"
#include "test_oracles.hpp"

using namespace sineseg;
using namespace sineseg::test;

namespace {

// Coverage by marking voxels one at a time.
double brute_coverage(const std::vector<Index>& origins, Index patch, Index extent) {
  std::vector<bool> hit(std::size_t(extent), false);
  for (Index o : origins)
    for (Index i = std::max<Index>(o, 0); i < std::min(o + patch, extent); ++i) hit[std::size_t(i)] = true;
  return double(std::count(hit.begin(), hit.end(), true)) / double(extent);
}

NetworkConfig tiny_net(Index in_channels) {
  NetworkConfig c = NetworkConfig::toy();
  c.n_stages = 2;
  c.features = {2, 4};
  c.blocks_per_stage = {1, 1};
  c.strides = {{1, 1, 1}, {2, 2, 2}};
  c.ds_heads = 1;
  c.in_channels = in_channels;
  c.input_channels.clear();
  return c;
}

// All parameters zero except the head bias: logits are [b0, b1] everywhere.
Network<float> constant_net(float b0, float b1) {
  Network<float> net(tiny_net(2));
  auto& bias = net.parameter("head0.bias").value;
  bias << b0, b1;
  return net;
}

MultiChannelVolume random_input(const Dims3& d, Index channels, std::mt19937_64& rng) {
  MultiChannelVolume v;
  v.meta.dims = d;
  for (Index c = 0; c < channels; ++c) v.channel_names.push_back("c" + std::to_string(c));
  v.channels = random_map<float>(channels, d, rng).values;
  return v;
}

}  // namespace

TEST_CASE("axis_steps: worked examples") {
  CHECK(axis_steps(112, 112, 0.5) == std::vector<Index>{0});
  CHECK(axis_steps(256, 112, 0.5) == std::vector<Index>{0, 48, 96, 144});
  CHECK(axis_steps(200, 112, 0.5) == std::vector<Index>{0, 44, 88});
  CHECK_THROWS_AS(axis_steps(100, 112, 0.5), PreconditionError);
}

TEST_CASE("centered_axis_steps: worked examples") {
  CHECK(centered_axis_steps(400, 160, 0.5) == std::vector<Index>{0, 80, 160, 240});
  CHECK(centered_axis_steps(160, 160, 0.5) == std::vector<Index>{0});
  CHECK(centered_axis_steps(600, 160, 0.5) == std::vector<Index>{100, 180, 260, 340});
}

TEST_CASE("axis_coverage: worked examples and the voxel-marking oracle") {
  CHECK(axis_coverage({0}, 10, 10) == 1.0);
  CHECK(axis_coverage({100, 180, 260, 340}, 160, 600) == doctest::Approx(400.0 / 600.0));
  CHECK(axis_coverage({0, 20}, 10, 30) == doctest::Approx(20.0 / 30.0));
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const Index extent = 20 + Index(rng() % 300), patch = 1 + Index(rng() % 40);
    std::vector<Index> o(1 + rng() % 6);
    for (auto& v : o) v = Index(rng() % std::uint64_t(extent));
    CHECK(axis_coverage(o, patch, extent) == brute_coverage(o, patch, extent));
  }
}

TEST_CASE("plan_sliding_window: y escalates 0.5 -> 0.6 -> 0.7 on extent 600") {
  const PatchPlan pp = plan_sliding_window({112, 600, 160}, {112, 160, 160});
  CHECK(pp.step_fracs[1] == doctest::Approx(0.7));
  CHECK(std::abs(pp.axis_coverage[1] - 496.0 / 600.0) < 1e-9);
  CHECK(axis_coverage(centered_axis_steps(600, 160, 0.6), 160, 600) == doctest::Approx(448.0 / 600.0));
  CHECK(pp.axis_origins[1].size() == 4);
  CHECK(pp.step_fracs[0] == 0.5);
}

TEST_CASE("plan_sliding_window: degenerate and axial examples") {
  const PatchPlan one = plan_sliding_window({112, 160, 128}, {112, 160, 128});
  CHECK(one.origins.size() == 1);
  CHECK(one.axial_steps == 1);
  CHECK(one.axis_coverage == std::array<double, 3>{1.0, 1.0, 1.0});
  const PatchPlan z = plan_sliding_window({256, 160, 128}, {112, 160, 128});
  CHECK(z.axial_steps == 4);
  CHECK(z.step_fracs[0] == 0.5);
}

TEST_CASE("plan_sliding_window: origins are the Cartesian product and fit the volume") {
  const PatchPlan pp = plan_sliding_window({300, 420, 390}, {112, 160, 128});
  CHECK(pp.origins.size() ==
        pp.axis_origins[0].size() * pp.axis_origins[1].size() * pp.axis_origins[2].size());
  std::set<Dims3> uniq(pp.origins.begin(), pp.origins.end());
  CHECK(uniq.size() == pp.origins.size());
  for (const auto& o : pp.origins)
    for (int a = 0; a < 3; ++a) CHECK(o[a] + pp.patch[a] <= pp.volume[a]);
}

TEST_CASE("planner properties over randomized geometries") {
  std::mt19937_64 rng(2);
  int escalated = 0;
  for (int t = 0; t < 1000; ++t) {
    const Dims3 patch{16 + Index(rng() % 112), 16 + Index(rng() % 160), 16 + Index(rng() % 128)};
    Dims3 vol;
    for (int a = 0; a < 3; ++a) vol[a] = patch[a] + Index(rng() % std::uint64_t(7 * patch[a] + 1));
    const PatchPlan pp = plan_sliding_window(vol, patch);
    CHECK(pp.axial_steps >= 1);
    CHECK(pp.axial_steps == int(pp.axis_origins[0].size()));
    for (int a = 1; a < 3; ++a) {
      CHECK(pp.axis_origins[std::size_t(a)].size() <= 4);
      CHECK((pp.axis_coverage[std::size_t(a)] > 0.8 || pp.step_fracs[std::size_t(a)] >= 2.0 - 1e-9));
      if (pp.step_fracs[std::size_t(a)] > 0.5) ++escalated;
    }
    for (const auto& o : pp.origins)
      for (int a = 0; a < 3; ++a) CHECK(o[a] + patch[a] <= vol[a]);
  }
  CHECK(escalated > 0);
}

TEST_CASE("plan_tta: cardinality law at 5, 7, 8, 9 and 12") {
  CHECK(plan_tta(5).flip_sets.size() == 8);
  CHECK(plan_tta(7).flip_sets.size() == 8);
  CHECK(plan_tta(8).flip_sets.size() == 4);
  CHECK(plan_tta(9).flip_sets.size() == 2);
  CHECK(plan_tta(12).flip_sets.size() == 2);
  const auto half = plan_tta(8).flip_sets;
  CHECK(std::set<FlipMask>(half.begin(), half.end()) == std::set<FlipMask>{0, 1, 2, 4});
  const auto quarter = plan_tta(9).flip_sets;
  CHECK(std::set<FlipMask>(quarter.begin(), quarter.end()) == std::set<FlipMask>{0, 1});
  for (int s : {1, 7}) {
    const auto all = plan_tta(s).flip_sets;
    CHECK(std::set<FlipMask>(all.begin(), all.end()).size() == 8);
  }
}

TEST_CASE("gaussian importance: centre, symmetry, corner ratio") {
  const Eigen::VectorXf w = gaussian_importance({1, 1, 8});
  CHECK(w.maxCoeff() == doctest::Approx(std::exp(-0.125)).epsilon(1e-6));
  CHECK(w[0] / w[3] == doctest::Approx(std::exp(-3.5 * 3.5 / 2.0) / std::exp(-0.5 * 0.5 / 2.0)).epsilon(1e-5));
  // Corner against the continuous centre of an extent-8 axis with sigma 1.
  CHECK(double(w[0]) == doctest::Approx(0.002187).epsilon(1e-3));
  const Eigen::VectorXf odd = gaussian_importance({5, 7, 9});
  CHECK(odd.maxCoeff() == 1.0f);
  CHECK(odd[(2 * 7 + 3) * 9 + 4] == 1.0f);
  for (Index z = 0; z < 5; ++z)
    for (Index y = 0; y < 7; ++y)
      for (Index x = 0; x < 9; ++x) {
        const float v = odd[(z * 7 + y) * 9 + x];
        CHECK(v > 0.0f);
        CHECK(v == odd[((4 - z) * 7 + (6 - y)) * 9 + (8 - x)]);
      }
}

TEST_CASE("apply_flip: reversal, identity and bit-exact involution") {
  MultiChannelVolume v;
  v.meta.dims = {1, 1, 3};
  v.channel_names = {"a"};
  v.channels.resize(1, 3);
  v.channels << 1, 2, 3;
  const auto f = apply_flip(v, FlipMask(4));
  CHECK(f.channels(0, 0) == 3.0f);
  CHECK(f.channels(0, 2) == 1.0f);
  CHECK(apply_flip(v, FlipMask(0)).channels == v.channels);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Dims3 d{1 + Index(rng() % 5), 1 + Index(rng() % 6), 1 + Index(rng() % 7)};
    const MultiChannelVolume r = random_input(d, 3, rng);
    const FeatureMap<double> m = random_map<double>(2, d, rng);
    for (FlipMask a = 0; a < 8; ++a) {
      const auto back = apply_flip(apply_flip(r, a), a);
      CHECK(std::memcmp(back.channels.data(), r.channels.data(), sizeof(float) * r.channels.size()) == 0);
      const auto mb = apply_flip(apply_flip(m, a), a);
      CHECK(std::memcmp(mb.values.data(), m.values.data(), sizeof(double) * m.values.size()) == 0);
    }
  }
}

TEST_CASE("estimate_runtime: worked examples and monotone verdict") {
  PatchPlan pp;
  pp.origins.assign(36, Dims3{0, 0, 0});
  const auto e1 = estimate_runtime(pp, plan_tta(1), 100.0);
  CHECK(e1.total_passes == 288);
  CHECK(e1.estimate_ms == 28800.0);
  CHECK(e1.within_budget);
  pp.origins.assign(400, Dims3{0, 0, 0});
  CHECK_FALSE(estimate_runtime(pp, plan_tta(1), 100.0).within_budget);
  pp.origins.assign(1, Dims3{0, 0, 0});
  TtaPlan identity;
  identity.flip_sets = {0};
  CHECK(estimate_runtime(pp, identity, 300000.0).within_budget);
  pp.origins.assign(30, Dims3{0, 0, 0});
  bool over = false;
  for (double ms = 10; ms < 5000; ms *= 1.3) {
    const bool within = estimate_runtime(pp, plan_tta(1), ms).within_budget;
    if (over) CHECK_FALSE(within);
    over = over || !within;
  }
  CHECK(over);
}

TEST_CASE("run_inference: constant-logit network gives a partition of unity") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const float c = (t % 2 ? 1.0f : -1.0f) * (0.5f + float(t) / 10.0f);
    const Network<float> net = constant_net(0.0f, c);
    const Dims3 d{8 + Index(rng() % 9), 8 + Index(rng() % 13), 8 + Index(rng() % 11)};
    PlannerConfig pc;
    pc.step_init = 0.25 + 0.05 * double(rng() % 6);
    pc.step_increment = 0.05;
    const PatchPlan pp = plan_sliding_window(d, {8, 8, 8}, pc);
    TtaPlan tp;
    tp.flip_sets = {0, FlipMask(t % 8)};
    const InferenceResult r = run_inference(net, random_input(d, 2, rng), pp, tp);
    CHECK(r.passes == std::int64_t(pp.origins.size() * tp.flip_sets.size()));
    // Voxels no patch reaches carry zero weight; their share is fixed by the per-axis coverage.
    const Eigen::ArrayXf covered = (r.weight_sum.array() > 0.0f).cast<float>();
    CHECK(covered.mean() ==
          doctest::Approx(pp.axis_coverage[0] * pp.axis_coverage[1] * pp.axis_coverage[2]).epsilon(1e-6));
    CHECK(((r.logits.row(1).array().transpose() - c) * covered).abs().maxCoeff() < 1e-5);
    CHECK(r.logits.row(0).cwiseAbs().maxCoeff() < 1e-5);
    const Eigen::ArrayXf expected_mask = covered * (c > 0 ? 1.0f : 0.0f);
    CHECK((r.mask.voxels.array() == expected_mask).all());
    CHECK(r.mask.meta.modality == Modality::LABEL);
    CHECK(r.prob.meta.modality == Modality::DERIVED);
  }
}

TEST_CASE("run_inference: one patch without flips equals a plain forward") {
  std::mt19937_64 rng(5);
  Network<float> net = build_network<float>(tiny_net(2));
  const MultiChannelVolume in = random_input({8, 8, 8}, 2, rng);
  const PatchPlan pp = plan_sliding_window({8, 8, 8}, {8, 8, 8});
  TtaPlan tp;
  tp.flip_sets = {0};
  const InferenceResult r = run_inference(net, in, pp, tp);
  const auto heads = forward(net, to_feature_map<float>(in));
  CHECK(max_rel_diff(r.logits, heads[0].values) < 1e-5);
  for (Index i = 0; i < r.mask.size(); ++i)
    CHECK(r.mask.voxels[i] == (heads[0].values(1, i) > heads[0].values(0, i) ? 1.0f : 0.0f));
}

TEST_CASE("run_inference: TTA on a flip-equivariant network equals a single pass") {
  std::mt19937_64 rng(6);
  const Network<float> net = constant_net(0.3f, -0.2f);
  const MultiChannelVolume in = random_input({12, 10, 9}, 2, rng);
  const PatchPlan pp = plan_sliding_window(in.dims(), {8, 8, 8});
  TtaPlan single;
  single.flip_sets = {0};
  const auto a = run_inference(net, in, pp, plan_tta(1));
  const auto b = run_inference(net, in, pp, single);
  CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("run_inference: volumes smaller than the patch are padded and cropped") {
  std::mt19937_64 rng(7);
  const Network<float> net = constant_net(0.0f, 2.0f);
  const MultiChannelVolume in = random_input({5, 8, 3}, 2, rng);
  const PatchPlan pp = plan_sliding_window(in.dims(), {8, 8, 8});
  CHECK(pp.origins.size() == 1);
  const auto r = run_inference(net, in, pp, plan_tta(1));
  CHECK(r.mask.dims() == in.dims());
  CHECK(r.mask.voxels.minCoeff() == 1.0f);
  CHECK_THROWS_AS(run_inference(net, random_input({5, 8, 3}, 3, rng), pp, plan_tta(1)), ShapeError);
}

TEST_CASE("plan JSON carries the documented keys") {
  const PatchPlan pp = plan_sliding_window({1000, 160, 128}, {112, 160, 128});
  const TtaPlan tp = plan_tta(pp.axial_steps);
  CHECK(pp.axial_steps > 8);
  CHECK(tp.flip_sets.size() == 2);
  const auto j = plan_to_json(pp, tp, std::nullopt);
  for (const char* k : {"patch", "origins", "step_fracs", "axis_coverage", "axial_steps", "flip_sets", "estimate_ms",
                        "within_budget"})
    CHECK(j.contains(k));
  CHECK(j.at("within_budget").is_null());
  CHECK(j.at("flip_sets")[1] == nlohmann::json::array({0}));
  const auto k = plan_to_json(pp, tp, estimate_runtime(pp, tp, 10.0));
  CHECK(k.at("within_budget").get<bool>());
}
