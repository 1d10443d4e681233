// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any fails.

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <regex>
#include <sstream>

#include "sineseg/cli.hpp"
#include "sineseg/config.hpp"
#include "sineseg/error.hpp"
#include "sineseg/grad_check.hpp"
#include "test_util.hpp"

using namespace sineseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << title << " (" << o.detail << "; "
            << std::fixed << std::setprecision(2) << seconds_since(t0) << " s)" << std::defaultfloat << std::endl;
}

bool bit_equal(const void* a, const void* b, std::size_t bytes) { return std::memcmp(a, b, bytes) == 0; }

Outcome sine_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VolumeMeta meta;
  meta.dims = {1, 100, 100};
  Volume pet(meta);
  for (Index i = 0; i < pet.size(); ++i) pet.voxels[i] = float(u(rng));
  const MultiChannelVolume s = sine_transform(pet, SineNormConfig{{20.0, 30.0}});
  long double worst = 0;
  for (Index c = 0; c < 2; ++c) {
    const long double a = c == 0 ? 20.0L : 30.0L;
    for (Index i = 0; i < pet.size(); ++i) {
      const long double want = sinl(a * static_cast<long double>(pet.voxels[i]));
      worst = std::max(worst, fabsl(static_cast<long double>(s.channels(c, i)) - want));
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "max abs err " << double(worst) << " over 20000 samples";
  return {worst < 1e-6L && secs < 1.0, d.str()};
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const GradCheckReport rep = run_grad_check(GradCheckOptions{});
  std::ostringstream d;
  for (const auto& e : rep.entries) d << e.component << "=" << std::setprecision(2) << e.max_rel_error << " ";
  // The negative control must trip the same suite.
  GradCheckOptions corrupt;
  corrupt.corrupt_network_gradient = true;
  const bool control_fails = !run_grad_check(corrupt).all_passed();
  d << "control " << (control_fails ? "fails" : "PASSES");
  return {rep.all_passed() && control_fails && seconds_since(t0) < 120.0, d.str()};
}

Outcome default_constants() {
  const PipelineConfig cfg;
  const NetworkConfig net = cfg.network();
  const nlohmann::json snapshot = {
      {"sine_constants", cfg.sine.constants_a},
      {"features", net.features},
      {"blocks_per_stage", net.blocks_per_stage},
      {"kernel", net.kernel},
      {"patch", cfg.patch},
      {"lr0", cfg.train.lr0},
      {"poly_exponent", cfg.train.poly_exponent},
      {"accum_steps", cfg.train.accum_steps},
      {"step_init", cfg.inference.planner.step_init},
      {"step_increment", cfg.inference.planner.step_increment},
      {"max_inplane_steps", cfg.inference.planner.max_inplane_steps},
      {"coverage_threshold", cfg.inference.planner.coverage_threshold},
      {"budget_ms", cfg.inference.budget_ms},
  };
  const nlohmann::json golden = nlohmann::json::parse(R"({
    "sine_constants": [20.0, 30.0],
    "features": [32, 64, 128, 256, 320, 320],
    "blocks_per_stage": [1, 3, 4, 6, 6, 6],
    "kernel": [3, 3, 3],
    "patch": [112, 160, 128],
    "lr0": 0.01,
    "poly_exponent": 0.9,
    "accum_steps": 8,
    "step_init": 0.5,
    "step_increment": 0.1,
    "max_inplane_steps": 4,
    "coverage_threshold": 0.8,
    "budget_ms": 300000.0
  })");
  if (snapshot == golden) return {true, "13 constants match the snapshot"};
  return {false, "diff " + nlohmann::json::diff(golden, snapshot).dump()};
}

Outcome poly_lr_closed_form() {
  const double e0 = poly_lr(0, 1000, 0.01, 0.9);
  const double emax = poly_lr(1000, 1000, 0.01, 0.9);
  const double half = poly_lr(500, 1000, 0.01, 0.9);
  std::ostringstream d;
  d << std::setprecision(12) << "lr(0)=" << e0 << " lr(T)=" << emax << " lr(T/2)=" << half;
  return {e0 == 0.01 && emax == 0.0 && std::abs(half - 0.00535887) < 1e-8 &&
              std::abs(half - 0.01 * std::pow(0.5, 0.9)) < 1e-9,
          d.str()};
}

Outcome planner_behaviour() {
  const auto t0 = Clock::now();
  const PatchPlan worked = plan_sliding_window({112, 600, 128}, {112, 160, 128});
  const bool worked_ok =
      std::abs(worked.step_fracs[1] - 0.7) < 1e-12 && std::abs(worked.axis_coverage[1] - 496.0 / 600.0) < 1e-9;
  std::mt19937_64 rng(5);
  int over_cap = 0;
  for (int t = 0; t < 1000; ++t) {
    Dims3 patch, vol;
    for (int a = 0; a < 3; ++a) {
      patch[a] = 8 + Index(rng() % 200);
      vol[a] = Index(1 + rng() % 1200);
    }
    const PatchPlan pp = plan_sliding_window(vol, patch);
    if (pp.axis_origins[1].size() > 4 || pp.axis_origins[2].size() > 4) ++over_cap;
  }
  const bool tta_ok =
      plan_tta(7).flip_sets.size() == 8 && plan_tta(8).flip_sets.size() == 4 && plan_tta(9).flip_sets.size() == 2;
  std::ostringstream d;
  d << "worked case s=" << worked.step_fracs[1] << " cov=" << std::setprecision(6) << worked.axis_coverage[1]
    << "; in-plane cap violations " << over_cap << "/1000; TTA 7/8/9 -> " << plan_tta(7).flip_sets.size() << "/"
    << plan_tta(8).flip_sets.size() << "/" << plan_tta(9).flip_sets.size();
  return {worked_ok && over_cap == 0 && tta_ok && seconds_since(t0) < 10.0, d.str()};
}

Outcome partition_of_unity() {
  NetworkConfig c = NetworkConfig::toy();
  c.n_stages = 2;
  c.features = {2, 4};
  c.blocks_per_stage = {1, 1};
  c.strides = {{1, 1, 1}, {2, 2, 2}};
  c.ds_heads = 1;
  c.in_channels = 2;
  c.input_channels.clear();
  Network<float> net(c);
  net.parameter("head0.bias").value << -0.75f, 1.25f;
  std::mt19937_64 rng(6);
  double worst = 0.0;
  int coverage_mismatch = 0;
  std::size_t max_origins = 0;
  for (int t = 0; t < 50; ++t) {
    const Dims3 d{10 + Index(rng() % 15), 10 + Index(rng() % 15), 10 + Index(rng() % 15)};
    MultiChannelVolume in;
    in.meta.dims = d;
    in.channel_names = {"a", "b"};
    in.channels = decltype(in.channels)::Random(2, voxel_count(d));
    PlannerConfig pc;
    pc.step_init = 0.2 + 0.05 * double(rng() % 8);
    pc.step_increment = 0.05;
    const PatchPlan pp = plan_sliding_window(d, {8, 8, 8}, pc);
    max_origins = std::max(max_origins, pp.origins.size());
    const InferenceResult r = run_inference(net, in, pp, plan_tta(pp.axial_steps));
    // Normalized weights are checked wherever a patch contributes; the uncovered share must match the plan.
    const Eigen::ArrayXf covered = (r.weight_sum.array() > 0.0f).cast<float>();
    const double expected_share = pp.axis_coverage[0] * pp.axis_coverage[1] * pp.axis_coverage[2];
    if (std::abs(double(covered.mean()) - expected_share) > 1e-6) ++coverage_mismatch;
    worst = std::max(worst, double(((r.logits.row(0).array().transpose() + 0.75f) * covered).abs().maxCoeff()));
    worst = std::max(worst, double(((r.logits.row(1).array().transpose() - 1.25f) * covered).abs().maxCoeff()));
  }
  std::ostringstream d;
  d << "max deviation " << worst << " over 50 plans (up to " << max_origins << " overlapping patches), covered-share mismatches " << coverage_mismatch;
  return {worst < 1e-5 && coverage_mismatch == 0, d.str()};
}

Outcome flip_exactness() {
  std::mt19937_64 rng(7);
  int mismatches = 0, checks = 0;
  for (int t = 0; t < 25; ++t) {
    const Dims3 d{1 + Index(rng() % 9), 1 + Index(rng() % 9), 1 + Index(rng() % 9)};
    MultiChannelVolume v;
    v.meta.dims = d;
    v.channel_names = {"a", "b", "c", "d"};
    v.channels = decltype(v.channels)::Random(4, voxel_count(d));
    FeatureMap<float> logits(2, d);
    logits.values = RowMatrix<float>::Random(2, voxel_count(d));
    for (FlipMask a = 0; a < 8; ++a) {
      const auto back = apply_flip(apply_flip(v, a), a);
      mismatches += !bit_equal(back.channels.data(), v.channels.data(), sizeof(float) * std::size_t(v.channels.size()));
      // TTA round trip: a map flipped like its input and unflipped must be the original map.
      const auto unflipped = apply_flip(apply_flip(logits, a), a);
      mismatches += !bit_equal(unflipped.values.data(), logits.values.data(),
                               sizeof(float) * std::size_t(logits.values.size()));
      // Flipping twice along different axes commutes.
      const FlipMask b = FlipMask((a + 3) % 8);
      const auto ab = apply_flip(apply_flip(v, a), b);
      const auto ba = apply_flip(apply_flip(v, b), a);
      mismatches += !bit_equal(ab.channels.data(), ba.channels.data(), sizeof(float) * std::size_t(v.channels.size()));
      checks += 3;
    }
  }
  return {mismatches == 0, std::to_string(checks - mismatches) + "/" + std::to_string(checks) + " bit-exact"};
}

std::optional<double> parse_dice(const std::string& out) {
  std::smatch m;
  if (std::regex_search(out, m, std::regex(R"(\ndice ([0-9.eE+-]+))"))) return std::stod(m[1]);
  return std::nullopt;
}

test::CliResult run(const std::vector<std::string>& args) {
  std::cout << "  $ sineseg";
  for (const auto& a : args) std::cout << ' ' << a;
  std::cout << std::endl;
  auto r = test::cli(args);
  if (r.code != 0) std::cout << r.err;
  return r;
}

Outcome toy_end_to_end(const fs::path& dir, bool sine, double& dice_out) {
  const auto t0 = Clock::now();
  const std::string d = dir.string();
  fs::create_directories(dir);
  if (run({"synth", "--seed", "42", "--dims", "64,64,64", "--lesions", "2", "--out-dir", d}).code != 0)
    return {false, "synth failed"};
  if (run({"preprocess", "--ct", d + "/case_ct", "--pet", d + "/case_pet", "--out-dir", d + "/pre"}).code != 0)
    return {false, "preprocess failed"};
  std::vector<std::string> train{"train-toy", "--input", d + "/pre/input", "--labels", d + "/case_label", "--out",
                                 d + "/model.ssnet", "--history", d + "/history.csv"};
  if (!sine) train.push_back("--no-sine");
  const auto tr = run(train);
  if (tr.code != 0) return {false, "train-toy failed"};
  const auto inf = run({"infer", "--model", d + "/model.ssnet", "--input", d + "/pre/input", "--out-dir", d + "/out",
                        "--patch", "32,32,32", "--labels", d + "/case_label"});
  if (inf.code != 0) return {false, "infer failed"};
  std::cout << inf.out;
  const auto dice = parse_dice(inf.out);
  if (!dice) return {false, "no Dice in infer output"};
  dice_out = *dice;
  const double secs = seconds_since(t0);
  std::ostringstream o;
  o << "Dice " << std::setprecision(4) << *dice << ", pipeline " << std::setprecision(1) << std::fixed << secs
    << " s";
  if (!sine) return {std::isfinite(*dice), o.str() + " (2-channel ablation, no threshold)"};
  return {*dice > 0.8 && secs < 600.0, o.str()};
}

Outcome serialization() {
  test::TempDir dir("accept");
  Network<float> net = build_network<float>(NetworkConfig::toy());
  std::mt19937_64 rng(10);
  std::normal_distribution<float> n(0.0f, 0.3f);
  for (auto& p : net.parameters())
    for (Index i = 0; i < p.value.size(); ++i) p.value[i] += n(rng);
  save_network(net, dir / "m.ssnet");
  const Network<float> back = load_network(dir / "m.ssnet");
  bool ckpt = back.parameters().size() == net.parameters().size();
  for (std::size_t i = 0; ckpt && i < net.parameters().size(); ++i)
    ckpt = bit_equal(net.parameters()[i].value.data(), back.parameters()[i].value.data(),
                     sizeof(float) * std::size_t(net.parameters()[i].value.size()));

  const Volume v = test::random_volume({7, 9, 5}, Modality::DERIVED, 11, -1e5f, 1e5f);
  write_volume(v, dir / "v");
  const Volume vb = read_volume(dir / "v");
  const bool raw = bit_equal(v.voxels.data(), vb.voxels.data(), sizeof(float) * std::size_t(v.size()));

  const Volume nii = read_nifti_subset(fs::path(SINESEG_TEST_DATA) / "int16_scaled.nii");
  int ulp_fail = 0;
  for (Index z = 0; z < 2; ++z)
    for (Index y = 0; y < 3; ++y)
      for (Index x = 0; x < 4; ++x) {
        const float want = 2.0f * float(100 * z + 10 * y + x) + 1.0f;
        if (std::abs(nii.at(z, y, x) - want) > std::nextafter(want, INFINITY) - want) ++ulp_fail;
      }
  std::ostringstream d;
  d << "checkpoint " << (ckpt ? "bit-exact" : "DIFFERS") << ", raw " << (raw ? "bit-exact" : "DIFFERS")
    << ", NIfTI voxels outside 1 ulp " << ulp_fail << "/24";
  return {ckpt && raw && ulp_fail == 0, d.str()};
}

}  // namespace

int main() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  report(1, "sine transform vs high-precision oracle", sine_oracle);
  report(2, "gradient suite (sinenorm, losses, toy network)", gradient_suite);
  report(3, "default config reproduces the stated constants", default_constants);
  report(4, "PolyLR closed form", poly_lr_closed_form);
  report(5, "planner escalation, in-plane cap and TTA cardinality", planner_behaviour);
  report(6, "aggregation partition of unity", partition_of_unity);
  report(7, "flip involution and TTA round trip", flip_exactness);

  test::TempDir work("accept_e2e");
  double dice_sine = 0.0, dice_plain = 0.0;
  report(8, "toy end-to-end Dice > 0.8 under 10 min",
         [&] { return toy_end_to_end(work.path() / "sine", true, dice_sine); });
  report(9, "sine-channel ablation path (2-channel input)",
         [&] { return toy_end_to_end(work.path() / "plain", false, dice_plain); });
  report(10, "checkpoint, raw and NIfTI serialization", serialization);

  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
