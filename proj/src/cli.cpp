#include "sineseg/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "sineseg/config.hpp"
#include "sineseg/error.hpp"
#include "sineseg/grad_check.hpp"

namespace sineseg {

namespace fs = std::filesystem;

namespace {

using IndexList = std::vector<long long>;

class UsageError : public Error {
 public:
  using Error::Error;
};

Dims3 to_dims(const IndexList& v, const char* what) {
  if (v.size() != 3) throw UsageError(std::string(what) + " needs three comma-separated values (z,y,x)");
  for (auto x : v)
    if (x < 1) throw UsageError(std::string(what) + " values must be positive");
  return {static_cast<Index>(v[0]), static_cast<Index>(v[1]), static_cast<Index>(v[2])};
}

void set_threads(int n) {
  if (n > 0) Eigen::setNbThreads(n);
}

void write_json(const nlohmann::json& j, const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

// Options shared by every subcommand.
struct Common {
  std::string config_path;
  int threads = 0;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "Pipeline config JSON (overrides defaults; flags override it)");
    app->add_option("--threads", threads, "Cap on worker threads")->check(CLI::PositiveNumber);
  }

  PipelineConfig load() const {
    set_threads(threads);
    return config_path.empty() ? PipelineConfig{} : load_pipeline_config(config_path);
  }
};

std::vector<double> parse_constants(const std::string& s) {
  std::vector<double> out;
  if (s.empty() || s == "none") return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("bad sine constant '" + tok + "'");
    }
  }
  return out;
}

struct PlannerFlags {
  double step_init = 0, step_increment = 0, coverage = 0, step_cap = 0;
  int max_inplane = 0;
  CLI::Option *o_init{}, *o_inc{}, *o_cov{}, *o_cap{}, *o_max{};

  void add(CLI::App* app) {
    o_init = app->add_option("--step-init", step_init, "Initial step fraction (0.5)");
    o_inc = app->add_option("--step-increment", step_increment, "In-plane step escalation per iteration (0.1)");
    o_cov = app->add_option("--coverage-threshold", coverage, "In-plane coverage to exceed (0.8)");
    o_cap = app->add_option("--step-cap", step_cap, "Largest in-plane step fraction (2.0)");
    o_max = app->add_option("--max-inplane-steps", max_inplane, "In-plane placements per axis (4)");
  }

  void apply(PlannerConfig& p) const {
    if (o_init->count()) p.step_init = step_init;
    if (o_inc->count()) p.step_increment = step_increment;
    if (o_cov->count()) p.coverage_threshold = coverage;
    if (o_cap->count()) p.step_cap = step_cap;
    if (o_max->count()) p.max_inplane_steps = max_inplane;
    p.validate();
  }
};

double time_one_pass_ms(const Network<float>& net, const Dims3& patch) {
  const FeatureMap<float> x(net.config().in_channels, patch);
  const auto t0 = std::chrono::steady_clock::now();
  forward(net, x);
  const auto t1 = std::chrono::steady_clock::now();
  return std::max(1e-3, std::chrono::duration<double, std::milli>(t1 - t0).count());
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sine-normalized CT/PET lesion segmentation toolkit", "sineseg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // synth
  Common c_synth;
  std::uint64_t seed = 42;
  IndexList dims{64, 64, 64}, radius{5, 8};
  int lesions = 2;
  std::vector<double> uptake{4.0, 8.0};
  double background = 1.0, noise = 0.25;
  std::string out_dir = ".", prefix = "case";
  auto* synth = app.add_subcommand("synth", "Generate a CT/PET/label phantom");
  c_synth.add(synth);
  synth->add_option("--seed", seed, "RNG seed");
  synth->add_option("--dims", dims, "Volume dims z,y,x")->delimiter(',');
  synth->add_option("--lesions", lesions, "Number of spherical lesions")->check(CLI::NonNegativeNumber);
  synth->add_option("--radius", radius, "Lesion radius range min,max (voxels)")->delimiter(',');
  synth->add_option("--uptake", uptake, "Lesion PET uptake range min,max")->delimiter(',');
  synth->add_option("--background", background, "Background PET uptake");
  synth->add_option("--noise", noise, "Background PET noise std");
  synth->add_option("--out-dir", out_dir, "Output directory");
  synth->add_option("--prefix", prefix, "File name prefix");

  // preprocess
  Common c_pre;
  std::string ct_stem, pet_stem, sine_arg;
  auto* pre = app.add_subcommand("preprocess", "Normalize CT/PET and build the network input");
  c_pre.add(pre);
  pre->add_option("--ct", ct_stem, "CT volume stem (<stem>.f32 + <stem>.json)")->required();
  pre->add_option("--pet", pet_stem, "PET volume stem")->required();
  pre->add_option("--out-dir", out_dir, "Output directory")->required();
  auto* o_sine = pre->add_option("--sine-constants", sine_arg, "Comma-separated sine frequencies, or 'none'");

  // plan
  Common c_plan;
  std::string meta_path, plan_out;
  IndexList plan_dims, patch;
  double per_patch_ms = 0.0, budget_ms = 0.0;
  PlannerFlags plan_flags;
  auto* plan = app.add_subcommand("plan", "Sliding-window and TTA schedule for a volume");
  c_plan.add(plan);
  plan->add_option("--meta", meta_path, "Volume sidecar JSON to plan for");
  plan->add_option("--dims", plan_dims, "Volume dims z,y,x")->delimiter(',');
  auto* o_plan_patch = plan->add_option("--patch", patch, "Patch dims z,y,x")->delimiter(',');
  auto* o_plan_ppm = plan->add_option("--per-patch-ms", per_patch_ms, "Per forward-pass cost in ms");
  auto* o_plan_budget = plan->add_option("--budget-ms", budget_ms, "Runtime budget in ms");
  plan->add_option("--out", plan_out, "Write plan JSON here as well as stdout");
  plan_flags.add(plan);

  // train-toy
  Common c_train;
  std::string input_stem, labels_stem, model_out = "model.ssnet", history_out, holdout_input, holdout_labels;
  std::string preset;
  int epochs = 0, accum = 0, iters = 0, eval_every = -1;
  double lr = 0, momentum = 0;
  std::uint64_t train_seed = 0, net_seed = 0;
  IndexList train_patch;
  bool no_sine = false;
  auto* train = app.add_subcommand("train-toy", "Train a network on preprocessed phantoms");
  c_train.add(train);
  train->add_option("--input", input_stem, "Assembled input stem from preprocess")->required();
  train->add_option("--labels", labels_stem, "Label volume stem")->required();
  train->add_option("--out", model_out, "Checkpoint path");
  train->add_option("--history", history_out, "History CSV path");
  auto* o_preset = train->add_option("--preset", preset, "Network preset: toy, full or a JSON file");
  auto* o_epochs = train->add_option("--epochs", epochs, "Epochs")->check(CLI::PositiveNumber);
  auto* o_lr = train->add_option("--lr", lr, "Initial learning rate");
  auto* o_mom = train->add_option("--momentum", momentum, "Nesterov momentum");
  auto* o_accum = train->add_option("--accum-steps", accum, "Micro-batches per optimizer step")->check(CLI::PositiveNumber);
  auto* o_iters = train->add_option("--iters-per-epoch", iters, "Optimizer steps per epoch")->check(CLI::PositiveNumber);
  auto* o_tseed = train->add_option("--seed", train_seed, "Sampling seed");
  auto* o_nseed = train->add_option("--net-seed", net_seed, "Parameter init seed");
  auto* o_tpatch = train->add_option("--train-patch", train_patch, "Training patch z,y,x")->delimiter(',');
  auto* o_eval = train->add_option("--eval-every", eval_every, "Held-out Dice cadence (0 disables)");
  train->add_option("--holdout-input", holdout_input, "Held-out input stem (defaults to the training case)");
  train->add_option("--holdout-labels", holdout_labels, "Held-out label stem");
  train->add_flag("--no-sine", no_sine, "Ablation: feed only the ct and pet channels");

  // infer
  Common c_infer;
  std::string model_path, infer_labels;
  IndexList infer_patch;
  double infer_ppm = 0.0, infer_budget = 0.0;
  bool enforce = false;
  PlannerFlags infer_flags;
  auto* infer = app.add_subcommand("infer", "Sliding-window + TTA inference");
  c_infer.add(infer);
  infer->add_option("--model", model_path, "Checkpoint from train-toy")->required();
  infer->add_option("--input", input_stem, "Assembled input stem")->required();
  infer->add_option("--out-dir", out_dir, "Output directory")->required();
  infer->add_option("--labels", infer_labels, "Ground-truth label stem; prints Dice");
  auto* o_infer_patch = infer->add_option("--patch", infer_patch, "Patch dims z,y,x")->delimiter(',');
  auto* o_infer_ppm = infer->add_option("--per-patch-ms", infer_ppm, "Per-pass cost (measured when omitted)");
  auto* o_infer_budget = infer->add_option("--budget-ms", infer_budget, "Runtime budget in ms");
  infer->add_flag("--enforce-budget", enforce, "Exit 5 without running when the estimate exceeds the budget");
  infer_flags.add(infer);

  // grad-check
  Common c_grad;
  std::string grad_preset = "toy";
  bool corrupt = false;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference verification of all gradients");
  c_grad.add(grad);
  grad->add_option("--preset", grad_preset, "Network preset: toy or a JSON file");
  grad->add_flag("--corrupt", corrupt, "Negative control: perturb the analytic network gradient");

  // info
  Common c_info;
  std::string info_model, info_volume;
  auto* info = app.add_subcommand("info", "Print the effective config, a checkpoint or a volume summary");
  c_info.add(info);
  info->add_option("--model", info_model, "Checkpoint to describe");
  info->add_option("--volume", info_volume, "Volume stem to describe");

  std::vector<std::string> argv_store{"sineseg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*synth) {
      c_synth.load();
      PhantomSpec spec;
      spec.seed = seed;
      spec.dims = to_dims(dims, "--dims");
      spec.n_lesions = lesions;
      if (radius.size() != 2 || uptake.size() != 2) throw UsageError("--radius and --uptake take min,max");
      spec.lesion_radius_range = {static_cast<int>(radius[0]), static_cast<int>(radius[1])};
      spec.lesion_uptake_range = {static_cast<float>(uptake[0]), static_cast<float>(uptake[1])};
      spec.background_uptake = static_cast<float>(background);
      spec.pet_noise_std = static_cast<float>(noise);
      Phantom ph;
      try {
        ph = synth_phantom(spec);
      } catch (const PreconditionError& e) {
        throw UsageError(e.what());
      }
      fs::create_directories(out_dir);
      const fs::path base = fs::path(out_dir) / prefix;
      write_volume(ph.ct, base.string() + "_ct");
      write_volume(ph.pet, base.string() + "_pet");
      write_volume(ph.labels, base.string() + "_label");
      out << "wrote " << base.string() << "_{ct,pet,label}.{f32,json}; lesion voxels "
          << ph.labels.voxels.sum() << '\n';
      return kExitOk;
    }

    if (*pre) {
      PipelineConfig cfg = c_pre.load();
      if (o_sine->count()) cfg.sine.constants_a = parse_constants(sine_arg);
      const Volume ct = read_volume(ct_stem);
      const Volume pet = read_volume(pet_stem);
      if (ct.dims() != pet.dims()) throw ShapeError("CT and PET dims differ");
      const CtNormParams cp = fit_ct_norm(ct, cfg.ct_p_low, cfg.ct_p_high);
      const Volume ct_norm = normalize_ct(ct, cp);
      const auto [pet_norm, pp] = normalize_pet(pet);
      MultiChannelVolume sine;
      sine.meta = pet_norm.meta;
      if (!cfg.sine.constants_a.empty()) sine = sine_transform(pet_norm, cfg.sine);
      const MultiChannelVolume input = assemble_input(ct_norm, pet_norm, sine);

      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      write_volume(ct_norm, dir / "ct_norm");
      write_volume(pet_norm, dir / "pet_norm");
      for (Index ch = 0; ch < sine.num_channels(); ++ch)
        write_volume(sine.channel(ch), dir / sine.channel_names[static_cast<std::size_t>(ch)]);
      write_multichannel(input, dir / "input");
      write_json({{"ct", to_json(cp)}, {"pet", to_json(pp)}, {"sine_constants", cfg.sine.constants_a}},
                 dir / "norm_params.json");
      out << "wrote " << input.num_channels() << "-channel input [";
      for (std::size_t i = 0; i < input.channel_names.size(); ++i)
        out << (i ? "," : "") << input.channel_names[i];
      out << "] to " << (dir / "input").string() << '\n';
      return kExitOk;
    }

    if (*plan) {
      PipelineConfig cfg = c_plan.load();
      plan_flags.apply(cfg.inference.planner);
      if (o_plan_patch->count()) cfg.patch = to_dims(patch, "--patch");
      if (o_plan_ppm->count()) cfg.inference.per_patch_ms = per_patch_ms;
      if (o_plan_budget->count()) cfg.inference.budget_ms = budget_ms;
      cfg.validate();
      Dims3 vol;
      if (!meta_path.empty()) {
        std::ifstream in(meta_path);
        if (!in) throw IoError("cannot open " + meta_path);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.contains("dims")) throw FormatError("malformed volume meta " + meta_path);
        vol = to_dims(j.at("dims").get<IndexList>(), "meta dims");
      } else if (!plan_dims.empty()) {
        vol = to_dims(plan_dims, "--dims");
      } else {
        throw UsageError("plan needs --meta or --dims");
      }
      const PatchPlan pp = plan_sliding_window(vol, cfg.patch, cfg.inference.planner);
      const TtaPlan tp = plan_tta(pp.axial_steps);
      std::optional<RuntimeEstimate> est;
      if (cfg.inference.per_patch_ms > 0.0)
        est = estimate_runtime(pp, tp, cfg.inference.per_patch_ms, cfg.inference.budget_ms);
      const auto j = plan_to_json(pp, tp, est);
      if (!plan_out.empty()) write_json(j, plan_out);
      out << j.dump(2) << '\n';
      return kExitOk;
    }

    if (*train) {
      PipelineConfig cfg = c_train.load();
      if (c_train.config_path.empty()) {
        cfg.network_preset = "toy";
        cfg.train = TrainConfig::toy();
      }
      if (o_preset->count()) cfg.network_preset = preset;
      if (o_epochs->count()) cfg.train.max_epochs = epochs;
      if (o_lr->count()) cfg.train.lr0 = lr;
      if (o_mom->count()) cfg.train.momentum = momentum;
      if (o_accum->count()) cfg.train.accum_steps = accum;
      if (o_iters->count()) cfg.train.iterations_per_epoch = iters;
      if (o_tseed->count()) cfg.train.seed = train_seed;
      if (o_tpatch->count()) cfg.train.patch = to_dims(train_patch, "--train-patch");
      if (o_eval->count()) cfg.train.eval_every = eval_every;
      cfg.validate();

      MultiChannelVolume input = read_multichannel(input_stem);
      if (no_sine) input = input.select({"ct", "pet"});
      const Volume labels = read_volume(labels_stem);
      if (labels.dims() != input.dims()) throw ShapeError("labels and input dims differ");

      NetworkConfig ncfg = cfg.network();
      ncfg.input_channels = input.channel_names;
      ncfg.in_channels = input.num_channels();
      if (o_nseed->count()) ncfg.seed = net_seed;
      Network<float> net = build_network<float>(ncfg);

      std::vector<TrainingCase> data{{input, label_map_from_volume(labels)}};
      std::optional<TrainingCase> holdout;
      if (!holdout_input.empty() && !holdout_labels.empty()) {
        MultiChannelVolume hi = read_multichannel(holdout_input).select(input.channel_names);
        holdout = TrainingCase{std::move(hi), label_map_from_volume(read_volume(holdout_labels))};
      }
      const TrainingCase* eval_case = holdout ? &*holdout : &data.front();
      const auto t0 = std::chrono::steady_clock::now();
      const TrainHistory h = train_toy(data, net, cfg.train, eval_case, [&](const EpochRecord& r) {
        if (!std::isnan(r.dice))
          out << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.loss << " dice " << r.dice << '\n';
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_network(net, model_out);
      if (!history_out.empty()) write_history_csv(h, history_out);
      out << "trained " << h.epochs.size() << " epochs in " << std::fixed << std::setprecision(1) << secs
          << " s; final dice " << std::setprecision(4) << h.epochs.back().dice << "; checkpoint " << model_out
          << '\n'
          << std::defaultfloat;
      return kExitOk;
    }

    if (*infer) {
      PipelineConfig cfg = c_infer.load();
      infer_flags.apply(cfg.inference.planner);
      if (o_infer_patch->count()) cfg.patch = to_dims(infer_patch, "--patch");
      if (o_infer_ppm->count()) cfg.inference.per_patch_ms = infer_ppm;
      if (o_infer_budget->count()) cfg.inference.budget_ms = infer_budget;
      cfg.validate();

      const Network<float> net = load_network(model_path);
      MultiChannelVolume input = read_multichannel(input_stem);
      if (!net.config().input_channels.empty()) input = input.select(net.config().input_channels);
      const PatchPlan pp = plan_sliding_window(input.dims(), cfg.patch, cfg.inference.planner);
      const TtaPlan tp = plan_tta(pp.axial_steps);
      const double ppm = cfg.inference.per_patch_ms > 0.0 ? cfg.inference.per_patch_ms : time_one_pass_ms(net, cfg.patch);
      const RuntimeEstimate est = estimate_runtime(pp, tp, ppm, cfg.inference.budget_ms);
      out << "plan: " << pp.origins.size() << " patches x " << tp.flip_sets.size() << " flips = " << est.total_passes
          << " passes; axial steps " << pp.axial_steps << "; estimate " << std::fixed << std::setprecision(1)
          << est.estimate_ms << " ms of " << est.budget_ms << " ms budget ("
          << (est.within_budget ? "within" : "over") << ")\n"
          << std::defaultfloat;
      if (enforce && !est.within_budget) {
        err << "estimated runtime exceeds the budget\n";
        return kExitBudget;
      }
      InferenceOptions opts;
      opts.sigma_scale = cfg.inference.sigma_scale;
      const auto t0 = std::chrono::steady_clock::now();
      const InferenceResult res = run_inference(net, input, pp, tp, opts);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      fs::create_directories(out_dir);
      write_volume(res.mask, fs::path(out_dir) / "mask");
      write_volume(res.prob, fs::path(out_dir) / "prob");
      out << "ran " << res.passes << " passes in " << std::fixed << std::setprecision(1) << ms << " ms\n"
          << std::defaultfloat;
      if (!infer_labels.empty()) {
        const Volume gt = read_volume(infer_labels);
        if (gt.dims() != res.mask.dims()) throw ShapeError("ground-truth dims differ from the input");
        const double dice = dice_coefficient(label_map_from_volume(res.mask), label_map_from_volume(gt));
        out << "dice " << std::setprecision(6) << dice << '\n';
      }
      return kExitOk;
    }

    if (*grad) {
      PipelineConfig cfg = c_grad.load();
      cfg.network_preset = grad_preset;
      GradCheckOptions opts;
      opts.network = cfg.network();
      opts.sine_constants = cfg.sine.constants_a;
      opts.corrupt_network_gradient = corrupt;
      const GradCheckReport rep = run_grad_check(opts);
      rep.print(out);
      const bool ok = rep.all_passed();
      out << (ok ? "grad-check passed" : "grad-check FAILED") << '\n';
      return ok ? kExitOk : kExitVerification;
    }

    if (*info) {
      PipelineConfig cfg = c_info.load();
      if (!info_model.empty()) {
        const Network<float> net = load_network(info_model);
        out << nlohmann::json{{"config", to_json(net.config())}, {"parameters", net.parameter_count()}}.dump(2)
            << '\n';
      } else if (!info_volume.empty()) {
        const Volume v = read_volume(info_volume);
        out << "dims " << v.dims()[0] << "x" << v.dims()[1] << "x" << v.dims()[2] << " modality "
            << to_string(v.meta.modality) << " min " << v.voxels.minCoeff() << " max " << v.voxels.maxCoeff()
            << " mean " << v.voxels.mean() << '\n';
      } else {
        const NetworkConfig n = cfg.network();
        out << nlohmann::json{{"pipeline", to_json(cfg)}, {"network", to_json(n)},
                              {"network_parameters", Network<float>(n).parameter_count()}}
                   .dump(2)
            << '\n';
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ShapeError& e) {
    err << "data mismatch: " << e.what() << '\n';
    return kExitDataMismatch;
  } catch (const PreconditionError& e) {
    err << "data mismatch: " << e.what() << '\n';
    return kExitDataMismatch;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerification;
  }
  return kExitUsage;
}

}  // namespace sineseg
