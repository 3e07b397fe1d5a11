// svfreg command-line tool: phantom generation, pretraining, registration,
// test-time adaptation, evaluation and CSV aggregation.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "svfreg/engine.hpp"
#include "svfreg/error.hpp"
#include "svfreg/eval.hpp"
#include "svfreg/io.hpp"
#include "svfreg/phantom.hpp"
#include "svfreg/rng.hpp"

#ifndef SVFREG_VERSION
#define SVFREG_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace svfreg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Output handling
// ---------------------------------------------------------------------------

void claim_file(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) throw UsageError("refusing to overwrite " + path.string() + " (pass --force)");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void claim_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw UsageError("refusing to write into non-empty " + dir.string() + " (pass --force)");
  }
  fs::create_directories(dir);
}

fs::path sidecar(const fs::path& file, const std::string& suffix) { return fs::path(file.string() + suffix); }

json run_manifest(const std::string& command, const json& config, const json& seeds, const json& inputs,
                  const json& outputs) {
  return {{"tool", "svfreg"},   {"version", SVFREG_VERSION}, {"command", command}, {"config", config},
          {"seeds", seeds},     {"inputs", inputs},          {"outputs", outputs}};
}

// ---------------------------------------------------------------------------
// Shared options
// ---------------------------------------------------------------------------

struct CommonFlags {
  bool force = false;
};

Direction parse_direction(const std::string& s) {
  try {
    return direction_from_string(s);
  } catch (const std::invalid_argument&) {
    throw UsageError("direction must be fwd or inv, got '" + s + "'");
  }
}

BinaryMask load_mask(const fs::path& path) {
  try {
    return BinaryMask(read_scalar_vol(path));
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void require_pair_dims(const ScalarVolume& fixed, const ScalarVolume& moving) {
  if (!(fixed.dims() == moving.dims())) throw DataError("fixed and moving images differ in dims");
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

struct PhantomArgs {
  int count = 1;
  int dims = 48;
  double scale = 0.8;
  std::optional<double> scale_max;
  double random_amplitude = 1.0;
  double smoothness = 4.0;
  std::uint64_t seed = 0;
  std::string out;
};

int run_phantom(const PhantomArgs& a, const CommonFlags& flags) {
  const fs::path out(a.out);
  claim_dir(out, flags.force);
  const Dims dims{a.dims, a.dims, a.dims};
  const CounterRng root(a.seed, 0xCA5E);
  json cases = json::array();
  json outputs = json::array();
  for (int i = 0; i < a.count; ++i) {
    double scale = a.scale;
    if (a.scale_max && a.count > 1) scale = a.scale + (*a.scale_max - a.scale) * i / (a.count - 1);
    const std::uint64_t case_seed = root.split(static_cast<std::uint64_t>(i)).key();
    const PhantomCase pc = make_phantom_pair(dims, {scale, a.random_amplitude, a.smoothness}, case_seed);

    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    const fs::path dir = out / id;
    fs::create_directories(dir);
    write_vol(dir / "fixed.vol", pc.fixed, "fixed");
    write_vol(dir / "moving.vol", pc.moving, "moving");
    write_vol(dir / "fixed_mask.vol", pc.fixed_mask.volume(), "fixed_mask");
    write_vol(dir / "moving_mask.vol", pc.moving_mask.volume(), "moving_mask");
    write_vol(dir / "v_gt.vol", pc.v_gt, "v_gt");
    const json info = {{"case_id", id},
                       {"seed", case_seed},
                       {"dims", {a.dims, a.dims, a.dims}},
                       {"spacing_mm", kPhantomSpacingMm},
                       {"radial_scale", pc.deformation.radial_scale},
                       {"random_amplitude", pc.deformation.random_amplitude},
                       {"smoothness", pc.deformation.smoothness},
                       {"delta_v_analog", pc.delta_v_analog},
                       {"retries", pc.retries}};
    write_json(dir / "case.json", info);
    cases.push_back(info);
    outputs.push_back(dir.string());
  }
  write_json(out / "cases.json", {{"cases", cases}});
  const json config = {{"count", a.count},
                       {"dims", a.dims},
                       {"scale", a.scale},
                       {"scale_max", a.scale_max ? json(*a.scale_max) : json(nullptr)},
                       {"random_amplitude", a.random_amplitude},
                       {"smoothness", a.smoothness}};
  write_json(out / "manifest.json", run_manifest("phantom", config, {{"seed", a.seed}}, json::object(), outputs));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  int epochs = 10;
  std::string out;
  AdaptConfig config;
  std::uint64_t seed = 0;
};

std::vector<fs::path> case_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "fixed.vol") && fs::exists(entry.path() / "moving.vol")) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DataError("no case directories with fixed.vol and moving.vol under " + root.string());
  return dirs;
}

int run_train(const TrainArgs& a, const CommonFlags& flags) {
  const fs::path out(a.out);
  claim_file(out, flags.force);
  claim_file(sidecar(out, ".manifest.json"), flags.force);
  claim_file(sidecar(out, ".log.json"), flags.force);

  std::vector<ImagePair> pairs;
  json inputs = json::array();
  for (const auto& dir : case_dirs(a.data)) {
    ImagePair p{read_scalar_vol(dir / "fixed.vol"), read_scalar_vol(dir / "moving.vol")};
    require_pair_dims(p.fixed, p.moving);
    pairs.push_back(std::move(p));
    inputs.push_back(dir.string());
  }

  const CounterRng root(a.seed, 0x7EA1);
  const std::uint64_t init_seed = root.split(0).key();
  const std::uint64_t shuffle_seed = root.split(1).key();
  const PredictorParams init = init_params(Architecture{}, init_seed, a.config.dropout_rate);
  const PretrainResult result = pretrain(init, pairs, a.config, a.epochs, shuffle_seed, [](int epoch, double loss) {
    std::clog << "epoch " << epoch << " loss " << loss << '\n';
  });

  const json seeds = {{"seed", a.seed}, {"init_seed", init_seed}, {"shuffle_seed", shuffle_seed}};
  save_checkpoint(out, result.params, {{"init_seed", init_seed}, {"shuffle_seed", shuffle_seed}, {"epochs", a.epochs}});
  write_json(sidecar(out, ".log.json"), {{"initial_loss", result.initial_loss}, {"epoch_losses", result.epoch_losses}});
  json config = to_json(a.config);
  config["epochs"] = a.epochs;
  write_json(sidecar(out, ".manifest.json"),
             run_manifest("train", config, seeds, {{"data", inputs}},
                          {out.string(), sidecar(out, ".log.json").string()}));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// register / adapt
// ---------------------------------------------------------------------------

struct PairArgs {
  std::string ckpt;
  std::string fixed;
  std::string moving;
  std::string direction = "fwd";
  std::string out;
};

void write_registration(const fs::path& dir, const Registration& r) {
  write_vol(dir / "velocity.vol", r.velocity, "velocity");
  write_vol(dir / "disp.vol", r.displacement.field, "displacement");
  write_vol(dir / "warped.vol", r.warped, "warped");
}

json pair_inputs(const PairArgs& a) { return {{"ckpt", a.ckpt}, {"fixed", a.fixed}, {"moving", a.moving}}; }

int run_register(const PairArgs& a, int integration_steps, const CommonFlags& flags) {
  const Direction dir = parse_direction(a.direction);
  const fs::path out(a.out);
  claim_dir(out, flags.force);
  const PredictorParams params = load_checkpoint(a.ckpt);
  const ScalarVolume fixed = read_scalar_vol(a.fixed);
  const ScalarVolume moving = read_scalar_vol(a.moving);
  require_pair_dims(fixed, moving);

  write_registration(out, register_pair(params, fixed, moving, dir, integration_steps));
  const json config = {{"direction", to_string(dir)}, {"integration_steps", integration_steps}};
  write_json(out / "manifest.json",
             run_manifest("register", config, json::object(), pair_inputs(a),
                          {"velocity.vol", "disp.vol", "warped.vol"}));
  return kExitOk;
}

int run_adapt(const PairArgs& a, AdaptConfig config, const CommonFlags& flags) {
  config.direction = parse_direction(a.direction);
  const fs::path out(a.out);
  claim_dir(out, flags.force);
  const PredictorParams params = load_checkpoint(a.ckpt);
  const ScalarVolume fixed = read_scalar_vol(a.fixed);
  const ScalarVolume moving = read_scalar_vol(a.moving);
  require_pair_dims(fixed, moving);

  const AdaptResult result = adapt(params, fixed, moving, config);
  write_registration(out, register_pair(result.params, fixed, moving, config.direction, config.integration_steps));
  json outputs = {"velocity.vol", "disp.vol", "warped.vol", "adapted.ckpt", "report.json", "timing.json"};
  const UncertaintyMap& um = result.report.uncertainty;
  if (um.variance.size() > 0) {
    write_vol(out / "variance.vol", um.variance, "variance");
    write_vol(out / "weights.vol", um.weights, "weights");
    outputs.push_back("variance.vol");
    outputs.push_back("weights.vol");
  }
  save_checkpoint(out / "adapted.ckpt", result.params, {{"parent", a.ckpt}, {"adapt", to_json(config)}});
  write_json(out / "report.json", {{"config", to_json(config)}, {"report", to_json(result.report)}});
  write_json(out / "timing.json", timings_json(result.report));
  write_json(out / "manifest.json",
             run_manifest("adapt", to_json(config), {{"seed", config.seed}}, pair_inputs(a), outputs));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string fixed_mask;
  std::string warped_mask;
  std::string moving_mask;
  std::string disp;
  std::string inverse_disp;
  std::string direction = "fwd";
  std::string case_id;
  std::string label;
  std::string out;
  int integration_steps = kDefaultIntegrationSteps;
};

int run_eval(const EvalArgs& a, const CommonFlags& flags) {
  if (a.warped_mask.empty() == a.moving_mask.empty()) {
    throw UsageError("eval needs exactly one of --warped-mask or --moving-mask");
  }
  if (!a.moving_mask.empty() && a.disp.empty()) throw UsageError("--moving-mask requires --disp");
  const Direction dir = parse_direction(a.direction);
  const fs::path out(a.out);
  claim_file(out, flags.force);
  claim_file(sidecar(out, ".manifest.json"), flags.force);

  const BinaryMask reference = load_mask(a.fixed_mask);
  DisplacementField u = DisplacementField::identity(reference.dims());
  if (!a.disp.empty()) u = DisplacementField{read_vector_vol(a.disp), dir, a.integration_steps};
  if (!(u.field.dims() == reference.dims())) throw DataError("displacement and mask dims differ");

  const BinaryMask warped = a.warped_mask.empty() ? warp_mask(load_mask(a.moving_mask), u) : load_mask(a.warped_mask);
  if (!(warped.dims() == reference.dims())) throw DataError("mask dims differ");
  if (reference.empty() || warped.empty()) throw DataError("empty mask");

  MetricsReport report = evaluate(reference, warped, u, a.case_id);
  report.direction = dir;
  if (!a.inverse_disp.empty()) {
    const DisplacementField inv{read_vector_vol(a.inverse_disp), Direction::Inverse, a.integration_steps};
    if (!(inv.field.dims() == reference.dims())) throw DataError("inverse displacement dims differ");
    report.inv_consistency_vox = inverse_consistency_error(u, inv, reference);
  }
  json j = to_json(report);
  if (!a.label.empty()) j["label"] = a.label;
  write_json(out, j);

  const json inputs = {{"fixed_mask", a.fixed_mask}, {"warped_mask", a.warped_mask}, {"moving_mask", a.moving_mask},
                       {"disp", a.disp},             {"inverse_disp", a.inverse_disp}};
  const json config = {{"direction", to_string(dir)}, {"case_id", a.case_id}, {"label", a.label}};
  write_json(sidecar(out, ".manifest.json"), run_manifest("eval", config, json::object(), inputs, {out.string()}));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string label;
  std::string case_id;
  std::string direction;
  double dsc = 0.0;
  double assd_mm = 0.0;
  double folding_pct = 0.0;
  std::optional<double> inv_consistency;
};

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

int run_report(const std::string& in, const std::string& csv, const CommonFlags& flags) {
  if (!fs::is_directory(in)) throw DataError("not a directory: " + in);
  claim_file(csv, flags.force);

  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(in)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::vector<ReportRow> rows;
  for (const auto& f : files) {
    json j;
    try {
      j = read_json(f);
    } catch (const std::exception&) {
      continue;
    }
    if (!j.is_object() || !j.contains("dsc") || !j.contains("direction")) continue;
    const MetricsReport m = metrics_from_json(j);
    rows.push_back({j.value("label", std::string{}), m.case_id, to_string(m.direction), m.dsc, m.assd_mm,
                    m.folding_pct, m.inv_consistency_vox});
  }
  if (rows.empty()) throw DataError("no metric reports found under " + in);
  std::sort(rows.begin(), rows.end(), [](const ReportRow& x, const ReportRow& y) {
    return std::tie(x.label, x.direction, x.case_id) < std::tie(y.label, y.direction, y.case_id);
  });

  std::ofstream os(csv, std::ios::binary);
  if (!os) throw DataError("cannot write " + csv);
  os << "label,case_id,direction,dsc,assd_mm,folding_pct,inv_consistency_vox\n";
  std::map<std::pair<std::string, std::string>, std::vector<const ReportRow*>> groups;
  for (const auto& r : rows) {
    os << r.label << ',' << r.case_id << ',' << r.direction << ',' << fmt(r.dsc) << ',' << fmt(r.assd_mm) << ','
       << fmt(r.folding_pct) << ',' << (r.inv_consistency ? fmt(*r.inv_consistency) : "") << '\n';
    groups[{r.label, r.direction}].push_back(&r);
  }
  for (const auto& [key, members] : groups) {
    std::vector<double> dsc, assd, fold, inv;
    for (const ReportRow* r : members) {
      dsc.push_back(r->dsc);
      assd.push_back(r->assd_mm);
      fold.push_back(r->folding_pct);
      if (r->inv_consistency) inv.push_back(*r->inv_consistency);
    }
    os << key.first << ",median," << key.second << ',' << fmt(median(dsc)) << ',' << fmt(median(assd)) << ','
       << fmt(median(fold)) << ',' << (inv.empty() ? "" : fmt(median(inv))) << '\n';
    os << key.first << ",mean," << key.second << ',' << fmt(mean(dsc)) << ',' << fmt(mean(assd)) << ','
       << fmt(mean(fold)) << ',' << (inv.empty() ? "" : fmt(mean(inv))) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Command-line wiring
// ---------------------------------------------------------------------------

void add_config_options(CLI::App* cmd, AdaptConfig& c) {
  cmd->add_option("--lr", c.learning_rate, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lambda", c.lambda, "Bending energy weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--integration-steps", c.integration_steps, "Scaling-and-squaring steps")
      ->capture_default_str()
      ->check(CLI::Range(0, 30));
  cmd->add_option("--dropout", c.dropout_rate, "Dropout rate")->capture_default_str()->check(CLI::Range(0.0, 0.99));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"svfreg: diffeomorphic SVF registration with uncertainty-aware test-time adaptation"};
  app.set_version_flag("--version", std::string("svfreg ") + SVFREG_VERSION);
  app.require_subcommand(1);
  CommonFlags flags;

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Generate synthetic inhale/exhale phantom pairs");
  phantom->add_option("--count", ph.count, "Number of cases")->capture_default_str()->check(CLI::PositiveNumber);
  phantom->add_option("--dims", ph.dims, "Cube edge length in voxels")->capture_default_str()->check(CLI::Range(24, 512));
  phantom->add_option("--scale", ph.scale, "Radial scale (first case)")->capture_default_str()->check(CLI::Range(0.5, 1.0));
  phantom->add_option("--scale-max", ph.scale_max, "Radial scale of the last case (linear sweep)")
      ->check(CLI::Range(0.5, 1.0));
  phantom->add_option("--random-amplitude", ph.random_amplitude, "Peak voxel norm of the random SVF")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  phantom->add_option("--smoothness", ph.smoothness, "Random SVF smoothness (voxels)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  phantom->add_option("--seed", ph.seed, "Seed")->capture_default_str();
  phantom->add_option("--out", ph.out, "Output directory")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Pretrain the predictor on a phantom directory");
  train->add_option("--data", tr.data, "Directory of case_* folders")->required();
  train->add_option("--epochs", tr.epochs, "Epochs")->capture_default_str()->check(CLI::NonNegativeNumber);
  train->add_option("--seed", tr.seed, "Seed")->capture_default_str();
  train->add_option("--out", tr.out, "Checkpoint path")->required();
  add_config_options(train, tr.config);

  PairArgs reg_args;
  int reg_steps = kDefaultIntegrationSteps;
  auto* reg = app.add_subcommand("register", "Deterministic registration of one pair");
  reg->add_option("--ckpt", reg_args.ckpt, "Checkpoint")->required();
  reg->add_option("--fixed", reg_args.fixed, "Fixed image")->required();
  reg->add_option("--moving", reg_args.moving, "Moving image")->required();
  reg->add_option("--direction", reg_args.direction, "fwd or inv")->capture_default_str();
  reg->add_option("--integration-steps", reg_steps, "Scaling-and-squaring steps")
      ->capture_default_str()
      ->check(CLI::Range(0, 30));
  reg->add_option("--out", reg_args.out, "Output directory")->required();

  PairArgs ad_args;
  AdaptConfig ad_cfg;
  auto* ad = app.add_subcommand("adapt", "Uncertainty-aware test-time adaptation on one pair");
  ad->add_option("--ckpt", ad_args.ckpt, "Checkpoint")->required();
  ad->add_option("--fixed", ad_args.fixed, "Fixed image")->required();
  ad->add_option("--moving", ad_args.moving, "Moving image")->required();
  ad->add_option("--direction", ad_args.direction, "fwd or inv")->capture_default_str();
  ad->add_option("--steps", ad_cfg.adapt_steps, "Adaptation steps")->capture_default_str()->check(CLI::NonNegativeNumber);
  ad->add_option("--mc-samples", ad_cfg.mc_samples, "MC dropout passes")->capture_default_str()->check(CLI::Range(2, 100000));
  ad->add_option("--refresh-uncertainty", ad_cfg.refresh_uncertainty, "Recompute the weight map every R steps (0 = never)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  ad->add_option("--eps", ad_cfg.eps, "Variance floor of the weight map")->capture_default_str()->check(CLI::PositiveNumber);
  ad->add_option("--seed", ad_cfg.seed, "Seed")->capture_default_str();
  ad->add_option("--out", ad_args.out, "Output directory")->required();
  add_config_options(ad, ad_cfg);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Overlap, surface distance and folding metrics");
  eval_cmd->add_option("--fixed-mask", ev.fixed_mask, "Reference mask")->required();
  eval_cmd->add_option("--warped-mask", ev.warped_mask, "Already warped source mask");
  eval_cmd->add_option("--moving-mask", ev.moving_mask, "Source mask to warp with --disp");
  eval_cmd->add_option("--disp", ev.disp, "Displacement field (identity if omitted)");
  eval_cmd->add_option("--inverse-disp", ev.inverse_disp, "Opposite-direction displacement for inverse consistency");
  eval_cmd->add_option("--direction", ev.direction, "fwd or inv")->capture_default_str();
  eval_cmd->add_option("--case-id", ev.case_id, "Case identifier");
  eval_cmd->add_option("--label", ev.label, "Free-form group label (e.g. steps)");
  eval_cmd->add_option("--out", ev.out, "Report path")->required();

  std::string rep_in, rep_csv;
  auto* rep = app.add_subcommand("report", "Aggregate metric reports into CSV");
  rep->add_option("--in", rep_in, "Directory searched recursively for reports")->required();
  rep->add_option("--csv", rep_csv, "CSV path")->required();

  for (auto* cmd : {phantom, train, reg, ad, eval_cmd, rep}) cmd->add_flag("--force", flags.force, "Overwrite outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*phantom) return run_phantom(ph, flags);
    if (*train) return run_train(tr, flags);
    if (*reg) return run_register(reg_args, reg_steps, flags);
    if (*ad) return run_adapt(ad_args, ad_cfg, flags);
    if (*eval_cmd) return run_eval(ev, flags);
    if (*rep) return run_report(rep_in, rep_csv, flags);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
