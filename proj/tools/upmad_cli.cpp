#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <regex>

#include "upmad/gradcheck_suite.hpp"
#include "upmad/parallel.hpp"
#include "upmad/phantom.hpp"
#include "upmad/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace upmad;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 0;
  bool deterministic = false;
  std::string manifest;
  std::string log_level = "info";
};

struct Run {
  std::string command;
  json config = json::object();
  std::vector<std::string> outputs;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// case_<k>_img.sg3d (and the matching _lbl file when present), ordered by k.
struct CaseFiles {
  std::size_t index;
  fs::path image;
  std::optional<fs::path> labels;
};

std::vector<CaseFiles> scan_cases(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  static const std::regex pat(R"(case_(\d+)_img\.sg3d)");
  std::vector<CaseFiles> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (!std::regex_match(name, m, pat)) continue;
    CaseFiles c{std::stoul(m[1]), e.path(), std::nullopt};
    const fs::path lbl = dir / ("case_" + m[1].str() + "_lbl.sg3d");
    if (fs::exists(lbl)) c.labels = lbl;
    out.push_back(c);
  }
  std::sort(out.begin(), out.end(), [](const CaseFiles& a, const CaseFiles& b) { return a.index < b.index; });
  if (out.empty()) throw IoError("no case_<k>_img.sg3d files in " + dir.string());
  return out;
}

json to_json(const NetworkConfig& c) {
  return {{"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"stage_widths", c.stage_widths},
          {"gn_groups", c.gn_groups},
          {"dropout_rate", c.dropout_rate},
          {"msff_dilation", c.msff_dilation},
          {"msff_kernel", c.msff_kernel},
          {"ca_reduction", c.ca_reduction},
          {"aam_mode", c.aam_mode == AamMode::Channel ? "channel" : "spatial"},
          {"spatial_attention_voxel_cap", c.spatial_attention_voxel_cap},
          {"use_msff", c.use_msff},
          {"use_aam", c.use_aam},
          {"aam_after_merge", c.aam_after_merge},
          {"gn_eps", c.gn_eps}};
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig c;
  c.in_channels = j.at("in_channels");
  c.out_channels = j.at("out_channels");
  c.stage_widths = j.at("stage_widths");
  c.gn_groups = j.at("gn_groups");
  c.dropout_rate = j.at("dropout_rate");
  c.msff_dilation = j.at("msff_dilation");
  c.msff_kernel = j.at("msff_kernel");
  c.ca_reduction = j.at("ca_reduction");
  c.aam_mode = j.at("aam_mode") == "spatial" ? AamMode::Spatial : AamMode::Channel;
  c.spatial_attention_voxel_cap = j.at("spatial_attention_voxel_cap");
  c.use_msff = j.at("use_msff");
  c.use_aam = j.at("use_aam");
  c.aam_after_merge = j.at("aam_after_merge");
  c.gn_eps = j.at("gn_eps");
  return c;
}

json to_json(const PriorConfig& p) {
  return {{"histogram_bins", p.histogram_bins},
          {"component_connectivity", p.component_connectivity},
          {"growth_connectivity", p.growth_connectivity},
          {"n_seeds", p.n_seeds},
          {"delta", p.delta ? json(*p.delta) : json(nullptr)},
          {"rng_seed", p.rng_seed}};
}

PriorConfig prior_from_json(const json& j) {
  PriorConfig p;
  p.histogram_bins = j.at("histogram_bins");
  p.component_connectivity = j.at("component_connectivity");
  p.growth_connectivity = j.at("growth_connectivity");
  p.n_seeds = j.at("n_seeds");
  if (!j.at("delta").is_null()) p.delta = j.at("delta").get<double>();
  p.rng_seed = j.at("rng_seed");
  return p;
}

json to_json(const Ablation& a) {
  return {{"use_prior", a.use_prior}, {"use_msff", a.use_msff}, {"use_aam", a.use_aam}, {"use_mc", a.use_mc}};
}

json to_json(const TrainConfig& t) {
  return {{"lr_init", t.lr_init},         {"weight_decay", t.weight_decay}, {"cosine_T", t.cosine_T},
          {"lr_min", t.lr_min},           {"cosine_restarts", t.cosine_restarts},
          {"max_epochs", t.max_epochs},   {"patience", t.patience},         {"batch_size", t.batch_size},
          {"seed", t.seed},               {"ablation", to_json(t.ablation)}, {"prior", to_json(t.prior)},
          {"mc_passes", t.mc_passes}};
}

void add_prior_flags(CLI::App* cmd, PriorConfig& p, std::optional<double>& delta) {
  cmd->add_option("--bins", p.histogram_bins, "Otsu histogram bins")->capture_default_str();
  cmd->add_option("--component-connectivity", p.component_connectivity)->check(CLI::IsMember({6, 26}))->capture_default_str();
  cmd->add_option("--growth-connectivity", p.growth_connectivity)->check(CLI::IsMember({6, 26}))->capture_default_str();
  cmd->add_option("--n-seeds", p.n_seeds)->capture_default_str();
  cmd->add_option("--delta", delta, "region-growing tolerance (default: training statistics, else 35)");
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::size_t cases = 10;
  std::vector<std::size_t> dims{32, 32, 16};
  double noise = -1;
  std::string out;
};

void cmd_phantom(const PhantomArgs& a, const Globals& g, Run& run) {
  PhantomSpec spec;
  spec.n_cases = a.cases;
  spec.rng_seed = g.seed;
  spec.dims = {a.dims[0], a.dims[1], a.dims[2]};
  if (a.noise >= 0) spec.noise_sigma = a.noise;
  spec.validate();
  fs::create_directories(a.out);
  for (std::size_t k = 0; k < spec.n_cases; ++k) {
    const fs::path img = fs::path(a.out) / ("case_" + std::to_string(k) + "_img.sg3d");
    const fs::path lbl = fs::path(a.out) / ("case_" + std::to_string(k) + "_lbl.sg3d");
    save_case(gen_phantom(spec, k), img, lbl);
    run.outputs.push_back(img.string());
    run.outputs.push_back(lbl.string());
  }
  run.config = {{"cases", spec.n_cases},
                {"dims", {spec.dims.d, spec.dims.h, spec.dims.w}},
                {"rng_seed", spec.rng_seed},
                {"noise_sigma", spec.noise_sigma}};
  spdlog::info("wrote {} phantom cases to {}", spec.n_cases, a.out);
}

struct PriorArgs {
  std::string image, out;
  PriorConfig prior;
  std::optional<double> delta;
};

void cmd_prior(PriorArgs a, const Globals& g, Run& run) {
  a.prior.rng_seed = g.seed;
  a.prior.delta = a.delta;
  a.prior.validate();
  const MultiModalVolume v = load_case(a.image, std::nullopt);
  const PriorResult r = generate_prior(v.flair(), a.prior);
  if (!r.diagnostic.empty()) spdlog::warn("prior degraded to empty: {}", r.diagnostic);
  std::vector<Mask> ch{r.mask};
  write_volume(a.out, Volume::from_grids(ch));
  run.outputs.push_back(a.out);
  run.config = {{"image", a.image}, {"prior", to_json(a.prior)}, {"resolved_delta", a.prior.resolved_delta()}};
  run.config["result"] = {{"threshold", r.threshold ? json(*r.threshold) : json(nullptr)},
                          {"component_size", r.component_size},
                          {"voxels", count_nonzero(r.mask)},
                          {"diagnostic", r.diagnostic}};
}

struct TrainArgs {
  std::string data, out;
  TrainConfig train;
  NetworkConfig net;
  std::optional<double> delta;
  std::vector<double> split{8, 1, 1};
  bool no_prior = false, no_msff = false, no_aam = false, no_mc = false;
  bool train_as_val = false;
  std::string aam_mode = "channel";
  std::vector<std::size_t> widths{8, 16, 32, 64};
};

void cmd_train(TrainArgs a, const Globals& g, Run& run) {
  a.train.seed = g.seed;
  a.train.prior.rng_seed = g.seed;
  a.train.prior.delta = a.delta;
  a.train.ablation = {!a.no_prior, !a.no_msff, !a.no_aam, !a.no_mc};
  std::copy(a.widths.begin(), a.widths.end(), a.net.stage_widths.begin());
  a.net.aam_mode = a.aam_mode == "spatial" ? AamMode::Spatial : AamMode::Channel;
  a.train.validate();
  const NetworkConfig nc = network_config_for(a.train.ablation, a.net);
  nc.validate();

  const auto files = scan_cases(a.data);
  std::vector<MultiModalVolume> cases;
  std::vector<std::size_t> ids;
  for (const auto& f : files) {
    if (!f.labels) throw IoError("training case " + f.image.string() + " has no label file");
    cases.push_back(load_case(f.image, f.labels));
    ids.push_back(cases.size() - 1);
  }
  DatasetSplit split;
  if (a.train_as_val) {
    split.train = split.val = ids;
  } else {
    split = split_dataset(ids, {a.split[0], a.split[1], a.split[2]}, g.seed);
  }
  std::vector<MultiModalVolume> tr, va;
  for (auto i : split.train) tr.push_back(cases[i]);
  for (auto i : split.val) va.push_back(cases[i]);

  fs::create_directories(a.out);
  Network<float> net(nc, derive_seed(g.seed, {0x6e6574}));
  const FitResult r = fit(net, tr, va, a.train, [](const EpochRecord& e) {
    spdlog::info("epoch {} lr {:.3e} train {:.5f} val {:.5f}", e.epoch, e.lr, e.train_loss, e.val_loss);
  });
  const fs::path out(a.out);
  write_checkpoint(out / "checkpoint.sg3p", r.best);
  write_history(out / "history.csv", r.history);
  std::string arch;
  for (const auto& l : pipeline_manifest(a.train.ablation, a.net, a.train.mc_passes)) arch += l + "\n";
  write_text(out / "network.txt", arch);

  auto case_names = [&](const std::vector<std::size_t>& v) {
    json j = json::array();
    for (auto i : v) j.push_back(files[i].image.filename().string());
    return j;
  };
  json model = {{"network", to_json(nc)},
                {"ablation", to_json(a.train.ablation)},
                {"prior", to_json(r.prior)},
                {"mc_passes", a.train.mc_passes}};
  write_text(out / "model.json", model.dump(2) + "\n");
  for (const char* f : {"checkpoint.sg3p", "history.csv", "network.txt", "model.json"}) run.outputs.push_back((out / f).string());

  const CostReport cost = count_params_flops(nc, cases.front().dims());
  run.config = {{"data", a.data},
                {"train", to_json(a.train)},
                {"network", to_json(nc)},
                {"resolved_prior", to_json(r.prior)},
                {"split", {{"train", case_names(split.train)}, {"val", case_names(split.val)}, {"test", case_names(split.test)}}}};
  run.config["result"] = {{"epochs_run", r.history.size()},
                          {"best_epoch", r.best_epoch},
                          {"best_val_loss", r.best_val_loss},
                          {"stopped_early", r.reason == StopReason::EarlyStop},
                          {"params", cost.params},
                          {"flops", cost.flops}};
}

struct InferArgs {
  std::string model, image, out;
  std::optional<std::size_t> passes;
  std::size_t slice_axis = 0;
  std::optional<std::size_t> slice;
};

void cmd_infer(const InferArgs& a, const Globals& g, Run& run) {
  const fs::path mdir(a.model);
  const json model = read_json(mdir / "model.json");
  const NetworkConfig nc = network_from_json(model.at("network"));
  const bool use_prior = model.at("ablation").at("use_prior");
  const bool use_mc = model.at("ablation").at("use_mc");
  const PriorConfig prior = prior_from_json(model.at("prior"));
  const std::size_t passes = a.passes.value_or(model.at("mc_passes").get<std::size_t>());

  Network<float> net(nc, 0);
  restore(net, read_checkpoint(mdir / "checkpoint.sg3p"));
  const MultiModalVolume v = load_case(a.image, std::nullopt);
  Tensor<float> input;
  json prior_info = nullptr;
  if (use_prior) {
    const PriorResult pr = generate_prior(v.flair(), prior);
    if (!pr.diagnostic.empty()) spdlog::warn("prior degraded to empty: {}", pr.diagnostic);
    input = build_input(v, pr.mask);
    prior_info = {{"voxels", count_nonzero(pr.mask)}, {"diagnostic", pr.diagnostic}};
  } else {
    input = build_input(v, nullptr);
  }
  const McResult mc = mc_infer(net, input, passes, g.seed, use_mc);

  const fs::path out(a.out);
  fs::create_directories(out);
  auto emit = [&](const std::string& name, const Volume& vol) {
    write_volume(out / name, vol);
    run.outputs.push_back((out / name).string());
  };
  emit("mean.sg3d", Volume::from_grids(std::span<const Grid<float>>(mc.mean)));
  emit("variance.sg3d", Volume::from_grids(std::span<const Grid<float>>(mc.variance)));
  std::vector<Mask> masks{mc.masks.et, mc.masks.wt, mc.masks.tc};
  emit("masks.sg3d", Volume::from_grids(masks));

  const auto axis = static_cast<SliceAxis>(a.slice_axis);
  const std::size_t extent = a.slice_axis == 0 ? mc.dims.d : a.slice_axis == 1 ? mc.dims.h : mc.dims.w;
  const std::size_t idx = a.slice.value_or(extent / 2);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::string r = kRegionNames[c];
    export_slice_pgm(mc.mean[c], axis, idx, 0.0, 1.0, out / ("mean_" + r + ".pgm"));
    export_slice_pgm(mc.variance[c], axis, idx, 0.0, 0.25, out / ("variance_" + r + ".pgm"));
    run.outputs.push_back((out / ("mean_" + r + ".pgm")).string());
    run.outputs.push_back((out / ("variance_" + r + ".pgm")).string());
  }
  run.config = {{"model", a.model},
                {"image", a.image},
                {"n_passes", mc.n_passes},
                {"use_mc", use_mc},
                {"use_prior", use_prior},
                {"slice_axis", a.slice_axis},
                {"slice", idx},
                {"prior", prior_info}};
}

RegionMasks load_prediction(const fs::path& path) {
  const Volume v = read_volume(path);
  if (v.header.dtype != DType::UInt8) throw FormatError(path.string() + ": prediction must be uint8");
  if (v.header.channels == 3) return {v.u8_channel(0), v.u8_channel(1), v.u8_channel(2)};
  if (v.header.channels == 1) return compose_regions(v.u8_channel(0));
  throw FormatError(path.string() + ": expected 1 label channel or 3 region channels (et, wt, tc)");
}

struct EvalArgs {
  std::string pred, labels, out;
  std::vector<double> spacing{1, 1, 1};
};

void cmd_eval(const EvalArgs& a, const Globals&, Run& run) {
  const RegionMasks pred = load_prediction(a.pred);
  const Volume lv = read_volume(a.labels);
  const Grid<std::uint8_t> labels = lv.u8_channel(0);
  for (const Mask* m : {&pred.et, &pred.wt, &pred.tc})
    if (!(m->dims == labels.dims)) throw ShapeError("prediction " + m->dims.str() + " vs labels " + labels.dims.str());
  const MetricReport rep = evaluate_masks(pred, compose_regions(labels), {a.spacing[0], a.spacing[1], a.spacing[2]});
  const std::string text = rep.serialize();
  fs::create_directories(fs::absolute(a.out).parent_path());
  write_text(a.out, text);
  std::cout << text;
  run.outputs.push_back(a.out);
  run.config = {{"pred", a.pred}, {"labels", a.labels}, {"spacing", a.spacing}};
}

struct GradcheckArgs {
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a, const Globals& g, Run& run) {
  const auto entries = run_gradcheck_suite(g.seed);
  std::string text;
  char buf[256];
  bool ok = true;
  json rows = json::array();
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-32s %-4s max_rel %.3e smooth %.3e kinks %zu/%zu tol %.0e %.2fs\n", e.name.c_str(),
                  e.passed() ? "PASS" : "FAIL", e.max_rel_error, e.max_rel_error_smooth, e.kink_coords,
                  e.coords_checked, e.tolerance, e.seconds);
    text += buf;
    ok &= e.passed();
    rows.push_back({{"name", e.name}, {"passed", e.passed()}, {"max_rel_error", e.max_rel_error},
                    {"max_rel_error_smooth", e.max_rel_error_smooth}, {"kink_coords", e.kink_coords},
                    {"coords_checked", e.coords_checked}});
  }
  std::cout << text;
  if (!a.out.empty()) {
    fs::create_directories(fs::absolute(a.out).parent_path());
    write_text(a.out, text);
    run.outputs.push_back(a.out);
  }
  run.config = {{"h", 1e-5}, {"entries", rows}, {"all_passed", ok}};
  return ok ? 0 : 2;
}

struct StatsArgs {
  std::string data, out;
};

void cmd_stats(const StatsArgs& a, const Globals&, Run& run) {
  std::vector<MultiModalVolume> cases;
  for (const auto& f : scan_cases(a.data)) {
    if (!f.labels) continue;
    cases.push_back(load_case(f.image, f.labels));
  }
  const TumorStdStats s = tumor_std_stats(cases);
  std::string text;
  char buf[128];
  for (std::size_t i = 0; i < s.per_case.size(); ++i) {
    std::snprintf(buf, sizeof buf, "case_std_%zu=%.9g\n", i, s.per_case[i]);
    text += buf;
  }
  std::snprintf(buf, sizeof buf, "min=%.9g\nmax=%.9g\nmedian=%.9g\nskipped=%zu\n", s.min, s.max, s.median, s.skipped);
  text += buf;
  std::cout << text;
  if (!a.out.empty()) {
    write_text(a.out, text);
    run.outputs.push_back(a.out);
  }
  run.config = {{"data", a.data}, {"cases", cases.size()}, {"median", s.median}, {"skipped", s.skipped}};
}

fs::path default_manifest(const std::string& command, const std::map<std::string, std::string>& outs) {
  const auto it = outs.find(command);
  if (it == outs.end() || it->second.empty()) return "manifest.json";
  const fs::path p(it->second);
  // directory outputs get the manifest inside, file outputs next to them
  if (command == "phantom" || command == "train" || command == "infer") return p / "manifest.json";
  return fs::path(p.string() + ".manifest.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"upmad: prior-guided multiscale attention segmentation on synthetic volumes"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  if (const char* env = std::getenv("SEED")) {
    try {
      g.seed = std::stoull(env);
    } catch (const std::exception&) {
      std::cerr << "SEED must be a non-negative integer, got '" << env << "'\n";
      return 1;
    }
  }
  app.add_option("--seed", g.seed, "master seed (default: $SEED, else 0)");
  app.add_option("--threads", g.threads, "worker cap, 0 = all cores")->capture_default_str();
  app.add_flag("--deterministic", g.deterministic, "fixed reduction order");
  app.add_option("--manifest", g.manifest, "run manifest path (default: next to the outputs)");
  app.add_option("--log-level", g.log_level)->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "generate a synthetic labelled dataset");
  phantom->add_option("--cases", pa.cases)->capture_default_str();
  phantom->add_option("--dims", pa.dims, "D H W")->expected(3)->capture_default_str();
  phantom->add_option("--noise", pa.noise, "noise sigma (default from spec)");
  phantom->add_option("--out", pa.out)->required();

  PriorArgs pr;
  auto* prior = app.add_subcommand("prior", "FLAIR of a case image -> prior mask");
  prior->add_option("--image", pr.image)->required()->check(CLI::ExistingFile);
  prior->add_option("--out", pr.out)->required();
  add_prior_flags(prior, pr.prior, pr.delta);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "fit a network on a phantom-layout dataset");
  train->add_option("--data", ta.data)->required();
  train->add_option("--out", ta.out)->required();
  train->add_option("--epochs", ta.train.max_epochs)->capture_default_str();
  train->add_option("--patience", ta.train.patience)->capture_default_str();
  train->add_option("--lr", ta.train.lr_init)->capture_default_str();
  train->add_option("--lr-min", ta.train.lr_min)->capture_default_str();
  train->add_option("--weight-decay", ta.train.weight_decay)->capture_default_str();
  train->add_option("--cosine-t", ta.train.cosine_T)->capture_default_str();
  train->add_flag("--cosine-restarts", ta.train.cosine_restarts);
  train->add_option("--mc-passes", ta.train.mc_passes)->capture_default_str();
  train->add_option("--split", ta.split, "train/val/test ratios")->expected(3)->capture_default_str();
  train->add_flag("--train-as-val", ta.train_as_val, "validate on the training cases (overfit runs)");
  train->add_option("--widths", ta.widths, "four stage widths")->expected(4)->capture_default_str();
  train->add_option("--gn-groups", ta.net.gn_groups)->capture_default_str();
  train->add_option("--dropout", ta.net.dropout_rate)->capture_default_str();
  train->add_option("--msff-kernel", ta.net.msff_kernel)->capture_default_str();
  train->add_option("--msff-dilation", ta.net.msff_dilation)->capture_default_str();
  train->add_option("--ca-reduction", ta.net.ca_reduction)->capture_default_str();
  train->add_option("--aam-mode", ta.aam_mode)->check(CLI::IsMember({"channel", "spatial"}))->capture_default_str();
  train->add_flag("--no-prior", ta.no_prior);
  train->add_flag("--no-msff", ta.no_msff);
  train->add_flag("--no-aam", ta.no_aam);
  train->add_flag("--no-mc", ta.no_mc);
  add_prior_flags(train, ta.train.prior, ta.delta);

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "checkpoint + case -> mean/variance volumes, masks, slices");
  infer->add_option("--model", ia.model, "directory written by train")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--image", ia.image)->required()->check(CLI::ExistingFile);
  infer->add_option("--out", ia.out)->required();
  infer->add_option("--passes", ia.passes, "MC passes (default from the model)");
  infer->add_option("--slice-axis", ia.slice_axis, "0 axial, 1 coronal, 2 sagittal")->check(CLI::Range(0, 2));
  infer->add_option("--slice", ia.slice, "slice index (default: middle)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "prediction + labels -> metric report");
  eval->add_option("--pred", ea.pred, "label map or 3-channel et/wt/tc masks")->required()->check(CLI::ExistingFile);
  eval->add_option("--labels", ea.labels)->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ea.out)->required();
  eval->add_option("--spacing", ea.spacing, "z y x voxel size")->expected(3);

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");
  gradcheck->add_option("--out", ga.out, "report file");

  StatsArgs sa;
  auto* stats = app.add_subcommand("stats", "per-case tumour FLAIR standard deviation");
  stats->add_option("--data", sa.data)->required();
  stats->add_option("--out", sa.out, "report file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  spdlog::set_level(spdlog::level::from_str(g.log_level));
  spdlog::set_pattern("[%l] %v");
  set_num_threads(g.threads);
  set_deterministic(g.deterministic);

  Run run;
  run.command = app.get_subcommands().front()->get_name();
  const std::map<std::string, std::string> outs{{"phantom", pa.out}, {"prior", pr.out}, {"train", ta.out},
                                                {"infer", ia.out},   {"eval", ea.out},   {"gradcheck", ga.out},
                                                {"stats", sa.out}};
  const fs::path manifest_path = g.manifest.empty() ? default_manifest(run.command, outs) : fs::path(g.manifest);

  int code = 0;
  std::string error;
  try {
    if (*phantom) cmd_phantom(pa, g, run);
    else if (*prior) cmd_prior(pr, g, run);
    else if (*train) cmd_train(ta, g, run);
    else if (*infer) cmd_infer(ia, g, run);
    else if (*eval) cmd_eval(ea, g, run);
    else if (*gradcheck) code = cmd_gradcheck(ga, g, run);
    else if (*stats) cmd_stats(sa, g, run);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    error = e.what();
    code = 2;
  }

  json manifest = {{"command", run.command},
                   {"seed", g.seed},
                   {"threads", g.threads},
                   {"deterministic", g.deterministic},
                   {"config", run.config},
                   {"outputs", run.outputs},
                   {"exit_code", code}};
  if (!error.empty()) manifest["error"] = error;
  try {
    if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());
    write_text(manifest_path, manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    spdlog::error("manifest: {}", e.what());
    return 2;
  }
  return code;
}
