// esoseg: phantom generation, prior fitting, training, segmentation and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

#include "esoseg/checkpoint.hpp"
#include "esoseg/pipeline.hpp"
#include "esoseg/rw.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace esoseg;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.set, "Override a configuration key, e.g. --set train.epochs=3")->take_all();
}

pipeline::PipelineConfig effective_config(const Common& c) {
  pipeline::PipelineConfig cfg = c.config.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(c.config);
  pipeline::apply_overrides(cfg, c.set);
  return cfg;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  Common common;
  int n = 1;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_phantom_gen(const PhantomArgs& a) {
  auto cfg = effective_config(a.common);
  const std::uint64_t seed = a.seed.value_or(cfg.phantom.seed);
  cfg.phantom.seed = seed;
  make_dir(a.out);
  const auto manifest = phantom::generate_dataset(cfg.phantom, a.n, seed, a.out);
  pipeline::write_config(cfg, fs::path(a.out) / "phantom-gen.config.ini");
  std::cout << "wrote " << a.n << " phantoms, manifest " << manifest.string() << '\n';
  return 0;
}

struct PriorArgs {
  Common common;
  std::string manifest;
  std::string out;
};

int run_fit_priors(const PriorArgs& a) {
  const auto cfg = effective_config(a.common);
  const auto cases = pipeline::load_cases(a.manifest);
  const auto model = pipeline::fit_priors(cases, cfg);
  const fs::path out(a.out);
  if (out.has_parent_path()) make_dir(out.parent_path());
  priors::write_prior_model(model, out);
  pipeline::write_config(cfg, out.parent_path() / (out.stem().string() + ".config.ini"));
  std::cout << "fitted priors on " << cases.size() << " cases: mu_delta " << model.stats.mu_delta << ", sigma_delta "
            << model.stats.sigma_delta << ", mean_eso_hu " << model.stats.mean_eso_hu << '\n';
  return 0;
}

struct TrainArgs {
  Common common;
  std::string manifest;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& a) {
  const auto cfg = effective_config(a.common);
  make_dir(a.out);
  const fs::path out(a.out);
  pipeline::write_config(cfg, out / "train.config.ini");

  const auto cases = pipeline::load_cases(a.manifest);
  std::vector<priors::LabeledVolume> lv;
  for (const auto& c : cases) lv.push_back({&c.ct, &c.mask});
  const double mean_eso_hu = priors::fit_gradient_stats(lv).mean_eso_hu;
  const auto data = pipeline::make_training_set(cases, mean_eso_hu, cfg.hu_cutoff);

  fcnn::TrainingState start;
  if (!a.resume.empty()) {
    auto ck = fcnn::load_checkpoint(a.resume);
    if (!(ck.state.params.arch == cfg.network))
      throw DataError("checkpoint architecture does not match the configured network");
    if (ck.seed != cfg.train.seed) throw DataError("checkpoint seed does not match train.seed");
    if (!ck.has_optimizer_state) throw DataError("checkpoint has no optimizer state to resume from");
    start = std::move(ck.state);
    std::cout << "resuming after epoch " << start.epochs_done << '\n';
  } else {
    start = fcnn::initial_state(cfg.network, cfg.train.seed);
  }

  const fs::path ckpt = out / "checkpoint.bin";
  std::ofstream log(out / "loss.csv", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot open loss log in " + out.string());
  if (a.resume.empty()) log << "epoch,subepoch,loss\n";
  log << std::setprecision(9);
  const auto t0 = std::chrono::steady_clock::now();
  fcnn::train(data, cfg.train, std::move(start), [&](const fcnn::TrainingState& s, std::span<const double> losses) {
    for (std::size_t i = 0; i < losses.size(); ++i) log << s.epochs_done << ',' << i + 1 << ',' << losses[i] << '\n';
    log.flush();
    fcnn::save_checkpoint(ckpt, s, cfg.train.seed);
    double mean = 0.0;
    for (double l : losses) mean += l / static_cast<double>(losses.size());
    std::cout << "epoch " << s.epochs_done << "/" << cfg.train.epochs << " mean loss " << mean << " lr "
              << fcnn::learning_rate(cfg.train, s.epochs_done) << " (" << std::fixed << std::setprecision(1)
              << seconds_since(t0) << " s)" << std::defaultfloat << std::setprecision(6) << '\n';
  });
  if (!fs::exists(ckpt)) fcnn::save_checkpoint(ckpt, fcnn::initial_state(cfg.network, cfg.train.seed), cfg.train.seed);
  std::cout << "checkpoint " << ckpt.string() << '\n';
  return 0;
}

struct SegmentArgs {
  Common common;
  std::string ct;
  std::string manifest;
  std::string checkpoint;
  std::string priors;
  std::string out;
  bool intermediates = false;
  bool baseline = false;
};

int run_segment(const SegmentArgs& a) {
  const auto cfg = effective_config(a.common);
  const auto ck = fcnn::load_checkpoint(a.checkpoint);
  const auto model = priors::read_prior_model(a.priors);
  const fs::path out(a.out);
  make_dir(out);
  pipeline::write_config(cfg, out / "segment.config.ini");

  std::vector<phantom::ManifestEntry> inputs;
  if (!a.ct.empty()) inputs.push_back({a.ct, {}});
  else inputs = phantom::read_manifest(a.manifest);
  if (inputs.empty()) throw DataError("nothing to segment");

  std::vector<phantom::ManifestEntry> predicted, baseline;
  for (const auto& in : inputs) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string id = in.ct.stem().string();
    if (id.size() > 3 && id.ends_with("_ct")) id.resize(id.size() - 3);
    const fs::path dir = inputs.size() == 1 && !a.ct.empty() ? out : out / id;
    make_dir(dir);
    const auto s = pipeline::segment(read_volume(in.ct), ck.state.params, model, cfg);
    write_volume(s.mask, dir / "mask.mhd");
    predicted.push_back({fs::absolute(in.ct), fs::absolute(dir / "mask.mhd")});
    if (a.intermediates) pipeline::write_intermediates(s, dir);
    if (a.baseline) {
      write_volume(rw::extract_label(s.cnn, 0.5), dir / "cnn_mask.mhd");
      baseline.push_back({fs::absolute(in.ct), fs::absolute(dir / "cnn_mask.mhd")});
    }
    std::cout << id << ": " << static_cast<long>(s.mask.data.sum()) << " voxels, rw " << s.rw_report.iterations
              << " CG iterations, " << std::fixed << std::setprecision(1) << seconds_since(t0) << " s"
              << std::defaultfloat << std::setprecision(6) << '\n';
  }
  if (!a.manifest.empty()) {
    phantom::write_manifest(predicted, out / "predictions.txt");
    if (a.baseline) phantom::write_manifest(baseline, out / "cnn_predictions.txt");
  }
  return 0;
}

struct EvalArgs {
  std::string pred;
  std::string ref;
  std::string compare;
  std::vector<long> crop;
  std::string out;
};

int run_evaluate(const EvalArgs& a) {
  std::optional<std::pair<long, long>> crop;
  if (!a.crop.empty()) crop = std::make_pair(a.crop[0], a.crop[1]);
  const fs::path out(a.out);
  make_dir(out);
  const auto report = pipeline::evaluate(a.pred, a.ref, crop);
  metrics::write_report(report, out / "report.csv");
  std::cout << metrics::format_report(report);
  if (!a.compare.empty()) {
    const auto other = pipeline::evaluate(a.compare, a.ref, crop);
    metrics::write_report(other, out / "compare_report.csv");
    const std::string table = pipeline::format_comparison(pipeline::compare(report, other));
    std::ofstream(out / "wilcoxon.csv") << table;
    std::cout << "\nWilcoxon signed-rank, predictions vs comparison\n" << table;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Esophagus segmentation: dual-path CNN, active-contour centerline and prior random walker"};
  app.require_subcommand(1);

  PhantomArgs pg;
  auto* cmd_pg = app.add_subcommand("phantom-gen", "Generate synthetic CT phantoms with reference masks");
  add_common(cmd_pg, pg.common);
  cmd_pg->add_option("--n", pg.n, "Number of phantoms")->check(CLI::PositiveNumber);
  cmd_pg->add_option("--seed", pg.seed, "Seed of the first phantom (default phantom.seed)");
  cmd_pg->add_option("--out", pg.out, "Output directory")->required();

  PriorArgs fp;
  auto* cmd_fp = app.add_subcommand("fit-priors", "Fit the intensity mixture and gradient statistics");
  add_common(cmd_fp, fp.common);
  cmd_fp->add_option("--manifest", fp.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  cmd_fp->add_option("--out", fp.out, "Prior model file")->required();

  TrainArgs tr;
  auto* cmd_tr = app.add_subcommand("train", "Train the network; writes checkpoint.bin and loss.csv");
  add_common(cmd_tr, tr.common);
  cmd_tr->add_option("--manifest", tr.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  cmd_tr->add_option("--out", tr.out, "Output directory")->required();
  cmd_tr->add_option("--resume", tr.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  SegmentArgs sg;
  auto* cmd_sg = app.add_subcommand("segment", "Run the full segmentation pipeline");
  add_common(cmd_sg, sg.common);
  auto* ct_opt = cmd_sg->add_option("--ct", sg.ct, "CT volume (.mhd)")->check(CLI::ExistingFile);
  auto* mf_opt = cmd_sg->add_option("--manifest", sg.manifest, "Manifest of CT volumes")->check(CLI::ExistingFile);
  ct_opt->excludes(mf_opt);
  cmd_sg->add_option("--checkpoint", sg.checkpoint, "Network checkpoint")->required()->check(CLI::ExistingFile);
  cmd_sg->add_option("--priors", sg.priors, "Prior model file")->required()->check(CLI::ExistingFile);
  cmd_sg->add_option("--out", sg.out, "Output directory")->required();
  cmd_sg->add_flag("--save-intermediates", sg.intermediates, "Also write the CNN, ACM, CT prior and RW maps");
  cmd_sg->add_flag("--baseline", sg.baseline, "Also write the 0.5-thresholded CNN mask");

  EvalArgs ev;
  auto* cmd_ev = app.add_subcommand("evaluate", "Score predicted masks against references");
  cmd_ev->add_option("--pred", ev.pred, "Prediction manifest")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--ref", ev.ref, "Reference manifest")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--compare", ev.compare, "Second prediction manifest for a paired Wilcoxon test")
      ->check(CLI::ExistingFile);
  cmd_ev->add_option("--crop", ev.crop, "Evaluate only slices z0..z1")->expected(2);
  cmd_ev->add_option("--out", ev.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
    if (*cmd_sg && sg.ct.empty() && sg.manifest.empty()) throw CLI::RequiredError("--ct or --manifest");
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*cmd_pg) return run_phantom_gen(pg);
    if (*cmd_fp) return run_fit_priors(fp);
    if (*cmd_tr) return run_train(tr);
    if (*cmd_sg) return run_segment(sg);
    if (*cmd_ev) return run_evaluate(ev);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
