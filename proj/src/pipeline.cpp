#include "esoseg/pipeline.hpp"

#include "esoseg/postproc.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace esoseg::pipeline {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

void PipelineConfig::validate() const {
  phantom.validate();
  network.validate();
  train.validate(network);
  acm.validate();
  rw.validate();
  if (gmm.components < 1) throw DataError("gmm.components must be at least 1");
  if (!(gmm.tol > 0.0) || gmm.max_iters < 1 || !(gmm.variance_floor > 0.0)) throw DataError("invalid gmm settings");
  if (!(acm_falloff_mm > 0.0)) throw DataError("acm.falloff_mm must be positive");
  if (closing_radius < 0) throw DataError("segment.closing_radius must be non-negative");
}

// ---------------------------------------------------------------------------
// Key registry shared by the loader, the override parser and the formatter.

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> tokens(const std::string& s) {
  std::string t = s;
  for (char& c : t)
    if (c == ',') c = ' ';
  std::istringstream in(t);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

template <typename T>
T parse_number(const std::string& text) {
  const std::string s = trim(text);
  T v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) throw DataError("not a valid number: '" + s + "'");
  return v;
}

void parse_value(const std::string& s, int& v) { v = parse_number<int>(s); }
void parse_value(const std::string& s, double& v) { v = parse_number<double>(s); }
void parse_value(const std::string& s, std::uint64_t& v) { v = parse_number<std::uint64_t>(s); }
void parse_value(const std::string& s, bool& v) {
  const std::string t = trim(s);
  if (t == "1" || t == "true" || t == "yes" || t == "on") v = true;
  else if (t == "0" || t == "false" || t == "no" || t == "off") v = false;
  else throw DataError("not a valid boolean: '" + t + "'");
}
void parse_value(const std::string& s, std::vector<int>& v) {
  v.clear();
  for (const auto& w : tokens(s)) v.push_back(parse_number<int>(w));
}
template <typename T>
void parse_value(const std::string& s, std::array<T, 3>& v) {
  const auto w = tokens(s);
  if (w.size() != 3) throw DataError("expected three values: '" + trim(s) + "'");
  for (int i = 0; i < 3; ++i) v[i] = parse_number<T>(w[i]);
}

template <typename T>
std::string number_text(T v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string to_text(int v) { return number_text(v); }
std::string to_text(double v) { return number_text(v); }
std::string to_text(std::uint64_t v) { return number_text(v); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + number_text(v[i]);
  return out;
}
template <typename T>
std::string to_text(const std::array<T, 3>& v) {
  return number_text(v[0]) + " " + number_text(v[1]) + " " + number_text(v[2]);
}

struct Key {
  std::string name;  // section.key
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

template <typename Access>
Key key(std::string name, Access access) {
  return {std::move(name), [access](const PipelineConfig& c) { return to_text(access(c)); },
          [access](PipelineConfig& c, const std::string& s) { parse_value(s, access(c)); }};
}

#define ESOSEG_KEY(section, field, member) key(section "." field, [](auto& c) -> auto& { return c.member; })

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      ESOSEG_KEY("phantom", "dims", phantom.dims),
      ESOSEG_KEY("phantom", "spacing", phantom.spacing),
      ESOSEG_KEY("phantom", "radius_min_mm", phantom.radius_min_mm),
      ESOSEG_KEY("phantom", "radius_max_mm", phantom.radius_max_mm),
      ESOSEG_KEY("phantom", "wobble", phantom.wobble),
      ESOSEG_KEY("phantom", "wobble_cycles", phantom.wobble_cycles),
      ESOSEG_KEY("phantom", "center_jitter", phantom.center_jitter),
      ESOSEG_KEY("phantom", "tissue_hu_mean", phantom.tissue_hu_mean),
      ESOSEG_KEY("phantom", "tissue_hu_std", phantom.tissue_hu_std),
      ESOSEG_KEY("phantom", "background_hu_mean", phantom.background_hu_mean),
      ESOSEG_KEY("phantom", "background_hu_std", phantom.background_hu_std),
      ESOSEG_KEY("phantom", "background_smoothness", phantom.background_smoothness),
      ESOSEG_KEY("phantom", "noise_std", phantom.noise_std),
      ESOSEG_KEY("phantom", "bright_blobs", phantom.bright_blobs),
      ESOSEG_KEY("phantom", "dark_blobs", phantom.dark_blobs),
      ESOSEG_KEY("phantom", "distractor_tube", phantom.distractor_tube),
      ESOSEG_KEY("phantom", "air_pocket_probability", phantom.air_pocket_probability),
      ESOSEG_KEY("phantom", "air_hu", phantom.air_hu),
      ESOSEG_KEY("phantom", "seed", phantom.seed),
      ESOSEG_KEY("network", "conv_kernels", network.conv_kernels),
      ESOSEG_KEY("network", "kernel_size", network.kernel_size),
      ESOSEG_KEY("network", "fc_widths", network.fc_widths),
      ESOSEG_KEY("network", "dual_path", network.dual_path),
      ESOSEG_KEY("network", "input_shift", network.input_shift),
      ESOSEG_KEY("network", "input_scale", network.input_scale),
      ESOSEG_KEY("train", "epochs", train.epochs),
      ESOSEG_KEY("train", "subepochs_per_epoch", train.subepochs_per_epoch),
      ESOSEG_KEY("train", "samples_per_subepoch", train.samples_per_subepoch),
      ESOSEG_KEY("train", "batch_size", train.batch_size),
      ESOSEG_KEY("train", "lr0", train.lr0),
      ESOSEG_KEY("train", "lr_halving_period_epochs", train.lr_halving_period_epochs),
      ESOSEG_KEY("train", "lr_halving_start_epoch", train.lr_halving_start_epoch),
      ESOSEG_KEY("train", "momentum", train.momentum),
      ESOSEG_KEY("train", "rms_decay", train.rms_decay),
      ESOSEG_KEY("train", "epsilon", train.epsilon),
      ESOSEG_KEY("train", "train_subvol", train.train_subvol),
      ESOSEG_KEY("train", "infer_subvol", train.infer_subvol),
      ESOSEG_KEY("train", "seed", train.seed),
      ESOSEG_KEY("gmm", "components", gmm.components),
      ESOSEG_KEY("gmm", "seed", gmm.seed),
      ESOSEG_KEY("gmm", "tol", gmm.tol),
      ESOSEG_KEY("gmm", "max_iters", gmm.max_iters),
      ESOSEG_KEY("gmm", "variance_floor", gmm.variance_floor),
      ESOSEG_KEY("acm", "alpha", acm.alpha),
      ESOSEG_KEY("acm", "step", acm.step),
      ESOSEG_KEY("acm", "max_iters", acm.max_iters),
      ESOSEG_KEY("acm", "tol", acm.tol),
      ESOSEG_KEY("acm", "falloff_mm", acm_falloff_mm),
      ESOSEG_KEY("rw", "gamma", rw.gamma),
      ESOSEG_KEY("rw", "cg_tol", rw.cg_tol),
      ESOSEG_KEY("rw", "cg_max_iters", rw.cg_max_iters),
      ESOSEG_KEY("rw", "threshold", rw.threshold),
      ESOSEG_KEY("segment", "hu_cutoff", hu_cutoff),
      ESOSEG_KEY("segment", "closing_radius", closing_radius),
  };
  return keys;
}

#undef ESOSEG_KEY

void apply_preset(PipelineConfig& cfg, const std::string& value) {
  const std::string v = trim(value);
  fcnn::ArchitectureSpec preset;
  if (v == "tiny") preset = fcnn::ArchitectureSpec::tiny();
  else if (v == "full") preset = fcnn::ArchitectureSpec::full();
  else throw DataError("unknown network preset '" + v + "' (expected tiny or full)");
  cfg.network.conv_kernels = preset.conv_kernels;
  cfg.network.fc_widths = preset.fc_widths;
}

// Presets first, then the rest in the given order.
void apply_pairs(PipelineConfig& cfg, const std::vector<std::pair<std::string, std::string>>& pairs) {
  for (const auto& [k, v] : pairs)
    if (k == "network.preset") apply_preset(cfg, v);
  for (const auto& [k, v] : pairs) {
    if (k == "network.preset") continue;
    const auto& keys = registry();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const Key& x) { return x.name == k; });
    if (it == keys.end()) throw DataError("unknown configuration key '" + k + "'");
    try {
      it->set(cfg, v);
    } catch (const DataError& e) {
      throw DataError(k + ": " + e.what());
    }
  }
}

}  // namespace

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("config file not found: " + path.string());
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw DataError(std::string("malformed config: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw DataError("config key '" + section + "' is outside any section");
    for (const auto& [k, v] : body) pairs.emplace_back(section + "." + k, v.data());
  }
  PipelineConfig cfg;
  apply_pairs(cfg, pairs);
  cfg.validate();
  return cfg;
}

void apply_overrides(PipelineConfig& cfg, const std::vector<std::string>& assignments) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw DataError("override '" + a + "' is not of the form section.key=value");
    pairs.emplace_back(trim(a.substr(0, eq)), a.substr(eq + 1));
  }
  apply_pairs(cfg, pairs);
  cfg.validate();
}

std::string format_config(const PipelineConfig& cfg) {
  std::ostringstream out;
  std::string current;
  for (const auto& k : registry()) {
    const auto dot = k.name.find('.');
    const std::string section = k.name.substr(0, dot);
    if (section != current) {
      out << (current.empty() ? "" : "\n") << '[' << section << "]\n";
      current = section;
    }
    out << k.name.substr(dot + 1) << " = " << k.get(cfg) << '\n';
  }
  return out.str();
}

void write_config(const PipelineConfig& cfg, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << format_config(cfg);
  if (!out) throw DataError("failed writing config: " + path.string());
}

// ---------------------------------------------------------------------------

std::vector<Case> load_cases(const fs::path& manifest) {
  const auto entries = phantom::read_manifest(manifest);
  if (entries.empty()) throw DataError("manifest lists no cases: " + manifest.string());
  std::vector<Case> cases;
  for (const auto& e : entries) {
    Case c;
    c.id = e.ct.stem().string();
    if (c.id.size() > 3 && c.id.ends_with("_ct")) c.id.resize(c.id.size() - 3);
    c.ct = read_volume(e.ct);
    c.mask = read_volume(e.mask);
    if (c.ct.kind != VolumeKind::HU) throw DataError(e.ct.string() + " is not an HU volume");
    if (c.mask.kind != VolumeKind::Mask) throw DataError(e.mask.string() + " is not a mask volume");
    if (!same_geometry(c.ct, c.mask)) throw DataError("CT and mask geometry differ for " + c.id);
    cases.push_back(std::move(c));
  }
  return cases;
}

priors::PriorModel fit_priors(const std::vector<Case>& cases, const PipelineConfig& cfg) {
  if (cases.empty()) throw DataError("no cases to fit priors on");
  std::vector<priors::LabeledVolume> raw;
  for (const auto& c : cases) raw.push_back({&c.ct, &c.mask});
  const double mean_eso_hu = priors::fit_gradient_stats(raw).mean_eso_hu;

  // Intensity and gradient models describe the CT the random walker sees,
  // i.e. after low-HU replacement.
  std::vector<Volume3D> pre;
  pre.reserve(cases.size());
  for (const auto& c : cases) pre.push_back(postproc::preprocess_ct(c.ct, mean_eso_hu, cfg.hu_cutoff));
  std::vector<priors::LabeledVolume> lv;
  for (std::size_t i = 0; i < cases.size(); ++i) lv.push_back({&pre[i], &cases[i].mask});

  priors::PriorModel m;
  m.stats = priors::fit_gradient_stats(lv);
  m.stats.mean_eso_hu = mean_eso_hu;
  const auto values = priors::masked_values(lv);
  m.gmm = priors::fit_gmm(values, cfg.gmm);
  return m;
}

fcnn::TrainingSet make_training_set(const std::vector<Case>& cases, double mean_eso_hu, double hu_cutoff) {
  std::vector<fcnn::TrainingCase> tc;
  tc.reserve(cases.size());
  for (const auto& c : cases) tc.push_back({postproc::preprocess_ct(c.ct, mean_eso_hu, hu_cutoff), c.mask});
  return fcnn::TrainingSet(std::move(tc));
}

namespace {

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(name) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

Segmentation segment(const Volume3D& ct, const fcnn::NetworkParams<float>& net, const priors::PriorModel& model,
                     const PipelineConfig& cfg) {
  Segmentation s;
  const Volume3D pre = stage("preprocess", [&] {
    ct.validate();
    return postproc::preprocess_ct(ct, model.stats.mean_eso_hu, cfg.hu_cutoff);
  });
  s.cnn = stage("cnn", [&] { return fcnn::predict_volume(net, pre, cfg.train.infer_subvol); });
  s.centerline = stage("acm", [&] { return acm::fit_centerline(s.cnn, cfg.acm, &s.acm_report); });
  s.acm_map = stage("distance map", [&] { return acm::centerline_distance_map(s.centerline, pre, cfg.acm_falloff_mm); });
  s.ct_prior = stage("ct prior", [&] { return priors::gmm_prior_map(pre, model.gmm); });
  const auto ew = stage("edge weights", [&] { return rw::build_edge_weights(pre, model.stats); });
  const auto pf = stage("prior weights", [&] { return rw::build_prior_weights(s.cnn, s.acm_map, s.ct_prior); });
  s.rw_prob = stage("random walker", [&] { return rw::solve_rw(ew, pf, cfg.rw, &s.rw_report); });
  s.mask = stage("closing", [&] {
    return postproc::morphological_closing(rw::extract_label(s.rw_prob, cfg.rw.threshold), cfg.closing_radius);
  });
  return s;
}

void write_intermediates(const Segmentation& s, const fs::path& dir) {
  write_volume(s.cnn, dir / "cnn_prob.mhd");
  write_volume(s.acm_map, dir / "acm_map.mhd");
  write_volume(s.ct_prior, dir / "ct_prior.mhd");
  write_volume(s.rw_prob, dir / "rw_prob.mhd");
}

metrics::MetricReport evaluate(const fs::path& pred_manifest, const fs::path& ref_manifest,
                               std::optional<std::pair<long, long>> crop) {
  const auto pred = phantom::read_manifest(pred_manifest);
  const auto ref = phantom::read_manifest(ref_manifest);
  if (ref.empty()) throw DataError("reference manifest lists no cases");
  if (pred.size() != ref.size())
    throw DataError("prediction and reference manifests list " + std::to_string(pred.size()) + " and " +
                    std::to_string(ref.size()) + " cases");
  std::vector<metrics::CaseMetrics> rows;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    std::string id = ref[i].ct.stem().string();
    if (id.size() > 3 && id.ends_with("_ct")) id.resize(id.size() - 3);
    Volume3D p = read_volume(pred[i].mask), r = read_volume(ref[i].mask);
    if (p.kind != VolumeKind::Mask || r.kind != VolumeKind::Mask) throw DataError(id + ": evaluation needs mask volumes");
    if (crop) std::tie(p, r) = metrics::crop_masks(p, r, crop->first, crop->second);
    try {
      rows.push_back(metrics::evaluate_case(id, p, r));
    } catch (const DataError& e) {
      throw DataError(id + ": " + e.what());
    }
  }
  return metrics::make_report(std::move(rows));
}

Comparison compare(const metrics::MetricReport& a, const metrics::MetricReport& b) {
  if (a.cases.size() != b.cases.size()) throw DataError("compared reports have different case counts");
  std::vector<double> da, db, aa, ab, ha, hb;
  for (std::size_t i = 0; i < a.cases.size(); ++i) {
    da.push_back(a.cases[i].dsc);
    db.push_back(b.cases[i].dsc);
    aa.push_back(a.cases[i].assd_mm);
    ab.push_back(b.cases[i].assd_mm);
    ha.push_back(a.cases[i].hd_mm);
    hb.push_back(b.cases[i].hd_mm);
  }
  auto test = [](const std::vector<double>& x, const std::vector<double>& y) -> std::optional<metrics::WilcoxonResult> {
    try {
      return metrics::wilcoxon_signed_rank(x, y);
    } catch (const DataError&) {
      return std::nullopt;
    }
  };
  return {test(da, db), test(aa, ab), test(ha, hb)};
}

std::string format_comparison(const Comparison& c) {
  std::ostringstream out;
  out << "metric,n,w_plus,p_value,exact\n";
  auto row = [&](const char* name, const std::optional<metrics::WilcoxonResult>& w) {
    out << name << ',';
    if (w) out << w->n << ',' << w->w_plus << ',' << std::setprecision(6) << w->p_value << ',' << (w->exact ? 1 : 0);
    else out << "0,,,";
    out << '\n';
  };
  row("dsc", c.dsc);
  row("assd_mm", c.assd_mm);
  row("hd_mm", c.hd_mm);
  return out.str();
}

}  // namespace esoseg::pipeline
