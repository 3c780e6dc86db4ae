// End-to-end orchestration: configuration, prior fitting, training data
// loading, the segmentation stage chain and evaluation over manifests.
#pragma once

#include "esoseg/acm.hpp"
#include "esoseg/fcnn.hpp"
#include "esoseg/metrics.hpp"
#include "esoseg/phantom.hpp"
#include "esoseg/priors.hpp"
#include "esoseg/rw.hpp"
#include "esoseg/volume.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace esoseg::pipeline {

struct PipelineConfig {
  phantom::PhantomConfig phantom;
  fcnn::ArchitectureSpec network = fcnn::ArchitectureSpec::tiny();
  fcnn::TrainingConfig train;
  priors::GMMFitOptions gmm;
  acm::ACMConfig acm;
  double acm_falloff_mm = 25.0;
  rw::RWConfig rw;
  double hu_cutoff = -150.0;
  int closing_radius = 1;

  void validate() const;
};

/// INI-style file with sections [phantom], [network], [train], [gmm],
/// [acm], [rw] and [segment]. Unknown keys are rejected. Missing keys keep
/// their defaults. `network.preset = tiny|full` resets the layer widths
/// before any explicit width keys are applied.
PipelineConfig load_config(const std::filesystem::path& path);

/// Applies `section.key=value` assignments on top of `cfg`.
void apply_overrides(PipelineConfig& cfg, const std::vector<std::string>& assignments);

/// Every key with its effective value, readable by load_config.
std::string format_config(const PipelineConfig& cfg);
void write_config(const PipelineConfig& cfg, const std::filesystem::path& path);

struct Case {
  std::string id;
  Volume3D ct;
  Volume3D mask;
};

/// Reads every pair listed in a manifest; ids are the CT file stems.
std::vector<Case> load_cases(const std::filesystem::path& manifest);

/// GMM over reference HU values plus gradient statistics.
priors::PriorModel fit_priors(const std::vector<Case>& cases, const PipelineConfig& cfg);

/// Preprocessed CTs with their masks, ready for sampling.
fcnn::TrainingSet make_training_set(const std::vector<Case>& cases, double mean_eso_hu, double hu_cutoff);

struct Segmentation {
  Volume3D cnn;       // network foreground probability
  Volume3D acm_map;   // centerline distance map
  Volume3D ct_prior;  // GMM intensity prior
  Volume3D rw_prob;   // random walker esophagus probability
  Volume3D mask;      // final closed mask
  acm::Centerline centerline;
  acm::FitReport acm_report;
  rw::RWReport rw_report;
};

/// preprocess -> CNN -> centerline -> distance map -> intensity prior ->
/// weights -> random walker -> label -> closing. A failing stage rethrows
/// with the stage name prefixed.
Segmentation segment(const Volume3D& ct, const fcnn::NetworkParams<float>& net, const priors::PriorModel& model,
                     const PipelineConfig& cfg);

/// Writes the four intermediate maps as cnn_prob, acm_map, ct_prior and rw_prob.
void write_intermediates(const Segmentation& s, const std::filesystem::path& dir);

/// Per-case metrics of prediction masks against reference masks, matched by
/// manifest line. Each manifest's second column is the mask used.
metrics::MetricReport evaluate(const std::filesystem::path& pred_manifest, const std::filesystem::path& ref_manifest,
                               std::optional<std::pair<long, long>> crop = std::nullopt);

/// Paired two-sided tests per metric; empty when too few cases differ.
struct Comparison {
  std::optional<metrics::WilcoxonResult> dsc, assd_mm, hd_mm;
};

Comparison compare(const metrics::MetricReport& a, const metrics::MetricReport& b);
std::string format_comparison(const Comparison& c);

}  // namespace esoseg::pipeline
