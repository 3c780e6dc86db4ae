// Central finite-difference check of fcnn::backward.
#pragma once

#include "esoseg/fcnn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace gradcheck {

struct TensorReport {
  std::string name;
  long checked = 0;
  double max_rel = 0.0;
};

struct Report {
  std::vector<TensorReport> tensors;
  double max_rel = 0.0;
  std::string worst;
};

// Mean loss over all output voxels of the batch, the quantity backward differentiates.
inline double batch_loss(const esoseg::fcnn::NetworkParams<double>& p,
                         std::span<const esoseg::fcnn::Sample<double>> batch) {
  double sum = 0.0;
  long voxels = 0;
  for (const auto& s : batch) {
    const auto r = esoseg::fcnn::forward(p, s.main, s.context);
    sum += esoseg::fcnn::loss(r.probabilities, s.labels) * static_cast<double>(s.labels.size());
    voxels += s.labels.size();
  }
  return sum / static_cast<double>(voxels);
}

// Forward pass rebuilt from conv3d_valid with every PReLU sign pattern either
// recorded or held fixed. With the pattern held at the one seen at theta the
// network is smooth around theta, so finite differences see only the linear
// piece that contains theta, whose derivative is the gradient at theta.
using SignMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct Pattern {
  std::vector<SignMask> main, context, head;
};

inline esoseg::fcnn::FeatureMap<double> frozen_path(const std::vector<esoseg::fcnn::Layer<double>>& path,
                                                    esoseg::fcnn::FeatureMap<double> x, std::vector<SignMask>& masks,
                                                    bool record) {
  if (record) masks.assign(path.size(), SignMask());
  for (std::size_t i = 0; i < path.size(); ++i) {
    auto linear = path[i];
    linear.slopes.resize(0);
    x = esoseg::fcnn::conv3d_valid(x, linear);
    if (!path[i].has_prelu()) continue;
    if (record) masks[i] = x.data.array() < 0.0;
    const auto& neg = masks[i];
    for (long j = 0; j < x.data.cols(); ++j)
      for (long c = 0; c < x.data.rows(); ++c)
        if (neg(c, j)) x.data(c, j) *= path[i].slopes[c];
  }
  return x;
}

inline esoseg::fcnn::FeatureMap<double> mean_pool2(const esoseg::fcnn::FeatureMap<double>& in) {
  esoseg::fcnn::FeatureMap<double> out;
  out.size = {in.size[0] / 2, in.size[1] / 2, in.size[2] / 2};
  out.data = esoseg::fcnn::Matrix<double>::Zero(in.channels(), out.voxels());
  for (long z = 0; z < 2 * out.size[2]; ++z)
    for (long y = 0; y < 2 * out.size[1]; ++y)
      for (long x = 0; x < 2 * out.size[0]; ++x)
        out.data.col(x / 2 + out.size[0] * (y / 2 + out.size[1] * (z / 2))) +=
            0.125 * in.data.col(x + in.size[0] * (y + in.size[1] * z));
  return out;
}

// Mean loss of one sample; records the sign pattern when `record`.
inline double frozen_loss(const esoseg::fcnn::NetworkParams<double>& p, const esoseg::fcnn::Sample<double>& s,
                          Pattern& pat, bool record) {
  auto fused = frozen_path(p.main_path, s.main, pat.main, record);
  if (p.arch.dual_path) {
    const auto ctx = frozen_path(p.context_path, mean_pool2(s.context), pat.context, record);
    esoseg::fcnn::Matrix<double> cat(fused.channels() + ctx.channels(), fused.voxels());
    cat.topRows(fused.channels()) = fused.data;
    long j = 0;
    for (long z = 0; z < fused.size[2]; ++z)
      for (long y = 0; y < fused.size[1]; ++y)
        for (long x = 0; x < fused.size[0]; ++x, ++j) {
          long src[3];
          const long at[3] = {x, y, z};
          for (int a = 0; a < 3; ++a) src[a] = (at[a] + (2 * ctx.size[a] - fused.size[a]) / 2) / 2;
          cat.col(j).tail(ctx.channels()) = ctx.data.col(src[0] + ctx.size[0] * (src[1] + ctx.size[1] * src[2]));
        }
    fused.data = std::move(cat);
  }
  const auto scores = frozen_path(p.head, std::move(fused), pat.head, record);
  double sum = 0.0;
  for (long j = 0; j < scores.data.cols(); ++j) {
    const auto col = scores.data.col(j).array();
    const double m = col.maxCoeff();
    const double p_label = std::exp(col[s.labels[j]] - m) / (col - m).exp().sum();
    sum -= std::log(std::max(p_label, 1e-12));
  }
  return sum / static_cast<double>(scores.data.cols());
}

inline double frozen_batch_loss(const esoseg::fcnn::NetworkParams<double>& p,
                                std::span<const esoseg::fcnn::Sample<double>> batch, std::vector<Pattern>& pats,
                                bool record) {
  if (record) pats.assign(batch.size(), Pattern());
  double sum = 0.0;
  long voxels = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    sum += frozen_loss(p, batch[i], pats[i], record) * static_cast<double>(batch[i].labels.size());
    voxels += batch[i].labels.size();
  }
  return sum / static_cast<double>(voxels);
}

/// Checks up to `per_tensor` randomly chosen entries of every tensor (all
/// entries when the tensor is smaller). Relative error is
/// |a - n| / max(|a|, |n|, floor).
/// With `freeze_pattern` the loss is differenced with every PReLU sign held at
/// its value at the unperturbed parameters.
inline Report run(esoseg::fcnn::NetworkParams<double> params, std::span<const esoseg::fcnn::Sample<double>> batch,
                  long per_tensor, std::uint64_t seed, double h = 1e-4, double floor = 1e-6,
                  bool freeze_pattern = false) {
  using Map = Eigen::Map<esoseg::fcnn::Vector<double>>;
  using CMap = Eigen::Map<const esoseg::fcnn::Vector<double>>;
  const auto analytic = esoseg::fcnn::backward<double>(params, batch).gradients;

  std::vector<std::pair<std::string, Map>> tensors;
  params.for_each_tensor([&](const std::string& n, Map t) { tensors.emplace_back(n, t); });
  std::vector<CMap> grads;
  analytic.for_each_tensor([&](const std::string&, CMap t) { grads.push_back(t); });

  std::vector<Pattern> pats;
  if (freeze_pattern) frozen_batch_loss(params, batch, pats, true);
  auto f = [&] { return freeze_pattern ? frozen_batch_loss(params, batch, pats, false) : batch_loss(params, batch); };

  std::mt19937_64 rng(seed);
  Report rep;
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    auto& [name, t] = tensors[ti];
    std::vector<long> idx(t.size());
    for (long i = 0; i < t.size(); ++i) idx[i] = i;
    if (static_cast<long>(idx.size()) > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_tensor);
    }
    TensorReport tr{name, static_cast<long>(idx.size()), 0.0};
    for (long i : idx) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = f();
      t[i] = saved - h;
      const double down = f();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grads[ti][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      tr.max_rel = std::max(tr.max_rel, rel);
    }
    if (tr.max_rel >= rep.max_rel) {
      rep.max_rel = tr.max_rel;
      rep.worst = name;
    }
    rep.tensors.push_back(tr);
  }
  return rep;
}

}  // namespace gradcheck
