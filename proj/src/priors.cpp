#include "esoseg/priors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace esoseg::priors {

namespace {

double log_normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

double GMMModel::pdf(double x) const {
  double p = 0.0;
  for (long k = 0; k < components(); ++k) p += weights[k] * std::exp(log_normal_pdf(x, means[k], variances[k]));
  return p;
}

double GMMModel::log_likelihood(std::span<const double> samples) const {
  Eigen::VectorXd terms(components());
  double ll = 0.0;
  for (double x : samples) {
    for (long k = 0; k < components(); ++k) terms[k] = std::log(weights[k]) + log_normal_pdf(x, means[k], variances[k]);
    ll += log_sum_exp(terms);
  }
  return ll;
}

void GMMModel::validate() const {
  if (components() < 1 || means.size() != components() || variances.size() != components())
    throw DataError("GMM component arrays are inconsistent");
  if (!(weights.array() > 0.0).all() || !(weights.array() <= 1.0).all())
    throw DataError("GMM weights must lie in (0,1]");
  if (std::abs(weights.sum() - 1.0) > 1e-9) throw DataError("GMM weights must sum to 1");
  if (!(variances.array() > 0.0).all() || !means.allFinite() || !variances.allFinite())
    throw DataError("GMM variances must be positive and finite");
}

GMMModel fit_gmm(std::span<const double> samples, const GMMFitOptions& opts, GMMFitReport* report) {
  const long k_count = opts.components;
  if (k_count < 1) throw DataError("GMM needs at least one component");
  const long n = static_cast<long>(samples.size());
  if (n < 10 * k_count) throw DataError("GMM fit needs at least 10 samples per component");
  // Owned, aligned copy: vectorised reductions peel differently with the start
  // address, and a span can start anywhere.
  const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(samples.data(), n);

  // k-means++ seeding
  std::mt19937_64 rng(opts.seed);
  Eigen::VectorXd centers(k_count);
  centers[0] = x[std::uniform_int_distribution<long>(0, n - 1)(rng)];
  Eigen::VectorXd d2 = (x.array() - centers[0]).square();
  for (long k = 1; k < k_count; ++k) {
    long pick;
    if (d2.sum() > 0.0) {
      std::discrete_distribution<long> dist(d2.data(), d2.data() + n);
      pick = dist(rng);
    } else {
      pick = std::uniform_int_distribution<long>(0, n - 1)(rng);
    }
    centers[k] = x[pick];
    d2 = d2.cwiseMin((x.array() - centers[k]).square().matrix());
  }

  const double mean = x.mean();
  const double var = std::max((x.array() - mean).square().mean(), opts.variance_floor);
  GMMModel g;
  g.weights = Eigen::VectorXd::Constant(k_count, 1.0 / static_cast<double>(k_count));
  g.means = centers;
  g.variances = Eigen::VectorXd::Constant(k_count, var);

  GMMFitReport local;
  GMMFitReport& rep = report ? *report : local;
  rep = GMMFitReport{};

  Eigen::MatrixXd resp(n, k_count);
  Eigen::VectorXd terms(k_count);
  auto e_step = [&] {
    double ll = 0.0;
    for (long i = 0; i < n; ++i) {
      for (long k = 0; k < k_count; ++k) terms[k] = std::log(g.weights[k]) + log_normal_pdf(x[i], g.means[k], g.variances[k]);
      const double lse = log_sum_exp(terms);
      ll += lse;
      resp.row(i) = (terms.array() - lse).exp().matrix().transpose();
    }
    return ll;
  };

  double ll = e_step();
  rep.log_likelihood.push_back(ll);
  for (int it = 0; it < opts.max_iters; ++it) {
    const Eigen::VectorXd nk = resp.colwise().sum().transpose();
    for (long k = 0; k < k_count; ++k) {
      if (nk[k] <= 0.0) continue;  // collapsed component keeps its parameters
      const double mu = resp.col(k).dot(x) / nk[k];
      const double v = (resp.col(k).array() * (x.array() - mu).square()).sum() / nk[k];
      g.means[k] = mu;
      g.variances[k] = std::max(v, opts.variance_floor);
    }
    g.weights = nk / nk.sum();
    g.weights = g.weights.cwiseMax(std::numeric_limits<double>::min());
    g.weights /= g.weights.sum();

    const double next = e_step();
    rep.log_likelihood.push_back(next);
    rep.iterations = it + 1;
    const double gain = next - ll;
    ll = next;
    if (gain <= opts.tol * std::abs(ll)) break;
  }
  g.validate();
  return g;
}

double gmm_modal_pdf(const GMMModel& gmm) {
  gmm.validate();
  const Eigen::ArrayXd sd = gmm.variances.array().sqrt();
  const double lo = std::floor((gmm.means.array() - 5.0 * sd).minCoeff());
  const double hi = std::ceil((gmm.means.array() + 5.0 * sd).maxCoeff());
  double best = 0.0;
  for (double h = lo; h <= hi; h += 1.0) best = std::max(best, gmm.pdf(h));
  for (long k = 0; k < gmm.components(); ++k) best = std::max(best, gmm.pdf(gmm.means[k]));
  return best;
}

Volume3D gmm_prior_map(const Volume3D& ct, const GMMModel& gmm) {
  const double mode = gmm_modal_pdf(gmm);
  Volume3D out = ct.like(VolumeKind::Probability);
  for (long i = 0; i < ct.size(); ++i) out.data[i] = std::clamp(gmm.pdf(ct.data[i]) / mode, 1e-12, 1.0);
  return out;
}

std::vector<double> masked_values(std::span<const LabeledVolume> data) {
  std::vector<double> out;
  for (const auto& lv : data) {
    if (lv.ct->dims != lv.mask->dims) throw DataError("CT and mask dimensions differ");
    for (long i = 0; i < lv.ct->size(); ++i)
      if (lv.mask->data[i] != 0.0) out.push_back(lv.ct->data[i]);
  }
  return out;
}

GradientStats fit_gradient_stats(std::span<const LabeledVolume> data, PairEnumeration pairs) {
  double sum = 0.0, sum2 = 0.0, hu_sum = 0.0;
  long count = 0, hu_count = 0;
  auto add = [&](double d) {
    sum += d;
    sum2 += d * d;
    ++count;
  };
  for (const auto& lv : data) {
    const Volume3D& ct = *lv.ct;
    const Volume3D& m = *lv.mask;
    if (ct.dims != m.dims) throw DataError("CT and mask dimensions differ");
    for (long z = 0; z < ct.nz(); ++z)
      for (long y = 0; y < ct.ny(); ++y)
        for (long x = 0; x < ct.nx(); ++x) {
          if (m(x, y, z) == 0.0) continue;
          hu_sum += ct(x, y, z);
          ++hu_count;
          const long nb[3][3] = {{x + 1, y, z}, {x, y + 1, z}, {x, y, z + 1}};
          for (const auto& q : nb) {
            if (!ct.contains(q[0], q[1], q[2]) || m(q[0], q[1], q[2]) == 0.0) continue;
            const double d = ct(q[0], q[1], q[2]) - ct(x, y, z);
            add(d);
            if (pairs == PairEnumeration::BothWays) add(-d);
          }
        }
  }
  if (count == 0) throw DataError("no adjacent voxel pairs inside the reference masks");
  GradientStats s;
  s.mu_delta = sum / static_cast<double>(count);
  const double var = std::max(sum2 / static_cast<double>(count) - s.mu_delta * s.mu_delta, 0.0);
  s.sigma_delta = std::max(std::sqrt(var), 1.0);
  s.mean_eso_hu = hu_sum / static_cast<double>(hu_count);
  return s;
}

void write_prior_model(const PriorModel& m, const std::filesystem::path& path) {
  m.gmm.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.precision(9);
  out << "esoseg-priors 1\n";
  out << "components = " << m.gmm.components() << '\n';
  for (long k = 0; k < m.gmm.components(); ++k)
    out << "component = " << m.gmm.weights[k] << ' ' << m.gmm.means[k] << ' ' << m.gmm.variances[k] << '\n';
  out << "mu_delta = " << m.stats.mu_delta << '\n'
      << "sigma_delta = " << m.stats.sigma_delta << '\n'
      << "mean_eso_hu = " << m.stats.mean_eso_hu << '\n';
  if (!out) throw DataError("failed writing prior model: " + path.string());
}

PriorModel read_prior_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open prior model: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "esoseg-priors 1") throw DataError("not an esoseg prior model: " + path.string());

  PriorModel m;
  long declared = -1;
  std::vector<std::array<double, 3>> comps;
  bool have_mu = false, have_sigma = false, have_mean = false;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed prior model line: " + line);
    std::string key = line.substr(0, eq);
    key.erase(key.find_last_not_of(" \t") + 1);
    std::istringstream v(line.substr(eq + 1));
    bool ok = true;
    if (key == "components") ok = static_cast<bool>(v >> declared);
    else if (key == "component") {
      std::array<double, 3> c{};
      ok = static_cast<bool>(v >> c[0] >> c[1] >> c[2]);
      comps.push_back(c);
    } else if (key == "mu_delta") ok = have_mu = static_cast<bool>(v >> m.stats.mu_delta);
    else if (key == "sigma_delta") ok = have_sigma = static_cast<bool>(v >> m.stats.sigma_delta);
    else if (key == "mean_eso_hu") ok = have_mean = static_cast<bool>(v >> m.stats.mean_eso_hu);
    else throw DataError("unknown prior model key: " + key);
    if (!ok) throw DataError("malformed prior model line: " + line);
  }
  if (declared < 1 || static_cast<long>(comps.size()) != declared || !have_mu || !have_sigma || !have_mean)
    throw DataError("incomplete prior model: " + path.string());
  m.gmm.weights.resize(declared);
  m.gmm.means.resize(declared);
  m.gmm.variances.resize(declared);
  for (long k = 0; k < declared; ++k) {
    m.gmm.weights[k] = comps[k][0];
    m.gmm.means[k] = comps[k][1];
    m.gmm.variances[k] = comps[k][2];
  }
  // Weights printed at 9 digits need not sum to 1 exactly.
  m.gmm.weights /= m.gmm.weights.sum();
  m.gmm.validate();
  if (!(m.stats.sigma_delta > 0.0)) throw DataError("sigma_delta must be positive");
  return m;
}

}  // namespace esoseg::priors
