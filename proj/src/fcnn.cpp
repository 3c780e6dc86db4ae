#include "esoseg/fcnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace esoseg::fcnn {

ArchitectureSpec ArchitectureSpec::tiny() {
  ArchitectureSpec a;
  a.conv_kernels = {4, 4, 4, 8, 8, 8, 12, 12, 12};
  a.fc_widths = {32, 16, 8};
  return a;
}

void ArchitectureSpec::validate() const {
  if (conv_kernels.empty()) throw DataError("architecture needs at least one convolutional layer");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw DataError("kernel size must be odd and positive");
  for (int k : conv_kernels)
    if (k < 1) throw DataError("convolutional kernel counts must be positive");
  for (int w : fc_widths)
    if (w < 1) throw DataError("fully-connected widths must be positive");
  if (n_classes != 2) throw DataError("only two-class networks are supported");
  if (margin() % 2 != 0) throw DataError("path margin must be even");
  if (!(input_scale > 0.0) || !std::isfinite(input_shift)) throw DataError("invalid input normalisation");
}

int output_side(const ArchitectureSpec& arch, int main_side) {
  const int out = main_side - arch.margin();
  if (out < 1)
    throw DataError("main input side " + std::to_string(main_side) + " is smaller than the receptive field " +
                    std::to_string(arch.receptive_field()));
  return out;
}

int context_side(const ArchitectureSpec& arch, int out_side) { return 2 * ((out_side + 1) / 2 + arch.margin()); }

int context_offset(const ArchitectureSpec& arch) { return -arch.margin() / 2; }

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
NetworkParams<Scalar> NetworkParams<Scalar>::zeros_like() const {
  NetworkParams out = *this;
  for (auto* path : {&out.main_path, &out.context_path, &out.head})
    for (auto& l : *path) {
      l.weights.setZero();
      l.bias.setZero();
      l.slopes.setZero();
    }
  return out;
}

template <typename Scalar>
template <typename Other>
NetworkParams<Other> NetworkParams<Scalar>::cast() const {
  NetworkParams<Other> out;
  out.arch = arch;
  auto convert = [](const std::vector<Layer<Scalar>>& src, std::vector<Layer<Other>>& dst) {
    dst.clear();
    for (const auto& l : src) {
      Layer<Other> o;
      o.kernel = l.kernel;
      o.in_channels = l.in_channels;
      o.weights = l.weights.template cast<Other>();
      o.bias = l.bias.template cast<Other>();
      o.slopes = l.slopes.template cast<Other>();
      dst.push_back(std::move(o));
    }
  };
  convert(main_path, out.main_path);
  convert(context_path, out.context_path);
  convert(head, out.head);
  return out;
}

namespace {

template <typename Layers, typename F>
void visit_layers(Layers& layers, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string name = prefix + "." + std::to_string(i);
    f(name + ".weights", l.weights.data(), l.weights.size());
    f(name + ".bias", l.bias.data(), l.bias.size());
    if (l.slopes.size() > 0) f(name + ".slopes", l.slopes.data(), l.slopes.size());
  }
}

}  // namespace

template <typename Scalar>
void NetworkParams<Scalar>::for_each_tensor(
    const std::function<void(const std::string&, Eigen::Map<Vector<Scalar>>)>& f) {
  auto g = [&](const std::string& n, Scalar* p, Eigen::Index size) { f(n, Eigen::Map<Vector<Scalar>>(p, size)); };
  visit_layers(main_path, "main", g);
  visit_layers(context_path, "context", g);
  visit_layers(head, "head", g);
}

template <typename Scalar>
void NetworkParams<Scalar>::for_each_tensor(
    const std::function<void(const std::string&, Eigen::Map<const Vector<Scalar>>)>& f) const {
  auto g = [&](const std::string& n, const Scalar* p, Eigen::Index size) {
    f(n, Eigen::Map<const Vector<Scalar>>(p, size));
  };
  visit_layers(main_path, "main", g);
  visit_layers(context_path, "context", g);
  visit_layers(head, "head", g);
}

template <typename Scalar>
std::size_t NetworkParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, Eigen::Map<const Vector<Scalar>> t) { n += t.size(); });
  return n;
}

template <typename Scalar>
bool NetworkParams<Scalar>::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, Eigen::Map<const Vector<Scalar>> t) { ok = ok && t.allFinite(); });
  return ok;
}

Matrix<double> he_init(long rows, long cols, long fan_in, Rng& rng) {
  if (fan_in < 1) throw DataError("He initialisation needs at least one incoming connection");
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

NetworkParams<double> init_params(const ArchitectureSpec& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  auto make = [&](int kernel, int in, int out, bool prelu) {
    Layer<double> l;
    l.kernel = kernel;
    l.in_channels = in;
    const long fan_in = static_cast<long>(kernel) * kernel * kernel * in;
    l.weights = he_init(out, fan_in, fan_in, rng);
    l.bias = Vector<double>::Zero(out);
    if (prelu) l.slopes = Vector<double>::Constant(out, 0.25);
    return l;
  };
  auto make_path = [&] {
    std::vector<Layer<double>> path;
    int in = 1;
    for (int out : arch.conv_kernels) {
      path.push_back(make(arch.kernel_size, in, out, true));
      in = out;
    }
    return path;
  };

  NetworkParams<double> p;
  p.arch = arch;
  p.main_path = make_path();
  if (arch.dual_path) p.context_path = make_path();
  int in = arch.conv_kernels.back() * (arch.dual_path ? 2 : 1);
  for (int w : arch.fc_widths) {
    p.head.push_back(make(1, in, w, true));
    in = w;
  }
  p.head.push_back(make(1, in, arch.n_classes, false));
  return p;
}

template <typename Scalar>
FeatureMap<Scalar> to_input(const Volume3D& block, const ArchitectureSpec& arch) {
  FeatureMap<Scalar> f;
  f.size = block.dims;
  f.data = ((block.data - arch.input_shift) / arch.input_scale).cast<Scalar>().matrix().transpose();
  return f;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

Dims3 shrink(const Dims3& s, int k) { return {s[0] - k + 1, s[1] - k + 1, s[2] - k + 1}; }

long voxels(const Dims3& s) { return s[0] * s[1] * s[2]; }

template <typename Scalar>
Matrix<Scalar> im2col(const FeatureMap<Scalar>& in, int k, const Dims3& out) {
  const long cin = in.channels();
  const long rows = static_cast<long>(k) * k * k * cin;
  Matrix<Scalar> cols(rows, voxels(out));
  const Scalar* src = in.data.data();
  long j = 0;
  for (long z = 0; z < out[2]; ++z)
    for (long y = 0; y < out[1]; ++y)
      for (long x = 0; x < out[0]; ++x, ++j) {
        Scalar* dst = cols.data() + j * rows;
        for (int dz = 0; dz < k; ++dz)
          for (int dy = 0; dy < k; ++dy) {
            const long row_start = x + in.size[0] * ((y + dy) + in.size[1] * (z + dz));
            for (int dx = 0; dx < k; ++dx) {
              std::copy_n(src + (row_start + dx) * cin, cin, dst);
              dst += cin;
            }
          }
      }
  return cols;
}

template <typename Scalar>
void col2im_add(const Matrix<Scalar>& dcols, int k, const Dims3& out, FeatureMap<Scalar>& din) {
  const long cin = din.channels();
  const long rows = dcols.rows();
  Scalar* dst = din.data.data();
  long j = 0;
  for (long z = 0; z < out[2]; ++z)
    for (long y = 0; y < out[1]; ++y)
      for (long x = 0; x < out[0]; ++x, ++j) {
        const Scalar* src = dcols.data() + j * rows;
        for (int dz = 0; dz < k; ++dz)
          for (int dy = 0; dy < k; ++dy) {
            const long row_start = x + din.size[0] * ((y + dy) + din.size[1] * (z + dz));
            for (int dx = 0; dx < k; ++dx) {
              Scalar* d = dst + (row_start + dx) * cin;
              for (long c = 0; c < cin; ++c) d[c] += src[c];
              src += cin;
            }
          }
      }
}

template <typename Scalar>
struct LayerTrace {
  Matrix<Scalar> cols;  // empty for 1^3 layers, whose input is kept instead
  Matrix<Scalar> input;
  Matrix<Scalar> pre;
  Dims3 in_size{};
  Dims3 out_size{};
};

template <typename Scalar>
FeatureMap<Scalar> layer_forward(const FeatureMap<Scalar>& in, const Layer<Scalar>& layer, LayerTrace<Scalar>* trace) {
  if (in.channels() != layer.in_channels)
    throw DataError("layer expects " + std::to_string(layer.in_channels) + " input channels, got " +
                    std::to_string(in.channels()));
  for (int a = 0; a < 3; ++a)
    if (in.size[a] < layer.kernel) throw DataError("feature map is smaller than the convolution kernel");

  FeatureMap<Scalar> out;
  out.size = shrink(in.size, layer.kernel);
  if (layer.kernel == 1) {
    out.data.noalias() = layer.weights * in.data;
    if (trace) trace->input = in.data;
  } else {
    Matrix<Scalar> cols = im2col(in, layer.kernel, out.size);
    out.data.noalias() = layer.weights * cols;
    if (trace) trace->cols = std::move(cols);
  }
  out.data.colwise() += layer.bias;
  if (trace) {
    trace->pre = out.data;
    trace->in_size = in.size;
    trace->out_size = out.size;
  }
  if (layer.has_prelu()) prelu_inplace(out.data, layer.slopes);
  return out;
}

// Accumulates parameter gradients into `grad`; returns d(loss)/d(input) when asked.
template <typename Scalar>
FeatureMap<Scalar> layer_backward(const Layer<Scalar>& layer, const LayerTrace<Scalar>& trace, Matrix<Scalar> dout,
                                  Layer<Scalar>& grad, bool need_input_grad) {
  if (layer.has_prelu()) {
    const long n = dout.cols();
    for (long j = 0; j < n; ++j)
      for (long c = 0; c < dout.rows(); ++c) {
        const Scalar z = trace.pre(c, j);
        if (z < Scalar(0)) {
          grad.slopes[c] += dout(c, j) * z;
          dout(c, j) *= layer.slopes[c];
        }
      }
  }
  grad.bias += dout.rowwise().sum();
  const Matrix<Scalar>& cols = layer.kernel == 1 ? trace.input : trace.cols;
  grad.weights.noalias() += dout * cols.transpose();

  FeatureMap<Scalar> din;
  if (!need_input_grad) return din;
  din.size = trace.in_size;
  if (layer.kernel == 1) {
    din.data.noalias() = layer.weights.transpose() * dout;
  } else {
    Matrix<Scalar> dcols = layer.weights.transpose() * dout;
    din.data = Matrix<Scalar>::Zero(layer.in_channels, voxels(trace.in_size));
    col2im_add(dcols, layer.kernel, trace.out_size, din);
  }
  return din;
}

template <typename Scalar>
FeatureMap<Scalar> downsample_features(const FeatureMap<Scalar>& in) {
  FeatureMap<Scalar> out;
  out.size = {in.size[0] / 2, in.size[1] / 2, in.size[2] / 2};
  for (int a = 0; a < 3; ++a)
    if (out.size[a] < 1) throw DataError("context block too small to down-sample");
  out.data = Matrix<Scalar>::Zero(in.channels(), voxels(out.size));
  for (long z = 0; z < out.size[2]; ++z)
    for (long y = 0; y < out.size[1]; ++y)
      for (long x = 0; x < out.size[0]; ++x) {
        const long j = x + out.size[0] * (y + out.size[1] * z);
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              out.data.col(j) +=
                  in.data.col((2 * x + dx) + in.size[0] * ((2 * y + dy) + in.size[1] * (2 * z + dz)));
        out.data.col(j) *= Scalar(0.125);
      }
  return out;
}

// Nearest-neighbour x2 then crop to `target`, as upsample2_nearest.
std::vector<long> upsample_source_index(const Dims3& coarse, const Dims3& target) {
  Index3 lo{};
  for (int a = 0; a < 3; ++a) {
    if (target[a] < 2 * coarse[a] - 1 || target[a] > 2 * coarse[a])
      throw DataError("context path output does not match the main path output");
    lo[a] = (2 * coarse[a] - target[a]) / 2;
  }
  std::vector<long> src(voxels(target));
  long j = 0;
  for (long z = 0; z < target[2]; ++z)
    for (long y = 0; y < target[1]; ++y)
      for (long x = 0; x < target[0]; ++x, ++j)
        src[j] = (x + lo[0]) / 2 + coarse[0] * ((y + lo[1]) / 2 + coarse[1] * ((z + lo[2]) / 2));
  return src;
}

template <typename Scalar>
struct Trace {
  std::vector<LayerTrace<Scalar>> main, context, head;
  Dims3 context_out{};
  long main_channels = 0;
};

template <typename Scalar>
FeatureMap<Scalar> run_path(const std::vector<Layer<Scalar>>& path, FeatureMap<Scalar> x,
                            std::vector<LayerTrace<Scalar>>* traces) {
  if (traces) traces->resize(path.size());
  for (std::size_t i = 0; i < path.size(); ++i) x = layer_forward(x, path[i], traces ? &(*traces)[i] : nullptr);
  return x;
}

template <typename Scalar>
Matrix<Scalar> softmax(const Matrix<Scalar>& scores) {
  Matrix<Scalar> p(scores.rows(), scores.cols());
  for (long j = 0; j < scores.cols(); ++j) {
    const Scalar m = scores.col(j).maxCoeff();
    p.col(j) = (scores.col(j).array() - m).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

template <typename Scalar>
ForwardResult<Scalar> forward_impl(const NetworkParams<Scalar>& params, const FeatureMap<Scalar>& main_in,
                                   const FeatureMap<Scalar>& context_in, Trace<Scalar>* trace) {
  const auto& arch = params.arch;
  for (int a = 0; a < 3; ++a) output_side(arch, static_cast<int>(main_in.size[a]));

  FeatureMap<Scalar> fused = run_path(params.main_path, main_in, trace ? &trace->main : nullptr);
  if (trace) trace->main_channels = fused.channels();

  if (arch.dual_path) {
    for (int a = 0; a < 3; ++a) {
      const int expected = context_side(arch, static_cast<int>(fused.size[a]));
      if (context_in.size[a] != expected)
        throw DataError("context block side " + std::to_string(context_in.size[a]) + " does not match expected " +
                        std::to_string(expected));
    }
    FeatureMap<Scalar> ctx =
        run_path(params.context_path, downsample_features(context_in), trace ? &trace->context : nullptr);
    const auto src = upsample_source_index(ctx.size, fused.size);
    if (trace) trace->context_out = ctx.size;
    Matrix<Scalar> cat(fused.channels() + ctx.channels(), fused.voxels());
    cat.topRows(fused.channels()) = fused.data;
    for (long j = 0; j < fused.voxels(); ++j) cat.col(j).tail(ctx.channels()) = ctx.data.col(src[j]);
    fused.data = std::move(cat);
  }

  ForwardResult<Scalar> r;
  r.scores = run_path(params.head, std::move(fused), trace ? &trace->head : nullptr);
  r.probabilities.size = r.scores.size;
  r.probabilities.data = softmax(r.scores.data);
  return r;
}

template <typename Scalar>
FeatureMap<Scalar> backprop_path(const std::vector<Layer<Scalar>>& path, const std::vector<LayerTrace<Scalar>>& traces,
                                 FeatureMap<Scalar> d, std::vector<Layer<Scalar>>& grads, bool need_input_grad) {
  for (std::size_t i = path.size(); i-- > 0;) {
    const bool need = i > 0 || need_input_grad;
    d = layer_backward(path[i], traces[i], std::move(d.data), grads[i], need);
  }
  return d;
}

}  // namespace

template <typename Scalar>
void prelu_inplace(Matrix<Scalar>& x, const Vector<Scalar>& slopes) {
  for (long j = 0; j < x.cols(); ++j)
    for (long c = 0; c < x.rows(); ++c)
      if (x(c, j) < Scalar(0)) x(c, j) *= slopes[c];
}

template <typename Scalar>
FeatureMap<Scalar> conv3d_valid(const FeatureMap<Scalar>& input, const Layer<Scalar>& layer) {
  Layer<Scalar> linear = layer;
  linear.slopes.resize(0);
  return layer_forward<Scalar>(input, linear, nullptr);
}

template <typename Scalar>
ForwardResult<Scalar> forward(const NetworkParams<Scalar>& params, const FeatureMap<Scalar>& main_in,
                              const FeatureMap<Scalar>& context_in) {
  return forward_impl(params, main_in, context_in, static_cast<Trace<Scalar>*>(nullptr));
}

template <typename Scalar>
double loss(const FeatureMap<Scalar>& probabilities, const Eigen::ArrayXi& labels) {
  if (labels.size() != probabilities.voxels() || labels.size() == 0)
    throw DataError("label block does not match the output grid");
  double sum = 0.0;
  for (long j = 0; j < labels.size(); ++j) {
    const int c = labels[j];
    if (c < 0 || c >= probabilities.channels()) throw DataError("label out of range");
    sum -= std::log(std::max<double>(probabilities.data(c, j), 1e-12));
  }
  return sum / static_cast<double>(labels.size());
}

template <typename Scalar>
GradientResult<Scalar> backward(const NetworkParams<Scalar>& params, std::span<const Sample<Scalar>> batch) {
  if (batch.empty()) throw DataError("empty batch");
  GradientResult<Scalar> out;
  out.gradients = params.zeros_like();

  long total_voxels = 0;
  for (const auto& s : batch) total_voxels += s.labels.size();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(total_voxels);

  double loss_sum = 0.0;
  for (const auto& s : batch) {
    Trace<Scalar> trace;
    const auto fr = forward_impl(params, s.main, s.context, &trace);
    const double l = loss(fr.probabilities, s.labels);
    loss_sum += l * static_cast<double>(s.labels.size());

    FeatureMap<Scalar> d;
    d.size = fr.scores.size;
    d.data = fr.probabilities.data;
    for (long j = 0; j < s.labels.size(); ++j) d.data(s.labels[j], j) -= Scalar(1);
    d.data *= inv;

    d = backprop_path(params.head, trace.head, std::move(d), out.gradients.head, true);
    if (params.arch.dual_path) {
      const long mc = trace.main_channels;
      const long cc = d.channels() - mc;
      FeatureMap<Scalar> dctx;
      dctx.size = trace.context_out;
      dctx.data = Matrix<Scalar>::Zero(cc, voxels(trace.context_out));
      const auto src = upsample_source_index(trace.context_out, d.size);
      for (long j = 0; j < d.voxels(); ++j) dctx.data.col(src[j]) += d.data.col(j).tail(cc);
      backprop_path(params.context_path, trace.context, std::move(dctx), out.gradients.context_path, false);
      Matrix<Scalar> top = d.data.topRows(mc);
      d.data = std::move(top);
    }
    backprop_path(params.main_path, trace.main, std::move(d), out.gradients.main_path, false);
  }
  out.loss = loss_sum / static_cast<double>(total_voxels);
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation

template <typename Scalar>
void rmsprop_update(Eigen::Map<Vector<Scalar>> theta, Eigen::Map<const Vector<Scalar>> grad,
                    Eigen::Map<Vector<Scalar>> cache, Eigen::Map<Vector<Scalar>> velocity, const RmsPropHyper& h) {
  const Scalar decay = static_cast<Scalar>(h.decay);
  const Scalar momentum = static_cast<Scalar>(h.momentum);
  const Scalar lr = static_cast<Scalar>(h.lr);
  const Scalar eps = static_cast<Scalar>(h.epsilon);
  cache.array() = decay * cache.array() + (Scalar(1) - decay) * grad.array().square();
  velocity.array() = momentum * velocity.array() - lr * grad.array() / (cache.array() + eps).sqrt();
  theta += velocity;
}

template <typename Scalar>
void rmsprop_step(NetworkParams<Scalar>& params, const NetworkParams<Scalar>& grads, OptimizerState<Scalar>& state,
                  const RmsPropHyper& hyper) {
  std::vector<Eigen::Map<const Vector<Scalar>>> g;
  grads.for_each_tensor([&](const std::string& name, Eigen::Map<const Vector<Scalar>> t) {
    if (!t.allFinite()) throw NumericalError("non-finite gradient in " + name);
    g.push_back(t);
  });
  std::vector<Eigen::Map<Vector<Scalar>>> c, v;
  state.cache.for_each_tensor([&](const std::string&, Eigen::Map<Vector<Scalar>> t) { c.push_back(t); });
  state.velocity.for_each_tensor([&](const std::string&, Eigen::Map<Vector<Scalar>> t) { v.push_back(t); });
  std::size_t i = 0;
  params.for_each_tensor([&](const std::string& name, Eigen::Map<Vector<Scalar>> t) {
    if (i >= g.size() || g[i].size() != t.size() || c[i].size() != t.size() || v[i].size() != t.size())
      throw DataError("optimizer state does not match parameter " + name);
    rmsprop_update<Scalar>(t, g[i], c[i], v[i], hyper);
    ++i;
  });
}

// ---------------------------------------------------------------------------
// Training

void TrainingConfig::validate(const ArchitectureSpec& arch) const {
  if (epochs < 0 || subepochs_per_epoch < 1 || samples_per_subepoch < 1 || batch_size < 1)
    throw DataError("training schedule counts must be positive");
  if (samples_per_subepoch % batch_size != 0)
    throw DataError("samples_per_subepoch must be a multiple of batch_size");
  if (!(lr0 > 0.0)) throw DataError("learning rate must be positive");
  if (lr_halving_period_epochs < 1 || lr_halving_start_epoch < 1) throw DataError("invalid learning-rate schedule");
  if (momentum < 0.0 || momentum >= 1.0) throw DataError("momentum must lie in [0,1)");
  if (!(rms_decay > 0.0 && rms_decay < 1.0) || !(epsilon > 0.0)) throw DataError("invalid RMSprop constants");
  output_side(arch, train_subvol);
  output_side(arch, infer_subvol);
}

double learning_rate(const TrainingConfig& cfg, int epoch) {
  int halvings = 0;
  if (epoch >= cfg.lr_halving_start_epoch)
    halvings = 1 + (epoch - cfg.lr_halving_start_epoch) / cfg.lr_halving_period_epochs;
  return cfg.lr0 * std::ldexp(1.0, -halvings);
}

TrainingSet::TrainingSet(std::vector<TrainingCase> cases) : cases_(std::move(cases)) {
  if (cases_.empty()) throw DataError("training set is empty");
  for (const auto& c : cases_) {
    if (c.ct.dims != c.mask.dims) throw DataError("training CT and mask dimensions differ");
    std::vector<long> fg, bg;
    for (long i = 0; i < c.mask.size(); ++i) (c.mask.data[i] != 0.0 ? fg : bg).push_back(i);
    fg_.push_back(std::move(fg));
    bg_.push_back(std::move(bg));
  }
}

std::vector<SampledBlock> sample_training_batch(const TrainingSet& data, const ArchitectureSpec& arch,
                                                const TrainingConfig& cfg, std::size_t count, Rng& rng) {
  if (data.size() == 0) throw DataError("training set is empty");
  const int main_side = cfg.train_subvol;
  const int out = output_side(arch, main_side);
  const int ctx = context_side(arch, out);
  const int half_margin = arch.margin() / 2;

  std::uniform_int_distribution<std::size_t> pick_case(0, data.size() - 1);
  std::bernoulli_distribution coin(0.5);
  std::vector<SampledBlock> samples;
  samples.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t ci = pick_case(rng);
    const bool want_fg = coin(rng);
    const auto& fg = data.foreground(ci);
    const auto& bg = data.background(ci);
    const bool use_fg = want_fg ? !fg.empty() : bg.empty();
    const auto& pool = use_fg ? fg : bg;
    const long li = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

    const auto& c = data[ci];
    const Index3 center{li % c.ct.nx(), (li / c.ct.nx()) % c.ct.ny(), li / (c.ct.nx() * c.ct.ny())};
    Index3 main_origin{}, ctx_origin{}, label_origin{};
    for (int a = 0; a < 3; ++a) {
      main_origin[a] = center[a] - main_side / 2;
      ctx_origin[a] = main_origin[a] + context_offset(arch);
      label_origin[a] = main_origin[a] + half_margin;
    }
    SampledBlock s;
    s.main = extract_block(c.ct, main_origin, {main_side, main_side, main_side});
    if (arch.dual_path) s.context = extract_block(c.ct, ctx_origin, {ctx, ctx, ctx});
    s.labels = extract_block(c.mask, label_origin, {out, out, out});
    s.foreground_centered = use_fg;
    samples.push_back(std::move(s));
  }
  return samples;
}

template <typename Scalar>
Sample<Scalar> to_sample(const SampledBlock& block, const ArchitectureSpec& arch) {
  Sample<Scalar> s;
  s.main = to_input<Scalar>(block.main, arch);
  if (arch.dual_path) s.context = to_input<Scalar>(block.context, arch);
  s.labels = (block.labels.data != 0.0).cast<int>();
  return s;
}

TrainingState initial_state(const ArchitectureSpec& arch, std::uint64_t seed) {
  TrainingState s;
  s.params = init_params(arch, seed).cast<float>();
  s.optimizer = OptimizerState<float>::fresh(s.params);
  return s;
}

TrainingResult train(const TrainingSet& data, const TrainingConfig& cfg, TrainingState start,
                     const EpochCallback& on_epoch) {
  TrainingResult result{std::move(start), {}};
  auto& st = result.state;
  const ArchitectureSpec arch = st.params.arch;
  cfg.validate(arch);
  const int steps = cfg.samples_per_subepoch / cfg.batch_size;

  for (int epoch = st.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    Rng rng(seq);
    const RmsPropHyper hyper{learning_rate(cfg, epoch), cfg.momentum, cfg.rms_decay, cfg.epsilon};
    const std::size_t first = result.subepoch_loss.size();
    for (int sub = 0; sub < cfg.subepochs_per_epoch; ++sub) {
      double sum = 0.0;
      for (int step = 0; step < steps; ++step) {
        const auto blocks = sample_training_batch(data, arch, cfg, static_cast<std::size_t>(cfg.batch_size), rng);
        std::vector<Sample<float>> batch;
        batch.reserve(blocks.size());
        for (const auto& b : blocks) batch.push_back(to_sample<float>(b, arch));
        auto g = backward<float>(st.params, batch);
        rmsprop_step(st.params, g.gradients, st.optimizer, hyper);
        sum += g.loss;
      }
      result.subepoch_loss.push_back(sum / steps);
    }
    st.epochs_done = epoch;
    if (on_epoch)
      on_epoch(st, std::span<const double>(result.subepoch_loss).subspan(first));
  }
  return result;
}

template <typename Scalar>
Volume3D predict_volume(const NetworkParams<Scalar>& params, const Volume3D& ct, int infer_subvol) {
  const auto& arch = params.arch;
  const int out = output_side(arch, infer_subvol);
  const int ctx = context_side(arch, out);
  const int half_margin = arch.margin() / 2;

  Volume3D prob = ct.like(VolumeKind::Probability);
  for (long tz = 0; tz < ct.nz(); tz += out)
    for (long ty = 0; ty < ct.ny(); ty += out)
      for (long tx = 0; tx < ct.nx(); tx += out) {
        const Index3 tile{tx, ty, tz};
        Index3 main_origin{}, ctx_origin{};
        for (int a = 0; a < 3; ++a) {
          main_origin[a] = tile[a] - half_margin;
          ctx_origin[a] = main_origin[a] + context_offset(arch);
        }
        const auto main_in = to_input<Scalar>(extract_block(ct, main_origin, {infer_subvol, infer_subvol, infer_subvol}), arch);
        FeatureMap<Scalar> ctx_in;
        if (arch.dual_path) ctx_in = to_input<Scalar>(extract_block(ct, ctx_origin, {ctx, ctx, ctx}), arch);
        const auto r = forward(params, main_in, ctx_in);
        for (long z = 0; z < out && tz + z < ct.nz(); ++z)
          for (long y = 0; y < out && ty + y < ct.ny(); ++y)
            for (long x = 0; x < out && tx + x < ct.nx(); ++x) {
              const double p = static_cast<double>(r.probabilities.data(1, x + out * (y + out * z)));
              prob(tx + x, ty + y, tz + z) = std::clamp(p, 0.0, 1.0);
            }
      }
  return prob;
}

// ---------------------------------------------------------------------------
// Instantiations

#define ESOSEG_FCNN_INSTANTIATE(S)                                                                              \
  template struct NetworkParams<S>;                                                                             \
  template FeatureMap<S> to_input<S>(const Volume3D&, const ArchitectureSpec&);                                 \
  template FeatureMap<S> conv3d_valid<S>(const FeatureMap<S>&, const Layer<S>&);                                \
  template void prelu_inplace<S>(Matrix<S>&, const Vector<S>&);                                                 \
  template ForwardResult<S> forward<S>(const NetworkParams<S>&, const FeatureMap<S>&, const FeatureMap<S>&);    \
  template double loss<S>(const FeatureMap<S>&, const Eigen::ArrayXi&);                                         \
  template GradientResult<S> backward<S>(const NetworkParams<S>&, std::span<const Sample<S>>);                  \
  template void rmsprop_update<S>(Eigen::Map<Vector<S>>, Eigen::Map<const Vector<S>>, Eigen::Map<Vector<S>>,    \
                                  Eigen::Map<Vector<S>>, const RmsPropHyper&);                                  \
  template void rmsprop_step<S>(NetworkParams<S>&, const NetworkParams<S>&, OptimizerState<S>&,                 \
                                const RmsPropHyper&);                                                           \
  template Sample<S> to_sample<S>(const SampledBlock&, const ArchitectureSpec&);                                \
  template Volume3D predict_volume<S>(const NetworkParams<S>&, const Volume3D&, int);

ESOSEG_FCNN_INSTANTIATE(float)
ESOSEG_FCNN_INSTANTIATE(double)
#undef ESOSEG_FCNN_INSTANTIATE

template NetworkParams<float> NetworkParams<double>::cast<float>() const;
template NetworkParams<double> NetworkParams<float>::cast<double>() const;
template NetworkParams<float> NetworkParams<float>::cast<float>() const;
template NetworkParams<double> NetworkParams<double>::cast<double>() const;

}  // namespace esoseg::fcnn
