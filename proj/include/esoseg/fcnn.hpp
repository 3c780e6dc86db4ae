// Dual-path 3D fully-convolutional network: forward/backward passes,
// RMSprop training and tiled dense inference.
//
// Feature maps are stored as (channels x voxels) matrices with x-fastest
// voxel order, so a valid 3D convolution is an im2col gather followed by one
// GEMM. Everything numeric is templated on the scalar: training runs in
// float, gradient checks in double.
#pragma once

#include "esoseg/volume.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace esoseg::fcnn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

struct ArchitectureSpec {
  std::vector<int> conv_kernels{25, 25, 25, 50, 50, 50, 75, 75, 75};
  int kernel_size = 3;
  std::vector<int> fc_widths{400, 200, 150};
  int n_classes = 2;
  bool dual_path = true;
  /// Network input is (HU - input_shift) / input_scale.
  double input_shift = 0.0;
  double input_scale = 100.0;

  static ArchitectureSpec full() { return {}; }
  /// Desk-scale preset: kernels 4,4,4,8,8,8,12,12,12 and FC 32,16,8.
  static ArchitectureSpec tiny();

  /// Total per-axis shrink of one convolutional path (18 for nine 3^3 layers).
  int margin() const { return static_cast<int>(conv_kernels.size()) * (kernel_size - 1); }
  int receptive_field() const { return margin() + 1; }

  void validate() const;
  bool operator==(const ArchitectureSpec&) const = default;
};

/// Output block side produced by a main input of side `main_side`.
int output_side(const ArchitectureSpec& arch, int main_side);
/// Side of the full-resolution context block matching an output block side.
int context_side(const ArchitectureSpec& arch, int out_side);
/// Offset of the context block's low corner relative to the main block's.
int context_offset(const ArchitectureSpec& arch);

/// One convolutional layer. Weights are (out x k^3*in); column index is
/// offset * in + in_channel with offset = dx + k * (dy + k * dz).
template <typename Scalar>
struct Layer {
  int kernel = 3;
  int in_channels = 1;
  Matrix<Scalar> weights;
  Vector<Scalar> bias;
  Vector<Scalar> slopes;  // empty for the classification layer

  int out_channels() const { return static_cast<int>(weights.rows()); }
  bool has_prelu() const { return slopes.size() > 0; }
};

/// All trainable tensors. Layers are ordered main path, context path (when
/// dual), fully-connected 1^3 layers, classification layer.
template <typename Scalar>
struct NetworkParams {
  ArchitectureSpec arch;
  std::vector<Layer<Scalar>> main_path;
  std::vector<Layer<Scalar>> context_path;
  std::vector<Layer<Scalar>> head;

  /// Same shapes, all tensors zero.
  NetworkParams zeros_like() const;

  template <typename Other>
  NetworkParams<Other> cast() const;

  /// Visits every tensor in declaration order as a flat array view.
  void for_each_tensor(const std::function<void(const std::string&, Eigen::Map<Vector<Scalar>>)>& f);
  void for_each_tensor(const std::function<void(const std::string&, Eigen::Map<const Vector<Scalar>>)>& f) const;

  std::size_t parameter_count() const;
  bool all_finite() const;
};

/// Spatial block of features: (channels x voxels), x-fastest.
template <typename Scalar>
struct FeatureMap {
  Matrix<Scalar> data;
  Dims3 size{0, 0, 0};

  long voxels() const { return size[0] * size[1] * size[2]; }
  int channels() const { return static_cast<int>(data.rows()); }
};

/// Single-channel feature map of a normalised CT block.
template <typename Scalar>
FeatureMap<Scalar> to_input(const Volume3D& block, const ArchitectureSpec& arch);

/// Zero-mean Gaussian draws with std sqrt(2 / fan_in).
Matrix<double> he_init(long rows, long cols, long fan_in, Rng& rng);

/// Fresh parameters: He-initialised weights, zero biases, PReLU slopes 0.25.
NetworkParams<double> init_params(const ArchitectureSpec& arch, std::uint64_t seed);

template <typename Scalar>
FeatureMap<Scalar> conv3d_valid(const FeatureMap<Scalar>& input, const Layer<Scalar>& layer);

template <typename Scalar>
void prelu_inplace(Matrix<Scalar>& x, const Vector<Scalar>& slopes);

template <typename Scalar>
struct ForwardResult {
  FeatureMap<Scalar> scores;         // n_classes x O^3, pre-softmax
  FeatureMap<Scalar> probabilities;  // softmax over classes per voxel
};

/// `context_in` is ignored when the architecture is single-path.
template <typename Scalar>
ForwardResult<Scalar> forward(const NetworkParams<Scalar>& params, const FeatureMap<Scalar>& main_in,
                              const FeatureMap<Scalar>& context_in);

/// Mean negative log-probability of the labelled class; probabilities are
/// floored at 1e-12 inside the log.
template <typename Scalar>
double loss(const FeatureMap<Scalar>& probabilities, const Eigen::ArrayXi& labels);

template <typename Scalar>
struct Sample {
  FeatureMap<Scalar> main;
  FeatureMap<Scalar> context;
  Eigen::ArrayXi labels;  // one class id per output voxel
};

template <typename Scalar>
struct GradientResult {
  NetworkParams<Scalar> gradients;
  double loss = 0.0;
};

/// Analytic gradient of the batch-mean cross-entropy over all S*V output voxels.
template <typename Scalar>
GradientResult<Scalar> backward(const NetworkParams<Scalar>& params, std::span<const Sample<Scalar>> batch);

// ---------------------------------------------------------------------------
// Optimisation

struct RmsPropHyper {
  double lr = 0.001;
  double momentum = 0.6;
  double decay = 0.9;
  double epsilon = 1e-6;
};

/// cache <- decay*cache + (1-decay)*g^2; velocity <- momentum*velocity -
/// lr*g/sqrt(cache+eps); theta <- theta + velocity.
template <typename Scalar>
void rmsprop_update(Eigen::Map<Vector<Scalar>> theta, Eigen::Map<const Vector<Scalar>> grad,
                    Eigen::Map<Vector<Scalar>> cache, Eigen::Map<Vector<Scalar>> velocity,
                    const RmsPropHyper& hyper);

template <typename Scalar>
struct OptimizerState {
  NetworkParams<Scalar> cache;
  NetworkParams<Scalar> velocity;

  static OptimizerState fresh(const NetworkParams<Scalar>& params) {
    return {params.zeros_like(), params.zeros_like()};
  }
};

/// Throws NumericalError on a non-finite gradient.
template <typename Scalar>
void rmsprop_step(NetworkParams<Scalar>& params, const NetworkParams<Scalar>& grads,
                  OptimizerState<Scalar>& state, const RmsPropHyper& hyper);

// ---------------------------------------------------------------------------
// Training

struct TrainingConfig {
  int epochs = 25;
  int subepochs_per_epoch = 20;
  int samples_per_subepoch = 500;
  int batch_size = 5;
  double lr0 = 0.001;
  int lr_halving_period_epochs = 5;
  int lr_halving_start_epoch = 10;
  double momentum = 0.6;
  double rms_decay = 0.9;
  double epsilon = 1e-6;
  int train_subvol = 27;
  int infer_subvol = 45;
  std::uint64_t seed = 1;

  void validate(const ArchitectureSpec& arch) const;
};

/// Learning rate used during 1-based epoch `epoch`.
double learning_rate(const TrainingConfig& cfg, int epoch);

struct TrainingCase {
  Volume3D ct;    // HU, already preprocessed
  Volume3D mask;  // reference segmentation
};

/// Training cases plus per-case foreground/background voxel lists.
class TrainingSet {
 public:
  explicit TrainingSet(std::vector<TrainingCase> cases);

  std::size_t size() const { return cases_.size(); }
  const TrainingCase& operator[](std::size_t i) const { return cases_[i]; }
  const std::vector<long>& foreground(std::size_t i) const { return fg_[i]; }
  const std::vector<long>& background(std::size_t i) const { return bg_[i]; }

 private:
  std::vector<TrainingCase> cases_;
  std::vector<std::vector<long>> fg_, bg_;
};

/// One drawn training example in volume form (before normalisation).
struct SampledBlock {
  Volume3D main;
  Volume3D context;
  Volume3D labels;
  bool foreground_centered = false;
};

/// Draws `count` examples: uniform case, then a fair coin between a
/// foreground-centred and a background-centred voxel. Cases without
/// foreground always yield background centres.
std::vector<SampledBlock> sample_training_batch(const TrainingSet& data, const ArchitectureSpec& arch,
                                                const TrainingConfig& cfg, std::size_t count, Rng& rng);

template <typename Scalar>
Sample<Scalar> to_sample(const SampledBlock& block, const ArchitectureSpec& arch);

struct TrainingState {
  NetworkParams<float> params;
  OptimizerState<float> optimizer;
  int epochs_done = 0;
};

struct TrainingResult {
  TrainingState state;
  std::vector<double> subepoch_loss;  // mean loss of each subepoch run in this call
};

using EpochCallback = std::function<void(const TrainingState&, std::span<const double> losses)>;

TrainingState initial_state(const ArchitectureSpec& arch, std::uint64_t seed);

/// Runs the remaining epochs of `cfg` starting after `start.epochs_done`.
/// The sampling stream of each epoch is seeded from (cfg.seed, epoch), so a
/// resumed run reproduces an uninterrupted one exactly.
TrainingResult train(const TrainingSet& data, const TrainingConfig& cfg, TrainingState start,
                     const EpochCallback& on_epoch = {});

/// Dense inference: non-overlapping output tiles of side infer_subvol - margin,
/// mirror-padded input blocks. Returns the foreground-class probability.
template <typename Scalar>
Volume3D predict_volume(const NetworkParams<Scalar>& params, const Volume3D& ct, int infer_subvol = 45);

}  // namespace esoseg::fcnn
