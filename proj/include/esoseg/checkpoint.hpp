// Model checkpoint files.
//
// Layout: a text header terminated by the line "end_header", then raw
// little-endian float32 tensors.
//
//   esoseg-checkpoint 1
//   conv_kernels = 4 4 4 8 8 8 12 12 12
//   kernel_size = 3
//   fc_widths = 32 16 8
//   n_classes = 2
//   dual_path = 1
//   input_shift = 0
//   input_scale = 100
//   seed = 7
//   epoch = 3
//   optimizer_state = 1
//   parameters = 33452
//   end_header
//
// Tensors follow in declaration order: main path layers, context path layers
// (dual-path only), fully-connected layers, classification layer; within a
// layer weights (out x in x kz x ky x kx, kx fastest), bias, PReLU slopes.
// With optimizer_state = 1 the same sequence is repeated for the RMSprop
// cache and then the velocity.
#pragma once

#include "esoseg/fcnn.hpp"

#include <filesystem>

namespace esoseg::fcnn {

struct Checkpoint {
  TrainingState state;
  std::uint64_t seed = 0;
  bool has_optimizer_state = false;
};

void save_checkpoint(const std::filesystem::path& path, const TrainingState& state, std::uint64_t seed,
                     bool with_optimizer_state = true);

/// Without stored optimizer state the returned state carries a fresh one.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace esoseg::fcnn
