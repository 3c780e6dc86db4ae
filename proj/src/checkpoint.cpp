#include "esoseg/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace esoseg::fcnn {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMagic = "esoseg-checkpoint 1";

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? " " : "") << v[i];
  return s.str();
}

std::vector<int> parse_ints(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  std::vector<int> out;
  int v;
  while (in >> v) out.push_back(v);
  if (!in.eof()) throw DataError("malformed checkpoint value for " + key);
  return out;
}

// File order is out x in x kz x ky x kx; memory order is (out, offset * in + in_channel).
void write_layer(std::ostream& out, const Layer<float>& l) {
  const int k3 = l.kernel * l.kernel * l.kernel;
  std::vector<float> buf;
  buf.reserve(l.weights.size() + l.bias.size() + l.slopes.size());
  for (int o = 0; o < l.out_channels(); ++o)
    for (int c = 0; c < l.in_channels; ++c)
      for (int off = 0; off < k3; ++off) buf.push_back(l.weights(o, off * l.in_channels + c));
  buf.insert(buf.end(), l.bias.data(), l.bias.data() + l.bias.size());
  buf.insert(buf.end(), l.slopes.data(), l.slopes.data() + l.slopes.size());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_layer(std::istream& in, Layer<float>& l) {
  const int k3 = l.kernel * l.kernel * l.kernel;
  std::vector<float> buf(l.weights.size() + l.bias.size() + l.slopes.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw DataError("checkpoint payload is truncated");
  std::size_t i = 0;
  for (int o = 0; o < l.out_channels(); ++o)
    for (int c = 0; c < l.in_channels; ++c)
      for (int off = 0; off < k3; ++off) l.weights(o, off * l.in_channels + c) = buf[i++];
  for (long b = 0; b < l.bias.size(); ++b) l.bias[b] = buf[i++];
  for (long s = 0; s < l.slopes.size(); ++s) l.slopes[s] = buf[i++];
}

template <typename F>
void each_layer(NetworkParams<float>& p, F&& f) {
  for (auto* path : {&p.main_path, &p.context_path, &p.head})
    for (auto& l : *path) f(l);
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainingState& state, std::uint64_t seed, bool with_optimizer_state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  const auto& a = state.params.arch;
  std::ostringstream header;
  header.precision(17);
  header << kMagic << '\n'
         << "conv_kernels = " << join(a.conv_kernels) << '\n'
         << "kernel_size = " << a.kernel_size << '\n'
         << "fc_widths = " << join(a.fc_widths) << '\n'
         << "n_classes = " << a.n_classes << '\n'
         << "dual_path = " << (a.dual_path ? 1 : 0) << '\n'
         << "input_shift = " << a.input_shift << '\n'
         << "input_scale = " << a.input_scale << '\n'
         << "seed = " << seed << '\n'
         << "epoch = " << state.epochs_done << '\n'
         << "optimizer_state = " << (with_optimizer_state ? 1 : 0) << '\n'
         << "parameters = " << state.params.parameter_count() << '\n'
         << "end_header\n";
  out << header.str();

  auto dump = [&](const NetworkParams<float>& p) {
    auto copy = p;
    each_layer(copy, [&](const Layer<float>& l) { write_layer(out, l); });
  };
  dump(state.params);
  if (with_optimizer_state) {
    dump(state.optimizer.cache);
    dump(state.optimizer.velocity);
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw DataError("not an esoseg checkpoint: " + path.string());

  std::map<std::string, std::string> keys;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      terminated = true;
      break;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw DataError("malformed checkpoint header line: " + line);
    keys[line.substr(0, eq)] = line.substr(eq + 3);
  }
  if (!terminated) throw DataError("checkpoint header is not terminated");
  auto get = [&](const char* k) -> const std::string& {
    auto it = keys.find(k);
    if (it == keys.end()) throw DataError(std::string("checkpoint header lacks ") + k);
    return it->second;
  };

  ArchitectureSpec arch;
  try {
    arch.conv_kernels = parse_ints("conv_kernels", get("conv_kernels"));
    arch.kernel_size = std::stoi(get("kernel_size"));
    arch.fc_widths = parse_ints("fc_widths", get("fc_widths"));
    arch.n_classes = std::stoi(get("n_classes"));
    arch.dual_path = std::stoi(get("dual_path")) != 0;
    arch.input_shift = std::stod(get("input_shift"));
    arch.input_scale = std::stod(get("input_scale"));
  } catch (const std::logic_error&) {
    throw DataError("malformed architecture in checkpoint " + path.string());
  }
  arch.validate();

  Checkpoint ck;
  ck.seed = std::stoull(get("seed"));
  ck.has_optimizer_state = get("optimizer_state") == "1";
  ck.state.params = init_params(arch, 0).cast<float>();
  ck.state.epochs_done = std::stoi(get("epoch"));
  if (std::to_string(ck.state.params.parameter_count()) != get("parameters"))
    throw DataError("checkpoint parameter count does not match its architecture");

  each_layer(ck.state.params, [&](Layer<float>& l) { read_layer(in, l); });
  ck.state.optimizer = OptimizerState<float>::fresh(ck.state.params);
  if (ck.has_optimizer_state) {
    each_layer(ck.state.optimizer.cache, [&](Layer<float>& l) { read_layer(in, l); });
    each_layer(ck.state.optimizer.velocity, [&](Layer<float>& l) { read_layer(in, l); });
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in checkpoint " + path.string());
  if (!ck.state.params.all_finite()) throw DataError("checkpoint contains non-finite parameters");
  return ck;
}

}  // namespace esoseg::fcnn
