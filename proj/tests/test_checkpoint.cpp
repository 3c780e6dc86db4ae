#include "esoseg/checkpoint.hpp"
#include "testing.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace esoseg;
using namespace esoseg::fcnn;

namespace {

bool same_tensors(const NetworkParams<float>& a, const NetworkParams<float>& b) {
  std::vector<Vector<float>> ta;
  a.for_each_tensor([&](const std::string&, Eigen::Map<const Vector<float>> t) { ta.emplace_back(t); });
  std::size_t i = 0;
  bool same = true;
  b.for_each_tensor([&](const std::string&, Eigen::Map<const Vector<float>> t) {
    same = same && i < ta.size() && t == ta[i];
    ++i;
  });
  return same && i == ta.size();
}

TrainingState perturbed_state(const ArchitectureSpec& arch) {
  auto st = initial_state(arch, 9);
  st.epochs_done = 3;
  float v = 0.5f;
  st.optimizer.cache.for_each_tensor([&](const std::string&, Eigen::Map<Vector<float>> t) { t.setConstant(v += 0.25f); });
  st.optimizer.velocity.for_each_tensor([&](const std::string&, Eigen::Map<Vector<float>> t) { t.setConstant(-v); });
  return st;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir;
  for (bool dual : {true, false}) {
    auto arch = ArchitectureSpec::tiny();
    arch.dual_path = dual;
    arch.input_shift = -12.5;
    const auto st = perturbed_state(arch);

    save_checkpoint(dir / "full.bin", st, 7);
    const auto full = load_checkpoint(dir / "full.bin");
    CHECK(full.seed == 7);
    CHECK(full.has_optimizer_state);
    CHECK(full.state.epochs_done == 3);
    CHECK(full.state.params.arch == arch);
    CHECK(same_tensors(full.state.params, st.params));
    CHECK(same_tensors(full.state.optimizer.cache, st.optimizer.cache));
    CHECK(same_tensors(full.state.optimizer.velocity, st.optimizer.velocity));

    save_checkpoint(dir / "lean.bin", st, 7, false);
    const auto lean = load_checkpoint(dir / "lean.bin");
    CHECK_FALSE(lean.has_optimizer_state);
    CHECK(same_tensors(lean.state.params, st.params));
    CHECK(std::filesystem::file_size(dir / "lean.bin") < std::filesystem::file_size(dir / "full.bin"));
  }
}

TEST_CASE("checkpoint header is readable text") {
  testing::TempDir dir;
  const auto st = initial_state(ArchitectureSpec::tiny(), 1);
  save_checkpoint(dir / "c.bin", st, 1);
  const auto text = testing::slurp(dir / "c.bin");
  CHECK(text.rfind("esoseg-checkpoint 1\n", 0) == 0);
  CHECK(text.find("conv_kernels = 4 4 4 8 8 8 12 12 12\n") != std::string::npos);
  CHECK(text.find("parameters = " + std::to_string(st.params.parameter_count()) + "\n") != std::string::npos);
}

TEST_CASE("damaged checkpoints are rejected") {
  testing::TempDir dir;
  const auto st = initial_state(ArchitectureSpec::tiny(), 1);
  save_checkpoint(dir / "c.bin", st, 1);
  const auto bytes = testing::slurp(dir / "c.bin");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  CHECK_THROWS_AS(load_checkpoint(write("trunc.bin", bytes.substr(0, bytes.size() - 5))), DataError);
  CHECK_THROWS_AS(load_checkpoint(write("extra.bin", bytes + "xyz")), DataError);
  CHECK_THROWS_AS(load_checkpoint(write("magic.bin", "not a checkpoint\n")), DataError);
  std::string wrong = bytes;
  wrong.replace(wrong.find("fc_widths = 32 16 8"), 19, "fc_widths = 32 16 9");
  CHECK_THROWS_AS(load_checkpoint(write("arch.bin", wrong)), DataError);
  std::string nohdr = bytes;
  nohdr.replace(nohdr.find("end_header"), 10, "end_hexder");
  CHECK_THROWS_AS(load_checkpoint(write("hdr.bin", nohdr)), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), DataError);
}
