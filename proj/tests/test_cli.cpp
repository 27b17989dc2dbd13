#include "doctest.h"

#include "retrolab/binary_io.hpp"
#include "retrolab/train.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace retrolab;

namespace {

struct Sandbox {
  fs::path dir;

  explicit Sandbox(const std::string& name) : dir(fs::temp_directory_path() / ("retrolab_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }

  int run(const std::string& args) const {
    const std::string cmd = "cd '" + dir.string() + "' && '" RETROLAB_CLI "' " + args + " > out.txt 2> err.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string text(const std::string& name) const {
    std::ifstream in(dir / name);
    return {std::istreambuf_iterator<char>(in), {}};
  }
};

const char* kTiny =
    "model_layers=2\nmodel_width=16\nmodel_heads=2\nmodel_ffn_mult=2\nmodel_cca=2\nbatch=4\nlr_max=3e-3\n"
    "warmup_samples=8\neval_interval=4\neval_docs=2\n";

}  // namespace

TEST_CASE("cli: usage errors exit 2, failures exit 1") {
  Sandbox s("codes");
  CHECK(s.run("") == 2);
  CHECK(s.run("no-such-command") == 2);
  CHECK(s.run("pretrain --out x") == 2);
  CHECK(s.run("gen-qa --corpus . --out q.txt") == 1);
  CHECK(s.text("err.txt").find("error:") != std::string::npos);
  CHECK(s.run("--help") == 0);
}

TEST_CASE("cli: manifests and resume") {
  Sandbox s("resume");
  std::ofstream(s.dir / "run.cfg") << kTiny;
  REQUIRE(s.run("gen-corpus --out c --facts 20 --docs 60 --test-docs 4") == 0);
  const auto m = s.text("c/manifest.json");
  CHECK(m.find("\"subcommand\": \"gen-corpus\"") != std::string::npos);
  CHECK(m.find("\"tool_version\"") != std::string::npos);

  REQUIRE(s.run("pretrain --train c/train.txt --test c/test.txt --out base --config run.cfg --steps 8") == 0);
  const auto full = read_file(s.dir / "base/model.ckpt");
  CHECK(s.text("out.txt").find("beta2=0.98") != std::string::npos);

  // A changed configuration is refused; the run directory is left alone.
  CHECK(s.run("pretrain --train c/train.txt --test c/test.txt --out base --config run.cfg --steps 8 --set "
              "lr_max=1e-3") == 1);
  CHECK(s.text("err.txt").find("manifest mismatch") != std::string::npos);
  CHECK(read_file(s.dir / "base/model.ckpt") == full);

  // An interrupted run picks up from its saved state and ends identically.
  REQUIRE(s.run("pretrain --train c/train.txt --test c/test.txt --out half --config run.cfg --steps 8 --stop-at 4") ==
          0);
  CHECK_FALSE(fs::exists(s.dir / "half/model.ckpt"));
  CHECK(load_train_state(s.dir / "half/state").step == 4);
  REQUIRE(s.run("pretrain --train c/train.txt --test c/test.txt --out half --config run.cfg --steps 8") == 0);
  CHECK(s.text("out.txt").find("resuming from step 4") != std::string::npos);
  CHECK(read_file(s.dir / "half/model.ckpt") == full);
  CHECK(read_file(s.dir / "half/metrics.csv") == read_file(s.dir / "base/metrics.csv"));
}
