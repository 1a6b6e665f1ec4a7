#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "lglab/errors.hpp"
#include "lglab/pipeline.hpp"
#include "lglab/rng.hpp"

using namespace lglab;
using namespace lglab::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lglab_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

std::string validation_message(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

RunConfig tiny_config(const fs::path& dir) {
  RunConfig c;
  c.subjects = 4;
  c.frames_per_subject = 60;
  c.training.latent_dim = 8;
  c.training.epochs = 1;
  c.transfer_frames = 10;
  c.output_dir = dir.string();
  return c;
}

}  // namespace

TEST_CASE("config: defaults, single keys, validation") {
  CHECK(dump_config(parse_config("")) == dump_config(RunConfig{}));
  CHECK(dump_config(parse_config("# only a comment\n\n")) == dump_config(RunConfig{}));
  CHECK(parse_config("latent_dim = 32").training.latent_dim == 32);
  const RunConfig c = parse_config("latent_dim = 12  # trailing comment\nstrategy = per_subject_centered\nseed = 77\n");
  CHECK(c.training.latent_dim == 12);
  CHECK(c.strategy == latent::Strategy::per_subject_centered);
  CHECK(c.seed == 77);

  const std::string gamma = validation_message("gamma = -1");
  CHECK(gamma.find("gamma") != std::string::npos);
  CHECK(gamma.find("gamma > 0") != std::string::npos);

  const std::string unknown = validation_message("tau = 0.9\nwarp_factor = 9\n");
  CHECK(unknown.find("warp_factor") != std::string::npos);
  CHECK(unknown.find(":2") != std::string::npos);
  CHECK(validation_message("tau 0.9").find(":1") != std::string::npos);
  CHECK(validation_message("tau = 0.9\ntau = 0.8").find("duplicate") != std::string::npos);
  CHECK_FALSE(validation_message("latent_dim = twelve").empty());
  CHECK_FALSE(validation_message("tau = 1.5").empty());
  CHECK_FALSE(validation_message("strategy = median").empty());
}

TEST_CASE("config: dump round trips and load reads files") {
  RunConfig c;
  c.tau = 0.9;
  c.training.gamma = 0.125;
  c.training.lr_decoder = 1.0 / 3;
  c.centering = latent::Centering::none;
  c.output_dir = "somewhere/else";
  CHECK(dump_config(parse_config(dump_config(c))) == dump_config(c));
  const fs::path p = scratch("cfg.conf");
  spit(p, dump_config(c));
  CHECK(load_config(p).training.lr_decoder == 1.0 / 3);
  fs::remove(p);
  CHECK_THROWS_AS(load_config(scratch("missing.conf")), ValidationError);
}

TEST_CASE("checkpoint: bit-exact round trip and distinct errors") {
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  const fs::path p = dir / "m.ckpt";
  auto model = vaegan::init_model<float>(vaegan::Architecture{}, 5);
  Rng rng(6);
  for (float& v : model.params.mutable_values("dec.fc.b")) v = static_cast<float>(rng.normal());
  vaegan::TrainingConfig tc;
  tc.gamma = 0.3;
  tc.seed = 42;
  save_checkpoint(model, tc, "rng-state", p);

  const Checkpoint back = load_checkpoint(p, model.arch);
  CHECK(back.model.arch == model.arch);
  CHECK(back.training.gamma == 0.3);
  CHECK(back.training.seed == 42);
  CHECK(back.rng_state == "rng-state");
  REQUIRE(back.model.params.names() == model.params.names());
  for (const auto& [name, t] : model.params) {
    const auto& u = back.model.params.at(name);
    CHECK(u.shape() == t.shape());
    CHECK(std::memcmp(u.data(), t.data(), t.size() * sizeof(float)) == 0);
  }
  // Saving the loaded model reproduces the file byte for byte.
  save_checkpoint(back.model, back.training, back.rng_state, dir / "again.ckpt");
  const std::string bytes = slurp(p);
  CHECK(slurp(dir / "again.ckpt") == bytes);
  CHECK(bytes.compare(0, 8, std::string("LGLAB\0\0\1", 8)) == 0);

  spit(dir / "short.ckpt", bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), TruncatedCheckpointError);
  spit(dir / "stub.ckpt", bytes.substr(0, 12));
  CHECK_THROWS_AS(load_checkpoint(dir / "stub.ckpt"), TruncatedCheckpointError);
  spit(dir / "long.ckpt", bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), ManifestMismatchError);
  std::string magic = bytes;
  magic[0] = 'X';
  spit(dir / "magic.ckpt", magic);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), BadMagicError);
  std::string version = bytes;
  version[7] = 2;
  spit(dir / "version.ckpt", version);
  CHECK_THROWS_AS(load_checkpoint(dir / "version.ckpt"), UnsupportedVersionError);

  vaegan::Architecture other;
  other.latent_dim = 16;
  CHECK_THROWS_AS(load_checkpoint(p, other), ManifestMismatchError);
  fs::remove_all(dir);
}

TEST_CASE("image grid") {
  Image one(3, 2);
  one.at(1, 2) = 0.9;
  CHECK(make_image_grid(std::vector<Image>{one}, 1, 1) == one);

  std::vector<Image> cells;
  Rng rng(7);
  for (int k = 0; k < 4; ++k) {
    Image img(32, 32);
    for (double& v : img.pixels) v = rng.uniform();
    cells.push_back(img);
  }
  const Image g = make_image_grid(cells, 2, 2);
  CHECK(g.width == 65);
  CHECK(g.height == 65);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) CHECK(g.at(r * 33 + i, c * 33 + j) == cells[r * 2 + c].at(i, j));
  for (int k = 0; k < 65; ++k) {
    CHECK(g.at(32, k) == 0.5);
    CHECK(g.at(k, 32) == 0.5);
  }
  CHECK_THROWS_AS(make_image_grid(cells, 3, 2), ValidationError);
  cells[3] = Image(31, 32);
  CHECK_THROWS_AS(make_image_grid(cells, 2, 2), ValidationError);
}

TEST_CASE("stage names") {
  for (Stage s : {Stage::synth, Stage::keyframes, Stage::train, Stage::encode, Stage::attributes,
                  Stage::detect, Stage::report, Stage::all}) {
    CHECK(parse_stage(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_stage("fly"), ValidationError);
}

TEST_CASE("a fixed seed gives byte-identical artifacts") {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  std::ostringstream log, err;
  REQUIRE(run_stage(Stage::all, tiny_config(a), log, err) == kExitOk);
  REQUIRE(run_stage(Stage::all, tiny_config(b), log, err) == kExitOk);
  int compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename();
    CHECK_MESSAGE(slurp(entry.path()) == slurp(b / name), name.string());
    ++compared;
  }
  CHECK(compared >= 12);
  for (const char* f : {files::kLossHistory, files::kLatentTraces, files::kDetections,
                        files::kMatchedFilter, files::kReconstructionGrid, files::kTransferGrid,
                        files::kMetrics}) {
    CHECK_MESSAGE(fs::exists(a / f), f);
  }
  CHECK(fs::exists(a / files::attribute_vector("smile")));
  CHECK(fs::exists(a / files::attribute_vector("yawn")));

  // Stages rerun in isolation from the files on disk.
  REQUIRE(run_stage(Stage::detect, tiny_config(b), log, err) == kExitOk);
  CHECK(slurp(a / files::kDetections) == slurp(b / files::kDetections));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("a schedule without events is an insufficient-support exit") {
  const fs::path dir = scratch("no_events");
  fs::create_directories(dir);
  spit(dir / "empty_schedule.csv", "subject_id,start_frame,end_frame,attribute,intensity\n");
  RunConfig c = tiny_config(dir / "out");
  c.schedule_path = (dir / "empty_schedule.csv").string();
  std::ostringstream log, err;
  CHECK(run_stage(Stage::all, c, log, err) == kExitInsufficientSupport);
  CHECK(err.str().find("lglab attributes") != std::string::npos);
  CHECK(fs::exists(fs::path(c.output_dir) / files::kCheckpoint));  // earlier artifacts are kept
  fs::remove_all(dir);
}

TEST_CASE("run_stage maps validation failures to exit 1") {
  RunConfig c = tiny_config(scratch("bad"));
  c.training.gamma = -1;
  std::ostringstream log, err;
  CHECK(run_stage(Stage::train, c, log, err) == kExitValidation);
  c.training.gamma = 1e-2;
  CHECK(run_stage(Stage::encode, c, log, err) != kExitOk);  // nothing to encode yet
  fs::remove_all(c.output_dir);
}
