#include "lglab/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lglab/csv.hpp"
#include "lglab/errors.hpp"
#include "lglab/keygesture.hpp"
#include "lglab/rng.hpp"
#include "lglab/synthface.hpp"

namespace lglab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

namespace {

struct KeySpec {
  const char* key;
  std::function<void(RunConfig&, std::string_view, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int to_int(std::string_view v, const std::string& where) {
  const long long x = csv::parse_int(v, where);
  if (x < INT32_MIN || x > INT32_MAX) throw ValidationError(where + ": integer out of range");
  return static_cast<int>(x);
}

std::uint64_t to_u64(std::string_view v, const std::string& where) {
  std::uint64_t x = 0;
  const std::string t = trim(v);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), x);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) {
    throw ValidationError(where + ": not an unsigned integer: '" + t + "'");
  }
  return x;
}

std::string real(double v) { return csv::format_real(v); }

template <typename Field>
KeySpec int_key(const char* key, Field field) {
  return {key, [field](RunConfig& c, std::string_view v, const std::string& w) { field(c) = to_int(v, w); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
KeySpec real_key(const char* key, Field field) {
  return {key, [field](RunConfig& c, std::string_view v, const std::string& w) { field(c) = csv::parse_real(v, w); },
          [field](const RunConfig& c) { return real(field(const_cast<RunConfig&>(c))); }};
}

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      int_key("subjects", [](RunConfig& c) -> int& { return c.subjects; }),
      int_key("frames_per_subject", [](RunConfig& c) -> int& { return c.frames_per_subject; }),
      int_key("sprite_size", [](RunConfig& c) -> int& { return c.sprite_size; }),
      real_key("base_noise", [](RunConfig& c) -> double& { return c.base_noise; }),
      {"schedule_path", [](RunConfig& c, std::string_view v, const std::string&) { c.schedule_path = std::string(v); },
       [](const RunConfig& c) { return c.schedule_path; }},
      real_key("tau", [](RunConfig& c) -> double& { return c.tau; }),
      int_key("max_templates", [](RunConfig& c) -> int& { return c.max_templates; }),
      int_key("latent_dim", [](RunConfig& c) -> int& { return c.training.latent_dim; }),
      int_key("feature_layer", [](RunConfig& c) -> int& { return c.training.feature_layer; }),
      real_key("gamma", [](RunConfig& c) -> double& { return c.training.gamma; }),
      real_key("beta", [](RunConfig& c) -> double& { return c.training.beta; }),
      real_key("lr_encoder", [](RunConfig& c) -> double& { return c.training.lr_encoder; }),
      real_key("lr_decoder", [](RunConfig& c) -> double& { return c.training.lr_decoder; }),
      real_key("lr_discriminator", [](RunConfig& c) -> double& { return c.training.lr_discriminator; }),
      {"optimizer",
       [](RunConfig& c, std::string_view v, const std::string& w) {
         if (v == "adam") c.training.optimizer = ad::OptimizerKind::adam;
         else if (v == "sgd") c.training.optimizer = ad::OptimizerKind::sgd;
         else throw ValidationError(w + ": optimizer must be adam or sgd");
       },
       [](const RunConfig& c) { return std::string(c.training.optimizer == ad::OptimizerKind::adam ? "adam" : "sgd"); }},
      real_key("adam_beta1", [](RunConfig& c) -> double& { return c.training.adam_beta1; }),
      real_key("adam_beta2", [](RunConfig& c) -> double& { return c.training.adam_beta2; }),
      int_key("batch_size", [](RunConfig& c) -> int& { return c.training.batch_size; }),
      int_key("epochs", [](RunConfig& c) -> int& { return c.training.epochs; }),
      real_key("holdout_fraction", [](RunConfig& c) -> double& { return c.holdout_fraction; }),
      {"strategy", [](RunConfig& c, std::string_view v, const std::string&) { c.strategy = latent::parse_strategy(v); },
       [](const RunConfig& c) { return std::string(latent::to_string(c.strategy)); }},
      {"centering",
       [](RunConfig& c, std::string_view v, const std::string& w) {
         if (v == "none") c.centering = latent::Centering::none;
         else if (v == "per_subject") c.centering = latent::Centering::per_subject;
         else throw ValidationError(w + ": centering must be none or per_subject");
       },
       [](const RunConfig& c) { return std::string(c.centering == latent::Centering::none ? "none" : "per_subject"); }},
      real_key("epsilon_percentile", [](RunConfig& c) -> double& { return c.epsilon_percentile; }),
      real_key("cos_min", [](RunConfig& c) -> double& { return c.cos_min; }),
      real_key("norm_band_lo", [](RunConfig& c) -> double& { return c.norm_band.lo; }),
      real_key("norm_band_hi", [](RunConfig& c) -> double& { return c.norm_band.hi; }),
      real_key("transfer_alpha", [](RunConfig& c) -> double& { return c.transfer_alpha; }),
      int_key("transfer_frames", [](RunConfig& c) -> int& { return c.transfer_frames; }),
      {"seed", [](RunConfig& c, std::string_view v, const std::string& w) { c.seed = to_u64(v, w); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"output_dir", [](RunConfig& c, std::string_view v, const std::string&) { c.output_dir = std::string(v); },
       [](const RunConfig& c) { return c.output_dir; }},
  };
  return specs;
}

void bound(bool ok, const char* key, const std::string& rule, double got) {
  if (!ok) {
    throw ValidationError("config key '" + std::string(key) + "' must satisfy " + rule +
                          " (got " + real(got) + ")");
  }
}

}  // namespace

void RunConfig::validate() const {
  bound(subjects >= 1, "subjects", "subjects >= 1", subjects);
  bound(frames_per_subject >= 1, "frames_per_subject", "frames_per_subject >= 1", frames_per_subject);
  bound(sprite_size >= 16 && sprite_size % 8 == 0, "sprite_size",
        "sprite_size >= 16 and divisible by 8", sprite_size);
  bound(base_noise >= 0 && base_noise <= 0.5, "base_noise", "0 <= base_noise <= 0.5", base_noise);
  if (schedule_path.empty()) {
    bound(frames_per_subject >= 60, "frames_per_subject",
          "frames_per_subject >= 60 for the generated schedule", frames_per_subject);
  }
  bound(tau >= -1 && tau <= 1, "tau", "-1 <= tau <= 1", tau);
  bound(max_templates >= 1, "max_templates", "max_templates >= 1", max_templates);
  const auto& t = training;
  bound(t.latent_dim >= 1, "latent_dim", "latent_dim >= 1", t.latent_dim);
  bound(t.feature_layer >= 1 && t.feature_layer <= 3, "feature_layer", "1 <= feature_layer <= 3",
        t.feature_layer);
  bound(t.gamma > 0 && std::isfinite(t.gamma), "gamma", "gamma > 0", t.gamma);
  bound(t.beta > 0 && std::isfinite(t.beta), "beta", "beta > 0", t.beta);
  bound(t.lr_encoder >= 0, "lr_encoder", "lr_encoder >= 0", t.lr_encoder);
  bound(t.lr_decoder >= 0, "lr_decoder", "lr_decoder >= 0", t.lr_decoder);
  bound(t.lr_discriminator >= 0, "lr_discriminator", "lr_discriminator >= 0", t.lr_discriminator);
  bound(t.adam_beta1 >= 0 && t.adam_beta1 < 1, "adam_beta1", "0 <= adam_beta1 < 1", t.adam_beta1);
  bound(t.adam_beta2 >= 0 && t.adam_beta2 < 1, "adam_beta2", "0 <= adam_beta2 < 1", t.adam_beta2);
  bound(t.batch_size >= 1, "batch_size", "batch_size >= 1", t.batch_size);
  bound(t.epochs >= 0, "epochs", "epochs >= 0", t.epochs);
  bound(holdout_fraction >= 0 && holdout_fraction < 1, "holdout_fraction",
        "0 <= holdout_fraction < 1", holdout_fraction);
  bound(epsilon_percentile > 0 && epsilon_percentile < 100, "epsilon_percentile",
        "0 < epsilon_percentile < 100", epsilon_percentile);
  bound(cos_min > 0 && cos_min <= 1, "cos_min", "0 < cos_min <= 1", cos_min);
  bound(norm_band.lo > 0, "norm_band_lo", "norm_band_lo > 0", norm_band.lo);
  bound(norm_band.hi >= norm_band.lo, "norm_band_hi", "norm_band_hi >= norm_band_lo", norm_band.hi);
  bound(std::isfinite(transfer_alpha), "transfer_alpha", "a finite transfer_alpha", transfer_alpha);
  bound(transfer_frames >= 1, "transfer_frames", "transfer_frames >= 1", transfer_frames);
  if (output_dir.empty()) throw ValidationError("config key 'output_dir' must not be empty");
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(where + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ValidationError(where + ": missing key before '='");
    const auto& specs = key_specs();
    const auto it = std::find_if(specs.begin(), specs.end(),
                                 [&](const KeySpec& s) { return key == s.key; });
    if (it == specs.end()) throw ValidationError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ValidationError(where + ": duplicate key '" + key + "'");
    it->set(config, value, where + " (" + key + ")");
  }
  config.validate();
  return config;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.string());
}

std::string dump_config(const RunConfig& config) {
  std::string out;
  for (const auto& s : key_specs()) out += std::string(s.key) + " = " + s.get(config) + "\n";
  return out;
}

// ------------------------------------------------------------ checkpoint

namespace {

constexpr char kMagicPrefix[7] = {'L', 'G', 'L', 'A', 'B', '\0', '\0'};

json architecture_json(const vaegan::Architecture& a) {
  return {{"image_size", a.image_size}, {"channels", a.channels}, {"kernel", a.kernel},
          {"latent_dim", a.latent_dim}, {"feature_layer", a.feature_layer},
          {"leaky_slope", a.leaky_slope}};
}

vaegan::Architecture architecture_from(const json& j) {
  vaegan::Architecture a;
  a.image_size = j.at("image_size").get<int>();
  a.channels = j.at("channels").get<std::vector<int>>();
  a.kernel = j.at("kernel").get<int>();
  a.latent_dim = j.at("latent_dim").get<int>();
  a.feature_layer = j.at("feature_layer").get<int>();
  a.leaky_slope = j.at("leaky_slope").get<double>();
  return a;
}

json training_json(const vaegan::TrainingConfig& t) {
  return {{"latent_dim", t.latent_dim},
          {"feature_layer", t.feature_layer},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"lr_encoder", t.lr_encoder},
          {"lr_decoder", t.lr_decoder},
          {"lr_discriminator", t.lr_discriminator},
          {"optimizer", t.optimizer == ad::OptimizerKind::adam ? "adam" : "sgd"},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"gamma", t.gamma},
          {"beta", t.beta},
          {"seed", t.seed}};
}

vaegan::TrainingConfig training_from(const json& j) {
  vaegan::TrainingConfig t;
  t.latent_dim = j.at("latent_dim").get<int>();
  t.feature_layer = j.at("feature_layer").get<int>();
  t.batch_size = j.at("batch_size").get<int>();
  t.epochs = j.at("epochs").get<int>();
  t.lr_encoder = j.at("lr_encoder").get<double>();
  t.lr_decoder = j.at("lr_decoder").get<double>();
  t.lr_discriminator = j.at("lr_discriminator").get<double>();
  t.optimizer = j.at("optimizer").get<std::string>() == "sgd" ? ad::OptimizerKind::sgd
                                                              : ad::OptimizerKind::adam;
  t.adam_beta1 = j.at("adam_beta1").get<double>();
  t.adam_beta2 = j.at("adam_beta2").get<double>();
  t.gamma = j.at("gamma").get<double>();
  t.beta = j.at("beta").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const vaegan::ModelTriple<float>& model,
                     const vaegan::TrainingConfig& training, const std::string& rng_state,
                     const fs::path& path) {
  json arrays = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : model.params) {
    arrays.push_back({{"name", name}, {"shape", tensor.shape()}, {"offset", offset},
                      {"count", tensor.size()}});
    offset += tensor.size() * sizeof(float);
  }
  const json manifest = {{"format", "lglab-checkpoint"},
                         {"version", kCheckpointVersion},
                         {"architecture", architecture_json(model.arch)},
                         {"training", training_json(training)},
                         {"rng_state", rng_state},
                         {"arrays", arrays},
                         {"payload_bytes", offset}};
  const std::string header = manifest.dump();

  std::string bytes(kMagicPrefix, sizeof kMagicPrefix);
  bytes.push_back(static_cast<char>(kCheckpointVersion));
  put_u64(bytes, header.size());
  bytes += header;
  for (const auto& [name, tensor] : model.params) {
    for (const float v : tensor.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* data = reinterpret_cast<const unsigned char*>(raw.data());
  const std::string where = "checkpoint " + path.string();

  if (raw.size() < 8 || std::memcmp(raw.data(), kMagicPrefix, sizeof kMagicPrefix) != 0) {
    throw BadMagicError(where + ": bad magic");
  }
  if (data[7] != kCheckpointVersion) {
    throw UnsupportedVersionError(where + ": unsupported version " + std::to_string(data[7]));
  }
  if (raw.size() < 16) throw TruncatedCheckpointError(where + ": truncated header");
  const std::uint64_t header_len = get_u64(data + 8);
  if (header_len > raw.size() - 16) throw TruncatedCheckpointError(where + ": truncated manifest");
  json manifest;
  try {
    manifest = json::parse(raw.substr(16, header_len));
  } catch (const json::exception& e) {
    throw ManifestMismatchError(where + ": unreadable manifest: " + e.what());
  }

  Checkpoint ck;
  try {
    ck.model.arch = architecture_from(manifest.at("architecture"));
    ck.training = training_from(manifest.at("training"));
    ck.rng_state = manifest.at("rng_state").get<std::string>();
    const std::size_t payload_start = 16 + header_len;
    const std::uint64_t payload_bytes = manifest.at("payload_bytes").get<std::uint64_t>();
    if (raw.size() - payload_start < payload_bytes) {
      throw TruncatedCheckpointError(where + ": payload has " +
                                     std::to_string(raw.size() - payload_start) + " of " +
                                     std::to_string(payload_bytes) + " bytes");
    }
    if (raw.size() - payload_start > payload_bytes) {
      throw ManifestMismatchError(where + ": trailing bytes after payload");
    }
    std::uint64_t expected_offset = 0;
    for (const auto& entry : manifest.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<ad::Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("count").get<std::uint64_t>();
      if (offset != expected_offset || count != ad::shape_size(shape) ||
          offset + count * 4 > payload_bytes) {
        throw ManifestMismatchError(where + ": inconsistent entry for '" + name + "'");
      }
      expected_offset += count * 4;
      ad::Tensor<float> t(shape);
      const unsigned char* p = data + payload_start + offset;
      for (std::uint64_t i = 0; i < count; ++i, p += 4) {
        const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                   static_cast<std::uint32_t>(p[1]) << 8 |
                                   static_cast<std::uint32_t>(p[2]) << 16 |
                                   static_cast<std::uint32_t>(p[3]) << 24;
        t[i] = std::bit_cast<float>(bits);
      }
      ck.model.params.add(name, std::move(t));
    }
    if (expected_offset != payload_bytes) {
      throw ManifestMismatchError(where + ": arrays do not cover the payload");
    }
  } catch (const json::exception& e) {
    throw ManifestMismatchError(where + ": malformed manifest: " + e.what());
  } catch (const ValidationError& e) {
    throw ManifestMismatchError(where + ": " + e.what());
  }
  return ck;
}

Checkpoint load_checkpoint(const fs::path& path, const vaegan::Architecture& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.model.arch == expected)) {
    throw ManifestMismatchError("checkpoint " + path.string() +
                                ": stored architecture differs from the expected one");
  }
  const auto reference = vaegan::init_model<float>(expected, 0);
  if (reference.params.names() != ck.model.params.names()) {
    throw ManifestMismatchError("checkpoint " + path.string() + ": parameter names differ");
  }
  for (const auto& [name, tensor] : reference.params) {
    if (tensor.shape() != ck.model.params.at(name).shape()) {
      throw ManifestMismatchError("checkpoint " + path.string() + ": shape of '" + name +
                                  "' is " + ad::shape_string(ck.model.params.at(name).shape()) +
                                  ", expected " + ad::shape_string(tensor.shape()));
    }
  }
  return ck;
}

// ------------------------------------------------------------ image grid

Image make_image_grid(std::span<const Image> images, int rows, int cols) {
  if (rows < 1 || cols < 1) throw ValidationError("image grid needs rows, cols >= 1");
  if (images.size() != static_cast<std::size_t>(rows) * cols) {
    throw ValidationError("image grid: " + std::to_string(images.size()) + " images for " +
                          std::to_string(rows) + "x" + std::to_string(cols) + " cells");
  }
  const int w = images.front().width, h = images.front().height;
  for (const Image& img : images) {
    if (img.width != w || img.height != h) throw ValidationError("image grid: mixed image sizes");
  }
  Image grid(cols * w + (cols - 1), rows * h + (rows - 1), 0.5);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Image& src = images[static_cast<std::size_t>(r) * cols + c];
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) grid.at(r * (h + 1) + i, c * (w + 1) + j) = src.at(i, j);
      }
    }
  }
  return grid;
}

void export_image_grid(std::span<const Image> images, int rows, int cols, const fs::path& path) {
  write_pgm(make_image_grid(images, rows, cols), path);
}

// ---------------------------------------------------------------- stages

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::synth: return "synth";
    case Stage::keyframes: return "keyframes";
    case Stage::train: return "train";
    case Stage::encode: return "encode";
    case Stage::attributes: return "attributes";
    case Stage::detect: return "detect";
    case Stage::report: return "report";
    case Stage::all: return "all";
  }
  return "?";
}

Stage parse_stage(std::string_view text) {
  for (Stage s : {Stage::synth, Stage::keyframes, Stage::train, Stage::encode, Stage::attributes,
                  Stage::detect, Stage::report, Stage::all}) {
    if (to_string(s) == text) return s;
  }
  throw ValidationError("unknown subcommand '" + std::string(text) + "'");
}

std::string files::attribute_vector(std::string_view attribute) {
  return "attribute_" + std::string(attribute) + ".csv";
}

namespace {

// Seed-stream tags so each consumer of the run seed draws independently.
constexpr std::uint64_t kSplitStream = 0x5B117;
constexpr std::uint64_t kSubjectStream = 0x5B7EC7;
constexpr std::uint64_t kTrainStream = 0x7EA1;
constexpr std::uint64_t kTransferStream = 0x7EA5F;

constexpr int kGridColumns = 8;

using FrameKey = std::pair<int, int>;  // (subject, frame)

fs::path out_path(const RunConfig& c, const std::string& name) {
  return fs::path(c.output_dir) / name;
}

fs::path frame_path(const RunConfig& c, int subject, int frame) {
  return fs::path(c.output_dir) / files::kFramesDir / synth::sprite_filename(subject, frame);
}

Image load_frame(const RunConfig& c, int subject, int frame) {
  const fs::path p = frame_path(c, subject, frame);
  if (!fs::exists(p)) throw ValidationError("missing frame " + p.string() + " (run synth first)");
  return read_pgm(p);
}

synth::SessionSchedule load_schedule(const RunConfig& c) {
  return synth::read_schedule_csv(out_path(c, files::kSchedule), c.subjects,
                                  c.frames_per_subject, c.sprite_size);
}

keygesture::Box subject_box(int size) {
  // Face interior: brows to chin, cheek to cheek, on a 32-pixel sprite.
  auto scale = [size](double v) { return static_cast<int>(std::lround(v * size / 32.0)); };
  return {scale(7), scale(8), scale(18), scale(20)};
}

vaegan::TrainingConfig training_config(const RunConfig& c) {
  vaegan::TrainingConfig t = c.training;
  t.seed = mix_seed(c.seed, kTrainStream);
  return t;
}

struct Split {
  std::vector<FrameKey> train, holdout;
};

Split read_split(const RunConfig& c) {
  Split s;
  for (const auto& row : csv::read_rows(out_path(c, files::kSplit), "subject_id,frame_index,split")) {
    if (row.size() != 3) throw ValidationError("train_split.csv: expected 3 fields");
    const FrameKey k{static_cast<int>(csv::parse_int(row[0], "subject_id")),
                     static_cast<int>(csv::parse_int(row[1], "frame_index"))};
    if (row[2] == "train") s.train.push_back(k);
    else if (row[2] == "holdout") s.holdout.push_back(k);
    else throw ValidationError("train_split.csv: unknown split '" + row[2] + "'");
  }
  return s;
}

std::vector<Image> load_frames(const RunConfig& c, const std::vector<FrameKey>& keys) {
  std::vector<Image> out;
  out.reserve(keys.size());
  for (const auto& [s, f] : keys) out.push_back(load_frame(c, s, f));
  return out;
}

std::vector<vaegan::LatentCode> mean_codes(const std::vector<vaegan::LatentPosterior>& post) {
  std::vector<vaegan::LatentCode> codes;
  codes.reserve(post.size());
  for (const auto& p : post) codes.push_back({p.mu});
  return codes;
}

vaegan::ModelTriple<float> load_model(const RunConfig& c) {
  return load_checkpoint(out_path(c, files::kCheckpoint), training_config(c).architecture(c.sprite_size))
      .model;
}

std::map<FrameKey, synth::GroundTruthRow> ground_truth_map(const RunConfig& c) {
  std::map<FrameKey, synth::GroundTruthRow> out;
  for (auto& row : synth::read_ground_truth(out_path(c, files::kGroundTruth))) {
    out[{row.subject_id, row.frame_index}] = row;
  }
  return out;
}

// Subjects whose frames estimate the attribute vectors, and those that
// evaluate them.
struct SubjectSplit {
  std::set<int> estimate, evaluate;
};

SubjectSplit read_subject_split(const RunConfig& c) {
  SubjectSplit s;
  for (const auto& row : csv::read_rows(out_path(c, files::kSubjectSplit), "subject_id,role")) {
    if (row.size() != 2) throw ValidationError("subject_split.csv: expected 2 fields");
    const int id = static_cast<int>(csv::parse_int(row[0], "subject_id"));
    if (row[1] == "estimate") s.estimate.insert(id);
    else if (row[1] == "evaluate") s.evaluate.insert(id);
    else throw ValidationError("subject_split.csv: unknown role '" + row[1] + "'");
  }
  return s;
}

std::vector<latent::AttributeVector> read_attribute_vectors(const RunConfig& c) {
  std::vector<latent::AttributeVector> out;
  for (const auto a : synth::kAllAttributes) {
    out.push_back(latent::read_attribute_vector(out_path(c, files::attribute_vector(synth::to_string(a)))));
  }
  return out;
}

// Held-out neutral frames of evaluation subjects, never seen in training.
std::vector<FrameKey> transfer_frames(const RunConfig& c) {
  const auto truth = ground_truth_map(c);
  const auto split = read_split(c);
  const std::set<FrameKey> trained(split.train.begin(), split.train.end());
  const auto subjects = read_subject_split(c);
  std::vector<FrameKey> pool;
  for (const auto& [key, row] : truth) {
    if (row.neutral() && subjects.evaluate.contains(key.first) && !trained.contains(key)) {
      pool.push_back(key);
    }
  }
  Rng rng(mix_seed(c.seed, kTransferStream));
  shuffle(pool, rng);
  if (pool.size() > static_cast<std::size_t>(c.transfer_frames)) pool.resize(c.transfer_frames);
  return pool;
}

}  // namespace

void run_synth(const RunConfig& c, std::ostream& log) {
  fs::create_directories(fs::path(c.output_dir) / files::kFramesDir);
  synth::SessionSchedule schedule;
  if (c.schedule_path.empty()) {
    schedule = synth::make_default_schedule(c.subjects, c.frames_per_subject, c.seed, c.sprite_size);
  } else {
    schedule = synth::read_schedule_csv(c.schedule_path, c.subjects, c.frames_per_subject,
                                        c.sprite_size);
  }
  const auto frames = synth::generate_session(schedule, c.base_noise, c.seed);
  synth::write_schedule_csv(schedule, out_path(c, files::kSchedule));
  synth::export_sprites(frames, fs::path(c.output_dir) / files::kFramesDir);
  synth::export_ground_truth(frames, schedule, out_path(c, files::kGroundTruth));
  log << "synth: " << frames.size() << " frames, " << schedule.events.size() << " events\n";
}

void run_keyframes(const RunConfig& c, std::ostream& log) {
  const keygesture::Box box = subject_box(c.sprite_size);
  std::vector<keygesture::KeyGestureEvent> all;
  int skipped = 0;
  for (int s = 0; s < c.subjects; ++s) {
    std::vector<keygesture::StreamFrame> stream;
    stream.reserve(c.frames_per_subject);
    for (int f = 0; f < c.frames_per_subject; ++f) {
      stream.push_back({f, keygesture::crop_subject_region(load_frame(c, s, f), box)});
    }
    const auto ex = keygesture::extract_key_gestures(stream, s, c.tau, c.max_templates);
    all.insert(all.end(), ex.events.begin(), ex.events.end());
    skipped += ex.degenerate_skipped;
  }
  keygesture::write_report(all, out_path(c, files::kKeyframes));
  log << "keyframes: " << all.size() << " of " << c.subjects * c.frames_per_subject
      << " frames";
  if (skipped > 0) log << " (" << skipped << " degenerate frames skipped)";
  log << '\n';
}

void run_train(const RunConfig& c, std::ostream& log) {
  std::vector<FrameKey> keys;
  for (const auto& e : keygesture::read_report(out_path(c, files::kKeyframes))) {
    keys.emplace_back(e.subject_id, e.frame_index);
  }
  if (keys.empty()) throw InsufficientSupportError("no key frames to train on");
  Rng rng(mix_seed(c.seed, kSplitStream));
  std::vector<FrameKey> order = keys;
  shuffle(order, rng);
  const auto n_hold = static_cast<std::size_t>(std::lround(c.holdout_fraction * order.size()));
  Split split;
  split.holdout.assign(order.begin(), order.begin() + std::min(n_hold, order.size() - 1));
  split.train.assign(order.begin() + split.holdout.size(), order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.holdout.begin(), split.holdout.end());
  {
    std::ofstream out(out_path(c, files::kSplit));
    if (!out) throw Error("cannot write " + out_path(c, files::kSplit).string());
    out << "subject_id,frame_index,split\n";
    for (const auto& [s, f] : split.train) out << s << ',' << f << ",train\n";
    for (const auto& [s, f] : split.holdout) out << s << ',' << f << ",holdout\n";
  }

  // Pixels only: the training set carries no labels.
  const std::vector<Image> train_images = load_frames(c, split.train);
  const vaegan::TrainingConfig tc = training_config(c);
  log << "train: " << train_images.size() << " frames, " << split.holdout.size()
      << " held out, " << tc.epochs << " epochs\n";
  const auto result = vaegan::fit(train_images, tc, c.sprite_size,
                                  [&](const vaegan::ModelTriple<float>& model, int epoch) {
                                    save_checkpoint(model, tc, Rng(tc.seed).state(),
                                                    out_path(c, files::kCheckpoint));
                                    if ((epoch + 1) % 10 == 0) log << "  epoch " << epoch + 1 << '\n';
                                  });
  vaegan::write_loss_history(result.history, out_path(c, files::kLossHistory));
  save_checkpoint(result.model, tc, Rng(tc.seed).state(), out_path(c, files::kCheckpoint));

  const std::vector<FrameKey>& shown = split.holdout.empty() ? split.train : split.holdout;
  const std::size_t cols = std::min<std::size_t>(kGridColumns, shown.size());
  const std::vector<Image> originals =
      load_frames(c, std::vector<FrameKey>(shown.begin(), shown.begin() + cols));
  const auto recon = vaegan::decode(result.model, std::span<const vaegan::LatentCode>(
                                                      mean_codes(vaegan::encode(result.model, std::span<const Image>(originals)))));
  std::vector<Image> cells = originals;
  cells.insert(cells.end(), recon.begin(), recon.end());
  export_image_grid(cells, 2, static_cast<int>(cols), out_path(c, files::kReconstructionGrid));
}

void run_encode(const RunConfig& c, std::ostream& log) {
  const auto model = load_model(c);
  std::vector<latent::SubjectTrace> traces;
  for (int s = 0; s < c.subjects; ++s) {
    std::vector<Image> frames;
    for (int f = 0; f < c.frames_per_subject; ++f) frames.push_back(load_frame(c, s, f));
    const auto post = vaegan::encode(model, std::span<const Image>(frames));
    std::vector<latent::TraceEntry> entries;
    for (int f = 0; f < c.frames_per_subject; ++f) entries.push_back({f, post[f].mu});
    traces.emplace_back(s, std::move(entries));
  }
  latent::write_latent_traces(traces, out_path(c, files::kLatentTraces));
  log << "encode: " << c.subjects * c.frames_per_subject << " frames\n";
}

void run_attributes(const RunConfig& c, std::ostream& log) {
  const auto traces = latent::read_latent_traces(out_path(c, files::kLatentTraces));
  const auto truth = ground_truth_map(c);

  std::vector<int> ids;
  for (const auto& t : traces) ids.push_back(t.subject_id());
  std::sort(ids.begin(), ids.end());
  Rng rng(mix_seed(c.seed, kSubjectStream));
  shuffle(ids, rng);
  SubjectSplit subjects;
  const std::size_t n_est = std::max<std::size_t>(1, (ids.size() + 1) / 2);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    (i < n_est ? subjects.estimate : subjects.evaluate).insert(ids[i]);
  }
  {
    std::ofstream out(out_path(c, files::kSubjectSplit));
    if (!out) throw Error("cannot write " + out_path(c, files::kSubjectSplit).string());
    out << "subject_id,role\n";
    for (const int id : subjects.estimate) out << id << ",estimate\n";
    for (const int id : subjects.evaluate) out << id << ",evaluate\n";
  }

  std::vector<latent::AttributeVector> vectors;
  for (const auto a : synth::kAllAttributes) {
    std::vector<latent::LabeledEncoding> encodings;
    for (const auto& t : traces) {
      if (!subjects.estimate.contains(t.subject_id())) continue;
      for (const auto& e : t.entries()) {
        const auto it = truth.find({t.subject_id(), e.frame_index});
        if (it == truth.end()) {
          throw ValidationError("no ground truth for subject " + std::to_string(t.subject_id()) +
                                " frame " + std::to_string(e.frame_index));
        }
        if (it->second.label == "transition") continue;
        encodings.push_back({e.z, t.subject_id(), it->second.has(a)});
      }
    }
    auto v = latent::estimate_attribute_vector(encodings, c.strategy, std::string(synth::to_string(a)));
    latent::write_attribute_vector(v, out_path(c, files::attribute_vector(v.name)));
    log << "attributes: " << v.name << " from " << v.n_pos << " positive / " << v.n_neg
        << " negative frames, |z_a| = " << latent::l2_norm(v.z_a) << '\n';
    vectors.push_back(std::move(v));
  }

  // Neutral reconstructions above one row per attribute added.
  const auto model = load_model(c);
  auto keys = transfer_frames(c);
  if (keys.size() > kGridColumns) keys.resize(kGridColumns);
  if (keys.empty()) return;
  const std::vector<Image> originals = load_frames(c, keys);
  const auto codes = mean_codes(vaegan::encode(model, std::span<const Image>(originals)));
  std::vector<Image> cells = vaegan::decode(model, std::span<const vaegan::LatentCode>(codes));
  for (const auto& v : vectors) {
    std::vector<vaegan::LatentCode> moved;
    for (const auto& code : codes) moved.push_back({latent::apply_attribute(code.z, v.z_a, c.transfer_alpha)});
    const auto imgs = vaegan::decode(model, std::span<const vaegan::LatentCode>(moved));
    cells.insert(cells.end(), imgs.begin(), imgs.end());
  }
  export_image_grid(cells, static_cast<int>(1 + vectors.size()), static_cast<int>(keys.size()),
                    out_path(c, files::kTransferGrid));
}

namespace {

double neutral_epsilon(const RunConfig& c, const std::vector<latent::SubjectTrace>& traces,
                       const std::map<FrameKey, synth::GroundTruthRow>& truth) {
  std::vector<double> reference;
  for (const auto& t : traces) {
    const auto norms = latent::deviation_norms(t);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto it = truth.find({t.subject_id(), t.entries()[i].frame_index});
      if (it != truth.end() && it->second.neutral()) reference.push_back(norms[i]);
    }
  }
  if (reference.empty()) throw InsufficientSupportError("no neutral frames to calibrate epsilon");
  return latent::choose_epsilon(reference, c.epsilon_percentile);
}

}  // namespace

void run_detect(const RunConfig& c, std::ostream& log) {
  const auto traces = latent::read_latent_traces(out_path(c, files::kLatentTraces));
  const auto truth = ground_truth_map(c);
  const auto vectors = read_attribute_vectors(c);
  const double epsilon = neutral_epsilon(c, traces, truth);

  std::vector<latent::DetectionEvent> events;
  std::ofstream mf(out_path(c, files::kMatchedFilter));
  if (!mf) throw Error("cannot write " + out_path(c, files::kMatchedFilter).string());
  mf << "subject_id,frame_index,attribute,centering,score\n";
  const char* centering = c.centering == latent::Centering::none ? "none" : "per_subject";
  for (const auto& t : traces) {
    for (auto& e : latent::flag_anomalies(t, epsilon)) events.push_back(std::move(e));
    for (const auto& v : vectors) {
      // A frame at mu_i + z_a scores |z_a|^2; flag past half of that.
      const double threshold = 0.5 * latent::dot(v.z_a, v.z_a);
      for (const auto& s : latent::matched_filter_scores(t, v.z_a, c.centering)) {
        mf << t.subject_id() << ',' << s.frame_index << ',' << v.name << ',' << centering << ','
           << csv::format_real(s.score) << '\n';
        events.push_back({t.subject_id(), s.frame_index, v.name, latent::Rule::matched_filter,
                          s.score, s.score > threshold});
      }
      for (auto& e : latent::detect_signature(t, v.z_a, c.cos_min, c.norm_band, v.name)) {
        events.push_back(std::move(e));
      }
    }
  }
  latent::write_detection_report(events, out_path(c, files::kDetections));
  const auto flagged = std::count_if(events.begin(), events.end(), [](const auto& e) {
    return e.rule == latent::Rule::norm_epsilon && e.flagged;
  });
  log << "detect: epsilon = " << epsilon << ", " << flagged << " frames flagged\n";
}

Metrics evaluate(const RunConfig& c) {
  Metrics m;
  m.total_frames = c.subjects * c.frames_per_subject;
  const auto key_events = keygesture::read_report(out_path(c, files::kKeyframes));
  m.key_frames = static_cast<int>(key_events.size());
  const auto schedule = load_schedule(c);
  m.scheduled_events = static_cast<int>(schedule.events.size());
  for (const auto& ev : schedule.events) {
    const bool hit = std::any_of(key_events.begin(), key_events.end(), [&](const auto& k) {
      return k.subject_id == ev.subject_id && k.frame_index >= ev.start_frame &&
             k.frame_index < ev.end_frame;
    });
    m.events_with_key_frame += hit ? 1 : 0;
  }

  // Reconstruction of held-out key frames against the training-set mean image.
  const auto model = load_model(c);
  const auto split = read_split(c);
  const auto train_images = load_frames(c, split.train);
  const auto held = load_frames(c, split.holdout);
  if (!held.empty()) {
    Image mean(c.sprite_size, c.sprite_size);
    for (const auto& img : train_images) {
      for (std::size_t i = 0; i < img.size(); ++i) mean.pixels[i] += img.pixels[i];
    }
    for (double& v : mean.pixels) v /= static_cast<double>(train_images.size());
    const auto recon = vaegan::decode(
        model, std::span<const vaegan::LatentCode>(mean_codes(vaegan::encode(model, std::span<const Image>(held)))));
    double err = 0, base = 0;
    for (std::size_t k = 0; k < held.size(); ++k) {
      for (std::size_t i = 0; i < held[k].size(); ++i) {
        const double x = held[k].pixels[i];
        err += (x - recon[k].pixels[i]) * (x - recon[k].pixels[i]);
        base += (x - mean.pixels[i]) * (x - mean.pixels[i]);
      }
    }
    const double n = static_cast<double>(held.size() * held.front().size());
    m.reconstruction_mse = err / n;
    m.baseline_mse = base / n;
  }

  const auto vectors = read_attribute_vectors(c);
  const auto keys = transfer_frames(c);
  if (!keys.empty()) {
    const auto originals = load_frames(c, keys);
    const auto codes = mean_codes(vaegan::encode(model, std::span<const Image>(originals)));
    const auto base_imgs = vaegan::decode(model, std::span<const vaegan::LatentCode>(codes));
    for (const auto& v : vectors) {
      const auto attr = synth::parse_attribute(v.name);
      std::vector<vaegan::LatentCode> moved;
      for (const auto& code : codes) moved.push_back({latent::apply_attribute(code.z, v.z_a, c.transfer_alpha)});
      const auto imgs = vaegan::decode(model, std::span<const vaegan::LatentCode>(moved));
      int up = 0;
      for (std::size_t k = 0; k < imgs.size(); ++k) {
        if (synth::measure_factor(imgs[k], attr) > synth::measure_factor(base_imgs[k], attr)) ++up;
      }
      m.transfer_success[v.name] = static_cast<double>(up) / static_cast<double>(imgs.size());
    }
  }

  // Per-subject-centered matched filter on evaluation subjects' unseen frames.
  const auto traces = latent::read_latent_traces(out_path(c, files::kLatentTraces));
  const auto truth = ground_truth_map(c);
  const auto subjects = read_subject_split(c);
  const std::set<FrameKey> trained(split.train.begin(), split.train.end());
  for (const auto& v : vectors) {
    const auto attr = synth::parse_attribute(v.name);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (const auto& t : traces) {
      if (!subjects.evaluate.contains(t.subject_id())) continue;
      for (const auto& s : latent::matched_filter_scores(t, v.z_a, latent::Centering::per_subject)) {
        const FrameKey key{t.subject_id(), s.frame_index};
        const auto& row = truth.at(key);
        if (trained.contains(key) || row.label == "transition") continue;
        scores.push_back(s.score);
        labels.push_back(row.has(attr));
      }
    }
    m.matched_filter_auc[v.name] = latent::roc_auc(scores, labels);
  }

  m.epsilon = neutral_epsilon(c, traces, truth);
  int events_total = 0, events_flagged = 0, neutral_total = 0, neutral_flagged = 0;
  for (const auto& t : traces) {
    for (const auto& e : latent::flag_anomalies(t, m.epsilon)) {
      const auto& row = truth.at({e.subject_id, e.frame_index});
      if (row.neutral()) {
        ++neutral_total;
        neutral_flagged += e.flagged;
      } else if (row.label != "transition") {
        ++events_total;
        events_flagged += e.flagged;
      }
    }
  }
  m.anomaly_recall = events_total ? static_cast<double>(events_flagged) / events_total : 0.0;
  m.false_flag_rate = neutral_total ? static_cast<double>(neutral_flagged) / neutral_total : 0.0;
  return m;
}

void write_metrics(const Metrics& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "metric,value\n";
  out << "total_frames," << m.total_frames << '\n';
  out << "key_frames," << m.key_frames << '\n';
  out << "key_frame_fraction," << csv::format_real(static_cast<double>(m.key_frames) / m.total_frames) << '\n';
  out << "scheduled_events," << m.scheduled_events << '\n';
  out << "events_with_key_frame," << m.events_with_key_frame << '\n';
  out << "reconstruction_mse," << csv::format_real(m.reconstruction_mse) << '\n';
  out << "baseline_mse," << csv::format_real(m.baseline_mse) << '\n';
  for (const auto& [k, v] : m.transfer_success) out << "transfer_success_" << k << ',' << csv::format_real(v) << '\n';
  for (const auto& [k, v] : m.matched_filter_auc) out << "matched_filter_auc_" << k << ',' << csv::format_real(v) << '\n';
  out << "epsilon," << csv::format_real(m.epsilon) << '\n';
  out << "anomaly_recall," << csv::format_real(m.anomaly_recall) << '\n';
  out << "false_flag_rate," << csv::format_real(m.false_flag_rate) << '\n';
}

void run_report(const RunConfig& c, std::ostream& log) {
  const Metrics m = evaluate(c);
  write_metrics(m, out_path(c, files::kMetrics));
  log << "report: key frames " << m.key_frames << "/" << m.total_frames << ", events covered "
      << m.events_with_key_frame << "/" << m.scheduled_events << '\n';
  log << "report: held-out reconstruction MSE " << m.reconstruction_mse << " (mean-image baseline "
      << m.baseline_mse << ")\n";
  for (const auto& [k, v] : m.transfer_success) log << "report: transfer " << k << " raises reading on " << v << " of frames\n";
  for (const auto& [k, v] : m.matched_filter_auc) log << "report: matched-filter AUC " << k << " = " << v << '\n';
  log << "report: anomaly recall " << m.anomaly_recall << ", false-flag rate " << m.false_flag_rate << '\n';
}

int run_stage(Stage stage, const RunConfig& config, std::ostream& log, std::ostream& err) {
  const std::vector<std::pair<Stage, void (*)(const RunConfig&, std::ostream&)>> order = {
      {Stage::synth, run_synth},   {Stage::keyframes, run_keyframes},
      {Stage::train, run_train},   {Stage::encode, run_encode},
      {Stage::attributes, run_attributes}, {Stage::detect, run_detect},
      {Stage::report, run_report}};
  Stage current = stage;
  try {
    config.validate();
    fs::create_directories(config.output_dir);
    for (const auto& [s, fn] : order) {
      if (stage != Stage::all && stage != s) continue;
      current = s;
      fn(config, log);
    }
    return kExitOk;
  } catch (const InsufficientSupportError& e) {
    err << "lglab " << to_string(current) << ": insufficient support: " << e.what() << '\n';
    return kExitInsufficientSupport;
  } catch (const ValidationError& e) {
    err << "lglab " << to_string(current) << ": " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "lglab " << to_string(current) << ": aborted: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace lglab::pipeline
