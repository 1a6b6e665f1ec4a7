#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lglab/image.hpp"
#include "lglab/latentlab.hpp"
#include "lglab/vaegan.hpp"

namespace lglab::pipeline {

struct RunConfig {
  // synth
  int subjects = 20;
  int frames_per_subject = 300;
  int sprite_size = 32;
  double base_noise = 0.03;
  std::string schedule_path;  // empty: generate the default schedule
  // keyframes
  double tau = 0.95;
  int max_templates = 32;
  // train
  vaegan::TrainingConfig training;
  double holdout_fraction = 0.2;
  // attributes / detect
  latent::Strategy strategy = latent::Strategy::diff_of_means;
  latent::Centering centering = latent::Centering::per_subject;
  double epsilon_percentile = 95.0;
  double cos_min = latent::kDefaultCosMin;
  latent::NormBand norm_band;
  double transfer_alpha = 1.0;
  int transfer_frames = 50;
  // shared
  std::uint64_t seed = 1;
  std::string output_dir = "lglab_out";

  void validate() const;
};

// `key = value` lines, `#` starts a comment. Unknown keys and malformed lines
// are errors that carry the line number; missing keys keep their defaults.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
// Every key in load order with its current value, in loadable form.
std::string dump_config(const RunConfig& config);

// Checkpoints: 8-byte magic "LGLAB\0\0" + version byte, u64 little-endian
// manifest length, JSON manifest, then little-endian float32 payloads.
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  vaegan::ModelTriple<float> model;
  vaegan::TrainingConfig training;
  std::string rng_state;
};

void save_checkpoint(const vaegan::ModelTriple<float>& model,
                     const vaegan::TrainingConfig& training, const std::string& rng_state,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also requires the stored architecture and parameter names/shapes to match.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const vaegan::Architecture& expected);

// Row-major tiling with 1-pixel mid-gray separators between cells.
Image make_image_grid(std::span<const Image> images, int rows, int cols);
void export_image_grid(std::span<const Image> images, int rows, int cols,
                       const std::filesystem::path& path);

enum class Stage { synth, keyframes, train, encode, attributes, detect, report, all };
std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view text);

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitRuntime = 2,
  kExitInsufficientSupport = 3,
};

// Artifact names inside the output directory.
namespace files {
inline constexpr const char* kSchedule = "schedule.csv";
inline constexpr const char* kGroundTruth = "ground_truth.csv";
inline constexpr const char* kFramesDir = "frames";
inline constexpr const char* kKeyframes = "keyframes.csv";
inline constexpr const char* kSplit = "train_split.csv";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kLossHistory = "loss_history.csv";
inline constexpr const char* kReconstructionGrid = "reconstruction_grid.pgm";
inline constexpr const char* kLatentTraces = "latent_traces.csv";
inline constexpr const char* kSubjectSplit = "subject_split.csv";
inline constexpr const char* kTransferGrid = "attribute_transfer.pgm";
inline constexpr const char* kMatchedFilter = "matched_filter_scores.csv";
inline constexpr const char* kDetections = "detections.csv";
inline constexpr const char* kMetrics = "metrics.csv";
std::string attribute_vector(std::string_view attribute);
}  // namespace files

// Each stage reads only files written by earlier stages. Throws on failure.
void run_synth(const RunConfig& config, std::ostream& log);
void run_keyframes(const RunConfig& config, std::ostream& log);
void run_train(const RunConfig& config, std::ostream& log);
void run_encode(const RunConfig& config, std::ostream& log);
void run_attributes(const RunConfig& config, std::ostream& log);
void run_detect(const RunConfig& config, std::ostream& log);
void run_report(const RunConfig& config, std::ostream& log);

// Runs a stage (or all in order), reporting errors on `err` prefixed with the
// stage name, and maps them to exit codes.
int run_stage(Stage stage, const RunConfig& config, std::ostream& log, std::ostream& err);

struct Metrics {
  int total_frames = 0;
  int key_frames = 0;
  int scheduled_events = 0;
  int events_with_key_frame = 0;
  double reconstruction_mse = 0;
  double baseline_mse = 0;
  std::map<std::string, double> transfer_success;   // by attribute
  std::map<std::string, double> matched_filter_auc;  // by attribute
  double epsilon = 0;
  double anomaly_recall = 0;
  double false_flag_rate = 0;
};

// Recomputes every evaluation metric from the artifacts on disk.
Metrics evaluate(const RunConfig& config);
void write_metrics(const Metrics& metrics, const std::filesystem::path& path);

}  // namespace lglab::pipeline
