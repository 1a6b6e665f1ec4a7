#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lglab/image.hpp"

// Procedural face sprites with controllable behavior factors. Stands in for
// audience footage and doubles as the ground-truth oracle for evaluation.
namespace lglab::synth {

enum class Attribute { smile, yawn, eye_closure };

inline constexpr std::array<Attribute, 3> kAllAttributes = {
    Attribute::smile, Attribute::yawn, Attribute::eye_closure};

std::string_view to_string(Attribute attribute);
Attribute parse_attribute(std::string_view name);

struct FactorVector {
  std::uint64_t identity_seed = 0;
  double smile = 0.0;        // [-1, 1], positive curls the mouth corners up
  double yawn = 0.0;         // [0, 1], mouth opening
  double eye_closure = 0.0;  // [0, 1], 1 = closed
  double pose_dx = 0.0;      // [-2, 2] pixels
  double pose_dy = 0.0;      // [-2, 2] pixels
  std::uint64_t noise_seed = 0;
  double noise_level = 0.0;  // >= 0, half-width of the uniform noise

  double get(Attribute attribute) const;
  void set(Attribute attribute, double value);

  // Throws ValidationError naming the first out-of-range field.
  void validate() const;

  bool operator==(const FactorVector&) const = default;
};

struct SpriteFrame {
  Image pixels;
  int subject_id = 0;
  int frame_index = 0;
  FactorVector factors;  // ground truth, evaluation only
};

inline constexpr int kDefaultSpriteSize = 32;
inline constexpr int kMinSpriteSize = 16;

// Axis-aligned box in pixel coordinates, half-open [x0, x1) x [y0, y1).
struct Region {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(double x, double y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }
};

// Declared region a feature may touch, already shifted by pose. Smile and
// yawn share the mouth region.
Region feature_region(Attribute attribute, int size, double pose_dx,
                      double pose_dy);

SpriteFrame render_sprite(const FactorVector& factors,
                          int size = kDefaultSpriteSize);

// Reads a factor back from pixels alone. Monotone in the true factor on
// noiseless renders; tolerant of blur so it can score decoder output.
double measure_factor(const Image& sprite, Attribute attribute);

struct ScheduledEvent {
  int subject_id = 0;
  int start_frame = 0;
  int end_frame = 0;  // exclusive
  Attribute attribute = Attribute::smile;
  double intensity = 1.0;
};

struct SessionSchedule {
  int subjects = 0;
  int frames_per_subject = 0;
  int sprite_size = kDefaultSpriteSize;
  std::vector<ScheduledEvent> events;

  void validate() const;
};

// Factor value an event contributes at frame t: linear ramps over 10% of the
// event's duration at each end, zero outside [start, end).
double event_profile(const ScheduledEvent& event, int frame);

// Ground-truth label: "neutral", "transition", or '+'-joined attribute names
// whose factor exceeds half of the active event's intensity.
std::string frame_label(const SessionSchedule& schedule, int subject_id,
                        int frame);

// Deterministic per-subject identity and pose.
std::uint64_t subject_identity(std::uint64_t rng_seed, int subject_id);
std::pair<double, double> subject_pose(std::uint64_t rng_seed, int subject_id);

// Frames ordered by subject, then frame index.
std::vector<SpriteFrame> generate_session(const SessionSchedule& schedule,
                                          double base_noise,
                                          std::uint64_t rng_seed);

// One event per attribute per subject, non-overlapping across attributes,
// placed away from the first frames so every stream opens neutral.
SessionSchedule make_default_schedule(int subjects, int frames_per_subject,
                                      std::uint64_t rng_seed,
                                      int sprite_size = kDefaultSpriteSize);

// Schedule CSV: subject_id,start_frame,end_frame,attribute,intensity
void write_schedule_csv(const SessionSchedule& schedule,
                        const std::filesystem::path& path);
SessionSchedule read_schedule_csv(const std::filesystem::path& path,
                                  int subjects, int frames_per_subject,
                                  int sprite_size);

// s{subject}_f{frame}.pgm
std::string sprite_filename(int subject_id, int frame_index);
void export_sprites(const std::vector<SpriteFrame>& frames,
                    const std::filesystem::path& directory);

// subject_id,frame_index,smile,yawn,eye_closure,label
void export_ground_truth(const std::vector<SpriteFrame>& frames,
                         const SessionSchedule& schedule,
                         const std::filesystem::path& path);

struct GroundTruthRow {
  int subject_id = 0;
  int frame_index = 0;
  double smile = 0, yawn = 0, eye_closure = 0;
  std::string label;

  // True when the label names the attribute.
  bool has(Attribute attribute) const;
  bool neutral() const { return label == "neutral"; }
};

std::vector<GroundTruthRow> read_ground_truth(const std::filesystem::path& path);

}  // namespace lglab::synth
