#pragma once

#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "lglab/image.hpp"

// Winnows a subject's frame stream down to "key gesture" frames: frames whose
// best normalized cross-correlation against a growing template dictionary
// falls below a novelty threshold.
namespace lglab::keygesture {

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kDefaultThreshold = 0.95;
inline constexpr int kDefaultMaxTemplates = 32;

// Cosine similarity of the mean-centered patches, clamped to [-1, 1].
// Throws ValidationError on shape mismatch and DegeneratePatchError when
// either patch's variance is <= variance_floor.
double ncc(const Image& a, const Image& b,
           double variance_floor = kVarianceFloor);

// Mean squared deviation from the patch mean.
double patch_variance(const Image& patch);

struct Box {
  int x = 0;  // column of the top-left corner
  int y = 0;  // row of the top-left corner
  int width = 0;
  int height = 0;
};

// Sub-image inside `box`, no resampling. Out-of-bounds boxes are rejected.
Image crop_subject_region(const Image& frame, const Box& box);

// Inverse of crop_subject_region: writes `patch` back at (box.x, box.y).
void embed_region(Image& frame, const Image& patch, const Box& box);

struct Template {
  Image patch;
  int subject_id = 0;
  int source_frame = 0;
};

struct TemplateDictionary {
  int subject_id = 0;
  std::vector<Template> templates;
};

struct KeyGestureEvent {
  int subject_id = 0;
  int frame_index = 0;
  // -inf marks the frame that seeded the dictionary.
  double best_ncc = -std::numeric_limits<double>::infinity();

  bool is_seed() const { return best_ncc == -std::numeric_limits<double>::infinity(); }
};

struct StreamFrame {
  int frame_index = 0;
  Image patch;
};

struct Extraction {
  std::vector<KeyGestureEvent> events;
  TemplateDictionary dictionary;
  int degenerate_skipped = 0;
};

// Greedy single pass. The first non-degenerate frame seeds the dictionary;
// each later frame is emitted when its best NCC against the dictionary is
// below `threshold`, and appended as a template while the dictionary holds
// fewer than `max_templates`. Constant frames are counted and skipped.
Extraction extract_key_gestures(std::span<const StreamFrame> frames,
                                int subject_id,
                                double threshold = kDefaultThreshold,
                                int max_templates = kDefaultMaxTemplates);

// subject_id,frame_index,best_ncc (empty best_ncc for seed rows)
void write_report(const std::vector<KeyGestureEvent>& events,
                  const std::filesystem::path& path);
std::vector<KeyGestureEvent> read_report(const std::filesystem::path& path);

}  // namespace lglab::keygesture
