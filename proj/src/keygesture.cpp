#include "lglab/keygesture.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "lglab/csv.hpp"
#include "lglab/errors.hpp"

namespace lglab::keygesture {
namespace {

double mean_of(const Image& p) {
  double sum = 0.0;
  for (const double v : p.pixels) sum += v;
  return sum / static_cast<double>(p.size());
}

}  // namespace

double patch_variance(const Image& patch) {
  if (patch.size() == 0) return 0.0;
  const double mean = mean_of(patch);
  double ss = 0.0;
  for (const double v : patch.pixels) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(patch.size());
}

double ncc(const Image& a, const Image& b, double variance_floor) {
  if (a.width != b.width || a.height != b.height) {
    throw ValidationError("ncc: patch shapes differ (" + std::to_string(a.width) +
                          "x" + std::to_string(a.height) + " vs " +
                          std::to_string(b.width) + "x" +
                          std::to_string(b.height) + ")");
  }
  if (a.size() == 0) throw ValidationError("ncc: empty patches");
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double u = a.pixels[i] - ma;
    const double v = b.pixels[i] - mb;
    sab += u * v;
    saa += u * u;
    sbb += v * v;
  }
  const double n = static_cast<double>(a.size());
  if (saa / n <= variance_floor || sbb / n <= variance_floor) {
    throw DegeneratePatchError("ncc: patch variance at or below floor");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Image crop_subject_region(const Image& frame, const Box& box) {
  if (box.width <= 0 || box.height <= 0 || box.x < 0 || box.y < 0 ||
      box.x + box.width > frame.width || box.y + box.height > frame.height) {
    throw ValidationError("crop box outside the frame");
  }
  Image out(box.width, box.height);
  for (int r = 0; r < box.height; ++r) {
    for (int c = 0; c < box.width; ++c) {
      out.at(r, c) = frame.at(box.y + r, box.x + c);
    }
  }
  return out;
}

void embed_region(Image& frame, const Image& patch, const Box& box) {
  if (patch.width != box.width || patch.height != box.height ||
      box.x < 0 || box.y < 0 || box.x + box.width > frame.width ||
      box.y + box.height > frame.height) {
    throw ValidationError("embed box outside the frame or patch shape mismatch");
  }
  for (int r = 0; r < box.height; ++r) {
    for (int c = 0; c < box.width; ++c) {
      frame.at(box.y + r, box.x + c) = patch.at(r, c);
    }
  }
}

Extraction extract_key_gestures(std::span<const StreamFrame> frames,
                                int subject_id, double threshold,
                                int max_templates) {
  if (frames.empty()) throw ValidationError("key gestures: empty frame stream");
  if (!(threshold >= -1.0 && threshold <= 1.0)) {
    throw ValidationError("key gestures: threshold must lie in [-1, 1]");
  }
  if (max_templates < 1) {
    throw ValidationError("key gestures: max_templates must be >= 1");
  }
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].frame_index <= frames[i - 1].frame_index) {
      throw ValidationError("key gestures: frame indices must increase");
    }
  }

  Extraction result;
  result.dictionary.subject_id = subject_id;
  auto& templates = result.dictionary.templates;

  for (const StreamFrame& frame : frames) {
    if (patch_variance(frame.patch) <= kVarianceFloor) {
      ++result.degenerate_skipped;
      continue;
    }
    if (templates.empty()) {
      templates.push_back({frame.patch, subject_id, frame.frame_index});
      result.events.push_back({subject_id, frame.frame_index});
      continue;
    }
    double best = -1.0;
    for (const Template& t : templates) {
      best = std::max(best, ncc(frame.patch, t.patch));
    }
    if (best < threshold) {
      result.events.push_back({subject_id, frame.frame_index, best});
      if (static_cast<int>(templates.size()) < max_templates) {
        templates.push_back({frame.patch, subject_id, frame.frame_index});
      }
    }
  }
  return result;
}

void write_report(const std::vector<KeyGestureEvent>& events,
                  const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "subject_id,frame_index,best_ncc\n";
  for (const auto& e : events) {
    out << e.subject_id << ',' << e.frame_index << ',';
    if (!e.is_seed()) out << csv::format_real(e.best_ncc);
    out << '\n';
  }
}

std::vector<KeyGestureEvent> read_report(const std::filesystem::path& path) {
  std::vector<KeyGestureEvent> events;
  for (const auto& row : csv::read_rows(path, "subject_id,frame_index,best_ncc")) {
    if (row.size() != 3) {
      throw ValidationError(path.string() + ": expected 3 fields per row");
    }
    KeyGestureEvent e;
    e.subject_id = static_cast<int>(csv::parse_int(row[0], "subject_id"));
    e.frame_index = static_cast<int>(csv::parse_int(row[1], "frame_index"));
    if (!row[2].empty()) e.best_ncc = csv::parse_real(row[2], "best_ncc");
    events.push_back(e);
  }
  return events;
}

}  // namespace lglab::keygesture
