#include "lglab/synthface.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "lglab/csv.hpp"
#include "lglab/errors.hpp"
#include "lglab/rng.hpp"

namespace lglab::synth {
namespace {

// All geometry below is in units of a 32-pixel sprite and scaled by size/32.
// Feature offsets are relative to the head center.
constexpr double kSmileAmplitude = 5.0;   // corner-to-center lift at smile=1
constexpr double kLipHalfWidth = 0.75;    // half thickness of the lip line
constexpr double kYawnMaxHeight = 3.5;    // vertical radius at yawn=1
constexpr double kLidHalfWidth = 0.6;
constexpr double kLipDarkness = 0.42;
constexpr double kOpenMouthDarkness = 0.55;
constexpr double kEyeDarkness = 0.5;
constexpr double kNoseDarkness = 0.12;

// Nominal feature regions, relative to the head center.
constexpr Region kEyeRegion{-9.0, -8.0, 9.0, -1.0};
constexpr Region kMouthRegion{-8.0, 1.25, 8.0, 11.5};

struct Identity {
  double head_rx, head_ry;
  double skin, background;
  double eye_dx, eye_y, eye_radius;
  double mouth_y, mouth_half_width;
};

double unit_draw(std::uint64_t seed, std::uint64_t index) {
  return static_cast<double>(mix_seed(seed, index) >> 11) * 0x1.0p-53;
}

Identity make_identity(std::uint64_t seed, double scale) {
  auto draw = [&](std::uint64_t index, double lo, double hi) {
    return lo + (hi - lo) * unit_draw(seed, index);
  };
  Identity id{};
  id.head_rx = draw(1, 10.5, 12.0) * scale;
  id.head_ry = draw(2, 12.5, 13.5) * scale;
  id.skin = draw(3, 0.62, 0.78);
  id.background = draw(4, 0.12, 0.25);
  id.eye_dx = draw(5, 4.5, 5.5) * scale;
  id.eye_y = draw(6, -5.0, -4.0) * scale;
  id.eye_radius = draw(7, 2.0, 2.4) * scale;
  id.mouth_y = draw(8, 5.5, 6.5) * scale;
  id.mouth_half_width = draw(9, 5.0, 6.0) * scale;
  return id;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Anti-aliased coverage of a filled axis-aligned ellipse, using the
// first-order signed distance (e - 1) / |grad e| to the boundary.
double ellipse_coverage(double dx, double dy, double rx, double ry) {
  if (rx <= 0.0 || ry <= 0.0) return 0.0;
  const double ux = dx / rx;
  const double uy = dy / ry;
  const double e = std::sqrt(ux * ux + uy * uy);
  // Fade in thin ellipses so the coverage vanishes continuously as r -> 0.
  const double fade = std::min(1.0, std::min(rx, ry) / 0.5);
  const double gx = ux / rx;
  const double gy = uy / ry;
  const double grad = std::sqrt(gx * gx + gy * gy);
  if (grad <= 0.0) return fade;  // at the center
  const double distance = (e - 1.0) * e / grad;
  return clamp01(0.5 - distance) * fade;
}

double band_coverage(double distance, double half_width) {
  return clamp01(half_width + 0.5 - std::abs(distance));
}

Region scaled(const Region& r, double scale, double cx, double cy) {
  return Region{cx + r.x0 * scale, cy + r.y0 * scale, cx + r.x1 * scale,
                cy + r.y1 * scale};
}

double mouth_darkness(const Identity& id, const FactorVector& f, double x,
                      double y, double scale) {
  // Smiling also stretches the mouth sideways.
  const double hw = id.mouth_half_width * (1.0 + 0.15 * std::max(f.smile, 0.0));
  const double u = (x / hw) * (x / hw);
  const double curve =
      id.mouth_y + f.smile * kSmileAmplitude * scale * (0.5 - u);
  const double line = band_coverage(y - curve, kLipHalfWidth * scale) *
                      clamp01(hw + 0.5 - std::abs(x));
  const double opening = ellipse_coverage(x, y - id.mouth_y,
                                          0.75 * id.mouth_half_width,
                                          f.yawn * kYawnMaxHeight * scale);
  return std::max(kLipDarkness * line, kOpenMouthDarkness * opening);
}

double eye_darkness(const Identity& id, const FactorVector& f, double x,
                    double y, double scale) {
  double dark = 0.0;
  for (const double side : {-1.0, 1.0}) {
    const double dx = x - side * id.eye_dx;
    const double dy = y - id.eye_y;
    const double rx = 1.2 * id.eye_radius;
    const double ry = id.eye_radius * (1.0 - f.eye_closure);
    const double lid = band_coverage(dy, kLidHalfWidth * scale) *
                       clamp01(rx + 0.5 - std::abs(dx));
    const double open = ellipse_coverage(dx, dy, rx, ry);
    dark = std::max(dark, kEyeDarkness * std::max(lid, open));
  }
  return dark;
}

double nose_darkness(double x, double y, double scale) {
  if (y < -0.5 * scale || y > 1.0 * scale) return 0.0;
  return kNoseDarkness * band_coverage(x, 0.4 * scale);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

}  // namespace

std::string_view to_string(Attribute attribute) {
  switch (attribute) {
    case Attribute::smile: return "smile";
    case Attribute::yawn: return "yawn";
    case Attribute::eye_closure: return "eye_closure";
  }
  return "unknown";
}

Attribute parse_attribute(std::string_view name) {
  for (const Attribute a : kAllAttributes) {
    if (to_string(a) == name) return a;
  }
  throw ValidationError("unknown attribute '" + std::string(name) + "'");
}

double FactorVector::get(Attribute attribute) const {
  switch (attribute) {
    case Attribute::smile: return smile;
    case Attribute::yawn: return yawn;
    case Attribute::eye_closure: return eye_closure;
  }
  return 0.0;
}

void FactorVector::set(Attribute attribute, double value) {
  switch (attribute) {
    case Attribute::smile: smile = value; break;
    case Attribute::yawn: yawn = value; break;
    case Attribute::eye_closure: eye_closure = value; break;
  }
}

void FactorVector::validate() const {
  auto in = [](double v, double lo, double hi) {
    return std::isfinite(v) && v >= lo && v <= hi;
  };
  require(in(smile, -1.0, 1.0), "factor smile must lie in [-1, 1]");
  require(in(yawn, 0.0, 1.0), "factor yawn must lie in [0, 1]");
  require(in(eye_closure, 0.0, 1.0), "factor eye_closure must lie in [0, 1]");
  require(in(pose_dx, -2.0, 2.0), "factor pose_dx must lie in [-2, 2]");
  require(in(pose_dy, -2.0, 2.0), "factor pose_dy must lie in [-2, 2]");
  require(std::isfinite(noise_level) && noise_level >= 0.0,
          "factor noise_level must be >= 0");
}

Region feature_region(Attribute attribute, int size, double pose_dx,
                      double pose_dy) {
  const double scale = size / 32.0;
  const double cx = size / 2.0 + pose_dx;
  const double cy = size / 2.0 + pose_dy;
  return scaled(attribute == Attribute::eye_closure ? kEyeRegion : kMouthRegion,
                scale, cx, cy);
}

SpriteFrame render_sprite(const FactorVector& factors, int size) {
  factors.validate();
  require(size >= kMinSpriteSize, "sprite size must be >= 16");

  const double scale = size / 32.0;
  const double cx = size / 2.0 + factors.pose_dx;
  const double cy = size / 2.0 + factors.pose_dy;
  const Identity id = make_identity(factors.identity_seed, scale);
  const Region mouth = scaled(kMouthRegion, scale, cx, cy);
  const Region eyes = scaled(kEyeRegion, scale, cx, cy);

  SpriteFrame frame;
  frame.factors = factors;
  frame.pixels = Image(size, size);
  Rng noise(mix_seed(factors.noise_seed));

  for (int row = 0; row < size; ++row) {
    for (int col = 0; col < size; ++col) {
      const double px = col + 0.5;
      const double py = row + 0.5;
      const double x = px - cx;
      const double y = py - cy;
      const double head = ellipse_coverage(x, y, id.head_rx, id.head_ry);
      double value = id.background + (id.skin - id.background) * head;
      value -= head * nose_darkness(x, y, scale);
      if (mouth.contains(px, py)) value -= mouth_darkness(id, factors, x, y, scale);
      if (eyes.contains(px, py)) value -= eye_darkness(id, factors, x, y, scale);
      // One draw per pixel regardless of noise level keeps streams aligned.
      const double jitter = noise.uniform(-1.0, 1.0) * factors.noise_level;
      frame.pixels.at(row, col) = clamp01(value + jitter);
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------
// Read-back

namespace {

struct HeadEstimate {
  double cx = 0, cy = 0;
  double skin = 0;
  std::vector<int> row_left, row_right;  // head extent per row, -1 if none
};

double percentile_of(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q * (values.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - lo) * (values[hi] - values[lo]);
}

// Head center from the horizontal/vertical extents of the bright mask; the
// extents ignore dark interior features, so expression does not bias them.
HeadEstimate estimate_head(const Image& img) {
  const double lo = percentile_of(img.pixels, 0.2);
  const double hi = percentile_of(img.pixels, 0.8);
  const double threshold = 0.5 * (lo + hi);
  HeadEstimate est;
  est.row_left.assign(img.height, -1);
  est.row_right.assign(img.height, -1);

  double sum_x = 0, weight_x = 0;
  std::vector<double> skin_values;
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      if (img.at(r, c) > threshold) {
        if (est.row_left[r] < 0) est.row_left[r] = c;
        est.row_right[r] = c;
        skin_values.push_back(img.at(r, c));
      }
    }
    const int width = est.row_right[r] - est.row_left[r];
    if (est.row_left[r] >= 0 && width > img.width / 4) {
      sum_x += width * 0.5 * (est.row_left[r] + est.row_right[r] + 1);
      weight_x += width;
    }
  }
  double sum_y = 0, weight_y = 0;
  for (int c = 0; c < img.width; ++c) {
    int top = -1, bottom = -1;
    for (int r = 0; r < img.height; ++r) {
      if (img.at(r, c) > threshold) {
        if (top < 0) top = r;
        bottom = r;
      }
    }
    const int height = bottom - top;
    if (top >= 0 && height > img.height / 4) {
      sum_y += height * 0.5 * (top + bottom + 1);
      weight_y += height;
    }
  }
  est.cx = weight_x > 0 ? sum_x / weight_x : img.width / 2.0;
  est.cy = weight_y > 0 ? sum_y / weight_y : img.height / 2.0;
  est.skin = skin_values.empty() ? hi : percentile_of(skin_values, 0.5);
  return est;
}

struct DarkPixel {
  double x, y, w;
};

// Darkness (skin minus pixel) of pixels inside `region` that fall within the
// head's row extent. Coordinates are relative to the estimated center.
std::vector<DarkPixel> dark_pixels(const Image& img, const HeadEstimate& head,
                                   const Region& rel, double scale) {
  std::vector<DarkPixel> out;
  for (int r = 0; r < img.height; ++r) {
    if (head.row_left[r] < 0) continue;
    for (int c = head.row_left[r] + 1; c < head.row_right[r]; ++c) {
      const double x = c + 0.5 - head.cx;
      const double y = r + 0.5 - head.cy;
      if (!rel.contains(x / scale, y / scale)) continue;
      const double w = head.skin - img.at(r, c);
      if (w > 0.05) out.push_back({x, y, w});
    }
  }
  return out;
}

// Weighted regression of row position on normalized squared column offset;
// the slope is -smile * amplitude for a parabolic lip line.
double smile_statistic(const std::vector<DarkPixel>& px, double scale) {
  double total = 0, mx = 0;
  for (const auto& p : px) {
    total += p.w;
    mx += p.w * p.x;
  }
  if (total <= 0) return 0.0;
  mx /= total;
  double vx = 0;
  for (const auto& p : px) vx += p.w * (p.x - mx) * (p.x - mx);
  vx /= total;
  const double half_width_sq = std::max(3.0 * vx, 1e-9);
  double mu = 0, my = 0;
  for (const auto& p : px) {
    mu += p.w * (p.x - mx) * (p.x - mx) / half_width_sq;
    my += p.w * p.y;
  }
  mu /= total;
  my /= total;
  double cov = 0, var = 0;
  for (const auto& p : px) {
    const double u = (p.x - mx) * (p.x - mx) / half_width_sq - mu;
    cov += p.w * u * (p.y - my);
    var += p.w * u * u;
  }
  if (var <= 0) return 0.0;
  return -(cov / var) / (kSmileAmplitude * scale);
}

// Mean column darkness mass over the central columns of the mouth.
double central_column_mass(const std::vector<DarkPixel>& px, double scale) {
  double total = 0, mx = 0;
  for (const auto& p : px) {
    total += p.w;
    mx += p.w * p.x;
  }
  if (total <= 0) return 0.0;
  mx /= total;
  const double half_band = 1.5 * scale;
  double mass = 0;
  for (const auto& p : px) {
    if (std::abs(p.x - mx) < half_band) mass += p.w;
  }
  return mass / (2.0 * half_band);
}

// Vertical extent through the middle of each eye over its widest row.
// Both extents scale with the eye radius, so the ratio is identity-free.
double eye_aspect(const std::vector<DarkPixel>& px, double scale) {
  double ratio_sum = 0;
  int eyes = 0;
  for (const double side : {-1.0, 1.0}) {
    double total = 0, mx = 0;
    std::map<int, double> row_mass;
    for (const auto& p : px) {
      if (p.x * side <= 0) continue;
      total += p.w;
      mx += p.w * p.x;
      row_mass[static_cast<int>(std::floor(p.y))] += p.w;
    }
    if (total <= 0) continue;
    mx /= total;
    double widest = 0;
    for (const auto& [row, mass] : row_mass) widest = std::max(widest, mass);
    const double half_band = 1.0 * scale;
    double central = 0;
    for (const auto& p : px) {
      if (p.x * side > 0 && std::abs(p.x - mx) < half_band) central += p.w;
    }
    central /= 2.0 * half_band;
    ratio_sum += central / std::max(widest, 1e-9);
    ++eyes;
  }
  return eyes > 0 ? ratio_sum / eyes : 0.0;
}

// Read-back calibration, measured on noiseless renders across identities
// (see tests/test_synthface.cpp for the grid that froze these).
constexpr double kSmileGain = 1.0;
constexpr double kYawnMassNeutral = 0.42;
constexpr double kYawnMassFull = 2.548;
constexpr double kEyeAspectOpen = 0.815;
constexpr double kEyeAspectClosed = 0.26;

}  // namespace

namespace detail {
// Raw statistics before calibration; exposed for the calibration tests.
double raw_statistic(const Image& sprite, Attribute attribute) {
  const double scale = sprite.width / 32.0;
  const HeadEstimate head = estimate_head(sprite);
  switch (attribute) {
    case Attribute::smile:
      return smile_statistic(dark_pixels(sprite, head, kMouthRegion, scale),
                             scale);
    case Attribute::yawn:
      return central_column_mass(dark_pixels(sprite, head, kMouthRegion, scale),
                                 scale);
    case Attribute::eye_closure:
      return eye_aspect(dark_pixels(sprite, head, kEyeRegion, scale), scale);
  }
  return 0.0;
}
}  // namespace detail

double measure_factor(const Image& sprite, Attribute attribute) {
  const double raw = detail::raw_statistic(sprite, attribute);
  switch (attribute) {
    case Attribute::smile:
      return kSmileGain * raw;
    case Attribute::yawn:
      return (raw - kYawnMassNeutral) / (kYawnMassFull - kYawnMassNeutral);
    case Attribute::eye_closure:
      return (kEyeAspectOpen - raw) / (kEyeAspectOpen - kEyeAspectClosed);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Sessions

void SessionSchedule::validate() const {
  require(subjects >= 1, "schedule needs at least one subject");
  require(frames_per_subject >= 1, "schedule needs at least one frame");
  require(sprite_size >= kMinSpriteSize, "sprite size must be >= 16");
  std::map<std::pair<int, Attribute>, std::vector<const ScheduledEvent*>> by;
  for (const auto& e : events) {
    require(e.subject_id >= 0 && e.subject_id < subjects,
            "event subject_id out of range");
    require(e.start_frame >= 0 && e.start_frame < e.end_frame &&
                e.end_frame <= frames_per_subject,
            "event interval must lie within [0, frames_per_subject)");
    const double lo = e.attribute == Attribute::smile ? -1.0 : 0.0;
    require(std::isfinite(e.intensity) && e.intensity != 0.0 &&
                e.intensity >= lo && e.intensity <= 1.0,
            "event intensity out of range for " +
                std::string(to_string(e.attribute)));
    by[{e.subject_id, e.attribute}].push_back(&e);
  }
  for (auto& [key, list] : by) {
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) {
      return a->start_frame < b->start_frame;
    });
    for (std::size_t i = 1; i < list.size(); ++i) {
      require(list[i]->start_frame >= list[i - 1]->end_frame,
              "overlapping " + std::string(to_string(key.second)) +
                  " events for subject " + std::to_string(key.first));
    }
  }
}

double event_profile(const ScheduledEvent& event, int frame) {
  if (frame < event.start_frame || frame >= event.end_frame) return 0.0;
  const int duration = event.end_frame - event.start_frame;
  const int ramp = std::max(1, static_cast<int>(std::lround(0.1 * duration)));
  const double up = static_cast<double>(frame - event.start_frame + 1) / ramp;
  const double down = static_cast<double>(event.end_frame - frame) / ramp;
  return event.intensity * std::min({1.0, up, down});
}

namespace {

FactorVector frame_factors(const SessionSchedule& schedule, int subject,
                           int frame, double base_noise,
                           std::uint64_t rng_seed) {
  FactorVector f;
  f.identity_seed = subject_identity(rng_seed, subject);
  std::tie(f.pose_dx, f.pose_dy) = subject_pose(rng_seed, subject);
  f.noise_seed = mix_seed(f.identity_seed, static_cast<std::uint64_t>(frame));
  f.noise_level = base_noise;
  for (const auto& e : schedule.events) {
    if (e.subject_id != subject) continue;
    const double v = event_profile(e, frame);
    if (v != 0.0) f.set(e.attribute, v);
  }
  return f;
}

}  // namespace

std::string frame_label(const SessionSchedule& schedule, int subject_id,
                        int frame) {
  std::string label;
  bool any_active = false;
  for (const Attribute a : kAllAttributes) {
    for (const auto& e : schedule.events) {
      if (e.subject_id != subject_id || e.attribute != a) continue;
      const double v = event_profile(e, frame);
      if (v == 0.0) continue;
      any_active = true;
      if (std::abs(v) > 0.5 * std::abs(e.intensity)) {
        if (!label.empty()) label += '+';
        label += to_string(a);
      }
    }
  }
  if (!label.empty()) return label;
  return any_active ? "transition" : "neutral";
}

std::uint64_t subject_identity(std::uint64_t rng_seed, int subject_id) {
  return mix_seed(rng_seed, 0x1D000000ULL + static_cast<std::uint64_t>(subject_id));
}

std::pair<double, double> subject_pose(std::uint64_t rng_seed, int subject_id) {
  const std::uint64_t s =
      mix_seed(rng_seed, 0x50000000ULL + static_cast<std::uint64_t>(subject_id));
  return {-1.5 + 3.0 * unit_draw(s, 1), -1.5 + 3.0 * unit_draw(s, 2)};
}

std::vector<SpriteFrame> generate_session(const SessionSchedule& schedule,
                                          double base_noise,
                                          std::uint64_t rng_seed) {
  schedule.validate();
  require(std::isfinite(base_noise) && base_noise >= 0.0,
          "base_noise must be >= 0");
  std::vector<SpriteFrame> frames;
  frames.reserve(static_cast<std::size_t>(schedule.subjects) *
                 schedule.frames_per_subject);
  for (int s = 0; s < schedule.subjects; ++s) {
    for (int t = 0; t < schedule.frames_per_subject; ++t) {
      SpriteFrame frame = render_sprite(
          frame_factors(schedule, s, t, base_noise, rng_seed),
          schedule.sprite_size);
      frame.subject_id = s;
      frame.frame_index = t;
      frames.push_back(std::move(frame));
    }
  }
  return frames;
}

SessionSchedule make_default_schedule(int subjects, int frames_per_subject,
                                      std::uint64_t rng_seed, int sprite_size) {
  SessionSchedule schedule;
  schedule.subjects = subjects;
  schedule.frames_per_subject = frames_per_subject;
  schedule.sprite_size = sprite_size;
  require(frames_per_subject >= 60,
          "default schedule needs at least 60 frames per subject");
  Rng rng(mix_seed(rng_seed, 0x5C4ED01EULL));
  // Split the stream into three equal slots after a neutral lead-in and put
  // one event of each attribute, in random order, inside its own slot.
  const int lead_in = frames_per_subject / 10;
  const int slot = (frames_per_subject - lead_in) / 3;
  for (int s = 0; s < subjects; ++s) {
    std::array<Attribute, 3> order = kAllAttributes;
    shuffle(order, rng);
    for (int k = 0; k < 3; ++k) {
      const int max_len = std::max(4, slot * 2 / 3);
      const int min_len = std::max(3, slot / 3);
      const int length =
          min_len + static_cast<int>(rng.below(max_len - min_len + 1));
      const int slack = slot - length;
      const int start = lead_in + k * slot +
                        static_cast<int>(rng.below(std::max(1, slack)));
      ScheduledEvent e;
      e.subject_id = s;
      e.attribute = order[k];
      e.start_frame = start;
      e.end_frame = start + length;
      e.intensity = rng.uniform(0.7, 1.0);
      schedule.events.push_back(e);
    }
  }
  schedule.validate();
  return schedule;
}

void write_schedule_csv(const SessionSchedule& schedule,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "subject_id,start_frame,end_frame,attribute,intensity\n";
  for (const auto& e : schedule.events) {
    out << e.subject_id << ',' << e.start_frame << ',' << e.end_frame << ','
        << to_string(e.attribute) << ',' << csv::format_real(e.intensity)
        << '\n';
  }
}

SessionSchedule read_schedule_csv(const std::filesystem::path& path,
                                  int subjects, int frames_per_subject,
                                  int sprite_size) {
  SessionSchedule schedule;
  schedule.subjects = subjects;
  schedule.frames_per_subject = frames_per_subject;
  schedule.sprite_size = sprite_size;
  const auto rows = csv::read_rows(
      path, "subject_id,start_frame,end_frame,attribute,intensity");
  for (const auto& row : rows) {
    require(row.size() == 5, path.string() + ": expected 5 fields per row");
    ScheduledEvent e;
    e.subject_id = static_cast<int>(csv::parse_int(row[0], "subject_id"));
    e.start_frame = static_cast<int>(csv::parse_int(row[1], "start_frame"));
    e.end_frame = static_cast<int>(csv::parse_int(row[2], "end_frame"));
    e.attribute = parse_attribute(row[3]);
    e.intensity = csv::parse_real(row[4], "intensity");
    schedule.events.push_back(e);
  }
  schedule.validate();
  return schedule;
}

std::string sprite_filename(int subject_id, int frame_index) {
  return "s" + std::to_string(subject_id) + "_f" + std::to_string(frame_index) +
         ".pgm";
}

void export_sprites(const std::vector<SpriteFrame>& frames,
                    const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  for (const auto& f : frames) {
    write_pgm(f.pixels, directory / sprite_filename(f.subject_id, f.frame_index));
  }
}

void export_ground_truth(const std::vector<SpriteFrame>& frames,
                         const SessionSchedule& schedule,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "subject_id,frame_index,smile,yawn,eye_closure,label\n";
  for (const auto& f : frames) {
    out << f.subject_id << ',' << f.frame_index << ','
        << csv::format_real(f.factors.smile) << ','
        << csv::format_real(f.factors.yawn) << ','
        << csv::format_real(f.factors.eye_closure) << ','
        << frame_label(schedule, f.subject_id, f.frame_index) << '\n';
  }
}

bool GroundTruthRow::has(Attribute attribute) const {
  for (const auto& part : csv::split(label, '+')) {
    if (part == to_string(attribute)) return true;
  }
  return false;
}

std::vector<GroundTruthRow> read_ground_truth(const std::filesystem::path& path) {
  std::vector<GroundTruthRow> out;
  for (const auto& row : csv::read_rows(
           path, "subject_id,frame_index,smile,yawn,eye_closure,label")) {
    require(row.size() == 6, path.string() + ": expected 6 fields per row");
    GroundTruthRow g;
    g.subject_id = static_cast<int>(csv::parse_int(row[0], "subject_id"));
    g.frame_index = static_cast<int>(csv::parse_int(row[1], "frame_index"));
    g.smile = csv::parse_real(row[2], "smile");
    g.yawn = csv::parse_real(row[3], "yawn");
    g.eye_closure = csv::parse_real(row[4], "eye_closure");
    g.label = row[5];
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace lglab::synth
