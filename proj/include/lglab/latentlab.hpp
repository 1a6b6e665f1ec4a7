#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Analysis of latent codes: per-subject baselines and deviation flagging,
// attribute vectors and their application, and dot-product detection.
namespace lglab::latent {

using Vec = std::vector<double>;

struct TraceEntry {
  int frame_index = 0;
  Vec z;
};

// One subject's codes in frame order. The baseline is computed once at
// construction; reading it from an empty trace throws.
class SubjectTrace {
 public:
  SubjectTrace() = default;
  SubjectTrace(int subject_id, std::vector<TraceEntry> entries);

  int subject_id() const { return subject_id_; }
  const std::vector<TraceEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int dim() const;
  const Vec& baseline() const;

 private:
  int subject_id_ = 0;
  std::vector<TraceEntry> entries_;
  Vec baseline_;
};

Vec subject_mean(const SubjectTrace& trace);

enum class Rule { norm_epsilon, matched_filter, signature_match };
std::string_view to_string(Rule rule);
Rule parse_rule(std::string_view text);

struct DetectionEvent {
  int subject_id = 0;
  int frame_index = 0;
  std::string attribute;  // empty for norm_epsilon
  Rule rule = Rule::norm_epsilon;
  double score = 0.0;
  bool flagged = false;
};

double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

// ||z - mu_i|| per entry.
std::vector<double> deviation_norms(const SubjectTrace& trace);

// Flags entries whose deviation norm exceeds epsilon; score = norm.
std::vector<DetectionEvent> flag_anomalies(const SubjectTrace& trace, double epsilon);

// p-th percentile with linear interpolation between order statistics.
double percentile(std::span<const double> values, double p);
double choose_epsilon(std::span<const double> deviations, double p);
double choose_epsilon(std::span<const SubjectTrace> traces, double p);

enum class Strategy { diff_of_means, positive_mean_only, per_subject_centered };
std::string_view to_string(Strategy strategy);
Strategy parse_strategy(std::string_view text);

struct LabeledEncoding {
  Vec z;
  int subject_id = 0;
  bool positive = false;
};

struct AttributeVector {
  std::string name;
  Vec z_a;
  Strategy strategy = Strategy::diff_of_means;
  int n_pos = 0;
  int n_neg = 0;

  bool operator==(const AttributeVector&) const = default;
};

// diff_of_means: mean(pos) - mean(neg). positive_mean_only: mean(pos).
// per_subject_centered: mean over positives of z - mu_s, where mu_s averages
// subject s's negatives only; positives of subjects without negatives are
// left out and not counted in n_pos. Throws InsufficientSupportError naming
// the strategy when the counts fall short.
AttributeVector estimate_attribute_vector(std::span<const LabeledEncoding> encodings,
                                          Strategy strategy, std::string name = {});

Vec apply_attribute(std::span<const double> z, std::span<const double> z_a, double alpha);

enum class Centering { none, per_subject };

struct FrameScore {
  int frame_index = 0;
  double score = 0.0;
};

// z_a . z, or z_a . (z - mu_i) with per-subject centering.
std::vector<FrameScore> matched_filter_scores(const SubjectTrace& trace,
                                              std::span<const double> z_a,
                                              Centering centering = Centering::per_subject);

struct NormBand {
  double lo = 0.5;
  double hi = 2.0;
};

inline constexpr double kDefaultCosMin = 0.6;

// d = z - mu_i is flagged when cos(d, z_a) >= cos_min and ||d|| / ||z_a||
// lies in the band; score = cos(d, z_a) (0 when d = 0).
std::vector<DetectionEvent> detect_signature(const SubjectTrace& trace,
                                             std::span<const double> z_a,
                                             double cos_min = kDefaultCosMin,
                                             NormBand band = {},
                                             const std::string& attribute = {});

// Area under the ROC curve; ties between a positive and a negative count
// one half. Needs at least one of each class.
double roc_auc(std::span<const double> scores, const std::vector<bool>& positive);

// subject_id,frame_index,z_0,...,z_{D-1}
void write_latent_traces(std::span<const SubjectTrace> traces,
                         const std::filesystem::path& path);
std::vector<SubjectTrace> read_latent_traces(const std::filesystem::path& path);

// subject_id,frame_index,attribute,rule,score,flagged
void write_detection_report(std::span<const DetectionEvent> events,
                            const std::filesystem::path& path);
std::vector<DetectionEvent> read_detection_report(const std::filesystem::path& path);

// Line 1: name,strategy,n_pos,n_neg. Line 2: the D coordinates.
void write_attribute_vector(const AttributeVector& vector, const std::filesystem::path& path);
AttributeVector read_attribute_vector(const std::filesystem::path& path);

}  // namespace lglab::latent
