#include "lglab/latentlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "lglab/csv.hpp"
#include "lglab/errors.hpp"

namespace lglab::latent {

namespace {

void require_same_dim(std::size_t a, std::size_t b, std::string_view what) {
  if (a != b) {
    throw ValidationError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}

Vec mean_of(const std::vector<const Vec*>& rows, std::size_t dim) {
  Vec m(dim, 0.0);
  for (const Vec* r : rows) {
    for (std::size_t j = 0; j < dim; ++j) m[j] += (*r)[j];
  }
  for (double& v : m) v /= static_cast<double>(rows.size());
  return m;
}

Vec difference(std::span<const double> a, std::span<const double> b) {
  Vec d(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) d[j] = a[j] - b[j];
  return d;
}

}  // namespace

SubjectTrace::SubjectTrace(int subject_id, std::vector<TraceEntry> entries)
    : subject_id_(subject_id), entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].z.empty()) throw ValidationError("trace entry with empty code");
    if (i > 0) {
      if (entries_[i].frame_index <= entries_[i - 1].frame_index) {
        throw ValidationError("trace of subject " + std::to_string(subject_id) +
                              ": frame indices must be strictly increasing");
      }
      require_same_dim(entries_[i].z.size(), entries_[0].z.size(), "trace");
    }
  }
  if (!entries_.empty()) {
    std::vector<const Vec*> rows;
    for (const auto& e : entries_) rows.push_back(&e.z);
    baseline_ = mean_of(rows, entries_[0].z.size());
  }
}

int SubjectTrace::dim() const {
  return entries_.empty() ? 0 : static_cast<int>(entries_[0].z.size());
}

const Vec& SubjectTrace::baseline() const {
  if (entries_.empty()) {
    throw ValidationError("baseline of subject " + std::to_string(subject_id_) +
                          " requested from an empty trace");
  }
  return baseline_;
}

Vec subject_mean(const SubjectTrace& trace) { return trace.baseline(); }

std::string_view to_string(Rule rule) {
  switch (rule) {
    case Rule::norm_epsilon: return "norm_epsilon";
    case Rule::matched_filter: return "matched_filter";
    case Rule::signature_match: return "signature_match";
  }
  return "?";
}

Rule parse_rule(std::string_view text) {
  for (Rule r : {Rule::norm_epsilon, Rule::matched_filter, Rule::signature_match}) {
    if (to_string(r) == text) return r;
  }
  throw ValidationError("unknown detection rule '" + std::string(text) + "'");
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

std::vector<double> deviation_norms(const SubjectTrace& trace) {
  const Vec& mu = trace.baseline();
  std::vector<double> out;
  out.reserve(trace.size());
  for (const auto& e : trace.entries()) out.push_back(l2_norm(difference(e.z, mu)));
  return out;
}

std::vector<DetectionEvent> flag_anomalies(const SubjectTrace& trace, double epsilon) {
  if (!(epsilon >= 0.0)) throw ValidationError("epsilon must be >= 0");
  const std::vector<double> norms = deviation_norms(trace);
  std::vector<DetectionEvent> out;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    DetectionEvent e;
    e.subject_id = trace.subject_id();
    e.frame_index = trace.entries()[i].frame_index;
    e.rule = Rule::norm_epsilon;
    e.score = norms[i];
    e.flagged = norms[i] > epsilon;
    out.push_back(e);
  }
  return out;
}

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  if (!(p > 0.0 && p < 100.0)) throw ValidationError("percentile p must lie in (0, 100)");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double choose_epsilon(std::span<const double> deviations, double p) {
  return percentile(deviations, p);
}

double choose_epsilon(std::span<const SubjectTrace> traces, double p) {
  std::vector<double> all;
  for (const auto& t : traces) {
    if (t.empty()) continue;
    const auto d = deviation_norms(t);
    all.insert(all.end(), d.begin(), d.end());
  }
  return percentile(all, p);
}

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::diff_of_means: return "diff_of_means";
    case Strategy::positive_mean_only: return "positive_mean_only";
    case Strategy::per_subject_centered: return "per_subject_centered";
  }
  return "?";
}

Strategy parse_strategy(std::string_view text) {
  for (Strategy s : {Strategy::diff_of_means, Strategy::positive_mean_only,
                     Strategy::per_subject_centered}) {
    if (to_string(s) == text) return s;
  }
  throw ValidationError("unknown attribute strategy '" + std::string(text) +
                        "' (expected diff_of_means, positive_mean_only or per_subject_centered)");
}

AttributeVector estimate_attribute_vector(std::span<const LabeledEncoding> encodings,
                                          Strategy strategy, std::string name) {
  AttributeVector out;
  out.name = std::move(name);
  out.strategy = strategy;
  const std::size_t dim = encodings.empty() ? 0 : encodings.front().z.size();
  std::vector<const Vec*> pos, neg;
  for (const auto& e : encodings) {
    require_same_dim(e.z.size(), dim, "estimate_attribute_vector");
    (e.positive ? pos : neg).push_back(&e.z);
  }
  const std::string strategy_name(to_string(strategy));
  auto insufficient = [&](const std::string& what) {
    throw InsufficientSupportError("attribute '" + out.name + "' under strategy " +
                                   strategy_name + ": " + what);
  };

  switch (strategy) {
    case Strategy::diff_of_means: {
      if (pos.empty() || neg.empty()) insufficient("needs >= 1 positive and >= 1 negative");
      out.z_a = difference(mean_of(pos, dim), mean_of(neg, dim));
      out.n_pos = static_cast<int>(pos.size());
      out.n_neg = static_cast<int>(neg.size());
      break;
    }
    case Strategy::positive_mean_only: {
      if (pos.empty()) insufficient("needs >= 1 positive");
      out.z_a = mean_of(pos, dim);
      out.n_pos = static_cast<int>(pos.size());
      out.n_neg = static_cast<int>(neg.size());
      break;
    }
    case Strategy::per_subject_centered: {
      std::map<int, std::vector<const Vec*>> negatives;
      for (const auto& e : encodings) {
        if (!e.positive) negatives[e.subject_id].push_back(&e.z);
      }
      std::map<int, Vec> baselines;
      for (const auto& [subject, rows] : negatives) baselines[subject] = mean_of(rows, dim);
      Vec sum(dim, 0.0);
      int used = 0;
      for (const auto& e : encodings) {
        if (!e.positive) continue;
        const auto it = baselines.find(e.subject_id);
        if (it == baselines.end()) continue;
        for (std::size_t j = 0; j < dim; ++j) sum[j] += e.z[j] - it->second[j];
        ++used;
      }
      if (used == 0 || neg.empty()) {
        insufficient("needs a positive from a subject that also has negatives");
      }
      for (double& v : sum) v /= used;
      out.z_a = std::move(sum);
      out.n_pos = used;
      out.n_neg = static_cast<int>(neg.size());
      break;
    }
  }
  for (const double v : out.z_a) {
    if (!std::isfinite(v)) throw ValidationError("attribute vector is not finite");
  }
  return out;
}

Vec apply_attribute(std::span<const double> z, std::span<const double> z_a, double alpha) {
  require_same_dim(z.size(), z_a.size(), "apply_attribute");
  Vec out(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] + alpha * z_a[j];
  return out;
}

std::vector<FrameScore> matched_filter_scores(const SubjectTrace& trace,
                                              std::span<const double> z_a,
                                              Centering centering) {
  std::vector<FrameScore> out;
  if (trace.empty()) return out;
  require_same_dim(static_cast<std::size_t>(trace.dim()), z_a.size(), "matched_filter_scores");
  const Vec& mu = trace.baseline();
  for (const auto& e : trace.entries()) {
    const double s = centering == Centering::per_subject ? dot(difference(e.z, mu), z_a)
                                                         : dot(e.z, z_a);
    out.push_back({e.frame_index, s});
  }
  return out;
}

std::vector<DetectionEvent> detect_signature(const SubjectTrace& trace,
                                             std::span<const double> z_a, double cos_min,
                                             NormBand band, const std::string& attribute) {
  if (!(cos_min > 0.0 && cos_min <= 1.0)) throw ValidationError("cos_min must lie in (0, 1]");
  if (!(band.lo > 0.0 && band.lo <= band.hi)) {
    throw ValidationError("norm_band must satisfy 0 < lo <= hi");
  }
  const double za_sq = dot(z_a, z_a);
  if (za_sq == 0.0) throw ValidationError("detect_signature: attribute vector has zero norm");
  std::vector<DetectionEvent> out;
  if (trace.empty()) return out;
  require_same_dim(static_cast<std::size_t>(trace.dim()), z_a.size(), "detect_signature");
  const Vec& mu = trace.baseline();
  for (const auto& e : trace.entries()) {
    const Vec d = difference(e.z, mu);
    const double d_sq = dot(d, d);
    // One square root of the product keeps cos(z_a, z_a) at exactly 1.
    const double cosine =
        d_sq == 0.0 ? 0.0 : std::clamp(dot(d, z_a) / std::sqrt(d_sq * za_sq), -1.0, 1.0);
    const double ratio = std::sqrt(d_sq / za_sq);
    DetectionEvent ev;
    ev.subject_id = trace.subject_id();
    ev.frame_index = e.frame_index;
    ev.attribute = attribute;
    ev.rule = Rule::signature_match;
    ev.score = cosine;
    ev.flagged = cosine >= cos_min && ratio >= band.lo && ratio <= band.hi;
    out.push_back(std::move(ev));
  }
  return out;
}

double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ValidationError("roc_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with average ranks over tied groups.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw InsufficientSupportError("roc_auc needs at least one positive and one negative");
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2.0) / (np * static_cast<double>(n_neg));
}

void write_latent_traces(std::span<const SubjectTrace> traces,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  int dim = 0;
  for (const auto& t : traces) {
    if (t.empty()) continue;
    if (dim == 0) dim = t.dim();
    require_same_dim(t.dim(), dim, "write_latent_traces");
  }
  out << "subject_id,frame_index";
  for (int j = 0; j < dim; ++j) out << ",z_" << j;
  out << '\n';
  for (const auto& t : traces) {
    for (const auto& e : t.entries()) {
      out << t.subject_id() << ',' << e.frame_index;
      for (const double v : e.z) out << ',' << csv::format_real(v);
      out << '\n';
    }
  }
}

std::vector<SubjectTrace> read_latent_traces(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  const auto columns = csv::split(header);
  if (columns.size() < 3 || columns[0] != "subject_id" || columns[1] != "frame_index") {
    throw ValidationError(path.string() + ": not a latent trace file");
  }
  const std::size_t dim = columns.size() - 2;
  for (std::size_t j = 0; j < dim; ++j) {
    if (columns[j + 2] != "z_" + std::to_string(j)) {
      throw ValidationError(path.string() + ": unexpected column '" + columns[j + 2] + "'");
    }
  }
  std::vector<int> order;
  std::map<int, std::vector<TraceEntry>> grouped;
  for (const auto& row : csv::read_rows(path, header)) {
    if (row.size() != dim + 2) throw ValidationError(path.string() + ": ragged row");
    const int subject = static_cast<int>(csv::parse_int(row[0], "subject_id"));
    TraceEntry e;
    e.frame_index = static_cast<int>(csv::parse_int(row[1], "frame_index"));
    for (std::size_t j = 0; j < dim; ++j) e.z.push_back(csv::parse_real(row[j + 2], "z"));
    if (!grouped.contains(subject)) order.push_back(subject);
    grouped[subject].push_back(std::move(e));
  }
  std::vector<SubjectTrace> traces;
  for (const int s : order) traces.emplace_back(s, std::move(grouped[s]));
  return traces;
}

namespace {
constexpr std::string_view kDetectionHeader = "subject_id,frame_index,attribute,rule,score,flagged";
}

void write_detection_report(std::span<const DetectionEvent> events,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << kDetectionHeader << '\n';
  for (const auto& e : events) {
    out << e.subject_id << ',' << e.frame_index << ',' << e.attribute << ','
        << to_string(e.rule) << ',' << csv::format_real(e.score) << ','
        << (e.flagged ? 1 : 0) << '\n';
  }
}

std::vector<DetectionEvent> read_detection_report(const std::filesystem::path& path) {
  std::vector<DetectionEvent> out;
  for (const auto& row : csv::read_rows(path, kDetectionHeader)) {
    if (row.size() != 6) throw ValidationError(path.string() + ": expected 6 fields per row");
    DetectionEvent e;
    e.subject_id = static_cast<int>(csv::parse_int(row[0], "subject_id"));
    e.frame_index = static_cast<int>(csv::parse_int(row[1], "frame_index"));
    e.attribute = row[2];
    e.rule = parse_rule(row[3]);
    e.score = csv::parse_real(row[4], "score");
    const long long flag = csv::parse_int(row[5], "flagged");
    if (flag != 0 && flag != 1) throw ValidationError("flagged must be 0 or 1");
    e.flagged = flag == 1;
    out.push_back(std::move(e));
  }
  return out;
}

void write_attribute_vector(const AttributeVector& vector, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << vector.name << ',' << to_string(vector.strategy) << ',' << vector.n_pos << ','
      << vector.n_neg << '\n';
  for (std::size_t j = 0; j < vector.z_a.size(); ++j) {
    out << (j ? "," : "") << csv::format_real(vector.z_a[j]);
  }
  out << '\n';
}

AttributeVector read_attribute_vector(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string first, second;
  if (!std::getline(in, first) || !std::getline(in, second)) {
    throw ValidationError(path.string() + ": attribute vector file needs two lines");
  }
  const auto head = csv::split(first);
  if (head.size() != 4) throw ValidationError(path.string() + ": bad attribute header line");
  AttributeVector v;
  v.name = head[0];
  v.strategy = parse_strategy(head[1]);
  v.n_pos = static_cast<int>(csv::parse_int(head[2], "n_pos"));
  v.n_neg = static_cast<int>(csv::parse_int(head[3], "n_neg"));
  for (const auto& f : csv::split(second)) v.z_a.push_back(csv::parse_real(f, "z_a"));
  return v;
}

}  // namespace lglab::latent
