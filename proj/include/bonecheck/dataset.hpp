#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/image.hpp"
#include "bonecheck/rng.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

namespace fs = std::filesystem;

enum class StudyType { elbow, finger, forearm, hand, humerus, shoulder, wrist };

inline constexpr std::array<StudyType, 7> kStudyTypes = {StudyType::elbow,   StudyType::finger,   StudyType::forearm,
                                                         StudyType::hand,    StudyType::humerus,  StudyType::shoulder,
                                                         StudyType::wrist};

inline std::string_view to_string(StudyType t) {
  switch (t) {
    case StudyType::elbow: return "elbow";
    case StudyType::finger: return "finger";
    case StudyType::forearm: return "forearm";
    case StudyType::hand: return "hand";
    case StudyType::humerus: return "humerus";
    case StudyType::shoulder: return "shoulder";
    case StudyType::wrist: return "wrist";
  }
  return "?";
}

inline std::optional<StudyType> study_type_from_string(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (StudyType t : kStudyTypes)
    if (to_string(t) == lower) return t;
  return std::nullopt;
}

inline std::string study_type_folder(StudyType t) {
  std::string upper(to_string(t));
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  return "XR_" + upper;
}

/// Study-level ground truth. The training target y is 1 for normal and 0 for abnormal.
enum class Label { abnormal = 0, normal = 1 };

inline std::string_view to_string(Label l) { return l == Label::normal ? "normal" : "abnormal"; }
inline int label_code(Label l) { return l == Label::normal ? 1 : 0; }
inline Label label_from_code(int y) {
  if (y != 0 && y != 1) throw InvalidArgument("label code must be 0 or 1, got " + std::to_string(y));
  return y == 1 ? Label::normal : Label::abnormal;
}
inline std::optional<Label> label_from_string(std::string_view s) {
  if (s == "normal") return Label::normal;
  if (s == "abnormal") return Label::abnormal;
  return std::nullopt;
}

/// One patient encounter: a labelled study with one or more views.
struct StudyRecord {
  StudyType study_type = StudyType::elbow;
  std::string patient_id;
  int study_index = 1;
  Label label = Label::normal;
  std::vector<fs::path> view_paths;

  /// "XR_WRIST/patient11185/study1"
  std::string id() const {
    return study_type_folder(study_type) + "/patient" + patient_id + "/study" + std::to_string(study_index);
  }
};

struct DatasetManifest {
  std::string split;
  std::vector<StudyRecord> studies;

  std::map<std::pair<StudyType, Label>, std::size_t> counts() const {
    std::map<std::pair<StudyType, Label>, std::size_t> out;
    for (const auto& s : studies) ++out[{s.study_type, s.label}];
    return out;
  }

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(
        std::count_if(studies.begin(), studies.end(), [l](const StudyRecord& s) { return s.label == l; }));
  }

  std::size_t view_count() const {
    std::size_t n = 0;
    for (const auto& s : studies) n += s.view_paths.size();
    return n;
  }
};

/// Components of a view path following
/// root/{split}/XR_{TYPE}/patient{ID}/study{N}_{positive|negative}/image{K}.png.
struct ViewPathParts {
  std::string split;
  StudyType study_type;
  std::string patient_id;
  int study_index;
  Label label;
};

namespace detail {

inline const std::regex& study_type_re() {
  static const std::regex re("XR_([A-Z]+)");
  return re;
}
inline const std::regex& patient_re() {
  static const std::regex re("patient([0-9A-Za-z]+)");
  return re;
}
inline const std::regex& study_re() {
  static const std::regex re("study([0-9]+)_(positive|negative)");
  return re;
}
inline const std::regex& image_re() {
  static const std::regex re("image[0-9]+\\.png");
  return re;
}

inline std::optional<StudyType> parse_type_dir(const std::string& name) {
  std::smatch m;
  if (!std::regex_match(name, m, study_type_re())) return std::nullopt;
  return study_type_from_string(m[1].str());
}

inline std::optional<std::pair<int, Label>> parse_study_dir(const std::string& name) {
  std::smatch m;
  if (!std::regex_match(name, m, study_re())) return std::nullopt;
  const int index = std::stoi(m[1].str());
  if (index < 1) return std::nullopt;
  // The public dataset marks abnormal studies "positive".
  return std::pair{index, m[2].str() == "positive" ? Label::abnormal : Label::normal};
}

inline std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return out;
}

}  // namespace detail

inline ViewPathParts parse_view_path(const fs::path& path) {
  const fs::path study = path.parent_path();
  const fs::path patient = study.parent_path();
  const fs::path type = patient.parent_path();
  const fs::path split = type.parent_path();
  auto bad = [&](const std::string& why) { return DataError("malformed view path " + path.string() + ": " + why); };
  if (!std::regex_match(path.filename().string(), detail::image_re())) throw bad("file name is not image{K}.png");
  auto st = detail::parse_study_dir(study.filename().string());
  if (!st) throw bad("study directory is not study{N}_{positive|negative}");
  std::smatch m;
  const std::string pname = patient.filename().string();
  if (!std::regex_match(pname, m, detail::patient_re())) throw bad("patient directory is not patient{ID}");
  auto t = detail::parse_type_dir(type.filename().string());
  if (!t) throw bad("study type directory is not XR_{TYPE}");
  return ViewPathParts{split.filename().string(), *t, m[1].str(), st->first, st->second};
}

struct ScanOptions {
  /// When set, malformed entries are skipped and reported instead of failing.
  bool skip_malformed = false;
  std::vector<std::string>* warnings = nullptr;
};

/// Walks root/{split}/XR_{TYPE}/patient{ID}/study{N}_{label}/image{K}.png.
/// Studies come out in lexicographic path order.
inline DatasetManifest scan_dataset(const fs::path& root, const std::string& split, const ScanOptions& opts = {}) {
  const fs::path base = root / split;
  if (!fs::is_directory(base)) throw DataError("dataset split directory not found: " + base.string());

  auto malformed = [&](const fs::path& p, const std::string& why) {
    const std::string msg = "malformed dataset entry " + p.string() + ": " + why;
    if (!opts.skip_malformed) throw DataError(msg);
    if (opts.warnings) opts.warnings->push_back(msg);
  };

  DatasetManifest manifest;
  manifest.split = split;
  for (const auto& type_dir : detail::sorted_entries(base)) {
    if (!fs::is_directory(type_dir)) continue;
    auto type = detail::parse_type_dir(type_dir.filename().string());
    if (!type) {
      malformed(type_dir, "expected XR_{TYPE} with TYPE in elbow..wrist");
      continue;
    }
    for (const auto& patient_dir : detail::sorted_entries(type_dir)) {
      if (!fs::is_directory(patient_dir)) continue;
      std::smatch m;
      const std::string pname = patient_dir.filename().string();
      if (!std::regex_match(pname, m, detail::patient_re())) {
        malformed(patient_dir, "expected patient{ID}");
        continue;
      }
      const std::string patient_id = m[1].str();
      for (const auto& study_dir : detail::sorted_entries(patient_dir)) {
        if (!fs::is_directory(study_dir)) continue;
        auto st = detail::parse_study_dir(study_dir.filename().string());
        if (!st) {
          malformed(study_dir, "expected study{N}_{positive|negative}");
          continue;
        }
        StudyRecord rec{*type, patient_id, st->first, st->second, {}};
        for (const auto& f : detail::sorted_entries(study_dir)) {
          if (fs::is_regular_file(f) && std::regex_match(f.filename().string(), detail::image_re())) {
            rec.view_paths.push_back(f);
          }
        }
        if (rec.view_paths.empty()) {
          malformed(study_dir, "study has no image{K}.png views");
          continue;
        }
        manifest.studies.push_back(std::move(rec));
      }
    }
  }
  if (manifest.studies.empty()) throw DataError("dataset split " + base.string() + " contains no studies");
  return manifest;
}

/// Throws when a study id appears in both manifests.
inline void check_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
  std::set<std::string> ids;
  for (const auto& s : a.studies) ids.insert(s.id());
  for (const auto& s : b.studies) {
    if (ids.count(s.id())) {
      throw DataError("study " + s.id() + " appears in both the " + a.split + " and " + b.split + " splits");
    }
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline constexpr std::string_view kManifestCsvHeader = "path,study_type,patient_id,study_id,label";

/// Reads a manifest CSV. Relative image paths resolve against the CSV's directory.
/// Rows sharing (study_type, patient_id, study_id) form one study; the label must agree.
inline DatasetManifest load_manifest_csv(const fs::path& csv, const std::string& split) {
  std::ifstream in(csv);
  if (!in) throw DataError("cannot open manifest " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest " + csv.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (line != kManifestCsvHeader) {
    throw FormatError("manifest " + csv.string() + ": header must be '" + std::string(kManifestCsvHeader) + "'");
  }
  DatasetManifest manifest;
  manifest.split = split;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = detail::split_csv_line(line);
    auto bad = [&](const std::string& why) {
      return FormatError("manifest " + csv.string() + " line " + std::to_string(line_no) + ": " + why);
    };
    if (f.size() != 5) throw bad("expected 5 fields");
    auto type = study_type_from_string(f[1]);
    if (!type) throw bad("unknown study_type '" + f[1] + "'");
    auto label = label_from_string(f[4]);
    if (!label) throw bad("label must be normal or abnormal");
    int study_id = 0;
    try {
      study_id = std::stoi(f[3]);
    } catch (const std::exception&) {
      throw bad("study_id must be an integer");
    }
    fs::path p = f[0];
    if (p.is_relative()) p = csv.parent_path() / p;
    const std::string key = f[1] + "/" + f[2] + "/" + f[3];
    auto it = index.find(key);
    if (it == index.end()) {
      index[key] = manifest.studies.size();
      manifest.studies.push_back(StudyRecord{*type, f[2], study_id, *label, {p}});
    } else {
      StudyRecord& rec = manifest.studies[it->second];
      if (rec.label != *label) throw bad("views of study " + rec.id() + " disagree on the label");
      rec.view_paths.push_back(p);
    }
  }
  if (manifest.studies.empty()) throw DataError("manifest " + csv.string() + " lists no studies");
  return manifest;
}

/// Writes a manifest CSV with paths relative to `relative_to`.
inline void write_manifest_csv(const DatasetManifest& manifest, const fs::path& csv, const fs::path& relative_to) {
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + csv.string());
  out << kManifestCsvHeader << '\n';
  for (const auto& s : manifest.studies) {
    for (const auto& v : s.view_paths) {
      out << detail::csv_field(v.lexically_relative(relative_to).generic_string()) << ',' << to_string(s.study_type)
          << ',' << detail::csv_field(s.patient_id) << ',' << s.study_index << ',' << to_string(s.label) << '\n';
    }
  }
  if (!out) throw DataError("failed writing manifest " + csv.string());
}

struct ClassWeights {
  double normal = 1.0;
  double abnormal = 1.0;

  double of(Label l) const { return l == Label::normal ? normal : abnormal; }
};

/// Balanced heuristic: w_c = total / (2 * n_c). The minority class gets the larger weight.
inline ClassWeights compute_class_weights(std::size_t n_normal, std::size_t n_abnormal) {
  if (n_normal == 0 || n_abnormal == 0) {
    throw DataError("class weights need both classes present (normal=" + std::to_string(n_normal) +
                    ", abnormal=" + std::to_string(n_abnormal) + ")");
  }
  const double total = static_cast<double>(n_normal + n_abnormal);
  return ClassWeights{total / (2.0 * static_cast<double>(n_normal)), total / (2.0 * static_cast<double>(n_abnormal))};
}

inline ClassWeights compute_class_weights(const DatasetManifest& manifest) {
  return compute_class_weights(manifest.count(Label::normal), manifest.count(Label::abnormal));
}

/// A single radiograph view carrying its study's label.
struct ViewSample {
  fs::path path;
  StudyType study_type = StudyType::elbow;
  std::string study_id;
  Label label = Label::normal;
  float weight = 1.0f;
};

/// Flattens studies into views in manifest order. `weights` (if given) sets
/// each sample's loss weight from its label.
inline std::vector<ViewSample> flatten_views(const DatasetManifest& manifest,
                                             const std::optional<ClassWeights>& weights = std::nullopt) {
  std::vector<ViewSample> out;
  for (const auto& s : manifest.studies) {
    for (const auto& v : s.view_paths) {
      out.push_back(ViewSample{v, s.study_type, s.id(), s.label,
                               weights ? static_cast<float>(weights->of(s.label)) : 1.0f});
    }
  }
  return out;
}

/// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

struct Batch {
  Tensor<float> images;  // (B,1,H,W)
  std::vector<float> labels;
  std::vector<float> weights;
  std::vector<std::string> study_ids;
  std::vector<std::size_t> indices;  // positions in the view list
};

/// Mini-batch stream over a view list. Each epoch visits every view exactly
/// once; the last batch may be short. With shuffling, epoch `e` uses the
/// permutation seeded by (seed, e).
class BatchIterator {
 public:
  /// Produces the (1,H,W) image for view `index`, at `position` within the epoch.
  using Loader = std::function<Tensor<float>(const ViewSample&, std::size_t index, std::size_t epoch, std::size_t position)>;

  BatchIterator(std::vector<ViewSample> views, std::size_t batch_size, bool shuffle, std::uint64_t seed, Loader loader)
      : views_(std::move(views)), batch_size_(batch_size), shuffle_(shuffle), seed_(seed), loader_(std::move(loader)) {
    if (batch_size_ == 0) throw InvalidArgument("batch_size must be at least 1");
    if (views_.empty()) throw DataError("cannot iterate an empty split");
    start_epoch(0);
  }

  const std::vector<ViewSample>& views() const { return views_; }
  std::size_t batches_per_epoch() const { return (views_.size() + batch_size_ - 1) / batch_size_; }

  /// View indices in visiting order for `epoch`.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    if (!shuffle_) return seeded_permutation_identity();
    return seeded_permutation(views_.size(), derive_seed(seed_, 0xBA7C4, epoch));
  }

  void start_epoch(std::size_t epoch) {
    epoch_ = epoch;
    order_ = epoch_order(epoch);
    cursor_ = 0;
  }

  bool next(Batch& batch) {
    if (cursor_ >= order_.size()) return false;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    const std::size_t B = end - cursor_;
    batch.labels.clear();
    batch.weights.clear();
    batch.study_ids.clear();
    batch.indices.clear();
    std::vector<float> pixels;
    Shape image_shape;
    for (std::size_t k = cursor_; k < end; ++k) {
      const std::size_t idx = order_[k];
      const ViewSample& v = views_[idx];
      Tensor<float> img = loader_(v, idx, epoch_, k);
      if (image_shape.empty()) {
        image_shape = img.shape();
        pixels.reserve(B * img.size());
      } else if (img.shape() != image_shape) {
        throw ShapeError("view " + v.path.string() + " has shape " + shape_string(img.shape()) + ", expected " +
                         shape_string(image_shape));
      }
      pixels.insert(pixels.end(), img.values().begin(), img.values().end());
      batch.labels.push_back(static_cast<float>(label_code(v.label)));
      batch.weights.push_back(v.weight);
      batch.study_ids.push_back(v.study_id);
      batch.indices.push_back(idx);
    }
    Shape shape{B};
    shape.insert(shape.end(), image_shape.begin(), image_shape.end());
    batch.images = Tensor<float>(std::move(shape), std::move(pixels));
    cursor_ = end;
    return true;
  }

 private:
  std::vector<std::size_t> seeded_permutation_identity() const {
    std::vector<std::size_t> order(views_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    return order;
  }

  std::vector<ViewSample> views_;
  std::size_t batch_size_;
  bool shuffle_;
  std::uint64_t seed_;
  Loader loader_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace bonecheck
