#pragma once

// Seeded synthetic radiographs in the dataset directory layout. Normal views
// show one continuous bright elongated "bone"; abnormal views show the same
// shape with a transverse gap or an angular break.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bonecheck/dataset.hpp"
#include "bonecheck/image.hpp"
#include "bonecheck/rng.hpp"

namespace bonecheck {

struct SyntheticSpec {
  std::size_t train_studies = 2;  // per study type per label
  std::size_t valid_studies = 0;
  std::size_t min_views = 1;
  std::size_t max_views = 3;
  std::size_t image_size = 64;
  std::vector<StudyType> types{kStudyTypes.begin(), kStudyTypes.end()};
  /// Gap length as a fraction of the image size.
  double gap_fraction = 0.12;
  /// Bend angle range of an angular break, degrees.
  double break_angle_min_deg = 35.0;
  double break_angle_max_deg = 60.0;
  double noise_sd = 8.0;

  void validate() const {
    if (min_views == 0 || max_views < min_views) throw InvalidArgument("views per study must satisfy 1 <= min <= max");
    if (image_size < 8) throw InvalidArgument("synthetic image size must be at least 8");
    if (types.empty()) throw InvalidArgument("synthetic dataset needs at least one study type");
    if (train_studies + valid_studies == 0) throw InvalidArgument("synthetic dataset needs at least one study");
    if (!(gap_fraction > 0 && gap_fraction < 0.5)) throw InvalidArgument("gap_fraction must lie in (0, 0.5)");
  }
};

/// What the generator wrote, for round-trip checks against scan_dataset.
struct SyntheticLedger {
  std::map<std::string, std::map<std::pair<StudyType, Label>, std::size_t>> counts;  // split -> tallies
  std::size_t studies = 0;
  std::size_t images = 0;
};

namespace detail {

struct BoneShape {
  double thickness;  // fraction of image size (half-width)
  double length;     // fraction of image size
};

inline BoneShape bone_shape(StudyType t) {
  switch (t) {
    case StudyType::elbow: return {0.075, 0.70};
    case StudyType::finger: return {0.055, 0.55};
    case StudyType::forearm: return {0.065, 0.80};
    case StudyType::hand: return {0.060, 0.60};
    case StudyType::humerus: return {0.090, 0.80};
    case StudyType::shoulder: return {0.095, 0.65};
    case StudyType::wrist: return {0.070, 0.62};
  }
  return {0.07, 0.7};
}

struct Segment {
  double x0, y0, x1, y1;
};

inline double segment_distance(const Segment& s, double px, double py) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

inline GrayImage draw_radiograph(const SyntheticSpec& spec, StudyType type, Label label, Rng& rng) {
  const double n = static_cast<double>(spec.image_size);
  const BoneShape shape = bone_shape(type);
  const double radius = std::max(1.5, shape.thickness * n * rng.uniform(0.85, 1.15));
  const double length = shape.length * n * rng.uniform(0.9, 1.05);
  const double theta = rng.uniform(0.0, 3.14159265358979323846);
  const double cx = n / 2 + rng.uniform(-n / 10, n / 10), cy = n / 2 + rng.uniform(-n / 10, n / 10);
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double ax = cx - ux * length / 2, ay = cy - uy * length / 2;

  std::vector<Segment> segments;
  if (label == Label::normal) {
    segments.push_back({ax, ay, ax + ux * length, ay + uy * length});
  } else {
    const double t = rng.uniform(0.35, 0.65) * length;
    const double gap = std::max(2.0, spec.gap_fraction * n * rng.uniform(0.8, 1.2));
    const double bx = ax + ux * t, by = ay + uy * t;
    segments.push_back({ax, ay, bx - ux * gap / 2, by - uy * gap / 2});
    if (rng.bernoulli(0.5)) {
      // transverse gap
      segments.push_back({bx + ux * gap / 2, by + uy * gap / 2, ax + ux * length, ay + uy * length});
    } else {
      // angular break: the distal part bends away after a narrower gap
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const double bend = sign * rng.uniform(spec.break_angle_min_deg, spec.break_angle_max_deg) *
                          3.14159265358979323846 / 180.0;
      const double vx = ux * std::cos(bend) - uy * std::sin(bend);
      const double vy = ux * std::sin(bend) + uy * std::cos(bend);
      const double sx = bx + vx * gap / 2, sy = by + vy * gap / 2;
      segments.push_back({sx, sy, sx + vx * (length - t), sy + vy * (length - t)});
    }
  }

  const double background = rng.uniform(25.0, 45.0);
  const double bone = rng.uniform(170.0, 200.0);
  GrayImage img;
  img.width = img.height = spec.image_size;
  img.pixels.resize(spec.image_size * spec.image_size);
  for (std::size_t y = 0; y < spec.image_size; ++y) {
    for (std::size_t x = 0; x < spec.image_size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double d = 1e9;
      for (const auto& s : segments) d = std::min(d, segment_distance(s, px, py));
      // soft edge over one pixel
      const double cover = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      const double v = background + cover * (bone - background) + spec.noise_sd * rng.normal();
      img.pixels[y * spec.image_size + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return img;
}

}  // namespace detail

/// Writes out_root/{split}/XR_{TYPE}/patient{ID}/study1_{positive|negative}/image{K}.png
/// plus out_root/manifest_{split}.csv. Output is a pure function of (spec, seed).
inline SyntheticLedger generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed,
                                                  const fs::path& out_root) {
  spec.validate();
  Rng rng(seed);
  SyntheticLedger ledger;
  std::size_t patient = 0;
  fs::create_directories(out_root);
  for (const auto& [split, per_class] : {std::pair<std::string, std::size_t>{"train", spec.train_studies},
                                         {"valid", spec.valid_studies}}) {
    if (per_class == 0) continue;
    DatasetManifest manifest;
    manifest.split = split;
    for (StudyType type : spec.types) {
      for (Label label : {Label::normal, Label::abnormal}) {
        for (std::size_t k = 0; k < per_class; ++k) {
          ++patient;
          char pid[16];
          std::snprintf(pid, sizeof pid, "%05zu", patient);
          StudyRecord rec{type, pid, 1, label, {}};
          const fs::path dir = out_root / split / study_type_folder(type) / ("patient" + std::string(pid)) /
                               (std::string("study1_") + (label == Label::abnormal ? "positive" : "negative"));
          fs::create_directories(dir);
          const std::size_t views = spec.min_views + rng.below(spec.max_views - spec.min_views + 1);
          for (std::size_t v = 1; v <= views; ++v) {
            const fs::path file = dir / ("image" + std::to_string(v) + ".png");
            write_file_bytes(file, encode_png(detail::draw_radiograph(spec, type, label, rng)));
            rec.view_paths.push_back(file);
            ++ledger.images;
          }
          ++ledger.counts[split][{type, label}];
          ++ledger.studies;
          manifest.studies.push_back(std::move(rec));
        }
      }
    }
    write_manifest_csv(manifest, out_root / ("manifest_" + split + ".csv"), out_root);
  }
  return ledger;
}

}  // namespace bonecheck
