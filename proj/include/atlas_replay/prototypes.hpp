#pragma once

// Privacy-preserving prototypes: r cases rigidly aligned and folded into a
// pairwise running average, scans and soft masks alike.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "atlas_replay/container.hpp"
#include "atlas_replay/dataset.hpp"
#include "atlas_replay/image.hpp"
#include "atlas_replay/rng.hpp"

namespace atlas_replay {

struct Prototype {
  Image scan;
  Image mask;  // soft, in [0,1]
  std::string domain_tag;
  std::size_t r = 0;
  std::vector<std::string> constituent_ids;  // fnv1a hex of case ids

  friend bool operator==(const Prototype&, const Prototype&) = default;
};

struct PrototypeAtlas {
  std::vector<Prototype> prototypes;

  std::size_t size() const { return prototypes.size(); }
  bool empty() const { return prototypes.empty(); }
  const Prototype* find(const std::string& tag) const {
    for (const auto& p : prototypes)
      if (p.domain_tag == tag) return &p;
    return nullptr;
  }

  friend bool operator==(const PrototypeAtlas&, const PrototypeAtlas&) = default;
};

inline std::string hashed_id(const std::string& id) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(id)));
  return buf;
}

/// Maps (moving, fixed) to the transform aligning moving onto fixed.
using Aligner = std::function<RigidTransform(const Image&, const Image&)>;

inline RigidTransform default_aligner(const Image& moving, const Image& fixed) { return rigid_align(moving, fixed); }

/// Indices of the r cases drawn for a prototype, in fold order.
inline std::vector<std::size_t> prototype_draw(const TaskDataset& dataset, std::size_t r, std::uint64_t seed) {
  if (r == 0) throw ContractViolation("build_prototype: r must be >= 1");
  if (dataset.train.size() < r) {
    throw InsufficientData("build_prototype: domain " + dataset.domain_tag + " has " +
                           std::to_string(dataset.train.size()) + " training cases, need " + std::to_string(r));
  }
  Rng rng(derive_seed(seed, fnv1a("prototype"), fnv1a(dataset.domain_tag)));
  return sample_without_replacement(dataset.train.size(), r, rng);
}

/// P starts as the first drawn case; each further case I* is aligned to P,
/// resampled bilinearly and averaged in as P <- (P + I*)/2. Constituent i
/// (1-based, i >= 2) therefore ends with weight 2^-(r-i+1), constituent 1
/// with 2^-(r-1).
inline Prototype build_prototype(const TaskDataset& dataset, std::size_t r, std::uint64_t seed,
                                 const Aligner& align = default_aligner) {
  const auto draw = prototype_draw(dataset, r, seed);
  Prototype p;
  p.domain_tag = dataset.domain_tag;
  p.r = r;
  const LabeledImage& first = dataset.train[draw[0]];
  p.scan = first.scan;
  p.mask = first.mask;
  p.constituent_ids.push_back(hashed_id(first.case_id));
  for (std::size_t k = 1; k < draw.size(); ++k) {
    const LabeledImage& c = dataset.train[draw[k]];
    if (!c.scan.same_grid(p.scan)) throw InvalidShape("build_prototype: mixed grid sizes");
    const RigidTransform t = align(c.scan, p.scan);
    const Image scan = apply_rigid(c.scan, t, Interpolation::bilinear);
    const Image mask = apply_rigid(c.mask, t, Interpolation::bilinear);
    for (std::size_t i = 0; i < p.scan.size(); ++i) {
      p.scan.pixels[i] = 0.5f * (p.scan.pixels[i] + scan.pixels[i]);
      p.mask.pixels[i] = 0.5f * (p.mask.pixels[i] + mask.pixels[i]);
    }
    p.constituent_ids.push_back(hashed_id(c.case_id));
  }
  for (auto& v : p.mask.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return p;
}

/// One prototype for each of the first k tasks.
inline PrototypeAtlas build_atlas(const std::vector<TaskDataset>& corpus, std::size_t k, std::size_t r,
                                  std::uint64_t seed, const Aligner& align = default_aligner) {
  if (corpus.size() < k) {
    throw InsufficientData("build_atlas: corpus has " + std::to_string(corpus.size()) + " domains, need " +
                           std::to_string(k));
  }
  PrototypeAtlas atlas;
  for (std::size_t i = 0; i < k; ++i) {
    if (atlas.find(corpus[i].domain_tag)) throw ContractViolation("build_atlas: duplicate tag " + corpus[i].domain_tag);
    atlas.prototypes.push_back(build_prototype(corpus[i], r, seed, align));
  }
  return atlas;
}

struct PrototypeMatch {
  const Prototype* prototype = nullptr;
  RigidTransform transform;
  double score = 0.0;
};

/// Scores every prototype by global NCC after rigid alignment onto the scan.
inline std::vector<PrototypeMatch> score_prototypes(const Image& scan, const PrototypeAtlas& atlas) {
  std::vector<PrototypeMatch> out;
  for (const auto& p : atlas.prototypes) {
    PrototypeMatch m{&p, rigid_align(p.scan, scan), 0.0};
    m.score = global_ncc(apply_rigid(p.scan, m.transform, Interpolation::bilinear), scan);
    out.push_back(m);
  }
  return out;
}

/// Tag lookup when a tag is given, otherwise best registration score; ties
/// go to the earlier atlas entry.
inline const Prototype& select_prototype(const Image& scan, const PrototypeAtlas& atlas,
                                         const std::optional<std::string>& tag = std::nullopt) {
  if (atlas.empty()) throw ContractViolation("select_prototype: empty atlas");
  if (tag) {
    if (const Prototype* p = atlas.find(*tag)) return *p;
    throw UnknownDomain("select_prototype: no prototype for domain '" + *tag + "'");
  }
  if (atlas.size() == 1) return atlas.prototypes.front();
  const auto scores = score_prototypes(scan, atlas);
  const PrototypeMatch* best = &scores.front();
  for (const auto& m : scores)
    if (m.score > best->score) best = &m;
  return *best->prototype;
}

// Atlas file: container with P_i_scan/<tag> (f32 HxW), P_i_mask/<tag>
// (f32 HxW) per prototype and a __manifest__ text entry with one
// `tag,r,height,width,id;id;...` line per prototype.

inline Container atlas_container(const PrototypeAtlas& atlas) {
  Container c;
  std::string manifest;
  for (const auto& p : atlas.prototypes) {
    const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(p.scan.height),
                                          static_cast<std::uint32_t>(p.scan.width)};
    c.entries.push_back(ContainerEntry::floats("P_i_scan/" + p.domain_tag, dims, p.scan.pixels));
    c.entries.push_back(ContainerEntry::floats("P_i_mask/" + p.domain_tag, dims, p.mask.pixels));
    manifest += p.domain_tag + "," + std::to_string(p.r) + "," + std::to_string(p.scan.height) + "," +
                std::to_string(p.scan.width) + ",";
    for (std::size_t i = 0; i < p.constituent_ids.size(); ++i) manifest += (i ? ";" : "") + p.constituent_ids[i];
    manifest += "\n";
  }
  c.entries.push_back(ContainerEntry::text("__manifest__", manifest));
  return c;
}

inline PrototypeAtlas atlas_from_container(const Container& c) {
  PrototypeAtlas atlas;
  std::stringstream ss(c.get("__manifest__").as_text());
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() == 4) f.emplace_back();
    if (f.size() != 5) throw FormatError("atlas manifest: malformed line '" + line + "'", 0);
    Prototype p;
    p.domain_tag = f[0];
    try {
      p.r = std::stoul(f[1]);
      const std::size_t H = std::stoul(f[2]), W = std::stoul(f[3]);
      const auto& scan = c.get("P_i_scan/" + p.domain_tag);
      const auto& mask = c.get("P_i_mask/" + p.domain_tag);
      if (scan.f32.size() != H * W || mask.f32.size() != H * W) {
        throw FormatError("atlas: prototype " + p.domain_tag + " has the wrong size", 0);
      }
      p.scan = Image(H, W, scan.f32);
      p.mask = Image(H, W, mask.f32);
    } catch (const std::logic_error&) {
      throw FormatError("atlas manifest: bad number in '" + line + "'", 0);
    }
    std::stringstream ids(f[4]);
    while (std::getline(ids, cell, ';'))
      if (!cell.empty()) p.constituent_ids.push_back(cell);
    atlas.prototypes.push_back(std::move(p));
  }
  return atlas;
}

inline void save_atlas(const PrototypeAtlas& atlas, const std::string& path) { write_container(path, atlas_container(atlas)); }

inline PrototypeAtlas load_atlas(const std::string& path) { return atlas_from_container(read_container(path)); }

}  // namespace atlas_replay
