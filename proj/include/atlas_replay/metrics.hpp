#pragma once

// Overlap, transfer and confusion metrics, and the automated
// re-identification probe against prototypes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "atlas_replay/dataset.hpp"
#include "atlas_replay/errors.hpp"
#include "atlas_replay/image.hpp"
#include "atlas_replay/prototypes.hpp"
#include "atlas_replay/rng.hpp"

namespace atlas_replay {

/// 2|A n B| / (|A| + |B|) over masks binarized at 0.5; two empty masks score 1.
inline double dice(const Image& pred, const Image& truth) {
  if (!pred.same_grid(truth)) throw InvalidShape("dice: masks differ in shape");
  std::uint64_t inter = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.pixels[i] >= 0.5f, b = truth.pixels[i] >= 0.5f;
    inter += a && b;
    total += static_cast<std::uint64_t>(a) + static_cast<std::uint64_t>(b);
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

/// D[j][p] for models trained through stage j (1-based) on task p, and the
/// single-task diagonal s[p]. Stored zero-based.
struct DiceMatrix {
  std::size_t n = 0;
  std::vector<std::vector<double>> d;
  std::vector<double> s;  // empty when single-task models were not evaluated

  explicit DiceMatrix(std::size_t n_ = 0) : n(n_), d(n_, std::vector<double>(n_, 0.0)) {}

  double& at(std::size_t j, std::size_t p) { return d.at(j - 1).at(p - 1); }
  double at(std::size_t j, std::size_t p) const { return d.at(j - 1).at(p - 1); }
  double single(std::size_t p) const { return s.at(p - 1); }
  bool has_single() const { return s.size() == n && n > 0; }
};

struct TransferScores {
  std::vector<std::optional<double>> per_task;  // indexed p-1; nullopt where undefined
  double mean = 0.0;
};

/// BWT(T_p) = D[n][p] - D[p][p] for p = 1..n-1.
inline TransferScores bwt(const DiceMatrix& m) {
  if (m.n < 2) throw UndefinedMetric("bwt: needs at least two stages");
  TransferScores out;
  out.per_task.assign(m.n, std::nullopt);
  double acc = 0.0;
  for (std::size_t p = 1; p < m.n; ++p) {
    const double v = m.at(m.n, p) - m.at(p, p);
    out.per_task[p - 1] = v;
    acc += v;
  }
  out.mean = acc / static_cast<double>(m.n - 1);
  return out;
}

/// FWT(T_p) = D[p-1][p] - s[p] for p = 2..n.
inline TransferScores fwt(const DiceMatrix& m) {
  if (m.n < 2) throw UndefinedMetric("fwt: needs at least two stages");
  if (!m.has_single()) throw UndefinedMetric("fwt: single-task scores missing");
  TransferScores out;
  out.per_task.assign(m.n, std::nullopt);
  double acc = 0.0;
  for (std::size_t p = 2; p <= m.n; ++p) {
    const double v = m.at(p - 1, p) - m.single(p);
    out.per_task[p - 1] = v;
    acc += v;
  }
  out.mean = acc / static_cast<double>(m.n - 1);
  return out;
}

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, tn += o.tn, fp += o.fp, fn += o.fn;
    return *this;
  }
};

/// Undefined rates (zero denominators) are nullopt.
struct ConfusionMetrics {
  std::optional<double> sensitivity, specificity, precision, mcc;
};

inline ConfusionMetrics confusion_metrics(const ConfusionCounts& c) {
  auto ratio = [](double num, double den) -> std::optional<double> {
    if (den == 0.0) return std::nullopt;
    return num / den;
  };
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  ConfusionMetrics m;
  m.sensitivity = ratio(tp, tp + fn);
  m.specificity = ratio(tn, tn + fp);
  m.precision = ratio(tp, tp + fp);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den > 0.0) m.mcc = (tp * tn - fp * fn) / std::sqrt(den);
  return m;
}

// ---------------------------------------------------------------------------
// Re-identification probe
//
// Each trial shows the attacker one prototype and a lineup of three scans
// from its domain: one true constituent and two non-constituents. Picking
// the constituent counts tp=1, tn=2; a wrong pick counts fp=1, fn=1, tn=1.
// ---------------------------------------------------------------------------

enum class Attacker { ncc, random };

struct ProbeDomainResult {
  std::string domain_tag;
  std::size_t trials = 0;
  std::size_t correct = 0;
  ConfusionCounts counts;
  ConfusionMetrics metrics;
};

struct ProbeResult {
  std::vector<ProbeDomainResult> domains;
  ConfusionCounts counts;
  ConfusionMetrics metrics;
};

/// Index of the lineup scan the NCC attacker matches to the prototype.
inline std::size_t ncc_attacker_pick(const Prototype& proto, const std::vector<const Image*>& lineup) {
  std::size_t best = 0;
  double best_score = -2.0;
  for (std::size_t i = 0; i < lineup.size(); ++i) {
    const RigidTransform t = rigid_align(*lineup[i], proto.scan);
    const double score = global_ncc(apply_rigid(*lineup[i], t, Interpolation::bilinear), proto.scan);
    if (score > best_score) best_score = score, best = i;
  }
  return best;
}

inline ProbeResult reid_probe(const PrototypeAtlas& atlas, const std::vector<TaskDataset>& corpus,
                              std::size_t trials_per_prototype, std::uint64_t seed,
                              Attacker attacker = Attacker::ncc) {
  ProbeResult result;
  for (const auto& proto : atlas.prototypes) {
    const TaskDataset* task = nullptr;
    for (const auto& t : corpus)
      if (t.domain_tag == proto.domain_tag) task = &t;
    if (!task) throw UnknownDomain("reid_probe: corpus has no domain '" + proto.domain_tag + "'");

    std::vector<const LabeledImage*> members, decoys;
    for (const auto* split : {&task->train, &task->val}) {
      for (const auto& c : *split) {
        const bool member =
            std::find(proto.constituent_ids.begin(), proto.constituent_ids.end(), hashed_id(c.case_id)) !=
            proto.constituent_ids.end();
        (member ? members : decoys).push_back(&c);
      }
    }
    if (members.empty() || decoys.size() < 2 || members.size() + decoys.size() < 3) {
      throw InsufficientData("reid_probe: domain " + proto.domain_tag + " lacks a constituent and two decoys");
    }

    Rng rng(derive_seed(seed, fnv1a("reid"), fnv1a(proto.domain_tag)));
    ProbeDomainResult dom;
    dom.domain_tag = proto.domain_tag;
    for (std::size_t t = 0; t < trials_per_prototype; ++t) {
      const LabeledImage* truth = members[uniform_index(rng, members.size())];
      const auto pick2 = sample_without_replacement(decoys.size(), 2, rng);
      std::vector<const Image*> lineup{&truth->scan, &decoys[pick2[0]]->scan, &decoys[pick2[1]]->scan};
      const std::size_t true_pos = uniform_index(rng, 3);
      std::swap(lineup[0], lineup[true_pos]);
      const std::size_t chosen = attacker == Attacker::random ? uniform_index(rng, 3) : ncc_attacker_pick(proto, lineup);
      ++dom.trials;
      if (chosen == true_pos) {
        ++dom.correct;
        dom.counts += {1, 2, 0, 0};
      } else {
        dom.counts += {0, 1, 1, 1};
      }
    }
    dom.metrics = confusion_metrics(dom.counts);
    result.counts += dom.counts;
    result.domains.push_back(std::move(dom));
  }
  result.metrics = confusion_metrics(result.counts);
  return result;
}

}  // namespace atlas_replay
