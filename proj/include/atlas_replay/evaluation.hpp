#pragma once

// Dice matrices over stage checkpoints, CSV reports and PGM contour overlays.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "atlas_replay/continual.hpp"
#include "atlas_replay/metrics.hpp"

namespace atlas_replay {

enum class SelectMode { by_tag, by_ncc };

/// Binary predictions for every validation case of `task`.
inline std::vector<Image> predict_task(const Model& model, const TaskDataset& task, const PrototypeAtlas* atlas,
                                       SelectMode mode = SelectMode::by_tag) {
  std::vector<const Image*> scans;
  for (const auto& c : task.val) scans.push_back(&c.scan);
  const auto tag = mode == SelectMode::by_tag ? std::optional<std::string>(task.domain_tag) : std::nullopt;
  return predict_segmentation(model, scans, atlas, tag);
}

inline double mean_dice(const std::vector<Image>& preds, const TaskDataset& task) {
  if (preds.size() != task.val.size() || preds.empty()) throw ContractViolation("mean_dice: prediction count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += dice(preds[i], task.val[i].mask);
  return acc / static_cast<double>(preds.size());
}

inline double evaluate_model(const Model& model, const TaskDataset& task, const PrototypeAtlas* atlas,
                             SelectMode mode = SelectMode::by_tag) {
  return mean_dice(predict_task(model, task, atlas, mode), task);
}

/// D[j][p] from stage checkpoints and, when `singles` is non-empty, s[p]
/// from single-task checkpoints. A missing entry raises IncompleteRun.
inline DiceMatrix dice_matrix(const std::vector<std::optional<Checkpoint>>& stages,
                              const std::vector<std::optional<Checkpoint>>& singles,
                              const std::vector<TaskDataset>& tasks, const PrototypeAtlas* atlas,
                              SelectMode mode = SelectMode::by_tag) {
  const std::size_t n = tasks.size();
  if (stages.size() != n) throw IncompleteRun("dice_matrix: expected " + std::to_string(n) + " stage checkpoints");
  DiceMatrix m(n);
  for (std::size_t j = 1; j <= n; ++j) {
    if (!stages[j - 1]) throw IncompleteRun("dice_matrix: stage " + std::to_string(j) + " checkpoint missing");
    const Model model = Model::from_checkpoint(*stages[j - 1]);
    for (std::size_t p = 1; p <= n; ++p) m.at(j, p) = evaluate_model(model, tasks[p - 1], atlas, mode);
  }
  if (!singles.empty()) {
    if (singles.size() != n) throw IncompleteRun("dice_matrix: expected " + std::to_string(n) + " single-task checkpoints");
    for (std::size_t p = 1; p <= n; ++p) {
      if (!singles[p - 1]) throw IncompleteRun("dice_matrix: single-task checkpoint " + std::to_string(p) + " missing");
      m.s.push_back(evaluate_model(Model::from_checkpoint(*singles[p - 1]), tasks[p - 1], atlas, mode));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_fixed(*v) : ""; }

struct ReportRow {
  std::string method;
  std::size_t stage = 0;
  std::size_t task = 0;
  double dice = 0.0;
  std::optional<double> bwt, fwt;
};

inline constexpr const char* kReportHeader = "method,stage,task,dice,bwt,fwt";

/// n x n rows. BWT(T_p) sits on the row (stage n, task p) and FWT(T_p) on
/// the row (stage p-1, task p): the rows holding the D entries they read.
inline std::vector<ReportRow> report_rows(const std::string& method, const DiceMatrix& m) {
  std::optional<TransferScores> b, f;
  if (m.n >= 2) {
    b = bwt(m);
    if (m.has_single()) f = fwt(m);
  }
  std::vector<ReportRow> rows;
  for (std::size_t j = 1; j <= m.n; ++j) {
    for (std::size_t p = 1; p <= m.n; ++p) {
      ReportRow r{method, j, p, m.at(j, p), std::nullopt, std::nullopt};
      if (b && j == m.n) r.bwt = b->per_task[p - 1];
      if (f && j + 1 == p) r.fwt = f->per_task[p - 1];
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string s = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    s += r.method + "," + std::to_string(r.stage) + "," + std::to_string(r.task) + "," + format_fixed(r.dice) + "," +
         format_optional(r.bwt) + "," + format_optional(r.fwt) + "\n";
  }
  return s;
}

struct MethodSummary {
  std::string method;
  double final_mean_dice = 0.0;
  std::optional<double> bwt, fwt;
};

inline MethodSummary summarize(const std::string& method, const DiceMatrix& m) {
  MethodSummary s{method, 0.0, std::nullopt, std::nullopt};
  for (std::size_t p = 1; p <= m.n; ++p) s.final_mean_dice += m.at(m.n, p);
  s.final_mean_dice /= static_cast<double>(m.n);
  if (m.n >= 2) {
    s.bwt = bwt(m).mean;
    if (m.has_single()) s.fwt = fwt(m).mean;
  }
  return s;
}

inline std::string summary_csv(const std::vector<MethodSummary>& rows) {
  std::string s = "method,final_mean_dice,mean_bwt,mean_fwt\n";
  for (const auto& r : rows) {
    s += r.method + "," + format_fixed(r.final_mean_dice) + "," + format_optional(r.bwt) + "," +
         format_optional(r.fwt) + "\n";
  }
  return s;
}

inline std::string probe_csv(const ProbeResult& r) {
  std::string s = "domain,trials,correct,tp,tn,fp,fn,precision,sensitivity,specificity,mcc\n";
  auto row = [&](const std::string& name, std::size_t trials, std::size_t correct, const ConfusionCounts& c,
                 const ConfusionMetrics& m) {
    s += name + "," + std::to_string(trials) + "," + std::to_string(correct) + "," + std::to_string(c.tp) + "," +
         std::to_string(c.tn) + "," + std::to_string(c.fp) + "," + std::to_string(c.fn) + "," +
         format_optional(m.precision) + "," + format_optional(m.sensitivity) + "," +
         format_optional(m.specificity) + "," + format_optional(m.mcc) + "\n";
  };
  std::size_t trials = 0, correct = 0;
  for (const auto& d : r.domains) {
    row(d.domain_tag, d.trials, d.correct, d.counts, d.metrics);
    trials += d.trials, correct += d.correct;
  }
  row("all", trials, correct, r.counts, r.metrics);
  return s;
}

// ---------------------------------------------------------------------------
// PGM overlays
// ---------------------------------------------------------------------------

/// 8-bit binary PGM (P5).
inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : img.pixels) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

/// Scan dimmed to 80% with the mask's 4-connected boundary drawn at full white.
inline Image contour_overlay(const Image& scan, const Image& mask) {
  Image out(scan.height, scan.width);
  auto inside = [&](long y, long x) {
    if (y < 0 || x < 0 || y >= static_cast<long>(mask.height) || x >= static_cast<long>(mask.width)) return false;
    return mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) >= 0.5f;
  };
  for (std::size_t y = 0; y < scan.height; ++y) {
    for (std::size_t x = 0; x < scan.width; ++x) {
      const long yy = static_cast<long>(y), xx = static_cast<long>(x);
      const bool edge = inside(yy, xx) &&
                        (!inside(yy - 1, xx) || !inside(yy + 1, xx) || !inside(yy, xx - 1) || !inside(yy, xx + 1));
      out.at(y, x) = edge ? 1.0f : 0.8f * scan.at(y, x);
    }
  }
  return out;
}

}  // namespace atlas_replay
