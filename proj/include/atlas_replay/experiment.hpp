#pragma once

// On-disk experiment runs: training a stream into a run directory, reading
// it back, evaluating it, and the sweep / loss-ablation drivers.
//
//   RUN/<method>/config.txt                 flat key=value (TrainConfig + order, tasks)
//   RUN/<method>/train_log.csv              stage,epoch,loss,ncc,ce,smooth,penalty
//   RUN/<method>/stage_<p>/checkpoint.bin   model after stage p
//   RUN/<method>/single_<p>/checkpoint.bin  model trained on task p alone
//   RUN/<method>/atlas.bin                  atlas replay only

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "atlas_replay/continual.hpp"
#include "atlas_replay/datagen.hpp"
#include "atlas_replay/evaluation.hpp"
#include "atlas_replay/prototypes.hpp"

namespace atlas_replay {

namespace fs = std::filesystem;

struct RunSpec {
  TrainConfig config;
  std::vector<std::size_t> order;  // 1-based manifest positions, in training order
  bool single_task = true;
};

inline std::vector<std::size_t> parse_order(const std::string& s) {
  std::vector<std::size_t> out;
  try {
    out = parse_sizes(s);
  } catch (const std::logic_error&) {
    throw ContractViolation("order: expected a comma-separated list of stage numbers, got '" + s + "'");
  }
  if (out.empty()) throw ContractViolation("order: empty");
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path.string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path.string());
  return std::string(bytes.begin(), bytes.end());
}

inline void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::string s = "stage,epoch,loss,ncc,ce,smooth,penalty\n";
  for (const auto& l : log) {
    s += std::to_string(l.stage) + "," + std::to_string(l.epoch) + "," + format_fixed(l.loss, 8) + "," +
         format_fixed(l.ncc, 8) + "," + format_fixed(l.ce, 8) + "," + format_fixed(l.smooth, 8) + "," +
         format_fixed(l.penalty, 8) + "\n";
  }
  return s;
}

inline fs::path method_dir(const fs::path& run, Method m) { return run / method_name(m); }

/// Trains the stream given by `spec.order` and writes RUN/<method>/. Task p
/// is read from the corpus only when stage p starts.
inline void run_training(const CorpusReader& corpus, const PrototypeAtlas* atlas, const RunSpec& spec,
                         const fs::path& run, const std::function<void(const SampleAccess&)>& on_access = {}) {
  const TrainConfig& cfg = spec.config;
  cfg.validate();
  for (auto p : spec.order) {
    if (p == 0 || p > corpus.task_count()) throw ContractViolation("order: no task " + std::to_string(p) + " in corpus");
  }
  const fs::path dir = method_dir(run, cfg.method);
  make_dirs(dir);
  std::vector<std::string> tags;
  for (auto p : spec.order) tags.push_back(corpus.manifest().tasks[p - 1].tag);
  std::string tag_list;
  for (std::size_t i = 0; i < tags.size(); ++i) tag_list += (i ? "," : "") + tags[i];
  write_text(dir / "config.txt", to_text(cfg) + "order=" + join_sizes(spec.order) + "\ntasks=" + tag_list + "\n");
  if (uses_registration(cfg.method)) {
    if (!atlas) throw ContractViolation("atlas replay training needs --atlas");
    save_atlas(*atlas, (dir / "atlas.bin").string());
  }

  auto load = [&](std::size_t p) {
    TaskDataset t = corpus.load_task(spec.order[p - 1]);
    t.stage = p;
    return t;
  };
  std::vector<EpochLog> log;
  const auto results = train_continual(spec.order.size(), load, cfg, atlas, on_access);
  for (const auto& r : results) {
    make_dirs(dir / ("stage_" + std::to_string(r.checkpoint.stage)));
    save_checkpoint(r.checkpoint, (dir / ("stage_" + std::to_string(r.checkpoint.stage)) / "checkpoint.bin").string());
    log.insert(log.end(), r.log.begin(), r.log.end());
  }
  write_text(dir / "train_log.csv", train_log_csv(log));

  if (spec.single_task) {
    // Stage 1 of any stream is already single-task training on its first task.
    make_dirs(dir / "single_1");
    save_checkpoint(results.front().checkpoint, (dir / "single_1" / "checkpoint.bin").string());
    for (std::size_t p = 2; p <= spec.order.size(); ++p) {
      ContinualTrainer single(cfg, atlas);
      const auto r = single.train_stage(load(p));
      make_dirs(dir / ("single_" + std::to_string(p)));
      save_checkpoint(r.checkpoint, (dir / ("single_" + std::to_string(p)) / "checkpoint.bin").string());
    }
  }
}

struct LoadedRun {
  Method method = Method::atlas_replay;
  TrainConfig config;
  std::vector<std::size_t> order;
  std::vector<std::optional<Checkpoint>> stages;
  std::vector<std::optional<Checkpoint>> singles;  // empty when none were trained
  std::optional<PrototypeAtlas> atlas;
};

inline LoadedRun load_run(const fs::path& dir) {
  if (!fs::exists(dir / "config.txt")) throw IncompleteRun("'" + dir.string() + "' has no config.txt");
  auto kv = parse_key_values(read_text(dir / "config.txt"));
  LoadedRun run;
  if (!kv.count("order")) throw FormatError("config.txt: missing order", 0);
  run.order = parse_order(kv["order"]);
  kv.erase("order");
  kv.erase("tasks");
  apply_key_values(run.config, kv);
  run.method = run.config.method;
  const std::size_t n = run.order.size();
  bool any_single = false;
  for (std::size_t p = 1; p <= n; ++p) {
    const fs::path stage = dir / ("stage_" + std::to_string(p)) / "checkpoint.bin";
    run.stages.push_back(fs::exists(stage) ? std::optional(load_checkpoint(stage.string())) : std::nullopt);
    any_single = any_single || fs::exists(dir / ("single_" + std::to_string(p)) / "checkpoint.bin");
  }
  if (any_single) {
    for (std::size_t p = 1; p <= n; ++p) {
      const fs::path single = dir / ("single_" + std::to_string(p)) / "checkpoint.bin";
      run.singles.push_back(fs::exists(single) ? std::optional(load_checkpoint(single.string())) : std::nullopt);
    }
  }
  if (fs::exists(dir / "atlas.bin")) run.atlas = load_atlas((dir / "atlas.bin").string());
  return run;
}

/// Method directories under `path` in canonical method order, or `path`
/// itself when it is a method directory.
inline std::vector<fs::path> find_method_dirs(const fs::path& path) {
  if (fs::exists(path / "config.txt")) return {path};
  std::vector<fs::path> out;
  for (Method m : kAllMethods)
    if (fs::exists(method_dir(path, m) / "config.txt")) out.push_back(method_dir(path, m));
  if (out.empty()) throw IncompleteRun("'" + path.string() + "' contains no trained runs");
  return out;
}

struct RunEvaluation {
  std::string method;
  DiceMatrix matrix;
  std::vector<std::string> tags;
};

inline RunEvaluation evaluate_run(const LoadedRun& run, const CorpusReader& corpus, SelectMode mode,
                                  const fs::path* overlay_dir = nullptr) {
  std::vector<TaskDataset> tasks;
  RunEvaluation ev;
  ev.method = method_name(run.method);
  for (auto p : run.order) {
    if (p == 0 || p > corpus.task_count()) throw ContractViolation("run order refers to task " + std::to_string(p) + " missing from corpus");
    tasks.push_back(corpus.load_task(p));
    ev.tags.push_back(tasks.back().domain_tag);
  }
  const PrototypeAtlas* atlas = run.atlas ? &*run.atlas : nullptr;
  if (uses_registration(run.method) && !atlas) throw IncompleteRun("atlas replay run has no atlas.bin");
  ev.matrix = dice_matrix(run.stages, run.singles, tasks, atlas, mode);
  if (overlay_dir) {
    for (std::size_t j = 1; j <= tasks.size(); ++j) {
      const Model model = Model::from_checkpoint(*run.stages[j - 1]);
      const fs::path dir = *overlay_dir / ev.method / ("stage_" + std::to_string(j));
      make_dirs(dir);
      for (std::size_t p = 1; p <= tasks.size(); ++p) {
        const auto preds = predict_task(model, tasks[p - 1], atlas, mode);
        for (std::size_t i = 0; i < preds.size(); ++i) {
          const auto& c = tasks[p - 1].val[i];
          const auto bytes = encode_pgm(contour_overlay(c.scan, preds[i]));
          write_file_bytes((dir / ("task_" + std::to_string(p) + "_" + c.case_id + ".pgm")).string(), bytes);
        }
      }
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Sweep and loss ablation
// ---------------------------------------------------------------------------

struct SweepRow {
  std::string value;
  MethodSummary summary;
  double score = 0.0;
  bool best = false;
};

/// Score used to mark the best setting: final mean Dice + mean BWT + mean FWT
/// (terms that are undefined are left out).
inline double sweep_score(const MethodSummary& s) {
  return s.final_mean_dice + s.bwt.value_or(0.0) + s.fwt.value_or(0.0);
}

inline std::vector<SweepRow> run_sweep(const CorpusReader& corpus, const PrototypeAtlas* atlas, const RunSpec& base,
                                       const std::string& param, const std::vector<std::string>& values,
                                       const fs::path& out) {
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    RunSpec spec = base;
    apply_key_values(spec.config, {{param, v}});
    const fs::path run = out / (param + "_" + v);
    run_training(corpus, atlas, spec, run);
    const auto ev = evaluate_run(load_run(method_dir(run, spec.config.method)), corpus, SelectMode::by_tag);
    SweepRow row{v, summarize(ev.method, ev.matrix), 0.0, false};
    row.score = sweep_score(row.summary);
    rows.push_back(row);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].score > rows[best].score) best = i;
  if (!rows.empty()) rows[best].best = true;
  return rows;
}

inline std::string sweep_csv(const std::string& param, const std::vector<SweepRow>& rows) {
  std::string s = "param,value,final_mean_dice,mean_bwt,mean_fwt,score,best\n";
  for (const auto& r : rows) {
    s += param + "," + r.value + "," + format_fixed(r.summary.final_mean_dice) + "," + format_optional(r.summary.bwt) +
         "," + format_optional(r.summary.fwt) + "," + format_fixed(r.score) + "," + (r.best ? "1" : "0") + "\n";
  }
  return s;
}

struct AblationRow {
  double ce_weight = 0.0;
  std::vector<double> dice;  // final model, one per task in training order
  double mean = 0.0;
};

/// Atlas replay trained once per CE weight; the final model is scored on
/// every task of the stream.
inline std::vector<AblationRow> run_loss_ablation(const CorpusReader& corpus, const PrototypeAtlas& atlas,
                                                  const RunSpec& base, const std::vector<double>& weights,
                                                  const fs::path& out) {
  std::vector<AblationRow> rows;
  for (double w : weights) {
    RunSpec spec = base;
    spec.config.method = Method::atlas_replay;
    spec.config.net.ce_weight = w;
    spec.single_task = false;
    const fs::path run = out / ("ce_weight_" + format_real(w));
    run_training(corpus, &atlas, spec, run);
    const auto loaded = load_run(method_dir(run, Method::atlas_replay));
    const Model model = Model::from_checkpoint(*loaded.stages.back());
    AblationRow row{w, {}, 0.0};
    for (auto p : spec.order) row.dice.push_back(evaluate_model(model, corpus.load_task(p), &atlas));
    for (double d : row.dice) row.mean += d;
    row.mean /= static_cast<double>(row.dice.size());
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<std::string>& tags, const std::vector<AblationRow>& rows) {
  std::string s = "ce_weight";
  for (const auto& t : tags) s += ",dice_" + t;
  s += ",mean_dice\n";
  for (const auto& r : rows) {
    s += format_real(r.ce_weight);
    for (double d : r.dice) s += "," + format_fixed(d);
    s += "," + format_fixed(r.mean) + "\n";
  }
  return s;
}

}  // namespace atlas_replay
