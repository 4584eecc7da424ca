// atlas-replay: corpus generation, atlas building, continual training,
// evaluation and the privacy / sweep / ablation experiments.
//
// Exit codes: 0 success, 2 usage errors (unknown flags, missing inputs),
// 1 any other failure. Failures print one line to stderr.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "atlas_replay/experiment.hpp"
#include "atlas_replay/metrics.hpp"

namespace ar = atlas_replay;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by train, sweep and ablate-loss. Flags given explicitly win
// over values from --config.
struct TrainFlags {
  std::string corpus, atlas, order, config, out;
  std::string method = "atlas-replay";
  std::size_t epochs = 0, batch = 0;
  std::uint64_t seed = 0;
  double lr = 0.0;
  bool no_single = false;
  CLI::Option *epochs_opt = nullptr, *batch_opt = nullptr, *seed_opt = nullptr, *lr_opt = nullptr;

  void add(CLI::App* app, bool seed_required) {
    app->add_option("--corpus", corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
    app->add_option("--atlas", atlas, "atlas file (atlas-replay)")->check(CLI::ExistingFile);
    app->add_option("--order", order, "task order, e.g. 1,2,3 (default: corpus order)");
    app->add_option("--config", config, "flat key=value training config")->check(CLI::ExistingFile);
    app->add_option("--out", out, "output directory")->required();
    epochs_opt = app->add_option("--epochs", epochs, "epochs per stage");
    batch_opt = app->add_option("--batch", batch, "batch size");
    lr_opt = app->add_option("--lr", lr, "Adam learning rate");
    seed_opt = app->add_option("--seed", seed, "master seed");
    if (seed_required) seed_opt->required();
    app->add_flag("--no-single", no_single, "skip the single-task models (no FWT)");
  }

  ar::TrainConfig config_for(ar::Method m) const {
    ar::TrainConfig cfg;
    if (!config.empty()) ar::apply_key_values(cfg, ar::parse_key_values(ar::read_text(config)));
    cfg.method = m;
    if (epochs_opt->count()) cfg.epochs = epochs;
    if (batch_opt->count()) cfg.batch = batch;
    if (lr_opt->count()) cfg.adam.lr = lr;
    if (seed_opt->count()) cfg.seed = seed;
    cfg.validate();
    return cfg;
  }

  ar::RunSpec spec_for(ar::Method m, const ar::CorpusReader& reader) const {
    ar::RunSpec spec;
    spec.config = config_for(m);
    if (order.empty()) {
      for (std::size_t p = 1; p <= reader.task_count(); ++p) spec.order.push_back(p);
    } else {
      spec.order = ar::parse_order(order);
    }
    spec.single_task = !no_single;
    return spec;
  }

  std::optional<ar::PrototypeAtlas> load_atlas_if_given() const {
    if (atlas.empty()) return std::nullopt;
    return ar::load_atlas(atlas);
  }
};

std::vector<ar::Method> parse_methods(const std::string& list) {
  std::vector<ar::Method> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    const auto name = list.substr(start, end - start);
    if (name == "all") {
      out.insert(out.end(), std::begin(ar::kAllMethods), std::end(ar::kAllMethods));
    } else {
      try {
        out.push_back(ar::parse_method(name));
      } catch (const ar::ContractViolation& e) {
        throw UsageError(e.what());
      }
    }
    start = end + 1;
  }
  return out;
}

std::vector<double> parse_reals(const std::string& list) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    std::size_t used = 0;
    const auto item = list.substr(start, end - start);
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError("expected a comma-separated list of numbers, got '" + list + "'");
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

std::vector<std::string> split_list(const std::string& list) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    out.push_back(list.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

void write_out(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) ar::make_dirs(p.parent_path());
  ar::write_text(p, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual atlas-based segmentation with prototype replay"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain corpus");
  std::string gen_manifest, gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_domains = 4, gen_cases = 30;
  gen->add_option("--manifest", gen_manifest, "manifest file (key=value)")->check(CLI::ExistingFile);
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "master seed (overrides the manifest)");
  gen->add_option("--domains", gen_domains, "domains A, B, ... when no manifest is given");
  gen->add_option("--cases", gen_cases, "cases per domain when no manifest is given");
  gen->add_option("--out", gen_out, "corpus directory")->required();

  // build-atlas
  auto* atlas_cmd = app.add_subcommand("build-atlas", "build one prototype per domain");
  std::string atlas_corpus, atlas_out;
  std::size_t atlas_r = 7, atlas_k = 0;
  std::uint64_t atlas_seed = 0;
  atlas_cmd->add_option("--corpus", atlas_corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  atlas_cmd->add_option("--r", atlas_r, "cases averaged per prototype");
  atlas_cmd->add_option("--k", atlas_k, "number of domains (default: all)");
  atlas_cmd->add_option("--seed", atlas_seed, "draw seed")->required();
  atlas_cmd->add_option("--out", atlas_out, "atlas file")->required();

  // train
  auto* train = app.add_subcommand("train", "train one or more methods over a task stream");
  TrainFlags train_flags;
  train_flags.add(train, true);
  train->add_option("--method", train_flags.method, "atlas-replay, sequential, rehearsal, ewc, rwalk, joint, all");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Dice matrix, BWT and FWT of trained runs");
  std::vector<std::string> eval_runs;
  std::string eval_corpus, eval_out, eval_select = "tag", eval_overlays, eval_summary;
  eval->add_option("--runs", eval_runs, "run or method directories")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--corpus", eval_corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", eval_out, "report CSV")->required();
  eval->add_option("--select", eval_select, "prototype selection: tag or ncc")->check(CLI::IsMember({"tag", "ncc"}));
  eval->add_option("--overlays", eval_overlays, "directory for PGM contour overlays");
  eval->add_option("--summary", eval_summary, "per-method summary CSV");

  // probe-privacy
  auto* probe = app.add_subcommand("probe-privacy", "automated prototype re-identification probe");
  std::string probe_atlas, probe_corpus, probe_out, probe_attacker = "ncc";
  std::size_t probe_trials = 5;
  std::uint64_t probe_seed = 0;
  probe->add_option("--atlas", probe_atlas, "atlas file")->required()->check(CLI::ExistingFile);
  probe->add_option("--corpus", probe_corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--trials", probe_trials, "trials per prototype");
  probe->add_option("--seed", probe_seed, "lineup seed");
  probe->add_option("--attacker", probe_attacker, "ncc or random")->check(CLI::IsMember({"ncc", "random"}));
  probe->add_option("--out", probe_out, "probe CSV")->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "train one method per parameter value and mark the best");
  TrainFlags sweep_flags;
  std::string sweep_param, sweep_values;
  sweep_flags.add(sweep, true);
  sweep->add_option("--method", sweep_flags.method, "method to sweep");
  sweep->add_option("--param", sweep_param, "config key, e.g. ewc_lambda")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();

  // ablate-loss
  auto* ablate = app.add_subcommand("ablate-loss", "atlas replay under several cross-entropy weights");
  TrainFlags ablate_flags;
  std::string ablate_weights = "0,1,2";
  ablate_flags.add(ablate, true);
  ablate->add_option("--ce-weights", ablate_weights, "comma-separated weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) {
      ar::CorpusManifest m;
      if (!gen_manifest.empty()) {
        m = ar::parse_manifest(ar::read_text(gen_manifest));
        if (gen_seed_opt->count()) m.seed = gen_seed;
      } else {
        if (!gen_seed_opt->count()) throw UsageError("gen-data needs --manifest or --seed");
        m = ar::CorpusManifest::standard(gen_seed, gen_domains, gen_cases);
      }
      ar::generate_corpus(m, gen_out);
      std::printf("wrote %zu tasks to %s\n", m.tasks.size(), gen_out.c_str());
    } else if (*atlas_cmd) {
      ar::CorpusReader reader(atlas_corpus);
      const std::size_t k = atlas_k ? atlas_k : reader.task_count();
      const auto atlas = ar::build_atlas(reader.load_all(), k, atlas_r, atlas_seed);
      ar::save_atlas(atlas, atlas_out);
      std::printf("wrote %zu prototypes (r=%zu) to %s\n", atlas.size(), atlas_r, atlas_out.c_str());
    } else if (*train) {
      ar::CorpusReader reader(train_flags.corpus);
      const auto atlas = train_flags.load_atlas_if_given();
      for (ar::Method m : parse_methods(train_flags.method)) {
        if (ar::uses_registration(m) && !atlas) throw UsageError("atlas-replay needs --atlas");
        ar::run_training(reader, atlas ? &*atlas : nullptr, train_flags.spec_for(m, reader), train_flags.out);
        std::printf("trained %s into %s\n", ar::method_name(m).c_str(),
                    ar::method_dir(train_flags.out, m).string().c_str());
      }
    } else if (*eval) {
      ar::CorpusReader reader(eval_corpus);
      const auto mode = eval_select == "ncc" ? ar::SelectMode::by_ncc : ar::SelectMode::by_tag;
      std::vector<ar::ReportRow> rows;
      std::vector<ar::MethodSummary> summaries;
      const fs::path overlay_dir(eval_overlays);
      for (const auto& run : eval_runs) {
        for (const auto& dir : ar::find_method_dirs(run)) {
          const auto ev = ar::evaluate_run(ar::load_run(dir), reader, mode, eval_overlays.empty() ? nullptr : &overlay_dir);
          const auto r = ar::report_rows(ev.method, ev.matrix);
          rows.insert(rows.end(), r.begin(), r.end());
          summaries.push_back(ar::summarize(ev.method, ev.matrix));
        }
      }
      write_out(eval_out, ar::report_csv(rows));
      const auto summary = ar::summary_csv(summaries);
      if (!eval_summary.empty()) write_out(eval_summary, summary);
      std::fputs(summary.c_str(), stdout);
    } else if (*probe) {
      ar::CorpusReader reader(probe_corpus);
      const auto atlas = ar::load_atlas(probe_atlas);
      const auto attacker = probe_attacker == "random" ? ar::Attacker::random : ar::Attacker::ncc;
      const auto csv = ar::probe_csv(ar::reid_probe(atlas, reader.load_all(), probe_trials, probe_seed, attacker));
      write_out(probe_out, csv);
      std::fputs(csv.c_str(), stdout);
    } else if (*sweep) {
      ar::CorpusReader reader(sweep_flags.corpus);
      const auto atlas = sweep_flags.load_atlas_if_given();
      const auto methods = parse_methods(sweep_flags.method);
      if (methods.size() != 1) throw UsageError("sweep takes exactly one --method");
      if (ar::uses_registration(methods[0]) && !atlas) throw UsageError("atlas-replay needs --atlas");
      const auto rows = ar::run_sweep(reader, atlas ? &*atlas : nullptr, sweep_flags.spec_for(methods[0], reader),
                                      sweep_param, split_list(sweep_values), sweep_flags.out);
      const auto csv = ar::sweep_csv(sweep_param, rows);
      write_out((fs::path(sweep_flags.out) / "sweep.csv").string(), csv);
      std::fputs(csv.c_str(), stdout);
    } else if (*ablate) {
      ar::CorpusReader reader(ablate_flags.corpus);
      const auto atlas = ablate_flags.load_atlas_if_given();
      if (!atlas) throw UsageError("ablate-loss needs --atlas");
      const auto spec = ablate_flags.spec_for(ar::Method::atlas_replay, reader);
      const auto rows = ar::run_loss_ablation(reader, *atlas, spec, parse_reals(ablate_weights), ablate_flags.out);
      std::vector<std::string> tags;
      for (auto p : spec.order) tags.push_back(reader.manifest().tasks[p - 1].tag);
      const auto csv = ar::ablation_csv(tags, rows);
      write_out((fs::path(ablate_flags.out) / "ablation.csv").string(), csv);
      std::fputs(csv.c_str(), stdout);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
