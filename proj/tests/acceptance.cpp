// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. The learning criteria (3-5) train full-size models and
// take most of the runtime.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "atlas_replay/continual.hpp"
#include "atlas_replay/datagen.hpp"
#include "atlas_replay/evaluation.hpp"
#include "atlas_replay/experiment.hpp"
#include "atlas_replay/metrics.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace atlas_replay;
using gradcheck::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

template <class Real>
BasicTensor<Real> weighted_sum(const BasicTensor<Real>& x, std::uint64_t seed) {
  auto w = random_tensor<Real>(x.shape(), seed ^ 0xabcdef, -1.0, 1.0, false);
  return sum(mul(x, w));
}

BasicTensor<double> binary_tensor(Shape shape, std::uint64_t seed) {
  auto t = random_tensor<double>(std::move(shape), seed, 0, 1, false);
  for (auto& v : t.mutable_values()) v = v < 0.5 ? 0.0 : 1.0;
  return t;
}

double mean_val_dice(const Model& model, const TaskDataset& task, const PrototypeAtlas* atlas) {
  return evaluate_model(model, task, atlas);
}

// ---------------------------------------------------------------------------

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  constexpr std::uint64_t seeds[] = {1, 2, 3, 4, 5};
  std::map<std::string, double> worst;
  auto record = [&](const std::string& op, double e) { worst[op] = std::max(worst[op], e); };
  RegNetConfig tiny;
  tiny.enc_channels = {2, 2};
  tiny.dec_channels = {2, 2};
  tiny.ncc_window = 3;
  tiny.flow_init_scale = 0.3;
  for (auto seed : seeds) {
    auto x = random_tensor<float>({1, 2, 5, 5}, seed), k = random_tensor<float>({3, 2, 3, 3}, seed + 100),
         b = random_tensor<float>({3}, seed + 200);
    record("conv2d", gradcheck::check<float>([&] { return weighted_sum(conv2d(x, k, b, 1, 1), seed); }, {x, k, b}).rel_error);

    auto img = random_tensor<float>({1, 2, 6, 6}, seed, 0, 1), flow = random_tensor<float>({1, 2, 6, 6}, seed + 50, -2, 2);
    for (auto& v : flow.mutable_values()) {
      const float frac = v - std::floor(v);
      if (frac < 0.05f || frac > 0.95f) v += 0.3f;
    }
    record("grid_sample_bilinear",
           gradcheck::check<float>([&] { return weighted_sum(grid_sample_bilinear(img, flow), seed); }, {img, flow}).rel_error);

    auto I = random_tensor<double>({2, 1, 7, 7}, seed, 0, 1), J = random_tensor<double>({2, 1, 7, 7}, seed + 20, 0, 1);
    record("loss_ncc", gradcheck::check<double>([&] { return loss_ncc(I, J, 5); }, {I, J}, 1e-6).rel_error);

    auto p = random_tensor<double>({1, 1, 6, 6}, seed, 0.05, 0.95);
    auto t = binary_tensor({1, 1, 6, 6}, seed + 1);
    record("loss_ce", gradcheck::check<double>([&] { return loss_ce(p, t); }, {p}, 1e-6).rel_error);

    auto f = random_tensor<double>({2, 2, 5, 6}, seed, -2, 2);
    record("loss_smooth", gradcheck::check<double>([&] { return loss_smooth(f); }, {f}, 1e-6).rel_error);

    BasicRegNet<double> net(tiny, seed);
    auto ps = random_tensor<double>({1, 1, 8, 8}, seed + 1, 0, 1, false);
    auto pm = random_tensor<double>({1, 1, 8, 8}, seed + 2, 0.2, 0.8, false);
    auto sc = random_tensor<double>({1, 1, 8, 8}, seed + 3, 0, 1, false);
    auto mk = binary_tensor({1, 1, 8, 8}, seed + 4);
    record("loss_reg", gradcheck::check<double>([&] { return loss_reg(net, ps, pm, sc, mk, tiny); }, net.parameters(), 1e-6)
                           .rel_error);
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 120.0;
  std::string detail;
  for (const auto& [op, e] : worst) {
    ok = ok && e < 1e-3;
    detail += fmt("%s %.1e, ", op.c_str(), e);
  }
  return {ok, detail + fmt("5 seeds each, %.1fs", secs)};
}

Outcome criterion_metric_oracles() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 6;
    DiceMatrix m(n);
    m.s.resize(n);
    for (auto& row : m.d)
      for (auto& v : row) v = u(rng);
    for (auto& v : m.s) v = u(rng);
    double b = 0, f = 0;
    for (std::size_t q = 1; q <= n - 1; ++q) b += m.d[n - 1][q - 1] - m.d[q - 1][q - 1];
    for (std::size_t q = 2; q <= n; ++q) f += m.d[q - 2][q - 1] - m.s[q - 1];
    worst = std::max({worst, std::abs(bwt(m).mean - b / double(n - 1)), std::abs(fwt(m).mean - f / double(n - 1))});
  }
  DiceMatrix hand(3);
  hand.d = {{0.8, 0.3, 0.2}, {0.6, 0.7, 0.3}, {0.5, 0.6, 0.7}};
  hand.s = {0.8, 0.75, 0.7};
  Image a(2, 4), c(2, 4);
  for (std::size_t i : {0, 1, 2, 3}) a.pixels[i] = 1;
  for (std::size_t i : {2, 3, 4, 5}) c.pixels[i] = 1;
  const auto cm = confusion_metrics({3, 5, 1, 1});
  const bool hand_ok = std::abs(bwt(hand).mean + 0.2) < 1e-12 && std::abs(fwt(hand).mean + 0.425) < 1e-12 &&
                       dice(a, c) == 0.5 && dice(a, a) == 1.0 && std::abs(*cm.sensitivity - 0.75) < 1e-12 &&
                       std::abs(*cm.specificity - 5.0 / 6.0) < 1e-12 && std::abs(*cm.precision - 0.75) < 1e-12 &&
                       std::abs(*cm.mcc - 0.5833) < 5e-5;
  return {worst < 1e-7 && hand_ok,
          fmt("brute-force max diff %.1e over 100 matrices; MCC(3,5,1,1) = %.4f; hand fixtures %s", worst, *cm.mcc,
              hand_ok ? "match" : "MISMATCH")};
}

// Single-domain setup shared by criteria 3 and 4: domain A, 24 train and 6
// validation cases at 64x64, one r=7 prototype, 250 epochs.
struct SingleDomain {
  TaskDataset task;
  PrototypeAtlas atlas;
  double zero_flow = 0.0;
  std::map<double, std::pair<double, double>> dice_and_seconds;  // by ce_weight

  SingleDomain() {
    task = generate_tasks(CorpusManifest::standard(7, 1))[0];
    atlas.prototypes.push_back(build_prototype(task, 7, 1));
    double acc = 0;
    for (const auto& v : task.val) acc += dice(threshold(atlas.prototypes[0].mask), v.mask);
    zero_flow = acc / static_cast<double>(task.val.size());
  }

  std::pair<double, double> run(double ce_weight) {
    if (auto it = dice_and_seconds.find(ce_weight); it != dice_and_seconds.end()) return it->second;
    TrainConfig cfg;
    cfg.epochs = 250;
    cfg.seed = 3;
    cfg.net.ce_weight = ce_weight;
    const auto t0 = Clock::now();
    ContinualTrainer trainer(cfg, &atlas);
    const auto res = trainer.train_stage(task);
    const double secs = seconds_since(t0);
    const double d = mean_val_dice(Model::from_checkpoint(res.checkpoint), task, &atlas);
    return dice_and_seconds[ce_weight] = {d, secs};
  }
};

Outcome criterion_registration(SingleDomain& sd) {
  const auto [d, secs] = sd.run(2.0);
  const double gain = d - sd.zero_flow;
  return {gain >= 0.15 && secs < 600.0,
          fmt("Dice %.3f vs zero-flow %.3f, gain %+.3f (need >= 0.15), %.0fs", d, sd.zero_flow, gain, secs)};
}

Outcome criterion_ablation(SingleDomain& sd) {
  const double d0 = sd.run(0.0).first, d1 = sd.run(1.0).first, d2 = sd.run(2.0).first;
  return {d2 >= d1 && d1 >= d0 && d2 - d0 >= 0.05,
          fmt("ce_weight 0/1/2 Dice %.3f / %.3f / %.3f, margin 2 vs 0 %+.3f (need >= 0.05)", d0, d1, d2, d2 - d0)};
}

Outcome criterion_continual() {
  const auto t0 = Clock::now();
  const auto stream = generate_tasks(CorpusManifest::standard(7, 3));
  const auto atlas = build_atlas(stream, 3, 7, 1);
  std::map<Method, MethodSummary> s;
  for (Method m : {Method::sequential_seg, Method::rehearsal_seg, Method::joint_seg, Method::atlas_replay}) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.epochs = 100;
    cfg.seed = 3;
    const auto res = train_continual(stream, cfg, &atlas);
    std::vector<std::optional<Checkpoint>> stages;
    for (const auto& r : res) stages.push_back(r.checkpoint);
    s[m] = summarize(method_name(m), dice_matrix(stages, {}, stream, &atlas));
  }
  const double secs = seconds_since(t0);
  const double seq = *s[Method::sequential_seg].bwt, reh = *s[Method::rehearsal_seg].bwt,
               joint = *s[Method::joint_seg].bwt, ar = *s[Method::atlas_replay].bwt;
  const bool ok = seq <= -0.10 && ar >= -0.05 && seq <= reh && reh <= joint && secs < 1800.0;
  return {ok, fmt("mean BWT sequential %+.3f, rehearsal %+.3f, joint %+.3f, atlas-replay %+.3f; final mean Dice "
                  "%.3f / %.3f / %.3f / %.3f; 100 epochs per stage, %.0fs",
                  seq, reh, joint, ar, s[Method::sequential_seg].final_mean_dice,
                  s[Method::rehearsal_seg].final_mean_dice, s[Method::joint_seg].final_mean_dice,
                  s[Method::atlas_replay].final_mean_dice, secs)};
}

Outcome criterion_equivalences() {
  const auto tasks = generate_tasks(CorpusManifest::standard(12, 2, 10));
  auto cfg_for = [](Method m) {
    TrainConfig c;
    c.method = m;
    c.epochs = 3;
    c.seed = 21;
    c.rwalk_update_every = 2;
    return c;
  };
  const auto seq = train_continual(tasks, cfg_for(Method::sequential_seg));
  auto ewc_cfg = cfg_for(Method::ewc_seg);
  ewc_cfg.ewc_lambda = 0;
  auto rw_cfg = cfg_for(Method::rwalk_seg);
  rw_cfg.rwalk_lambda = 0;
  const auto ewc = train_continual(tasks, ewc_cfg), rw = train_continual(tasks, rw_cfg);
  bool ewc_eq = true, rw_eq = true;
  for (std::size_t p = 0; p < tasks.size(); ++p) {
    ewc_eq = ewc_eq && ewc[p].checkpoint.parameter_bytes() == seq[p].checkpoint.parameter_bytes();
    rw_eq = rw_eq && rw[p].checkpoint.parameter_bytes() == seq[p].checkpoint.parameter_bytes();
  }
  const auto atlas = build_atlas(tasks, 2, 3, 1);
  bool single_eq = true;
  for (Method m : {Method::atlas_replay, Method::sequential_seg}) {
    const auto streamed = train_continual({tasks[0]}, cfg_for(m), &atlas);
    ContinualTrainer direct(cfg_for(m), &atlas);
    single_eq = single_eq && encode_container(checkpoint_container(streamed[0].checkpoint)) ==
                                 encode_container(checkpoint_container(direct.train_stage(tasks[0]).checkpoint));
  }
  return {ewc_eq && rw_eq && single_eq,
          fmt("EWC lambda=0 %s, RWalk lambda=0 %s sequential parameter bytes; 1-stage stream %s train_stage",
              ewc_eq ? "==" : "!=", rw_eq ? "==" : "!=", single_eq ? "==" : "!=")};
}

Outcome criterion_storage_privacy() {
  fixtures::TempDir dir("acceptance_storage");
  const auto manifest = CorpusManifest::standard(31, 4, 30);
  generate_corpus(manifest, dir.path());
  CorpusReader reader(dir.path());
  const auto all = reader.load_all();
  const auto atlas = build_atlas(all, 4, 7, 3);

  // Stage-p reads must all come from task p's directory.
  std::size_t current = 0, reads = 0, earlier_reads = 0;
  reader.on_file_read = [&](const std::string& path) {
    ++reads;
    for (std::size_t q = 1; q < current; ++q)
      if (path.find("/" + manifest.tasks[q - 1].tag + "/") != std::string::npos) ++earlier_reads;
  };
  std::size_t earlier_samples = 0;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 5;
  train_continual(
      3,
      [&](std::size_t p) {
        current = p;
        return reader.load_task(p);
      },
      cfg, &atlas, [&](const SampleAccess& a) { earlier_samples += a.sample_stage != a.current_stage; });

  // Atlas bytes must not contain any non-constant row of a constituent image.
  const auto bytes = encode_container(atlas_container(atlas));
  std::size_t rows = 0, leaked = 0;
  for (std::size_t t = 0; t < atlas.size(); ++t) {
    for (const auto& c : all[t].train) {
      if (std::find(atlas.prototypes[t].constituent_ids.begin(), atlas.prototypes[t].constituent_ids.end(),
                    hashed_id(c.case_id)) == atlas.prototypes[t].constituent_ids.end())
        continue;
      for (const Image* img : {&c.scan, &c.mask}) {
        for (std::size_t y = 0; y < img->height; ++y) {
          const float* row = img->pixels.data() + y * img->width;
          if (std::all_of(row, row + img->width, [&](float v) { return v == row[0]; })) continue;
          ++rows;
          const auto* b = reinterpret_cast<const std::uint8_t*>(row);
          leaked += std::search(bytes.begin(), bytes.end(), b, b + img->width * sizeof(float)) != bytes.end();
        }
      }
    }
  }

  const auto probe = reid_probe(atlas, all, 1000, 17, Attacker::random);
  const double precision = *probe.metrics.precision;
  const std::size_t trials = probe.counts.tp + probe.counts.fp;
  const bool ok = reads == 3 * 30 && earlier_reads == 0 && earlier_samples == 0 && rows > 0 && leaked == 0 &&
                  std::abs(precision - 1.0 / 3.0) <= 0.03 && trials >= 1000;
  return {ok, fmt("%zu case-file reads during training, %zu from earlier stages; %zu constituent rows scanned, %zu "
                  "found in atlas; random attacker precision %.4f over %zu trials",
                  reads, earlier_reads, rows, leaked, precision, trials)};
}

std::string pipeline_report(const std::filesystem::path& root) {
  const auto manifest = CorpusManifest::standard(44, 3, 10);
  generate_corpus(manifest, root / "corpus");
  CorpusReader reader(root / "corpus");
  save_atlas(build_atlas(reader.load_all(), 3, 3, 2), (root / "atlas.bin").string());
  const auto atlas = load_atlas((root / "atlas.bin").string());
  std::vector<ReportRow> rows;
  for (Method m : {Method::atlas_replay, Method::sequential_seg, Method::rwalk_seg}) {
    RunSpec spec;
    spec.config.method = m;
    spec.config.epochs = 2;
    spec.config.seed = 44;
    spec.order = {1, 2, 3};
    run_training(reader, &atlas, spec, root / "run");
    const auto ev = evaluate_run(load_run(method_dir(root / "run", m)), reader, SelectMode::by_tag);
    const auto r = report_rows(ev.method, ev.matrix);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return report_csv(rows);
}

Outcome criterion_determinism() {
  fixtures::TempDir a("acceptance_det_a"), b("acceptance_det_b");
  const auto ra = pipeline_report(a.path()), rb = pipeline_report(b.path());
  const bool atlas_eq = read_file_bytes((a / "atlas.bin").string()) == read_file_bytes((b / "atlas.bin").string());
  const std::size_t lines = static_cast<std::size_t>(std::count(ra.begin(), ra.end(), '\n'));
  return {ra == rb && atlas_eq && lines == 1 + 3 * 3 * 3,
          fmt("two runs (corpus, atlas, 3 methods x 3 stages, evaluate): reports %s (%zu bytes), atlas files %s",
              ra == rb ? "identical" : "DIFFER", ra.size(), atlas_eq ? "identical" : "DIFFER")};
}

Outcome criterion_prototype_arithmetic() {
  const auto tasks = generate_tasks(CorpusManifest::standard(31, 3, 30));
  const Aligner identity = [](const Image&, const Image&) { return RigidTransform{}; };
  double worst = 0.0;
  for (const auto& task : tasks) {
    for (std::size_t r : {2u, 3u, 5u, 7u}) {
      const auto p = build_prototype(task, r, 13, identity);
      std::vector<double> scan(p.scan.size(), 0.0), mask(p.scan.size(), 0.0);
      for (std::size_t i = 1; i <= r; ++i) {
        const double w = std::ldexp(1.0, -static_cast<int>(i == 1 ? r - 1 : r - i + 1));
        const auto& id = p.constituent_ids[i - 1];
        const auto& c = *std::find_if(task.train.begin(), task.train.end(),
                                      [&](const LabeledImage& x) { return hashed_id(x.case_id) == id; });
        for (std::size_t k = 0; k < scan.size(); ++k) scan[k] += w * c.scan.pixels[k], mask[k] += w * c.mask.pixels[k];
      }
      for (std::size_t k = 0; k < scan.size(); ++k)
        worst = std::max({worst, std::abs(scan[k] - p.scan.pixels[k]), std::abs(mask[k] - p.mask.pixels[k])});
    }
  }
  return {worst < 1e-4, fmt("max |weighted constituents - prototype| = %.2e over 3 domains x r in {2,3,5,7}", worst)};
}

}  // namespace

int main() {
  SingleDomain single;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 gradient suite", criterion_gradients},
      {"2 metric oracle equivalence", criterion_metric_oracles},
      {"3 registration learning", [&] { return criterion_registration(single); }},
      {"4 loss ablation ordering", [&] { return criterion_ablation(single); }},
      {"5 continual-learning ordering", criterion_continual},
      {"6 equivalence degeneracies", criterion_equivalences},
      {"7 storage and privacy contract", criterion_storage_privacy},
      {"8 end-to-end determinism", criterion_determinism},
      {"9 prototype arithmetic", criterion_prototype_arithmetic},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed ? 1 : 0;
}
