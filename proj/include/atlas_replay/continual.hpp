#pragma once

// Stage-wise training over a task stream: atlas replay (registration net +
// fixed prototype atlas) and the end-to-end segmentation baselines
// (sequential, rehearsal, EWC, RWalk, cumulative joint).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "atlas_replay/adam.hpp"
#include "atlas_replay/container.hpp"
#include "atlas_replay/dataset.hpp"
#include "atlas_replay/networks.hpp"
#include "atlas_replay/prototypes.hpp"
#include "atlas_replay/rng.hpp"

namespace atlas_replay {

enum class Method { atlas_replay, sequential_seg, rehearsal_seg, ewc_seg, rwalk_seg, joint_seg };

inline constexpr Method kAllMethods[] = {Method::atlas_replay, Method::sequential_seg, Method::rehearsal_seg,
                                         Method::ewc_seg,      Method::rwalk_seg,      Method::joint_seg};

/// Command-line spelling.
inline std::string method_name(Method m) {
  switch (m) {
    case Method::atlas_replay: return "atlas-replay";
    case Method::sequential_seg: return "sequential";
    case Method::rehearsal_seg: return "rehearsal";
    case Method::ewc_seg: return "ewc";
    case Method::rwalk_seg: return "rwalk";
    case Method::joint_seg: return "joint";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : kAllMethods)
    if (method_name(m) == s) return m;
  throw ContractViolation("unknown method '" + s + "'");
}

inline bool uses_registration(Method m) { return m == Method::atlas_replay; }

struct TrainConfig {
  Method method = Method::atlas_replay;
  std::size_t epochs = 250;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  double ewc_lambda = 2.2;
  double rwalk_alpha = 0.9;
  double rwalk_lambda = 1.7;
  std::size_t rwalk_update_every = 20;
  double rwalk_xi = 1e-3;
  std::size_t rehearsal_per_task = 7;
  // Best-NCC prototype per sample when the task's tag has no prototype.
  bool prototype_fallback = true;
  RegNetConfig net = RegNetConfig::desk_scale();
  AdamOptions adam{.lr = 1e-3};

  void validate() const {
    if (batch == 0) throw ContractViolation("TrainConfig: batch must be >= 1");
    if (ewc_lambda < 0 || rwalk_lambda < 0) throw ContractViolation("TrainConfig: lambdas must be >= 0");
    if (rwalk_alpha < 0 || rwalk_alpha > 1) throw ContractViolation("TrainConfig: rwalk_alpha must lie in [0,1]");
    if (rwalk_update_every == 0) throw ContractViolation("TrainConfig: rwalk_update_every must be >= 1");
    if (!(adam.lr > 0)) throw ContractViolation("TrainConfig: lr must be > 0");
    net.validate();
  }
};

inline std::string to_text(const TrainConfig& c) {
  std::string s;
  s += "method=" + method_name(c.method) + "\n";
  s += "epochs=" + std::to_string(c.epochs) + "\n";
  s += "batch=" + std::to_string(c.batch) + "\n";
  s += "seed=" + std::to_string(c.seed) + "\n";
  s += "ewc_lambda=" + format_real(c.ewc_lambda) + "\n";
  s += "rwalk_alpha=" + format_real(c.rwalk_alpha) + "\n";
  s += "rwalk_lambda=" + format_real(c.rwalk_lambda) + "\n";
  s += "rwalk_update_every=" + std::to_string(c.rwalk_update_every) + "\n";
  s += "rwalk_xi=" + format_real(c.rwalk_xi) + "\n";
  s += "rehearsal_per_task=" + std::to_string(c.rehearsal_per_task) + "\n";
  s += "prototype_fallback=" + std::string(c.prototype_fallback ? "1" : "0") + "\n";
  s += "lr=" + format_real(c.adam.lr) + "\n";
  s += "beta1=" + format_real(c.adam.beta1) + "\n";
  s += "beta2=" + format_real(c.adam.beta2) + "\n";
  s += "eps=" + format_real(c.adam.eps) + "\n";
  return s + to_text(c.net);
}

/// Overrides fields present in `kv`; unknown keys are rejected.
inline void apply_key_values(TrainConfig& c, const std::map<std::string, std::string>& kv) {
  static const char* const known[] = {"method",     "epochs",      "batch",         "seed",
                                      "ewc_lambda", "rwalk_alpha", "rwalk_lambda",  "rwalk_update_every",
                                      "rwalk_xi",   "rehearsal_per_task", "prototype_fallback",
                                      "lr",         "beta1",       "beta2",         "eps",
                                      "enc_channels", "dec_channels", "leaky_slope", "flow_init_scale",
                                      "ncc_window", "ce_weight",   "smooth_weight"};
  for (const auto& [k, v] : kv) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* n) { return k == n; }) == std::end(known)) {
      throw ContractViolation("unknown config key '" + k + "'");
    }
  }
  try {
    auto get = [&](const char* k) -> const std::string* {
      auto it = kv.find(k);
      return it == kv.end() ? nullptr : &it->second;
    };
    if (auto v = get("method")) c.method = parse_method(*v);
    if (auto v = get("epochs")) c.epochs = std::stoul(*v);
    if (auto v = get("batch")) c.batch = std::stoul(*v);
    if (auto v = get("seed")) c.seed = std::stoull(*v);
    if (auto v = get("ewc_lambda")) c.ewc_lambda = std::stod(*v);
    if (auto v = get("rwalk_alpha")) c.rwalk_alpha = std::stod(*v);
    if (auto v = get("rwalk_lambda")) c.rwalk_lambda = std::stod(*v);
    if (auto v = get("rwalk_update_every")) c.rwalk_update_every = std::stoul(*v);
    if (auto v = get("rwalk_xi")) c.rwalk_xi = std::stod(*v);
    if (auto v = get("rehearsal_per_task")) c.rehearsal_per_task = std::stoul(*v);
    if (auto v = get("prototype_fallback")) c.prototype_fallback = *v != "0";
    if (auto v = get("lr")) c.adam.lr = std::stod(*v);
    if (auto v = get("beta1")) c.adam.beta1 = std::stod(*v);
    if (auto v = get("beta2")) c.adam.beta2 = std::stod(*v);
    if (auto v = get("eps")) c.adam.eps = std::stod(*v);
    apply_key_values(c.net, kv);
  } catch (const std::logic_error& e) {
    throw ContractViolation(std::string("config: malformed value (") + e.what() + ")");
  }
}

inline std::uint64_t config_hash(const TrainConfig& c) { return fnv1a(to_text(c)); }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  Method method = Method::atlas_replay;
  std::size_t stage = 0;
  TrainConfig config;
  std::vector<ContainerEntry> parameters;

  std::uint64_t hash() const { return config_hash(config); }

  /// Parameter entries only; equal across methods that reached the same weights.
  std::vector<std::uint8_t> parameter_bytes() const { return encode_container(Container{parameters}); }
};

inline Container checkpoint_container(const Checkpoint& ck) {
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(ck.hash()));
  Container c;
  c.entries.push_back(ContainerEntry::text(
      "__header__", "method=" + method_name(ck.method) + "\nstage=" + std::to_string(ck.stage) +
                        "\nconfig_hash=" + hash + "\n" + to_text(ck.config)));
  c.entries.insert(c.entries.end(), ck.parameters.begin(), ck.parameters.end());
  return c;
}

inline Checkpoint checkpoint_from_container(const Container& c) {
  if (c.entries.empty() || c.entries.front().name != "__header__") throw FormatError("checkpoint: missing header", 0);
  auto kv = parse_key_values(c.entries.front().as_text());
  Checkpoint ck;
  try {
    ck.stage = std::stoul(kv.at("stage"));
    ck.method = parse_method(kv.at("method"));
  } catch (const std::exception&) {
    throw FormatError("checkpoint: malformed header", 0);
  }
  kv.erase("stage");
  kv.erase("config_hash");
  apply_key_values(ck.config, kv);
  ck.parameters.assign(c.entries.begin() + 1, c.entries.end());
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_container(path, checkpoint_container(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_container(read_container(path));
}

/// A network restored from a checkpoint, ready for inference.
struct Model {
  Method method = Method::atlas_replay;
  std::optional<RegNet> reg;
  std::optional<SegNet> seg;

  static Model from_checkpoint(const Checkpoint& ck) {
    Model m;
    m.method = ck.method;
    const Container params{ck.parameters};
    if (uses_registration(ck.method)) {
      m.reg.emplace(ck.config.net);
      load_parameter_entries(*m.reg, params);
    } else {
      m.seg.emplace(ck.config.net);
      load_parameter_entries(*m.seg, params);
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Importance state (EWC / RWalk)
// ---------------------------------------------------------------------------

using ParamBuffers = std::vector<std::vector<float>>;

struct ImportanceState {
  ParamBuffers fisher;      // EWC: summed per-stage fisher; RWalk: online EMA of g^2
  ParamBuffers anchor;      // theta* at the end of the last finished stage
  ParamBuffers scores;      // RWalk path importance, >= 0
  ParamBuffers importance;  // RWalk: fisher + normalized scores, frozen at stage end
  ParamBuffers snapshot;    // RWalk: theta at the last score update
  std::uint64_t steps = 0;
  bool populated = false;

  static ImportanceState like(const std::vector<DiffTensor>& params) {
    ImportanceState s;
    for (const auto& p : params) {
      s.fisher.emplace_back(p.size(), 0.0f);
      s.scores.emplace_back(p.size(), 0.0f);
      s.snapshot.emplace_back(p.values().begin(), p.values().end());
    }
    s.anchor = s.snapshot;
    s.importance = s.fisher;
    return s;
  }
};

/// (lambda/2) * sum_i w_i (theta_i - anchor_i)^2; 0 before any stage finished.
inline double quadratic_penalty(const std::vector<DiffTensor>& params, const ParamBuffers& weights,
                                const ParamBuffers& anchor, double lambda) {
  if (weights.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double d = static_cast<double>(theta[i]) - anchor[k][i];
      acc += weights[k][i] * d * d;
    }
  }
  return 0.5 * lambda * acc;
}

inline double ewc_penalty(const std::vector<DiffTensor>& params, const ImportanceState& s, double lambda) {
  return s.populated ? quadratic_penalty(params, s.fisher, s.anchor, lambda) : 0.0;
}

/// Adds lambda * w_i (theta_i - anchor_i) to each gradient.
inline void add_penalty_gradient(std::vector<DiffTensor>& params, const ParamBuffers& weights,
                                 const ParamBuffers& anchor, double lambda) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].values();
    auto g = params[k].mutable_grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      g[i] = static_cast<float>(g[i] + lambda * weights[k][i] * (static_cast<double>(theta[i]) - anchor[k][i]));
    }
  }
}

/// One RWalk bookkeeping step after an optimizer update. `grads` are the
/// task-loss gradients of that update and `params` hold the updated weights.
inline void rwalk_update(ImportanceState& s, const ParamBuffers& grads, const std::vector<DiffTensor>& params,
                         std::size_t every, double alpha, double xi = 1e-3) {
  for (std::size_t k = 0; k < grads.size(); ++k) {
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      const double g = grads[k][i];
      s.fisher[k][i] = static_cast<float>(alpha * s.fisher[k][i] + (1.0 - alpha) * g * g);
    }
  }
  ++s.steps;
  if (s.steps % every != 0) return;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto theta = params[k].values();
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      const double dtheta = static_cast<double>(theta[i]) - s.snapshot[k][i];
      const double gain = std::max(0.0, -static_cast<double>(grads[k][i]) * dtheta);
      s.scores[k][i] = static_cast<float>(s.scores[k][i] + gain / (0.5 * s.fisher[k][i] * dtheta * dtheta + xi));
      s.snapshot[k][i] = theta[i];
    }
  }
}

/// Freezes fisher + scores/max(scores) as the penalty weights.
inline void rwalk_consolidate(ImportanceState& s, const std::vector<DiffTensor>& params) {
  float max_score = 0.0f;
  for (const auto& b : s.scores)
    for (float v : b) max_score = std::max(max_score, v);
  for (std::size_t k = 0; k < s.fisher.size(); ++k) {
    auto theta = params[k].values();
    for (std::size_t i = 0; i < s.fisher[k].size(); ++i) {
      const float norm = max_score > 0.0f ? s.scores[k][i] / max_score : 0.0f;
      s.importance[k][i] = s.fisher[k][i] + norm;
      s.anchor[k][i] = theta[i];
    }
  }
  s.populated = true;
}

// ---------------------------------------------------------------------------
// Rehearsal
// ---------------------------------------------------------------------------

/// Indices of the `per_task` stored cases of one finished task.
inline std::vector<std::size_t> rehearsal_indices(const TaskDataset& task, std::size_t per_task, std::uint64_t seed) {
  if (per_task > task.train.size()) {
    throw InsufficientData("rehearsal_buffer: task " + task.domain_tag + " has only " +
                           std::to_string(task.train.size()) + " training cases");
  }
  Rng rng(derive_seed(seed, fnv1a("rehearsal"), fnv1a(task.domain_tag)));
  auto idx = sample_without_replacement(task.train.size(), per_task, rng);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<LabeledImage> rehearsal_buffer(const std::vector<TaskDataset>& tasks_seen, std::size_t per_task,
                                                  std::uint64_t seed) {
  std::vector<LabeledImage> out;
  for (const auto& t : tasks_seen)
    for (auto i : rehearsal_indices(t, per_task, seed)) out.push_back(t.train[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct EpochLog {
  std::size_t stage = 0;
  std::size_t epoch = 0;
  double loss = 0, ncc = 0, ce = 0, smooth = 0, penalty = 0;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Reported whenever a training sample enters a batch.
struct SampleAccess {
  std::size_t current_stage;
  std::size_t sample_stage;
  std::string case_id;
};

class ContinualTrainer {
 public:
  ContinualTrainer(TrainConfig cfg, const PrototypeAtlas* atlas = nullptr) : cfg_(std::move(cfg)), atlas_(atlas) {
    cfg_.validate();
    const auto net_seed = derive_seed(cfg_.seed, fnv1a("net"));
    if (uses_registration(cfg_.method)) {
      if (!atlas_ || atlas_->empty()) throw ContractViolation("atlas replay training needs a non-empty atlas");
      reg_.emplace(cfg_.net, net_seed);
    } else {
      seg_.emplace(cfg_.net, net_seed);
    }
    importance_ = ImportanceState::like(params());
  }

  std::function<void(const SampleAccess&)> on_sample_access;

  const TrainConfig& config() const { return cfg_; }
  std::size_t stages_done() const { return stage_; }
  const ImportanceState& importance() const { return importance_; }
  std::size_t rehearsal_size() const { return memory_.size(); }

  std::vector<DiffTensor> params() const { return unet().parameters(); }

  Checkpoint checkpoint() const {
    return Checkpoint{cfg_.method, stage_, cfg_, parameter_entries(unet())};
  }

  /// Trains the next stage on `task`.
  StageResult train_stage(const TaskDataset& task) {
    ++stage_;
    if (task.train.empty()) throw InsufficientData("train_stage: task " + task.domain_tag + " has no training cases");

    std::vector<Sample> samples;
    for (const auto& c : task.train) samples.push_back({&c, stage_, nullptr});
    if (cfg_.method == Method::rehearsal_seg || cfg_.method == Method::joint_seg) {
      for (const auto& m : memory_) samples.push_back({&m.image, m.stage, nullptr});
    }
    if (uses_registration(cfg_.method)) attach_prototypes(samples, task.domain_tag);

    StageResult result;
    AdamState adam{cfg_.adam, 0, {}, {}};
    auto p = params();
    Rng shuffle_rng(derive_seed(cfg_.seed, fnv1a("shuffle"), stage_));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle(order, shuffle_rng);
      EpochLog log{stage_, epoch + 1, 0, 0, 0, 0, 0};
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch) {
        std::vector<const Sample*> batch;
        for (std::size_t j = start; j < std::min(order.size(), start + cfg_.batch); ++j) {
          batch.push_back(&samples[order[j]]);
          if (on_sample_access) on_sample_access({stage_, samples[order[j]].stage, samples[order[j]].image->case_id});
        }
        step(batch, p, adam, log);
        ++batches;
      }
      const double nb = static_cast<double>(batches);
      log.loss /= nb, log.ncc /= nb, log.ce /= nb, log.smooth /= nb, log.penalty /= nb;
      result.log.push_back(log);
    }
    finish_stage(task);
    result.checkpoint = checkpoint();
    return result;
  }

 private:
  struct Sample {
    const LabeledImage* image;
    std::size_t stage;
    const Prototype* prototype;
  };
  struct StoredSample {
    LabeledImage image;
    std::size_t stage;
  };

  const BasicUNet<float>& unet() const {
    return reg_ ? static_cast<const BasicUNet<float>&>(*reg_) : static_cast<const BasicUNet<float>&>(*seg_);
  }
  BasicUNet<float>& unet() { return reg_ ? static_cast<BasicUNet<float>&>(*reg_) : static_cast<BasicUNet<float>&>(*seg_); }

  void attach_prototypes(std::vector<Sample>& samples, const std::string& tag) const {
    if (const Prototype* p = atlas_->find(tag)) {
      for (auto& s : samples) s.prototype = p;
      return;
    }
    if (!cfg_.prototype_fallback) throw UnknownDomain("train_stage: no prototype for domain '" + tag + "'");
    for (auto& s : samples) s.prototype = &select_prototype(s.image->scan, *atlas_);
  }

  /// Task loss of a batch; fills the loss-term fields of `log`.
  DiffTensor task_loss(const std::vector<const Sample*>& batch, EpochLog* log) const {
    std::vector<const Image*> scans, masks;
    for (const Sample* s : batch) {
      scans.push_back(&s->image->scan);
      masks.push_back(&s->image->mask);
    }
    const DiffTensor scan = stack_images(scans), mask = stack_images(masks);
    if (reg_) {
      std::vector<const Image*> pscans, pmasks;
      for (const Sample* s : batch) {
        pscans.push_back(&s->prototype->scan);
        pmasks.push_back(&s->prototype->mask);
      }
      auto t = loss_reg_terms(*reg_, stack_images(pscans), stack_images(pmasks), scan, mask, cfg_.net);
      if (log) log->ncc += t.ncc.item(), log->ce += t.ce.item(), log->smooth += t.smooth.item();
      return t.total;
    }
    DiffTensor loss = loss_ce_logits(seg_->logits(scan), mask);
    if (log) log->ce += loss.item();
    return loss;
  }

  void step(const std::vector<const Sample*>& batch, std::vector<DiffTensor>& p, AdamState& adam, EpochLog& log) {
    unet().zero_grad();
    DiffTensor loss = task_loss(batch, &log);
    if (!std::isfinite(loss.item())) throw Error("training produced a non-finite loss at stage " + std::to_string(stage_));
    backward(loss);
    log.loss += loss.item();

    ParamBuffers task_grads;
    if (cfg_.method == Method::rwalk_seg) {
      for (const auto& t : p) task_grads.emplace_back(t.grad().begin(), t.grad().end());
    }
    if (cfg_.method == Method::ewc_seg && cfg_.ewc_lambda > 0 && importance_.populated) {
      const double pen = quadratic_penalty(p, importance_.fisher, importance_.anchor, cfg_.ewc_lambda);
      add_penalty_gradient(p, importance_.fisher, importance_.anchor, cfg_.ewc_lambda);
      log.penalty += pen, log.loss += pen;
    }
    if (cfg_.method == Method::rwalk_seg && cfg_.rwalk_lambda > 0 && importance_.populated) {
      const double pen = quadratic_penalty(p, importance_.importance, importance_.anchor, cfg_.rwalk_lambda);
      add_penalty_gradient(p, importance_.importance, importance_.anchor, cfg_.rwalk_lambda);
      log.penalty += pen, log.loss += pen;
    }
    adam_step(p, adam);
    if (cfg_.method == Method::rwalk_seg) {
      rwalk_update(importance_, task_grads, p, cfg_.rwalk_update_every, cfg_.rwalk_alpha, cfg_.rwalk_xi);
    }
  }

  void finish_stage(const TaskDataset& task) {
    auto p = params();
    switch (cfg_.method) {
      case Method::ewc_seg: {
        // Empirical fisher: mean squared per-sample gradient of the task loss.
        const double inv = 1.0 / static_cast<double>(task.train.size());
        ParamBuffers f;
        for (const auto& t : p) f.emplace_back(t.size(), 0.0f);
        for (const auto& c : task.train) {
          Sample s{&c, stage_, nullptr};
          unet().zero_grad();
          backward(task_loss({&s}, nullptr));
          for (std::size_t k = 0; k < p.size(); ++k) {
            auto g = p[k].grad();
            for (std::size_t i = 0; i < g.size(); ++i) f[k][i] = static_cast<float>(f[k][i] + inv * g[i] * g[i]);
          }
        }
        for (std::size_t k = 0; k < p.size(); ++k) {
          auto theta = p[k].values();
          for (std::size_t i = 0; i < theta.size(); ++i) {
            importance_.fisher[k][i] += f[k][i];
            importance_.anchor[k][i] = theta[i];
          }
        }
        importance_.populated = true;
        break;
      }
      case Method::rwalk_seg:
        rwalk_consolidate(importance_, p);
        break;
      case Method::rehearsal_seg:
        for (auto i : rehearsal_indices(task, cfg_.rehearsal_per_task, cfg_.seed)) {
          memory_.push_back({task.train[i], stage_});
        }
        break;
      case Method::joint_seg:
        for (const auto& c : task.train) memory_.push_back({c, stage_});
        break;
      default:
        break;
    }
    unet().zero_grad();
  }

  TrainConfig cfg_;
  const PrototypeAtlas* atlas_;
  std::optional<RegNet> reg_;
  std::optional<SegNet> seg_;
  std::size_t stage_ = 0;
  ImportanceState importance_;
  std::vector<StoredSample> memory_;
};

/// Runs the stream stage by stage; `load(p)` is called once, at the start of
/// stage p (1-based), so task data is only touched while its stage trains.
inline std::vector<StageResult> train_continual(std::size_t stages,
                                                const std::function<TaskDataset(std::size_t)>& load,
                                                const TrainConfig& cfg, const PrototypeAtlas* atlas = nullptr,
                                                const std::function<void(const SampleAccess&)>& on_access = {}) {
  if (stages == 0) throw ContractViolation("train_continual: empty stream");
  ContinualTrainer trainer(cfg, atlas);
  trainer.on_sample_access = on_access;
  std::vector<StageResult> out;
  for (std::size_t p = 1; p <= stages; ++p) out.push_back(trainer.train_stage(load(p)));
  return out;
}

inline std::vector<StageResult> train_continual(const std::vector<TaskDataset>& stream, const TrainConfig& cfg,
                                                const PrototypeAtlas* atlas = nullptr) {
  return train_continual(
      stream.size(), [&](std::size_t p) { return stream[p - 1]; }, cfg, atlas);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Binary masks for `scans`. Registration models warp the prototype mask of
/// `tag` (or the best-NCC prototype when no tag is given).
inline std::vector<Image> predict_segmentation(const Model& model, const std::vector<const Image*>& scans,
                                               const PrototypeAtlas* atlas = nullptr,
                                               const std::optional<std::string>& tag = std::nullopt,
                                               std::size_t batch = 8) {
  std::vector<Image> out;
  for (std::size_t start = 0; start < scans.size(); start += batch) {
    std::vector<const Image*> chunk(scans.begin() + static_cast<long>(start),
                                    scans.begin() + static_cast<long>(std::min(scans.size(), start + batch)));
    const DiffTensor scan = stack_images(chunk);
    DiffTensor prob;
    if (model.reg) {
      if (!atlas) throw ContractViolation("predict_segmentation: registration model needs an atlas");
      std::vector<const Image*> pscans, pmasks;
      for (const Image* s : chunk) {
        const Prototype& p = select_prototype(*s, *atlas, tag);
        pscans.push_back(&p.scan);
        pmasks.push_back(&p.mask);
      }
      const DiffTensor flow = model.reg->forward(stack_images(pscans), scan);
      prob = grid_sample_bilinear(stack_images(pmasks), flow);
    } else {
      prob = model.seg->forward(scan);
    }
    for (std::size_t n = 0; n < chunk.size(); ++n) out.push_back(threshold(tensor_plane(prob, n)));
  }
  return out;
}

inline Image predict_segmentation(const Model& model, const Image& scan, const PrototypeAtlas* atlas = nullptr,
                                  const std::optional<std::string>& tag = std::nullopt) {
  return predict_segmentation(model, std::vector<const Image*>{&scan}, atlas, tag).front();
}

}  // namespace atlas_replay
