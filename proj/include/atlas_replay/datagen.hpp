#pragma once

// Seeded synthetic multi-domain corpus. Each domain renders a smooth
// Fourier-perturbed ellipse ("gland") inside a body outline, optionally
// compressed from below (coil geometry), with its own intensity profile,
// gamma and noise level. Every case is a pure function of
// (master seed, tag, case index).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "atlas_replay/container.hpp"
#include "atlas_replay/dataset.hpp"
#include "atlas_replay/image.hpp"
#include "atlas_replay/networks.hpp"
#include "atlas_replay/rng.hpp"

namespace atlas_replay {

struct IntensityProfile {
  double outside = 0.0;   // air outside the body
  double body = 0.35;     // surrounding tissue
  double gland = 0.65;    // peripheral zone
  double core = 0.55;     // inner zone
  double rectum = 0.15;   // posterior structure (coil lumen when present)
  double gamma = 1.0;
};

struct DomainSpec {
  std::string tag;
  double radius_x = 13.0;
  double radius_y = 11.0;
  int lobe_count = 3;
  double lobe_amplitude = 0.08;
  // Scale applied to the posterior half (below centre); 1 = no coil.
  double coil_compression = 1.0;
  IntensityProfile intensity;
  double noise_sigma = 0.04;
  double jitter_center_px = 5.0;
  double jitter_radius_frac = 0.18;
  double jitter_rotation_deg = 15.0;

  /// Largest possible gland half-extent in pixels.
  double max_extent() const {
    const double r = std::max(radius_x, radius_y) * (1.0 + jitter_radius_frac);
    return r * (1.0 + 1.5 * lobe_amplitude) + jitter_center_px;
  }

  void validate(std::size_t grid) const {
    if (noise_sigma < 0) throw ContractViolation("DomainSpec " + tag + ": negative noise sigma");
    if (max_extent() + 4.0 > static_cast<double>(grid) / 2.0) {
      throw ContractViolation("DomainSpec " + tag + ": gland does not fit the grid with a 4 px margin");
    }
  }
};

/// Built-in domains A-D; other tags get parameters derived from the tag hash.
inline DomainSpec default_domain(const std::string& tag) {
  DomainSpec d;
  d.tag = tag;
  if (tag == "A") {
    d.radius_x = 13.0, d.radius_y = 11.0, d.lobe_count = 3, d.lobe_amplitude = 0.08;
    d.intensity = {0.0, 0.35, 0.48, 0.75, 0.12, 1.0};
    d.noise_sigma = 0.05;
  } else if (tag == "B") {
    d.radius_x = 14.0, d.radius_y = 12.0, d.lobe_count = 2, d.lobe_amplitude = 0.10;
    d.coil_compression = 0.55;
    d.intensity = {0.02, 0.45, 0.85, 0.70, 0.95, 0.7};
    d.noise_sigma = 0.05;
  } else if (tag == "C") {
    d.radius_x = 15.5, d.radius_y = 9.0, d.lobe_count = 4, d.lobe_amplitude = 0.06;
    d.intensity = {0.0, 0.55, 0.72, 0.38, 0.20, 1.3};
    d.noise_sigma = 0.04;
  } else if (tag == "D") {
    d.radius_x = 12.0, d.radius_y = 13.0, d.lobe_count = 3, d.lobe_amplitude = 0.10;
    d.coil_compression = 0.7;
    d.intensity = {0.05, 0.30, 0.48, 0.62, 0.02, 1.5};
    d.noise_sigma = 0.06;
  } else {
    Rng rng(derive_seed(fnv1a(tag), fnv1a("domain")));
    d.radius_x = uniform(rng, 10.0, 15.0);
    d.radius_y = uniform(rng, 9.0, 13.0);
    d.lobe_count = 2 + static_cast<int>(uniform_index(rng, 3));
    d.lobe_amplitude = uniform(rng, 0.04, 0.10);
    d.coil_compression = uniform01(rng) < 0.5 ? 1.0 : uniform(rng, 0.55, 0.8);
    d.intensity = {uniform(rng, 0.0, 0.05), uniform(rng, 0.2, 0.7), uniform(rng, 0.2, 0.9), uniform(rng, 0.2, 0.9),
                   uniform(rng, 0.0, 1.0), uniform(rng, 0.7, 1.5)};
    d.noise_sigma = uniform(rng, 0.03, 0.06);
  }
  return d;
}

struct TaskSpec {
  std::string tag;
  std::size_t case_count = 30;
  std::size_t stage = 0;
};

struct CorpusManifest {
  std::size_t grid = 64;
  std::vector<TaskSpec> tasks;
  double split = 0.8;
  std::uint64_t seed = 0;

  /// Four domains of 30 cases each.
  static CorpusManifest standard(std::uint64_t seed, std::size_t domains = 4, std::size_t cases = 30) {
    CorpusManifest m;
    m.seed = seed;
    for (std::size_t i = 0; i < domains; ++i) m.tasks.push_back({std::string(1, static_cast<char>('A' + i)), cases, i + 1});
    return m;
  }

  void validate() const {
    if (grid < 16 || grid % 4 != 0) throw ContractViolation("CorpusManifest: grid must be a multiple of 4 and >= 16");
    if (!(split > 0.0 && split < 1.0)) throw ContractViolation("CorpusManifest: split must lie in (0,1)");
    if (tasks.empty()) throw ContractViolation("CorpusManifest: no tasks");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto& t = tasks[i];
      if (t.case_count < 9) throw ContractViolation("CorpusManifest: task " + t.tag + " needs at least 9 cases");
      if (t.tag.empty()) throw ContractViolation("CorpusManifest: empty task tag");
      if (t.tag.find_first_of(",:/\\ \n") != std::string::npos)
        throw ContractViolation("CorpusManifest: tag '" + t.tag + "' contains a reserved character");
      for (std::size_t j = 0; j < i; ++j)
        if (tasks[j].tag == t.tag) throw ContractViolation("CorpusManifest: duplicate task tag " + t.tag);
    }
  }

  std::size_t train_count(const TaskSpec& t) const {
    return static_cast<std::size_t>(std::llround(split * static_cast<double>(t.case_count)));
  }
};

inline std::string to_text(const CorpusManifest& m) {
  std::string s = "grid=" + std::to_string(m.grid) + "\nseed=" + std::to_string(m.seed) +
                  "\nsplit=" + format_real(m.split) + "\ntasks=";
  for (std::size_t i = 0; i < m.tasks.size(); ++i) {
    s += (i ? "," : "") + m.tasks[i].tag + ":" + std::to_string(m.tasks[i].case_count);
  }
  return s + "\n";
}

/// Parses `grid=`, `seed=`, `split=` and `tasks=TAG:COUNT,...` lines; stage
/// indices follow the listed order.
inline CorpusManifest parse_manifest(const std::string& text) {
  auto kv = parse_key_values(text);
  CorpusManifest m;
  try {
    if (auto it = kv.find("grid"); it != kv.end()) m.grid = std::stoul(it->second);
    if (auto it = kv.find("seed"); it != kv.end()) m.seed = std::stoull(it->second);
    if (auto it = kv.find("split"); it != kv.end()) m.split = std::stod(it->second);
    auto it = kv.find("tasks");
    if (it == kv.end()) throw ContractViolation("manifest: missing tasks= line");
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      auto colon = item.find(':');
      TaskSpec t;
      t.tag = item.substr(0, colon);
      t.case_count = colon == std::string::npos ? 30 : std::stoul(item.substr(colon + 1));
      t.stage = m.tasks.size() + 1;
      m.tasks.push_back(t);
    }
  } catch (const std::logic_error& e) {
    throw ContractViolation(std::string("manifest: malformed value (") + e.what() + ")");
  }
  m.validate();
  return m;
}

namespace detail {

inline double smoothstep_edge(double signed_dist, double softness = 0.6) {
  return 1.0 / (1.0 + std::exp(-signed_dist / softness));
}

}  // namespace detail

inline std::string case_id(const std::string& tag, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%03zu", tag.c_str(), index);
  return buf;
}

/// Renders case `index` of `domain`.
inline LabeledImage render_case(const DomainSpec& domain, std::size_t grid, std::uint64_t master_seed,
                                std::size_t index) {
  domain.validate(grid);
  Rng rng(derive_seed(master_seed, fnv1a(domain.tag), index));
  const double half = (static_cast<double>(grid) - 1.0) / 2.0;
  const double cx = half + uniform(rng, -domain.jitter_center_px, domain.jitter_center_px);
  const double cy = half + uniform(rng, -domain.jitter_center_px, domain.jitter_center_px);
  const double rx = domain.radius_x * (1.0 + uniform(rng, -domain.jitter_radius_frac, domain.jitter_radius_frac));
  const double ry = domain.radius_y * (1.0 + uniform(rng, -domain.jitter_radius_frac, domain.jitter_radius_frac));
  const double rot = radians(uniform(rng, -domain.jitter_rotation_deg, domain.jitter_rotation_deg));
  const int K = domain.lobe_count;
  std::vector<double> amp(static_cast<std::size_t>(K) + 1), phase(static_cast<std::size_t>(K) + 1);
  for (int k = 1; k <= K; ++k) {
    amp[static_cast<std::size_t>(k)] = domain.lobe_amplitude * uniform(rng, 0.5, 1.5) / static_cast<double>(k);
    phase[static_cast<std::size_t>(k)] = uniform(rng, 0.0, 2.0 * kPi);
  }
  const double core_scale = uniform(rng, 0.45, 0.6);
  const double body_rx = half - uniform(rng, 2.0, 4.0), body_ry = half - uniform(rng, 5.0, 8.0);
  const double bias_x = uniform(rng, -0.08, 0.08), bias_y = uniform(rng, -0.08, 0.08);
  const double cos_r = std::cos(rot), sin_r = std::sin(rot);
  const auto& I = domain.intensity;

  // Boundary radius of the gland along direction theta (gland frame).
  auto boundary = [&](double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    double r = rx * ry / std::sqrt(ry * ry * c * c + rx * rx * s * s);
    double mod = 1.0;
    for (int k = 1; k <= K; ++k) mod += amp[static_cast<std::size_t>(k)] * std::cos(k * theta + phase[static_cast<std::size_t>(k)]);
    return r * mod;
  };
  // Gland-frame coordinates (rotation, then undo posterior compression).
  auto gland_frame = [&](double x, double y) {
    const double dx = x - cx;
    const double dy = y > cy ? (y - cy) / domain.coil_compression : y - cy;
    return std::pair{cos_r * dx + sin_r * dy, -sin_r * dx + cos_r * dy};
  };
  // Posterior structure just below the gland, flattened against it when a coil is present.
  const double rect_cy = cy + ry * domain.coil_compression + 5.0;
  const double rect_rx = 6.0 + 3.0 * (1.0 - domain.coil_compression) * 4.0;
  const double rect_ry = 4.0 * domain.coil_compression + 1.0;

  LabeledImage out;
  out.domain_tag = domain.tag;
  out.case_id = case_id(domain.tag, index);
  out.scan = Image(grid, grid);
  out.mask = Image(grid, grid);
  for (std::size_t y = 0; y < grid; ++y) {
    for (std::size_t x = 0; x < grid; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      auto [u, v] = gland_frame(fx, fy);
      const double r = std::hypot(u, v);
      const double theta = std::atan2(v, u);
      const double rb = boundary(theta);
      const double gland_sd = rb - r;
      out.mask.at(y, x) = gland_sd >= 0.0 ? 1.0f : 0.0f;

      const double bx = (fx - half) / body_rx, by = (fy - half) / body_ry;
      const double body_sd = (1.0 - std::sqrt(bx * bx + by * by)) * std::min(body_rx, body_ry);
      const double ex = (fx - cx) / rect_rx, ey = (fy - rect_cy) / rect_ry;
      const double rect_sd = (1.0 - std::sqrt(ex * ex + ey * ey)) * std::min(rect_rx, rect_ry);

      double val = I.outside + (I.body - I.outside) * detail::smoothstep_edge(body_sd, 1.0);
      val += (I.rectum - val) * detail::smoothstep_edge(rect_sd);
      const double g = detail::smoothstep_edge(gland_sd);
      const double core = detail::smoothstep_edge(core_scale * rb - r);
      const double gland_val = I.gland + (I.core - I.gland) * core;
      val += (gland_val - val) * g;
      val *= 1.0 + bias_x * (fx - half) / half + bias_y * (fy - half) / half;
      val = std::pow(std::clamp(val, 0.0, 1.0), I.gamma);
      val += domain.noise_sigma * gaussian(rng);
      out.scan.at(y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  out.scan = normalize_intensity(out.scan);
  return out;
}

/// Seeded 80:20 style split of case indices for one task.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const CorpusManifest& m,
                                                                                    const TaskSpec& t) {
  Rng rng(derive_seed(m.seed, fnv1a(t.tag), fnv1a("split")));
  std::vector<std::size_t> idx(t.case_count);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  shuffle(idx, rng);
  const std::size_t n_train = m.train_count(t);
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<long>(n_train));
  std::vector<std::size_t> val(idx.begin() + static_cast<long>(n_train), idx.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

inline TaskDataset generate_task(const CorpusManifest& m, const TaskSpec& t) {
  const DomainSpec domain = default_domain(t.tag);
  auto [train, val] = split_indices(m, t);
  TaskDataset task;
  task.stage = t.stage;
  task.domain_tag = t.tag;
  for (auto i : train) task.train.push_back(render_case(domain, m.grid, m.seed, i));
  for (auto i : val) task.val.push_back(render_case(domain, m.grid, m.seed, i));
  return task;
}

/// In-memory corpus: one TaskDataset per manifest task, in manifest order.
inline std::vector<TaskDataset> generate_tasks(const CorpusManifest& m) {
  m.validate();
  std::vector<TaskDataset> out;
  for (const auto& t : m.tasks) out.push_back(generate_task(m, t));
  return out;
}

// ---------------------------------------------------------------------------
// On-disk corpus
//
//   DIR/corpus.txt            manifest (key=value)
//   DIR/cases.csv             tag,stage,index,split,file
//   DIR/<tag>/case_NNN.bin    container: scan (f32 HxW), mask (u8 HxW), case_id
// ---------------------------------------------------------------------------

inline Container case_container(const LabeledImage& c) {
  const auto H = static_cast<std::uint32_t>(c.scan.height), W = static_cast<std::uint32_t>(c.scan.width);
  std::vector<std::uint8_t> mask(c.mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = c.mask.pixels[i] > 0.5f ? 1 : 0;
  Container out;
  out.entries.push_back(ContainerEntry::floats("scan", {H, W}, c.scan.pixels));
  out.entries.push_back(ContainerEntry::bytes("mask", {H, W}, std::move(mask)));
  out.entries.push_back(ContainerEntry::text("case_id", c.case_id));
  out.entries.push_back(ContainerEntry::text("domain_tag", c.domain_tag));
  return out;
}

inline LabeledImage case_from_container(const Container& c) {
  const auto& scan = c.get("scan");
  const auto& mask = c.get("mask");
  if (scan.dims.size() != 2 || mask.dims != scan.dims || scan.dtype != DType::float32 || mask.dtype != DType::uint8) {
    throw FormatError("case file: scan/mask entries malformed", 0);
  }
  LabeledImage out;
  out.scan = Image(scan.dims[0], scan.dims[1], scan.f32);
  out.mask = Image(mask.dims[0], mask.dims[1]);
  for (std::size_t i = 0; i < mask.u8.size(); ++i) out.mask.pixels[i] = mask.u8[i] ? 1.0f : 0.0f;
  out.case_id = c.get("case_id").as_text();
  out.domain_tag = c.get("domain_tag").as_text();
  return out;
}

inline std::string case_relpath(const std::string& tag, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%03zu.bin", index);
  return tag + "/" + buf;
}

inline void generate_corpus(const CorpusManifest& m, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  m.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create corpus directory '" + dir.string() + "': " + ec.message());
  std::string index_csv = "tag,stage,index,split,file\n";
  for (const auto& t : m.tasks) {
    fs::create_directories(dir / t.tag, ec);
    if (ec) throw IoError("cannot create '" + (dir / t.tag).string() + "': " + ec.message());
    const DomainSpec domain = default_domain(t.tag);
    auto [train, val] = split_indices(m, t);
    auto emit = [&](std::size_t i, const char* split) {
      const std::string rel = case_relpath(t.tag, i);
      write_container((dir / rel).string(), case_container(render_case(domain, m.grid, m.seed, i)));
      index_csv += t.tag + "," + std::to_string(t.stage) + "," + std::to_string(i) + "," + split + "," + rel + "\n";
    };
    for (auto i : train) emit(i, "train");
    for (auto i : val) emit(i, "val");
  }
  const std::string manifest = to_text(m);
  write_file_bytes((dir / "corpus.txt").string(), std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
  write_file_bytes((dir / "cases.csv").string(), std::span(reinterpret_cast<const std::uint8_t*>(index_csv.data()), index_csv.size()));
}

struct CaseRecord {
  std::string tag;
  std::size_t stage = 0;
  std::size_t index = 0;
  bool train = true;
  std::string file;
};

/// Reads a corpus directory lazily, one task at a time. Every case-file read
/// is reported to `on_file_read`.
class CorpusReader {
 public:
  explicit CorpusReader(std::filesystem::path dir) : dir_(std::move(dir)) {
    manifest_ = parse_manifest(read_text(dir_ / "corpus.txt"));
    std::stringstream ss(read_text(dir_ / "cases.csv"));
    std::string line;
    std::getline(ss, line);
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) f.push_back(cell);
      if (f.size() != 5) throw FormatError("cases.csv: expected 5 columns", 0);
      records_.push_back({f[0], std::stoul(f[1]), std::stoul(f[2]), f[3] == "train", f[4]});
    }
  }

  const CorpusManifest& manifest() const { return manifest_; }
  const std::vector<CaseRecord>& records() const { return records_; }
  std::size_t task_count() const { return manifest_.tasks.size(); }

  std::function<void(const std::string&)> on_file_read;

  /// Loads the task listed at 1-based manifest position `stage`.
  TaskDataset load_task(std::size_t stage) const {
    if (stage == 0 || stage > manifest_.tasks.size()) throw ContractViolation("CorpusReader: no task " + std::to_string(stage));
    const auto& spec = manifest_.tasks[stage - 1];
    TaskDataset task;
    task.stage = spec.stage;
    task.domain_tag = spec.tag;
    for (const auto& r : records_) {
      if (r.tag != spec.tag) continue;
      const std::string path = (dir_ / r.file).string();
      if (on_file_read) on_file_read(path);
      auto c = case_from_container(read_container(path));
      (r.train ? task.train : task.val).push_back(std::move(c));
    }
    return task;
  }

  std::vector<TaskDataset> load_all() const {
    std::vector<TaskDataset> out;
    for (std::size_t s = 1; s <= task_count(); ++s) out.push_back(load_task(s));
    return out;
  }

 private:
  static std::string read_text(const std::filesystem::path& p) {
    auto bytes = read_file_bytes(p.string());
    return std::string(bytes.begin(), bytes.end());
  }

  std::filesystem::path dir_;
  CorpusManifest manifest_;
  std::vector<CaseRecord> records_;
};

}  // namespace atlas_replay
