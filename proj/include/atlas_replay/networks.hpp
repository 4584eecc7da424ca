#pragma once

// U-Net trunk shared by the registration network (2-channel flow head) and
// the end-to-end segmentation baseline (1-channel sigmoid head), plus the
// combined registration loss.

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "atlas_replay/autodiff.hpp"
#include "atlas_replay/container.hpp"
#include "atlas_replay/losses.hpp"
#include "atlas_replay/rng.hpp"

namespace atlas_replay {

struct RegNetConfig {
  std::vector<std::size_t> enc_channels{16, 32, 32, 32};
  std::vector<std::size_t> dec_channels{32, 32, 32, 32, 16};
  double leaky_slope = 0.2;
  double flow_init_scale = 1e-5;
  int ncc_window = 9;
  double ce_weight = 2.0;
  double smooth_weight = 1.0;

  /// Two resolution levels for 64x64 CPU experiments.
  static RegNetConfig desk_scale() {
    RegNetConfig c;
    c.enc_channels = {16, 32};
    c.dec_channels = {32, 32, 16};
    return c;
  }

  std::size_t levels() const { return enc_channels.size(); }

  void validate() const {
    if (enc_channels.empty()) throw ContractViolation("RegNetConfig: at least one encoder level required");
    if (dec_channels.size() < enc_channels.size())
      throw ContractViolation("RegNetConfig: need one decoder conv per encoder level");
    if (ncc_window < 3 || ncc_window % 2 == 0) throw ContractViolation("RegNetConfig: ncc_window must be odd and >= 3");
    if (ce_weight < 0 || smooth_weight < 0) throw ContractViolation("RegNetConfig: loss weights must be >= 0");
    for (auto c : enc_channels)
      if (c == 0) throw ContractViolation("RegNetConfig: zero channel count");
    for (auto c : dec_channels)
      if (c == 0) throw ContractViolation("RegNetConfig: zero channel count");
  }

  friend bool operator==(const RegNetConfig&, const RegNetConfig&) = default;
};

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Flat key=value lines.
inline std::string to_text(const RegNetConfig& c) {
  std::string s;
  s += "enc_channels=" + join_sizes(c.enc_channels) + "\n";
  s += "dec_channels=" + join_sizes(c.dec_channels) + "\n";
  s += "leaky_slope=" + format_real(c.leaky_slope) + "\n";
  s += "flow_init_scale=" + format_real(c.flow_init_scale) + "\n";
  s += "ncc_window=" + std::to_string(c.ncc_window) + "\n";
  s += "ce_weight=" + format_real(c.ce_weight) + "\n";
  s += "smooth_weight=" + format_real(c.smooth_weight) + "\n";
  return s;
}

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

/// Overrides fields present in `kv`; unknown keys are ignored.
inline void apply_key_values(RegNetConfig& c, const std::map<std::string, std::string>& kv) {
  if (auto it = kv.find("enc_channels"); it != kv.end()) c.enc_channels = parse_sizes(it->second);
  if (auto it = kv.find("dec_channels"); it != kv.end()) c.dec_channels = parse_sizes(it->second);
  if (auto it = kv.find("leaky_slope"); it != kv.end()) c.leaky_slope = std::stod(it->second);
  if (auto it = kv.find("flow_init_scale"); it != kv.end()) c.flow_init_scale = std::stod(it->second);
  if (auto it = kv.find("ncc_window"); it != kv.end()) c.ncc_window = std::stoi(it->second);
  if (auto it = kv.find("ce_weight"); it != kv.end()) c.ce_weight = std::stod(it->second);
  if (auto it = kv.find("smooth_weight"); it != kv.end()) c.smooth_weight = std::stod(it->second);
}

template <class Real>
struct NamedParameter {
  std::string name;
  BasicTensor<Real> tensor;
};

enum class HeadKind { flow, segmentation };

/// U-Net: stride-2 encoder convs, decoder convs each followed by 2x
/// upsampling and a skip concatenation, extra full-resolution convs, and a
/// 3x3 output head.
template <class Real>
class BasicUNet {
 public:
  BasicUNet(const RegNetConfig& cfg, std::size_t in_channels, HeadKind head, std::uint64_t seed)
      : cfg_(cfg), in_channels_(in_channels), head_(head) {
    cfg_.validate();
    Rng rng(derive_seed(seed, fnv1a("unet-init")));
    const std::size_t L = cfg_.levels();
    std::vector<std::size_t> skip_channels{in_channels};
    std::size_t cur = in_channels;
    for (std::size_t i = 0; i < L; ++i) {
      add_conv("enc" + std::to_string(i), cur, cfg_.enc_channels[i], rng);
      cur = cfg_.enc_channels[i];
      if (i + 1 < L) skip_channels.push_back(cur);
    }
    for (std::size_t j = 0; j < cfg_.dec_channels.size(); ++j) {
      add_conv("dec" + std::to_string(j), cur, cfg_.dec_channels[j], rng);
      cur = cfg_.dec_channels[j];
      if (j < L) cur += skip_channels[L - 1 - j];
    }
    const std::size_t out = head == HeadKind::flow ? 2 : 1;
    const std::string head_name = head == HeadKind::flow ? "flow" : "seg";
    if (head == HeadKind::flow) {
      add_conv(head_name, cur, out, rng, cfg_.flow_init_scale);
    } else {
      add_conv(head_name, cur, out, rng);
    }
  }

  const RegNetConfig& config() const { return cfg_; }
  std::size_t in_channels() const { return in_channels_; }
  HeadKind head() const { return head_; }

  std::vector<NamedParameter<Real>>& named_parameters() { return params_; }
  const std::vector<NamedParameter<Real>>& named_parameters() const { return params_; }

  std::vector<BasicTensor<Real>> parameters() const {
    std::vector<BasicTensor<Real>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      auto g = p.tensor.mutable_grad();
      std::fill(g.begin(), g.end(), Real(0));
    }
  }

  /// Raw head output: flow for the registration net, logits otherwise.
  BasicTensor<Real> forward(const BasicTensor<Real>& input) const {
    detail::require_rank4(input.shape(), "unet forward");
    if (input.dim(1) != in_channels_) throw InvalidShape("unet forward: wrong channel count");
    const std::size_t L = cfg_.levels();
    const std::size_t div = std::size_t{1} << L;
    if (input.dim(2) % div != 0 || input.dim(3) % div != 0) {
      throw InvalidShape("unet forward: spatial size " + shape_string(input.shape()) + " not divisible by " +
                         std::to_string(div));
    }
    const Real slope = static_cast<Real>(cfg_.leaky_slope);
    std::vector<BasicTensor<Real>> skips{input};
    BasicTensor<Real> x = input;
    std::size_t k = 0;
    for (std::size_t i = 0; i < L; ++i, ++k) {
      x = leaky_relu(conv(k, x, 2), slope);
      if (i + 1 < L) skips.push_back(x);
    }
    for (std::size_t j = 0; j < cfg_.dec_channels.size(); ++j, ++k) {
      x = leaky_relu(conv(k, x, 1), slope);
      if (j < L) x = concat_channels(upsample2x(x), skips[L - 1 - j]);
    }
    return conv(k, x, 1);
  }

 private:
  BasicTensor<Real> conv(std::size_t layer, const BasicTensor<Real>& x, int stride) const {
    return conv2d(x, params_[2 * layer].tensor, params_[2 * layer + 1].tensor, stride, 1);
  }

  void add_conv(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double normal_std = -1.0) {
    const std::size_t fan_in = in * 9;
    std::vector<Real> w(out * fan_in);
    if (normal_std >= 0.0) {
      for (auto& v : w) v = static_cast<Real>(normal_std * gaussian(rng));
    } else {
      const double bound = std::sqrt(6.0 / ((1.0 + cfg_.leaky_slope * cfg_.leaky_slope) * static_cast<double>(fan_in)));
      for (auto& v : w) v = static_cast<Real>(uniform(rng, -bound, bound));
    }
    params_.push_back({name + ".weight", BasicTensor<Real>({out, in, 3, 3}, std::move(w), true)});
    params_.push_back({name + ".bias", BasicTensor<Real>::zeros({out}, true)});
  }

  RegNetConfig cfg_;
  std::size_t in_channels_;
  HeadKind head_;
  std::vector<NamedParameter<Real>> params_;
};

/// Registration network: (moving, fixed) -> flow [N,2,H,W].
template <class Real>
class BasicRegNet : public BasicUNet<Real> {
 public:
  explicit BasicRegNet(const RegNetConfig& cfg, std::uint64_t seed = 0)
      : BasicUNet<Real>(cfg, 2, HeadKind::flow, seed) {}

  BasicTensor<Real> forward(const BasicTensor<Real>& moving, const BasicTensor<Real>& fixed) const {
    detail::require_same_shape(moving.shape(), fixed.shape(), "regnet_forward");
    return BasicUNet<Real>::forward(concat_channels(moving, fixed));
  }
};

/// Segmentation network: scan -> foreground probability [N,1,H,W].
template <class Real>
class BasicSegNet : public BasicUNet<Real> {
 public:
  explicit BasicSegNet(const RegNetConfig& cfg, std::uint64_t seed = 0)
      : BasicUNet<Real>(cfg, 1, HeadKind::segmentation, seed) {}

  BasicTensor<Real> forward(const BasicTensor<Real>& scan) const { return sigmoid(logits(scan)); }
  BasicTensor<Real> logits(const BasicTensor<Real>& scan) const { return BasicUNet<Real>::forward(scan); }
};

using RegNet = BasicRegNet<float>;
using SegNet = BasicSegNet<float>;

template <class Real>
struct RegLossTerms {
  BasicTensor<Real> total, ncc, ce, smooth, flow;
};

/// NCC(P^i o phi, f^i) + ce_weight * CE(P^s o phi, f^s) + smooth_weight * smooth(phi),
/// with phi = net(P^i, f^i).
template <class Real>
RegLossTerms<Real> loss_reg_terms(const BasicRegNet<Real>& net, const BasicTensor<Real>& proto_scan,
                                  const BasicTensor<Real>& proto_mask, const BasicTensor<Real>& scan,
                                  const BasicTensor<Real>& mask, const RegNetConfig& cfg) {
  RegLossTerms<Real> t;
  t.flow = net.forward(proto_scan, scan);
  t.ncc = loss_ncc(grid_sample_bilinear(proto_scan, t.flow), scan, cfg.ncc_window);
  t.ce = loss_ce(grid_sample_bilinear(proto_mask, t.flow), mask);
  t.smooth = loss_smooth(t.flow);
  t.total = add(add(t.ncc, scale(t.ce, static_cast<Real>(cfg.ce_weight))),
                scale(t.smooth, static_cast<Real>(cfg.smooth_weight)));
  return t;
}

template <class Real>
BasicTensor<Real> loss_reg(const BasicRegNet<Real>& net, const BasicTensor<Real>& proto_scan,
                           const BasicTensor<Real>& proto_mask, const BasicTensor<Real>& scan,
                           const BasicTensor<Real>& mask, const RegNetConfig& cfg) {
  return loss_reg_terms(net, proto_scan, proto_mask, scan, mask, cfg).total;
}

/// Parameters as container entries, one per named tensor.
template <class Real>
std::vector<ContainerEntry> parameter_entries(const BasicUNet<Real>& net) {
  std::vector<ContainerEntry> out;
  for (const auto& p : net.named_parameters()) {
    std::vector<std::uint32_t> dims;
    for (auto d : p.tensor.shape()) dims.push_back(static_cast<std::uint32_t>(d));
    std::vector<float> data(p.tensor.values().begin(), p.tensor.values().end());
    out.push_back(ContainerEntry::floats(p.name, std::move(dims), std::move(data)));
  }
  return out;
}

template <class Real>
void load_parameter_entries(BasicUNet<Real>& net, const Container& c) {
  for (auto& p : net.named_parameters()) {
    const auto& e = c.get(p.name);
    if (e.dtype != DType::float32 || e.f32.size() != p.tensor.size()) {
      throw FormatError("parameter '" + p.name + "' has the wrong size or dtype", 0);
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(e.f32[i]);
  }
}

}  // namespace atlas_replay
