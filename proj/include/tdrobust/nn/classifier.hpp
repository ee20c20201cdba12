#pragma once

// Small feed-forward classifiers.
//
// Layers: dense, conv (valid 2-D correlation), norm (per-feature
// standardisation followed by a learnable affine gamma/beta) and relu. Norm
// layers standardise with batch statistics in Mode::train and with the running
// statistics buffers in Mode::eval. The architecture marks where the
// penultimate features are read.
//
// A classifier may carry per-sample affine tables: one (gamma, beta) row per
// input row for every norm layer. When present, row i of any batch passed to
// the model is normalised with its own (gamma_i, beta_i); the backbone
// parameters are untouched.

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tdrobust/diffcore/checkpoint.hpp"
#include "tdrobust/diffcore/params.hpp"
#include "tdrobust/diffcore/tape.hpp"
#include "tdrobust/rng.hpp"

namespace tdr {

enum class LayerKind { dense, conv, norm, relu };

struct Layer {
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;
  std::size_t out = 0;
  ops::Conv2dGeometry conv{};
};

class Architecture {
 public:
  Architecture() = default;
  Architecture(std::size_t input_dim, std::vector<Layer> layers, std::size_t feature_boundary)
      : input_dim_(input_dim), layers_(std::move(layers)), feature_boundary_(feature_boundary) {
    validate();
  }

  /// d -> hidden... -> classes, with a norm layer after each hidden dense
  /// layer when `norm` is set. Features are the last hidden activation.
  static Architecture mlp(std::size_t d, const std::vector<std::size_t>& hidden, std::size_t classes, bool norm = true) {
    std::vector<Layer> layers;
    std::size_t w = d;
    for (std::size_t h : hidden) {
      layers.push_back({LayerKind::dense, w, h});
      if (norm) layers.push_back({LayerKind::norm, h, h});
      layers.push_back({LayerKind::relu, h, h});
      w = h;
    }
    const std::size_t boundary = layers.size();
    layers.push_back({LayerKind::dense, w, classes});
    return Architecture(d, std::move(layers), boundary);
  }

  /// One conv+relu front end before an mlp head.
  static Architecture conv_mlp(const ops::Conv2dGeometry& geo, const std::vector<std::size_t>& hidden,
                               std::size_t classes, bool norm = true) {
    Architecture head = mlp(geo.out_size(), hidden, classes, norm);
    std::vector<Layer> layers{{LayerKind::conv, geo.in_size(), geo.out_size(), geo},
                              {LayerKind::relu, geo.out_size(), geo.out_size()}};
    layers.insert(layers.end(), head.layers_.begin(), head.layers_.end());
    return Architecture(geo.in_size(), std::move(layers), head.feature_boundary_ + 2);
  }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return layers_.back().out; }
  std::size_t feature_dim() const { return feature_boundary_ == 0 ? input_dim_ : layers_[feature_boundary_ - 1].out; }
  /// Layers [0, boundary) produce the penultimate features.
  std::size_t feature_boundary() const { return feature_boundary_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t norm_layer_count() const {
    return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const Layer& l) { return l.kind == LayerKind::norm; }));
  }

  /// One-line text form, e.g. "in:2 dense:16 norm relu | dense:2".
  std::string descriptor() const {
    std::ostringstream os;
    os << "in:" << input_dim_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (i == feature_boundary_) os << " |";
      const Layer& l = layers_[i];
      switch (l.kind) {
        case LayerKind::dense: os << " dense:" << l.out; break;
        case LayerKind::norm: os << " norm"; break;
        case LayerKind::relu: os << " relu"; break;
        case LayerKind::conv:
          os << " conv:" << l.conv.in_channels << ',' << l.conv.height << ',' << l.conv.width << ','
             << l.conv.out_channels << ',' << l.conv.kernel;
          break;
      }
    }
    return os.str();
  }

  static Architecture parse(const std::string& desc) {
    std::istringstream is(desc);
    std::string tok;
    if (!(is >> tok) || tok.rfind("in:", 0) != 0) throw std::invalid_argument("architecture must start with in:<d>");
    const std::size_t d = std::stoul(tok.substr(3));
    std::vector<Layer> layers;
    std::size_t width = d;
    std::optional<std::size_t> boundary;
    while (is >> tok) {
      if (tok == "|") {
        boundary = layers.size();
      } else if (tok.rfind("dense:", 0) == 0) {
        const std::size_t out = std::stoul(tok.substr(6));
        layers.push_back({LayerKind::dense, width, out});
        width = out;
      } else if (tok == "norm") {
        layers.push_back({LayerKind::norm, width, width});
      } else if (tok == "relu") {
        layers.push_back({LayerKind::relu, width, width});
      } else if (tok.rfind("conv:", 0) == 0) {
        ops::Conv2dGeometry g;
        char c;
        std::istringstream cs(tok.substr(5));
        if (!(cs >> g.in_channels >> c >> g.height >> c >> g.width >> c >> g.out_channels >> c >> g.kernel))
          throw std::invalid_argument("bad conv token '" + tok + "'");
        layers.push_back({LayerKind::conv, g.in_size(), g.out_size(), g});
        width = g.out_size();
      } else {
        throw std::invalid_argument("unknown architecture token '" + tok + "'");
      }
    }
    if (!boundary) throw std::invalid_argument("architecture lacks a feature boundary '|'");
    return Architecture(d, std::move(layers), *boundary);
  }

  friend bool operator==(const Architecture& a, const Architecture& b) { return a.descriptor() == b.descriptor(); }

 private:
  void validate() const {
    if (layers_.empty() || layers_.back().kind != LayerKind::dense) throw std::invalid_argument("architecture must end in a dense layer");
    if (feature_boundary_ >= layers_.size()) throw std::invalid_argument("feature boundary past the output layer");
    std::size_t w = input_dim_;
    for (const Layer& l : layers_) {
      if (l.in != w) throw std::invalid_argument("architecture layer widths do not chain");
      w = l.out;
    }
  }

  std::size_t input_dim_ = 0;
  std::vector<Layer> layers_;
  std::size_t feature_boundary_ = 0;
};

/// Per-norm-layer (gamma, beta) rows, one per input sample.
struct PerSampleAffine {
  std::vector<Tensor> gamma;  // each [n, width]
  std::vector<Tensor> beta;
  std::size_t rows() const { return gamma.empty() ? 0 : gamma.front().rows(); }
};

enum class Mode { eval, train };

struct NormBatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

class Classifier {
 public:
  static constexpr double kNormEps = 1e-5;

  Classifier() = default;
  Classifier(Architecture arch, ParamSet params) : arch_(std::move(arch)), params_(std::move(params)) { check_params(); }

  /// He-normal dense/conv weights, zero biases, identity affine, unit running variance.
  static Classifier init(const Architecture& arch, Rng rng) {
    ParamSet ps;
    const auto& layers = arch.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      const std::string p = "L" + std::to_string(i) + ".";
      if (l.kind == LayerKind::dense) {
        Tensor w({l.in, l.out});
        const double sd = std::sqrt(2.0 / static_cast<double>(l.in));
        for (auto& v : w.storage()) v = rng.normal(0.0, sd);
        ps.add(p + "w", std::move(w));
        ps.add(p + "b", Tensor({l.out}, 0.0));
      } else if (l.kind == LayerKind::conv) {
        Tensor w({l.conv.out_channels, l.conv.patch()});
        const double sd = std::sqrt(2.0 / static_cast<double>(l.conv.patch()));
        for (auto& v : w.storage()) v = rng.normal(0.0, sd);
        ps.add(p + "w", std::move(w));
        ps.add(p + "b", Tensor({l.conv.out_channels}, 0.0));
      } else if (l.kind == LayerKind::norm) {
        add_norm_params(ps, p, l.out);
      }
    }
    return Classifier(arch, std::move(ps));
  }

  /// All weights zero (norm layers still identity).
  static Classifier zeros(const Architecture& arch) {
    ParamSet ps;
    const auto& layers = arch.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      const std::string p = "L" + std::to_string(i) + ".";
      if (l.kind == LayerKind::dense) {
        ps.add(p + "w", Tensor({l.in, l.out}, 0.0));
        ps.add(p + "b", Tensor({l.out}, 0.0));
      } else if (l.kind == LayerKind::conv) {
        ps.add(p + "w", Tensor({l.conv.out_channels, l.conv.patch()}, 0.0));
        ps.add(p + "b", Tensor({l.conv.out_channels}, 0.0));
      } else if (l.kind == LayerKind::norm) {
        add_norm_params(ps, p, l.out);
      }
    }
    return Classifier(arch, std::move(ps));
  }

  static Classifier from_checkpoint(const Checkpoint& ck) { return Classifier(Architecture::parse(ck.arch), ck.params); }
  Checkpoint to_checkpoint() const { return {arch_.descriptor(), params_}; }

  const Architecture& arch() const { return arch_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  std::size_t num_classes() const { return arch_.num_classes(); }
  std::size_t input_dim() const { return arch_.input_dim(); }
  std::size_t feature_dim() const { return arch_.feature_dim(); }

  bool has_affine_slots() const { return arch_.norm_layer_count() > 0; }
  const std::optional<PerSampleAffine>& per_sample() const { return per_sample_; }
  void set_per_sample(PerSampleAffine ps) {
    if (ps.gamma.size() != arch_.norm_layer_count() || ps.beta.size() != ps.gamma.size())
      throw ShapeError("per-sample affine tables do not match the norm layers");
    per_sample_ = std::move(ps);
  }
  void clear_per_sample() { per_sample_.reset(); }

  /// Per-sample tables initialised from the shared gamma/beta, n rows each.
  PerSampleAffine expand_affine(std::size_t n) const {
    PerSampleAffine ps;
    for (std::size_t i = 0; i < arch_.layers().size(); ++i) {
      if (arch_.layers()[i].kind != LayerKind::norm) continue;
      const std::string p = "L" + std::to_string(i) + ".";
      const Tensor& g = params_.at(p + "gamma");
      const Tensor& b = params_.at(p + "beta");
      Tensor G({n, g.size()}), B({n, b.size()});
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < g.size(); ++c) {
          G.at(r, c) = g[c];
          B.at(r, c) = b[c];
        }
      ps.gamma.push_back(std::move(G));
      ps.beta.push_back(std::move(B));
    }
    return ps;
  }

  /// Backbone fingerprint: FNV-1a over the parameter stream (excludes per-sample tables).
  std::uint64_t fingerprint() const { return params_.fingerprint(); }
  /// Fingerprint of the full adapted state, including per-sample tables.
  std::uint64_t adapted_fingerprint() const {
    std::uint64_t h = fingerprint();
    if (per_sample_)
      for (std::size_t i = 0; i < per_sample_->gamma.size(); ++i) {
        h = fnv1a_bytes(per_sample_->gamma[i].data(), per_sample_->gamma[i].size() * sizeof(double), h);
        h = fnv1a_bytes(per_sample_->beta[i].data(), per_sample_->beta[i].size() * sizeof(double), h);
      }
    return h;
  }

  struct Binding {
    std::vector<Var> params;  // aligned with params().entries()
    std::vector<Var> ps_gamma;
    std::vector<Var> ps_beta;
  };

  /// Registers parameters (and per-sample tables, if any) as tape leaves.
  Binding bind(Tape& tape, bool params_grad, bool per_sample_grad = false) const {
    Binding b;
    for (const auto& e : params_.entries())
      b.params.push_back(tape.leaf(e.value, params_grad && e.role != ParamRole::buffer, e.name));
    if (per_sample_)
      for (std::size_t i = 0; i < per_sample_->gamma.size(); ++i) {
        b.ps_gamma.push_back(tape.leaf(per_sample_->gamma[i], per_sample_grad, "ps_gamma"));
        b.ps_beta.push_back(tape.leaf(per_sample_->beta[i], per_sample_grad, "ps_beta"));
      }
    return b;
  }

  struct Output {
    Var logits;
    Var features;
    std::vector<NormBatchStats> batch_stats;  // filled in Mode::train
  };

  Output forward(Tape& tape, const Binding& bnd, Var x, Mode mode = Mode::eval) const {
    if (x.shape().size() != 2 || x.shape()[1] != arch_.input_dim())
      throw ShapeError("classifier input: expected [n," + std::to_string(arch_.input_dim()) + "], got " +
                       shape_str(x.shape()));
    const std::size_t n = x.shape()[0];
    const bool per_sample = !bnd.ps_gamma.empty();
    if (per_sample && per_sample_->rows() != n)
      throw ShapeError("per-sample affine model bound to " + std::to_string(per_sample_->rows()) + " rows, got batch of " +
                       std::to_string(n));
    Output out;
    Var h = x;
    std::size_t pi = 0, norm_i = 0;
    const auto& layers = arch_.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i == arch_.feature_boundary()) out.features = h;
      const Layer& l = layers[i];
      switch (l.kind) {
        case LayerKind::dense:
          h = ops::add_row(ops::matmul(h, bnd.params[pi]), bnd.params[pi + 1]);
          pi += 2;
          break;
        case LayerKind::conv:
          h = ops::conv2d(h, bnd.params[pi], bnd.params[pi + 1], l.conv);
          pi += 2;
          break;
        case LayerKind::relu:
          h = ops::relu(h);
          break;
        case LayerKind::norm: {
          Var z;
          if (mode == Mode::train) {
            // Batch statistics, differentiated through.
            const double inv_n = 1.0 / static_cast<double>(n);
            Var mu = ops::scale(ops::sum_rows(h), inv_n);
            Var centered = ops::add_row(h, ops::neg(mu));
            Var var = ops::scale(ops::sum_rows(ops::square(centered)), inv_n);
            out.batch_stats.push_back({mu.value().storage(), var.value().storage()});
            z = ops::mul_row(centered, ops::pow(ops::add_scalar(var, kNormEps), -0.5));
          } else {
            const Tensor& mean = params_[pi + 2].value;
            const Tensor& var = params_[pi + 3].value;
            Tensor shift({l.out}), inv({l.out});
            for (std::size_t c = 0; c < l.out; ++c) {
              shift[c] = -mean[c];
              inv[c] = 1.0 / std::sqrt(var[c] + kNormEps);
            }
            z = ops::mul_row(ops::add_row(h, tape.constant(std::move(shift))), tape.constant(std::move(inv)));
          }
          if (per_sample)
            h = ops::add(ops::mul(z, bnd.ps_gamma[norm_i]), bnd.ps_beta[norm_i]);
          else
            h = ops::add_row(ops::mul_row(z, bnd.params[pi]), bnd.params[pi + 1]);
          pi += 5;
          ++norm_i;
          break;
        }
      }
    }
    out.logits = h;
    return out;
  }

  /// Folds batch statistics into the running mean/variance: a cumulative
  /// average for the first 10 updates, then an exponential average (0.1).
  void update_norm_stats(const std::vector<NormBatchStats>& stats) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < arch_.layers().size(); ++i) {
      if (arch_.layers()[i].kind != LayerKind::norm) continue;
      const std::string p = "L" + std::to_string(i) + ".";
      Tensor& mean = params_.at(p + "mean");
      Tensor& var = params_.at(p + "var");
      Tensor& count = params_.at(p + "count");
      const double m = std::max(0.1, 1.0 / (count[0] + 1.0));
      for (std::size_t c = 0; c < mean.size(); ++c) {
        mean[c] = (1.0 - m) * mean[c] + m * stats[k].mean[c];
        var[c] = (1.0 - m) * var[c] + m * stats[k].var[c];
      }
      count[0] += 1.0;
      ++k;
    }
  }

  // Inference helpers (eval mode, no gradients).
  Tensor logits(const Tensor& x) const {
    Tape t;
    Binding b = bind(t, false);
    return forward(t, b, t.constant(x), Mode::eval).logits.value();
  }
  Tensor features(const Tensor& x) const {
    Tape t;
    Binding b = bind(t, false);
    return forward(t, b, t.constant(x), Mode::eval).features.value();
  }
  Tensor probabilities(const Tensor& x) const {
    Tape t;
    Binding b = bind(t, false);
    return ops::softmax(forward(t, b, t.constant(x), Mode::eval).logits).value();
  }
  std::vector<int> predict(const Tensor& x) const {
    const Tensor z = logits(x);
    const std::size_t n = z.rows();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = z.row(i);
      out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
  }

 private:
  static void add_norm_params(ParamSet& ps, const std::string& p, std::size_t w) {
    ps.add(p + "gamma", Tensor({w}, 1.0), ParamRole::affine);
    ps.add(p + "beta", Tensor({w}, 0.0), ParamRole::affine);
    ps.add(p + "mean", Tensor({w}, 0.0), ParamRole::buffer);
    ps.add(p + "var", Tensor({w}, 1.0), ParamRole::buffer);
    ps.add(p + "count", Tensor({1}, 0.0), ParamRole::buffer);
  }

  void check_params() const {
    std::size_t expected = 0;
    for (const Layer& l : arch_.layers()) {
      if (l.kind == LayerKind::dense || l.kind == LayerKind::conv) expected += 2;
      if (l.kind == LayerKind::norm) expected += 5;
    }
    if (params_.size() != expected)
      throw std::invalid_argument("parameter set has " + std::to_string(params_.size()) + " tensors, architecture needs " +
                                  std::to_string(expected));
  }

  Architecture arch_;
  ParamSet params_;
  std::optional<PerSampleAffine> per_sample_;
};

}  // namespace tdr
