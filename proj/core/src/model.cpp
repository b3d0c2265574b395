/*
 * Copyright 2026 The bnnrobust Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "bnnr/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>

namespace bnnr {

std::string to_string(ForwardMode mode) {
  switch (mode) {
    case ForwardMode::train: return "train";
    case ForwardMode::eval_stochastic: return "eval_stochastic";
    case ForwardMode::eval_frozen: return "eval_frozen";
  }
  return "unknown";
}

void ParameterLayout::add(std::string name, std::vector<std::size_t> shape) {
  ParameterSlice slice;
  slice.name = std::move(name);
  slice.offset = size_;
  slice.length = shape_size(shape);
  slice.shape = std::move(shape);
  size_ += slice.length;
  slices_.push_back(std::move(slice));
}

const ParameterSlice& ParameterLayout::find(const std::string& name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return s;
  }
  throw ArgumentError("no parameter slice named '" + name + "'");
}

std::span<const double> ParameterVector::view(const std::string& name) const {
  const auto& s = layout->find(name);
  return std::span<const double>(values).subspan(s.offset, s.length);
}

std::span<double> ParameterVector::view(const std::string& name) {
  const auto& s = layout->find(name);
  return std::span<double>(values).subspan(s.offset, s.length);
}

std::map<std::string, std::vector<double>> unflatten(const ParameterVector& params) {
  if (!params.layout || params.layout->size() != params.values.size()) {
    throw ConsistencyError("parameter vector does not match its layout");
  }
  std::map<std::string, std::vector<double>> out;
  for (const auto& s : params.layout->slices()) {
    const auto first = params.values.begin() + static_cast<std::ptrdiff_t>(s.offset);
    out.emplace(s.name, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.length)));
  }
  return out;
}

ParameterVector flatten(std::shared_ptr<const ParameterLayout> layout,
                        const std::map<std::string, std::vector<double>>& named) {
  ParameterVector p;
  p.values.assign(layout->size(), 0.0);
  for (const auto& s : layout->slices()) {
    const auto it = named.find(s.name);
    if (it == named.end() || it->second.size() != s.length) {
      throw ConsistencyError("missing or mis-sized parameter '" + s.name + "'");
    }
    std::copy(it->second.begin(), it->second.end(),
              p.values.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  if (named.size() != layout->slices().size()) {
    throw ConsistencyError("unexpected extra parameter slices");
  }
  p.layout = std::move(layout);
  return p;
}

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string param_name(std::size_t layer, const char* kind, const char* what) {
  return std::string(kind) + std::to_string(layer) + "." + what;
}

// Channel count and spatial size of a per-sample shape; flat shapes are
// treated as D channels of size 1.
std::pair<std::size_t, std::size_t> channels_and_spatial(const SampleShape& s) {
  if (s.size() == 3) return {s[0], s[1] * s[2]};
  return {shape_size(s), 1};
}

}  // namespace

bool Architecture::has_dropout() const {
  return std::any_of(layers.begin(), layers.end(),
                     [](const Layer& l) { return std::holds_alternative<Dropout>(l); });
}

double Architecture::dropout_rate() const {
  for (const auto& l : layers) {
    if (const auto* d = std::get_if<Dropout>(&l)) return d->rate;
  }
  return 0.0;
}

bool Architecture::has_normalization_layers() const {
  return std::any_of(layers.begin(), layers.end(),
                     [](const Layer& l) { return std::holds_alternative<BatchNorm>(l); });
}

std::string Architecture::layer_name(std::size_t index) const {
  static constexpr const char* kNames[] = {"conv", "maxpool", "relu", "flatten",
                                           "dense", "dropout", "norm", "logit_scale"};
  return std::string(kNames[layers.at(index).index()]) + std::to_string(index);
}

Architecture finalize(Architecture arch) {
  if (arch.num_classes < 1) throw ArgumentError("architecture needs num_classes >= 1");
  auto layout = std::make_shared<ParameterLayout>();
  arch.layer_inputs.clear();
  SampleShape shape = arch.input_shape;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    arch.layer_inputs.push_back(shape);
    std::visit(Overloaded{
        [&](const Conv2d& c) {
          if (shape.size() != 3 || shape[0] != c.in_channels) {
            throw ArgumentError(arch.layer_name(i) + ": expects " + std::to_string(c.in_channels) +
                                " input channels, got shape " + shape_string(shape));
          }
          if (c.kernel % 2 == 0) throw ArgumentError(arch.layer_name(i) + ": kernel must be odd");
          layout->add(param_name(i, "conv", "weight"), {c.out_channels, c.in_channels, c.kernel, c.kernel});
          layout->add(param_name(i, "conv", "bias"), {c.out_channels});
          shape = {c.out_channels, shape[1], shape[2]};
        },
        [&](const MaxPool2d& p) {
          if (shape.size() != 3 || p.window == 0) throw ArgumentError(arch.layer_name(i) + ": needs CxHxW input");
          shape = {shape[0], shape[1] / p.window, shape[2] / p.window};
        },
        [&](const Relu&) {},
        [&](const Flatten&) { shape = {shape_size(shape)}; },
        [&](const Dense& d) {
          if (shape_size(shape) != d.in_features) {
            throw ArgumentError(arch.layer_name(i) + ": expects " + std::to_string(d.in_features) +
                                " features, got " + std::to_string(shape_size(shape)));
          }
          layout->add(param_name(i, "dense", "weight"), {d.out_features, d.in_features});
          layout->add(param_name(i, "dense", "bias"), {d.out_features});
          shape = {d.out_features};
        },
        [&](const Dropout& d) {
          if (!(d.rate >= 0.0 && d.rate < 1.0)) throw ArgumentError("dropout rate must lie in [0,1)");
        },
        [&](const BatchNorm& b) {
          if (channels_and_spatial(shape).first != b.channels) {
            throw ArgumentError(arch.layer_name(i) + ": channel mismatch");
          }
          layout->add(param_name(i, "norm", "scale"), {b.channels});
          layout->add(param_name(i, "norm", "shift"), {b.channels});
        },
        [&](const LogitScale&) {},
    }, arch.layers[i]);
    if (auto* b = std::get_if<BatchNorm>(&arch.layers[i]); b && !b->stats) {
      b->stats = std::make_shared<NormalizationStats>();
      b->stats->mean.assign(b->channels, 0.0);
      b->stats->variance.assign(b->channels, 1.0);
    }
  }
  if (shape_size(shape) != static_cast<std::size_t>(arch.num_classes)) {
    throw ArgumentError("architecture output has " + std::to_string(shape_size(shape)) +
                        " units but num_classes is " + std::to_string(arch.num_classes));
  }
  arch.output_shape = shape;
  arch.layout = std::move(layout);
  return arch;
}

Architecture build_cnn(int num_classes, SampleShape input_shape, std::optional<double> dropout_rate) {
  if (num_classes < 2) throw ArgumentError("build_cnn needs num_classes >= 2");
  if (input_shape.size() != 3) throw ArgumentError("build_cnn needs CxHxW input");
  Architecture a;
  a.id = dropout_rate ? "cnn_dropout" : "cnn";
  a.input_shape = input_shape;
  a.num_classes = num_classes;
  auto act = [&] {
    a.layers.emplace_back(Relu{});
    if (dropout_rate) a.layers.emplace_back(Dropout{*dropout_rate});
  };
  a.layers.emplace_back(Conv2d{input_shape[0], 32, 3});
  act();
  a.layers.emplace_back(MaxPool2d{2});
  a.layers.emplace_back(Conv2d{32, 64, 3});
  act();
  a.layers.emplace_back(MaxPool2d{2});
  a.layers.emplace_back(Flatten{});
  const std::size_t flat = 64 * (input_shape[1] / 4) * (input_shape[2] / 4);
  a.layers.emplace_back(Dense{flat, 256});
  act();
  a.layers.emplace_back(Dense{256, static_cast<std::size_t>(num_classes)});
  return finalize(std::move(a));
}

Architecture build_mlp(SampleShape input_shape, const std::vector<std::size_t>& hidden,
                       int num_classes, std::optional<double> dropout_rate) {
  Architecture a;
  a.id = dropout_rate ? "mlp_dropout" : "mlp";
  a.input_shape = input_shape;
  a.num_classes = num_classes;
  a.layers.emplace_back(Flatten{});
  std::size_t width = shape_size(input_shape);
  for (std::size_t h : hidden) {
    a.layers.emplace_back(Dense{width, h});
    a.layers.emplace_back(Relu{});
    if (dropout_rate) a.layers.emplace_back(Dropout{*dropout_rate});
    width = h;
  }
  a.layers.emplace_back(Dense{width, static_cast<std::size_t>(num_classes)});
  return finalize(std::move(a));
}

Architecture build_architecture(const std::string& id, int num_classes, SampleShape input_shape,
                                double dropout_rate) {
  if (id == "cnn") return build_cnn(num_classes, input_shape);
  if (id == "cnn_dropout") return build_cnn(num_classes, input_shape, dropout_rate);
  if (id == "mlp") return build_mlp(input_shape, {128}, num_classes);
  if (id == "mlp_dropout") return build_mlp(input_shape, {128}, num_classes, dropout_rate);
  throw ArgumentError("unknown architecture '" + id + "'");
}

Architecture with_logit_scale(const Architecture& arch, double factor) {
  Architecture out;
  out.id = arch.id;
  out.input_shape = arch.input_shape;
  out.num_classes = arch.num_classes;
  out.layers = arch.layers;
  out.layers.emplace_back(LogitScale{factor});
  return finalize(std::move(out));
}

ParameterVector init_parameters(const Architecture& arch, std::uint64_t seed) {
  ParameterVector p;
  p.layout = arch.layout;
  p.values.assign(arch.layout->size(), 0.0);
  std::mt19937_64 rng(seed);
  for (const auto& s : arch.layout->slices()) {
    auto dst = p.values.begin() + static_cast<std::ptrdiff_t>(s.offset);
    if (s.name.ends_with(".weight")) {
      const std::size_t fan_in = s.length / s.shape[0];
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (std::size_t i = 0; i < s.length; ++i) dst[static_cast<std::ptrdiff_t>(i)] = normal(rng);
    } else if (s.name.ends_with(".scale")) {
      std::fill(dst, dst + static_cast<std::ptrdiff_t>(s.length), 1.0);
    }
  }
  return p;
}

RowMatrix softmax_rows(const RowMatrix& logits) {
  RowMatrix out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return out;
}

RowMatrix log_softmax_rows(const RowMatrix& logits) {
  RowMatrix out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    row.array() -= lse;
  }
  return out;
}

namespace {

using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t slice_offset(const Architecture& arch, std::size_t layer, const char* kind,
                         const char* what) {
  return arch.layout->find(param_name(layer, kind, what)).offset;
}

// cols is (C*k*k) x (B*H*W); row r = (c, ky, kx), column = b*H*W + y*W + x.
void im2col(const RowMatrix& x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, RowMatrix& cols) {
  const auto batch = static_cast<std::size_t>(x.rows());
  const std::size_t hw = height * width;
  const long pad = static_cast<long>(kernel / 2);
  cols.resize(static_cast<Eigen::Index>(channels * kernel * kernel),
              static_cast<Eigen::Index>(batch * hw));
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const std::size_t r = (c * kernel + ky) * kernel + kx;
        double* dst_row = cols.row(static_cast<Eigen::Index>(r)).data();
        const long dx = static_cast<long>(kx) - pad;
        const long dy = static_cast<long>(ky) - pad;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = x.row(static_cast<Eigen::Index>(b)).data() + c * hw;
          double* dst = dst_row + b * hw;
          for (std::size_t oy = 0; oy < height; ++oy) {
            const long iy = static_cast<long>(oy) + dy;
            double* d = dst + oy * width;
            if (iy < 0 || iy >= static_cast<long>(height)) {
              std::fill(d, d + width, 0.0);
              continue;
            }
            const double* s = src + static_cast<std::size_t>(iy) * width;
            for (std::size_t ox = 0; ox < width; ++ox) {
              const long ix = static_cast<long>(ox) + dx;
              d[ox] = (ix >= 0 && ix < static_cast<long>(width)) ? s[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const RowMatrix& cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, RowMatrix& dx) {
  const auto batch = static_cast<std::size_t>(dx.rows());
  const std::size_t hw = height * width;
  const long pad = static_cast<long>(kernel / 2);
  dx.setZero();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const std::size_t r = (c * kernel + ky) * kernel + kx;
        const double* src_row = cols.row(static_cast<Eigen::Index>(r)).data();
        const long dxo = static_cast<long>(kx) - pad;
        const long dyo = static_cast<long>(ky) - pad;
        for (std::size_t b = 0; b < batch; ++b) {
          double* dst = dx.row(static_cast<Eigen::Index>(b)).data() + c * hw;
          const double* src = src_row + b * hw;
          for (std::size_t oy = 0; oy < height; ++oy) {
            const long iy = static_cast<long>(oy) + dyo;
            if (iy < 0 || iy >= static_cast<long>(height)) continue;
            double* d = dst + static_cast<std::size_t>(iy) * width;
            const double* s = src + oy * width;
            for (std::size_t ox = 0; ox < width; ++ox) {
              const long ix = static_cast<long>(ox) + dxo;
              if (ix >= 0 && ix < static_cast<long>(width)) d[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

RowMatrix conv_forward(const Architecture& arch, std::size_t layer, const Conv2d& conv,
                       std::span<const double> theta, const RowMatrix& x) {
  const auto& in = arch.layer_inputs[layer];
  const std::size_t h = in[1], w = in[2], hw = h * w;
  RowMatrix cols;
  im2col(x, conv.in_channels, h, w, conv.kernel, cols);
  const ConstMap weight(theta.data() + slice_offset(arch, layer, "conv", "weight"),
                        static_cast<Eigen::Index>(conv.out_channels),
                        static_cast<Eigen::Index>(conv.in_channels * conv.kernel * conv.kernel));
  const double* bias = theta.data() + slice_offset(arch, layer, "conv", "bias");
  RowMatrix out = weight * cols;
  RowMatrix y(x.rows(), static_cast<Eigen::Index>(conv.out_channels * hw));
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    for (std::size_t co = 0; co < conv.out_channels; ++co) {
      y.row(b).segment(static_cast<Eigen::Index>(co * hw), static_cast<Eigen::Index>(hw)) =
          out.row(static_cast<Eigen::Index>(co)).segment(b * static_cast<Eigen::Index>(hw),
                                                         static_cast<Eigen::Index>(hw)).array() + bias[co];
    }
  }
  return y;
}

void conv_backward(const Architecture& arch, std::size_t layer, const Conv2d& conv,
                   std::span<const double> theta, const RowMatrix& x, const RowMatrix& dy,
                   std::span<double> param_grad, RowMatrix* dx) {
  const auto& in = arch.layer_inputs[layer];
  const std::size_t h = in[1], w = in[2], hw = h * w;
  const auto batch = dy.rows();
  RowMatrix dout(static_cast<Eigen::Index>(conv.out_channels), batch * static_cast<Eigen::Index>(hw));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < conv.out_channels; ++co) {
      dout.row(static_cast<Eigen::Index>(co)).segment(b * static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(hw)) =
          dy.row(b).segment(static_cast<Eigen::Index>(co * hw), static_cast<Eigen::Index>(hw));
    }
  }
  const auto ck = static_cast<Eigen::Index>(conv.in_channels * conv.kernel * conv.kernel);
  const std::size_t w_off = slice_offset(arch, layer, "conv", "weight");
  const ConstMap weight(theta.data() + w_off, static_cast<Eigen::Index>(conv.out_channels), ck);
  if (!param_grad.empty()) {
    RowMatrix cols;
    im2col(x, conv.in_channels, h, w, conv.kernel, cols);
    MutMap dweight(param_grad.data() + w_off, static_cast<Eigen::Index>(conv.out_channels), ck);
    dweight.noalias() += dout * cols.transpose();
    Eigen::Map<Vector> dbias(param_grad.data() + slice_offset(arch, layer, "conv", "bias"),
                             static_cast<Eigen::Index>(conv.out_channels));
    dbias += dout.rowwise().sum();
  }
  if (dx != nullptr) {
    RowMatrix dcols = weight.transpose() * dout;
    dx->resize(batch, static_cast<Eigen::Index>(conv.in_channels * hw));
    col2im(dcols, conv.in_channels, h, w, conv.kernel, *dx);
  }
}

RowMatrix pool_forward(const SampleShape& in, const MaxPool2d& pool, const RowMatrix& x,
                       std::vector<std::int32_t>* argmax) {
  const std::size_t c = in[0], h = in[1], w = in[2];
  const std::size_t oh = h / pool.window, ow = w / pool.window;
  RowMatrix y(x.rows(), static_cast<Eigen::Index>(c * oh * ow));
  if (argmax) argmax->resize(static_cast<std::size_t>(y.size()));
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const double* src = x.row(b).data();
    double* dst = y.row(b).data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = ch * h * w + (oy * pool.window) * w + ox * pool.window;
          for (std::size_t ky = 0; ky < pool.window; ++ky) {
            for (std::size_t kx = 0; kx < pool.window; ++kx) {
              const std::size_t idx = ch * h * w + (oy * pool.window + ky) * w + ox * pool.window + kx;
              if (src[idx] > src[best]) best = idx;
            }
          }
          const std::size_t o = (ch * oh + oy) * ow + ox;
          dst[o] = src[best];
          if (argmax) (*argmax)[static_cast<std::size_t>(b) * c * oh * ow + o] = static_cast<std::int32_t>(best);
        }
      }
    }
  }
  return y;
}

void fill_dropout_mask(double rate, std::uint64_t seed, std::size_t count,
                       std::vector<std::uint8_t>& mask) {
  mask.resize(count);
  std::mt19937_64 rng(seed);
  constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
  for (auto& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * kScale;
    m = u >= rate ? 1 : 0;
  }
}

void norm_forward(const SampleShape& in, const BatchNorm& norm, const double* scale,
                  const double* shift, bool use_batch, bool update, RowMatrix& x, RowMatrix* xhat_out,
                  std::vector<double>* inv_std_out) {
  const auto [channels, spatial] = channels_and_spatial(in);
  const auto batch = static_cast<std::size_t>(x.rows());
  std::vector<double> mean(channels), var(channels);
  if (use_batch || update) {
    const double m = static_cast<double>(batch * spatial);
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.row(static_cast<Eigen::Index>(b)).data() + c * spatial;
        for (std::size_t k = 0; k < spatial; ++k) {
          s += p[k];
          s2 += p[k] * p[k];
        }
      }
      mean[c] = s / m;
      var[c] = std::max(0.0, s2 / m - mean[c] * mean[c]);
      const double unbiased = m > 1 ? var[c] * m / (m - 1) : var[c];
      if (update) {
        norm.stats->mean[c] = (1 - norm.momentum) * norm.stats->mean[c] + norm.momentum * mean[c];
        norm.stats->variance[c] = (1 - norm.momentum) * norm.stats->variance[c] + norm.momentum * unbiased;
      }
    }
  }
  if (!use_batch) {
    mean = norm.stats->mean;
    var = norm.stats->variance;
  }
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + norm.epsilon);
  if (xhat_out) xhat_out->resize(x.rows(), x.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    double* p = x.row(static_cast<Eigen::Index>(b)).data();
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t k = 0; k < spatial; ++k) {
        const double xh = (p[c * spatial + k] - mean[c]) * inv_std[c];
        if (xhat_out) (*xhat_out)(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c * spatial + k)) = xh;
        p[c * spatial + k] = scale[c] * xh + shift[c];
      }
    }
  }
  if (inv_std_out) *inv_std_out = std::move(inv_std);
}

}  // namespace

namespace {

// Vectorized reductions peel differently depending on where a buffer starts,
// so results would vary with the caller's allocation. Parameters are read
// from, and gradients written to, storage with Eigen's alignment.
bool eigen_aligned(const double* p) {
  return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0;
}

RowMatrix forward_logits_aligned(const Architecture& arch, std::span<const double> theta,
                                 const RowMatrix& x, ForwardMode mode, std::uint64_t seed,
                                 ForwardTrace* trace);
void backward_aligned(const Architecture& arch, std::span<const double> theta, const ForwardTrace& trace,
                      const RowMatrix& dlogits, std::span<double> param_grad, RowMatrix* input_grad);

}  // namespace

RowMatrix forward_logits(const Architecture& arch, std::span<const double> theta,
                         const RowMatrix& x, ForwardMode mode, std::uint64_t seed,
                         ForwardTrace* trace) {
  if (theta.empty() || eigen_aligned(theta.data())) return forward_logits_aligned(arch, theta, x, mode, seed, trace);
  const Eigen::VectorXd copy = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
  return forward_logits_aligned(arch, {copy.data(), theta.size()}, x, mode, seed, trace);
}

void backward(const Architecture& arch, std::span<const double> theta, const ForwardTrace& trace,
              const RowMatrix& dlogits, std::span<double> param_grad, RowMatrix* input_grad) {
  std::optional<Eigen::VectorXd> theta_copy;
  if (!theta.empty() && !eigen_aligned(theta.data())) {
    theta_copy = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    theta = {theta_copy->data(), theta.size()};
  }
  if (param_grad.empty() || eigen_aligned(param_grad.data())) {
    backward_aligned(arch, theta, trace, dlogits, param_grad, input_grad);
    return;
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(param_grad.size()));
  backward_aligned(arch, theta, trace, dlogits, {g.data(), param_grad.size()}, input_grad);
  for (std::size_t i = 0; i < param_grad.size(); ++i) param_grad[i] += g[static_cast<Eigen::Index>(i)];
}

namespace {

RowMatrix forward_logits_aligned(const Architecture& arch, std::span<const double> theta,
                                 const RowMatrix& x, ForwardMode mode, std::uint64_t seed,
                                 ForwardTrace* trace) {
  if (theta.size() != arch.parameter_count()) {
    throw ConsistencyError("parameter vector has " + std::to_string(theta.size()) +
                           " entries, architecture needs " + std::to_string(arch.parameter_count()));
  }
  if (static_cast<std::size_t>(x.cols()) != shape_size(arch.input_shape)) {
    throw ConsistencyError("input width " + std::to_string(x.cols()) + " does not match " +
                           shape_string(arch.input_shape));
  }
  const std::size_t n_layers = arch.layers.size();
  if (trace) {
    trace->inputs.assign(n_layers, RowMatrix());
    trace->masks.assign(n_layers, {});
    trace->argmax.assign(n_layers, {});
    trace->normalized.assign(n_layers, RowMatrix());
    trace->inv_std.assign(n_layers, {});
    trace->batch_statistics.assign(n_layers, false);
  }
  const bool sample_dropout = mode != ForwardMode::eval_frozen;
  RowMatrix act = x;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& in_shape = arch.layer_inputs[i];
    RowMatrix next;
    bool in_place = false;
    std::visit(Overloaded{
        [&](const Conv2d& c) { next = conv_forward(arch, i, c, theta, act); },
        [&](const MaxPool2d& p) {
          next = pool_forward(in_shape, p, act, trace ? &trace->argmax[i] : nullptr);
        },
        [&](const Relu&) {
          if (trace) {
            next = act.cwiseMax(0.0);
          } else {
            act = act.cwiseMax(0.0);
            in_place = true;
          }
        },
        [&](const Flatten&) { in_place = true; },
        [&](const Dense& d) {
          const ConstMap weight(theta.data() + slice_offset(arch, i, "dense", "weight"),
                                static_cast<Eigen::Index>(d.out_features),
                                static_cast<Eigen::Index>(d.in_features));
          const Eigen::Map<const Eigen::RowVectorXd> bias(
              theta.data() + slice_offset(arch, i, "dense", "bias"),
              static_cast<Eigen::Index>(d.out_features));
          next.noalias() = act * weight.transpose();
          next.rowwise() += bias;
        },
        [&](const Dropout& d) {
          if (!sample_dropout || d.rate == 0.0) {
            in_place = true;
            return;
          }
          std::vector<std::uint8_t> local;
          auto& mask = trace ? trace->masks[i] : local;
          fill_dropout_mask(d.rate, derive_seed(seed, i), static_cast<std::size_t>(act.size()), mask);
          const double keep = 1.0 / (1.0 - d.rate);
          next.resize(act.rows(), act.cols());
          for (Eigen::Index k = 0; k < act.size(); ++k) {
            next.data()[k] = mask[static_cast<std::size_t>(k)] ? act.data()[k] * keep : 0.0;
          }
        },
        [&](const BatchNorm& b) {
          const bool use_batch = mode == ForwardMode::train;
          const bool update = use_batch || b.leak_batch_statistics;
          next = act;
          norm_forward(in_shape, b, theta.data() + slice_offset(arch, i, "norm", "scale"),
                       theta.data() + slice_offset(arch, i, "norm", "shift"), use_batch, update, next,
                       trace ? &trace->normalized[i] : nullptr, trace ? &trace->inv_std[i] : nullptr);
          if (trace) trace->batch_statistics[i] = use_batch;
        },
        [&](const LogitScale& s) { next = act * s.factor; },
    }, arch.layers[i]);

    if (in_place) {
      if (trace) trace->inputs[i] = act;
    } else {
      if (trace) trace->inputs[i] = std::move(act);
      act = std::move(next);
    }
    if (!act.allFinite()) {
      throw NumericError(arch.layer_name(i), "non-finite activation in " + arch.layer_name(i));
    }
  }
  if (trace) trace->logits = act;
  return act;
}

}  // namespace

RowMatrix forward_probs(const Architecture& arch, std::span<const double> theta,
                        const RowMatrix& x, ForwardMode mode, std::uint64_t seed) {
  return softmax_rows(forward_logits(arch, theta, x, mode, seed));
}

namespace {

void backward_aligned(const Architecture& arch, std::span<const double> theta, const ForwardTrace& trace,
                      const RowMatrix& dlogits, std::span<double> param_grad, RowMatrix* input_grad) {
  if (!param_grad.empty() && param_grad.size() != arch.parameter_count()) {
    throw ConsistencyError("gradient buffer does not match the parameter count");
  }
  if (trace.inputs.size() != arch.layers.size()) {
    throw ConsistencyError("backward needs a forward trace of the same architecture");
  }
  RowMatrix grad = dlogits;
  for (std::size_t ii = arch.layers.size(); ii-- > 0;) {
    const RowMatrix& x = trace.inputs[ii];
    const bool need_dx = ii > 0 || input_grad != nullptr;
    RowMatrix dx;
    std::visit(Overloaded{
        [&](const Conv2d& c) {
          conv_backward(arch, ii, c, theta, x, grad, param_grad, need_dx ? &dx : nullptr);
        },
        [&](const MaxPool2d&) {
          if (!need_dx) return;
          dx = RowMatrix::Zero(x.rows(), x.cols());
          const auto& winners = trace.argmax[ii];
          const auto per_row = grad.cols();
          for (Eigen::Index b = 0; b < grad.rows(); ++b) {
            for (Eigen::Index o = 0; o < per_row; ++o) {
              dx(b, winners[static_cast<std::size_t>(b * per_row + o)]) += grad(b, o);
            }
          }
        },
        [&](const Relu&) { dx = (x.array() > 0.0).select(grad.array(), 0.0).matrix(); },
        [&](const Flatten&) { dx = std::move(grad); },
        [&](const Dense& d) {
          const std::size_t w_off = slice_offset(arch, ii, "dense", "weight");
          const ConstMap weight(theta.data() + w_off, static_cast<Eigen::Index>(d.out_features),
                                static_cast<Eigen::Index>(d.in_features));
          if (!param_grad.empty()) {
            MutMap dweight(param_grad.data() + w_off, static_cast<Eigen::Index>(d.out_features),
                           static_cast<Eigen::Index>(d.in_features));
            dweight.noalias() += grad.transpose() * x;
            Eigen::Map<Eigen::RowVectorXd> dbias(param_grad.data() + slice_offset(arch, ii, "dense", "bias"),
                                                 static_cast<Eigen::Index>(d.out_features));
            dbias += grad.colwise().sum();
          }
          if (need_dx) dx.noalias() = grad * weight;
        },
        [&](const Dropout& d) {
          const auto& mask = trace.masks[ii];
          if (mask.empty()) {
            dx = std::move(grad);
            return;
          }
          const double keep = 1.0 / (1.0 - d.rate);
          dx.resize(grad.rows(), grad.cols());
          for (Eigen::Index k = 0; k < grad.size(); ++k) {
            dx.data()[k] = mask[static_cast<std::size_t>(k)] ? grad.data()[k] * keep : 0.0;
          }
        },
        [&](const BatchNorm& b) {
          const auto [channels, spatial] = channels_and_spatial(arch.layer_inputs[ii]);
          const double* scale = theta.data() + slice_offset(arch, ii, "norm", "scale");
          const RowMatrix& xhat = trace.normalized[ii];
          const auto& inv_std = trace.inv_std[ii];
          const auto batch = static_cast<std::size_t>(grad.rows());
          std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
          for (std::size_t bi = 0; bi < batch; ++bi) {
            for (std::size_t c = 0; c < channels; ++c) {
              for (std::size_t k = 0; k < spatial; ++k) {
                const auto col = static_cast<Eigen::Index>(c * spatial + k);
                sum_dy[c] += grad(static_cast<Eigen::Index>(bi), col);
                sum_dy_xhat[c] += grad(static_cast<Eigen::Index>(bi), col) * xhat(static_cast<Eigen::Index>(bi), col);
              }
            }
          }
          if (!param_grad.empty()) {
            double* dscale = param_grad.data() + slice_offset(arch, ii, "norm", "scale");
            double* dshift = param_grad.data() + slice_offset(arch, ii, "norm", "shift");
            for (std::size_t c = 0; c < channels; ++c) {
              dscale[c] += sum_dy_xhat[c];
              dshift[c] += sum_dy[c];
            }
          }
          if (!need_dx) return;
          dx.resize(grad.rows(), grad.cols());
          const double m = static_cast<double>(batch * spatial);
          for (std::size_t bi = 0; bi < batch; ++bi) {
            for (std::size_t c = 0; c < channels; ++c) {
              for (std::size_t k = 0; k < spatial; ++k) {
                const auto r = static_cast<Eigen::Index>(bi);
                const auto col = static_cast<Eigen::Index>(c * spatial + k);
                if (trace.batch_statistics[ii]) {
                  dx(r, col) = scale[c] * inv_std[c] / m *
                               (m * grad(r, col) - sum_dy[c] - xhat(r, col) * sum_dy_xhat[c]);
                } else {
                  dx(r, col) = scale[c] * inv_std[c] * grad(r, col);
                }
              }
            }
          }
          (void)b;
        },
        [&](const LogitScale& s) { dx = grad * s.factor; },
    }, arch.layers[ii]);
    if (ii == 0) {
      if (input_grad) *input_grad = std::move(dx);
      break;
    }
    grad = std::move(dx);
  }
}

}  // namespace

}  // namespace bnnr
