#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorseg/core.hpp"
#include "priorseg/layers.hpp"
#include "priorseg/raw_file.hpp"

namespace priorseg {

struct NetworkConfig {
  int in_channels = 4;
  int num_classes = kNumClasses;
  int depth = 4;
  int base_filters = 32;
  int kernel_size = 3;
  std::uint64_t seed = 0;
  double bn_momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double bn_eps = 1e-5;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline void validate(const NetworkConfig& c) {
  if (c.in_channels != 3 && c.in_channels != 4)
    throw Error("network in_channels must be 3 or 4, got " + std::to_string(c.in_channels));
  if (c.num_classes < 2) throw Error("network num_classes must be >= 2");
  if (c.depth < 2) throw Error("network depth must be >= 2, got " + std::to_string(c.depth));
  if (c.base_filters < 1) throw Error("network base_filters must be >= 1");
  if (c.kernel_size < 1 || c.kernel_size % 2 == 0)
    throw Error("network kernel_size must be odd and positive");
  if (!(c.bn_momentum >= 0.0 && c.bn_momentum < 1.0)) throw Error("bn_momentum must be in [0, 1)");
  if (!(c.bn_eps > 0.0)) throw Error("bn_eps must be positive");
}

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"in_channels", c.in_channels}, {"num_classes", c.num_classes}, {"depth", c.depth},
          {"base_filters", c.base_filters}, {"kernel_size", c.kernel_size}, {"seed", c.seed},
          {"bn_momentum", c.bn_momentum}, {"bn_eps", c.bn_eps}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j, NetworkConfig c = {}) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.depth = j.value("depth", c.depth);
  c.base_filters = j.value("base_filters", c.base_filters);
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.seed = j.value("seed", c.seed);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_eps = j.value("bn_eps", c.bn_eps);
  return c;
}

template <class T>
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> values;

  friend bool operator==(const Parameter&, const Parameter&) = default;
};

/// Indices into NetworkState::params / buffers for one conv -> BN -> ReLU block.
struct ConvBlockSlots {
  std::size_t weight, gamma, beta;
  std::size_t running_mean, running_var;
  std::size_t in, out;
};

struct UpSlots {
  std::size_t weight, bias, in, out;
};

struct Architecture {
  std::vector<std::array<ConvBlockSlots, 2>> encoder;  // depth levels
  std::vector<UpSlots> up;                              // depth - 1, indexed by target level
  std::vector<std::array<ConvBlockSlots, 2>> decoder;   // depth - 1, indexed by level
  std::size_t head_weight = 0, head_bias = 0;
};

/// Learnable parameters plus batch-norm running statistics, all addressed by
/// stable names ("enc0.conv1.weight", "enc0.bn1.gamma", "up0.weight", "head.bias", ...).
template <class T>
struct NetworkState {
  NetworkConfig config;
  std::vector<Parameter<T>> params;
  std::vector<Parameter<T>> buffers;
  Architecture arch;

  const Parameter<T>& param(std::string_view name) const {
    for (const auto& p : params)
      if (p.name == name) return p;
    throw Error("no parameter named '" + std::string(name) + "'");
  }
  Parameter<T>& param(std::string_view name) {
    return const_cast<Parameter<T>&>(std::as_const(*this).param(name));
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.values.size();
    return n;
  }
};

namespace detail {

template <class T>
std::size_t add_param(std::vector<Parameter<T>>& list, std::string name,
                      std::vector<std::size_t> shape, T fill = T(0)) {
  std::size_t count = 1;
  for (auto s : shape) count *= s;
  list.push_back({std::move(name), std::move(shape), std::vector<T>(count, fill)});
  return list.size() - 1;
}

template <class T>
ConvBlockSlots add_conv_block(NetworkState<T>& st, const std::string& prefix, int idx,
                              std::size_t in, std::size_t out, std::size_t k) {
  const std::string i = std::to_string(idx);
  ConvBlockSlots s{};
  s.in = in;
  s.out = out;
  s.weight = add_param<T>(st.params, prefix + ".conv" + i + ".weight", {out, in, k, k});
  s.gamma = add_param<T>(st.params, prefix + ".bn" + i + ".gamma", {out}, T(1));
  s.beta = add_param<T>(st.params, prefix + ".bn" + i + ".beta", {out}, T(0));
  s.running_mean = add_param<T>(st.buffers, prefix + ".bn" + i + ".running_mean", {out}, T(0));
  s.running_var = add_param<T>(st.buffers, prefix + ".bn" + i + ".running_var", {out}, T(1));
  return s;
}

/// Lays out every tensor for config; values are left at their fill defaults.
template <class T>
NetworkState<T> allocate_network(const NetworkConfig& config) {
  validate(config);
  NetworkState<T> st;
  st.config = config;
  const auto k = static_cast<std::size_t>(config.kernel_size);
  const auto base = static_cast<std::size_t>(config.base_filters);
  std::size_t in = static_cast<std::size_t>(config.in_channels);
  for (int l = 0; l < config.depth; ++l) {
    const std::size_t ch = base << l;
    const std::string prefix = "enc" + std::to_string(l);
    auto a = add_conv_block(st, prefix, 1, in, ch, k);
    auto b = add_conv_block(st, prefix, 2, ch, ch, k);
    st.arch.encoder.push_back({a, b});
    in = ch;
  }
  st.arch.up.resize(static_cast<std::size_t>(config.depth - 1));
  st.arch.decoder.resize(static_cast<std::size_t>(config.depth - 1));
  for (int l = config.depth - 2; l >= 0; --l) {
    const std::size_t ch = base << l;
    const std::string up = "up" + std::to_string(l);
    UpSlots u{};
    u.in = ch * 2;
    u.out = ch;
    u.weight = add_param<T>(st.params, up + ".weight", {ch * 2, ch, 2, 2});
    u.bias = add_param<T>(st.params, up + ".bias", {ch});
    st.arch.up[static_cast<std::size_t>(l)] = u;
    const std::string prefix = "dec" + std::to_string(l);
    auto a = add_conv_block(st, prefix, 1, ch * 2, ch, k);
    auto b = add_conv_block(st, prefix, 2, ch, ch, k);
    st.arch.decoder[static_cast<std::size_t>(l)] = {a, b};
  }
  const auto classes = static_cast<std::size_t>(config.num_classes);
  st.arch.head_weight = add_param<T>(st.params, "head.weight", {classes, base, 1, 1});
  st.arch.head_bias = add_param<T>(st.params, "head.bias", {classes});
  return st;
}

}  // namespace detail

/// U-Net: `depth` levels of two conv-BN-ReLU blocks, 2x2 max pooling down,
/// 2x2 stride-2 deconvolution up, skip concatenation, 1x1 head and softmax.
/// Weights are drawn deterministically from config.seed.
template <class T>
NetworkState<T> build_network(const NetworkConfig& config) {
  auto st = detail::allocate_network<T>(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto fill = [&](Parameter<T>& p, double stddev) {
    for (auto& v : p.values) v = static_cast<T>(stddev * normal(rng));
  };
  const auto k = static_cast<double>(config.kernel_size);
  for (auto& p : st.params) {
    const auto ends_with = [&](std::string_view s) { return p.name.ends_with(s); };
    if (p.name == "head.weight") {
      fill(p, std::sqrt(1.0 / static_cast<double>(p.shape[1])));
    } else if (p.name.starts_with("up") && ends_with(".weight")) {
      fill(p, std::sqrt(1.0 / static_cast<double>(p.shape[0])));
    } else if (ends_with(".weight")) {
      fill(p, std::sqrt(2.0 / (static_cast<double>(p.shape[1]) * k * k)));
    }
  }
  return st;
}

enum class Mode { Train, Eval };

/// (N, rows, cols, channels) batch; holds network inputs, outputs and targets.
template <class T>
struct BatchTensor {
  std::size_t n = 0, rows = 0, cols = 0, channels = 0;
  std::vector<T> values;

  BatchTensor() = default;
  BatchTensor(std::size_t n_, std::size_t r, std::size_t c, std::size_t ch, T fill = T(0))
      : n(n_), rows(r), cols(c), channels(ch), values(n_ * r * c * ch, fill) {}

  T& operator()(std::size_t b, std::size_t r, std::size_t c, std::size_t k) {
    return values[((b * rows + r) * cols + c) * channels + k];
  }
  const T& operator()(std::size_t b, std::size_t r, std::size_t c, std::size_t k) const {
    return values[((b * rows + r) * cols + c) * channels + k];
  }
  bool same_shape(const BatchTensor& o) const {
    return n == o.n && rows == o.rows && cols == o.cols && channels == o.channels;
  }
  std::string shape_string() const {
    return std::to_string(n) + "x" + std::to_string(rows) + "x" + std::to_string(cols) + "x" +
           std::to_string(channels);
  }
};

namespace detail {

template <class T>
layers::Tensor<T> to_channel_major(const BatchTensor<T>& b) {
  layers::Tensor<T> t(b.channels, b.n, b.rows, b.cols);
  for (std::size_t i = 0; i < b.n; ++i)
    for (std::size_t r = 0; r < b.rows; ++r)
      for (std::size_t c = 0; c < b.cols; ++c)
        for (std::size_t k = 0; k < b.channels; ++k) t.at(k, i, r, c) = b(i, r, c, k);
  return t;
}

template <class T>
BatchTensor<T> to_batch(const layers::Tensor<T>& t) {
  BatchTensor<T> b(t.n, t.h, t.w, t.c);
  for (std::size_t k = 0; k < t.c; ++k)
    for (std::size_t i = 0; i < t.n; ++i)
      for (std::size_t r = 0; r < t.h; ++r)
        for (std::size_t c = 0; c < t.w; ++c) b(i, r, c, k) = t.at(k, i, r, c);
  return b;
}

template <class T>
struct BlockTrace {
  layers::Tensor<T> input;
  layers::BatchNormCache<T> bn;
  layers::Tensor<T> output;  // post-ReLU
};

template <class T>
struct ForwardTrace {
  std::vector<std::array<BlockTrace<T>, 2>> encoder;
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<layers::Tensor<T>> up_input;
  std::vector<std::array<BlockTrace<T>, 2>> decoder;
  layers::Tensor<T> head_input;
  layers::Tensor<T> probs;
};

template <class T>
void check_input(const NetworkState<T>& st, const BatchTensor<T>& batch) {
  const auto& c = st.config;
  if (batch.n < 1) throw Error("forward: batch dimension N must be >= 1");
  if (batch.channels != static_cast<std::size_t>(c.in_channels))
    throw Error("forward: channel dimension is " + std::to_string(batch.channels) +
                ", network expects " + std::to_string(c.in_channels));
  const std::size_t div = std::size_t{1} << (c.depth - 1);
  if (batch.rows == 0 || batch.rows % div != 0)
    throw Error("forward: rows dimension " + std::to_string(batch.rows) +
                " is not divisible by " + std::to_string(div));
  if (batch.cols == 0 || batch.cols % div != 0)
    throw Error("forward: cols dimension " + std::to_string(batch.cols) +
                " is not divisible by " + std::to_string(div));
}

template <class T>
layers::Tensor<T> block_forward(const NetworkState<T>& st, const ConvBlockSlots& s,
                                const layers::Tensor<T>& x, Mode mode, BlockTrace<T>* trace) {
  const auto k = static_cast<std::size_t>(st.config.kernel_size);
  const T eps = static_cast<T>(st.config.bn_eps);
  auto z = layers::conv_forward(x, st.params[s.weight].values, static_cast<const T*>(nullptr), s.out, k);
  layers::Tensor<T> y;
  if (mode == Mode::Train) {
    layers::BatchNormCache<T> cache;
    y = layers::batchnorm_train(z, st.params[s.gamma].values, st.params[s.beta].values, eps, cache);
    if (trace) trace->bn = std::move(cache);
  } else {
    y = layers::batchnorm_eval(z, st.params[s.gamma].values, st.params[s.beta].values,
                               st.buffers[s.running_mean].values, st.buffers[s.running_var].values, eps);
  }
  layers::relu_inplace(y);
  if (trace) {
    trace->input = x;
    trace->output = y;
  }
  return y;
}

template <class T>
layers::Tensor<T> forward_impl(const NetworkState<T>& st, const layers::Tensor<T>& input, Mode mode,
                               ForwardTrace<T>* trace) {
  const auto& a = st.arch;
  const auto depth = static_cast<std::size_t>(st.config.depth);
  if (trace) {
    trace->encoder.resize(depth);
    trace->pool_argmax.resize(depth - 1);
    trace->up_input.resize(depth - 1);
    trace->decoder.resize(depth - 1);
  }
  std::vector<layers::Tensor<T>> skips(depth);
  layers::Tensor<T> x = input;
  for (std::size_t l = 0; l < depth; ++l) {
    for (int b = 0; b < 2; ++b)
      x = block_forward(st, a.encoder[l][static_cast<std::size_t>(b)], x, mode,
                        trace ? &trace->encoder[l][static_cast<std::size_t>(b)] : nullptr);
    if (l + 1 < depth) {
      skips[l] = x;
      std::vector<std::size_t> argmax;
      x = layers::maxpool2_forward(x, argmax);
      if (trace) trace->pool_argmax[l] = std::move(argmax);
    }
  }
  for (std::size_t l = depth - 1; l-- > 0;) {
    const auto& u = a.up[l];
    if (trace) trace->up_input[l] = x;
    auto up = layers::deconv2_forward(x, st.params[u.weight].values, st.params[u.bias].values, u.out);
    x = layers::concat_channels(skips[l], up);
    for (int b = 0; b < 2; ++b)
      x = block_forward(st, a.decoder[l][static_cast<std::size_t>(b)], x, mode,
                        trace ? &trace->decoder[l][static_cast<std::size_t>(b)] : nullptr);
  }
  if (trace) trace->head_input = x;
  auto logits = layers::conv_forward(x, st.params[a.head_weight].values,
                                     st.params[a.head_bias].values.data(),
                                     static_cast<std::size_t>(st.config.num_classes), 1);
  auto probs = layers::softmax_channels(logits);
  if (trace) trace->probs = probs;
  return probs;
}

}  // namespace detail

/// Per-pixel class probabilities (N, rows, cols, num_classes). Train mode
/// normalizes with batch statistics, eval mode with running statistics.
template <class T>
BatchTensor<T> forward(const NetworkState<T>& state, const BatchTensor<T>& batch, Mode mode) {
  detail::check_input(state, batch);
  return detail::to_batch(
      detail::forward_impl<T>(state, detail::to_channel_major(batch), mode, nullptr));
}

/// L = (1/N) sum_n ||x_n - y_n||^2, squared norm over every pixel and channel of sample n.
template <class T>
T mse_loss(const BatchTensor<T>& output, const BatchTensor<T>& target) {
  if (!output.same_shape(target))
    throw Error("mse_loss: output " + output.shape_string() + " vs target " + target.shape_string());
  if (output.n == 0) throw Error("mse_loss: empty batch");
  T s = 0;
  for (std::size_t i = 0; i < output.values.size(); ++i) {
    const T d = output.values[i] - target.values[i];
    s += d * d;
  }
  return s / static_cast<T>(output.n);
}

/// One-hot target batch from label maps.
template <class T>
BatchTensor<T> onehot_batch(const std::vector<LabelMap>& labels, std::size_t num_classes = kNumClasses) {
  if (labels.empty()) throw Error("onehot_batch: no label maps");
  BatchTensor<T> out(labels.size(), labels[0].rows(), labels[0].cols(), num_classes);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b].rows() != out.rows || labels[b].cols() != out.cols)
      throw Error("onehot_batch: label map " + std::to_string(b) + " has a different shape");
    for (std::size_t r = 0; r < out.rows; ++r)
      for (std::size_t c = 0; c < out.cols; ++c) out(b, r, c, labels[b](r, c)) = T(1);
  }
  return out;
}

/// Loss, parameter gradients (aligned with NetworkState::params) and the batch
/// statistics each BN layer saw, for the running-statistics update.
template <class T>
struct Gradients {
  T loss = 0;
  std::vector<std::vector<T>> values;
  std::vector<std::vector<T>> batch_mean;  // aligned with NetworkState::buffers pairs
  std::vector<std::vector<T>> batch_var;
  std::vector<std::size_t> batch_count;

  template <class State>
  const std::vector<T>& of(const State& st, std::string_view name) const {
    for (std::size_t i = 0; i < st.params.size(); ++i)
      if (st.params[i].name == name) return values[i];
    throw Error("no gradient named '" + std::string(name) + "'");
  }
};

namespace detail {

template <class T>
layers::Tensor<T> block_backward(const NetworkState<T>& st, const ConvBlockSlots& s,
                                 const BlockTrace<T>& tr, layers::Tensor<T> dy, Gradients<T>& g,
                                 bool need_dx) {
  const auto k = static_cast<std::size_t>(st.config.kernel_size);
  layers::relu_backward_inplace(dy, tr.output);
  auto dz = layers::batchnorm_backward(dy, st.params[s.gamma].values, tr.bn, g.values[s.gamma],
                                       g.values[s.beta]);
  return layers::conv_backward(tr.input, st.params[s.weight].values, dz, k, g.values[s.weight],
                               static_cast<T*>(nullptr), need_dx);
}

template <class T>
void record_stats(const ConvBlockSlots& s, const BlockTrace<T>& tr, Gradients<T>& g) {
  g.batch_mean[s.running_mean] = tr.bn.mean;
  g.batch_var[s.running_var] = tr.bn.var;
  g.batch_count[s.running_mean] = tr.input.plane();
  g.batch_count[s.running_var] = tr.input.plane();
}

}  // namespace detail

/// Exact gradients of mse_loss(forward(state, batch, Train), target) w.r.t. every parameter.
template <class T>
Gradients<T> backward(const NetworkState<T>& state, const BatchTensor<T>& batch,
                      const BatchTensor<T>& target) {
  detail::check_input(state, batch);
  if (target.n != batch.n || target.rows != batch.rows || target.cols != batch.cols ||
      target.channels != static_cast<std::size_t>(state.config.num_classes))
    throw Error("backward: target " + target.shape_string() + " does not match batch " +
                batch.shape_string() + " with " + std::to_string(state.config.num_classes) + " classes");
  detail::ForwardTrace<T> tr;
  const auto x = detail::to_channel_major(batch);
  detail::forward_impl(state, x, Mode::Train, &tr);
  const auto y = detail::to_channel_major(target);

  Gradients<T> g;
  g.values.resize(state.params.size());
  for (std::size_t i = 0; i < state.params.size(); ++i) g.values[i].assign(state.params[i].values.size(), T(0));
  g.batch_mean.resize(state.buffers.size());
  g.batch_var.resize(state.buffers.size());
  g.batch_count.assign(state.buffers.size(), 0);

  const T inv_n = T(1) / static_cast<T>(batch.n);
  layers::Tensor<T> dp(tr.probs.c, tr.probs.n, tr.probs.h, tr.probs.w);
  T loss = 0;
  for (std::size_t i = 0; i < dp.data.size(); ++i) {
    const T d = tr.probs.data[i] - y.data[i];
    loss += d * d;
    dp.data[i] = T(2) * d * inv_n;
  }
  g.loss = loss * inv_n;

  const auto& a = state.arch;
  const auto depth = static_cast<std::size_t>(state.config.depth);
  auto dlogits = layers::softmax_backward(tr.probs, dp);
  auto dx = layers::conv_backward(tr.head_input, state.params[a.head_weight].values, dlogits, 1,
                                  g.values[a.head_weight], g.values[a.head_bias].data(), true);

  // Decoder levels ran bottom-up (depth-2 .. 0); walk them top-down.
  std::vector<layers::Tensor<T>> dskip(depth);
  for (std::size_t l = 0; l + 1 < depth; ++l) {
    const auto& blocks = a.decoder[l];
    const auto& tb = tr.decoder[l];
    dx = detail::block_backward(state, blocks[1], tb[1], std::move(dx), g, true);
    dx = detail::block_backward(state, blocks[0], tb[0], std::move(dx), g, true);
    detail::record_stats(blocks[0], tb[0], g);
    detail::record_stats(blocks[1], tb[1], g);
    layers::Tensor<T> d_up;
    layers::split_channels(dx, blocks[0].in / 2, dskip[l], d_up);
    const auto& u = a.up[l];
    dx = layers::deconv2_backward(tr.up_input[l], state.params[u.weight].values, d_up,
                                  g.values[u.weight], g.values[u.bias]);
  }
  // dx is now the gradient at the bottleneck output.
  for (std::size_t l = depth; l-- > 0;) {
    const auto& blocks = a.encoder[l];
    const auto& tb = tr.encoder[l];
    if (l + 1 < depth) {
      dx = layers::maxpool2_backward(dx, tr.pool_argmax[l], tb[1].output.h, tb[1].output.w);
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dskip[l].data[i];
    }
    dx = detail::block_backward(state, blocks[1], tb[1], std::move(dx), g, true);
    dx = detail::block_backward(state, blocks[0], tb[0], std::move(dx), g, l > 0);
    detail::record_stats(blocks[0], tb[0], g);
    detail::record_stats(blocks[1], tb[1], g);
  }
  return g;
}

/// Folds the batch statistics from a training step into the running estimates.
template <class T>
void update_running_statistics(NetworkState<T>& state, const Gradients<T>& g) {
  const T m = static_cast<T>(state.config.bn_momentum);
  for (std::size_t i = 0; i < state.buffers.size(); ++i) {
    auto& buf = state.buffers[i];
    const bool is_var = buf.name.ends_with("running_var");
    const auto& stat = is_var ? g.batch_var[i] : g.batch_mean[i];
    if (stat.empty()) continue;
    const std::size_t count = g.batch_count[i];
    const T correction =
        is_var && count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
    for (std::size_t c = 0; c < buf.values.size(); ++c)
      buf.values[c] = m * buf.values[c] + (T(1) - m) * stat[c] * correction;
  }
}

/// Checkpoint: one raw file whose header carries the network config and a
/// tensor table (name, shape, offset in elements); the payload concatenates
/// parameters then BN buffers.
template <class T>
void save_checkpoint(const NetworkState<T>& state, const std::filesystem::path& path) {
  nlohmann::json h;
  h["kind"] = "checkpoint";
  h["dtype"] = dtype_name<T>();
  h["network"] = to_json(state.config);
  nlohmann::json table = nlohmann::json::array();
  std::vector<T> payload;
  for (const auto* list : {&state.params, &state.buffers})
    for (const auto& p : *list) {
      table.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", payload.size()}});
      payload.insert(payload.end(), p.values.begin(), p.values.end());
    }
  h["tensors"] = std::move(table);
  h["shape"] = {payload.size()};
  write_raw(path, h, as_bytes_span(payload));
}

template <class T>
NetworkState<T> load_checkpoint(const std::filesystem::path& path) {
  RawFile f = read_raw(path);
  try {
    if (f.header.value("kind", "") != "checkpoint")
      throw Error("'" + path.string() + "' is not a checkpoint");
    if (f.header.at("dtype").get<std::string>() != dtype_name<T>())
      throw Error("'" + path.string() + "' stores " + f.header.at("dtype").get<std::string>() +
                  " parameters, expected " + std::string(dtype_name<T>()));
    auto state = detail::allocate_network<T>(network_config_from_json(f.header.at("network")));
    std::map<std::string, const nlohmann::json*> table;
    for (const auto& t : f.header.at("tensors")) table[t.at("name").get<std::string>()] = &t;
    for (auto* list : {&state.params, &state.buffers})
      for (auto& p : *list) {
        auto it = table.find(p.name);
        if (it == table.end()) throw Error("'" + path.string() + "' lacks tensor " + p.name);
        if (it->second->at("shape").template get<std::vector<std::size_t>>() != p.shape)
          throw Error("'" + path.string() + "': tensor " + p.name + " has the wrong shape");
        p.values = f.template values<T>(it->second->at("offset").template get<std::size_t>(), p.values.size());
      }
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt checkpoint header in '" + path.string() + "': " + e.what());
  }
}

}  // namespace priorseg
