#pragma once

#include <string>
#include <vector>

#include "retseg/nn.hpp"
#include "retseg/params.hpp"
#include "retseg/rng.hpp"
#include "retseg/tensor.hpp"

namespace retseg {

struct UNetConfig {
  int encoder_levels = 4;
  int base_filters = 16;  // doubled after each pooling
  bool conv_skip_connections = false;
  std::vector<int> decoder_widths;  // empty: mirror the encoder (halving); e.g. {16,8,4}
  int input_channels = 3;

  std::vector<int> encoder_channel_widths() const {
    std::vector<int> w(static_cast<std::size_t>(encoder_levels));
    int f = base_filters;
    for (auto& v : w) {
      v = f;
      f *= 2;
    }
    return w;
  }

  std::vector<int> decoder_channel_widths() const {
    if (!decoder_widths.empty()) return decoder_widths;
    std::vector<int> w(static_cast<std::size_t>(encoder_levels - 1));
    int f = base_filters << (encoder_levels - 2);
    for (auto& v : w) {
      v = f;
      f /= 2;
    }
    return w;
  }

  int pool_factor() const { return 1 << (encoder_levels - 1); }

  void validate() const {
    if (encoder_levels < 2) throw ValueError("UNetConfig: encoder_levels must be >= 2");
    if (base_filters < 1) throw ValueError("UNetConfig: base_filters must be >= 1");
    if (input_channels < 1) throw ValueError("UNetConfig: input_channels must be >= 1");
    if (!decoder_widths.empty() &&
        decoder_widths.size() != static_cast<std::size_t>(encoder_levels - 1))
      throw ValueError("UNetConfig: decoder_widths must have encoder_levels - 1 entries");
  }
};

// conv3x3 -> ReLU -> BN, in that order.
template <class T>
struct ConvBlockT {
  TensorT<T> w, b;
  BatchNormStateT<T> bn;
};

// Two conv blocks plus an additive residual branch (conv1x1 -> BN).
template <class T>
struct UNetLevelT {
  ConvBlockT<T> block1, block2;
  TensorT<T> res_w, res_b;
  BatchNormStateT<T> res_bn;
};

template <class T>
struct UNetDecoderLevelT {
  TensorT<T> up_w, up_b;  // transposed 2x2 conv, stride 2
  ConvBlockT<T> skip;     // present only with conv_skip_connections
  UNetLevelT<T> level;
};

template <class T>
struct UNetModelT {
  UNetConfig config;
  std::vector<UNetLevelT<T>> encoder;
  std::vector<UNetDecoderLevelT<T>> decoder;
  TensorT<T> head_w, head_b;  // 1x1 conv + sigmoid classifier
  ModelParamsT<T> params;
};

using UNetModel = UNetModelT<float>;

namespace detail {

template <class T>
inline void register_block(ModelParamsT<T>& p, const std::string& prefix, ConvBlockT<T>& blk) {
  p.add(prefix + ".conv.w", blk.w);
  p.add(prefix + ".conv.b", blk.b);
  p.add(prefix + ".bn.gamma", blk.bn.gamma);
  p.add(prefix + ".bn.beta", blk.bn.beta);
  p.add(prefix + ".bn.running_mean", blk.bn.running_mean, false);
  p.add(prefix + ".bn.running_var", blk.bn.running_var, false);
}

template <class T>
inline void register_level(ModelParamsT<T>& p, const std::string& prefix, UNetLevelT<T>& lvl) {
  register_block(p, prefix + ".block1", lvl.block1);
  register_block(p, prefix + ".block2", lvl.block2);
  p.add(prefix + ".res.conv.w", lvl.res_w);
  p.add(prefix + ".res.conv.b", lvl.res_b);
  p.add(prefix + ".res.bn.gamma", lvl.res_bn.gamma);
  p.add(prefix + ".res.bn.beta", lvl.res_bn.beta);
  p.add(prefix + ".res.bn.running_mean", lvl.res_bn.running_mean, false);
  p.add(prefix + ".res.bn.running_var", lvl.res_bn.running_var, false);
}

template <class T>
inline void register_unet_params(UNetModelT<T>& m) {
  for (std::size_t i = 0; i < m.encoder.size(); ++i)
    register_level(m.params, "encoder.l" + std::to_string(i), m.encoder[i]);
  for (std::size_t j = 0; j < m.decoder.size(); ++j) {
    const std::string prefix = "decoder.l" + std::to_string(j);
    m.params.add(prefix + ".up.w", m.decoder[j].up_w);
    m.params.add(prefix + ".up.b", m.decoder[j].up_b);
    if (m.config.conv_skip_connections)
      register_block(m.params, prefix + ".skipconv", m.decoder[j].skip);
    register_level(m.params, prefix, m.decoder[j].level);
  }
  m.params.add("head.w", m.head_w);
  m.params.add("head.b", m.head_b);
}

inline ConvBlockT<float> make_block(int cin, int cout, int k, RngStream& rng) {
  ConvBlockT<float> blk;
  blk.w = he_init({cout, cin, k, k}, cin * k * k, rng);
  blk.w.set_requires_grad(true);
  blk.b = Tensor::zeros({cout});
  blk.b.set_requires_grad(true);
  blk.bn = BatchNormStateT<float>(cout);
  return blk;
}

inline UNetLevelT<float> make_level(int cin, int cout, RngStream& rng) {
  UNetLevelT<float> lvl;
  lvl.block1 = make_block(cin, cout, 3, rng);
  lvl.block2 = make_block(cout, cout, 3, rng);
  lvl.res_w = he_init({cout, cin, 1, 1}, cin, rng);
  lvl.res_w.set_requires_grad(true);
  lvl.res_b = Tensor::zeros({cout});
  lvl.res_b.set_requires_grad(true);
  lvl.res_bn = BatchNormStateT<float>(cout);
  return lvl;
}

}  // namespace detail

inline UNetModel build_unet(const UNetConfig& config, RngStream& rng) {
  config.validate();
  UNetModel m;
  m.config = config;
  const auto enc_w = config.encoder_channel_widths();
  const auto dec_w = config.decoder_channel_widths();
  int cin = config.input_channels;
  for (int i = 0; i < config.encoder_levels; ++i) {
    m.encoder.push_back(detail::make_level(cin, enc_w[static_cast<std::size_t>(i)], rng));
    cin = enc_w[static_cast<std::size_t>(i)];
  }
  int up_in = enc_w.back();
  for (int j = 0; j < config.encoder_levels - 1; ++j) {
    UNetDecoderLevelT<float> dl;
    const int dw = dec_w[static_cast<std::size_t>(j)];
    const int skip_c = enc_w[static_cast<std::size_t>(config.encoder_levels - 2 - j)];
    dl.up_w = he_init({up_in, dw, 2, 2}, up_in * 4, rng);
    dl.up_w.set_requires_grad(true);
    dl.up_b = Tensor::zeros({dw});
    dl.up_b.set_requires_grad(true);
    if (config.conv_skip_connections) dl.skip = detail::make_block(skip_c, skip_c, 3, rng);
    dl.level = detail::make_level(dw + skip_c, dw, rng);
    m.decoder.push_back(std::move(dl));
    up_in = dw;
  }
  m.head_w = he_init({1, up_in, 1, 1}, up_in, rng);
  m.head_w.set_requires_grad(true);
  m.head_b = Tensor::zeros({1});
  m.head_b.set_requires_grad(true);
  detail::register_unet_params(m);
  return m;
}

// Deep copy with a scalar-type cast; used by the f64 finite-difference path.
template <class U, class T>
inline UNetModelT<U> cast_unet(const UNetModelT<T>& src) {
  auto cast_tensor = [](const TensorT<T>& t) {
    std::vector<U> d(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = static_cast<U>(t.data()[i]);
    return TensorT<U>::from_data(t.shape(), std::move(d));
  };
  auto cast_bn = [&](const BatchNormStateT<T>& s) {
    BatchNormStateT<U> o;
    o.gamma = cast_tensor(s.gamma);
    o.beta = cast_tensor(s.beta);
    o.running_mean = cast_tensor(s.running_mean);
    o.running_var = cast_tensor(s.running_var);
    o.momentum = static_cast<U>(s.momentum);
    o.eps = static_cast<U>(s.eps);
    return o;
  };
  auto cast_block = [&](const ConvBlockT<T>& b) {
    ConvBlockT<U> o;
    o.w = cast_tensor(b.w);
    o.b = cast_tensor(b.b);
    o.bn = cast_bn(b.bn);
    return o;
  };
  auto cast_level = [&](const UNetLevelT<T>& l) {
    UNetLevelT<U> o;
    o.block1 = cast_block(l.block1);
    o.block2 = cast_block(l.block2);
    o.res_w = cast_tensor(l.res_w);
    o.res_b = cast_tensor(l.res_b);
    o.res_bn = cast_bn(l.res_bn);
    return o;
  };
  UNetModelT<U> m;
  m.config = src.config;
  for (const auto& l : src.encoder) m.encoder.push_back(cast_level(l));
  for (const auto& d : src.decoder) {
    UNetDecoderLevelT<U> o;
    o.up_w = cast_tensor(d.up_w);
    o.up_b = cast_tensor(d.up_b);
    if (src.config.conv_skip_connections) o.skip = cast_block(d.skip);
    o.level = cast_level(d.level);
    m.decoder.push_back(std::move(o));
  }
  m.head_w = cast_tensor(src.head_w);
  m.head_b = cast_tensor(src.head_b);
  detail::register_unet_params(m);
  return m;
}

namespace detail {

template <class T>
inline TensorT<T> block_forward(Tape<T>* tape, ConvBlockT<T>& blk, const TensorT<T>& x,
                                Mode mode) {
  TensorT<T> h = conv2d(tape, x, blk.w, blk.b, 1, Pad::Same);
  h = relu(tape, h);
  return batchnorm(tape, h, blk.bn, mode);
}

template <class T>
inline TensorT<T> level_forward(Tape<T>* tape, UNetLevelT<T>& lvl, const TensorT<T>& x,
                                Mode mode) {
  TensorT<T> h = block_forward(tape, lvl.block1, x, mode);
  h = block_forward(tape, lvl.block2, h, mode);
  TensorT<T> r = conv2d(tape, x, lvl.res_w, lvl.res_b, 1, Pad::Same);
  r = batchnorm(tape, r, lvl.res_bn, mode);
  return add(tape, h, r);
}

template <class T>
inline void check_input_dims(const UNetModelT<T>& m, const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("unet forward: input must be NCHW");
  if (x.dim(1) != m.config.input_channels)
    throw ShapeError("unet forward: expected " + std::to_string(m.config.input_channels) +
                     " input channels, got " + std::to_string(x.dim(1)));
  const int f = m.config.pool_factor();
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0)
    throw ShapeError("unet forward: spatial dims " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " must be divisible by " + std::to_string(f) +
                     "; pad or resize the input");
}

}  // namespace detail

// Runs the encoder, returning the deepest activation. When `skips` is given
// it receives the pre-pooling output of every non-bottleneck level, shallow
// to deep.
template <class T>
inline TensorT<T> encoder_features(UNetModelT<T>& m, const TensorT<T>& x, Mode mode,
                                   Tape<T>* tape = nullptr,
                                   std::vector<TensorT<T>>* skips = nullptr) {
  detail::check_input_dims(m, x);
  TensorT<T> h = x;
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    h = detail::level_forward(tape, m.encoder[i], h, mode);
    if (i + 1 < m.encoder.size()) {
      if (skips) skips->push_back(h);
      h = maxpool2(tape, h);
    }
  }
  return h;
}

// Full segmentation forward: probability map in (0,1), same spatial dims as
// the input.
template <class T>
inline TensorT<T> forward(UNetModelT<T>& m, const TensorT<T>& x, Mode mode,
                          Tape<T>* tape = nullptr) {
  std::vector<TensorT<T>> skips;
  TensorT<T> h = encoder_features(m, x, mode, tape, &skips);
  for (std::size_t j = 0; j < m.decoder.size(); ++j) {
    auto& dl = m.decoder[j];
    TensorT<T> up = conv_transpose2d(tape, h, dl.up_w, dl.up_b);
    TensorT<T> skip = skips[m.decoder.size() - 1 - j];
    if (m.config.conv_skip_connections) skip = detail::block_forward(tape, dl.skip, skip, mode);
    // skip features first, then upsampled features (checkpoint compatibility)
    TensorT<T> cat = concat_channels(tape, skip, up);
    h = detail::level_forward(tape, dl.level, cat, mode);
  }
  TensorT<T> logits = conv2d(tape, h, m.head_w, m.head_b, 1, Pad::Same);
  return sigmoid(tape, logits);
}

}  // namespace retseg
