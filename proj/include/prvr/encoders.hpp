#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "prvr/tensor.hpp"
#include "prvr/util.hpp"

namespace prvr {

enum class EncoderKind { video, text };

struct TransformerLayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

// One student encoder. Video encoders own a positional-embedding table and
// an output projection; text encoders own the attentive-aggregation vector.
// Frame/token matrices are row-major with one row per frame/word.
struct EncoderParams {
  EncoderKind kind = EncoderKind::video;
  std::size_t input_dim = 0;
  std::size_t z = 0;
  std::size_t heads = 0;
  std::size_t max_frames = 0;  // video only
  std::size_t ff_mult = 4;

  Tensor in_w, in_b;
  std::vector<TransformerLayerParams> layers;
  Tensor out_w, out_b;   // video only
  Tensor pos_embed;      // video only, [max_frames x z]
  Tensor attn_w;         // text only, [1 x z]

  // Fixed parameter order; checkpoint blobs and optimizer slots follow it.
  template <typename Self, typename Visit>
  static void visit_params(Self& self, Visit&& visit) {
    visit(self.in_w);
    visit(self.in_b);
    for (auto& layer : self.layers) {
      visit(layer.ln1_gain);
      visit(layer.ln1_bias);
      visit(layer.wq);
      visit(layer.bq);
      visit(layer.wk);
      visit(layer.bk);
      visit(layer.wv);
      visit(layer.bv);
      visit(layer.wo);
      visit(layer.bo);
      visit(layer.ln2_gain);
      visit(layer.ln2_bias);
      visit(layer.ff1_w);
      visit(layer.ff1_b);
      visit(layer.ff2_w);
      visit(layer.ff2_b);
    }
    if (self.kind == EncoderKind::video) {
      visit(self.out_w);
      visit(self.out_b);
      visit(self.pos_embed);
    } else {
      visit(self.attn_w);
    }
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    visit_params(*this, [&](Tensor& t) { out.push_back(&t); });
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    visit_params(*this, [&](const Tensor& t) { out.push_back(&t); });
    return out;
  }
};

namespace detail {

inline Tensor init_linear(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  Tensor w = Tensor::zeros({fan_in, fan_out}, true);
  double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : w.values) v = rng.normal(0.0, s);
  return w;
}

inline Tensor init_zeros(std::size_t n) { return Tensor::zeros({n}, true); }
inline Tensor init_ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

}  // namespace detail

inline EncoderParams init_encoder_params(EncoderKind kind, std::uint64_t seed,
                                         std::size_t input_dim, std::size_t z, std::size_t heads,
                                         std::size_t max_frames, std::size_t depth = 1,
                                         std::size_t ff_mult = 4) {
  if (heads == 0 || z % heads != 0)
    throw ParameterError("init_encoder_params: hidden size " + std::to_string(z) +
                         " not divisible by " + std::to_string(heads) + " heads");
  if (input_dim == 0 || z == 0) throw ParameterError("init_encoder_params: zero dimension");
  EncoderParams p;
  p.kind = kind;
  p.input_dim = input_dim;
  p.z = z;
  p.heads = heads;
  p.max_frames = kind == EncoderKind::video ? max_frames : 0;
  p.ff_mult = ff_mult;

  Rng rng(seed);
  p.in_w = detail::init_linear(rng, input_dim, z);
  p.in_b = detail::init_zeros(z);
  p.layers.resize(depth);
  for (auto& layer : p.layers) {
    layer.ln1_gain = detail::init_ones(z);
    layer.ln1_bias = detail::init_zeros(z);
    layer.wq = detail::init_linear(rng, z, z);
    layer.bq = detail::init_zeros(z);
    layer.wk = detail::init_linear(rng, z, z);
    layer.bk = detail::init_zeros(z);
    layer.wv = detail::init_linear(rng, z, z);
    layer.bv = detail::init_zeros(z);
    layer.wo = detail::init_linear(rng, z, z);
    layer.bo = detail::init_zeros(z);
    layer.ln2_gain = detail::init_ones(z);
    layer.ln2_bias = detail::init_zeros(z);
    layer.ff1_w = detail::init_linear(rng, z, ff_mult * z);
    layer.ff1_b = detail::init_zeros(ff_mult * z);
    layer.ff2_w = detail::init_linear(rng, ff_mult * z, z);
    layer.ff2_b = detail::init_zeros(z);
  }
  if (kind == EncoderKind::video) {
    if (max_frames == 0) throw ParameterError("init_encoder_params: max_frames must be >= 1");
    p.out_w = detail::init_linear(rng, z, z);
    p.out_b = detail::init_zeros(z);
    p.pos_embed = Tensor::zeros({max_frames, z}, true);
    for (double& v : p.pos_embed.values) v = rng.normal(0.0, 0.02);
  } else {
    p.attn_w = Tensor::zeros({1, z}, true);
    double s = 1.0 / std::sqrt(static_cast<double>(z));
    for (double& v : p.attn_w.values) v = rng.normal(0.0, s);
  }
  return p;
}

// Tape node ids for one encoder's parameters within a live tape.
struct BoundEncoder {
  const EncoderParams* params = nullptr;
  std::vector<Tape::NodeId> ordered;  // parameters() order

  Tape::NodeId in_w{}, in_b{};
  struct BoundLayer {
    Tape::NodeId ln1_gain, ln1_bias;
    Tape::NodeId wq, bq, wk, bk, wv, bv, wo, bo;
    Tape::NodeId ln2_gain, ln2_bias;
    Tape::NodeId ff1_w, ff1_b, ff2_w, ff2_b;
  };
  std::vector<BoundLayer> layers;
  Tape::NodeId out_w{}, out_b{}, pos_embed{}, attn_w{};
};

inline BoundEncoder bind_encoder(Tape& tape, const EncoderParams& params, bool trainable) {
  BoundEncoder b;
  b.params = &params;
  auto put = [&](const Tensor& t) {
    Tensor copy = t;
    copy.requires_grad = trainable;
    copy.grad.clear();
    Tape::NodeId id = tape.input(std::move(copy));
    b.ordered.push_back(id);
    return id;
  };
  b.in_w = put(params.in_w);
  b.in_b = put(params.in_b);
  for (const auto& layer : params.layers) {
    BoundEncoder::BoundLayer bl;
    bl.ln1_gain = put(layer.ln1_gain);
    bl.ln1_bias = put(layer.ln1_bias);
    bl.wq = put(layer.wq);
    bl.bq = put(layer.bq);
    bl.wk = put(layer.wk);
    bl.bk = put(layer.bk);
    bl.wv = put(layer.wv);
    bl.bv = put(layer.bv);
    bl.wo = put(layer.wo);
    bl.bo = put(layer.bo);
    bl.ln2_gain = put(layer.ln2_gain);
    bl.ln2_bias = put(layer.ln2_bias);
    bl.ff1_w = put(layer.ff1_w);
    bl.ff1_b = put(layer.ff1_b);
    bl.ff2_w = put(layer.ff2_w);
    bl.ff2_b = put(layer.ff2_b);
    b.layers.push_back(bl);
  }
  if (params.kind == EncoderKind::video) {
    b.out_w = put(params.out_w);
    b.out_b = put(params.out_b);
    b.pos_embed = put(params.pos_embed);
  } else {
    b.attn_w = put(params.attn_w);
  }
  return b;
}

// Pre-norm multi-head self-attention + residual, then pre-norm feed-forward
// + residual. x is [n x z], one row per token.
inline Tape::NodeId transformer_layer(Tape& tape, Tape::NodeId x,
                                      const BoundEncoder::BoundLayer& lp, std::size_t heads,
                                      double ln_eps = 1e-5) {
  const Tensor& xv = tape.value(x);
  if (!xv.is_matrix() || xv.rows() == 0)
    throw DimensionError("transformer_layer: need [n x z] with n >= 1, got " + xv.shape_str());
  std::size_t z = xv.cols();
  std::size_t hd = z / heads;

  auto a = tape.layer_norm(x, lp.ln1_gain, lp.ln1_bias, ln_eps);
  auto q = tape.add_row(tape.matmul(a, lp.wq), lp.bq);
  auto k = tape.add_row(tape.matmul(a, lp.wk), lp.bk);
  auto v = tape.add_row(tape.matmul(a, lp.wv), lp.bv);

  std::vector<Tape::NodeId> head_outs;
  head_outs.reserve(heads);
  double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = tape.slice_cols(q, h * hd, (h + 1) * hd);
    auto kh = tape.slice_cols(k, h * hd, (h + 1) * hd);
    auto vh = tape.slice_cols(v, h * hd, (h + 1) * hd);
    auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_hd);
    auto attn = tape.softmax(scores, 1, 1.0);
    head_outs.push_back(tape.matmul(attn, vh));
  }
  auto merged = tape.concat_cols(head_outs);
  auto attn_out = tape.add_row(tape.matmul(merged, lp.wo), lp.bo);
  auto x1 = tape.add(x, attn_out);

  auto bnorm = tape.layer_norm(x1, lp.ln2_gain, lp.ln2_bias, ln_eps);
  auto hidden = tape.gelu(tape.add_row(tape.matmul(bnorm, lp.ff1_w), lp.ff1_b));
  auto ff = tape.add_row(tape.matmul(hidden, lp.ff2_w), lp.ff2_b);
  return tape.add(x1, ff);
}

// F = OutProj(Transformer(InProj(frames) + PE)); frames is [k x input_dim],
// output is [k x z] with one row per input frame.
inline Tape::NodeId encode_video_nodes(Tape& tape, const Tensor& frames, const BoundEncoder& enc) {
  const EncoderParams& p = *enc.params;
  if (!frames.is_matrix() || frames.rows() == 0)
    throw DimensionError("encode_video: need [k x input_dim] with k >= 1, got " +
                         frames.shape_str());
  if (frames.cols() != p.input_dim)
    throw DimensionError("encode_video: input_dim " + std::to_string(frames.cols()) +
                         " vs params " + std::to_string(p.input_dim));
  std::size_t k = frames.rows();
  if (k > p.max_frames)
    throw DimensionError("encode_video: " + std::to_string(k) + " frames exceed max_frames " +
                         std::to_string(p.max_frames));
  auto x = tape.add_row(tape.matmul(tape.constant(frames), enc.in_w), enc.in_b);
  x = tape.add(x, tape.slice_rows(enc.pos_embed, 0, k));
  for (const auto& layer : enc.layers) x = transformer_layer(tape, x, layer, p.heads);
  return tape.add_row(tape.matmul(x, enc.out_w), enc.out_b);
}

struct TextNodes {
  Tape::NodeId sentence;      // [z]
  Tape::NodeId words;         // [n_s x z]
  Tape::NodeId attn_weights;  // [1 x n_s]
};

// Q = Transformer(InProj(words)); alpha = softmax(W . Q^T); sentence = alpha . Q.
inline TextNodes encode_text_nodes(Tape& tape, const Tensor& words, const BoundEncoder& enc) {
  const EncoderParams& p = *enc.params;
  if (!words.is_matrix() || words.rows() == 0)
    throw DimensionError("encode_text: need [n_s x input_dim] with n_s >= 1, got " +
                         words.shape_str());
  if (words.cols() != p.input_dim)
    throw DimensionError("encode_text: input_dim " + std::to_string(words.cols()) +
                         " vs params " + std::to_string(p.input_dim));
  auto x = tape.add_row(tape.matmul(tape.constant(words), enc.in_w), enc.in_b);
  for (const auto& layer : enc.layers) x = transformer_layer(tape, x, layer, p.heads);
  auto scores = tape.matmul(enc.attn_w, tape.transpose(x));  // [1 x n_s]
  auto alpha = tape.softmax(scores, 1, 1.0);
  auto sentence = tape.reshape(tape.matmul(alpha, x), {p.z});
  return {sentence, x, alpha};
}

// Plain-tensor results for inference paths.
struct EncodedVideo {
  Tensor features;  // [k x z], row per frame
  std::size_t n_frames = 0;
};

struct EncodedQuery {
  Tensor sentence_vec;  // [z]
  Tensor word_feats;    // [n_s x z]
  Tensor attn_weights;  // [n_s]
};

inline EncodedVideo encode_video(const Tensor& frames, const EncoderParams& params) {
  Tape tape;
  BoundEncoder enc = bind_encoder(tape, params, false);
  Tape::NodeId out = encode_video_nodes(tape, frames, enc);
  return {tape.value(out), frames.rows()};
}

inline EncodedQuery encode_text(const Tensor& words, const EncoderParams& params) {
  Tape tape;
  BoundEncoder enc = bind_encoder(tape, params, false);
  TextNodes out = encode_text_nodes(tape, words, enc);
  Tensor alpha = tape.value(out.attn_weights);
  alpha.shape = {alpha.numel()};
  return {tape.value(out.sentence), tape.value(out.words), std::move(alpha)};
}

}  // namespace prvr
