#include "s4mt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace s4mt {

namespace {

const char* kEncoderNames[] = {"none", "s4", "s4bi", "transformer"};
const char* kDecoderNames[] = {"s4", "s4a", "transformer"};

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& value, const char* (&names)[N], const char* field) {
  for (std::size_t i = 0; i < N; ++i)
    if (value == names[i]) return static_cast<Enum>(i);
  std::string allowed;
  for (std::size_t i = 0; i < N; ++i) allowed += (i ? ", " : "") + std::string(names[i]);
  throw ConfigError(std::string("model.") + field + ": '" + value + "' is not one of " + allowed);
}

bool is_s4(EncoderKind k) { return k == EncoderKind::s4 || k == EncoderKind::s4bi; }

Tensor init_embedding(std::size_t vocab, std::size_t d, std::mt19937_64& rng) {
  Tensor t = Tensor::randn({vocab, d}, rng, 1.0f / std::sqrt(static_cast<float>(d)));
  std::fill_n(t.data().begin() + kPad * static_cast<std::int32_t>(d), d, 0.0f);
  return t;
}

CrossAttentionSublayer init_cross(const ModelConfig& cfg, std::mt19937_64& rng, ParamList& params,
                                  const std::string& name) {
  CrossAttentionSublayer c;
  c.attn = MultiheadAttention::init(cfg.d_model, cfg.n_heads, rng, params, name + ".attn");
  c.norm = LayerNorm::init(cfg.d_model, params, name + ".norm");
  return c;
}

FeedForward init_ffn(std::size_t d, std::size_t d_ff, Activation act, std::mt19937_64& rng, ParamList& params,
                     const std::string& name) {
  FeedForward f;
  f.activation = act;
  f.in = Linear::init(d, d_ff, rng, params, name + ".in");
  f.out = Linear::init(act == Activation::glu ? d_ff / 2 : d_ff, d, rng, params, name + ".out");
  return f;
}

Stack build_s4_stack(const ModelConfig& cfg, std::size_t layers, bool bidirectional, bool cross,
                     std::mt19937_64& rng, ParamList& params, const std::string& prefix) {
  Stack stack;
  const bool block_glu = cfg.glu_placement == GluPlacement::block;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string lname = prefix + ".layers." + std::to_string(i);
    S4Layer layer;
    for (std::size_t j = 0; j < cfg.blocks_per_layer; ++j) {
      const std::string bname = lname + ".blocks." + std::to_string(j);
      layer.blocks.push_back(ssm::S4Block::init(cfg.d_model, cfg.state_dim, cfg.tie_state_matrices, bidirectional,
                                                cfg.delta, cfg.norm_style, rng, params, bname, block_glu));
      if (cross) layer.cross.push_back(init_cross(cfg, rng, params, lname + ".cross." + std::to_string(j)));
    }
    layer.mlp = init_ffn(cfg.d_model, cfg.d_ff, block_glu ? Activation::gelu : Activation::glu, rng, params,
                         lname + ".mlp");
    layer.mlp_norm = LayerNorm::init(cfg.d_model, params, lname + ".mlp_norm");
    stack.s4.push_back(std::move(layer));
  }
  if (cfg.norm_style == NormStyle::pre) stack.final_norm = LayerNorm::init(cfg.d_model, params, prefix + ".final_norm");
  return stack;
}

Stack build_transformer_stack(const ModelConfig& cfg, std::size_t layers, bool decoder, std::mt19937_64& rng,
                              ParamList& params, const std::string& prefix) {
  Stack stack;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string lname = prefix + ".layers." + std::to_string(i);
    TransformerLayer layer;
    layer.self_attn = MultiheadAttention::init(cfg.d_model, cfg.n_heads, rng, params, lname + ".self_attn");
    layer.self_norm = LayerNorm::init(cfg.d_model, params, lname + ".self_norm");
    if (decoder) layer.cross = init_cross(cfg, rng, params, lname + ".cross");
    layer.ffn = init_ffn(cfg.d_model, cfg.d_ff, Activation::relu, rng, params, lname + ".ffn");
    layer.ffn_norm = LayerNorm::init(cfg.d_model, params, lname + ".ffn_norm");
    stack.transformer.push_back(std::move(layer));
  }
  if (cfg.norm_style == NormStyle::pre) stack.final_norm = LayerNorm::init(cfg.d_model, params, prefix + ".final_norm");
  return stack;
}

AttentionMask key_mask(std::span<const std::size_t> lengths, bool causal) {
  AttentionMask m;
  m.key_lengths.assign(lengths.begin(), lengths.end());
  m.causal = causal;
  return m;
}

// Full-sequence pass through a stack. `memory` feeds cross-attention.
Tensor run_stack(const Stack& stack, Tensor x, NormStyle style, const ForwardContext& ctx, ssm::Mode mode,
                 std::span<const std::size_t> lengths, bool causal, const Model::Encoded* memory) {
  for (const S4Layer& layer : stack.s4) {
    for (std::size_t j = 0; j < layer.blocks.size(); ++j) {
      x = ssm::s4_block_forward(layer.blocks[j], x, mode, ctx, lengths);
      if (!layer.cross.empty()) {
        if (memory == nullptr) throw ContractError("S4A layer requires encoder outputs");
        const CrossAttentionSublayer& c = layer.cross[j];
        x = residual(x, c.norm, style, ctx, [&](const Tensor& h) {
          return multihead_attention(c.attn, h, memory->states, key_mask(memory->lengths, false));
        });
      }
    }
    x = residual(x, layer.mlp_norm, style, ctx, [&](const Tensor& h) { return layer.mlp(h, ctx); });
  }
  for (const TransformerLayer& layer : stack.transformer) {
    x = residual(x, layer.self_norm, style, ctx, [&](const Tensor& h) {
      return multihead_attention(layer.self_attn, h, h, key_mask(lengths, causal));
    });
    if (layer.cross) {
      if (memory == nullptr) throw ContractError("cross-attention layer requires encoder outputs");
      x = residual(x, layer.cross->norm, style, ctx, [&](const Tensor& h) {
        return multihead_attention(layer.cross->attn, h, memory->states, key_mask(memory->lengths, false));
      });
    }
    x = residual(x, layer.ffn_norm, style, ctx, [&](const Tensor& h) { return layer.ffn(h, ctx); });
  }
  if (stack.final_norm) x = (*stack.final_norm)(x);
  return x;
}

Tensor add_positions(const Tensor& x, std::size_t offset) {
  const std::size_t batch = x.dim(0);
  const std::size_t time = x.dim(1);
  const std::size_t d = x.dim(2);
  const Tensor pe = sinusoidal_positions(time, d, offset);
  std::vector<float> tiled(batch * time * d);
  for (std::size_t b = 0; b < batch; ++b) std::copy(pe.data().begin(), pe.data().end(), tiled.begin() + b * time * d);
  return add(x, Tensor({batch, time, d}, std::move(tiled)));
}

}  // namespace

std::string to_string(EncoderKind k) { return kEncoderNames[static_cast<int>(k)]; }
std::string to_string(DecoderKind k) { return kDecoderNames[static_cast<int>(k)]; }

void ModelConfig::validate() const {
  std::vector<std::string> violations;
  if (encoder_kind == EncoderKind::none && encoder_layers != 0)
    violations.push_back("encoder_kind none requires encoder_layers = 0");
  if (encoder_kind != EncoderKind::none && encoder_layers == 0)
    violations.push_back("an encoder needs encoder_layers >= 1");
  if (encoder_kind == EncoderKind::none && decoder_kind != DecoderKind::s4)
    violations.push_back("decoder_kind " + to_string(decoder_kind) + " needs an encoder for cross-attention");
  if (decoder_layers == 0) violations.push_back("decoder_layers must be >= 1");
  if (blocks_per_layer == 0) violations.push_back("blocks_per_layer must be >= 1");
  if (d_model == 0) violations.push_back("d_model must be >= 1");
  if (n_heads == 0 || d_model % n_heads != 0) violations.push_back("d_model must be divisible by n_heads");
  if (d_ff == 0) violations.push_back("d_ff must be >= 1");
  if (glu_placement == GluPlacement::mlp && d_ff % 2 != 0) violations.push_back("GLU in the MLP needs an even d_ff");
  if (state_dim == 0) violations.push_back("state_dim must be >= 1");
  if (vocab_size <= static_cast<std::size_t>(kReservedTokens))
    violations.push_back("vocab_size must exceed the reserved ids");
  if (!(dropout >= 0.0f && dropout < 1.0f)) violations.push_back("dropout must lie in [0, 1)");
  if (!(delta > 0.0f)) violations.push_back("delta must be positive");
  if (label_smoothing != 0.0f) violations.push_back("label_smoothing is reserved and must be 0");
  if (include_ae_loss && !decoder_only()) violations.push_back("include_ae_loss applies to decoder-only models");
  if (!violations.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ConfigError(msg);
  }
}

json ModelConfig::to_json() const {
  return json{{"encoder_kind", to_string(encoder_kind)},
              {"decoder_kind", to_string(decoder_kind)},
              {"encoder_layers", encoder_layers},
              {"decoder_layers", decoder_layers},
              {"blocks_per_layer", blocks_per_layer},
              {"d_model", d_model},
              {"d_ff", d_ff},
              {"n_heads", n_heads},
              {"state_dim", state_dim},
              {"vocab_size", vocab_size},
              {"dropout", dropout},
              {"norm_style", norm_style == NormStyle::pre ? "pre" : "post"},
              {"include_ae_loss", include_ae_loss},
              {"tie_state_matrices", tie_state_matrices},
              {"reverse_source", reverse_source},
              {"delta", delta},
              {"share_all_embeddings", share_all_embeddings},
              {"glu_placement", glu_placement == GluPlacement::block ? "block" : "mlp"},
              {"label_smoothing", label_smoothing}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  StrictObject o(j, "model");
  std::string enc = to_string(c.encoder_kind), dec = to_string(c.decoder_kind), norm = "post", glu = "block";
  o.get("encoder_kind", enc);
  o.get("decoder_kind", dec);
  o.get("encoder_layers", c.encoder_layers);
  o.get("decoder_layers", c.decoder_layers);
  o.get("blocks_per_layer", c.blocks_per_layer);
  o.get("d_model", c.d_model);
  o.get("d_ff", c.d_ff);
  o.get("n_heads", c.n_heads);
  o.get("state_dim", c.state_dim);
  o.get("vocab_size", c.vocab_size);
  o.get("dropout", c.dropout);
  o.get("norm_style", norm);
  o.get("include_ae_loss", c.include_ae_loss);
  o.get("tie_state_matrices", c.tie_state_matrices);
  o.get("reverse_source", c.reverse_source);
  o.get("delta", c.delta);
  o.get("share_all_embeddings", c.share_all_embeddings);
  o.get("glu_placement", glu);
  o.get("label_smoothing", c.label_smoothing);
  o.finish();
  c.encoder_kind = parse_enum<EncoderKind>(enc, kEncoderNames, "encoder_kind");
  c.decoder_kind = parse_enum<DecoderKind>(dec, kDecoderNames, "decoder_kind");
  if (norm != "pre" && norm != "post") throw ConfigError("model.norm_style: expected pre or post");
  c.norm_style = norm == "pre" ? NormStyle::pre : NormStyle::post;
  if (glu != "block" && glu != "mlp") throw ConfigError("model.glu_placement: expected block or mlp");
  c.glu_placement = glu == "block" ? GluPlacement::block : GluPlacement::mlp;
  return c;
}

MultiheadAttention MultiheadAttention::init(std::size_t d_model, std::size_t heads, std::mt19937_64& rng,
                                            ParamList& params, const std::string& name) {
  MultiheadAttention m;
  m.heads = heads;
  m.q = Linear::init(d_model, d_model, rng, params, name + ".q");
  m.k = Linear::init(d_model, d_model, rng, params, name + ".k");
  m.v = Linear::init(d_model, d_model, rng, params, name + ".v");
  m.out = Linear::init(d_model, d_model, rng, params, name + ".out");
  return m;
}

Tensor attend_projected(const MultiheadAttention& m, const Tensor& q, const Tensor& k, const Tensor& v,
                        AttentionMask mask) {
  const std::size_t d = q.dim(2);
  const float inv = 1.0f / std::sqrt(static_cast<float>(d / m.heads));
  mask.heads = m.heads;
  const Tensor scores = scale(batched_matmul(split_heads(q, m.heads), split_heads(k, m.heads), true), inv);
  const Tensor weights = masked_softmax(scores, mask);
  return m.out(merge_heads(batched_matmul(weights, split_heads(v, m.heads)), m.heads));
}

Tensor multihead_attention(const MultiheadAttention& m, const Tensor& query, const Tensor& memory,
                           AttentionMask mask) {
  return attend_projected(m, m.q(query), m.k(memory), m.v(memory), std::move(mask));
}

Tensor FeedForward::operator()(const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = in(x);
  switch (activation) {
    case Activation::relu: h = relu(h); break;
    case Activation::gelu: h = gelu(h); break;
    case Activation::glu: h = glu(h); break;
  }
  return out(ctx.drop(h));
}

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model, std::size_t offset) {
  std::vector<float> pe(length * d_model);
  for (std::size_t t = 0; t < length; ++t) {
    const double pos = static_cast<double>(t + offset);
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
      pe[t * d_model + i] = static_cast<float>(i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate));
    }
  }
  return Tensor({length, d_model}, std::move(pe));
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d_model;
  const bool shared = cfg_.share_all_embeddings;
  decoder_embedding_ = params_.add(shared ? "embed.shared" : "embed.decoder", init_embedding(cfg_.vocab_size, d, rng));
  if (!cfg_.decoder_only()) {
    encoder_embedding_ =
        shared ? decoder_embedding_ : params_.add("embed.encoder", init_embedding(cfg_.vocab_size, d, rng));
    if (is_s4(cfg_.encoder_kind)) {
      encoder_ = build_s4_stack(cfg_, cfg_.encoder_layers, cfg_.encoder_kind == EncoderKind::s4bi, false, rng,
                                params_, "encoder");
    } else {
      encoder_ = build_transformer_stack(cfg_, cfg_.encoder_layers, false, rng, params_, "encoder");
    }
  }
  if (cfg_.decoder_kind == DecoderKind::transformer) {
    decoder_ = build_transformer_stack(cfg_, cfg_.decoder_layers, true, rng, params_, "decoder");
  } else {
    decoder_ = build_s4_stack(cfg_, cfg_.decoder_layers, false, cfg_.decoder_kind == DecoderKind::s4a, rng, params_,
                              "decoder");
  }
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) { return Model(cfg, seed); }

ParamCounts Model::parameter_counts() const {
  ParamCounts c;
  for (const auto& [name, t] : params_.items()) {
    const std::size_t n = t.numel();
    c.total += n;
    if (name.rfind("embed.", 0) == 0) c.embedding += n;
    if (name.rfind("encoder.", 0) == 0) c.encoder += n;
    if (name.rfind("decoder.", 0) == 0) c.decoder += n;
    if (name.find(".blocks.") != std::string::npos) c.s4_blocks += n;
  }
  return c;
}

Tensor Model::embed_source(std::span<const std::int32_t> ids, std::size_t batch, std::size_t time) const {
  Tensor x = scale(embedding(encoder_embedding_, ids, {batch, time}, kPad),
                   std::sqrt(static_cast<float>(cfg_.d_model)));
  if (cfg_.encoder_kind == EncoderKind::transformer) x = add_positions(x, 0);
  return x;
}

Tensor Model::embed_target(std::span<const std::int32_t> ids, std::size_t batch, std::size_t time,
                           std::size_t position_offset) const {
  Tensor x = scale(embedding(decoder_embedding_, ids, {batch, time}, kPad),
                   std::sqrt(static_cast<float>(cfg_.d_model)));
  if (cfg_.decoder_kind == DecoderKind::transformer) x = add_positions(x, position_offset);
  return x;
}

Model::Encoded Model::encode(std::span<const std::int32_t> src, std::size_t batch, std::size_t time,
                             std::span<const std::size_t> lengths, const ForwardContext& ctx) const {
  if (cfg_.decoder_only()) throw ContractError("encode: model has no encoder");
  Encoded e;
  e.lengths.assign(lengths.begin(), lengths.end());
  const Tensor x = ctx.drop(embed_source(src, batch, time));
  e.states = run_stack(encoder_, x, cfg_.norm_style, ctx, ssm::Mode::conv, lengths, false, nullptr);
  return e;
}

Model::Output Model::forward(const SequenceBatch& batch, const ForwardContext& ctx, ssm::Mode mode) const {
  if (batch.decoder_only != cfg_.decoder_only()) {
    throw ContractError(cfg_.decoder_only() ? "decoder-only model given an encoder-decoder batch"
                                            : "encoder-decoder model given a decoder-only batch");
  }
  const std::size_t b = batch.batch_size;
  const std::size_t t = batch.tgt_time;
  Tensor x = ctx.drop(embed_target(batch.tgt_in, b, t));
  Output out;
  if (cfg_.decoder_only()) {
    out.hidden = run_stack(decoder_, x, cfg_.norm_style, ctx, mode, batch.tgt_lengths, true, nullptr);
  } else {
    const Encoded enc = encode(batch.src, b, batch.src_time, batch.src_lengths, ctx);
    if (cfg_.concatenates_encoder()) {
      const Tensor joined = concat_encoder_target(enc.states, enc.lengths, x);
      const Tensor h = run_stack(decoder_, joined, cfg_.norm_style, ctx, mode, {}, true, nullptr);
      out.hidden = gather_segment(h, enc.lengths, t);
    } else {
      out.hidden = run_stack(decoder_, x, cfg_.norm_style, ctx, mode, batch.tgt_lengths, true, &enc);
    }
  }
  out.logits = logits(out.hidden);
  return out;
}

Tensor Model::logits(const Tensor& hidden) const { return matmul(hidden, decoder_embedding_, true); }

Tensor concat_encoder_target(const Tensor& encoder_out, std::span<const std::size_t> encoder_lengths,
                             const Tensor& target_embeddings) {
  return pack_concat(encoder_out, encoder_lengths, target_embeddings);
}

LossBreakdown forward_loss(const Model& model, const SequenceBatch& batch, const ForwardContext& ctx) {
  const bool ae = model.config().include_ae_loss;
  if (ae && batch.decoder_only && batch.sep_positions.empty())
    throw ContractError("forward_loss: source reconstruction loss needs SEP positions");
  const Model::Output out = model.forward(batch, ctx);
  LossBreakdown loss;
  loss.mt_loss = cross_entropy(out.logits, batch.tgt_out, batch.loss_mask);
  loss.total = loss.mt_loss;
  if (ae) {
    loss.ae_loss = cross_entropy(out.logits, batch.tgt_out, batch.ae_mask);
    loss.total = add(loss.mt_loss, *loss.ae_loss);
  }
  return loss;
}

// ---------------------------------------------------------------------------

IncrementalDecoder::IncrementalDecoder(const Model& model, std::span<const std::int32_t> source)
    : model_(&model), source_len_(source.size()) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  for (const S4Layer& layer : model.decoder_.s4) {
    for (const ssm::S4Block& block : layer.blocks) {
      frozen_.push_back(block.forward_ssm.freeze());
      states_.push_back(ssm::SsmState::zeros(1, cfg.d_model, cfg.state_dim));
    }
  }
  self_k_.resize(model.decoder_.transformer.size());
  self_v_.resize(model.decoder_.transformer.size());

  if (cfg.decoder_only()) {
    std::vector<std::int32_t> prefix{kBos};
    prefix.insert(prefix.end(), source.begin(), source.end());
    prefix.push_back(kEos);
    for (std::int32_t tok : prefix) step(std::span<const std::int32_t>(&tok, 1));
    return;
  }

  std::vector<std::int32_t> src(source.begin(), source.end());
  src.push_back(kEos);
  const std::vector<std::size_t> lengths{src.size()};
  const Model::Encoded enc = model.encode(src, 1, src.size(), lengths, ForwardContext{});
  if (cfg.concatenates_encoder()) {
    for (std::size_t t = 0; t < src.size(); ++t) run_stack_step(slice_time(enc.states, t, 1));
    return;
  }
  auto add_cross = [&](const CrossAttentionSublayer& c) {
    cross_k_.push_back(c.attn.k(enc.states));
    cross_v_.push_back(c.attn.v(enc.states));
  };
  for (const S4Layer& layer : model.decoder_.s4)
    for (const auto& c : layer.cross) add_cross(c);
  for (const TransformerLayer& layer : model.decoder_.transformer)
    if (layer.cross) add_cross(*layer.cross);
}

std::int32_t IncrementalDecoder::start_token() const { return model_->config().decoder_only() ? kSep : kBos; }

Tensor IncrementalDecoder::step(std::span<const std::int32_t> tokens) {
  if (tokens.size() != rows_) throw ContractError("IncrementalDecoder::step: one token per row required");
  NoGradGuard no_grad;
  const Tensor x = model_->embed_target(tokens, rows_, 1, position_);
  ++position_;
  const Tensor h = run_stack_step(x);
  return reshape(h, {rows_, model_->config().d_model});
}

Tensor IncrementalDecoder::run_stack_step(const Tensor& input) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model_->config();
  const Stack& stack = model_->decoder_;
  const ForwardContext ctx;
  const NormStyle style = cfg.norm_style;
  const std::size_t d = cfg.d_model;
  Tensor x = input;
  std::size_t block_index = 0;
  std::size_t cross_index = 0;
  for (const S4Layer& layer : stack.s4) {
    for (std::size_t j = 0; j < layer.blocks.size(); ++j) {
      const std::size_t k = block_index++;
      x = ssm::s4_block_apply(
          layer.blocks[j], x,
          [&](const Tensor& h) {
            return Tensor({rows_, 1, d}, ssm::forward_recurrent(states_[k], h.data(), frozen_[k]));
          },
          ctx);
      if (!layer.cross.empty()) {
        const std::size_t c = cross_index++;
        const MultiheadAttention& attn = layer.cross[j].attn;
        x = residual(x, layer.cross[j].norm, style, ctx, [&](const Tensor& h) {
          return attend_projected(attn, attn.q(h), cross_k_[c], cross_v_[c], AttentionMask{});
        });
      }
    }
    x = residual(x, layer.mlp_norm, style, ctx, [&](const Tensor& h) { return layer.mlp(h, ctx); });
  }
  for (std::size_t i = 0; i < stack.transformer.size(); ++i) {
    const TransformerLayer& layer = stack.transformer[i];
    x = residual(x, layer.self_norm, style, ctx, [&](const Tensor& h) {
      const MultiheadAttention& attn = layer.self_attn;
      const Tensor k = attn.k(h);
      const Tensor v = attn.v(h);
      self_k_[i] = self_k_[i].defined() ? concat_time(self_k_[i], k) : k;
      self_v_[i] = self_v_[i].defined() ? concat_time(self_v_[i], v) : v;
      return attend_projected(attn, attn.q(h), self_k_[i], self_v_[i], AttentionMask{});
    });
    if (layer.cross) {
      const std::size_t c = cross_index++;
      const MultiheadAttention& attn = layer.cross->attn;
      x = residual(x, layer.cross->norm, style, ctx, [&](const Tensor& h) {
        return attend_projected(attn, attn.q(h), cross_k_[c], cross_v_[c], AttentionMask{});
      });
    }
    x = residual(x, layer.ffn_norm, style, ctx, [&](const Tensor& h) { return layer.ffn(h, ctx); });
  }
  if (stack.final_norm) x = (*stack.final_norm)(x);
  return x;
}

std::vector<float> IncrementalDecoder::log_probs(const Tensor& hidden) const {
  NoGradGuard no_grad;
  const Tensor logits = model_->logits(hidden);
  const std::size_t v = logits.dim(logits.rank() - 1);
  const std::size_t rows = logits.numel() / v;
  std::vector<float> out(logits.numel());
  auto lv = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = lv.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = static_cast<float>(row[j] - lz);
  }
  return out;
}

void IncrementalDecoder::select_rows(std::span<const std::size_t> rows) {
  for (std::size_t r : rows)
    if (r >= rows_) throw std::out_of_range("IncrementalDecoder::select_rows: row out of range");
  for (auto& s : states_) s.select_rows(rows);
  for (auto* group : {&self_k_, &self_v_, &cross_k_, &cross_v_}) {
    for (Tensor& t : *group)
      if (t.defined()) t = s4mt::select_rows(t, rows);
  }
  rows_ = rows.size();
}

}  // namespace s4mt
