#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s4mt/batch.hpp"
#include "s4mt/config.hpp"
#include "s4mt/layers.hpp"
#include "s4mt/ssm.hpp"
#include "s4mt/tensor.hpp"

namespace s4mt {

enum class EncoderKind { none, s4, s4bi, transformer };
enum class DecoderKind { s4, s4a, transformer };
// Where the GLU sits inside S4 stacks: after each block's mixing layer
// (block mix is H -> 2H) or after the first linear of the layer MLP.
enum class GluPlacement { block, mlp };

std::string to_string(EncoderKind k);
std::string to_string(DecoderKind k);

struct ModelConfig {
  EncoderKind encoder_kind = EncoderKind::none;
  DecoderKind decoder_kind = DecoderKind::s4;
  std::size_t encoder_layers = 0;
  std::size_t decoder_layers = 6;
  std::size_t blocks_per_layer = 10;
  std::size_t d_model = 512;
  std::size_t d_ff = 2048;
  std::size_t n_heads = 8;
  std::size_t state_dim = 64;
  std::size_t vocab_size = 40000;  // total ids, reserved ones included
  float dropout = 0.1f;
  NormStyle norm_style = NormStyle::post;
  bool include_ae_loss = false;
  bool tie_state_matrices = true;
  bool reverse_source = false;
  float delta = 1.0f;
  bool share_all_embeddings = true;
  GluPlacement glu_placement = GluPlacement::block;
  float label_smoothing = 0.0f;  // reserved; must stay 0

  bool decoder_only() const { return encoder_kind == EncoderKind::none; }
  // Encoder outputs are prepended to the target stream (S4 decoder with an encoder).
  bool concatenates_encoder() const { return !decoder_only() && decoder_kind == DecoderKind::s4; }
  // Throws ConfigError naming the violated rule.
  void validate() const;

  json to_json() const;
  static ModelConfig from_json(const json& j);
};

struct MultiheadAttention {
  std::size_t heads = 1;
  Linear q, k, v, out;

  static MultiheadAttention init(std::size_t d_model, std::size_t heads, std::mt19937_64& rng, ParamList& params,
                                 const std::string& name);
};

// softmax(Q K^T / sqrt(d_head) + mask) V per head, concatenated and projected.
// query is [B, Tq, d], memory is [B, Tk, d]; mask.heads is set here.
Tensor multihead_attention(const MultiheadAttention& m, const Tensor& query, const Tensor& memory,
                           AttentionMask mask);
// Same on already projected queries/keys/values ([B, T, d] each).
Tensor attend_projected(const MultiheadAttention& m, const Tensor& q, const Tensor& k, const Tensor& v,
                        AttentionMask mask);

struct CrossAttentionSublayer {
  MultiheadAttention attn;
  LayerNorm norm;
};

enum class Activation { relu, gelu, glu };

struct FeedForward {
  Linear in, out;
  Activation activation = Activation::relu;

  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const;
};

// B S4 blocks (each optionally followed by cross-attention) then an MLP.
struct S4Layer {
  std::vector<ssm::S4Block> blocks;
  std::vector<CrossAttentionSublayer> cross;  // empty or one per block
  FeedForward mlp;
  LayerNorm mlp_norm;
};

struct TransformerLayer {
  MultiheadAttention self_attn;
  LayerNorm self_norm;
  std::optional<CrossAttentionSublayer> cross;
  FeedForward ffn;
  LayerNorm ffn_norm;
};

struct Stack {
  std::vector<S4Layer> s4;
  std::vector<TransformerLayer> transformer;
  std::optional<LayerNorm> final_norm;  // pre-norm only
};

struct ParamCounts {
  std::size_t total = 0;
  std::size_t embedding = 0;
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t s4_blocks = 0;  // SSM channels plus block mixing/norm
};

struct LossBreakdown {
  Tensor mt_loss;
  std::optional<Tensor> ae_loss;
  Tensor total;
};

// Sinusoidal position encodings for positions offset .. offset + length - 1.
Tensor sinusoidal_positions(std::size_t length, std::size_t d_model, std::size_t offset = 0);

class IncrementalDecoder;

class Model {
 public:
  struct Encoded {
    Tensor states;                     // [B, S, d]
    std::vector<std::size_t> lengths;  // valid positions per row
  };
  struct Output {
    Tensor hidden;  // final decoder activations over target slots, [B, T, d]
    Tensor logits;  // [B, T, V]
  };

  Model(ModelConfig cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  ParamCounts parameter_counts() const;

  const Stack& encoder() const { return encoder_; }
  const Stack& decoder() const { return decoder_; }
  Stack& mutable_decoder() { return decoder_; }

  Tensor embed_source(std::span<const std::int32_t> ids, std::size_t batch, std::size_t time) const;
  Tensor embed_target(std::span<const std::int32_t> ids, std::size_t batch, std::size_t time,
                      std::size_t position_offset = 0) const;
  Encoded encode(std::span<const std::int32_t> src, std::size_t batch, std::size_t time,
                 std::span<const std::size_t> lengths, const ForwardContext& ctx) const;
  // Teacher-forced forward; `mode` selects conv or step-wise evaluation of
  // the decoder's S4 blocks.
  Output forward(const SequenceBatch& batch, const ForwardContext& ctx, ssm::Mode mode = ssm::Mode::conv) const;
  Tensor logits(const Tensor& hidden) const;

 private:
  friend class IncrementalDecoder;

  ModelConfig cfg_;
  ParamList params_;
  Tensor decoder_embedding_;
  Tensor encoder_embedding_;
  Stack encoder_;
  Stack decoder_;
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

LossBreakdown forward_loss(const Model& model, const SequenceBatch& batch, const ForwardContext& ctx);

// S4-S4 decoder input: each row is its valid encoder outputs followed by the
// shifted target embeddings, so padding only ever trails.
Tensor concat_encoder_target(const Tensor& encoder_out, std::span<const std::size_t> encoder_lengths,
                             const Tensor& target_embeddings);

// Step-wise decoding of one source sentence over `rows` hypotheses. S4 blocks
// advance their recurrent state; attention layers keep key/value caches.
class IncrementalDecoder {
 public:
  // `source` holds content tokens only (no EOS).
  IncrementalDecoder(const Model& model, std::span<const std::int32_t> source);

  // First token fed to the decoder: SEP for decoder-only models, BOS otherwise.
  std::int32_t start_token() const;
  std::size_t rows() const { return rows_; }
  std::size_t position() const { return position_; }

  // Feeds one token per row; returns hidden [rows, d] at the new position.
  Tensor step(std::span<const std::int32_t> tokens);
  // Next-token log-probabilities for a hidden state, [rows, V] row-major.
  std::vector<float> log_probs(const Tensor& hidden) const;
  // Reorders/duplicates hypotheses (beam bookkeeping); rows may change size.
  void select_rows(std::span<const std::size_t> rows);

 private:
  Tensor step_embedded(const Tensor& x);  // x: [rows, 1, d]
  Tensor run_stack_step(const Tensor& x);

  const Model* model_;
  std::size_t rows_ = 1;
  std::size_t position_ = 0;  // target-stream positions consumed (Transformer positions)
  std::size_t source_len_ = 0;
  std::vector<ssm::FrozenSsm> frozen_;
  std::vector<ssm::SsmState> states_;
  std::vector<Tensor> self_k_, self_v_;    // per Transformer decoder layer, [rows, t, d]
  std::vector<Tensor> cross_k_, cross_v_;  // per cross-attention sublayer, [rows, S, d]
};

}  // namespace s4mt
