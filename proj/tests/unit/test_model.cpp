#include <cmath>
#include <numeric>

#include "doctest.h"
#include "grad_suite.hpp"
#include "s4mt/data.hpp"
#include "s4mt/model.hpp"

using namespace s4mt;
using testing::max_abs_diff;

namespace {

ModelConfig small(EncoderKind enc, DecoderKind dec) {
  ModelConfig c;
  c.encoder_kind = enc;
  c.decoder_kind = dec;
  c.encoder_layers = enc == EncoderKind::none ? 0 : 1;
  c.decoder_layers = 1;
  c.blocks_per_layer = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.n_heads = 2;
  c.state_dim = 4;
  c.vocab_size = kReservedTokens + 10;
  c.dropout = 0.0f;
  return c;
}

const std::vector<std::pair<EncoderKind, DecoderKind>> kAllKinds = {
    {EncoderKind::none, DecoderKind::s4},           {EncoderKind::s4, DecoderKind::s4},
    {EncoderKind::s4bi, DecoderKind::s4},           {EncoderKind::transformer, DecoderKind::s4},
    {EncoderKind::s4, DecoderKind::s4a},            {EncoderKind::s4bi, DecoderKind::s4a},
    {EncoderKind::transformer, DecoderKind::s4a},   {EncoderKind::transformer, DecoderKind::transformer},
    {EncoderKind::s4, DecoderKind::transformer},
};

SequenceBatch batch_of(const std::vector<SentencePair>& pairs, bool decoder_only) {
  std::vector<const SentencePair*> rows;
  for (const auto& p : pairs) rows.push_back(&p);
  return make_batch(rows, decoder_only);
}

std::string kind_name(const ModelConfig& c) { return to_string(c.encoder_kind) + "-" + to_string(c.decoder_kind); }

}  // namespace

TEST_CASE("parameter counts of the reference configurations") {
  SUBCASE("attention-free decoder-only, B=10, L_D=6, d=512") {
    ModelConfig c;
    c.encoder_kind = EncoderKind::none;
    c.decoder_kind = DecoderKind::s4;
    c.decoder_layers = 6;
    c.blocks_per_layer = 10;
    const Model m = build_model(c, 1);
    const double total = static_cast<double>(m.parameter_counts().total);
    CHECK(std::abs(total - 67e6) / 67e6 < 0.05);
  }
  SUBCASE("Transformer 6-6") {
    ModelConfig c;
    c.encoder_kind = EncoderKind::transformer;
    c.decoder_kind = DecoderKind::transformer;
    c.encoder_layers = 6;
    c.decoder_layers = 6;
    const Model m = build_model(c, 1);
    const double total = static_cast<double>(m.parameter_counts().total);
    CHECK(total > 64e6);
    CHECK(total < 66e6);
  }
}

TEST_CASE("parameter accounting sums over named parameters") {
  for (auto [enc, dec] : kAllKinds) {
    const Model m = build_model(small(enc, dec), 3);
    const ParamCounts c = m.parameter_counts();
    std::size_t sum = 0;
    for (const auto& [name, t] : m.params().items()) sum += t.numel();
    CHECK(c.total == sum);
    CHECK(c.embedding + c.encoder + c.decoder == c.total);
    if (dec != DecoderKind::transformer) CHECK(c.s4_blocks > 0);
  }
}

TEST_CASE("builds from one seed are bitwise identical") {
  for (auto [enc, dec] : kAllKinds) {
    const Model a = build_model(small(enc, dec), 11), b = build_model(small(enc, dec), 11);
    REQUIRE(a.params().items().size() == b.params().items().size());
    for (std::size_t i = 0; i < a.params().items().size(); ++i) {
      const auto& ta = a.params().items()[i].second;
      const auto& tb = b.params().items()[i].second;
      CHECK(std::equal(ta.data().begin(), ta.data().end(), tb.data().begin()));
    }
  }
}

TEST_CASE("config validation lists violated rules") {
  ModelConfig c = small(EncoderKind::none, DecoderKind::s4a);
  c.encoder_layers = 2;
  c.d_model = 15;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("encoder_layers = 0") != std::string::npos);
    CHECK(msg.find("needs an encoder") != std::string::npos);
    CHECK(msg.find("divisible by n_heads") != std::string::npos);
  }
  CHECK_THROWS_AS(build_model(c, 1), ConfigError);

  ModelConfig ae = small(EncoderKind::transformer, DecoderKind::transformer);
  ae.include_ae_loss = true;
  CHECK_THROWS_AS(ae.validate(), ConfigError);
}

TEST_CASE("config JSON round trip and unknown keys") {
  ModelConfig c = small(EncoderKind::s4bi, DecoderKind::s4a);
  c.reverse_source = true;
  c.norm_style = NormStyle::pre;
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  json bad = c.to_json();
  bad["d_modle"] = 8;
  CHECK_THROWS_AS(ModelConfig::from_json(bad), ConfigError);
}

TEST_CASE("S4 layer output shape is preserved for any block count") {
  std::mt19937_64 rng(4);
  for (std::size_t b : {1u, 2u, 7u, 35u}) {
    ModelConfig c = small(EncoderKind::none, DecoderKind::s4);
    c.d_model = 4;
    c.d_ff = 8;
    c.blocks_per_layer = b;
    const Model m = build_model(c, b);
    const SequenceBatch batch = batch_of({{{5, 6}, {7, 8, 9}}}, true);
    const auto out = m.forward(batch, ForwardContext{});
    CHECK(out.hidden.shape() == Shape{1, batch.tgt_time, 4});
    CHECK(out.logits.shape() == Shape{1, batch.tgt_time, c.vocab_size});
  }
}

TEST_CASE("a one-block layer is a single block followed by the MLP") {
  ModelConfig c = small(EncoderKind::none, DecoderKind::s4);
  c.blocks_per_layer = 1;
  const Model m = build_model(c, 5);
  const SequenceBatch batch = batch_of({{{5, 6, 7}, {8, 9}}}, true);
  const auto out = m.forward(batch, ForwardContext{});
  const S4Layer& layer = m.decoder().s4[0];
  const ForwardContext ctx;
  Tensor x = m.embed_target(batch.tgt_in, 1, batch.tgt_time);
  x = ssm::s4_block_forward(layer.blocks[0], x, ssm::Mode::conv, ctx);
  x = layer.mlp_norm(add(x, layer.mlp(x, ctx)));
  CHECK(max_abs_diff(out.hidden.data(), x.data()) < 1e-6);
}

TEST_CASE("conv and recurrent evaluation agree end to end for a 2-layer stack") {
  for (auto [enc, dec] : kAllKinds) {
    ModelConfig c = small(enc, dec);
    c.decoder_layers = 2;
    const Model m = build_model(c, 6);
    const SequenceBatch batch = batch_of({{{5, 6, 7, 8}, {9, 10, 11}}, {{12, 13}, {14, 5, 6, 7, 8}}}, c.decoder_only());
    const auto conv = m.forward(batch, ForwardContext{}, ssm::Mode::conv);
    const auto rec = m.forward(batch, ForwardContext{}, ssm::Mode::recurrent);
    CAPTURE(kind_name(c));
    CHECK(max_abs_diff(conv.logits.data(), rec.logits.data()) < 1e-3);
  }
}

TEST_CASE("decoders are causal in their target inputs") {
  for (auto [enc, dec] : kAllKinds) {
    const ModelConfig c = small(enc, dec);
    const Model m = build_model(c, 7);
    const SequenceBatch base = batch_of({{{5, 6, 7, 8}, {9, 10, 11, 12, 13}}}, c.decoder_only());
    const auto ref = m.forward(base, ForwardContext{});
    const std::size_t v = c.vocab_size;
    CAPTURE(kind_name(c));
    for (std::size_t p = 1; p < base.tgt_time; ++p) {
      SequenceBatch changed = base;
      changed.tgt_in[p] = changed.tgt_in[p] == 6 ? 7 : 6;
      const auto out = m.forward(changed, ForwardContext{});
      const double before = max_abs_diff(out.logits.data().subspan(0, p * v), ref.logits.data().subspan(0, p * v));
      CHECK(before < 1e-5);
      const double at = max_abs_diff(out.logits.data().subspan(p * v, v), ref.logits.data().subspan(p * v, v));
      CHECK(at > 1e-6);
    }
  }
}

TEST_CASE("unidirectional S4 encoders are causal; bidirectional ones are not") {
  for (EncoderKind enc : {EncoderKind::s4, EncoderKind::s4bi}) {
    const Model m = build_model(small(enc, DecoderKind::s4a), 8);
    std::vector<std::int32_t> src{5, 6, 7, 8, 9, kEos};
    const std::vector<std::size_t> lengths{src.size()};
    const auto a = m.encode(src, 1, src.size(), lengths, ForwardContext{});
    src[4] = 11;
    const auto b = m.encode(src, 1, src.size(), lengths, ForwardContext{});
    const double early = max_abs_diff(a.states.data().subspan(0, 4 * 16), b.states.data().subspan(0, 4 * 16));
    if (enc == EncoderKind::s4) CHECK(early < 1e-6);
    else CHECK(early > 1e-4);
  }
}

TEST_CASE("forward_loss") {
  SUBCASE("uniform logits give ln V") {
    for (auto [enc, dec] : kAllKinds) {
      const ModelConfig c = small(enc, dec);
      Model m = build_model(c, 9);
      // Zero embedding table -> all logits zero.
      for (auto& [name, t] : m.params().items())
        if (name.rfind("embed.", 0) == 0) std::fill(t.data().begin(), t.data().end(), 0.0f);
      const SequenceBatch batch = batch_of({{{5, 6, 7}, {8, 9}}}, c.decoder_only());
      const auto loss = forward_loss(m, batch, ForwardContext{});
      CHECK(loss.mt_loss.item() == doctest::Approx(std::log(static_cast<double>(c.vocab_size))).epsilon(1e-6));
    }
  }
  SUBCASE("the reconstruction term is optional and additive") {
    ModelConfig c = small(EncoderKind::none, DecoderKind::s4);
    const SequenceBatch batch = batch_of({{{5, 6, 7}, {8, 9}}}, true);
    const Model plain = build_model(c, 10);
    const auto l0 = forward_loss(plain, batch, ForwardContext{});
    CHECK_FALSE(l0.ae_loss.has_value());
    CHECK(l0.total.item() == l0.mt_loss.item());

    c.include_ae_loss = true;
    const Model ae = build_model(c, 10);
    const auto l1 = forward_loss(ae, batch, ForwardContext{});
    REQUIRE(l1.ae_loss.has_value());
    CHECK(l1.mt_loss.item() == l0.mt_loss.item());
    CHECK(l1.total.item() == doctest::Approx(l1.mt_loss.item() + l1.ae_loss->item()).epsilon(1e-7));

    SequenceBatch no_sep = batch;
    no_sep.sep_positions.clear();
    CHECK_THROWS_AS(forward_loss(ae, no_sep, ForwardContext{}), ContractError);
  }
  SUBCASE("padding does not change the loss") {
    for (auto [enc, dec] : kAllKinds) {
      const ModelConfig c = small(enc, dec);
      const Model m = build_model(c, 12);
      const SentencePair shortp{{5, 6}, {7}}, longp{{8, 9, 10, 11, 12}, {13, 14, 5, 6, 7, 8}};
      const SequenceBatch a = batch_of({shortp}, c.decoder_only());
      const SequenceBatch b = batch_of({longp}, c.decoder_only());
      const SequenceBatch ab = batch_of({shortp, longp}, c.decoder_only());
      const double la = forward_loss(m, a, ForwardContext{}).mt_loss.item();
      const double lb = forward_loss(m, b, ForwardContext{}).mt_loss.item();
      const double lab = forward_loss(m, ab, ForwardContext{}).mt_loss.item();
      const double na = static_cast<double>(a.loss_positions()), nb = static_cast<double>(b.loss_positions());
      CAPTURE(kind_name(c));
      CHECK(lab == doctest::Approx((la * na + lb * nb) / (na + nb)).epsilon(1e-5));
    }
  }
  SUBCASE("evaluation passes are deterministic even with dropout configured") {
    ModelConfig c = small(EncoderKind::transformer, DecoderKind::s4a);
    c.dropout = 0.3f;
    const Model m = build_model(c, 13);
    const SequenceBatch batch = batch_of({{{5, 6, 7}, {8, 9}}}, false);
    CHECK(forward_loss(m, batch, ForwardContext{}).total.item() == forward_loss(m, batch, ForwardContext{}).total.item());
  }
}

TEST_CASE("encoder/target concatenation") {
  std::mt19937_64 rng(14);
  Tensor enc = Tensor::randn({2, 3, 4}, rng), tgt = Tensor::randn({2, 5, 4}, rng);
  const std::vector<std::size_t> lengths{3, 2};
  Tensor joined = concat_encoder_target(enc, lengths, tgt);
  CHECK(joined.shape() == Shape{2, 8, 4});
  // row 1: two encoder states, then the target, then one padding slot
  CHECK(max_abs_diff(joined.data().subspan(8 * 4 + 2 * 4, 5 * 4), tgt.data().subspan(5 * 4, 5 * 4)) == 0.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(joined.data()[8 * 4 + 7 * 4 + i] == 0.0f);

  const ModelConfig c = small(EncoderKind::s4, DecoderKind::s4);
  const Model m = build_model(c, 15);
  SUBCASE("an empty target still yields first-token logits") {
    const SequenceBatch batch = batch_of({{{5, 6, 7}, {}}}, false);
    const auto out = m.forward(batch, ForwardContext{});
    CHECK(out.logits.shape() == Shape{1, 1, c.vocab_size});
  }
  SUBCASE("source tokens reach the target logits") {
    const SequenceBatch a = batch_of({{{5, 6, 7}, {8, 9}}}, false);
    SequenceBatch b = a;
    b.src[0] = 12;
    CHECK(max_abs_diff(m.forward(a, ForwardContext{}).logits.data(), m.forward(b, ForwardContext{}).logits.data()) > 1e-4);
  }
}

TEST_CASE("S4A with a zeroed cross-attention output is a plain S4 layer") {
  Model m = build_model(small(EncoderKind::transformer, DecoderKind::s4a), 16);
  for (auto& c : m.mutable_decoder().s4[0].cross) {
    std::fill(c.attn.out.weight.data().begin(), c.attn.out.weight.data().end(), 0.0f);
    std::fill(c.attn.out.bias.data().begin(), c.attn.out.bias.data().end(), 0.0f);
  }
  const SequenceBatch batch = batch_of({{{5, 6, 7}, {8, 9, 10}}}, false);
  const auto with_cross = m.forward(batch, ForwardContext{});
  m.mutable_decoder().s4[0].cross.clear();
  const auto without = m.forward(batch, ForwardContext{});
  // post-norm: LN(LN(x)) differs from LN(x) only through the epsilon
  CHECK(max_abs_diff(with_cross.hidden.data(), without.hidden.data()) < 1e-4);
}

TEST_CASE("multihead attention") {
  std::mt19937_64 rng(17);
  ParamList params;
  const MultiheadAttention m = MultiheadAttention::init(8, 2, rng, params, "a");

  SUBCASE("identical keys average the values") {
    Tensor q = Tensor::randn({1, 3, 8}, rng), v = Tensor::randn({1, 4, 8}, rng);
    Tensor k({1, 4, 8});
    Tensor row = Tensor::randn({8}, rng);
    for (std::size_t t = 0; t < 4; ++t) std::copy(row.data().begin(), row.data().end(), k.data().begin() + t * 8);
    Tensor out = attend_projected(m, q, k, v, AttentionMask{});
    std::vector<float> mean(8, 0.0f);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 8; ++i) mean[i] += v.data()[t * 8 + i] / 4.0f;
    Tensor expect = m.out(Tensor({1, 1, 8}, mean));
    for (std::size_t t = 0; t < 3; ++t) CHECK(max_abs_diff(out.data().subspan(t * 8, 8), expect.data()) < 1e-5);
  }
  SUBCASE("a single key gets all the weight") {
    Tensor q = Tensor::randn({1, 3, 8}, rng), mem = Tensor::randn({1, 1, 8}, rng);
    Tensor out = multihead_attention(m, q, mem, AttentionMask{});
    Tensor expect = m.out(m.v(mem));
    for (std::size_t t = 0; t < 3; ++t) CHECK(max_abs_diff(out.data().subspan(t * 8, 8), expect.data()) < 1e-5);
  }
  SUBCASE("causal self-attention ignores later positions") {
    Tensor x = Tensor::randn({1, 5, 8}, rng);
    AttentionMask mask;
    mask.causal = true;
    Tensor a = multihead_attention(m, x, x, mask);
    Tensor y = x.clone();
    for (std::size_t i = 0; i < 8; ++i) y.data()[3 * 8 + i] += 1.0f;
    Tensor b = multihead_attention(m, y, y, mask);
    CHECK(max_abs_diff(a.data().subspan(0, 3 * 8), b.data().subspan(0, 3 * 8)) == 0.0);
    CHECK(max_abs_diff(a.data().subspan(3 * 8, 8), b.data().subspan(3 * 8, 8)) > 1e-4);
  }
  SUBCASE("one head is plain scaled dot-product attention") {
    ParamList p1;
    const MultiheadAttention one = MultiheadAttention::init(8, 1, rng, p1, "one");
    Tensor x = Tensor::randn({1, 3, 8}, rng), mem = Tensor::randn({1, 4, 8}, rng);
    Tensor out = multihead_attention(one, x, mem, AttentionMask{});
    Tensor q = one.q(x), k = one.k(mem), v = one.v(mem);
    std::vector<float> ctx(3 * 8, 0.0f);
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> s(4);
      double mx = -1e30, z = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < 8; ++c) dot += static_cast<double>(q.data()[i * 8 + c]) * k.data()[j * 8 + c];
        s[j] = dot / std::sqrt(8.0);
        mx = std::max(mx, s[j]);
      }
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t c = 0; c < 8; ++c) ctx[i * 8 + c] += static_cast<float>(s[j] / z * v.data()[j * 8 + c]);
    }
    Tensor expect = one.out(Tensor({1, 3, 8}, ctx));
    CHECK(max_abs_diff(out.data(), expect.data()) < 1e-5);
  }
}

TEST_CASE("Transformer logits are equivariant to vocabulary relabeling") {
  const ModelConfig c = small(EncoderKind::transformer, DecoderKind::transformer);
  const Model a = build_model(c, 18);
  Model b = build_model(c, 18);
  // permutation of content ids; reserved ids stay fixed
  std::vector<std::int32_t> perm(c.vocab_size);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(19);
  std::shuffle(perm.begin() + kReservedTokens, perm.end(), rng);
  Tensor table = *b.params().find("embed.shared");
  const Tensor orig = a.params().find("embed.shared")->clone();
  for (std::size_t i = 0; i < c.vocab_size; ++i)
    std::copy_n(orig.data().begin() + i * c.d_model, c.d_model, table.data().begin() + perm[i] * c.d_model);

  const SentencePair p{{5, 6, 7, 8}, {9, 10, 11}};
  SentencePair q;
  for (auto id : p.src) q.src.push_back(perm[id]);
  for (auto id : p.tgt) q.tgt.push_back(perm[id]);
  const auto la = a.forward(batch_of({p}, false), ForwardContext{}).logits;
  const auto lb = b.forward(batch_of({q}, false), ForwardContext{}).logits;
  const std::size_t v = c.vocab_size;
  for (std::size_t t = 0; t < la.dim(1); ++t)
    for (std::size_t i = 0; i < v; ++i) CHECK(std::abs(la.data()[t * v + i] - lb.data()[t * v + perm[i]]) < 1e-5);
}

TEST_CASE("tiny decoder-only model passes an end-to-end gradient check") {
  // float32 storage puts ~1e-5 of noise on each difference quotient; coordinates
  // below 1e-2 are compared in absolute terms
  const auto r = testing::tiny_model_grad_check(1e-2, 1e-2);
  CAPTURE(r.norm_rel);
  CAPTURE(r.coord_rel);
  CHECK(r.norm_rel < 1e-2);
  CHECK(r.coord_rel < 1e-2);
}
