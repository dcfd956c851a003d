#pragma once

#include <string>
#include <utility>

#include "helpers.hpp"
#include "s4mt/data.hpp"
#include "s4mt/model.hpp"
#include "s4mt/ssm.hpp"

namespace testing {

struct GradCase {
  std::string name;
  double eps;
  std::function<GradCheckResult()> run;
};

// Inputs for kinked ops stay at least 0.3 away from the kink.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  for (float& v : t.data()) v = v >= 0 ? v + 0.3f : v - 0.3f;
  return t;
}

inline std::vector<GradCase> primitive_grad_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, double eps, std::function<GradCheckResult(double)> fn) {
    cases.push_back({std::move(name), eps, [fn, eps] { return fn(eps); }});
  };
  add_case("add", 1e-2, [](double eps) {
    std::mt19937_64 rng(1);
    Tensor a = Tensor::randn({3, 4}, rng), b = Tensor::randn({3, 4}, rng);
    return grad_check({a, b}, [&] { return weighted_sum(add(a, b)); }, eps);
  });
  add_case("sub", 1e-2, [](double eps) {
    std::mt19937_64 rng(2);
    Tensor a = Tensor::randn({3, 4}, rng), b = Tensor::randn({3, 4}, rng);
    return grad_check({a, b}, [&] { return weighted_sum(sub(a, b)); }, eps);
  });
  add_case("mul", 1e-2, [](double eps) {
    std::mt19937_64 rng(3);
    Tensor a = Tensor::randn({3, 4}, rng), b = Tensor::randn({3, 4}, rng);
    return grad_check({a, b}, [&] { return weighted_sum(mul(a, b)); }, eps);
  });
  add_case("scale", 1e-2, [](double eps) {
    std::mt19937_64 rng(4);
    Tensor a = Tensor::randn({5}, rng);
    return grad_check({a}, [&] { return weighted_sum(scale(a, -1.7f)); }, eps);
  });
  add_case("add_bias", 1e-2, [](double eps) {
    std::mt19937_64 rng(5);
    Tensor x = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({4}, rng);
    return grad_check({x, b}, [&] { return weighted_sum(add_bias(x, b)); }, eps);
  });
  add_case("matmul", 1e-3, [](double eps) {
    std::mt19937_64 rng(6);
    Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({4, 5}, rng);
    return grad_check({a, b}, [&] { return weighted_sum(matmul(a, b)); }, eps);
  });
  add_case("matmul_transposed", 1e-3, [](double eps) {
    std::mt19937_64 rng(7);
    Tensor a = Tensor::randn({3, 4}, rng), b = Tensor::randn({5, 4}, rng);
    return grad_check({a, b}, [&] { return weighted_sum(matmul(a, b, true)); }, eps);
  });
  add_case("batched_matmul", 1e-3, [](double eps) {
    std::mt19937_64 rng(8);
    Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({2, 4, 5}, rng), c = Tensor::randn({2, 5, 4}, rng);
    return grad_check({a, b, c},
                      [&] { return add(weighted_sum(batched_matmul(a, b)), weighted_sum(batched_matmul(a, c, true))); },
                      eps);
  });
  add_case("linear", 1e-3, [](double eps) {
    std::mt19937_64 rng(9);
    Tensor x = Tensor::randn({2, 3, 4}, rng), w = Tensor::randn({4, 5}, rng), b = Tensor::randn({5}, rng);
    return grad_check({x, w, b}, [&] { return weighted_sum(linear(x, w, b)); }, eps);
  });
  add_case("reshape", 1e-2, [](double eps) {
    std::mt19937_64 rng(10);
    Tensor x = Tensor::randn({2, 6}, rng);
    return grad_check({x}, [&] { return weighted_sum(reshape(x, {3, 4})); }, eps);
  });
  add_case("softmax", 1e-2, [](double eps) {
    std::mt19937_64 rng(11);
    Tensor x = Tensor::randn({3, 5}, rng);
    return grad_check({x}, [&] { return add(weighted_sum(softmax(x, 1)), weighted_sum(softmax(x, 0), 7)); }, eps);
  });
  add_case("masked_softmax", 1e-2, [](double eps) {
    std::mt19937_64 rng(12);
    Tensor x = Tensor::randn({4, 3, 4}, rng);
    AttentionMask m;
    m.heads = 2;
    m.key_lengths = {4, 2};
    m.causal = true;
    m.query_offset = 1;
    return grad_check({x}, [&] { return weighted_sum(masked_softmax(x, m)); }, eps);
  });
  add_case("layer_norm", 1e-2, [](double eps) {
    std::mt19937_64 rng(13);
    Tensor x = Tensor::randn({4, 8}, rng), g = Tensor::randn({8}, rng), b = Tensor::randn({8}, rng);
    return grad_check({x, g, b}, [&] { return weighted_sum(layer_norm(x, g, b)); }, eps);
  });
  add_case("gelu", 1e-2, [](double eps) {
    std::mt19937_64 rng(14);
    Tensor x = Tensor::randn({10}, rng, 2.0f);
    return grad_check({x}, [&] { return weighted_sum(gelu(x)); }, eps);
  });
  add_case("relu", 1e-2, [](double eps) {
    std::mt19937_64 rng(15);
    Tensor x = away_from_zero({10}, rng);
    return grad_check({x}, [&] { return weighted_sum(relu(x)); }, eps);
  });
  add_case("sigmoid", 1e-2, [](double eps) {
    std::mt19937_64 rng(16);
    Tensor x = Tensor::randn({10}, rng, 2.0f);
    return grad_check({x}, [&] { return weighted_sum(sigmoid(x)); }, eps);
  });
  add_case("glu", 1e-2, [](double eps) {
    std::mt19937_64 rng(17);
    Tensor x = Tensor::randn({3, 6}, rng);
    return grad_check({x}, [&] { return weighted_sum(glu(x)); }, eps);
  });
  add_case("dropout", 1e-2, [](double eps) {
    std::mt19937_64 rng(18);
    Tensor x = Tensor::randn({4, 5}, rng);
    return grad_check({x},
                      [&] {
                        std::mt19937_64 mask_rng(5);  // same mask on every evaluation
                        return weighted_sum(dropout(x, 0.3f, mask_rng, true));
                      },
                      eps);
  });
  add_case("embedding", 1e-2, [](double eps) {
    std::mt19937_64 rng(19);
    Tensor table = Tensor::randn({6, 4}, rng);
    const std::vector<std::int32_t> ids{1, 0, 3, 3, 5, 2};
    return grad_check({table}, [&] { return weighted_sum(embedding(table, ids, {2, 3})); }, eps);
  });
  add_case("concat_time", 1e-2, [](double eps) {
    std::mt19937_64 rng(20);
    Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({2, 2, 4}, rng);
    return grad_check({a, b}, [&] { return weighted_sum(concat_time(a, b)); }, eps);
  });
  add_case("slice_time", 1e-2, [](double eps) {
    std::mt19937_64 rng(21);
    Tensor x = Tensor::randn({2, 5, 3}, rng);
    return grad_check({x}, [&] { return weighted_sum(slice_time(x, 1, 3)); }, eps);
  });
  add_case("reverse_time", 1e-2, [](double eps) {
    std::mt19937_64 rng(22);
    Tensor x = Tensor::randn({2, 4, 3}, rng);
    const std::vector<std::size_t> lengths{3, 2};
    return grad_check({x}, [&] { return weighted_sum(reverse_time(x, lengths)); }, eps);
  });
  add_case("pack_concat", 1e-2, [](double eps) {
    std::mt19937_64 rng(23);
    Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({2, 2, 4}, rng);
    const std::vector<std::size_t> lengths{2, 3};
    return grad_check({a, b}, [&] { return weighted_sum(pack_concat(a, lengths, b)); }, eps);
  });
  add_case("gather_segment", 1e-2, [](double eps) {
    std::mt19937_64 rng(24);
    Tensor x = Tensor::randn({2, 5, 3}, rng);
    const std::vector<std::size_t> offsets{1, 2};
    return grad_check({x}, [&] { return weighted_sum(gather_segment(x, offsets, 3)); }, eps);
  });
  add_case("split_merge_heads", 1e-2, [](double eps) {
    std::mt19937_64 rng(25);
    Tensor x = Tensor::randn({2, 3, 4}, rng), y = Tensor::randn({4, 3, 2}, rng);
    return grad_check({x, y}, [&] { return add(weighted_sum(split_heads(x, 2)), weighted_sum(merge_heads(y, 2), 3)); },
                      eps);
  });
  // lengths above 256 take the FFT path, shorter ones the direct sum
  add_case("fft_causal_conv", 1e-2, [](double eps) {
    std::mt19937_64 rng(26);
    Tensor u = Tensor::randn({2, 270, 1}, rng), k = Tensor::randn({270, 1}, rng, 0.1f);
    return grad_check({u, k}, [&] { return weighted_sum(fft_causal_conv(u, k)); }, eps);
  });
  add_case("causal_conv_direct", 1e-2, [](double eps) {
    std::mt19937_64 rng(27);
    Tensor u = Tensor::randn({2, 20, 11}, rng), k = Tensor::randn({20, 11}, rng, 0.3f);
    return grad_check({u, k}, [&] { return weighted_sum(fft_causal_conv(u, k)); }, eps);
  });
  add_case("cross_entropy", 1e-2, [](double eps) {
    std::mt19937_64 rng(28);
    Tensor logits = Tensor::randn({5, 6}, rng);
    const std::vector<std::int32_t> targets{0, 5, 2, 2, 1};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
    return grad_check({logits}, [&] { return cross_entropy(logits, targets, mask); }, eps);
  });
  add_case("solve", 1e-3, [](double eps) {
    std::mt19937_64 rng(29);
    Tensor m = Tensor::randn({2, 3, 3}, rng, 0.3f), rhs = Tensor::randn({2, 3, 2}, rng);
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t i = 0; i < 3; ++i) m.data()[g * 9 + i * 4] += 3.0f;
    return grad_check({m, rhs}, [&] { return weighted_sum(solve(m, rhs)); }, eps);
  });
  add_case("discretize_bilinear", 1e-3, [](double eps) {
    std::mt19937_64 rng(30);
    const std::size_t n = 4;
    const auto h = ssm::hippo_legs(n);
    Tensor a({1, n, n}), b = Tensor::randn({1, n, 1}, rng);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        a.data()[r * n + c] = static_cast<float>(h(static_cast<long>(r), static_cast<long>(c)));
    return grad_check({a, b},
                      [&] {
                        auto d = ssm::discretize_bilinear(a, b, 1.0f);
                        return add(weighted_sum(d.a_bar), weighted_sum(d.b_bar, 4));
                      },
                      eps);
  });
  add_case("materialize_kernel", 1e-3, [](double eps) {
    std::mt19937_64 rng(31);
    const std::size_t n = 8, len = 16;
    const auto h = ssm::hippo_legs(n);
    Tensor a({1, n, n}), b = Tensor::randn({1, n, 1}, rng), c = Tensor::randn({3, n}, rng);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < n; ++k)
        a.data()[r * n + k] = static_cast<float>(h(static_cast<long>(r), static_cast<long>(k)));
    return grad_check({a, b, c},
                      [&] {
                        auto d = ssm::discretize_bilinear(a, b, 1.0f);
                        return weighted_sum(ssm::materialize_kernel(d.a_bar, d.b_bar, c, len));
                      },
                      eps);
  });
  return cases;
}

// Tiny decoder-only S4 model (d=8, N=4, B=2, one layer) on stream length 5.
inline ModelConfig tiny_s4_config() {
  ModelConfig cfg;
  cfg.encoder_kind = EncoderKind::none;
  cfg.decoder_kind = DecoderKind::s4;
  cfg.decoder_layers = 1;
  cfg.blocks_per_layer = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.n_heads = 2;
  cfg.state_dim = 4;
  cfg.vocab_size = kReservedTokens + 6;
  cfg.dropout = 0.0f;
  return cfg;
}

inline GradCheckResult tiny_model_grad_check(double eps = 1e-2, double floor = 1e-3) {
  Model model = build_model(tiny_s4_config(), 7);
  // [BOS s EOS SEP t EOS] -> five decoder inputs per row
  SentencePair p1{{5}, {7}}, p2{{9}, {6}};
  std::vector<const SentencePair*> rows{&p1, &p2};
  const SequenceBatch batch = make_batch(rows, true);
  std::vector<Tensor> params;
  for (auto& [name, t] : model.params().items()) params.push_back(t);
  return grad_check(params, [&] { return forward_loss(model, batch, ForwardContext{}).total; }, eps, floor);
}

}  // namespace testing
