#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace s4mt {

// Reserved vocabulary ids shared by every task.
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kSep = 3;
inline constexpr std::int32_t kUnk = 4;
inline constexpr std::int32_t kReservedTokens = 5;

// Padded, teacher-forced training batch.
//
// Decoder-only rows hold the stream [BOS src EOS SEP tgt EOS]; tgt_in is the
// stream without its last token and tgt_out without its first. Encoder-decoder
// rows hold src = [src EOS], tgt_in = [BOS tgt], tgt_out = [tgt EOS].
// Matrices are row-major [batch_size, time]; padding is always on the right.
struct SequenceBatch {
  bool decoder_only = true;
  std::size_t batch_size = 0;

  std::size_t tgt_time = 0;
  std::vector<std::int32_t> tgt_in;
  std::vector<std::int32_t> tgt_out;
  std::vector<std::size_t> tgt_lengths;   // unpadded decoder-stream length per row
  std::vector<std::uint8_t> pad_mask;     // 1 on real decoder positions
  std::vector<std::uint8_t> loss_mask;    // 1 where tgt_out is a target token or the final EOS
  std::vector<std::uint8_t> ae_mask;      // decoder-only: 1 where tgt_out is a source token
  std::vector<std::size_t> sep_positions; // decoder-only: index of SEP in tgt_in

  std::size_t src_time = 0;
  std::vector<std::int32_t> src;          // encoder-decoder only
  std::vector<std::size_t> src_lengths;   // source tokens per row (EOS included for encoders)

  std::size_t padded_tokens() const { return batch_size * (tgt_time + src_time); }
  std::size_t loss_positions() const;
};

}  // namespace s4mt
