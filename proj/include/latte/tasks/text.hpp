#pragma once

// Byte-level language modeling on small corpora: chunked next-byte batches,
// perplexity evaluation, and a length-extrapolation sweep.

#include "latte/model/network.hpp"
#include "latte/rng.hpp"
#include "latte/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte::tasks {

/// Whole file as raw bytes. Rejects unreadable and empty files.
inline std::vector<uint8_t> load_text_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::runtime_error("empty corpus: " + path);
  return bytes;
}

/// Deterministic pseudo-text: sentences over a small lexicon with skewed word
/// frequencies. Gives a tiny model enough byte-level structure to compress.
inline std::vector<uint8_t> synthetic_corpus(size_t n_bytes, uint64_t seed) {
  static const char* kWords[] = {
      "the",   "a",     "of",     "and",   "to",    "in",     "stream", "latent", "window",
      "state", "value", "query",  "key",   "gate",  "scan",   "head",   "token",  "model",
      "mix",   "decay", "attend", "local", "long",  "short",  "past",   "trace",  "signal",
      "noise", "drift", "weight", "layer", "recall"};
  constexpr size_t kNumWords = sizeof(kWords) / sizeof(kWords[0]);
  Rng rng(seed);
  std::vector<uint8_t> out;
  out.reserve(n_bytes + 16);
  size_t sentence_left = 4 + rng.next_below(8);
  while (out.size() < n_bytes) {
    // Squared uniform skews the draw toward low indices.
    const double u = rng.next_uniform();
    const size_t w = static_cast<size_t>(u * u * kNumWords) % kNumWords;
    for (const char* c = kWords[w]; *c; ++c) out.push_back(static_cast<uint8_t>(*c));
    if (--sentence_left == 0) {
      out.push_back('.');
      sentence_left = 4 + rng.next_below(8);
    }
    out.push_back(' ');
  }
  out.resize(n_bytes);
  return out;
}

/// Number of exact seq_len chunks in the corpus (no padding; tail dropped).
inline Index chunk_count(const std::vector<uint8_t>& bytes, Index seq_len) {
  if (seq_len <= 0) throw std::invalid_argument("seq_len must be positive");
  return static_cast<Index>(bytes.size()) / seq_len;
}

/// Chunk `index` as tokens; targets are the next byte within the chunk, so the
/// final position carries no supervision.
inline void fill_text_chunk(const std::vector<uint8_t>& bytes, Index seq_len, Index index,
                            model::TokenBatch& batch, Index row) {
  const Index n = chunk_count(bytes, seq_len);
  if (index < 0 || index >= n)
    throw std::out_of_range("chunk index " + std::to_string(index) + " outside corpus of " +
                            std::to_string(n));
  const size_t base = static_cast<size_t>(index) * static_cast<size_t>(seq_len);
  for (Index t = 0; t < seq_len; ++t) {
    batch.tokens(row, t) = static_cast<int32_t>(bytes[base + static_cast<size_t>(t)]);
    const bool last = t + 1 == seq_len;
    batch.targets(row, t) = last ? 0 : static_cast<int32_t>(bytes[base + static_cast<size_t>(t) + 1]);
    batch.mask(row, t) = last ? 0 : 1;
  }
}

/// Training batch: chunks sampled uniformly, pure in (seed, step).
inline model::TokenBatch text_train_batch(const std::vector<uint8_t>& bytes, Index seq_len,
                                          Index batch_size, uint64_t seed, long long step) {
  const Index n = chunk_count(bytes, seq_len);
  if (n == 0) throw std::runtime_error("corpus shorter than one sequence");
  Rng rng(seed, static_cast<uint64_t>(step));
  model::TokenBatch batch{Tensor<int32_t>({batch_size, seq_len}),
                          Tensor<int32_t>({batch_size, seq_len}),
                          Tensor<uint8_t>({batch_size, seq_len})};
  for (Index b = 0; b < batch_size; ++b)
    fill_text_chunk(bytes, seq_len, static_cast<Index>(rng.next_below(static_cast<uint64_t>(n))),
                    batch, b);
  return batch;
}

/// Sequential evaluation batches over chunk range [first, first + count).
inline std::vector<model::TokenBatch> text_eval_batches(const std::vector<uint8_t>& bytes,
                                                        Index seq_len, Index first, Index count,
                                                        Index batch_size) {
  const Index n = chunk_count(bytes, seq_len);
  if (first < 0 || first + count > n)
    throw std::out_of_range("eval chunk range [" + std::to_string(first) + ", " +
                            std::to_string(first + count) + ") outside corpus of " +
                            std::to_string(n));
  std::vector<model::TokenBatch> out;
  for (Index start = 0; start < count; start += batch_size) {
    const Index rows = std::min(batch_size, count - start);
    model::TokenBatch batch{Tensor<int32_t>({rows, seq_len}), Tensor<int32_t>({rows, seq_len}),
                            Tensor<uint8_t>({rows, seq_len})};
    for (Index b = 0; b < rows; ++b) fill_text_chunk(bytes, seq_len, first + start + b, batch, b);
    out.push_back(std::move(batch));
  }
  return out;
}

/// Byte-level perplexity: exp of the token-weighted mean cross entropy.
template <typename ScalarT>
double text_perplexity(const model::ParameterStore<ScalarT>& params, const model::ModelConfig& cfg,
                       const std::vector<model::TokenBatch>& batches) {
  double total_nll = 0;
  long long total_tokens = 0;
  for (const auto& batch : batches) {
    const double loss = model::evaluate_batch(params, cfg, batch).loss;
    long long m = 0;
    for (Index i = 0; i < batch.mask.size(); ++i) m += batch.mask[i] ? 1 : 0;
    total_nll += loss * static_cast<double>(m);
    total_tokens += m;
  }
  if (total_tokens == 0) throw std::runtime_error("perplexity over zero supervised tokens");
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

struct LengthPpl {
  Index len = 0;
  double ppl = 0;
};

/// Perplexity at each evaluation length on held-out chunks. Lengths shorter
/// than the training length are rejected; models with a learned position table
/// surface their own error when the length exceeds the table.
template <typename ScalarT>
std::vector<LengthPpl> length_extrapolation_eval(const model::ParameterStore<ScalarT>& params,
                                                 const model::ModelConfig& cfg,
                                                 const std::vector<uint8_t>& held_out,
                                                 Index train_len, const std::vector<Index>& eval_lens,
                                                 Index batch_size = 8, Index max_chunks = 64) {
  std::vector<LengthPpl> rows;
  for (Index len : eval_lens) {
    if (len < train_len)
      throw std::invalid_argument("eval length " + std::to_string(len) +
                                  " shorter than training length " + std::to_string(train_len));
    const Index count = std::min(max_chunks, chunk_count(held_out, len));
    if (count == 0)
      throw std::runtime_error("held-out corpus shorter than one sequence of " + std::to_string(len));
    rows.push_back({len, text_perplexity(params, cfg, text_eval_batches(held_out, len, 0, count,
                                                                        batch_size))});
  }
  return rows;
}

}  // namespace latte::tasks
