#pragma once

// Multi-query associative recall: N (key, value) pairs followed by scattered
// queries of the same keys. A query position is answered correctly when the
// model emits the value bound to that key earlier in the sequence.

#include "latte/model/network.hpp"
#include "latte/rng.hpp"
#include "latte/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte::tasks {

struct MQARConfig {
  Index vocab_size = 64;
  Index seq_len = 64;
  Index num_pairs = 4;
  uint64_t seed = 0;
  long long train_examples = 100000;
  long long test_examples = 10000;

  // Token id layout: 0 is the filler, keys occupy [1, vocab/2), values the
  // upper half [vocab/2, vocab).
  Index filler_id() const { return 0; }
  Index key_lo() const { return 1; }
  Index key_hi() const { return vocab_size / 2; }
  Index value_lo() const { return vocab_size / 2; }
  Index value_hi() const { return vocab_size; }

  void validate() const {
    if (vocab_size < 4) throw std::invalid_argument("mqar vocab_size must be at least 4");
    if (num_pairs < 1) throw std::invalid_argument("mqar num_pairs must be positive");
    if (num_pairs > key_hi() - key_lo())
      throw std::invalid_argument("infeasible packing: " + std::to_string(num_pairs) +
                                  " distinct keys exceed the key alphabet");
    if (3 * num_pairs > seq_len)
      throw std::invalid_argument("infeasible packing: " + std::to_string(num_pairs) +
                                  " pairs plus queries do not fit in " +
                                  std::to_string(seq_len) + " tokens");
  }
};

struct MQARExample {
  std::vector<int32_t> tokens;
  std::vector<int32_t> targets;  // valid where mask is set
  std::vector<uint8_t> mask;
};

/// Example `index` of the stream defined by `cfg` (pure in (cfg, index)).
inline MQARExample generate_mqar(const MQARConfig& cfg, long long index) {
  cfg.validate();
  Rng rng(cfg.seed, static_cast<uint64_t>(index));
  const Index T = cfg.seq_len, N = cfg.num_pairs;

  MQARExample ex;
  ex.tokens.assign(static_cast<size_t>(T), static_cast<int32_t>(cfg.filler_id()));
  ex.targets.assign(static_cast<size_t>(T), 0);
  ex.mask.assign(static_cast<size_t>(T), 0);

  // Draw N distinct keys by partial Fisher-Yates over the key alphabet.
  std::vector<int32_t> alphabet;
  for (Index k = cfg.key_lo(); k < cfg.key_hi(); ++k)
    alphabet.push_back(static_cast<int32_t>(k));
  std::vector<int32_t> keys(static_cast<size_t>(N)), values(static_cast<size_t>(N));
  for (Index i = 0; i < N; ++i) {
    const uint64_t j = i + rng.next_below(static_cast<uint64_t>(alphabet.size() - i));
    std::swap(alphabet[static_cast<size_t>(i)], alphabet[static_cast<size_t>(j)]);
    keys[static_cast<size_t>(i)] = alphabet[static_cast<size_t>(i)];
    values[static_cast<size_t>(i)] = static_cast<int32_t>(
        cfg.value_lo() + rng.next_below(static_cast<uint64_t>(cfg.value_hi() - cfg.value_lo())));
  }

  // Pair block, then one query per pair at distinct random later positions.
  for (Index i = 0; i < N; ++i) {
    ex.tokens[static_cast<size_t>(2 * i)] = keys[static_cast<size_t>(i)];
    ex.tokens[static_cast<size_t>(2 * i + 1)] = values[static_cast<size_t>(i)];
  }
  std::vector<Index> free_pos;
  for (Index t = 2 * N; t < T; ++t) free_pos.push_back(t);
  for (Index i = 0; i < N; ++i) {
    const uint64_t j = i + rng.next_below(static_cast<uint64_t>(free_pos.size() - i));
    std::swap(free_pos[static_cast<size_t>(i)], free_pos[static_cast<size_t>(j)]);
    const Index q = free_pos[static_cast<size_t>(i)];
    ex.tokens[static_cast<size_t>(q)] = keys[static_cast<size_t>(i)];
    ex.targets[static_cast<size_t>(q)] = values[static_cast<size_t>(i)];
    ex.mask[static_cast<size_t>(q)] = 1;
  }
  return ex;
}

/// Structural invariant: every masked target equals the value bound to the most
/// recent earlier occurrence of the queried key.
inline bool mqar_example_consistent(const MQARConfig& cfg, const MQARExample& ex) {
  const Index T = cfg.seq_len;
  if (ex.tokens.size() != static_cast<size_t>(T) || ex.mask.size() != static_cast<size_t>(T))
    return false;
  Index n_queries = 0;
  for (Index t = 0; t < T; ++t) {
    if (!ex.mask[static_cast<size_t>(t)]) continue;
    ++n_queries;
    const int32_t key = ex.tokens[static_cast<size_t>(t)];
    if (key < cfg.key_lo() || key >= cfg.key_hi()) return false;
    int32_t bound = -1;
    for (Index s = 0; s < t; ++s)
      if (ex.tokens[static_cast<size_t>(s)] == key && s + 1 < T &&
          ex.tokens[static_cast<size_t>(s + 1)] >= cfg.value_lo() &&
          ex.tokens[static_cast<size_t>(s + 1)] < cfg.value_hi() && !ex.mask[static_cast<size_t>(s)])
        bound = ex.tokens[static_cast<size_t>(s + 1)];
    if (bound != ex.targets[static_cast<size_t>(t)]) return false;
  }
  return n_queries == cfg.num_pairs;
}

/// Batch of consecutive stream examples [first, first + batch_size).
inline model::TokenBatch mqar_batch(const MQARConfig& cfg, long long first, Index batch_size) {
  model::TokenBatch batch{Tensor<int32_t>({batch_size, cfg.seq_len}),
                          Tensor<int32_t>({batch_size, cfg.seq_len}),
                          Tensor<uint8_t>({batch_size, cfg.seq_len})};
  for (Index b = 0; b < batch_size; ++b) {
    const MQARExample ex = generate_mqar(cfg, first + b);
    for (Index t = 0; t < cfg.seq_len; ++t) {
      batch.tokens(b, t) = ex.tokens[static_cast<size_t>(t)];
      batch.targets(b, t) = ex.targets[static_cast<size_t>(t)];
      batch.mask(b, t) = ex.mask[static_cast<size_t>(t)];
    }
  }
  return batch;
}

/// Query hits and totals for one batch of logits (argmax over the vocabulary).
template <typename ScalarT>
void count_mqar_hits(const Tensor<ScalarT>& logits, const model::TokenBatch& batch,
                     long long& hits, long long& total) {
  const Index B = batch.tokens.extent(0), T = batch.tokens.extent(1);
  const Index V = logits.extent(2);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t) {
      if (!batch.mask(b, t)) continue;
      Index best = 0;
      for (Index v = 1; v < V; ++v)
        if (logits(b, t, v) > logits(b, t, best)) best = v;
      hits += best == batch.targets(b, t) ? 1 : 0;
      ++total;
    }
}

/// Fraction of query positions whose argmax logit equals the bound value.
template <typename ScalarT>
double evaluate_mqar(const model::ParameterStore<ScalarT>& params, const model::ModelConfig& model_cfg,
                     const std::vector<model::TokenBatch>& batches) {
  long long hits = 0, total = 0;
  for (const auto& batch : batches) {
    const model::EvalOutput<ScalarT> out = model::evaluate_batch(params, model_cfg, batch);
    count_mqar_hits(out.logits, batch, hits, total);
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

/// Test-set batches drawn from the tail of the stream, after train_examples.
inline std::vector<model::TokenBatch> mqar_test_set(const MQARConfig& cfg, long long n_examples,
                                                    Index batch_size) {
  std::vector<model::TokenBatch> out;
  for (long long first = 0; first < n_examples; first += batch_size) {
    const Index n = static_cast<Index>(std::min<long long>(batch_size, n_examples - first));
    out.push_back(mqar_batch(cfg, cfg.train_examples + first, n));
  }
  return out;
}

}  // namespace latte::tasks
