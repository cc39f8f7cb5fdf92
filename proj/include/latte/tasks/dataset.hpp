#pragma once

// On-disk cache for generated token datasets: a digest header identifying the
// generating configuration, then packed tokens, targets, and the target mask.

#include "latte/model/network.hpp"
#include "latte/tensor.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte::tasks {

namespace detail {

inline constexpr char kDatasetMagic[6] = {'L', 'A', 'T', 'D', '1', '\n'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated dataset file");
  return v;
}

}  // namespace detail

/// Examples stacked into one (n, seq_len) block plus the generator digest.
struct TokenDataset {
  std::string digest;
  Tensor<int32_t> tokens;
  Tensor<int32_t> targets;
  Tensor<uint8_t> mask;

  Index size() const { return tokens.rank() == 2 ? tokens.extent(0) : 0; }
  Index seq_len() const { return tokens.rank() == 2 ? tokens.extent(1) : 0; }

  model::TokenBatch slice(Index first, Index count) const {
    if (first < 0 || first + count > size()) throw std::out_of_range("dataset slice out of range");
    const Index T = seq_len();
    model::TokenBatch b{Tensor<int32_t>({count, T}), Tensor<int32_t>({count, T}),
                        Tensor<uint8_t>({count, T})};
    for (Index i = 0; i < count; ++i)
      for (Index t = 0; t < T; ++t) {
        b.tokens(i, t) = tokens(first + i, t);
        b.targets(i, t) = targets(first + i, t);
        b.mask(i, t) = mask(first + i, t);
      }
    return b;
  }
};

inline TokenDataset dataset_from_batches(const std::string& digest,
                                         const std::vector<model::TokenBatch>& batches) {
  Index n = 0, T = 0;
  for (const auto& b : batches) {
    n += b.tokens.extent(0);
    T = b.tokens.extent(1);
  }
  TokenDataset d{digest, Tensor<int32_t>({n, T}), Tensor<int32_t>({n, T}), Tensor<uint8_t>({n, T})};
  Index row = 0;
  for (const auto& b : batches) {
    for (Index i = 0; i < b.tokens.extent(0); ++i, ++row)
      for (Index t = 0; t < T; ++t) {
        d.tokens(row, t) = b.tokens(i, t);
        d.targets(row, t) = b.targets(i, t);
        d.mask(row, t) = b.mask(i, t);
      }
  }
  return d;
}

inline void save_dataset(const std::string& path, const TokenDataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset: " + path);
  out.write(detail::kDatasetMagic, sizeof(detail::kDatasetMagic));
  detail::write_pod(out, static_cast<uint64_t>(d.digest.size()));
  out.write(d.digest.data(), static_cast<std::streamsize>(d.digest.size()));
  detail::write_pod(out, static_cast<int64_t>(d.size()));
  detail::write_pod(out, static_cast<int64_t>(d.seq_len()));
  out.write(reinterpret_cast<const char*>(d.tokens.data()),
            static_cast<std::streamsize>(sizeof(int32_t) * d.tokens.size()));
  out.write(reinterpret_cast<const char*>(d.targets.data()),
            static_cast<std::streamsize>(sizeof(int32_t) * d.targets.size()));
  out.write(reinterpret_cast<const char*>(d.mask.data()),
            static_cast<std::streamsize>(d.mask.size()));
  if (!out) throw std::runtime_error("failed writing dataset: " + path);
}

inline TokenDataset load_dataset(const std::string& path, const std::string& expected_digest = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  char magic[sizeof(detail::kDatasetMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + sizeof(magic), detail::kDatasetMagic))
    throw std::runtime_error("not a latte dataset: " + path);
  const uint64_t dlen = detail::read_pod<uint64_t>(in);
  std::string digest(dlen, '\0');
  in.read(digest.data(), static_cast<std::streamsize>(dlen));
  if (!in) throw std::runtime_error("truncated dataset file");
  if (!expected_digest.empty() && digest != expected_digest)
    throw std::runtime_error("dataset digest mismatch: file has " + digest + ", expected " +
                             expected_digest);
  const Index n = static_cast<Index>(detail::read_pod<int64_t>(in));
  const Index T = static_cast<Index>(detail::read_pod<int64_t>(in));
  if (n < 0 || T <= 0) throw std::runtime_error("corrupt dataset dimensions");
  TokenDataset d{digest, Tensor<int32_t>({n, T}), Tensor<int32_t>({n, T}), Tensor<uint8_t>({n, T})};
  in.read(reinterpret_cast<char*>(d.tokens.data()),
          static_cast<std::streamsize>(sizeof(int32_t) * d.tokens.size()));
  in.read(reinterpret_cast<char*>(d.targets.data()),
          static_cast<std::streamsize>(sizeof(int32_t) * d.targets.size()));
  in.read(reinterpret_cast<char*>(d.mask.data()), static_cast<std::streamsize>(d.mask.size()));
  if (!in) throw std::runtime_error("truncated dataset file");
  return d;
}

}  // namespace latte::tasks
