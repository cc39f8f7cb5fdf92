#pragma once

// Checkpoint container: magic, endianness marker, canonical config text plus
// its digest, then a tensor manifest (name, dtype, shape, payload offset) and
// raw little-endian payloads. Optimizer moments ride along as ordinary
// tensors under opt.m. / opt.v. prefixes.

#include "latte/model/config.hpp"
#include "latte/model/param_store.hpp"
#include "latte/model/train.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte::model {

namespace detail {

inline constexpr char kCheckpointMagic[6] = {'L', 'A', 'T', 'T', 'E', '1'};
inline constexpr uint32_t kEndianMarker = 0x01020304u;

template <typename S>
constexpr uint8_t dtype_code();
template <>
constexpr uint8_t dtype_code<float>() {
  return 0;
}
template <>
constexpr uint8_t dtype_code<double>() {
  return 1;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const uint32_t n = read_pod<uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return s;
}

inline std::string canonical_config_text(const ModelConfig& cfg) {
  std::string text;
  for (const auto& [k, v] : cfg.fields()) text += k + "=" + v + "\n";
  return text;
}

}  // namespace detail

template <typename ScalarT>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParameterStore<ScalarT>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod<uint32_t>(out, detail::kEndianMarker);
  detail::write_string(out, cfg.digest());
  detail::write_string(out, detail::canonical_config_text(cfg));
  detail::write_pod<uint64_t>(out, static_cast<uint64_t>(tensors.size()));
  uint64_t offset = 0;
  for (const auto& name : tensors.names()) {
    const Tensor<ScalarT>& t = tensors.at(name);
    detail::write_string(out, name);
    detail::write_pod<uint8_t>(out, detail::dtype_code<ScalarT>());
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (Index i = 0; i < t.rank(); ++i) detail::write_pod<int64_t>(out, t.extent(i));
    detail::write_pod<uint64_t>(out, offset);
    offset += static_cast<uint64_t>(t.size()) * sizeof(ScalarT);
  }
  for (const auto& name : tensors.names()) {
    const Tensor<ScalarT>& t = tensors.at(name);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(ScalarT)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

template <typename ScalarT>
struct Checkpoint {
  ModelConfig cfg;
  ParameterStore<ScalarT> tensors;
};

template <typename ScalarT>
Checkpoint<ScalarT> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[sizeof(detail::kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a latte checkpoint: " + path);
  if (detail::read_pod<uint32_t>(in) != detail::kEndianMarker)
    throw std::runtime_error("checkpoint endianness does not match this machine");
  const std::string digest = detail::read_string(in);
  const std::string config_text = detail::read_string(in);

  Checkpoint<ScalarT> ck;
  ck.cfg = parse_config_text(config_text);
  if (ck.cfg.digest() != digest)
    throw std::runtime_error("checkpoint config digest mismatch");

  struct Entry {
    std::string name;
    std::vector<Index> shape;
    uint64_t offset;
  };
  const uint64_t count = detail::read_pod<uint64_t>(in);
  std::vector<Entry> entries;
  entries.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = detail::read_string(in);
    const uint8_t dtype = detail::read_pod<uint8_t>(in);
    if (dtype != detail::dtype_code<ScalarT>())
      throw std::runtime_error("checkpoint dtype mismatch for tensor " + e.name);
    const uint32_t rank = detail::read_pod<uint32_t>(in);
    for (uint32_t r = 0; r < rank; ++r)
      e.shape.push_back(static_cast<Index>(detail::read_pod<int64_t>(in)));
    e.offset = detail::read_pod<uint64_t>(in);
    entries.push_back(std::move(e));
  }
  const std::streampos payload_start = in.tellg();
  for (const auto& e : entries) {
    Tensor<ScalarT> t(e.shape);
    in.seekg(payload_start + static_cast<std::streamoff>(e.offset));
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(ScalarT)));
    if (!in) throw std::runtime_error("truncated checkpoint payload for " + e.name);
    ck.tensors.add(e.name, std::move(t));
  }
  return ck;
}

// Bundles parameters and optimizer state into one store for checkpointing.
template <typename ScalarT>
ParameterStore<ScalarT> pack_training_state(const ParameterStore<ScalarT>& params,
                                            const AdamState<ScalarT>& opt) {
  ParameterStore<ScalarT> all;
  for (const auto& name : params.names()) all.add(name, params.at(name));
  for (const auto& name : opt.m.names()) all.add("opt.m." + name, opt.m.at(name));
  for (const auto& name : opt.v.names()) all.add("opt.v." + name, opt.v.at(name));
  Tensor<ScalarT> step({1});
  step[0] = static_cast<ScalarT>(opt.step);
  all.add("opt.step", std::move(step));
  return all;
}

template <typename ScalarT>
void unpack_training_state(const ParameterStore<ScalarT>& all, ParameterStore<ScalarT>& params,
                           AdamState<ScalarT>& opt) {
  ParameterStore<ScalarT> p, m, v;
  long long step = 0;
  for (const auto& name : all.names()) {
    if (name == "opt.step")
      step = static_cast<long long>(all.at(name)[0]);
    else if (name.rfind("opt.m.", 0) == 0)
      m.add(name.substr(6), all.at(name));
    else if (name.rfind("opt.v.", 0) == 0)
      v.add(name.substr(6), all.at(name));
    else
      p.add(name, all.at(name));
  }
  params = std::move(p);
  opt.m = std::move(m);
  opt.v = std::move(v);
  opt.step = step;
}

// Parameters only (no optimizer state), as used by eval and diagnose.
template <typename ScalarT>
ParameterStore<ScalarT> strip_optimizer_state(const ParameterStore<ScalarT>& all) {
  ParameterStore<ScalarT> p;
  for (const auto& name : all.names())
    if (name != "opt.step" && name.rfind("opt.m.", 0) != 0 && name.rfind("opt.v.", 0) != 0)
      p.add(name, all.at(name));
  return p;
}

}  // namespace latte::model
