#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace latte::model {

enum class MixerKind { attention, swa, linear, latte, macchiato_conv, macchiato_rglru };
enum class PosEncoding { automatic, learned, rope, none };

inline std::string to_string(MixerKind k) {
  switch (k) {
    case MixerKind::attention: return "attention";
    case MixerKind::swa: return "swa";
    case MixerKind::linear: return "linear";
    case MixerKind::latte: return "latte";
    case MixerKind::macchiato_conv: return "macchiato_conv";
    case MixerKind::macchiato_rglru: return "macchiato_rglru";
  }
  return "?";
}

inline MixerKind mixer_from_string(const std::string& s) {
  if (s == "attention") return MixerKind::attention;
  if (s == "swa") return MixerKind::swa;
  if (s == "linear") return MixerKind::linear;
  if (s == "latte") return MixerKind::latte;
  if (s == "macchiato_conv") return MixerKind::macchiato_conv;
  if (s == "macchiato_rglru") return MixerKind::macchiato_rglru;
  throw std::invalid_argument("unknown mixer kind: " + s);
}

inline std::string to_string(PosEncoding p) {
  switch (p) {
    case PosEncoding::automatic: return "auto";
    case PosEncoding::learned: return "learned";
    case PosEncoding::rope: return "rope";
    case PosEncoding::none: return "none";
  }
  return "?";
}

inline PosEncoding pos_from_string(const std::string& s) {
  if (s == "auto") return PosEncoding::automatic;
  if (s == "learned") return PosEncoding::learned;
  if (s == "rope") return PosEncoding::rope;
  if (s == "none") return PosEncoding::none;
  throw std::invalid_argument("unknown position encoding: " + s);
}

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 8;
  int d_model = 512;
  int d_ff = 2048;
  int n_latents = 256;
  int window = 128;
  int conv_k = 3;
  double dropout = 0.1;
  double learning_rate = 5e-4;
  int warmup_steps = 4000;
  std::string decay_schedule = "linear";
  double weight_decay = 0.01;
  int seq_len = 512;
  int batch_size = 64;
  int unroll = 32;
  MixerKind mixer_kind = MixerKind::latte;
  bool plusplus = true;
  int vocab_size = 256;
  uint64_t seed = 0;
  PosEncoding pos_encoding = PosEncoding::automatic;
  bool conv_depthwise = true;
  bool swa_share_values = true;

  // Learned tables act like attention's absolute positions; the recurrent
  // kinds carry position implicitly and the window branch uses rope.
  PosEncoding resolved_pos_encoding() const {
    if (pos_encoding != PosEncoding::automatic) return pos_encoding;
    switch (mixer_kind) {
      case MixerKind::attention: return PosEncoding::learned;
      case MixerKind::swa: return PosEncoding::rope;
      default: return PosEncoding::none;
    }
  }

  bool uses_latents() const {
    return mixer_kind == MixerKind::linear || mixer_kind == MixerKind::latte ||
           mixer_kind == MixerKind::macchiato_conv || mixer_kind == MixerKind::macchiato_rglru;
  }

  bool is_macchiato() const {
    return mixer_kind == MixerKind::macchiato_conv || mixer_kind == MixerKind::macchiato_rglru;
  }

  void validate() const {
    auto positive = [](long long v, const char* name) {
      if (v <= 0) throw std::invalid_argument(std::string(name) + " must be positive");
    };
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(window, "window");
    positive(conv_k, "conv_k");
    positive(seq_len, "seq_len");
    positive(batch_size, "batch_size");
    positive(unroll, "unroll");
    positive(vocab_size, "vocab_size");
    if (n_layers < 0) throw std::invalid_argument("n_layers must be nonnegative");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("dropout must be in [0,1)");
    if (learning_rate < 0) throw std::invalid_argument("learning_rate must be nonnegative");
    if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be nonnegative");
    if (weight_decay < 0) throw std::invalid_argument("weight_decay must be nonnegative");
    if (decay_schedule != "linear" && decay_schedule != "constant")
      throw std::invalid_argument("decay_schedule must be linear or constant");
    if (d_model % n_heads != 0) throw std::invalid_argument("n_heads must divide d_model");
    if (uses_latents()) {
      positive(n_latents, "n_latents");
      if (n_latents % n_heads != 0) throw std::invalid_argument("n_heads must divide n_latents");
    }
    if ((d_model / n_heads) % 2 != 0 &&
        (mixer_kind == MixerKind::swa || is_macchiato() ||
         (mixer_kind == MixerKind::attention && resolved_pos_encoding() == PosEncoding::rope)))
      throw std::invalid_argument("rope needs an even per-head width");
  }

  // Canonical serialization; also the digest input.
  std::map<std::string, std::string> fields() const {
    std::map<std::string, std::string> f;
    auto num = [](auto v) {
      std::ostringstream os;
      os << v;
      return os.str();
    };
    f["n_layers"] = num(n_layers);
    f["n_heads"] = num(n_heads);
    f["d_model"] = num(d_model);
    f["d_ff"] = num(d_ff);
    f["n_latents"] = num(n_latents);
    f["window"] = num(window);
    f["conv_k"] = num(conv_k);
    f["dropout"] = num(dropout);
    f["learning_rate"] = num(learning_rate);
    f["warmup_steps"] = num(warmup_steps);
    f["decay_schedule"] = decay_schedule;
    f["weight_decay"] = num(weight_decay);
    f["seq_len"] = num(seq_len);
    f["batch_size"] = num(batch_size);
    f["unroll"] = num(unroll);
    f["mixer_kind"] = to_string(mixer_kind);
    f["plusplus"] = plusplus ? "true" : "false";
    f["vocab_size"] = num(vocab_size);
    f["seed"] = num(seed);
    f["pos_encoding"] = to_string(pos_encoding);
    f["conv_depthwise"] = conv_depthwise ? "true" : "false";
    f["swa_share_values"] = swa_share_values ? "true" : "false";
    return f;
  }

  void set_field(const std::string& key, const std::string& value) {
    auto to_int = [&](const std::string& v) {
      size_t pos = 0;
      const int r = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("bad integer for " + key + ": " + v);
      return r;
    };
    auto to_double = [&](const std::string& v) {
      size_t pos = 0;
      const double r = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("bad number for " + key + ": " + v);
      return r;
    };
    auto to_bool = [&](const std::string& v) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw std::invalid_argument("bad boolean for " + key + ": " + v);
    };
    if (key == "n_layers") n_layers = to_int(value);
    else if (key == "n_heads") n_heads = to_int(value);
    else if (key == "d_model") d_model = to_int(value);
    else if (key == "d_ff") d_ff = to_int(value);
    else if (key == "n_latents") n_latents = to_int(value);
    else if (key == "window") window = to_int(value);
    else if (key == "conv_k") conv_k = to_int(value);
    else if (key == "dropout") dropout = to_double(value);
    else if (key == "learning_rate") learning_rate = to_double(value);
    else if (key == "warmup_steps") warmup_steps = to_int(value);
    else if (key == "decay_schedule") decay_schedule = value;
    else if (key == "weight_decay") weight_decay = to_double(value);
    else if (key == "seq_len") seq_len = to_int(value);
    else if (key == "batch_size") batch_size = to_int(value);
    else if (key == "unroll") unroll = to_int(value);
    else if (key == "mixer_kind") mixer_kind = mixer_from_string(value);
    else if (key == "plusplus") plusplus = to_bool(value);
    else if (key == "vocab_size") vocab_size = to_int(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "pos_encoding") pos_encoding = pos_from_string(value);
    else if (key == "conv_depthwise") conv_depthwise = to_bool(value);
    else if (key == "swa_share_values") swa_share_values = to_bool(value);
    else throw std::invalid_argument("unknown config key: " + key);
  }

  std::string digest() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
      }
    };
    for (const auto& [k, v] : fields()) {
      mix(k);
      mix("=");
      mix(v);
      mix("\n");
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }
};

/// Key-value pairs of a config document, either JSON or key=value lines with
/// '#' comments. Callers decide which keys they accept.
inline std::vector<std::pair<std::string, std::string>> config_text_to_pairs(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  const size_t first = text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) throw std::invalid_argument("empty config");
  if (text[first] == '{') {
    nlohmann::json j = nlohmann::json::parse(text);
    for (const auto& [key, value] : j.items()) {
      if (value.is_string())
        pairs.emplace_back(key, value.get<std::string>());
      else if (value.is_boolean())
        pairs.emplace_back(key, value.get<bool>() ? "true" : "false");
      else {
        std::ostringstream os;
        os << value;
        pairs.emplace_back(key, os.str());
      }
    }
  } else {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const size_t a = line.find_first_not_of(" \t\r");
      if (a == std::string::npos) continue;
      const size_t b = line.find_last_not_of(" \t\r");
      line = line.substr(a, b - a + 1);
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("expected key=value line: " + line);
      std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
      size_t v0 = value.find_first_not_of(" \t");
      value = v0 == std::string::npos ? "" : value.substr(v0);
      pairs.emplace_back(key, value);
    }
  }
  return pairs;
}

inline ModelConfig parse_config_text(const std::string& text) {
  ModelConfig cfg;
  for (const auto& [key, value] : config_text_to_pairs(text)) cfg.set_field(key, value);
  cfg.validate();
  return cfg;
}

inline ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config_text(os.str());
}

}  // namespace latte::model
