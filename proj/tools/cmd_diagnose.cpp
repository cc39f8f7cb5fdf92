// Latent usage report for a trained checkpoint: p(state | t) per layer and
// head, plus usage entropy and a collapse flag when a head concentrates on a
// vanishing fraction of its states.

#include "commands.hpp"

#include "latte/latte.hpp"
#include "latte/macchiato.hpp"
#include "latte/model/checkpoint.hpp"
#include "latte/model/network.hpp"
#include "latte/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace latte::cli {
namespace {

using model::Checkpoint;
using model::MixerKind;
using model::ModelConfig;

std::optional<Checkpoint<double>> load_as_double(const std::string& path, std::string* err) {
  try {
    const auto ck = model::load_checkpoint<float>(path);
    return Checkpoint<double>{ck.cfg, ck.tensors.template cast<double>()};
  } catch (const std::exception& e) {
    if (std::string(e.what()).find("dtype mismatch") == std::string::npos) {
      *err = e.what();
      return std::nullopt;
    }
  }
  try {
    return model::load_checkpoint<double>(path);
  } catch (const std::exception& e) {
    *err = e.what();
    return std::nullopt;
  }
}

/// Tokens from --input: whitespace-separated ids when the whole file parses
/// as integers, raw bytes otherwise. Without --input, seeded uniform ids.
std::vector<int32_t> gather_tokens(const DiagnoseOptions& opt, const ModelConfig& cfg,
                                   std::string* err) {
  std::vector<int32_t> tokens;
  if (opt.input.empty()) {
    Rng rng(static_cast<uint64_t>(cfg.seed), 0x6469616720746f6bull);
    tokens.resize(static_cast<size_t>(cfg.seq_len));
    for (auto& t : tokens)
      t = static_cast<int32_t>(rng.next_uniform() * static_cast<double>(cfg.vocab_size));
    return tokens;
  }
  std::ifstream in(opt.input, std::ios::binary);
  if (!in) {
    *err = "cannot open input file: " + opt.input;
    return tokens;
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  std::istringstream parse(text);
  std::vector<int32_t> ids;
  bool all_ints = !text.empty();
  std::string word;
  while (parse >> word) {
    try {
      size_t used = 0;
      const long v = std::stol(word, &used);
      if (used != word.size() || v < 0 || v >= cfg.vocab_size) {
        all_ints = false;
        break;
      }
      ids.push_back(static_cast<int32_t>(v));
    } catch (const std::exception&) {
      all_ints = false;
      break;
    }
  }
  if (all_ints && !ids.empty()) {
    tokens = std::move(ids);
  } else {
    if (cfg.vocab_size < 256) {
      *err = "input is not a token id list and the model vocabulary is smaller than a byte";
      return tokens;
    }
    tokens.assign(text.begin(), text.end());
    for (auto& t : tokens) t = static_cast<int32_t>(static_cast<uint8_t>(t));
  }
  if (tokens.empty()) {
    *err = "input file holds no tokens";
    return tokens;
  }
  if (static_cast<Index>(tokens.size()) > cfg.seq_len)
    tokens.resize(static_cast<size_t>(cfg.seq_len));
  return tokens;
}

MacchiatoParams<double> macchiato_from_store(const model::ParameterStore<double>& ps,
                                             const ModelConfig& cfg, int layer) {
  const std::string p = "layers." + std::to_string(layer) + ".mixer.";
  MacchiatoParams<double> mp;
  mp.latte = {ps.at(p + "w_q"), ps.at(p + "w_k"), ps.at(p + "w_v"), cfg.n_heads};
  mp.gate_row_0 = ps.at(p + "gate0");
  mp.swa = {ps.at(p + "swa_q"), ps.at(p + "swa_k"),
            cfg.swa_share_values ? ps.at(p + "w_v") : ps.at(p + "swa_v"), cfg.n_heads};
  mp.window = cfg.window;
  mp.use_rope_in_swa = true;
  mp.share_values = cfg.swa_share_values;
  if (cfg.mixer_kind == MixerKind::macchiato_conv) {
    mp.feature_mode = FeatureMode::conv;
    mp.conv = {ps.at(p + "conv_w"), cfg.conv_depthwise};
  } else {
    mp.feature_mode = FeatureMode::rglru;
    mp.rglru = {ps.at(p + "rglru_in"), ps.at(p + "rglru_rec"), ps.at(p + "rglru_decay"),
                model::kRglruSharpness};
  }
  return mp;
}

struct HeadReport {
  int layer = 0, head = 0;
  double entropy = 0;
  bool collapsed = false;
};

}  // namespace

int cmd_diagnose(const DiagnoseOptions& opt) {
  if (opt.checkpoint.empty()) {
    std::cerr << "diagnose: --checkpoint is required\n";
    return 2;
  }
  std::string err;
  const auto ck = load_as_double(opt.checkpoint, &err);
  if (!ck) {
    std::cerr << "diagnose: " << err << "\n";
    return 2;
  }
  const ModelConfig& cfg = ck->cfg;
  const bool is_macchiato = cfg.mixer_kind == MixerKind::macchiato_conv ||
                            cfg.mixer_kind == MixerKind::macchiato_rglru;
  if (cfg.mixer_kind != MixerKind::latte && !is_macchiato) {
    std::cerr << "diagnose: mixer '" << model::to_string(cfg.mixer_kind)
              << "' has no latent states to report\n";
    return 2;
  }

  const std::vector<int32_t> tokens = gather_tokens(opt, cfg, &err);
  if (!err.empty()) {
    std::cerr << "diagnose: " << err << "\n";
    return 2;
  }
  const Index T = static_cast<Index>(tokens.size());
  Tensor<int32_t> token_tensor({1, T});
  for (Index t = 0; t < T; ++t) token_tensor(Index(0), t) = tokens[static_cast<size_t>(t)];

  // One forward pass just to recover the normed mixer inputs per layer.
  model::Tape<double> tape;
  const auto bp = model::bind_parameters(tape, ck->tensors);
  model::ForwardNodes fn;
  try {
    fn = model::forward_lm(tape, bp, cfg, token_tensor);
  } catch (const std::exception& e) {
    std::cerr << "diagnose: forward pass failed: " << e.what() << "\n";
    return 2;
  }

  const Index H = cfg.n_heads;
  const Index Lh = cfg.n_latents / cfg.n_heads;
  const Index width = is_macchiato ? Lh + 1 : Lh;
  const double collapse_floor = 0.1 * std::log(static_cast<double>(width));

  std::ofstream csv = open_csv(opt.out, cfg.digest());
  csv << "# mixer=" << model::to_string(cfg.mixer_kind) << " layers=" << cfg.n_layers
      << " heads=" << H << " T=" << T << " states=" << width << "\n";
  csv.precision(8);

  std::vector<HeadReport> reports;
  std::ostringstream body;
  body.precision(8);
  long long rows = 0;
  for (int i = 0; i < cfg.n_layers; ++i) {
    SequenceBatch<double> x(tape.value(fn.mixer_inputs[static_cast<size_t>(i)]));
    Tensor<double> probs;  // 1 x H x T x width
    if (is_macchiato) {
      const auto mp = macchiato_from_store(ck->tensors, cfg, i);
      const SequenceBatch<double> y = compute_features(x, mp);
      probs = mixture_gate(y, mp);
    } else {
      const std::string p = "layers." + std::to_string(i) + ".mixer.";
      const LatteParams<double> lp{ck->tensors.at(p + "w_q"), ck->tensors.at(p + "w_k"),
                                   ck->tensors.at(p + "w_v"), cfg.n_heads};
      probs = latent_posterior(x, lp).probs;
    }
    for (Index h = 0; h < H; ++h) {
      std::vector<double> usage(static_cast<size_t>(width), 0.0);
      for (Index t = 0; t < T; ++t)
        for (Index s = 0; s < width; ++s) {
          const double p = static_cast<double>(probs(Index(0), h, t, s));
          usage[static_cast<size_t>(s)] += p;
          body << i << "," << h << "," << t << "," << s << "," << p << "\n";
          ++rows;
        }
      double entropy = 0;
      for (double u : usage) {
        const double q = u / static_cast<double>(T);
        if (q > 0) entropy -= q * std::log(q);
      }
      reports.push_back({i, static_cast<int>(h), entropy, entropy < collapse_floor});
    }
  }

  int collapsed = 0;
  for (const auto& r : reports) {
    csv << "# entropy layer=" << r.layer << " head=" << r.head << " value=" << r.entropy
        << " floor=" << collapse_floor << " collapsed=" << (r.collapsed ? 1 : 0) << "\n";
    std::printf("layer %2d head %2d  usage entropy %8.4f%s\n", r.layer, r.head, r.entropy,
                r.collapsed ? "  [collapsed]" : "");
    collapsed += r.collapsed ? 1 : 0;
  }
  csv << "layer,head,t,state,p\n" << body.str();
  std::printf("%lld rows over %d layers x %lld heads x %lld steps x %lld states\n", rows,
              cfg.n_layers, static_cast<long long>(H), static_cast<long long>(T),
              static_cast<long long>(width));
  if (collapsed > 0)
    std::printf("%d head(s) below the collapse floor %.4f\n", collapsed, collapse_floor);
  std::cout << "report: " << opt.out << "\n";
  return 0;
}

}  // namespace latte::cli
