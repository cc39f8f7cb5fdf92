#pragma once

// Decoder-only language model assembly over the tape ops: token embedding,
// pre-norm blocks (sequence mixer + gated FFN), untied output head. The
// "plusplus" recipe uses rmsnorm and a sigmoid-gated FFN; the plain recipe
// uses layernorm and a GELU MLP.

#include "latte/model/config.hpp"
#include "latte/model/mixers.hpp"
#include "latte/model/ops.hpp"
#include "latte/model/param_store.hpp"
#include "latte/rng.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace latte::model {

inline constexpr double kRglruSharpness = 8.0;

struct TokenBatch {
  Tensor<int32_t> tokens;   // B x T
  Tensor<int32_t> targets;  // B x T
  Tensor<uint8_t> mask;     // B x T, 1 where the position contributes to the loss
};

namespace detail {

inline uint64_t name_hash(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace detail

// Fresh parameters for cfg. Every tensor gets its own rng stream derived from
// (seed, name), so values do not depend on creation order.
template <typename ScalarT>
ParameterStore<ScalarT> build_model(const ModelConfig& cfg) {
  cfg.validate();
  ParameterStore<ScalarT> ps;
  const Index D = cfg.d_model, V = cfg.vocab_size, F = cfg.d_ff;
  const Index L = cfg.n_latents, H = cfg.n_heads, K = cfg.conv_k;
  const double sd = 0.02;

  auto rng_for = [&](const std::string& name) { return Rng(cfg.seed, detail::name_hash(name)); };
  auto add_normal = [&](const std::string& name, std::vector<Index> shape) {
    Tensor<ScalarT> t(std::move(shape));
    Rng rng = rng_for(name);
    fill_normal(t, rng, 0.0, sd);
    ps.add(name, std::move(t));
  };
  auto add_const = [&](const std::string& name, std::vector<Index> shape, double v) {
    ps.add(name, Tensor<ScalarT>::full(std::move(shape), static_cast<ScalarT>(v)));
  };
  auto add_norm = [&](const std::string& prefix) {
    add_const(prefix + ".gain", {D}, 1.0);
    if (!cfg.plusplus) add_const(prefix + ".bias", {D}, 0.0);
  };

  add_normal("embed.tokens", {V, D});
  if (cfg.resolved_pos_encoding() == PosEncoding::learned)
    add_normal("embed.positions", {static_cast<Index>(cfg.seq_len), D});

  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    add_norm(p + "norm1");
    switch (cfg.mixer_kind) {
      case MixerKind::attention:
      case MixerKind::swa:
        add_normal(p + "mixer.w_q", {D, D});
        add_normal(p + "mixer.w_k", {D, D});
        add_normal(p + "mixer.w_v", {D, D});
        break;
      case MixerKind::linear:
      case MixerKind::latte:
        add_normal(p + "mixer.w_q", {D, L});
        add_normal(p + "mixer.w_k", {D, L});
        add_normal(p + "mixer.w_v", {D, D});
        break;
      case MixerKind::macchiato_conv:
      case MixerKind::macchiato_rglru: {
        add_normal(p + "mixer.w_q", {D, L});
        add_normal(p + "mixer.w_k", {D, L});
        add_normal(p + "mixer.w_v", {D, D});
        add_normal(p + "mixer.gate0", {D, H});
        add_normal(p + "mixer.swa_q", {D, D});
        add_normal(p + "mixer.swa_k", {D, D});
        if (!cfg.swa_share_values) add_normal(p + "mixer.swa_v", {D, D});
        if (cfg.mixer_kind == MixerKind::macchiato_conv) {
          // Identity tap plus noise; the features start out close to the input.
          Tensor<ScalarT> w = cfg.conv_depthwise ? Tensor<ScalarT>({K, D}) : Tensor<ScalarT>({K, D, D});
          Rng rng = rng_for(p + "mixer.conv_w");
          fill_normal(w, rng, 0.0, sd);
          if (cfg.conv_depthwise)
            for (Index d = 0; d < D; ++d) w(Index(0), d) += ScalarT(1);
          else
            for (Index d = 0; d < D; ++d) w(Index(0), d, d) += ScalarT(1);
          ps.add(p + "mixer.conv_w", std::move(w));
        } else {
          add_normal(p + "mixer.rglru_in", {D, D});
          add_normal(p + "mixer.rglru_rec", {D, D});
          // Decay logits chosen so the full-recurrence retention sigma(decay)^c
          // lands uniformly in (0.9, 0.999).
          Tensor<ScalarT> lam({D});
          Rng rng = rng_for(p + "mixer.rglru_decay");
          for (Index d = 0; d < D; ++d) {
            const double u = 0.9 + 0.099 * rng.next_uniform();
            lam[d] = static_cast<ScalarT>(detail::logit(std::pow(u, 1.0 / kRglruSharpness)));
          }
          ps.add(p + "mixer.rglru_decay", std::move(lam));
        }
        break;
      }
    }
    add_normal(p + "mixer.w_out", {D, D});
    add_norm(p + "norm2");
    if (cfg.plusplus) {
      add_normal(p + "ffn.w_in", {D, F});
      add_normal(p + "ffn.w_gate", {D, F});
      add_normal(p + "ffn.w_out", {F, D});
    } else {
      add_normal(p + "ffn.w1", {D, F});
      add_normal(p + "ffn.w2", {F, D});
    }
  }
  add_norm("final_norm");
  add_normal("head.w", {D, V});
  return ps;
}

// Parameter leaves registered on a tape, looked up by name.
struct BoundParams {
  std::unordered_map<std::string, int> ids;

  int at(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) throw std::out_of_range("no bound parameter named " + name);
    return it->second;
  }
};

template <typename ScalarT>
BoundParams bind_parameters(Tape<ScalarT>& tape, const ParameterStore<ScalarT>& params) {
  BoundParams bp;
  for (const auto& name : params.names()) bp.ids[name] = tape.push(params.at(name));
  return bp;
}

struct ForwardOptions {
  bool training = false;        // enables dropout
  uint64_t dropout_stream = 0;  // typically the step index
};

struct ForwardNodes {
  int logits = -1;
  std::vector<int> block_outputs;  // residual stream after each block
  std::vector<int> mixer_inputs;   // normed mixer input per layer
};

template <typename ScalarT>
ForwardNodes forward_lm(Tape<ScalarT>& tape, const BoundParams& bp, const ModelConfig& cfg,
                        const Tensor<int32_t>& tokens, const ForwardOptions& opt = {}) {
  cfg.validate();
  if (tokens.rank() != 2) throw std::invalid_argument("forward_lm expects (B,T) tokens");
  const Index H = cfg.n_heads;
  Rng drop_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull, opt.dropout_stream);
  const bool rope = cfg.resolved_pos_encoding() == PosEncoding::rope;

  auto norm = [&](int x, const std::string& prefix) {
    if (cfg.plusplus) return rmsnorm(tape, x, bp.at(prefix + ".gain"));
    return layernorm(tape, x, bp.at(prefix + ".gain"), bp.at(prefix + ".bias"));
  };
  auto drop = [&](int x) {
    return opt.training && cfg.dropout > 0 ? dropout(tape, x, cfg.dropout, drop_rng) : x;
  };

  int h = embedding(tape, bp.at("embed.tokens"), tokens);
  if (cfg.resolved_pos_encoding() == PosEncoding::learned)
    h = add_positions(tape, h, bp.at("embed.positions"));
  h = drop(h);

  ForwardNodes fn;
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const int a = norm(h, p + "norm1");
    fn.mixer_inputs.push_back(a);
    int mix = -1;
    switch (cfg.mixer_kind) {
      case MixerKind::attention:
      case MixerKind::swa: {
        const int q = matmul(tape, a, bp.at(p + "mixer.w_q"));
        const int k = matmul(tape, a, bp.at(p + "mixer.w_k"));
        const int v = matmul(tape, a, bp.at(p + "mixer.w_v"));
        const Index window = cfg.mixer_kind == MixerKind::swa ? cfg.window : 0;
        mix = attention_mixer(tape, q, k, v, H, window, rope, true);
        break;
      }
      case MixerKind::linear:
      case MixerKind::latte: {
        const int ql = matmul(tape, a, bp.at(p + "mixer.w_q"));
        const int kl = matmul(tape, a, bp.at(p + "mixer.w_k"));
        const int v = matmul(tape, a, bp.at(p + "mixer.w_v"));
        mix = cfg.mixer_kind == MixerKind::linear
                  ? linear_mixer(tape, ql, kl, v, H)
                  : latte_mixer(tape, ql, kl, v, H, cfg.unroll);
        break;
      }
      case MixerKind::macchiato_conv:
      case MixerKind::macchiato_rglru: {
        int y;
        if (cfg.mixer_kind == MixerKind::macchiato_conv) {
          y = conv_feature_op(tape, a, bp.at(p + "mixer.conv_w"));
        } else {
          const int rec = matmul(tape, a, bp.at(p + "mixer.rglru_rec"));
          const int inp = matmul(tape, a, bp.at(p + "mixer.rglru_in"));
          y = rglru_op(tape, rec, inp, a, bp.at(p + "mixer.rglru_decay"), kRglruSharpness);
        }
        // Features drive the mixture distributions; values come from the
        // unfeatured stream.
        const int g0 = matmul(tape, y, bp.at(p + "mixer.gate0"));
        const int ql = matmul(tape, y, bp.at(p + "mixer.w_q"));
        const int kl = matmul(tape, y, bp.at(p + "mixer.w_k"));
        const int v = matmul(tape, a, bp.at(p + "mixer.w_v"));
        const int vswa =
            cfg.swa_share_values ? v : matmul(tape, a, bp.at(p + "mixer.swa_v"));
        const int qs = matmul(tape, a, bp.at(p + "mixer.swa_q"));
        const int ks = matmul(tape, a, bp.at(p + "mixer.swa_k"));
        mix = macchiato_mixer(tape, g0, ql, kl, v, vswa, qs, ks, H, cfg.window,
                              /*use_rope=*/true, cfg.unroll);
        break;
      }
    }
    mix = matmul(tape, mix, bp.at(p + "mixer.w_out"));
    h = add(tape, h, drop(mix));
    const int b2 = norm(h, p + "norm2");
    int f;
    if (cfg.plusplus) {
      const int gate = sigmoid(tape, matmul(tape, b2, bp.at(p + "ffn.w_gate")));
      const int val = matmul(tape, b2, bp.at(p + "ffn.w_in"));
      f = matmul(tape, mul(tape, val, gate), bp.at(p + "ffn.w_out"));
    } else {
      f = matmul(tape, gelu(tape, matmul(tape, b2, bp.at(p + "ffn.w1"))), bp.at(p + "ffn.w2"));
    }
    h = add(tape, h, drop(f));
    fn.block_outputs.push_back(h);
  }
  fn.logits = matmul(tape, norm(h, "final_norm"), bp.at("head.w"));
  return fn;
}

template <typename ScalarT>
struct LossGrads {
  double loss = 0;
  ParameterStore<ScalarT> grads;
};

template <typename ScalarT>
LossGrads<ScalarT> loss_and_grads(const ParameterStore<ScalarT>& params, const ModelConfig& cfg,
                                  const TokenBatch& batch, uint64_t step, bool training = true) {
  Tape<ScalarT> tape;
  const BoundParams bp = bind_parameters(tape, params);
  ForwardOptions opt;
  opt.training = training;
  opt.dropout_stream = step;
  const ForwardNodes fn = forward_lm(tape, bp, cfg, batch.tokens, opt);
  const int loss = masked_cross_entropy(tape, fn.logits, batch.targets, batch.mask);
  const double lv = static_cast<double>(tape.value(loss)[0]);
  if (!std::isfinite(lv)) {
    for (size_t i = 0; i < fn.block_outputs.size(); ++i)
      if (!tape.value(fn.block_outputs[i]).all_finite())
        throw std::runtime_error("non-finite loss: first bad activations after layer " +
                                 std::to_string(i) + " (" + to_string(cfg.mixer_kind) + ")");
    throw std::runtime_error("non-finite loss in the output head");
  }
  tape.backward(loss);
  LossGrads<ScalarT> r;
  r.loss = lv;
  for (const auto& name : params.names()) r.grads.add(name, tape.grad(bp.at(name)));
  return r;
}

template <typename ScalarT>
struct EvalOutput {
  double loss = 0;
  Tensor<ScalarT> logits;  // B x T x V
};

template <typename ScalarT>
EvalOutput<ScalarT> evaluate_batch(const ParameterStore<ScalarT>& params, const ModelConfig& cfg,
                                   const TokenBatch& batch) {
  Tape<ScalarT> tape;
  const BoundParams bp = bind_parameters(tape, params);
  const ForwardNodes fn = forward_lm(tape, bp, cfg, batch.tokens, ForwardOptions{});
  const int loss = masked_cross_entropy(tape, fn.logits, batch.targets, batch.mask);
  EvalOutput<ScalarT> out;
  out.loss = static_cast<double>(tape.value(loss)[0]);
  out.logits = tape.value(fn.logits);
  return out;
}

}  // namespace latte::model
