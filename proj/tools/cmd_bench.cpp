// Forward-pass timing across sequence lengths with the token budget held
// constant: batch size scales down as T grows so every cell touches the same
// number of tokens. Kernels here avoid materializing T x T weights so the
// measured scaling reflects the mechanisms, not trace bookkeeping.

#include "commands.hpp"

#include "latte/attention.hpp"
#include "latte/latte.hpp"
#include "latte/linear_attention.hpp"
#include "latte/macchiato.hpp"
#include "latte/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <vector>

namespace latte::cli {
namespace {

using Clock = std::chrono::steady_clock;

struct BenchCell {
  std::string mixer;
  Index T = 0;
  Index batch = 0;
  double mean_ms = 0;
  double std_ms = 0;
};

struct Workload {
  SequenceBatch<float> x;
  AttentionParams<float> attn;
  LatteParams<float> latte;
  FeatureMap<float> fm;
  MacchiatoParams<float> macc_conv;
  MacchiatoParams<float> macc_rglru;
  Index window = 0;
};

/// Row-at-a-time softmax attention: O(T^2) time, O(T) extra memory.
double attention_rowwise(const SequenceBatch<float>& x, const AttentionParams<float>& p,
                         Index window) {
  const Index B = x.batch(), T = x.len(), D = x.width();
  const Index H = p.heads, dh = p.head_dim();
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  double sink = 0;
  std::vector<float> weights(static_cast<size_t>(T));
  for (Index b = 0; b < B; ++b) {
    MatrixX<float> q = x.item(b) * p.w_q.matrix(D, D);
    MatrixX<float> k = x.item(b) * p.w_k.matrix(D, D);
    MatrixX<float> v = x.item(b) * p.w_v.matrix(D, D);
    MatrixX<float> out = MatrixX<float>::Zero(T, D);
    for (Index h = 0; h < H; ++h)
      for (Index t = 0; t < T; ++t) {
        const Index lo = window > 0 ? std::max<Index>(0, t - window + 1) : 0;
        float m = -std::numeric_limits<float>::infinity();
        for (Index s = lo; s <= t; ++s) {
          float logit = 0;
          for (Index d = 0; d < dh; ++d) logit += q(t, h * dh + d) * k(s, h * dh + d);
          logit *= inv_sqrt;
          weights[static_cast<size_t>(s)] = logit;
          m = std::max(m, logit);
        }
        float z = 0;
        for (Index s = lo; s <= t; ++s) {
          weights[static_cast<size_t>(s)] = std::exp(weights[static_cast<size_t>(s)] - m);
          z += weights[static_cast<size_t>(s)];
        }
        for (Index s = lo; s <= t; ++s) {
          const float w = weights[static_cast<size_t>(s)] / z;
          for (Index d = 0; d < dh; ++d) out(t, h * dh + d) += w * v(s, h * dh + d);
        }
      }
    sink += static_cast<double>(out(T - 1, 0));
  }
  return sink;
}

double linear_accumulating(const SequenceBatch<float>& x, const AttentionParams<float>& p,
                           const FeatureMap<float>& fm) {
  const Index B = x.batch(), T = x.len(), D = x.width(), L = fm.latent_dim();
  double sink = 0;
  for (Index b = 0; b < B; ++b) {
    MatrixX<float> phi_q = x.item(b) * p.w_q.matrix(D, D) * fm.projection.matrix(D, L);
    MatrixX<float> phi_k = x.item(b) * p.w_k.matrix(D, D) * fm.projection.matrix(D, L);
    MatrixX<float> v = x.item(b) * p.w_v.matrix(D, D);
    phi_q = phi_q.array().exp();
    phi_k = phi_k.array().exp();
    MatrixX<float> acc = MatrixX<float>::Zero(L, D);
    VectorX<float> z = VectorX<float>::Zero(L);
    Eigen::RowVectorXf out(D);
    for (Index t = 0; t < T; ++t) {
      acc.noalias() += phi_k.row(t).transpose() * v.row(t);
      z += phi_k.row(t).transpose();
      out.noalias() = phi_q.row(t) * acc;
      out /= phi_q.row(t).dot(z);
      sink += static_cast<double>(out(0));
    }
  }
  return sink;
}

double latte_scan_forward(const SequenceBatch<float>& x, const LatteParams<float>& p) {
  const auto out = latte_causal_scan(x, p, /*unroll=*/32);
  return static_cast<double>(out.values[out.values.size() - 1]);
}

double macchiato_forward_timed(const SequenceBatch<float>& x, const MacchiatoParams<float>& p,
                               const LatteParams<float>& latent) {
  // Features, gate, and latent scan run at their real cost; the window
  // branch reuses the row-at-a-time kernel instead of the trace-building path.
  const SequenceBatch<float> y = compute_features(x, p);
  const Tensor<float> gate = mixture_gate(y, p);
  double sink = static_cast<double>(gate(0, 0, x.len() - 1, 0));
  const auto latent_out = latte_causal_scan(y, latent, /*unroll=*/32);
  sink += static_cast<double>(latent_out.values[latent_out.values.size() - 1]);
  auto swa_shared = p.swa;
  if (p.share_values) swa_shared.w_v = p.latte.w_v;
  sink += attention_rowwise(x, swa_shared, p.window);
  return sink;
}

Workload make_workload(Index B, Index T, Index D, uint64_t seed) {
  Rng rng(seed, static_cast<uint64_t>(T));
  Workload w;
  Tensor<float> xv({B, T, D});
  fill_normal(xv, rng, 0.0, 0.4);
  w.x = SequenceBatch<float>(std::move(xv));

  auto mat = [&](Index r, Index c, double scale) {
    Tensor<float> t({r, c});
    fill_normal(t, rng, 0.0, scale);
    return t;
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  w.attn = {mat(D, D, sd), mat(D, D, sd), mat(D, D, sd), 8};

  const Index L = 64;
  w.latte = {mat(D, L, sd * 0.5), mat(D, L, sd * 0.5), mat(D, D, sd), 8};
  w.fm = FeatureMap<float>{mat(D, L, sd * 0.5)};
  w.window = 128;

  auto macc = [&](FeatureMode mode) {
    MacchiatoParams<float> p;
    p.latte = {mat(D, L, sd * 0.5), mat(D, L, sd * 0.5), mat(D, D, sd), 8};
    p.gate_row_0 = mat(D, 8, sd);
    p.swa = {mat(D, D, sd), mat(D, D, sd), mat(D, D, sd), 8};
    p.window = w.window;
    p.feature_mode = mode;
    if (mode == FeatureMode::conv) p.conv.weights = mat(3, D, 0.4);
    if (mode == FeatureMode::rglru) {
      p.rglru.w_input_gate = mat(D, D, sd);
      p.rglru.w_rec_gate = mat(D, D, sd);
      p.rglru.log_decay = Tensor<float>({D});
      fill_normal(p.rglru.log_decay, rng, 0.0, 1.0);
    }
    return p;
  };
  w.macc_conv = macc(FeatureMode::conv);
  w.macc_rglru = macc(FeatureMode::rglru);
  return w;
}

double run_mixer_once(const std::string& mixer, const Workload& w) {
  if (mixer == "attention") return attention_rowwise(w.x, w.attn, 0);
  if (mixer == "swa") return attention_rowwise(w.x, w.attn, w.window);
  if (mixer == "linear") return linear_accumulating(w.x, w.attn, w.fm);
  if (mixer == "latte") return latte_scan_forward(w.x, w.latte);
  if (mixer == "macchiato_conv") return macchiato_forward_timed(w.x, w.macc_conv, w.latte);
  if (mixer == "macchiato_rglru") return macchiato_forward_timed(w.x, w.macc_rglru, w.latte);
  throw std::invalid_argument("unknown mixer: " + mixer);
}

}  // namespace

int cmd_bench(const BenchOptions& opt) {
  std::vector<Index> seq_lens;
  for (const std::string& s : split_list(opt.seq_lens)) seq_lens.push_back(std::stoll(s));
  const std::vector<std::string> mixers = split_list(opt.mixers);
  if (seq_lens.empty() || mixers.empty()) {
    std::cerr << "bench: need at least one sequence length and one mixer\n";
    return 2;
  }
  for (Index T : seq_lens)
    if (T < 1) {
      std::cerr << "bench: sequence lengths must be positive\n";
      return 2;
    }
  if (opt.repeat < 1 || opt.d_model < 8 || opt.d_model % 8 != 0) {
    std::cerr << "bench: repeat must be >= 1 and d_model a positive multiple of 8\n";
    return 2;
  }
  for (const std::string& m : mixers)
    if (m != "attention" && m != "swa" && m != "linear" && m != "latte" &&
        m != "macchiato_conv" && m != "macchiato_rglru") {
      std::cerr << "bench: unknown mixer: " << m << "\n";
      return 2;
    }

  const Index budget = opt.token_budget > 0
                           ? opt.token_budget
                           : *std::max_element(seq_lens.begin(), seq_lens.end());
  for (Index T : seq_lens)
    if (T > budget) {
      std::cerr << "bench: seq len " << T << " exceeds the token budget " << budget << "\n";
      return 2;
    }

  // Streams dominate: x, q/k/v (or features), outputs, plus latent state.
  const double est_bytes = 10.0 * static_cast<double>(budget) *
                           static_cast<double>(opt.d_model) * sizeof(float);
  const double est_gb = est_bytes / (1024.0 * 1024.0 * 1024.0);
  if (est_gb > opt.mem_limit_gb) {
    std::fprintf(stderr,
                 "bench: estimated working set %.2f GiB exceeds the %.2f GiB limit; "
                 "lower --token-budget or raise --mem-limit-gb\n",
                 est_gb, opt.mem_limit_gb);
    return 2;
  }

  std::ostringstream cfg;
  cfg << "seq_lens=" << opt.seq_lens << " mixers=" << opt.mixers << " d_model=" << opt.d_model
      << " repeat=" << opt.repeat << " seed=" << opt.seed << " budget=" << budget;
  const std::string digest = hex64(fnv1a64(cfg.str()));

  std::vector<BenchCell> cells;
  double sink = 0;
  for (Index T : seq_lens) {
    const Index B = std::max<Index>(1, budget / T);
    const Workload w = make_workload(B, T, opt.d_model, opt.seed);
    for (const std::string& mixer : mixers) {
      sink += run_mixer_once(mixer, w);  // warmup, excluded from stats
      // Each repeat covers the whole budget (B sequences); mean_ms is the
      // per-sequence forward time so the T axis is comparable across cells.
      std::vector<double> ms(static_cast<size_t>(opt.repeat));
      for (int r = 0; r < opt.repeat; ++r) {
        const auto t0 = Clock::now();
        sink += run_mixer_once(mixer, w);
        ms[static_cast<size_t>(r)] =
            std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
            static_cast<double>(B);
      }
      double mean = 0;
      for (double v : ms) mean += v;
      mean /= static_cast<double>(opt.repeat);
      double var = 0;
      for (double v : ms) var += (v - mean) * (v - mean);
      const double stdev = opt.repeat > 1 ? std::sqrt(var / static_cast<double>(opt.repeat - 1)) : 0.0;
      cells.push_back({mixer, T, B, mean, stdev});
      std::printf("%-16s T=%-6lld B=%-4lld %10.2f ms +/- %.2f\n", mixer.c_str(),
                  static_cast<long long>(T), static_cast<long long>(B), mean, stdev);
    }
  }

  // Least-squares slope of log(time) against log(T) per mixer.
  std::map<std::string, double> slopes;
  for (const std::string& mixer : mixers) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (const auto& c : cells)
      if (c.mixer == mixer) {
        const double lx = std::log(static_cast<double>(c.T)), ly = std::log(c.mean_ms);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++n;
      }
    slopes[mixer] = n > 1 ? (static_cast<double>(n) * sxy - sx * sy) /
                                (static_cast<double>(n) * sxx - sx * sx)
                          : 0.0;
    std::printf("slope %-16s %.3f\n", mixer.c_str(), slopes[mixer]);
  }

  std::ofstream csv = open_csv(opt.out, digest);
  csv << "# mean_ms is one forward pass at length T; each cell runs batch = budget/T"
         " sequences per repeat so every row covers the same token count\n";
  for (const auto& [mixer, slope] : slopes) csv << "# slope " << mixer << "=" << slope << "\n";
  csv << "mixer,T,mean_ms,std_ms\n";
  for (const auto& c : cells)
    csv << c.mixer << "," << c.T << "," << c.mean_ms << "," << c.std_ms << "\n";
  std::cout << "report: " << opt.out << " (sink " << sink << ")\n";
  return 0;
}

}  // namespace latte::cli
