// Training driver for the recall and byte-level text tasks. Runs in 32-bit,
// writes a metrics CSV plus the final checkpoint (with optimizer state) into
// the output directory, and prints the final task metric.

#include "commands.hpp"

#include "latte/model/checkpoint.hpp"
#include "latte/model/config.hpp"
#include "latte/model/network.hpp"
#include "latte/model/train.hpp"
#include "latte/tasks/mqar.hpp"
#include "latte/tasks/text.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <vector>

namespace latte::cli {
namespace {

constexpr long long kDefaultSteps = 1000;
constexpr size_t kSyntheticCorpusBytes = 1 << 20;

struct RunPlan {
  model::ModelConfig model;
  tasks::MQARConfig mqar;  // task-specific keys live here for the mqar task
};

/// Splits a config document into model fields and task fields; unknown keys
/// are rejected by ModelConfig::set_field.
RunPlan parse_run_config(const std::string& text, const std::string& task) {
  RunPlan plan;
  for (const auto& [key, value] : model::config_text_to_pairs(text)) {
    if (task == "mqar" && key == "num_pairs")
      plan.mqar.num_pairs = std::stoi(value);
    else if (task == "mqar" && key == "train_examples")
      plan.mqar.train_examples = std::stoll(value);
    else if (task == "mqar" && key == "test_examples")
      plan.mqar.test_examples = std::stoll(value);
    else
      plan.model.set_field(key, value);
  }
  plan.model.validate();
  return plan;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_metrics(const std::string& path, const std::string& digest,
                   const std::vector<model::MetricsRow>& rows) {
  std::ofstream csv = open_csv(path, digest);
  csv << "step,loss,lr,task_metric\n";
  csv.precision(10);
  for (const auto& row : rows) {
    csv << row.step << "," << row.loss << "," << row.lr << ",";
    if (std::isnan(row.task_metric))
      csv << "";
    else
      csv << row.task_metric;
    csv << "\n";
  }
}

}  // namespace

int cmd_train(const TrainCliOptions& opt) {
  if (opt.task != "mqar" && opt.task != "text") {
    std::cerr << "train: task must be mqar or text\n";
    return 2;
  }

  RunPlan plan;
  try {
    if (!opt.config_path.empty()) plan = parse_run_config(read_file(opt.config_path), opt.task);
    if (!opt.mixer.empty()) plan.model.mixer_kind = model::mixer_from_string(opt.mixer);
    plan.model.validate();
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return 2;
  }
  model::ModelConfig& cfg = plan.model;

  const long long steps = opt.steps > 0 ? opt.steps : kDefaultSteps;
  const long long eval_every =
      opt.eval_every > 0 ? opt.eval_every : std::max<long long>(1, steps / 20);

  std::filesystem::create_directories(opt.out_dir);
  const std::string metrics_path = opt.out_dir + "/metrics.csv";
  const std::string ckpt_path = opt.out_dir + "/model.ckpt";

  model::TrainOptions topt;
  topt.total_steps = steps;
  topt.eval_every = eval_every;

  model::TrainCallbacks<float> cb;
  std::vector<model::MetricsRow> rows;
  cb.on_row = [&](const model::MetricsRow& row) { rows.push_back(row); };

  double final_metric = std::nan("");
  std::string metric_name;

  if (opt.task == "mqar") {
    tasks::MQARConfig& task = plan.mqar;
    task.vocab_size = cfg.vocab_size;
    task.seq_len = cfg.seq_len;
    task.seed = cfg.seed;
    try {
      task.validate();
    } catch (const std::exception& e) {
      std::cerr << "train: " << e.what() << "\n";
      return 2;
    }
    const Index B = cfg.batch_size;
    cb.next_batch = [task, B](long long step) {
      model::TokenBatch batch{Tensor<int32_t>({B, task.seq_len}),
                              Tensor<int32_t>({B, task.seq_len}),
                              Tensor<uint8_t>({B, task.seq_len})};
      for (Index b = 0; b < B; ++b) {
        const long long index = (step * B + b) % task.train_examples;
        const tasks::MQARExample ex = tasks::generate_mqar(task, index);
        for (Index t = 0; t < task.seq_len; ++t) {
          batch.tokens(b, t) = ex.tokens[static_cast<size_t>(t)];
          batch.targets(b, t) = ex.targets[static_cast<size_t>(t)];
          batch.mask(b, t) = ex.mask[static_cast<size_t>(t)];
        }
      }
      return batch;
    };
    const long long eval_examples = std::min<long long>(task.test_examples, 1000);
    const auto test_batches = tasks::mqar_test_set(task, eval_examples, B);
    cb.eval = [&cfg, test_batches](const model::ParameterStore<float>& params, long long) {
      return tasks::evaluate_mqar(params, cfg, test_batches);
    };
    metric_name = "accuracy";
  } else {
    std::vector<uint8_t> corpus;
    try {
      corpus = opt.corpus.empty() ? tasks::synthetic_corpus(kSyntheticCorpusBytes, cfg.seed)
                                  : tasks::load_text_corpus(opt.corpus);
    } catch (const std::exception& e) {
      std::cerr << "train: " << e.what() << "\n";
      return 2;
    }
    if (cfg.vocab_size < 256) {
      std::cerr << "train: text task needs vocab_size >= 256 for raw bytes\n";
      return 2;
    }
    // Last tenth of the stream is held out for perplexity.
    const size_t split = corpus.size() - corpus.size() / 10;
    std::vector<uint8_t> train_bytes(corpus.begin(), corpus.begin() + static_cast<long>(split));
    auto held_out = std::make_shared<std::vector<uint8_t>>(
        corpus.begin() + static_cast<long>(split), corpus.end());
    if (tasks::chunk_count(train_bytes, cfg.seq_len) < 1 ||
        tasks::chunk_count(*held_out, cfg.seq_len) < 1) {
      std::cerr << "train: corpus too small for seq_len " << cfg.seq_len << "\n";
      return 2;
    }
    const Index B = cfg.batch_size;
    const Index T = cfg.seq_len;
    const uint64_t seed = cfg.seed;
    cb.next_batch = [bytes = std::move(train_bytes), T, B, seed](long long step) {
      return tasks::text_train_batch(bytes, T, B, seed, step);
    };
    cb.eval = [&cfg, held_out, T, B](const model::ParameterStore<float>& params, long long) {
      const long long count = std::min<long long>(tasks::chunk_count(*held_out, T), 64);
      return tasks::text_perplexity(params, cfg,
                                    tasks::text_eval_batches(*held_out, T, 0, count, B));
    };
    metric_name = "perplexity";
  }

  auto params = model::build_model<float>(cfg);
  auto adam = model::init_adam(params);

  const std::string digest = cfg.digest();
  bool diverged = false;
  std::string divergence_message;
  cb.on_last_good = [&](const model::ParameterStore<float>& good,
                        const model::AdamState<float>& good_opt, long long) {
    model::save_checkpoint(ckpt_path, cfg, model::pack_training_state(good, good_opt));
  };

  model::TrainSummary summary;
  try {
    summary = model::train_lm(params, adam, cfg, topt, cb);
  } catch (const std::exception& e) {
    diverged = true;
    divergence_message = e.what();
  }

  write_metrics(metrics_path, digest, rows);
  if (diverged) {
    std::cerr << "train: " << divergence_message << "\n";
    std::cerr << "last good checkpoint: " << ckpt_path << "\n";
    return 1;
  }

  model::save_checkpoint(ckpt_path, cfg, model::pack_training_state(params, adam));
  final_metric = cb.eval ? cb.eval(params, summary.steps_run) : std::nan("");

  std::cout << "steps=" << summary.steps_run << " final_loss=" << summary.final_loss << " final_"
            << metric_name << "=" << final_metric << "\n";
  std::cout << "metrics: " << metrics_path << "\n";
  std::cout << "checkpoint: " << ckpt_path << "\n";
  return 0;
}

}  // namespace latte::cli
