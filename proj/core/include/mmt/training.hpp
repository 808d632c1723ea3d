#pragma once
// Loss, the Adam optimizer, corpus BLEU, checkpointing, the teacher-forced
// training loop with early stopping, and the multi-seed experiment grid.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmt/config.hpp"
#include "mmt/data.hpp"
#include "mmt/model.hpp"

namespace mmt {

// Mean negative log-likelihood over the unmasked target tokens. Terms are
// summed in value order, so the result is independent of batch-row order.
TensorPtr nll_loss(const std::vector<std::vector<TensorPtr>>& step_logits,
                   const std::vector<std::vector<int>>& tgt_out,
                   const std::vector<std::vector<int>>& tgt_mask);

class AdamOptimizer {
 public:
  AdamOptimizer(ParameterStore& store, const OptimizerConfig& cfg);

  // One bias-corrected update from the accumulated gradients. Parameters
  // marked non-trainable are never touched.
  void step();

  int steps_taken() const { return t_; }
  void set_steps_taken(int t) { t_ = t; }  // checkpoint resume
  const OptimizerConfig& config() const { return cfg_; }

 private:
  ParameterStore& store_;
  OptimizerConfig cfg_;
  int t_ = 0;
};

// Corpus-level BLEU in [0,1] over whitespace-tokenized lines: modified
// n-gram precisions (add-one smoothed for n >= 2), geometric mean, brevity
// penalty exp(1 - r/c) when the candidates are shorter than the references.
double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::string>& references, int max_n = 4);

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + <dir>/params.bin

struct TrainerState {
  int step = 0;
  int epoch = 0;
  int batch_idx = 0;  // next batch within the epoch
  int adam_t = 0;
  int best_step = 0;
  double best_dev_bleu = -1.0;
  double best_dev_loss = 0.0;
  std::string dropout_rng;  // serialized generator state
};

void save_checkpoint(const std::string& dir, const Model& model,
                     const AdamOptimizer* opt, const TrainerState& state,
                     const std::map<std::string, std::string>& config_snapshot);

// Loads parameter values, optimizer moments, and running statistics into an
// existing model of the SAME configuration; CompatibilityError otherwise.
TrainerState load_checkpoint(const std::string& dir, Model& model, AdamOptimizer* opt);

// Manifest metadata without touching a model (checkpoint-driven rebuild).
struct CheckpointInfo {
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string variant;
  int step = 0;
};
CheckpointInfo read_checkpoint_info(const std::string& dir);

// ---------------------------------------------------------------------------
// Data plumbing

struct TrainDataset {
  std::vector<Example> examples;        // encoded, image_index into `images`
  std::vector<Image> images;            // preprocessed, equal sizes
  std::vector<std::string> references;  // raw target lines
};

// Encode one corpus split with a fixed subword model and vocabulary.
TrainDataset encode_dataset(const Corpus& corpus, const BpeModel& bpe,
                            const Vocabulary& vocab, const PreprocessConfig& pp);

struct PreparedData {
  BpeModel bpe;
  Vocabulary vocab;
  TrainDataset train;
  TrainDataset dev;
};

// Learns the subword model and vocabulary on the training split (source and
// target lines jointly) and encodes both splits with them.
PreparedData prepare_datasets(const Corpus& train_corpus, const Corpus& dev_corpus,
                              int bpe_merges, const PreprocessConfig& pp);

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  int steps = 0;
  int best_step = 0;
  double best_dev_bleu = 0.0;
  double best_dev_loss = 0.0;
  double final_train_loss = 0.0;
  bool early_stopped = false;
  std::string metrics_path;
  std::string last_checkpoint;
  std::string best_checkpoint;
};

// Teacher-forced loop: shuffled batches, Adam updates, periodic dev
// evaluation (loss + BLEU), best/last checkpoints, early stopping after
// `patience` steps without a dev-BLEU improvement, metrics CSV
// `step,train_loss,dev_loss,dev_bleu`. Non-finite loss raises
// DivergenceError. `resume_from` continues bit-exactly from a checkpoint.
TrainResult train(Model& model, const TrainDataset& train_set,
                  const TrainDataset& dev_set, const Vocabulary& vocab,
                  const TrainSettings& settings, const std::string& out_dir,
                  const std::map<std::string, std::string>& config_snapshot,
                  const std::string& resume_from = "");

// Token-weighted teacher-forced loss over a whole split (inference statistics).
double dataset_loss(Model& model, const TrainDataset& data, int batch_size,
                    int length_cap);

// Translate every example and score against the references.
double corpus_bleu(Model& model, const TrainDataset& data, const Vocabulary& vocab,
                   int beam_width, int max_len);

// Fraction of examples whose translation matches the reference at the final
// (image-determined) slot.
double ambiguous_accuracy(Model& model, const TrainDataset& data,
                          const Vocabulary& vocab, int beam_width, int max_len);

// ---------------------------------------------------------------------------
// Experiment grid

struct GridCell {
  RunVariant variant = RunVariant::kTextOnly;
  int runs = 0;
  double bleu_mean = 0.0, bleu_sd = 0.0;
  double acc_mean = 0.0, acc_sd = 0.0;
};

// Trains every variant with every seed (>= 2 required) and aggregates dev
// BLEU and ambiguous-slot accuracy of the best checkpoints to mean +- sd.
std::vector<GridCell> run_grid(const std::vector<RunVariant>& variants,
                               const std::vector<std::uint64_t>& seeds,
                               const ConfigFile& base, const PreparedData& data,
                               const std::string& work_dir);
std::string format_grid(const std::vector<GridCell>& cells);

}  // namespace mmt
