#include "mmt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmt {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss

TensorPtr nll_loss(const std::vector<std::vector<TensorPtr>>& step_logits,
                   const std::vector<std::vector<int>>& tgt_out,
                   const std::vector<std::vector<int>>& tgt_mask) {
  if (step_logits.size() != tgt_out.size() || step_logits.size() != tgt_mask.size())
    throw ShapeError("loss: row counts differ");
  std::vector<TensorPtr> terms;
  for (std::size_t b = 0; b < step_logits.size(); ++b) {
    std::size_t prefix = 0;
    while (prefix < tgt_mask[b].size() && tgt_mask[b][prefix] == 1) ++prefix;
    if (step_logits[b].size() != prefix)
      throw ShapeError("loss: logits do not cover the unmasked target prefix");
    if (tgt_out[b].size() < prefix)
      throw ShapeError("loss: target row shorter than its mask");
    for (std::size_t t = 0; t < prefix; ++t)
      terms.push_back(nll(step_logits[b][t], tgt_out[b][t]));
  }
  if (terms.empty()) throw EmptySupportError("loss: no unmasked target tokens");
  // value-ordered sum: batch-row order cannot change the rounding
  std::sort(terms.begin(), terms.end(),
            [](const TensorPtr& a, const TensorPtr& b) { return a->value[0] < b->value[0]; });
  return affine(add_n(terms), 1.0 / static_cast<double>(terms.size()), 0.0);
}

// ---------------------------------------------------------------------------
// Adam

AdamOptimizer::AdamOptimizer(ParameterStore& store, const OptimizerConfig& cfg)
    : store_(store), cfg_(cfg) {
  cfg_.validate();
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& up : store_.items()) {
    Parameter& p = *up;
    if (!p.trainable) continue;
    const std::size_t n = p.value->value.size();
    if (p.adam_m.size() != n) {
      p.adam_m.assign(n, 0.0);
      p.adam_v.assign(n, 0.0);
    }
    const bool has_grad = p.value->grad.size() == n;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = has_grad ? p.value->grad[i] : 0.0;
      const double m = store_round(cfg_.beta1 * p.adam_m[i] + (1.0 - cfg_.beta1) * g);
      const double v =
          store_round(cfg_.beta2 * p.adam_v[i] + (1.0 - cfg_.beta2) * g * g);
      p.adam_m[i] = m;
      p.adam_v[i] = v;
      const double update =
          cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.adam_eps);
      p.value->value[i] = store_round(p.value->value[i] - update);
    }
  }
}

// ---------------------------------------------------------------------------
// BLEU

double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::string>& references, int max_n) {
  if (candidates.empty()) throw ParamError("bleu: empty corpus");
  if (candidates.size() != references.size())
    throw ParamError("bleu: candidate and reference counts differ");
  if (max_n < 1) throw ParamError("bleu: max_n must be at least 1");

  std::vector<long> matched(max_n + 1, 0), total(max_n + 1, 0);
  long c_len = 0, r_len = 0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    auto ctoks = tokenize(candidates[k]);
    auto rtoks = tokenize(references[k]);
    c_len += static_cast<long>(ctoks.size());
    r_len += static_cast<long>(rtoks.size());
    for (int n = 1; n <= max_n; ++n) {
      auto grams = [n](const std::vector<std::string>& toks) {
        std::map<std::string, long> counts;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
          std::string key;
          for (int j = 0; j < n; ++j) {
            if (j) key += '\x1f';
            key += toks[i + j];
          }
          ++counts[key];
        }
        return counts;
      };
      auto cg = grams(ctoks);
      auto rg = grams(rtoks);
      for (const auto& [gram, count] : cg) {
        auto it = rg.find(gram);
        matched[n] += std::min(count, it == rg.end() ? 0L : it->second);
        total[n] += count;
      }
    }
  }

  if (matched[1] == 0 || c_len == 0) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    double p = n == 1 ? static_cast<double>(matched[1]) / static_cast<double>(total[1])
                      : static_cast<double>(matched[n] + 1) /
                            static_cast<double>(total[n] + 1);
    log_sum += std::log(p);
  }
  double bp = c_len >= r_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return bp * std::exp(log_sum / max_n);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_block(std::ofstream& os, const std::vector<double>& data) {
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

void read_block(std::ifstream& is, std::uint64_t offset, std::vector<double>& out) {
  is.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
  is.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(out.size() * sizeof(double)));
  if (!is) throw IoError("checkpoint payload truncated");
}

json load_manifest(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw IoError("cannot read checkpoint manifest: " + dir);
  try {
    return json::parse(mf);
  } catch (const json::exception& e) {
    throw CompatibilityError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace

void save_checkpoint(const std::string& dir, const Model& model,
                     const AdamOptimizer* opt, const TrainerState& state,
                     const std::map<std::string, std::string>& config_snapshot) {
  fs::create_directories(dir);
  std::ofstream bin(dir + "/params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write checkpoint payload: " + dir);

  json blocks = json::array();
  std::uint64_t offset = 0;
  auto emit = [&](const std::string& name, const char* kind,
                  const std::vector<double>& data) {
    write_block(bin, data);
    blocks.push_back({{"name", name},
                      {"kind", kind},
                      {"offset", offset},
                      {"count", data.size()}});
    offset += data.size();
  };
  for (const auto& up : model.store().items()) {
    emit(up->name, "value", up->value->value);
    if (!up->adam_m.empty()) emit(up->name, "adam_m", up->adam_m);
    if (!up->adam_v.empty()) emit(up->name, "adam_v", up->adam_v);
  }
  for (const auto& [name, buf] : model.store().buffers()) emit(name, "buffer", *buf);
  bin.flush();
  if (!bin) throw IoError("failed writing checkpoint payload: " + dir);

  json manifest = {
      {"format", 1},
      {"variant", variant_name(model.config().variant)},
      {"seed", model.seed()},
      {"step", state.step},
      {"epoch", state.epoch},
      {"batch_idx", state.batch_idx},
      {"adam_t", opt ? opt->steps_taken() : state.adam_t},
      {"best_step", state.best_step},
      {"best_dev_bleu", state.best_dev_bleu},
      {"best_dev_loss", state.best_dev_loss},
      {"dropout_rng", state.dropout_rng},
      {"config", config_snapshot},
      {"blocks", blocks},
  };
  std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
  if (!mf) throw IoError("cannot write checkpoint manifest: " + dir);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("failed writing checkpoint manifest: " + dir);
}

TrainerState load_checkpoint(const std::string& dir, Model& model, AdamOptimizer* opt) {
  json manifest = load_manifest(dir);
  if (manifest.value("format", 0) != 1)
    throw CompatibilityError("unsupported checkpoint format");
  if (manifest.value("variant", "") != variant_name(model.config().variant))
    throw CompatibilityError("checkpoint was trained with variant '" +
                             manifest.value("variant", "") + "'");

  struct Block {
    std::uint64_t offset = 0, count = 0;
    bool used = false;
  };
  std::map<std::string, Block> blocks;
  for (const auto& b : manifest.at("blocks"))
    blocks[b.at("kind").get<std::string>() + "\x1f" + b.at("name").get<std::string>()] =
        {b.at("offset").get<std::uint64_t>(), b.at("count").get<std::uint64_t>(), false};

  std::ifstream bin(dir + "/params.bin", std::ios::binary);
  if (!bin) throw IoError("cannot read checkpoint payload: " + dir);

  auto fill = [&](const std::string& kind, const std::string& name,
                  std::vector<double>& out, bool required) {
    auto it = blocks.find(kind + "\x1f" + name);
    if (it == blocks.end()) {
      if (required)
        throw CompatibilityError("checkpoint is missing " + kind + " '" + name + "'");
      return false;
    }
    if (it->second.count != out.size())
      throw CompatibilityError("checkpoint size mismatch for " + kind + " '" + name +
                               "'");
    read_block(bin, it->second.offset, out);
    it->second.used = true;
    return true;
  };

  for (const auto& up : model.store().items()) {
    fill("value", up->name, up->value->value, true);
    std::size_t n = up->value->value.size();
    std::vector<double> m(n, 0.0), v(n, 0.0);
    if (fill("adam_m", up->name, m, false)) up->adam_m = std::move(m);
    if (fill("adam_v", up->name, v, false)) up->adam_v = std::move(v);
  }
  for (const auto& [name, buf] : model.store().buffers())
    fill("buffer", name, *buf, true);
  for (const auto& [key, blk] : blocks)
    if (!blk.used)
      throw CompatibilityError("checkpoint block has no target in this model: " +
                               key.substr(key.find('\x1f') + 1));

  TrainerState st;
  st.step = manifest.value("step", 0);
  st.epoch = manifest.value("epoch", 0);
  st.batch_idx = manifest.value("batch_idx", 0);
  st.adam_t = manifest.value("adam_t", 0);
  st.best_step = manifest.value("best_step", 0);
  st.best_dev_bleu = manifest.value("best_dev_bleu", -1.0);
  st.best_dev_loss = manifest.value("best_dev_loss", 0.0);
  st.dropout_rng = manifest.value("dropout_rng", "");
  if (opt) opt->set_steps_taken(st.adam_t);
  return st;
}

CheckpointInfo read_checkpoint_info(const std::string& dir) {
  json manifest = load_manifest(dir);
  CheckpointInfo info;
  info.variant = manifest.value("variant", "");
  info.seed = manifest.value("seed", std::uint64_t{0});
  info.step = manifest.value("step", 0);
  if (manifest.contains("config"))
    info.config = manifest.at("config").get<std::map<std::string, std::string>>();
  return info;
}

// ---------------------------------------------------------------------------
// Data plumbing

TrainDataset encode_dataset(const Corpus& corpus, const BpeModel& bpe,
                            const Vocabulary& vocab, const PreprocessConfig& pp) {
  if (corpus.tgt_lines.size() != corpus.src_lines.size())
    throw PairingError("dataset: source and target line counts differ");
  TrainDataset out;
  bool has_images = !corpus.image_paths.empty();
  if (has_images && corpus.image_paths.size() != corpus.src_lines.size())
    throw PairingError("dataset: image and sentence counts differ");

  std::mt19937_64 pp_rng = make_rng(0x5050, 0);
  for (std::size_t i = 0; i < corpus.src_lines.size(); ++i) {
    Example ex;
    ex.src_ids = encode_line(corpus.src_lines[i], bpe, vocab);
    ex.tgt_ids = encode_line(corpus.tgt_lines[i], bpe, vocab);
    ex.image_index = has_images ? static_cast<int>(i) : -1;
    out.examples.push_back(std::move(ex));
    out.references.push_back(corpus.tgt_lines[i]);
    if (has_images)
      out.images.push_back(preprocess_image(read_image(corpus.image_paths[i]), pp, pp_rng));
  }
  return out;
}

PreparedData prepare_datasets(const Corpus& train_corpus, const Corpus& dev_corpus,
                              int bpe_merges, const PreprocessConfig& pp) {
  std::vector<std::string> lines = train_corpus.src_lines;
  lines.insert(lines.end(), train_corpus.tgt_lines.begin(), train_corpus.tgt_lines.end());
  PreparedData data;
  data.bpe = BpeModel::learn(lines, bpe_merges);
  data.vocab = build_vocabulary(lines, data.bpe);
  data.train = encode_dataset(train_corpus, data.bpe, data.vocab, pp);
  data.dev = encode_dataset(dev_corpus, data.bpe, data.vocab, pp);
  return data;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

double dataset_loss(Model& model, const TrainDataset& data, int batch_size,
                    int length_cap) {
  auto batches = make_batches(data.examples, batch_size, length_cap, false, 0);
  double weighted = 0.0;
  long tokens = 0;
  for (const auto& batch : batches) {
    long n = 0;
    for (const auto& row : batch.tgt_mask)
      for (int m : row) n += m;
    weighted += model.batch_loss_value(batch, data.images) * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw EmptySupportError("dataset loss: no target tokens");
  return weighted / static_cast<double>(tokens);
}

namespace {

std::string translate_line(Model& model, const TrainDataset& data, std::size_t i,
                           const Vocabulary& vocab, int beam_width, int max_len) {
  const Example& ex = data.examples[i];
  const Image* img = nullptr;
  if (model.config().uses_image()) {
    if (ex.image_index < 0 || ex.image_index >= static_cast<int>(data.images.size()))
      throw PairingError("translate: example has no image");
    img = &data.images[ex.image_index];
  }
  return decode_ids(model.translate(ex.src_ids, img, beam_width, max_len), vocab);
}

}  // namespace

double corpus_bleu(Model& model, const TrainDataset& data, const Vocabulary& vocab,
                   int beam_width, int max_len) {
  std::vector<std::string> candidates;
  candidates.reserve(data.examples.size());
  for (std::size_t i = 0; i < data.examples.size(); ++i)
    candidates.push_back(translate_line(model, data, i, vocab, beam_width, max_len));
  return bleu(candidates, data.references);
}

double ambiguous_accuracy(Model& model, const TrainDataset& data,
                          const Vocabulary& vocab, int beam_width, int max_len) {
  if (data.examples.empty()) throw ParamError("accuracy: empty corpus");
  long correct = 0;
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    auto cand = tokenize(translate_line(model, data, i, vocab, beam_width, max_len));
    auto ref = tokenize(data.references[i]);
    if (ref.empty()) throw EmptySupportError("accuracy: empty reference");
    std::size_t slot = ref.size() - 1;
    if (cand.size() > slot && cand[slot] == ref[slot]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.examples.size());
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(Model& model, const TrainDataset& train_set,
                  const TrainDataset& dev_set, const Vocabulary& vocab,
                  const TrainSettings& settings, const std::string& out_dir,
                  const std::map<std::string, std::string>& config_snapshot,
                  const std::string& resume_from) {
  settings.validate();
  fs::create_directories(out_dir);

  AdamOptimizer opt(model.store(), settings.opt);
  TrainerState st;
  std::mt19937_64 dropout_rng = make_rng(settings.seed, 0xD209);
  const bool fresh = resume_from.empty();
  if (!fresh) {
    st = load_checkpoint(resume_from, model, &opt);
    if (st.dropout_rng.empty())
      throw CompatibilityError("checkpoint lacks generator state; cannot resume");
    std::istringstream(st.dropout_rng) >> dropout_rng;
  }

  TrainResult res;
  res.metrics_path = out_dir + "/metrics.csv";
  res.last_checkpoint = out_dir + "/checkpoint";
  res.best_checkpoint = out_dir + "/checkpoint_best";

  std::ofstream csv(res.metrics_path,
                    fresh ? std::ios::trunc : std::ios::app);
  if (!csv) throw IoError("cannot write metrics log: " + res.metrics_path);
  if (fresh) csv << "step,train_loss,dev_loss,dev_bleu\n";

  auto epoch_batches = [&](int epoch) {
    return make_batches(train_set.examples, settings.opt.batch, settings.length_cap,
                        true, mix_seed(settings.seed, 0xE70C00 + epoch));
  };
  std::vector<Batch> batches = epoch_batches(st.epoch);

  double train_loss = 0.0;
  while (st.step < settings.max_steps) {
    if (st.batch_idx >= static_cast<int>(batches.size())) {
      ++st.epoch;
      st.batch_idx = 0;
      batches = epoch_batches(st.epoch);
    }
    const Batch& batch = batches[st.batch_idx++];

    RunContext ctx;
    ctx.train = true;
    ctx.update_stats = true;
    ctx.dropout = model.config().dropout;
    ctx.rng = &dropout_rng;

    try {
      Tape tape;
      TensorPtr loss;
      {
        TapeScope scope(tape);
        loss = model.batch_loss(batch, train_set.images, ctx);
      }
      train_loss = loss->value[0];
      if (!std::isfinite(train_loss))
        throw DivergenceError("training diverged at step " +
                              std::to_string(st.step + 1) +
                              " (loss = " + fmt17(train_loss) + ")");
      model.store().zero_grad();
      tape.backward(loss);
    } catch (const NonFiniteError& e) {
      // op-level overflow guards fire before the loss materializes
      throw DivergenceError("training diverged at step " +
                            std::to_string(st.step + 1) + ": " + e.what());
    }
    opt.step();
    ++st.step;

    if (st.step % settings.eval_every == 0 || st.step == settings.max_steps) {
      double dev_loss =
          dataset_loss(model, dev_set, settings.opt.batch, settings.length_cap);
      double dev_b = corpus_bleu(model, dev_set, vocab, settings.eval_beam,
                                 model.config().max_len);
      csv << st.step << ',' << fmt17(train_loss) << ',' << fmt17(dev_loss) << ','
          << fmt17(dev_b) << '\n';
      csv.flush();

      st.adam_t = opt.steps_taken();
      {
        std::ostringstream os;
        os << dropout_rng;
        st.dropout_rng = os.str();
      }
      if (dev_b > st.best_dev_bleu) {
        st.best_dev_bleu = dev_b;
        st.best_dev_loss = dev_loss;
        st.best_step = st.step;
        save_checkpoint(res.best_checkpoint, model, &opt, st, config_snapshot);
      }
      save_checkpoint(res.last_checkpoint, model, &opt, st, config_snapshot);
      if (st.step - st.best_step >= settings.patience) {
        res.early_stopped = true;
        break;
      }
    }
  }

  res.steps = st.step;
  res.best_step = st.best_step;
  res.best_dev_bleu = st.best_dev_bleu;
  res.best_dev_loss = st.best_dev_loss;
  res.final_train_loss = train_loss;
  return res;
}

// ---------------------------------------------------------------------------
// Experiment grid

std::vector<GridCell> run_grid(const std::vector<RunVariant>& variants,
                               const std::vector<std::uint64_t>& seeds,
                               const ConfigFile& base, const PreparedData& data,
                               const std::string& work_dir) {
  if (variants.empty()) throw ParamError("grid: no variants");
  if (seeds.size() < 2) throw ParamError("grid: at least two seeds required");

  std::vector<GridCell> cells;
  for (RunVariant variant : variants) {
    std::vector<double> bleus, accs;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      ConfigFile cf = base;
      cf.model.variant = variant;
      cf.model.vocab_size = data.vocab.size();
      cf.train.seed = seeds[si];
      cf.model.finalize();
      Model model(cf.model, seeds[si]);
      std::string run_dir = work_dir + "/" + variant_name(variant) + "/seed" +
                            std::to_string(si);
      TrainResult res = train(model, data.train, data.dev, data.vocab, cf.train,
                              run_dir, config_snapshot(cf));
      load_checkpoint(res.best_checkpoint, model, nullptr);
      bleus.push_back(res.best_dev_bleu);
      accs.push_back(ambiguous_accuracy(model, data.dev, data.vocab,
                                        cf.train.eval_beam, cf.model.max_len));
    }
    auto mean_sd = [](const std::vector<double>& xs) {
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double ss = 0.0;
      for (double x : xs) ss += (x - mean) * (x - mean);
      double sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
      return std::pair<double, double>{mean, sd};
    };
    GridCell cell;
    cell.variant = variant;
    cell.runs = static_cast<int>(seeds.size());
    std::tie(cell.bleu_mean, cell.bleu_sd) = mean_sd(bleus);
    std::tie(cell.acc_mean, cell.acc_sd) = mean_sd(accs);
    cells.push_back(cell);
  }
  return cells;
}

std::string format_grid(const std::vector<GridCell>& cells) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-36s %4s  %-19s %-19s\n", "variant", "runs",
                "dev_bleu", "ambig_acc");
  os << line;
  for (const auto& c : cells) {
    std::snprintf(line, sizeof line, "%-36s %4d  %7.4f +- %-7.4f  %7.4f +- %-7.4f\n",
                  variant_name(c.variant), c.runs, c.bleu_mean, c.bleu_sd, c.acc_mean,
                  c.acc_sd);
    os << line;
  }
  return os.str();
}

}  // namespace mmt
