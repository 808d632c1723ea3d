// Command-line entry points: synthetic corpus generation, training,
// translation, gradient verification, BLEU scoring, and the variant grid.
//
// Exit codes: 0 success, 1 failed check or runtime error, 2 usage/config
// error.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmt/gradcheck.hpp"
#include "mmt/model.hpp"
#include "mmt/training.hpp"

namespace fs = std::filesystem;
using namespace mmt;

namespace {

// ---------------------------------------------------------------------------
// Small utilities

std::string now_utc() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string git_describe() {
  FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[256];
  std::string out;
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  ::pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

// MMT_THREADS bounds any internal parallelism; everything here is currently
// single-threaded, but the value must still be sane when provided.
void check_threads_env() {
  const char* v = std::getenv("MMT_THREADS");
  if (!v || !*v) return;
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1)
    throw ConfigError("MMT_THREADS must be a positive integer, got '" +
                      std::string(v) + "'");
}

PreprocessConfig preprocess_for(const ModelConfig& cfg) {
  PreprocessConfig pp;
  pp.crop_h = cfg.resnet.input_h;
  pp.crop_w = cfg.resnet.input_w;
  pp.augment = false;
  return pp;
}

Corpus load_split(const std::string& dir, const std::string& split) {
  std::string idx = dir + "/" + split + ".idx";
  return load_corpus(dir + "/" + split + ".src", dir + "/" + split + ".tgt",
                     fs::exists(idx) ? idx : std::string());
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(int n, std::uint64_t seed, const std::string& out,
              const std::string& split, int h, int w) {
  if (n < 1) throw ConfigError("--n must be at least 1");
  write_split(out, split, synth_corpus(n, seed, h, w));
  std::cout << "wrote " << n << " aligned examples to " << out << "/" << split
            << ".{src,tgt,idx}\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const std::string& config_path, const std::string& variant,
              const std::string& data_dir, const std::string& out_dir,
              const std::vector<std::string>& overrides, std::int64_t seed_flag,
              const std::string& resume) {
  ConfigFile cf;
  if (!config_path.empty()) cf = load_config_file(config_path);
  if (!variant.empty()) cf.model.variant = parse_variant(variant);
  for (const std::string& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_pair(cf, kv.substr(0, eq), kv.substr(eq + 1), "--set " + kv);
  }
  if (seed_flag >= 0) cf.train.seed = static_cast<std::uint64_t>(seed_flag);

  Corpus train_corpus = load_split(data_dir, "train");
  Corpus dev_corpus = load_split(data_dir, "dev");
  PreparedData data = prepare_datasets(train_corpus, dev_corpus, cf.train.bpe_merges,
                                       preprocess_for(cf.model));
  cf.model.vocab_size = data.vocab.size();
  cf.model.finalize();
  cf.model.validate();
  cf.train.validate();

  fs::create_directories(out_dir);
  data.bpe.save(out_dir + "/merges.txt");
  data.vocab.save(out_dir + "/vocab.txt");

  // the run record is written before the first step and never touched again
  std::string manifest_path = out_dir + "/run_manifest.json";
  if (resume.empty() || !fs::exists(manifest_path)) {
    nlohmann::json manifest = {
        {"variant", variant_name(cf.model.variant)},
        {"seed", cf.train.seed},
        {"git", git_describe()},
        {"start_time", now_utc()},
        {"config", config_snapshot(cf)},
    };
    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw IoError("cannot write " + manifest_path);
    mf << manifest.dump(2) << "\n";
  }

  Model model(cf.model, cf.train.seed);
  TrainResult res = train(model, data.train, data.dev, data.vocab, cf.train, out_dir,
                          config_snapshot(cf), resume);

  {
    nlohmann::json done = {
        {"end_time", now_utc()},       {"steps", res.steps},
        {"best_step", res.best_step},  {"best_dev_bleu", res.best_dev_bleu},
        {"best_dev_loss", res.best_dev_loss}, {"early_stopped", res.early_stopped},
    };
    std::ofstream ef(out_dir + "/run_end.json", std::ios::trunc);
    ef << done.dump(2) << "\n";
  }

  std::printf("trained %d steps (best step %d, dev_bleu %.6f, dev_loss %.6f)\n",
              res.steps, res.best_step, res.best_dev_bleu, res.best_dev_loss);
  std::printf("metrics: %s\n", res.metrics_path.c_str());
  std::printf("checkpoints: %s, %s\n", res.last_checkpoint.c_str(),
              res.best_checkpoint.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// translate

int cmd_translate(const std::string& ckpt, const std::string& input_path,
                  const std::string& output_path, const std::string& index_path,
                  std::string vocab_path, std::string merges_path, int beam,
                  int max_len) {
  CheckpointInfo info = read_checkpoint_info(ckpt);
  ConfigFile cf;
  for (const auto& [key, value] : info.config)
    apply_config_pair(cf, key, value, "checkpoint manifest");
  cf.model.finalize();

  fs::path run_dir = fs::path(ckpt).parent_path();
  if (vocab_path.empty()) vocab_path = (run_dir / "vocab.txt").string();
  if (merges_path.empty()) merges_path = (run_dir / "merges.txt").string();
  Vocabulary vocab = Vocabulary::load(vocab_path);
  BpeModel bpe = BpeModel::load(merges_path);
  if (vocab.size() != cf.model.vocab_size)
    throw CompatibilityError("vocabulary has " + std::to_string(vocab.size()) +
                             " entries but the checkpoint expects " +
                             std::to_string(cf.model.vocab_size));

  Model model(cf.model, info.seed);
  load_checkpoint(ckpt, model, nullptr);

  std::vector<std::string> lines;
  lines = read_lines(input_path);

  std::vector<Image> images;
  if (model.config().uses_image()) {
    if (index_path.empty())
      throw PairingError("this checkpoint needs an image per sentence; pass --index");
    std::vector<std::string> paths = read_lines(index_path);
    if (paths.size() != lines.size())
      throw PairingError("image index lists " + std::to_string(paths.size()) +
                         " files for " + std::to_string(lines.size()) + " sentences");
    fs::path base = fs::path(index_path).parent_path();
    PreprocessConfig pp = preprocess_for(model.config());
    std::mt19937_64 rng = make_rng(0, 0);
    for (const std::string& p : paths) {
      fs::path full = fs::path(p).is_absolute() ? fs::path(p) : base / p;
      images.push_back(preprocess_image(read_image(full.string()), pp, rng));
    }
  }

  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!output_path.empty()) {
    out_file.open(output_path, std::ios::trunc);
    if (!out_file) throw IoError("cannot write " + output_path);
    out = &out_file;
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::vector<int> src = encode_line(lines[i], bpe, vocab);
    const Image* img = images.empty() ? nullptr : &images[i];
    *out << decode_ids(model.translate(src, img, beam, max_len), vocab) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

// Reduced geometry keeps the full-model sweep (two evaluations per trainable
// scalar) to seconds per variant.
ConfigFile gradcheck_defaults() {
  ConfigFile cf;
  cf.model.vocab_size = 10;
  cf.model.d_emb = 4;
  cf.model.d_state = 3;
  cf.model.d_att = 4;
  cf.model.d_cond = 3;
  cf.model.dropout = DropoutConfig{};
  cf.model.resnet.input_h = 8;
  cf.model.resnet.input_w = 8;
  cf.model.resnet.stem_channels = 3;
  cf.model.resnet.stage_channels = {3, 4, 4, 5};
  cf.model.resnet.blocks_per_stage = {1, 1, 1, 1};
  cf.model.resnet.stage_end_strides = {2, 2, 1, 1};
  cf.model.resnet.cond_hidden = 4;
  cf.model.resnet.grid_stage = 3;
  return cf;
}

int cmd_gradcheck(const std::string& config_path, const std::string& variant,
                  double eps, bool inject, std::uint64_t seed) {
  if (!(eps > 0.0)) throw ConfigError("--eps must be positive");
  ConfigFile base = config_path.empty() ? gradcheck_defaults()
                                        : load_config_file(config_path);
  if (base.model.vocab_size < 10) base.model.vocab_size = 10;
  base.model.dropout = DropoutConfig{};  // keeps must be 1 for a pure forward

  std::vector<RunVariant> variants;
  if (variant.empty() || variant == "all")
    variants = all_variants();
  else
    variants = {parse_variant(variant)};

  // fixed two-sentence probe batch
  std::vector<Example> ex(2);
  ex[0].src_ids = {4, 5, 6};
  ex[0].tgt_ids = {7, 8};
  ex[0].image_index = 0;
  ex[1].src_ids = {5, 9};
  ex[1].tgt_ids = {6};
  ex[1].image_index = 1;
  Batch batch = make_batches(ex, 2, 16, false, 0)[0];
  std::vector<Image> images(2);
  for (int s = 0; s < 2; ++s) {
    Image& img = images[s];
    img.h = base.model.resnet.input_h;
    img.w = base.model.resnet.input_w;
    img.c = 3;
    img.data.resize(static_cast<std::size_t>(img.h) * img.w * 3);
    for (std::size_t i = 0; i < img.data.size(); ++i)
      img.data[i] =
          0.5f + 0.4f * std::sin(0.13f * static_cast<float>(i + 1) * (3.0f * s + 1.0f));
  }

  set_backward_fault_injection(inject);
  bool all_ok = true;
  for (RunVariant v : variants) {
    ConfigFile cf = base;
    cf.model.variant = v;
    cf.model.finalize();
    Model model(cf.model, seed);

    // move every trainable scalar off its initial value so zero-initialized
    // projections contribute gradient signal too
    std::mt19937_64 rng = make_rng(seed, 0x71E4);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (const auto& up : model.store().items()) {
      if (!up->trainable) continue;
      for (double& x : up->value->value) x += u(rng);
    }

    RunContext ctx;
    ctx.train = true;
    ctx.update_stats = false;
    auto f = [&] { return model.batch_loss(batch, images, ctx)->value[0]; };
    auto grads = [&] {
      Tape tape;
      TensorPtr loss;
      {
        TapeScope scope(tape);
        loss = model.batch_loss(batch, images, ctx);
      }
      model.store().zero_grad();
      tape.backward(loss);
    };
    GradCheckReport report = finite_difference_check(f, model.store(), grads, eps);
    bool ok = report.passed(1e-4);
    all_ok = all_ok && ok;
    std::printf("[%s] %-34s %s\n", ok ? " ok " : "FAIL", variant_name(v),
                report.summary().c_str());
  }
  set_backward_fault_injection(false);
  return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// score

int cmd_score(const std::string& cand_path, const std::string& ref_path) {
  double score = bleu(read_lines(cand_path), read_lines(ref_path));
  std::printf("%.12f\n", score);
  return 0;
}

// ---------------------------------------------------------------------------
// grid

int cmd_grid(const std::string& variants_csv, const std::string& seeds_csv,
             const std::string& config_path, const std::string& data_dir,
             const std::string& out_dir) {
  std::vector<RunVariant> variants;
  {
    std::istringstream ss(variants_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) variants.push_back(parse_variant(item));
  }
  std::vector<std::uint64_t> seeds;
  {
    std::istringstream ss(seeds_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      try {
        seeds.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw ConfigError("--seeds expects integers, got '" + item + "'");
      }
    }
  }
  if (variants.empty()) throw ConfigError("--variants lists no variant");
  if (seeds.size() < 2) throw ConfigError("--seeds needs at least two seeds");

  ConfigFile base;
  if (!config_path.empty()) base = load_config_file(config_path);
  Corpus train_corpus = load_split(data_dir, "train");
  Corpus dev_corpus = load_split(data_dir, "dev");
  PreparedData data = prepare_datasets(train_corpus, dev_corpus, base.train.bpe_merges,
                                       preprocess_for(base.model));

  auto cells = run_grid(variants, seeds, base, data, out_dir);
  std::fputs(format_grid(cells).c_str(), stdout);
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"multimodal translation experiments"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate an aligned synthetic split");
  int synth_n = 0;
  std::uint64_t synth_seed = 1;
  std::string synth_out, synth_split = "train";
  int synth_h = 16, synth_w = 16;
  synth->add_option("--n", synth_n, "number of examples")->required();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--split", synth_split, "split name (train/dev/test)");
  synth->add_option("--height", synth_h, "image height");
  synth->add_option("--width", synth_w, "image width");

  // train
  auto* train_cmd = app.add_subcommand("train", "train one variant");
  std::string tr_config, tr_variant, tr_data, tr_out, tr_resume;
  std::vector<std::string> tr_sets;
  std::int64_t tr_seed = -1;
  train_cmd->add_option("--config", tr_config, "key=value config file");
  train_cmd->add_option("--variant", tr_variant, "model variant");
  train_cmd->add_option("--data", tr_data, "directory with train/dev splits")
      ->required();
  train_cmd->add_option("--out", tr_out, "run output directory")->required();
  train_cmd->add_option("--set", tr_sets, "extra key=value overrides");
  train_cmd->add_option("--seed", tr_seed, "seed override");
  train_cmd->add_option("--resume", tr_resume, "checkpoint directory to resume from");

  // translate
  auto* translate = app.add_subcommand("translate", "translate a file of sentences");
  std::string x_ckpt, x_input, x_output, x_index, x_vocab, x_merges;
  int x_beam = 0, x_max_len = 0;
  translate->add_option("--checkpoint", x_ckpt, "checkpoint directory")->required();
  translate->add_option("--input", x_input, "source sentences, one per line")
      ->required();
  translate->add_option("--output", x_output, "write here instead of stdout");
  translate->add_option("--index", x_index, "image path list aligned with the input");
  translate->add_option("--vocab", x_vocab, "vocabulary file override");
  translate->add_option("--merges", x_merges, "subword merges file override");
  translate->add_option("--beam", x_beam, "beam width (0: from checkpoint config)");
  translate->add_option("--max-len", x_max_len, "length cap (0: from config)");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "verify analytic gradients");
  std::string g_config, g_variant = "all";
  double g_eps = 1e-6;
  bool g_inject = false;
  std::uint64_t g_seed = 7;
  gradcheck->add_option("--config", g_config, "config file (default: tiny geometry)");
  gradcheck->add_option("--variant", g_variant, "one variant or 'all'");
  gradcheck->add_option("--eps", g_eps, "finite-difference step");
  gradcheck->add_option("--seed", g_seed, "weight init seed");
  gradcheck->add_flag("--inject", g_inject,
                      "inject a backward-pass sign bug (must make the check fail)");

  // score
  auto* score = app.add_subcommand("score", "corpus BLEU of candidates vs references");
  std::string s_cand, s_ref;
  score->add_option("--candidates", s_cand, "candidate sentences")->required();
  score->add_option("--references", s_ref, "reference sentences")->required();

  // grid
  auto* grid = app.add_subcommand("grid", "train a variant x seed grid");
  std::string gr_variants, gr_seeds, gr_config, gr_data, gr_out;
  grid->add_option("--variants", gr_variants, "comma-separated variants")->required();
  grid->add_option("--seeds", gr_seeds, "comma-separated seeds (>= 2)")->required();
  grid->add_option("--config", gr_config, "key=value config file");
  grid->add_option("--data", gr_data, "directory with train/dev splits")->required();
  grid->add_option("--out", gr_out, "grid output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    check_threads_env();
    if (synth->parsed())
      return cmd_synth(synth_n, synth_seed, synth_out, synth_split, synth_h, synth_w);
    if (train_cmd->parsed())
      return cmd_train(tr_config, tr_variant, tr_data, tr_out, tr_sets, tr_seed,
                       tr_resume);
    if (translate->parsed())
      return cmd_translate(x_ckpt, x_input, x_output, x_index, x_vocab, x_merges,
                           x_beam, x_max_len);
    if (gradcheck->parsed())
      return cmd_gradcheck(g_config, g_variant, g_eps, g_inject, g_seed);
    if (score->parsed()) return cmd_score(s_cand, s_ref);
    if (grid->parsed())
      return cmd_grid(gr_variants, gr_seeds, gr_config, gr_data, gr_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
