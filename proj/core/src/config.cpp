#include "mmt/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmt {

namespace {

const std::vector<std::pair<RunVariant, const char*>>& variant_table() {
  static const std::vector<std::pair<RunVariant, const char*>> table = {
      {RunVariant::kTextOnly, "text_only"},
      {RunVariant::kBaselinePool5, "baseline_pool5_frozen_pretrainless"},
      {RunVariant::kCbnConv, "cbn_conv"},
      {RunVariant::kCbnPool5, "cbn_pool5"},
      {RunVariant::kCbnPool5V2, "cbn_pool5_v2"},
      {RunVariant::kCbnPool5Finetune, "cbn_pool5_finetune"},
      {RunVariant::kCbnEncAtt, "cbn_enc_att"},
  };
  return table;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& value, const std::string& where) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + value + "'");
  }
}

long long parse_int(const std::string& value, const std::string& where) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an integer, got '" + value + "'");
  }
}

bool parse_bool(const std::string& value, const std::string& where) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(where + ": expected true/false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const char* variant_name(RunVariant v) {
  for (const auto& [vv, name] : variant_table())
    if (vv == v) return name;
  throw ParamError("unknown variant enum value");
}

RunVariant parse_variant(const std::string& name) {
  for (const auto& [v, n] : variant_table())
    if (name == n) return v;
  std::string valid;
  for (const auto& [v, n] : variant_table()) {
    if (!valid.empty()) valid += ", ";
    valid += n;
  }
  throw ConfigError("unknown variant '" + name + "' (valid: " + valid + ")");
}

const std::vector<RunVariant>& all_variants() {
  static const std::vector<RunVariant> all = [] {
    std::vector<RunVariant> v;
    for (const auto& [vv, name] : variant_table()) v.push_back(vv);
    return v;
  }();
  return all;
}

const char* cbn_stages_name(CbnStages s) {
  switch (s) {
    case CbnStages::kAll: return "all";
    case CbnStages::k2to4: return "2-4";
    case CbnStages::k3to4: return "3-4";
  }
  throw ParamError("unknown stage-selection enum value");
}

CbnStages parse_cbn_stages(const std::string& name) {
  if (name == "all") return CbnStages::kAll;
  if (name == "2-4") return CbnStages::k2to4;
  if (name == "3-4") return CbnStages::k3to4;
  throw ConfigError("unknown cbn_stages '" + name + "' (valid: all, 2-4, 3-4)");
}

void OptimizerConfig::validate() const {
  // zero is legal: a zero-rate optimizer must leave weights bitwise unchanged
  if (!(lr >= 0.0)) throw ConfigError("learning_rate must not be negative");
  if (!(adam_eps > 0.0)) throw ConfigError("optimizer_epsilon must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("adam betas must lie in [0,1)");
  if (batch < 1) throw ConfigError("batch_size must be at least 1");
}

void ModelConfig::finalize() {
  resnet.variant =
      variant == RunVariant::kCbnPool5V2 ? ResNetVariant::kV2 : ResNetVariant::kV1;
  resnet.finetune_last_stage = variant == RunVariant::kCbnPool5Finetune;
  if (cbn()) {
    switch (cbn_stages) {
      case CbnStages::kAll: resnet.conditional_stages = {1, 2, 3, 4}; break;
      case CbnStages::k2to4: resnet.conditional_stages = {2, 3, 4}; break;
      case CbnStages::k3to4: resnet.conditional_stages = {3, 4}; break;
    }
  } else {
    resnet.conditional_stages = {};
  }
}

void ModelConfig::validate() const {
  if (vocab_size <= tok::kReserved)
    throw ConfigError("vocab_size must exceed the reserved ids");
  if (d_emb < 1 || d_state < 1 || d_att < 1 || d_cond < 1)
    throw ConfigError("model widths must be positive");
  auto keep_ok = [](double k) { return k > 0.0 && k <= 1.0; };
  if (!keep_ok(dropout.gru_in) || !keep_ok(dropout.gru_out) ||
      !keep_ok(dropout.cgru_in) || !keep_ok(dropout.cgru_out) ||
      !keep_ok(dropout.softmax_out))
    throw ConfigError("dropout keep probabilities must lie in (0,1]");
  if (beam_width < 1) throw ConfigError("beam_size must be at least 1");
  if (max_len < 1) throw ConfigError("max_len must be at least 1");
  if (length_penalty < 0.0) throw ConfigError("length_penalty must be non-negative");
  if (conv_remodulate && variant != RunVariant::kCbnConv)
    throw ConfigError("conv_remodulate only applies to the cbn_conv variant");
  resnet.validate();
}

void TrainSettings::validate() const {
  opt.validate();
  if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
  if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (eval_beam < 1) throw ConfigError("eval_beam must be at least 1");
  if (length_cap < 1) throw ConfigError("length_cap must be at least 1");
  if (bpe_merges < 0) throw ConfigError("bpe_merges must be non-negative");
}

void apply_config_pair(ConfigFile& cfg, const std::string& key, const std::string& value,
                       const std::string& where) {
  ModelConfig& m = cfg.model;
  TrainSettings& t = cfg.train;
  if (key == "variant") {
    try {
      m.variant = parse_variant(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  } else if (key == "cbn_stages") {
    try {
      m.cbn_stages = parse_cbn_stages(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  } else if (key == "vocab_size") {
    m.vocab_size = static_cast<int>(parse_int(value, where));
  } else if (key == "embeddings") {
    m.d_emb = static_cast<int>(parse_int(value, where));
  } else if (key == "gru_layer_size") {
    m.d_state = static_cast<int>(parse_int(value, where));
  } else if (key == "attention_size") {
    m.d_att = static_cast<int>(parse_int(value, where));
  } else if (key == "cond_size") {
    m.d_cond = static_cast<int>(parse_int(value, where));
  } else if (key == "gru_input_dropout") {
    m.dropout.gru_in = parse_double(value, where);
  } else if (key == "gru_output_dropout") {
    m.dropout.gru_out = parse_double(value, where);
  } else if (key == "cgru_input_dropout") {
    m.dropout.cgru_in = parse_double(value, where);
  } else if (key == "cgru_output_dropout") {
    m.dropout.cgru_out = parse_double(value, where);
  } else if (key == "softmax_output_dropout") {
    m.dropout.softmax_out = parse_double(value, where);
  } else if (key == "stop_gradient_q") {
    m.stop_gradient_q = parse_bool(value, where);
  } else if (key == "conv_remodulate") {
    m.conv_remodulate = parse_bool(value, where);
  } else if (key == "fusion") {
    if (value == "gate")
      m.fusion = FusionMode::kGate;
    else if (value == "concat")
      m.fusion = FusionMode::kConcat;
    else
      throw ConfigError(where + ": fusion must be gate or concat, got '" + value + "'");
  } else if (key == "layer_norm") {
    if (value == "none")
      m.layer_norm = LayerNormPlacement::kNone;
    else if (value == "gate_preact")
      m.layer_norm = LayerNormPlacement::kGatePreact;
    else
      throw ConfigError(where + ": layer_norm must be none or gate_preact, got '" +
                        value + "'");
  } else if (key == "attention_normalizer") {
    if (value == "softmax")
      m.normalizer = AttentionNormalizer::kSoftmax;
    else if (value == "ratio")
      m.normalizer = AttentionNormalizer::kRatio;
    else
      throw ConfigError(where + ": attention_normalizer must be softmax or ratio, got '" +
                        value + "'");
  } else if (key == "beam_size") {
    m.beam_width = static_cast<int>(parse_int(value, where));
  } else if (key == "max_len") {
    m.max_len = static_cast<int>(parse_int(value, where));
  } else if (key == "length_penalty") {
    m.length_penalty = parse_double(value, where);
  } else if (key == "cbn_decay") {
    m.resnet.bn_decay = parse_double(value, where);
  } else if (key == "cbn_epsilon") {
    m.resnet.bn_eps = parse_double(value, where);
  } else if (key == "cbn_mlp_hidden") {
    m.resnet.cond_hidden = static_cast<int>(parse_int(value, where));
  } else if (key == "image_size") {
    int s = static_cast<int>(parse_int(value, where));
    m.resnet.input_h = s;
    m.resnet.input_w = s;
  } else if (key == "learning_rate") {
    t.opt.lr = parse_double(value, where);
  } else if (key == "optimizer_epsilon") {
    t.opt.adam_eps = parse_double(value, where);
  } else if (key == "adam_beta1") {
    t.opt.beta1 = parse_double(value, where);
  } else if (key == "adam_beta2") {
    t.opt.beta2 = parse_double(value, where);
  } else if (key == "batch_size") {
    t.opt.batch = static_cast<int>(parse_int(value, where));
  } else if (key == "max_steps") {
    t.max_steps = static_cast<int>(parse_int(value, where));
  } else if (key == "eval_every") {
    t.eval_every = static_cast<int>(parse_int(value, where));
  } else if (key == "patience") {
    t.patience = static_cast<int>(parse_int(value, where));
  } else if (key == "eval_beam") {
    t.eval_beam = static_cast<int>(parse_int(value, where));
  } else if (key == "length_cap") {
    t.length_cap = static_cast<int>(parse_int(value, where));
  } else if (key == "bpe_merges") {
    t.bpe_merges = static_cast<int>(parse_int(value, where));
  } else if (key == "seed") {
    t.seed = static_cast<std::uint64_t>(parse_int(value, where));
  } else {
    throw ConfigError(where + ": unknown key '" + key + "'");
  }
  cfg.raw[key] = value;
}

ConfigFile parse_config_text(const std::string& text, const std::string& source_name) {
  ConfigFile cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    std::string where = source_name + ":" + std::to_string(line_no);
    std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected 'key = value', got '" + stripped + "'");
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    apply_config_pair(cfg, key, value, where);
  }
  return cfg;
}

ConfigFile load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::map<std::string, std::string> config_snapshot(const ConfigFile& cfg) {
  const ModelConfig& m = cfg.model;
  const TrainSettings& t = cfg.train;
  std::map<std::string, std::string> out;
  out["variant"] = variant_name(m.variant);
  out["cbn_stages"] = cbn_stages_name(m.cbn_stages);
  out["vocab_size"] = std::to_string(m.vocab_size);
  out["embeddings"] = std::to_string(m.d_emb);
  out["gru_layer_size"] = std::to_string(m.d_state);
  out["attention_size"] = std::to_string(m.d_att);
  out["cond_size"] = std::to_string(m.d_cond);
  out["gru_input_dropout"] = format_double(m.dropout.gru_in);
  out["gru_output_dropout"] = format_double(m.dropout.gru_out);
  out["cgru_input_dropout"] = format_double(m.dropout.cgru_in);
  out["cgru_output_dropout"] = format_double(m.dropout.cgru_out);
  out["softmax_output_dropout"] = format_double(m.dropout.softmax_out);
  out["stop_gradient_q"] = m.stop_gradient_q ? "true" : "false";
  out["conv_remodulate"] = m.conv_remodulate ? "true" : "false";
  out["fusion"] = m.fusion == FusionMode::kGate ? "gate" : "concat";
  out["layer_norm"] =
      m.layer_norm == LayerNormPlacement::kNone ? "none" : "gate_preact";
  out["attention_normalizer"] =
      m.normalizer == AttentionNormalizer::kSoftmax ? "softmax" : "ratio";
  out["beam_size"] = std::to_string(m.beam_width);
  out["max_len"] = std::to_string(m.max_len);
  out["length_penalty"] = format_double(m.length_penalty);
  out["cbn_decay"] = format_double(m.resnet.bn_decay);
  out["cbn_epsilon"] = format_double(m.resnet.bn_eps);
  out["cbn_mlp_hidden"] = std::to_string(m.resnet.cond_hidden);
  out["image_size"] = std::to_string(m.resnet.input_h);
  out["learning_rate"] = format_double(t.opt.lr);
  out["optimizer_epsilon"] = format_double(t.opt.adam_eps);
  out["adam_beta1"] = format_double(t.opt.beta1);
  out["adam_beta2"] = format_double(t.opt.beta2);
  out["batch_size"] = std::to_string(t.opt.batch);
  out["max_steps"] = std::to_string(t.max_steps);
  out["eval_every"] = std::to_string(t.eval_every);
  out["patience"] = std::to_string(t.patience);
  out["eval_beam"] = std::to_string(t.eval_beam);
  out["length_cap"] = std::to_string(t.length_cap);
  out["bpe_merges"] = std::to_string(t.bpe_merges);
  out["seed"] = std::to_string(t.seed);
  return out;
}

}  // namespace mmt
