#include "mmt/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace mmt {

// ---------------------------------------------------------------------------
// Tokenization

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream iss(line);
  std::string chunk;
  auto is_punct = [](char ch) {
    return std::ispunct(static_cast<unsigned char>(ch)) != 0;
  };
  while (iss >> chunk) {
    std::size_t begin = 0, end = chunk.size();
    std::vector<std::string> leading, trailing;
    while (begin < end && is_punct(chunk[begin])) leading.push_back(std::string(1, chunk[begin++]));
    while (end > begin && is_punct(chunk[end - 1])) trailing.push_back(std::string(1, chunk[--end]));
    for (auto& t : leading) out.push_back(std::move(t));
    if (end > begin) out.push_back(chunk.substr(begin, end - begin));
    for (auto it = trailing.rbegin(); it != trailing.rend(); ++it) out.push_back(std::move(*it));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Byte-pair encoding

namespace {

// End-of-word marker sorts after every regular symbol so that, e.g., the
// pair (a,a) wins a frequency tie against (a,</w>).
bool symbol_less(const std::string& a, const std::string& b) {
  bool ae = a == BpeModel::kEndMarker;
  bool be = b == BpeModel::kEndMarker;
  if (ae != be) return be;
  return a < b;
}

bool pair_less(const std::pair<std::string, std::string>& a,
               const std::pair<std::string, std::string>& b) {
  if (a.first != b.first) return symbol_less(a.first, b.first);
  return symbol_less(a.second, b.second);
}

std::vector<std::string> to_symbols(const std::string& token) {
  std::vector<std::string> syms;
  syms.reserve(token.size() + 1);
  for (char ch : token) syms.emplace_back(1, ch);
  syms.push_back(BpeModel::kEndMarker);
  return syms;
}

void merge_in_place(std::vector<std::string>& syms, const BpeModel::Merge& m) {
  std::size_t w = 0;
  for (std::size_t i = 0; i < syms.size();) {
    if (i + 1 < syms.size() && syms[i] == m.left && syms[i + 1] == m.right) {
      syms[w++] = syms[i] + syms[i + 1];
      i += 2;
    } else {
      if (w != i) syms[w] = std::move(syms[i]);
      ++w;
      ++i;
    }
  }
  syms.resize(w);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

BpeModel BpeModel::learn(const std::vector<std::string>& lines, int num_merges) {
  if (num_merges < 0) throw ParamError("bpe: merge count must be non-negative");
  std::map<std::string, long> freq;  // ordered: deterministic iteration
  for (const auto& line : lines)
    for (const auto& tok : tokenize(line)) ++freq[tok];
  if (freq.empty()) throw ParamError("bpe: empty corpus");

  std::vector<std::pair<std::vector<std::string>, long>> words;
  words.reserve(freq.size());
  for (const auto& [tok, f] : freq) words.emplace_back(to_symbols(tok), f);

  BpeModel model;
  for (int step = 0; step < num_merges; ++step) {
    std::map<std::pair<std::string, std::string>, long> counts;
    for (const auto& [syms, f] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        counts[{syms[i], syms[i + 1]}] += f;
    if (counts.empty()) break;
    const std::pair<std::string, std::string>* best = nullptr;
    long best_count = -1;
    for (const auto& [pair, count] : counts) {
      if (count > best_count || (count == best_count && pair_less(pair, *best))) {
        best = &pair;
        best_count = count;
      }
    }
    Merge m{best->first, best->second};
    for (auto& [syms, f] : words) merge_in_place(syms, m);
    model.merges_.push_back(std::move(m));
  }
  return model;
}

std::vector<std::string> BpeModel::apply(const std::string& token) const {
  if (token.empty()) return {};
  auto syms = to_symbols(token);
  for (const auto& m : merges_) merge_in_place(syms, m);
  // drop/strip the end marker, tag continuation pieces
  if (syms.back() == kEndMarker)
    syms.pop_back();
  else
    syms.back().resize(syms.back().size() - std::strlen(kEndMarker));
  std::vector<std::string> pieces;
  pieces.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i)
    pieces.push_back(i + 1 < syms.size() ? syms[i] + "@@" : syms[i]);
  return pieces;
}

std::string BpeModel::join(const std::vector<std::string>& pieces) {
  std::string out;
  for (const auto& p : pieces)
    out += ends_with(p, "@@") ? p.substr(0, p.size() - 2) : p;
  return out;
}

std::vector<std::string> BpeModel::apply_line(const std::string& line) const {
  std::vector<std::string> out;
  for (const auto& tok : tokenize(line))
    for (auto& piece : apply(tok)) out.push_back(std::move(piece));
  return out;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write bpe model: " + path);
  for (const auto& m : merges_) os << m.left << ' ' << m.right << '\n';
  if (!os) throw IoError("failed writing bpe model: " + path);
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read bpe model: " + path);
  BpeModel model;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 >= line.size())
      throw IoError("malformed bpe merge line: " + line);
    model.merges_.push_back({line.substr(0, space), line.substr(space + 1)});
  }
  return model;
}

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const char* kReservedTokens[tok::kReserved] = {"<pad>", "<s>", "</s>", "<unk>"};
}

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) {
    by_token_[t] = static_cast<int>(tokens_.size());
    tokens_.push_back(t);
  }
}

int Vocabulary::add(const std::string& token) {
  auto it = by_token_.find(token);
  if (it != by_token_.end()) return it->second;
  int id = static_cast<int>(tokens_.size());
  by_token_[token] = id;
  tokens_.push_back(token);
  return id;
}

bool Vocabulary::contains(const std::string& token) const {
  return by_token_.count(token) != 0;
}

int Vocabulary::id(const std::string& token) const {
  auto it = by_token_.find(token);
  return it == by_token_.end() ? tok::kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw VocabError("token id out of range");
  return tokens_[id];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write vocabulary: " + path);
  for (const auto& t : tokens_) os << t << '\n';
  if (!os) throw IoError("failed writing vocabulary: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read vocabulary: " + path);
  Vocabulary vocab;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no < tok::kReserved) {
      if (line != kReservedTokens[line_no])
        throw CompatibilityError("vocabulary file lacks the reserved prefix: " + path);
    } else {
      if (vocab.contains(line))
        throw CompatibilityError("duplicate vocabulary token: " + line);
      vocab.add(line);
    }
    ++line_no;
  }
  if (line_no < tok::kReserved)
    throw CompatibilityError("vocabulary file truncated: " + path);
  return vocab;
}

Vocabulary build_vocabulary(const std::vector<std::string>& lines, const BpeModel& bpe) {
  Vocabulary vocab;
  for (const auto& line : lines)
    for (const auto& piece : bpe.apply_line(line)) vocab.add(piece);
  return vocab;
}

std::vector<int> encode_line(const std::string& line, const BpeModel& bpe,
                             const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& piece : bpe.apply_line(line)) ids.push_back(vocab.id(piece));
  return ids;
}

std::string decode_ids(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> words;
  std::string pending;
  for (int id : ids) {
    if (id == tok::kPad || id == tok::kStart) continue;
    if (id == tok::kEnd) break;
    const std::string& piece = vocab.token(id);
    if (ends_with(piece, "@@")) {
      pending += piece.substr(0, piece.size() - 2);
    } else {
      words.push_back(pending + piece);
      pending.clear();
    }
  }
  if (!pending.empty()) words.push_back(pending);  // dangling continuation
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<Batch> make_batches(const std::vector<Example>& examples, int batch_size,
                                int max_len, bool shuffle, std::uint64_t seed) {
  if (batch_size < 1) throw ParamError("batching: batch size must be positive");
  if (max_len < 1) throw ParamError("batching: length cap must be positive");
  if (examples.empty()) throw ParamError("batching: empty corpus");
  for (const auto& ex : examples) {
    if (ex.src_ids.empty() || ex.tgt_ids.empty())
      throw EmptySupportError("batching: empty sentence");
    if (static_cast<int>(ex.src_ids.size()) > max_len ||
        static_cast<int>(ex.tgt_ids.size()) > max_len)
      throw LengthError("batching: sentence exceeds the length cap");
  }

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    // explicit Fisher-Yates: identical shuffles for a seed on every platform
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(order[i], order[j]);
    }
  }

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::size_t stop = std::min(order.size(), start + batch_size);
    std::size_t src_max = 0, tgt_max = 0;
    for (std::size_t k = start; k < stop; ++k) {
      src_max = std::max(src_max, examples[order[k]].src_ids.size());
      tgt_max = std::max(tgt_max, examples[order[k]].tgt_ids.size());
    }
    std::size_t tgt_width = tgt_max + 1;  // room for start (input) / end (output)

    Batch b;
    for (std::size_t k = start; k < stop; ++k) {
      const Example& ex = examples[order[k]];
      std::vector<int> src(src_max, tok::kPad), smask(src_max, 0);
      for (std::size_t i = 0; i < ex.src_ids.size(); ++i) {
        src[i] = ex.src_ids[i];
        smask[i] = 1;
      }
      std::vector<int> tin(tgt_width, tok::kPad), tout(tgt_width, tok::kPad),
          tmask(tgt_width, 0);
      tin[0] = tok::kStart;
      for (std::size_t i = 0; i < ex.tgt_ids.size(); ++i) {
        tin[i + 1] = ex.tgt_ids[i];
        tout[i] = ex.tgt_ids[i];
        tmask[i] = 1;
      }
      tout[ex.tgt_ids.size()] = tok::kEnd;
      tmask[ex.tgt_ids.size()] = 1;
      b.src_ids.push_back(std::move(src));
      b.src_mask.push_back(std::move(smask));
      b.tgt_in.push_back(std::move(tin));
      b.tgt_out.push_back(std::move(tout));
      b.tgt_mask.push_back(std::move(tmask));
      b.image_indices.push_back(ex.image_index);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Image container

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("image file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_image(const std::string& path, const Image& img) {
  if (img.h < 1 || img.w < 1 || img.c < 1 ||
      img.data.size() != static_cast<std::size_t>(img.h) * img.w * img.c)
    throw ShapeError("image payload does not match its dimensions");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image: " + path);
  os.write("MMTI", 4);
  put_u32(os, static_cast<std::uint32_t>(img.h));
  put_u32(os, static_cast<std::uint32_t>(img.w));
  put_u32(os, static_cast<std::uint32_t>(img.c));
  for (float f : img.data) put_u32(os, std::bit_cast<std::uint32_t>(f));
  if (!os) throw IoError("failed writing image: " + path);
}

Image read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read image: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MMTI", 4) != 0)
    throw IoError("bad image magic: " + path);
  Image img;
  img.h = static_cast<int>(get_u32(is));
  img.w = static_cast<int>(get_u32(is));
  img.c = static_cast<int>(get_u32(is));
  if (img.h < 1 || img.w < 1 || img.c < 1 || img.h > 1 << 16 || img.w > 1 << 16 ||
      img.c > 1 << 8)
    throw IoError("implausible image dimensions: " + path);
  std::size_t n = static_cast<std::size_t>(img.h) * img.w * img.c;
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.data[i] = std::bit_cast<float>(get_u32(is));
  return img;
}

Image hflip(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

namespace {

double unit_draw(std::mt19937_64& rng) {
  // top 53 bits -> [0,1); identical on every platform
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  double d = mx - mn;
  s = mx <= 0.0 ? 0.0 : d / mx;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  double hh = std::fmod(h, 1.0) * 6.0;
  int i = static_cast<int>(hh) % 6;
  double f = hh - std::floor(hh);
  double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

}  // namespace

Image preprocess_image(const Image& img, const PreprocessConfig& cfg, std::mt19937_64& rng) {
  if (cfg.crop_h < 1 || cfg.crop_w < 1) throw ParamError("preprocess: bad crop size");
  if (img.h < cfg.crop_h || img.w < cfg.crop_w)
    throw ShapeError("preprocess: image smaller than the crop size");
  if (cfg.mode == PreprocessMode::kInception && img.c != 3)
    throw ShapeError("preprocess: color jitter needs 3 channels");

  int max_y = img.h - cfg.crop_h, max_x = img.w - cfg.crop_w;
  int oy = max_y / 2, ox = max_x / 2;
  bool flip = false;
  if (cfg.augment) {
    oy = max_y > 0 ? static_cast<int>(rng() % (max_y + 1)) : 0;
    ox = max_x > 0 ? static_cast<int>(rng() % (max_x + 1)) : 0;
    flip = (rng() & 1) != 0;
  }

  Image out;
  out.h = cfg.crop_h;
  out.w = cfg.crop_w;
  out.c = img.c;
  out.data.resize(static_cast<std::size_t>(out.h) * out.w * out.c);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      int sx = flip ? ox + out.w - 1 - x : ox + x;
      for (int ch = 0; ch < out.c; ++ch) out.at(y, x, ch) = img.at(oy + y, sx, ch);
    }

  if (cfg.mode == PreprocessMode::kInception) {
    double bright = (unit_draw(rng) * 2.0 - 1.0) * cfg.brightness;
    double contrast = 1.0 + (unit_draw(rng) * 2.0 - 1.0) * cfg.contrast;
    double hue_shift = (unit_draw(rng) * 2.0 - 1.0) * cfg.hue;
    double sat = 1.0 + (unit_draw(rng) * 2.0 - 1.0) * cfg.saturation;
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        double h, s, v;
        rgb_to_hsv(out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2), h, s, v);
        h = std::fmod(h + hue_shift + 1.0, 1.0);
        s = clamp01(s * sat);
        double r, g, b;
        hsv_to_rgb(h, s, v, r, g, b);
        out.at(y, x, 0) = static_cast<float>(clamp01(r * contrast + bright));
        out.at(y, x, 1) = static_cast<float>(clamp01(g * contrast + bright));
        out.at(y, x, 2) = static_cast<float>(clamp01(b * contrast + bright));
      }
  }

  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      for (int ch = 0; ch < out.c; ++ch)
        out.at(y, x, ch) =
            static_cast<float>(out.at(y, x, ch) - cfg.mean[std::min(ch, 2)]);
  return out;
}

TensorPtr images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw ParamError("image batch is empty");
  int h = images[0].h, w = images[0].w, c = images[0].c;
  for (const auto& img : images)
    if (img.h != h || img.w != w || img.c != c)
      throw ShapeError("image batch has mixed dimensions");
  auto t = Tensor::make({static_cast<int>(images.size()), h, w, c});
  std::size_t per = static_cast<std::size_t>(h) * w * c;
  for (std::size_t b = 0; b < images.size(); ++b)
    for (std::size_t i = 0; i < per; ++i)
      t->value[b * per + i] = static_cast<double>(images[b].data[i]);
  return t;
}

// ---------------------------------------------------------------------------
// Corpus files

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

Corpus load_corpus(const std::string& src_path, const std::string& tgt_path,
                   const std::string& index_path) {
  Corpus corpus;
  corpus.src_lines = read_lines(src_path);
  if (!tgt_path.empty()) {
    corpus.tgt_lines = read_lines(tgt_path);
    if (corpus.tgt_lines.size() != corpus.src_lines.size())
      throw PairingError("source and target line counts differ");
  }
  if (!index_path.empty()) {
    auto rel = read_lines(index_path);
    if (rel.size() != corpus.src_lines.size())
      throw PairingError("image index and source line counts differ");
    fs::path base = fs::path(index_path).parent_path();
    for (const auto& line : rel) {
      fs::path p(line);
      corpus.image_paths.push_back(p.is_absolute() ? p.string() : (base / p).string());
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

std::vector<SynthExample> synth_corpus(int n, std::uint64_t seed, int h, int w,
                                       double noise) {
  if (n < 1) throw ParamError("synthetic corpus needs at least one example");
  if (h < 8 || w < 8) throw ParamError("synthetic images must be at least 8x8");
  static const char* kSrcDet[2] = {"the", "a"};
  static const char* kTgtDet[2] = {"der", "ein"};
  static const char* kSrcColor[3] = {"red", "green", "blue"};
  static const char* kTgtColor[3] = {"rot", "gruen", "blau"};
  static const char* kTgtShape[2] = {"kreis", "quadrat"};
  static const double kRgb[3][3] = {{1.0, 0.1, 0.1}, {0.1, 1.0, 0.1}, {0.1, 0.1, 1.0}};

  std::mt19937_64 rng = make_rng(seed, 0xDA7A);
  std::vector<SynthExample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    int shape = i % 2;  // alternating: exactly balanced for even n
    int det = (i / 2) % 2;
    int color = (i / 4) % 3;

    SynthExample ex;
    ex.shape = shape;
    ex.src = std::string(kSrcDet[det]) + " " + kSrcColor[color] + " mark";
    ex.tgt = std::string(kTgtDet[det]) + " " + kTgtColor[color] + " " + kTgtShape[shape];

    Image img;
    img.h = h;
    img.w = w;
    img.c = 3;
    img.data.assign(static_cast<std::size_t>(h) * w * 3, 0.0f);
    for (auto& v : img.data) v = static_cast<float>(unit_draw(rng) * noise);

    double cy = h / 2.0 + (unit_draw(rng) * 2.0 - 1.0);
    double cx = w / 2.0 + (unit_draw(rng) * 2.0 - 1.0);
    double radius = std::min(h, w) * 0.28;
    double half = std::min(h, w) * 0.25;
    double glow = 0.85 + 0.15 * unit_draw(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        bool inside = shape == 0 ? (dy * dy + dx * dx <= radius * radius)
                                 : (std::fabs(dy) <= half && std::fabs(dx) <= half);
        if (!inside) continue;
        for (int ch = 0; ch < 3; ++ch) {
          double v = img.at(y, x, ch) + kRgb[color][ch] * glow;
          img.at(y, x, ch) = static_cast<float>(clamp01(v));
        }
      }
    ex.image = std::move(img);
    out.push_back(std::move(ex));
  }
  return out;
}

void write_split(const std::string& dir, const std::string& split,
                 const std::vector<SynthExample>& examples) {
  fs::create_directories(fs::path(dir) / "img");
  std::ofstream src(fs::path(dir) / (split + ".src"));
  std::ofstream tgt(fs::path(dir) / (split + ".tgt"));
  std::ofstream idx(fs::path(dir) / (split + ".idx"));
  if (!src || !tgt || !idx) throw IoError("cannot write corpus split: " + split);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    std::string rel = "img/" + split + "_" + std::to_string(i) + ".mmti";
    src << examples[i].src << '\n';
    tgt << examples[i].tgt << '\n';
    idx << rel << '\n';
    write_image((fs::path(dir) / rel).string(), examples[i].image);
  }
  if (!src || !tgt || !idx) throw IoError("failed writing corpus split: " + split);
}

}  // namespace mmt
