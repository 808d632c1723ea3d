#pragma once
// Tokenization, byte-pair encoding, vocabulary, batching, the raw-float
// image container, preprocessing, and the synthetic shapes corpus.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/common.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

// ---------------------------------------------------------------------------
// Tokenization

// Whitespace split with leading/trailing ASCII punctuation peeled off as
// separate tokens.
std::vector<std::string> tokenize(const std::string& line);

// ---------------------------------------------------------------------------
// Byte-pair encoding

class BpeModel {
 public:
  struct Merge {
    std::string left, right;
    bool operator==(const Merge& o) const { return left == o.left && right == o.right; }
  };

  // Learn `num_merges` merges from whitespace-tokenized lines. The most
  // frequent adjacent pair wins each round; ties go to the lexicographically
  // smallest pair, with the end-of-word marker ordered after every other
  // symbol.
  static BpeModel learn(const std::vector<std::string>& lines, int num_merges);

  // token -> subword pieces; continuation pieces carry the "@@" suffix.
  std::vector<std::string> apply(const std::string& token) const;
  // pieces -> original token (round-trip inverse of apply)
  static std::string join(const std::vector<std::string>& pieces);
  // convenience: tokenize + apply over a whole line
  std::vector<std::string> apply_line(const std::string& line) const;

  const std::vector<Merge>& merges() const { return merges_; }

  // One merge per line: "left right", in learned order.
  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

  static constexpr const char* kEndMarker = "</w>";

 private:
  std::vector<Merge> merges_;
};

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  Vocabulary();  // seeds the four reserved symbols

  int add(const std::string& token);  // returns the id (existing or new)
  bool contains(const std::string& token) const;
  int id(const std::string& token) const;      // kUnk when unknown
  const std::string& token(int id) const;      // VocabError when out of range
  int size() const { return static_cast<int>(tokens_.size()); }

  // Token per line, id = line number.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> by_token_;
};

// Scan BPE-segmented corpus lines and register every piece.
Vocabulary build_vocabulary(const std::vector<std::string>& lines, const BpeModel& bpe);

// line -> reserved-aware ids (tokenize, segment, look up)
std::vector<int> encode_line(const std::string& line, const BpeModel& bpe,
                             const Vocabulary& vocab);
// ids -> detokenized line (reserved ids skipped, pieces joined)
std::string decode_ids(const std::vector<int>& ids, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Batching

struct Example {
  std::vector<int> src_ids;  // no start/end
  std::vector<int> tgt_ids;  // no start/end
  int image_index = -1;
};

struct Batch {
  // row-per-example, padded to the batch maxima with the pad id
  std::vector<std::vector<int>> src_ids;
  std::vector<std::vector<int>> src_mask;
  std::vector<std::vector<int>> tgt_in;    // start + target tokens
  std::vector<std::vector<int>> tgt_out;   // target tokens + end
  std::vector<std::vector<int>> tgt_mask;  // 1 where tgt_out is real
  std::vector<int> image_indices;

  int size() const { return static_cast<int>(src_ids.size()); }
};

// Seeded shuffle then fixed-size slices (last batch may be short). Any
// sentence over max_len throws LengthError. shuffle == false keeps corpus
// order (the seed is then unused).
std::vector<Batch> make_batches(const std::vector<Example>& examples, int batch_size,
                                int max_len, bool shuffle, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Images

struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> data;  // row-major, channel-last

  std::size_t size() const { return data.size(); }
  float at(int y, int x, int ch) const { return data[(y * w + x) * c + ch]; }
  float& at(int y, int x, int ch) { return data[(y * w + x) * c + ch]; }
};

// Raw container: magic "MMTI", u32 H, W, C (little-endian), then H*W*C
// little-endian float32. Bit-exact round-trip.
void write_image(const std::string& path, const Image& img);
Image read_image(const std::string& path);

Image hflip(const Image& img);

enum class PreprocessMode { kVgg, kInception };

struct PreprocessConfig {
  PreprocessMode mode = PreprocessMode::kVgg;
  int crop_h = 16, crop_w = 16;
  bool augment = false;  // random crop offset + coin-flip horizontal flip
  std::array<double, 3> mean = {0.5, 0.5, 0.5};
  // inception-style jitter ranges (the exact magnitudes are configuration)
  double brightness = 0.1;  // additive, uniform in ±brightness
  double contrast = 0.1;    // multiplicative, uniform in 1 ± contrast
  double hue = 0.05;        // hue rotation, uniform in ±hue (fraction of the wheel)
  double saturation = 0.1;  // multiplicative in HSV, uniform in 1 ± saturation
};

// Crop (+ optional flip/jitter) then mean-center. Deterministic given rng.
Image preprocess_image(const Image& img, const PreprocessConfig& cfg, std::mt19937_64& rng);

// Stack equally-sized images into [B,H,W,C].
TensorPtr images_to_tensor(const std::vector<Image>& images);

// ---------------------------------------------------------------------------
// Corpus files

struct Corpus {
  std::vector<std::string> src_lines;
  std::vector<std::string> tgt_lines;
  std::vector<std::string> image_paths;  // resolved against the index file's directory
};

std::vector<std::string> read_lines(const std::string& path);
// tgt_path may be empty (translation input); index_path may be empty (text-only)
Corpus load_corpus(const std::string& src_path, const std::string& tgt_path,
                   const std::string& index_path);

// ---------------------------------------------------------------------------
// Synthetic shapes corpus

struct SynthExample {
  std::string src, tgt;
  Image image;
  int shape = 0;  // 0 = circle, 1 = square
};

// Aligned triples over a toy grammar. The source never names the shape (it
// says "mark"); the target shape word is determined only by the image, with
// the two shapes exactly balanced for even n.
std::vector<SynthExample> synth_corpus(int n, std::uint64_t seed, int h = 16, int w = 16,
                                       double noise = 0.03);

// Writes <dir>/<split>.src, .tgt, .idx and <dir>/img/<split>_<i>.mmti.
void write_split(const std::string& dir, const std::string& split,
                 const std::vector<SynthExample>& examples);

}  // namespace mmt
