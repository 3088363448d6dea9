#pragma once

// Tiny dual encoder: mean-pooled token embeddings and flattened pixels, each
// through a one-hidden-layer tanh MLP, L2-normalized. Parameters live in one
// flat vector so optimizers, checkpoints and gradient checks see a single
// coordinate space.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "countlab/caption_numerics.hpp"
#include "countlab/errors.hpp"
#include "countlab/records.hpp"
#include "countlab/rng.hpp"
#include "countlab/synthetic_scenes.hpp"

namespace countlab {

using Embedding = std::vector<double>;

class Vocabulary {
 public:
  static constexpr int kUnknown = 0;
  static constexpr std::string_view kUnknownWord = "<unk>";

  /// Index 0 is the unknown token; remaining words are deduplicated and sorted.
  explicit Vocabulary(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    words_.emplace_back(kUnknownWord);
    for (auto& w : words) {
      if (w == kUnknownWord) continue;
      index_.emplace(w, static_cast<int>(words_.size()));
      words_.push_back(std::move(w));
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int i) const { return words_.at(static_cast<std::size_t>(i)); }

  int lookup(std::string_view lower_token) const {
    auto it = index_.find(std::string(lower_token));
    return it == index_.end() ? kUnknown : it->second;
  }

  /// Token indices using the caption tokenizer, lower-cased.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& t : tokenize(text)) out.push_back(lookup(to_lower(t.text)));
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Number words, class names and every filler word used by the caption templates.
inline Vocabulary default_vocabulary(const std::vector<ClassName>& class_names = default_class_names()) {
  std::vector<std::string> words = {"a",      "photo",  "of",      "on",      "plain", "background", "there", "are",
                                    "in",     "this",   "picture", "wallpaper", "version", "iphone", "case", "with",
                                    "at",     "drawn",  "by",      "year",    "old",   "day",        "the",   "trip",
                                    "chapter", "couple", "couples", "pair",   "pairs", "dozen",      "dozens", "few",
                                    "some",   "next",   "to",      "photo"};
  for (auto w : kNumberSpellings) words.emplace_back(w);
  for (const auto& c : class_names) {
    words.push_back(to_lower(c.singular));
    words.push_back(to_lower(c.plural));
  }
  return Vocabulary(std::move(words));
}

struct ModelDims {
  int vocab = 0;
  int token_dim = 32;
  int hidden = 64;
  int embed_dim = 32;
  int height = 32;
  int width = 32;

  int pixels() const { return height * width; }
  bool operator==(const ModelDims&) const = default;
};

/// Offsets of each parameter block inside the flat vector, in storage order:
/// text_embedding [V x d_tok], text_w1 [h x d_tok], text_b1 [h],
/// text_w2 [d_e x h], text_b2 [d_e], image_w1 [h x H*W], image_b1 [h],
/// image_w2 [d_e x h], image_b2 [d_e], logit_scale [1]. Matrices row-major.
struct ParamLayout {
  std::size_t text_embedding, text_w1, text_b1, text_w2, text_b2;
  std::size_t image_w1, image_b1, image_w2, image_b2;
  std::size_t logit_scale, total;

  explicit ParamLayout(const ModelDims& d) {
    const auto V = static_cast<std::size_t>(d.vocab), T = static_cast<std::size_t>(d.token_dim),
               H = static_cast<std::size_t>(d.hidden), E = static_cast<std::size_t>(d.embed_dim),
               P = static_cast<std::size_t>(d.pixels());
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
      const std::size_t start = at;
      at += n;
      return start;
    };
    text_embedding = take(V * T);
    text_w1 = take(H * T);
    text_b1 = take(H);
    text_w2 = take(E * H);
    text_b2 = take(E);
    image_w1 = take(H * P);
    image_b1 = take(H);
    image_w2 = take(E * H);
    image_b2 = take(E);
    logit_scale = take(1);
    total = at;
  }
};

struct Params {
  ModelDims dims;
  std::vector<double> values;

  Params() = default;
  explicit Params(const ModelDims& d) : dims(d), values(ParamLayout(d).total, 0.0) {}

  ParamLayout layout() const { return ParamLayout(dims); }
  double logit_scale() const { return values[layout().logit_scale]; }
  double& logit_scale() { return values[layout().logit_scale]; }

  bool operator==(const Params&) const = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, U(-1, 1) embedding
/// rows, zero biases, logit scale ln(1/0.07).
inline Params init_params(const ModelDims& dims, std::uint64_t seed) {
  if (dims.vocab < 1 || dims.token_dim < 1 || dims.hidden < 1 || dims.embed_dim < 1 || dims.pixels() < 1) {
    throw UsageError("init_params: all model dimensions must be positive");
  }
  Params p(dims);
  const ParamLayout L = p.layout();
  Rng rng(seed);
  auto fill = [&](std::size_t start, std::size_t n, double scale) {
    for (std::size_t i = 0; i < n; ++i) p.values[start + i] = scale * (2.0 * rng.uniform01() - 1.0);
  };
  fill(L.text_embedding, L.text_w1 - L.text_embedding, 1.0);
  fill(L.text_w1, L.text_b1 - L.text_w1, 1.0 / std::sqrt(dims.token_dim));
  fill(L.text_w2, L.text_b2 - L.text_w2, 1.0 / std::sqrt(dims.hidden));
  fill(L.image_w1, L.image_b1 - L.image_w1, 1.0 / std::sqrt(dims.pixels()));
  fill(L.image_w2, L.image_b2 - L.image_w2, 1.0 / std::sqrt(dims.hidden));
  p.values[L.logit_scale] = std::log(1.0 / 0.07);
  return p;
}

inline constexpr double kNormEpsilon = 1e-12;

/// Intermediate values of one tower pass, kept for backpropagation.
struct TowerTrace {
  std::vector<double> input;   // pooled tokens or pixels
  std::vector<double> hidden;  // tanh activations
  double norm = 0.0;           // of the pre-normalization output
  bool degenerate = false;     // norm below epsilon; output is e_0
  Embedding embedding;
};

namespace detail {

struct TowerBlocks {
  std::size_t w1, b1, w2, b2;
  int in_dim;
};

inline TowerBlocks text_blocks(const Params& p) {
  const ParamLayout L = p.layout();
  return {L.text_w1, L.text_b1, L.text_w2, L.text_b2, p.dims.token_dim};
}

inline TowerBlocks image_blocks(const Params& p) {
  const ParamLayout L = p.layout();
  return {L.image_w1, L.image_b1, L.image_w2, L.image_b2, p.dims.pixels()};
}

inline void tower_forward(const Params& p, const TowerBlocks& b, TowerTrace& t) {
  const int H = p.dims.hidden, E = p.dims.embed_dim, in = b.in_dim;
  const double* v = p.values.data();
  t.hidden.assign(static_cast<std::size_t>(H), 0.0);
  for (int r = 0; r < H; ++r) t.hidden[r] = v[b.b1 + r];
  // column-outer loop skips zero inputs; rasters are mostly background
  for (int c = 0; c < in; ++c) {
    const double x = t.input[c];
    if (x == 0.0) continue;
    for (int r = 0; r < H; ++r) t.hidden[r] += v[b.w1 + static_cast<std::size_t>(r) * in + c] * x;
  }
  for (double& a : t.hidden) a = std::tanh(a);
  std::vector<double> z(static_cast<std::size_t>(E));
  for (int r = 0; r < E; ++r) {
    double acc = v[b.b2 + r];
    for (int c = 0; c < H; ++c) acc += v[b.w2 + static_cast<std::size_t>(r) * H + c] * t.hidden[c];
    z[r] = acc;
  }
  double sq = 0.0;
  for (double x : z) sq += x * x;
  t.norm = std::sqrt(sq);
  t.embedding.assign(static_cast<std::size_t>(E), 0.0);
  if (t.norm < kNormEpsilon) {
    t.degenerate = true;
    t.embedding[0] = 1.0;
  } else {
    t.degenerate = false;
    for (int r = 0; r < E; ++r) t.embedding[r] = z[r] / t.norm;
  }
}

/// Accumulates parameter gradients into `grad`; returns d(loss)/d(input).
inline std::vector<double> tower_backward(const Params& p, const TowerBlocks& b, const TowerTrace& t,
                                          std::span<const double> d_embedding, std::span<double> grad,
                                          bool want_input_grad) {
  const int H = p.dims.hidden, E = p.dims.embed_dim, in = b.in_dim;
  const double* v = p.values.data();
  std::vector<double> d_input;
  if (t.degenerate) {
    if (want_input_grad) d_input.assign(static_cast<std::size_t>(in), 0.0);
    return d_input;
  }
  double dot = 0.0;
  for (int r = 0; r < E; ++r) dot += t.embedding[r] * d_embedding[r];
  std::vector<double> dz(static_cast<std::size_t>(E));
  for (int r = 0; r < E; ++r) dz[r] = (d_embedding[r] - t.embedding[r] * dot) / t.norm;

  std::vector<double> dpre(static_cast<std::size_t>(H), 0.0);
  for (int r = 0; r < E; ++r) {
    grad[b.b2 + r] += dz[r];
    const std::size_t row = b.w2 + static_cast<std::size_t>(r) * H;
    for (int c = 0; c < H; ++c) {
      grad[row + c] += dz[r] * t.hidden[c];
      dpre[c] += v[row + c] * dz[r];
    }
  }
  for (int c = 0; c < H; ++c) dpre[c] *= 1.0 - t.hidden[c] * t.hidden[c];

  for (int r = 0; r < H; ++r) grad[b.b1 + r] += dpre[r];
  for (int c = 0; c < in; ++c) {
    const double x = t.input[c];
    if (x == 0.0) continue;
    for (int r = 0; r < H; ++r) grad[b.w1 + static_cast<std::size_t>(r) * in + c] += dpre[r] * x;
  }
  if (want_input_grad) {
    d_input.assign(static_cast<std::size_t>(in), 0.0);
    for (int r = 0; r < H; ++r) {
      const std::size_t row = b.w1 + static_cast<std::size_t>(r) * in;
      for (int c = 0; c < in; ++c) d_input[c] += v[row + c] * dpre[r];
    }
  }
  return d_input;
}

}  // namespace detail

inline TowerTrace trace_text(const Params& p, std::span<const int> tokens) {
  if (tokens.empty()) throw UsageError("encode_text: empty token list");
  const ParamLayout L = p.layout();
  const int T = p.dims.token_dim;
  TowerTrace t;
  t.input.assign(static_cast<std::size_t>(T), 0.0);
  for (int tok : tokens) {
    if (tok < 0 || tok >= p.dims.vocab) throw UsageError("encode_text: token index out of range");
    const std::size_t row = L.text_embedding + static_cast<std::size_t>(tok) * T;
    for (int k = 0; k < T; ++k) t.input[k] += p.values[row + k];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (double& x : t.input) x *= inv;
  detail::tower_forward(p, detail::text_blocks(p), t);
  return t;
}

inline TowerTrace trace_image(const Params& p, const Raster& raster) {
  if (raster.height != p.dims.height || raster.width != p.dims.width ||
      raster.pixels.size() != static_cast<std::size_t>(p.dims.pixels())) {
    throw UsageError("encode_image: raster is " + std::to_string(raster.height) + "x" + std::to_string(raster.width) +
                     ", model expects " + std::to_string(p.dims.height) + "x" + std::to_string(p.dims.width));
  }
  TowerTrace t;
  t.input = raster.pixels;
  detail::tower_forward(p, detail::image_blocks(p), t);
  return t;
}

inline Embedding encode_text(const Params& p, std::span<const int> tokens) { return trace_text(p, tokens).embedding; }

inline Embedding encode_image(const Params& p, const Raster& raster) { return trace_image(p, raster).embedding; }

/// Accumulates gradients of a text embedding into `grad`, including the
/// embedding-table rows of `tokens`.
inline void backprop_text(const Params& p, const TowerTrace& t, std::span<const int> tokens,
                          std::span<const double> d_embedding, std::span<double> grad) {
  const auto d_pooled = detail::tower_backward(p, detail::text_blocks(p), t, d_embedding, grad, true);
  const ParamLayout L = p.layout();
  const int T = p.dims.token_dim;
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (int tok : tokens) {
    const std::size_t row = L.text_embedding + static_cast<std::size_t>(tok) * T;
    for (int k = 0; k < T; ++k) grad[row + k] += d_pooled[k] * inv;
  }
}

inline void backprop_image(const Params& p, const TowerTrace& t, std::span<const double> d_embedding,
                           std::span<double> grad) {
  detail::tower_backward(p, detail::image_blocks(p), t, d_embedding, grad, false);
}

/// Dot product; equals cosine similarity for unit vectors.
inline double similarity(std::span<const double> u, std::span<const double> v) {
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   bytes 0..3   magic "CNTP"
//   u32          version (1)
//   u32 x 6      vocab, token_dim, hidden, embed_dim, height, width
//   u64          coordinate count
//   f64 x count  coordinates in ParamLayout order

inline constexpr std::array<char, 4> kParamsMagic = {'C', 'N', 'T', 'P'};
inline constexpr std::uint32_t kParamsVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view in, std::size_t& at) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (at + sizeof(U) > in.size()) throw DataError("checkpoint truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  at += sizeof(U);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline std::string serialize_params(const Params& p) {
  std::string out(kParamsMagic.begin(), kParamsMagic.end());
  detail::put_le(out, kParamsVersion);
  for (int d : {p.dims.vocab, p.dims.token_dim, p.dims.hidden, p.dims.embed_dim, p.dims.height, p.dims.width}) {
    detail::put_le(out, static_cast<std::uint32_t>(d));
  }
  detail::put_le(out, static_cast<std::uint64_t>(p.values.size()));
  for (double v : p.values) detail::put_le(out, v);
  return out;
}

inline Params deserialize_params(std::string_view bytes) {
  if (bytes.size() < 4 || !std::equal(kParamsMagic.begin(), kParamsMagic.end(), bytes.begin())) {
    throw DataError("not a countlab checkpoint (bad magic)");
  }
  std::size_t at = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, at);
  if (version != kParamsVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  ModelDims d;
  d.vocab = static_cast<int>(detail::get_le<std::uint32_t>(bytes, at));
  d.token_dim = static_cast<int>(detail::get_le<std::uint32_t>(bytes, at));
  d.hidden = static_cast<int>(detail::get_le<std::uint32_t>(bytes, at));
  d.embed_dim = static_cast<int>(detail::get_le<std::uint32_t>(bytes, at));
  d.height = static_cast<int>(detail::get_le<std::uint32_t>(bytes, at));
  d.width = static_cast<int>(detail::get_le<std::uint32_t>(bytes, at));
  const auto count = detail::get_le<std::uint64_t>(bytes, at);
  Params p(d);
  if (count != p.values.size()) throw DataError("checkpoint coordinate count does not match its dimensions");
  for (auto& v : p.values) v = detail::get_le<double>(bytes, at);
  if (at != bytes.size()) throw DataError("checkpoint has trailing bytes");
  for (double v : p.values) {
    if (!std::isfinite(v)) throw DataError("checkpoint contains non-finite coordinates");
  }
  return p;
}

inline void save_params(const std::filesystem::path& path, const Params& p) {
  write_file_atomic(path, serialize_params(p));
}

inline Params load_params(const std::filesystem::path& path) {
  try {
    return deserialize_params(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct GradProbe {
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double max_relative_error = 0.0;
  bool passed = true;
};

/// Compares `analytic` against central differences of `loss` on
/// `probe_count` coordinates of `theta` drawn without replacement from
/// `candidates` (all coordinates when empty). `theta` is perturbed in place
/// and restored. Relative error is |a - n| / max(1e-8, |a| + |n|).
template <typename LossFn>
GradCheckReport grad_check(std::vector<double>& theta, std::span<const double> analytic, LossFn&& loss,
                           std::size_t probe_count, double step, double tol, Rng& rng,
                           std::span<const std::size_t> candidates = {}) {
  GradCheckReport report;
  const std::size_t pool = candidates.empty() ? theta.size() : candidates.size();
  for (std::size_t pick : rng.sample_without_replacement(pool, probe_count)) {
    const std::size_t i = candidates.empty() ? pick : candidates[pick];
    const double saved = theta[i];
    theta[i] = saved + step;
    const double up = loss(theta);
    theta[i] = saved - step;
    const double down = loss(theta);
    theta[i] = saved;
    GradProbe probe;
    probe.coordinate = i;
    probe.analytic = analytic[i];
    probe.numeric = (up - down) / (2.0 * step);
    probe.relative_error =
        std::abs(probe.analytic - probe.numeric) / std::max(1e-8, std::abs(probe.analytic) + std::abs(probe.numeric));
    probe.passed = probe.relative_error <= tol;
    report.max_relative_error = std::max(report.max_relative_error, probe.relative_error);
    report.passed = report.passed && probe.passed;
    report.probes.push_back(probe);
  }
  return report;
}

/// Overload over model parameters; `loss` is called with the perturbed Params.
template <typename LossFn>
GradCheckReport grad_check(Params& params, std::span<const double> analytic, LossFn&& loss, std::size_t probe_count,
                           double step, double tol, Rng& rng, std::span<const std::size_t> candidates = {}) {
  return grad_check(
      params.values, analytic, [&](const std::vector<double>&) { return loss(std::as_const(params)); }, probe_count,
      step, tol, rng, candidates);
}

}  // namespace countlab
