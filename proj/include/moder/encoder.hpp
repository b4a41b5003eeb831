#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moder/autodiff.hpp"
#include "moder/params.hpp"
#include "moder/rng.hpp"

namespace moder {

// ---------------------------------------------------------------------------
// Prompts

/// Template text with exactly one "{CLS}" placeholder.
class PromptTemplate {
 public:
  static constexpr std::string_view kPlaceholder = "{CLS}";

  explicit PromptTemplate(std::string text);

  const std::string& text() const { return text_; }
  std::string render(const std::string& class_name) const;

  bool operator==(const PromptTemplate&) const = default;

 private:
  std::string text_;
};

/// "a photo of a {CLS}."
const PromptTemplate& canonical_template();

/// Built-in library of zero-shot style templates; the first one is the
/// canonical template. `count` is clamped to the library size.
std::vector<PromptTemplate> default_templates(std::size_t count = 16);

/// One template per line; blank lines and lines starting with '#' are skipped.
std::vector<PromptTemplate> load_templates(const std::filesystem::path& path);

struct ClassPrompt {
  int class_id = 0;
  std::string class_name;
  PromptTemplate prompt_template = canonical_template();

  std::string text() const;
};

std::string render_prompt(const std::string& class_name, const PromptTemplate& tmpl);

/// Lowercases, splits on non-alphanumeric characters and hashes each word
/// with 64-bit FNV-1a modulo `vocab_size`.
std::vector<std::uint32_t> tokenize(const std::string& text, std::uint32_t vocab_size);

// ---------------------------------------------------------------------------
// Frozen reference encoder

struct EncoderConfig {
  int vocab_size = 512;
  int token_dim = 64;
  int hidden_dim = 128;
  int embed_dim = 64;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 7;
};

/// Shape of one adapted linear layer (out x in).
struct AdaptedLayer {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

/// Hashed bag-of-tokens -> mean pooling -> linear -> GELU -> linear ->
/// layer-norm -> L2 normalize. Both linears are adapted; everything else is
/// part of the frozen weights. Immutable after construction.
class ReferenceEncoder {
 public:
  explicit ReferenceEncoder(EncoderConfig config = {});

  const EncoderConfig& config() const { return config_; }
  const ParamSet& frozen() const { return theta0_; }
  int embed_dim() const { return config_.embed_dim; }

  /// Hash of the frozen weights' bytes.
  std::uint64_t fingerprint() const { return fingerprint_; }

  const std::vector<AdaptedLayer>& adapted_layers() const { return layers_; }
  const Matrix& base_weight(std::size_t layer) const;
  const Matrix& base_bias(std::size_t layer) const;

  /// Mean of the token embeddings of `text`.
  Vector pool(const std::string& text) const;

 private:
  EncoderConfig config_;
  ParamSet theta0_;
  std::vector<AdaptedLayer> layers_;
  std::uint64_t fingerprint_ = 0;
};

// ---------------------------------------------------------------------------
// Adapters and task vectors

enum class AdapterVariant { Lora, Vera };

/// Dense per-layer displacement of the adapted weights.
struct TaskVector {
  std::vector<Matrix> deltas;
  std::string provenance;

  static TaskVector zeros(const ReferenceEncoder& encoder);

  TaskVector& operator+=(const TaskVector& other);
  TaskVector& operator*=(double s);
  friend TaskVector operator+(TaskVector a, const TaskVector& b) { return a += b; }
  friend TaskVector operator*(double s, TaskVector a) { return a *= s; }
};

/// Frozen random factors shared by every VeRA adapter of one hub.
struct VeraBasis {
  int rank = 0;
  std::vector<Matrix> down;  // r x d_in per layer
  std::vector<Matrix> up;    // d_out x r per layer
};

/// Gaussian factors with variance 1/d_in, drawn from `hub_seed`.
std::shared_ptr<const VeraBasis> make_vera_basis(const ReferenceEncoder& encoder, int rank, std::uint64_t hub_seed);

/// Low-rank expert for one class. Parameter names per adapted layer l:
///   LoRA: "l<l>.B" (d_out x r), "l<l>.A" (r x d_in)
///   VeRA: "l<l>.d" (r x 1), "l<l>.b" (d_out x 1), over a shared basis.
struct AdapterModule {
  AdapterVariant variant = AdapterVariant::Lora;
  int rank = 0;
  int class_id = -1;
  ParamSet params;
  std::shared_ptr<const VeraBasis> basis;  // VeRA only

  std::size_t num_layers() const;
};

std::string adapter_param_name(std::size_t layer, const char* factor);

/// B = 0 and A ~ N(0, 1/d_in), so the displacement starts at exactly zero.
AdapterModule make_lora_adapter(const ReferenceEncoder& encoder, int class_id, int rank, std::uint64_t seed);

/// b = 0 and d = 0.1, so the displacement starts at exactly zero.
AdapterModule make_vera_adapter(const ReferenceEncoder& encoder, int class_id, std::shared_ptr<const VeraBasis> basis);

/// Dense displacement: B*A for LoRA, diag(b) * up * diag(d) * down for VeRA.
TaskVector materialize(const AdapterModule& adapter);

struct WeightedTaskVector {
  const TaskVector* vector = nullptr;
  double weight = 0.0;
};

/// Sum of weight_i * tau_i. Throws ContractError on an empty list or on
/// mismatched shapes.
TaskVector combine(std::span<const WeightedTaskVector> terms);

// ---------------------------------------------------------------------------
// Encoding

/// theta0 + alpha * tau on the adapted layers. A null task vector or
/// alpha == 0 yields the frozen weights exactly.
std::vector<Matrix> effective_weights(const ReferenceEncoder& encoder, const TaskVector* tv, double alpha);

struct EncoderActivations {
  Vector pooled;
  Vector hidden;      // after GELU
  Vector projected;   // second linear, before layer-norm
  Vector normed;      // after layer-norm
  Vector embedding;   // unit norm
};

EncoderActivations encode_activations(const ReferenceEncoder& encoder, const std::string& text,
                                      const std::vector<Matrix>& weights);

/// Embedding of `prompt` under weights theta0 + alpha * tv. Unit norm.
Embedding encode(const ReferenceEncoder& encoder, const ClassPrompt& prompt, const TaskVector* tv = nullptr,
                 double alpha = 1.0);

/// Zero-shot embedding (no adapter).
Embedding encode_zero_shot(const ReferenceEncoder& encoder, const ClassPrompt& prompt);

/// Differentiable encode of a pooled input row (1 x token_dim) through the
/// adapter's factors without materializing them. Trainable factors are bound
/// on `tape` under "<key_prefix><param name>". Returns a 1 x embed_dim row.
Var encode_on_tape(Tape& tape, const ReferenceEncoder& encoder, const Vector& pooled, const AdapterModule& adapter,
                   double alpha, const std::string& key_prefix);

}  // namespace moder
