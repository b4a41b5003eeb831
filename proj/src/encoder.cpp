#include "moder/encoder.hpp"

#include <array>
#include <cctype>
#include <fstream>

#include "moder/hash.hpp"

namespace moder {

// ---------------------------------------------------------------------------
// Prompts

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  const auto first = text_.find(kPlaceholder);
  if (first == std::string::npos) throw ContractError("PromptTemplate: missing {CLS} placeholder in '" + text_ + "'");
  if (text_.find(kPlaceholder, first + 1) != std::string::npos)
    throw ContractError("PromptTemplate: more than one {CLS} placeholder in '" + text_ + "'");
}

std::string PromptTemplate::render(const std::string& class_name) const {
  if (class_name.empty()) throw ContractError("render_prompt: empty class name");
  std::string out = text_;
  out.replace(out.find(kPlaceholder), kPlaceholder.size(), class_name);
  return out;
}

const PromptTemplate& canonical_template() {
  static const PromptTemplate t("a photo of a {CLS}.");
  return t;
}

std::vector<PromptTemplate> default_templates(std::size_t count) {
  static const std::array<const char*, 16> library = {
      "a photo of a {CLS}.",       "a bad photo of a {CLS}.",    "a photo of many {CLS}.",
      "a sculpture of a {CLS}.",   "a rendering of a {CLS}.",    "graffiti of a {CLS}.",
      "a cropped photo of the {CLS}.", "a tattoo of a {CLS}.",   "a bright photo of a {CLS}.",
      "a photo of a clean {CLS}.", "a photo of a dirty {CLS}.",  "a dark photo of the {CLS}.",
      "a drawing of a {CLS}.",     "a photo of my {CLS}.",       "the plastic {CLS}.",
      "a close-up photo of a {CLS}.",
  };
  if (count == 0) throw ContractError("default_templates: count must be positive");
  std::vector<PromptTemplate> out;
  for (std::size_t i = 0; i < std::min(count, library.size()); ++i) out.emplace_back(library[i]);
  return out;
}

std::vector<PromptTemplate> load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_templates: cannot open " + path.string());
  std::vector<PromptTemplate> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    try {
      out.emplace_back(line);
    } catch (const ContractError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw ConfigError("load_templates: no templates in " + path.string());
  return out;
}

std::string ClassPrompt::text() const { return prompt_template.render(class_name); }

std::string render_prompt(const std::string& class_name, const PromptTemplate& tmpl) { return tmpl.render(class_name); }

std::vector<std::uint32_t> tokenize(const std::string& text, std::uint32_t vocab_size) {
  if (vocab_size == 0) throw ContractError("tokenize: vocabulary size must be positive");
  std::vector<std::uint32_t> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    ids.push_back(static_cast<std::uint32_t>(fnv1a64(word) % vocab_size));
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

// ---------------------------------------------------------------------------
// Reference encoder

namespace {
constexpr std::array<const char*, 2> kWeightNames = {"fc1.weight", "fc2.weight"};
constexpr std::array<const char*, 2> kBiasNames = {"fc1.bias", "fc2.bias"};
}  // namespace

ReferenceEncoder::ReferenceEncoder(EncoderConfig config) : config_(config) {
  const auto& c = config_;
  if (c.vocab_size <= 0 || c.token_dim <= 0 || c.hidden_dim <= 0 || c.embed_dim <= 0)
    throw ContractError("ReferenceEncoder: dimensions must be positive");
  SeededRng rng(derive_seed(c.seed, {0x454e43ULL}));
  theta0_.add("token_embedding", rng.normal_matrix(c.vocab_size, c.token_dim), false);
  theta0_.add("fc1.weight", rng.normal_matrix(c.hidden_dim, c.token_dim, 1.0 / std::sqrt(double(c.token_dim))), false);
  theta0_.add("fc1.bias", rng.normal_matrix(c.hidden_dim, 1, 0.1), false);
  theta0_.add("fc2.weight", rng.normal_matrix(c.embed_dim, c.hidden_dim, 1.0 / std::sqrt(double(c.hidden_dim))), false);
  theta0_.add("fc2.bias", rng.normal_matrix(c.embed_dim, 1, 0.1), false);
  theta0_.add("ln.gamma", Matrix::Ones(c.embed_dim, 1), false);
  theta0_.add("ln.beta", Matrix::Zero(c.embed_dim, 1), false);

  layers_ = {{"fc1", c.hidden_dim, c.token_dim}, {"fc2", c.embed_dim, c.hidden_dim}};

  Fnv1a h;
  for (const auto& [name, p] : theta0_) {
    h.update(name);
    h.update_matrix(p.value);
  }
  fingerprint_ = h.digest();
}

const Matrix& ReferenceEncoder::base_weight(std::size_t layer) const { return theta0_.value(kWeightNames.at(layer)); }
const Matrix& ReferenceEncoder::base_bias(std::size_t layer) const { return theta0_.value(kBiasNames.at(layer)); }

Vector ReferenceEncoder::pool(const std::string& text) const {
  const auto ids = tokenize(text, static_cast<std::uint32_t>(config_.vocab_size));
  if (ids.empty()) throw ContractError("ReferenceEncoder: prompt '" + text + "' has no tokens");
  const Matrix& table = theta0_.value("token_embedding");
  Vector acc = Vector::Zero(config_.token_dim);
  for (auto id : ids) acc += table.row(id).transpose();
  return acc / static_cast<double>(ids.size());
}

// ---------------------------------------------------------------------------
// Adapters

TaskVector TaskVector::zeros(const ReferenceEncoder& encoder) {
  TaskVector tv;
  for (const auto& l : encoder.adapted_layers()) tv.deltas.push_back(Matrix::Zero(l.rows, l.cols));
  tv.provenance = "zero";
  return tv;
}

TaskVector& TaskVector::operator+=(const TaskVector& other) {
  if (deltas.size() != other.deltas.size()) throw ContractError("TaskVector: layer count mismatch");
  for (std::size_t l = 0; l < deltas.size(); ++l) {
    if (deltas[l].rows() != other.deltas[l].rows() || deltas[l].cols() != other.deltas[l].cols())
      throw ContractError("TaskVector: shape mismatch at layer " + std::to_string(l));
    deltas[l] += other.deltas[l];
  }
  return *this;
}

TaskVector& TaskVector::operator*=(double s) {
  for (auto& d : deltas) d *= s;
  return *this;
}

std::string adapter_param_name(std::size_t layer, const char* factor) {
  return "l" + std::to_string(layer) + "." + factor;
}

std::size_t AdapterModule::num_layers() const {
  std::size_t n = 0;
  const char* probe = variant == AdapterVariant::Lora ? "B" : "b";
  while (params.contains(adapter_param_name(n, probe))) ++n;
  return n;
}

std::shared_ptr<const VeraBasis> make_vera_basis(const ReferenceEncoder& encoder, int rank, std::uint64_t hub_seed) {
  if (rank <= 0) throw ContractError("make_vera_basis: rank must be positive");
  auto basis = std::make_shared<VeraBasis>();
  basis->rank = rank;
  SeededRng rng(derive_seed(hub_seed, {0x56455241ULL}));
  for (const auto& l : encoder.adapted_layers()) {
    basis->down.push_back(rng.normal_matrix(rank, l.cols, 1.0 / std::sqrt(double(l.cols))));
    basis->up.push_back(rng.normal_matrix(l.rows, rank, 1.0 / std::sqrt(double(rank))));
  }
  return basis;
}

AdapterModule make_lora_adapter(const ReferenceEncoder& encoder, int class_id, int rank, std::uint64_t seed) {
  if (rank <= 0) throw ContractError("make_lora_adapter: rank must be positive");
  if (class_id < 0) throw ContractError("make_lora_adapter: class id must be non-negative");
  AdapterModule a;
  a.variant = AdapterVariant::Lora;
  a.rank = rank;
  a.class_id = class_id;
  SeededRng rng(derive_seed(seed, {0x4c4f5241ULL, static_cast<std::uint64_t>(class_id)}));
  const auto& layers = encoder.adapted_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (rank >= std::min(layers[l].rows, layers[l].cols))
      throw ContractError("make_lora_adapter: rank " + std::to_string(rank) + " is not below the layer dimensions");
    a.params.add(adapter_param_name(l, "B"), Matrix::Zero(layers[l].rows, rank));
    a.params.add(adapter_param_name(l, "A"), rng.normal_matrix(rank, layers[l].cols, 1.0 / std::sqrt(double(layers[l].cols))));
  }
  return a;
}

AdapterModule make_vera_adapter(const ReferenceEncoder& encoder, int class_id, std::shared_ptr<const VeraBasis> basis) {
  if (!basis) throw ContractError("make_vera_adapter: missing shared basis");
  if (class_id < 0) throw ContractError("make_vera_adapter: class id must be non-negative");
  const auto& layers = encoder.adapted_layers();
  if (basis->down.size() != layers.size()) throw ContractError("make_vera_adapter: basis does not match encoder");
  AdapterModule a;
  a.variant = AdapterVariant::Vera;
  a.rank = basis->rank;
  a.class_id = class_id;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    a.params.add(adapter_param_name(l, "d"), Matrix::Constant(basis->rank, 1, 0.1));
    a.params.add(adapter_param_name(l, "b"), Matrix::Zero(layers[l].rows, 1));
  }
  a.basis = std::move(basis);
  return a;
}

TaskVector materialize(const AdapterModule& adapter) {
  TaskVector tv;
  const std::size_t n = adapter.num_layers();
  for (std::size_t l = 0; l < n; ++l) {
    if (adapter.variant == AdapterVariant::Lora) {
      const Matrix& b = adapter.params.value(adapter_param_name(l, "B"));
      const Matrix& a = adapter.params.value(adapter_param_name(l, "A"));
      if (b.cols() != a.rows()) throw DimensionError("materialize: factor rank mismatch at layer " + std::to_string(l));
      tv.deltas.push_back(b * a);
    } else {
      if (!adapter.basis) throw ContractError("materialize: VeRA adapter without basis");
      const Matrix& d = adapter.params.value(adapter_param_name(l, "d"));
      const Matrix& b = adapter.params.value(adapter_param_name(l, "b"));
      const Matrix& up = adapter.basis->up.at(l);
      const Matrix& down = adapter.basis->down.at(l);
      if (d.rows() != up.cols() || b.rows() != up.rows())
        throw DimensionError("materialize: scaling vector mismatch at layer " + std::to_string(l));
      tv.deltas.push_back(b.col(0).asDiagonal() * up * d.col(0).asDiagonal() * down);
    }
  }
  tv.provenance = "expert:" + std::to_string(adapter.class_id);
  return tv;
}

TaskVector combine(std::span<const WeightedTaskVector> terms) {
  if (terms.empty()) throw ContractError("combine: empty list");
  for (const auto& t : terms)
    if (t.vector == nullptr) throw ContractError("combine: null task vector");
  TaskVector out;
  const TaskVector& first = *terms.front().vector;
  for (const auto& d : first.deltas) out.deltas.push_back(Matrix::Zero(d.rows(), d.cols()));
  std::string prov = "merge(";
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const TaskVector& tv = *terms[k].vector;
    if (tv.deltas.size() != out.deltas.size()) throw ContractError("combine: layer count mismatch");
    for (std::size_t l = 0; l < out.deltas.size(); ++l) {
      if (tv.deltas[l].rows() != out.deltas[l].rows() || tv.deltas[l].cols() != out.deltas[l].cols())
        throw ContractError("combine: shape mismatch at layer " + std::to_string(l));
      out.deltas[l] += terms[k].weight * tv.deltas[l];
    }
    if (k) prov += ",";
    prov += tv.provenance + "*" + std::to_string(terms[k].weight);
  }
  out.provenance = prov + ")";
  return out;
}

// ---------------------------------------------------------------------------
// Encoding

std::vector<Matrix> effective_weights(const ReferenceEncoder& encoder, const TaskVector* tv, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("encode: alpha must lie in [0, 1]");
  const auto& layers = encoder.adapted_layers();
  std::vector<Matrix> w;
  for (std::size_t l = 0; l < layers.size(); ++l) w.push_back(encoder.base_weight(l));
  if (tv == nullptr || alpha == 0.0) return w;
  if (tv->deltas.size() != layers.size()) throw ContractError("encode: task vector has the wrong layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (tv->deltas[l].rows() != w[l].rows() || tv->deltas[l].cols() != w[l].cols())
      throw ContractError("encode: task vector shape mismatch at layer " + std::to_string(l));
    w[l] += alpha * tv->deltas[l];
  }
  return w;
}

EncoderActivations encode_activations(const ReferenceEncoder& encoder, const std::string& text,
                                      const std::vector<Matrix>& weights) {
  if (weights.size() != 2) throw ContractError("encode: expected two adapted weights");
  const ParamSet& p = encoder.frozen();
  EncoderActivations a;
  a.pooled = encoder.pool(text);
  a.hidden = activate(Activation::Gelu, Vector(weights[0] * a.pooled + encoder.base_bias(0)));
  a.projected = weights[1] * a.hidden + encoder.base_bias(1);

  const double mu = a.projected.mean();
  const double var = (a.projected.array() - mu).square().mean();
  const double inv = 1.0 / std::sqrt(var + encoder.config().layer_norm_eps);
  a.normed = ((a.projected.array() - mu) * inv).matrix().cwiseProduct(p.value("ln.gamma").col(0)) + p.value("ln.beta").col(0);
  a.embedding = l2_normalize(a.normed);
  return a;
}

Embedding encode(const ReferenceEncoder& encoder, const ClassPrompt& prompt, const TaskVector* tv, double alpha) {
  return encode_activations(encoder, prompt.text(), effective_weights(encoder, tv, alpha)).embedding;
}

Embedding encode_zero_shot(const ReferenceEncoder& encoder, const ClassPrompt& prompt) {
  return encode(encoder, prompt, nullptr, 0.0);
}

Var encode_on_tape(Tape& tape, const ReferenceEncoder& encoder, const Vector& pooled, const AdapterModule& adapter,
                   double alpha, const std::string& key_prefix) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("encode: alpha must lie in [0, 1]");
  const auto& layers = encoder.adapted_layers();
  if (adapter.num_layers() != layers.size()) throw ContractError("encode: adapter layer count mismatch");
  if (pooled.size() != encoder.config().token_dim) throw DimensionError("encode: pooled input has the wrong width");

  auto bind = [&](const std::string& name) {
    const Param& p = adapter.params.at(name);
    return p.trainable ? tape.leaf(p.value, key_prefix + name) : tape.constant(p.value);
  };

  Var h = tape.constant(pooled.transpose());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Var base = ag::matmul(h, tape.constant(encoder.base_weight(l).transpose()));
    Var delta;
    if (adapter.variant == AdapterVariant::Lora) {
      Var a = bind(adapter_param_name(l, "A"));
      Var b = bind(adapter_param_name(l, "B"));
      delta = ag::matmul(ag::matmul(h, ag::transpose(a)), ag::transpose(b));
    } else {
      if (!adapter.basis) throw ContractError("encode: VeRA adapter without basis");
      Var d = bind(adapter_param_name(l, "d"));
      Var b = bind(adapter_param_name(l, "b"));
      Var u = ag::scale_cols(ag::matmul(h, tape.constant(adapter.basis->down.at(l).transpose())), d);
      delta = ag::scale_cols(ag::matmul(u, tape.constant(adapter.basis->up.at(l).transpose())), b);
    }
    Var z = ag::add_row_bias(ag::add(base, ag::scale(delta, alpha)), tape.constant(encoder.base_bias(l)));
    h = (l == 0) ? ag::activation(z, Activation::Gelu) : z;
  }
  const ParamSet& p = encoder.frozen();
  Var normed = ag::layer_norm_rows(h, tape.constant(p.value("ln.gamma")), tape.constant(p.value("ln.beta")),
                                   encoder.config().layer_norm_eps);
  return ag::l2_normalize_rows(normed);
}

}  // namespace moder
