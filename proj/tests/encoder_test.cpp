#include <cctype>
#include <fstream>

#include "doctest.h"
#include "moder/encoder.hpp"
#include "support.hpp"

using namespace moder;
using namespace moder::testing;

namespace {

// Reference word hash: 64-bit FNV-1a of the lowercased word.
std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Plain re-implementation of the encoder forward from the frozen weights.
Vector reference_encode(const ReferenceEncoder& enc, const std::string& text, const Matrix& w1, const Matrix& w2) {
  const ParamSet& p = enc.frozen();
  const auto ids = tokenize(text, static_cast<std::uint32_t>(enc.config().vocab_size));
  Vector pooled = Vector::Zero(enc.config().token_dim);
  for (auto id : ids) pooled += p.value("token_embedding").row(id).transpose();
  pooled /= static_cast<double>(ids.size());
  Vector h = w1 * pooled + p.value("fc1.bias").col(0);
  for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = gelu(h(i));
  Vector y = w2 * h + p.value("fc2.bias").col(0);
  const double mu = y.mean();
  const double var = (y.array() - mu).square().mean();
  Vector n = ((y.array() - mu) / std::sqrt(var + enc.config().layer_norm_eps)).matrix();
  n = n.cwiseProduct(p.value("ln.gamma").col(0)) + p.value("ln.beta").col(0);
  return n / n.norm();
}

}  // namespace

TEST_CASE("render_prompt and tokenize") {
  const PromptTemplate t("a photo of a {CLS}.");
  CHECK(render_prompt("dog", t) == "a photo of a dog.");
  CHECK(canonical_template().render("dog") == "a photo of a dog.");
  CHECK_THROWS_AS(render_prompt("", t), ContractError);
  CHECK_THROWS_AS(PromptTemplate("no placeholder"), ContractError);
  CHECK_THROWS_AS(PromptTemplate("{CLS} and {CLS}"), ContractError);

  const auto a = tokenize("A photo of a Dog.", 512);
  CHECK(a == tokenize("A photo of a Dog.", 512));
  const std::vector<std::string> words{"a", "photo", "of", "a", "dog"};
  REQUIRE(a.size() == words.size());
  for (std::size_t i = 0; i < words.size(); ++i) CHECK(a[i] == fnv(words[i]) % 512);
  CHECK(tokenize("red-fox  42", 1000).size() == 3);
}

TEST_CASE("default templates start with the canonical one and load from file") {
  const auto t = default_templates(4);
  REQUIRE(t.size() == 4);
  CHECK(t.front() == canonical_template());
  CHECK(default_templates(100000).size() >= 4);

  TempDir dir("templates");
  const auto path = dir.path() / "t.txt";
  std::ofstream(path) << "# comment\n\na sketch of a {CLS}.\na {CLS} in the wild.\n";
  const auto loaded = load_templates(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[1].render("cat") == "a cat in the wild.");
  std::ofstream(dir.path() / "bad.txt") << "no placeholder here\n";
  CHECK_THROWS_AS(load_templates(dir.path() / "bad.txt"), ConfigError);
  CHECK_THROWS_AS(load_templates(dir.path() / "missing.txt"), IoError);
}

TEST_CASE("encoder is deterministic, unit norm and fingerprinted") {
  const ReferenceEncoder a(small_encoder_config(3)), b(small_encoder_config(3)), c(small_encoder_config(4));
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != c.fingerprint());
  const ClassPrompt p{0, "maple heron"};
  const Embedding z = encode_zero_shot(a, p);
  CHECK(z == encode_zero_shot(b, p));
  CHECK(std::abs(z.norm() - 1.0) < 1e-12);
  CHECK((z - reference_encode(a, p.text(), a.base_weight(0), a.base_weight(1))).cwiseAbs().maxCoeff() < 1e-12);
  for (const auto& [name, param] : a.frozen()) CHECK_FALSE(param.trainable);
}

TEST_CASE("materialize") {
  const ReferenceEncoder enc(small_encoder_config());
  SeededRng rng(1);
  SUBCASE("fresh LoRA adapter is a zero task vector") {
    const TaskVector tv = materialize(make_lora_adapter(enc, 0, 2, 5));
    for (const auto& d : tv.deltas) CHECK(d.isZero(0.0));
  }
  SUBCASE("rank-1 hand product") {
    AdapterModule a = make_lora_adapter(enc, 0, 1, 5);
    Matrix& B = a.params.at(adapter_param_name(0, "B")).value;
    Matrix& A = a.params.at(adapter_param_name(0, "A")).value;
    B.setZero();
    A.setZero();
    B(0, 0) = 1.0;  // B = [1; 0; ...]
    A(0, 1) = 2.0;  // A = [0 2 0 ...]
    const TaskVector tv = materialize(a);
    Matrix expected = Matrix::Zero(B.rows(), A.cols());
    expected(0, 1) = 2.0;
    CHECK(tv.deltas[0] == expected);
  }
  SUBCASE("VeRA with unit scaling vectors is the basis product") {
    const auto basis = make_vera_basis(enc, 3, 17);
    AdapterModule v = make_vera_adapter(enc, 0, basis);
    CHECK(materialize(v).deltas[0].isZero(0.0));
    for (std::size_t l = 0; l < v.num_layers(); ++l) {
      v.params.at(adapter_param_name(l, "d")).value.setOnes();
      v.params.at(adapter_param_name(l, "b")).value.setOnes();
    }
    const TaskVector tv = materialize(v);
    for (std::size_t l = 0; l < v.num_layers(); ++l)
      CHECK((tv.deltas[l] - basis->up[l] * basis->down[l]).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("combine") {
  const ReferenceEncoder enc(small_encoder_config());
  SeededRng rng(2);
  const TaskVector t1 = materialize(random_lora(enc, 0, 2, rng));
  const TaskVector t2 = materialize(random_lora(enc, 1, 2, rng));
  const std::vector<WeightedTaskVector> one{{&t1, 1.0}};
  const TaskVector c1 = combine(one);
  for (std::size_t l = 0; l < t1.deltas.size(); ++l) CHECK(c1.deltas[l] == t1.deltas[l]);
  const std::vector<WeightedTaskVector> halves{{&t1, 0.5}, {&t1, 0.5}};
  const TaskVector c2 = combine(halves);
  for (std::size_t l = 0; l < t1.deltas.size(); ++l) CHECK((c2.deltas[l] - t1.deltas[l]).cwiseAbs().maxCoeff() < 1e-15);
  const std::vector<WeightedTaskVector> mix{{&t1, 0.3}, {&t2, 0.7}};
  const TaskVector c3 = combine(mix);
  for (std::size_t l = 0; l < t1.deltas.size(); ++l)
    for (Eigen::Index i = 0; i < t1.deltas[l].size(); ++i)
      CHECK(c3.deltas[l].data()[i] == doctest::Approx(0.3 * t1.deltas[l].data()[i] + 0.7 * t2.deltas[l].data()[i]).epsilon(1e-14));
  CHECK_THROWS_AS(combine(std::vector<WeightedTaskVector>{}), ContractError);
  TaskVector bad = t1;
  bad.deltas[0] = Matrix::Zero(1, 1);
  const std::vector<WeightedTaskVector> mismatched{{&t1, 0.5}, {&bad, 0.5}};
  CHECK_THROWS_AS(combine(mismatched), ContractError);
}

TEST_CASE("encode with adapters") {
  const ReferenceEncoder enc(small_encoder_config());
  SeededRng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const ClassPrompt p{trial, random_name(rng)};
    const TaskVector tv = materialize(random_lora(enc, trial, 2, rng));
    const Embedding zs = encode_zero_shot(enc, p);
    // No task vector or alpha = 0: frozen output, bit for bit.
    CHECK(encode(enc, p, nullptr, 0.7) == zs);
    CHECK(encode(enc, p, &tv, 0.0) == zs);
    const auto w0 = effective_weights(enc, &tv, 0.0);
    CHECK(w0[0] == enc.base_weight(0));
    CHECK(w0[1] == enc.base_weight(1));
    // alpha = 1 against weights materialized by hand.
    const Vector ref = reference_encode(enc, p.text(), enc.base_weight(0) + tv.deltas[0], enc.base_weight(1) + tv.deltas[1]);
    CHECK((encode(enc, p, &tv, 1.0) - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
  const TaskVector tv = materialize(random_lora(enc, 0, 2, rng));
  CHECK_THROWS_AS(encode(enc, ClassPrompt{0, "fox"}, &tv, 1.5), ContractError);
}

TEST_CASE("pre-norm activations are linear in alpha at the weight level") {
  const ReferenceEncoder enc(small_encoder_config());
  SeededRng rng(4);
  const TaskVector tv = materialize(random_lora(enc, 0, 2, rng));
  const std::string text = canonical_template().render("comet river");
  auto hidden_pre = [&](double alpha) {
    const auto w = effective_weights(enc, &tv, alpha);
    return Vector(w[0] * enc.pool(text) + enc.base_bias(0));
  };
  // First-layer pre-activation is affine in alpha: f(0.5) = (f(0) + f(1)) / 2.
  CHECK((hidden_pre(0.5) - 0.5 * (hidden_pre(0.0) + hidden_pre(1.0))).cwiseAbs().maxCoeff() < 1e-12);
  // Interpolated weights are exactly theta0 + alpha * tau.
  const auto w = effective_weights(enc, &tv, 0.25);
  CHECK((w[1] - (enc.base_weight(1) + 0.25 * tv.deltas[1])).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode_on_tape agrees with the dense encode") {
  const ReferenceEncoder enc(small_encoder_config());
  SeededRng rng(5);
  const std::string text = canonical_template().render("quartz otter");
  SUBCASE("LoRA") {
    const AdapterModule a = random_lora(enc, 0, 3, rng);
    const TaskVector tv = materialize(a);
    Tape tape;
    const Var out = encode_on_tape(tape, enc, enc.pool(text), a, 0.6, "");
    CHECK((out.value().transpose() - encode(enc, ClassPrompt{0, "quartz otter"}, &tv, 0.6)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("VeRA") {
    AdapterModule a = make_vera_adapter(enc, 0, make_vera_basis(enc, 3, 9));
    for (auto& [name, p] : a.params) p.value = rng.normal_matrix(p.value.rows(), p.value.cols());
    const TaskVector tv = materialize(a);
    Tape tape;
    const Var out = encode_on_tape(tape, enc, enc.pool(text), a, 1.0, "");
    CHECK((out.value().transpose() - encode(enc, ClassPrompt{0, "quartz otter"}, &tv, 1.0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("encoder forward gradients match finite differences") {
  const ReferenceEncoder enc(small_encoder_config());
  SeededRng rng(6);
  for (AdapterVariant variant : {AdapterVariant::Lora, AdapterVariant::Vera}) {
    AdapterModule a = variant == AdapterVariant::Lora ? random_lora(enc, 0, 2, rng)
                                                      : make_vera_adapter(enc, 0, make_vera_basis(enc, 2, 4));
    for (auto& [name, p] : a.params) p.value = rng.normal_matrix(p.value.rows(), p.value.cols(), 0.3);
    const Vector pooled = enc.pool("harbor falcon");
    const Matrix probe = rng.normal_matrix(1, enc.embed_dim());
    auto loss = [&](Tape& tape) {
      return ag::sum(ag::hadamard(encode_on_tape(tape, enc, pooled, a, 0.8, "e."), tape.constant(probe)));
    };
    Tape tape;
    const Gradients g = tape.backward(loss(tape));
    for (auto& [name, p] : a.params) {
      CAPTURE(name);
      const Matrix fd = fd_gradient(
          [&] {
            Tape t;
            return loss(t).value()(0, 0);
          },
          p.value);
      CHECK(rel_error(g.at("e." + name), fd) < 1e-6);
    }
  }
}

TEST_CASE("VeRA adapters share one frozen basis") {
  const ReferenceEncoder enc(small_encoder_config());
  const auto basis = make_vera_basis(enc, 4, 33);
  const AdapterModule a = make_vera_adapter(enc, 0, basis), b = make_vera_adapter(enc, 1, basis);
  CHECK(a.basis.get() == b.basis.get());
  const auto again = make_vera_basis(enc, 4, 33);
  CHECK(again->down[0] == basis->down[0]);
  for (const auto& [name, p] : a.params) CHECK(p.trainable);
  // Only the scaling vectors are per-expert parameters.
  CHECK(a.params.size() == 2 * enc.adapted_layers().size());
}
