#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bkd/tensor.hpp"

namespace bkd {

// Checkpoint files that cannot be read back (bad magic, version, kind, or a
// truncated payload).
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation : std::uint8_t { relu = 0, tanh = 1, identity = 2 };

struct LayerSpec {
  int in_dim = 0;
  int out_dim = 0;
  Activation activation = Activation::identity;
};

enum class ModelKind : std::uint8_t { mlp = 0, polynomial = 1, embedding = 2 };

// Fixed polynomial sum_j coeffs[j] * x^j. Used as the ground-truth teacher
// function of the synthetic experiment and for exact target generation.
struct PolynomialModel {
  std::vector<double> coeffs;  // degree + 1 entries, ascending powers

  int degree() const { return static_cast<int>(coeffs.size()) - 1; }
  double eval(double x) const;
};

// Sequence of affine layers with activations. kind=polynomial models first
// featurize a scalar input into scaled monomials [1, u, u^2, ...] with
// u = x / half_width, then run the layers; this keeps polynomial regressors
// on the same gradient machinery as MLPs.
struct Network {
  ModelKind kind = ModelKind::mlp;
  std::vector<LayerSpec> layers;
  std::vector<Tensor> weights;  // [out x in] per layer
  std::vector<Tensor> biases;   // [out] per layer
  int poly_degree = 0;
  double poly_half_width = 1.0;
  std::uint64_t init_seed = 0;

  int input_dim() const;   // raw input width (1 for polynomial kind)
  int output_dim() const;
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
};

// Token model: embedding matrix [embed_dim x vocab] plus an MLP head over the
// concatenated embeddings of a fixed-length token sequence.
struct EmbeddingModel {
  int vocab = 0;
  int embed_dim = 0;
  int seq_len = 0;
  Tensor embedding;  // [embed_dim x vocab]
  Network head;      // input embed_dim * seq_len
  std::uint64_t init_seed = 0;
};

Network make_mlp(const std::vector<LayerSpec>& layers, std::uint64_t seed);
// trainable polynomial regressor of the given degree (single identity layer
// over monomial features)
Network make_polynomial(int degree, double half_width, std::uint64_t seed);
// wrap fixed coefficients as a polynomial-kind network with identical outputs
Network from_polynomial(const PolynomialModel& model, double half_width);
// inverse of from_polynomial: recovers plain coefficients
PolynomialModel to_polynomial(const Network& model);
EmbeddingModel make_embedding_model(int vocab, int embed_dim, int seq_len,
                                    const std::vector<LayerSpec>& head_layers,
                                    std::uint64_t seed);

// Forward pass; recorded for differentiation whenever batch or parameters are
// marked as leaves. batch is [n x input_dim].
Tensor forward(const Network& model, const Tensor& batch);
// scaled monomial features [1, u, u^2, ...], differentiable in x
Tensor polynomial_features(const Tensor& x, int degree, double half_width);

// Same values with parameters demoted from differentiation leaves; forward
// passes on a frozen clone record input gradients only.
Network frozen_clone(const Network& model);
EmbeddingModel frozen_clone(const EmbeddingModel& model);

// tokens are row-major [n x seq_len] ids; returns [n x seq_len*embed_dim]
Tensor embed_tokens(const Tensor& embedding, const std::vector<int>& tokens, int n, int seq_len);
Tensor forward(const EmbeddingModel& model, const std::vector<int>& tokens, int n);
// head only, bypassing the embedding lookup; z is [n x seq_len*embed_dim]
Tensor forward_from_embedding(const EmbeddingModel& model, const Tensor& z);

long param_count(const Network& model);
long param_count(const EmbeddingModel& model);

// Versioned binary checkpoints: magic "BKD1", version, model kind, dims,
// then raw little-endian 64-bit floats. Round-trips are byte-identical.
void save_network(const Network& model, const std::string& path);
Network load_network(const std::string& path);
void save_embedding_model(const EmbeddingModel& model, const std::string& path);
EmbeddingModel load_embedding_model(const std::string& path);
ModelKind peek_model_kind(const std::string& path);

const char* activation_name(Activation a);

}  // namespace bkd
