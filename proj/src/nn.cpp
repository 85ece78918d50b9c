#include "bkd/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "bkd/rng.hpp"

namespace bkd {

namespace {

constexpr char kMagic[4] = {'B', 'K', 'D', '1'};
constexpr std::uint8_t kVersion = 1;

Tensor apply_activation(const Tensor& t, Activation a) {
  switch (a) {
    case Activation::relu:
      return relu(t);
    case Activation::tanh:
      return tanh_act(t);
    case Activation::identity:
      return t;
  }
  throw std::invalid_argument("unknown activation");
}

void validate_layers(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) {
    throw std::invalid_argument("network needs at least one layer");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].in_dim <= 0 || layers[i].out_dim <= 0) {
      throw std::invalid_argument("layer dims must be positive");
    }
    if (i > 0 && layers[i].in_dim != layers[i - 1].out_dim) {
      throw ShapeError("layer " + std::to_string(i) + " input dim " +
                       std::to_string(layers[i].in_dim) + " does not chain from previous output " +
                       std::to_string(layers[i - 1].out_dim));
    }
  }
}

// weights uniform in +-1/sqrt(fan_in), biases zero
void init_params(Network& net, Rng& rng) {
  net.weights.clear();
  net.biases.clear();
  for (const auto& layer : net.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in_dim));
    std::vector<double> w(static_cast<std::size_t>(layer.out_dim) * layer.in_dim);
    for (double& v : w) {
      v = rng.uniform(-bound, bound);
    }
    net.weights.push_back(
        Tensor::from_data({layer.out_dim, layer.in_dim}, std::move(w)).set_requires_grad());
    net.biases.push_back(Tensor::zeros({layer.out_dim}).set_requires_grad());
  }
}

}  // namespace

double PolynomialModel::eval(double x) const {
  // ascending-power accumulation; matches the featurized network path exactly
  double acc = 0.0;
  double p = 1.0;
  for (double c : coeffs) {
    acc += c * p;
    p *= x;
  }
  return acc;
}

int Network::input_dim() const {
  return kind == ModelKind::polynomial ? 1 : layers.front().in_dim;
}

int Network::output_dim() const {
  return layers.back().out_dim;
}

std::vector<Tensor*> Network::params() {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

std::vector<const Tensor*> Network::params() const {
  std::vector<const Tensor*> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

Network make_mlp(const std::vector<LayerSpec>& layers, std::uint64_t seed) {
  validate_layers(layers);
  Network net;
  net.kind = ModelKind::mlp;
  net.layers = layers;
  net.init_seed = seed;
  Rng rng(seed);
  init_params(net, rng);
  return net;
}

Network make_polynomial(int degree, double half_width, std::uint64_t seed) {
  if (degree < 0) {
    throw std::invalid_argument("polynomial degree must be nonnegative");
  }
  if (half_width <= 0.0) {
    throw std::invalid_argument("half_width must be positive");
  }
  Network net;
  net.kind = ModelKind::polynomial;
  net.layers = {{degree + 1, 1, Activation::identity}};
  net.poly_degree = degree;
  net.poly_half_width = half_width;
  net.init_seed = seed;
  Rng rng(seed);
  init_params(net, rng);
  return net;
}

Network from_polynomial(const PolynomialModel& model, double half_width) {
  if (model.coeffs.empty()) {
    throw std::invalid_argument("polynomial model has no coefficients");
  }
  Network net;
  net.kind = ModelKind::polynomial;
  const int degree = model.degree();
  net.layers = {{degree + 1, 1, Activation::identity}};
  net.poly_degree = degree;
  net.poly_half_width = half_width;
  // features are (x/s)^j, so weight j carries c_j * s^j
  std::vector<double> w(model.coeffs.size());
  double sj = 1.0;
  for (std::size_t j = 0; j < model.coeffs.size(); ++j) {
    w[j] = model.coeffs[j] * sj;
    sj *= half_width;
  }
  net.weights.push_back(Tensor::from_data({1, degree + 1}, std::move(w)));
  net.biases.push_back(Tensor::zeros({1}));
  return net;
}

Network frozen_clone(const Network& model) {
  Network out = model;
  for (std::size_t i = 0; i < out.weights.size(); ++i) {
    out.weights[i] = out.weights[i].detach();
    out.biases[i] = out.biases[i].detach();
  }
  return out;
}

EmbeddingModel frozen_clone(const EmbeddingModel& model) {
  EmbeddingModel out = model;
  out.embedding = out.embedding.detach();
  out.head = frozen_clone(out.head);
  return out;
}

PolynomialModel to_polynomial(const Network& model) {
  if (model.kind != ModelKind::polynomial || model.layers.size() != 1 ||
      model.layers[0].out_dim != 1) {
    throw std::invalid_argument("to_polynomial: not a single-layer polynomial network");
  }
  PolynomialModel poly;
  poly.coeffs.resize(static_cast<std::size_t>(model.poly_degree) + 1);
  const auto& w = model.weights[0].data();
  const double bias = model.biases[0].at(0);
  double sj = 1.0;
  for (std::size_t j = 0; j < poly.coeffs.size(); ++j) {
    poly.coeffs[j] = w[j] / sj;
    sj *= model.poly_half_width;
  }
  poly.coeffs[0] += bias;
  return poly;
}

EmbeddingModel make_embedding_model(int vocab, int embed_dim, int seq_len,
                                    const std::vector<LayerSpec>& head_layers,
                                    std::uint64_t seed) {
  if (vocab < 2 || embed_dim < 1 || seq_len < 1) {
    throw std::invalid_argument("embedding model needs vocab >= 2 and positive dims");
  }
  validate_layers(head_layers);
  if (head_layers.front().in_dim != embed_dim * seq_len) {
    throw ShapeError("head input dim " + std::to_string(head_layers.front().in_dim) +
                     " != embed_dim * seq_len = " + std::to_string(embed_dim * seq_len));
  }
  EmbeddingModel model;
  model.vocab = vocab;
  model.embed_dim = embed_dim;
  model.seq_len = seq_len;
  model.init_seed = seed;
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  std::vector<double> w(static_cast<std::size_t>(embed_dim) * vocab);
  for (double& v : w) {
    v = rng.uniform(-bound, bound);
  }
  model.embedding = Tensor::from_data({embed_dim, vocab}, std::move(w)).set_requires_grad();
  model.head.kind = ModelKind::mlp;
  model.head.layers = head_layers;
  model.head.init_seed = seed;
  init_params(model.head, rng);
  return model;
}

Tensor polynomial_features(const Tensor& x, int degree, double half_width) {
  if (x.shape().size() != 2 || x.cols() != 1) {
    throw ShapeError("polynomial_features: expected [n x 1] input");
  }
  const Tensor u = scale(x, 1.0 / half_width);
  std::vector<Tensor> cols;
  cols.reserve(static_cast<std::size_t>(degree) + 1);
  cols.push_back(Tensor::full({x.rows(), 1}, 1.0));
  for (int j = 1; j <= degree; ++j) {
    cols.push_back(mul(cols.back(), u));
  }
  return concat_cols(cols);
}

Tensor forward(const Network& model, const Tensor& batch) {
  if (batch.shape().size() != 2) {
    throw ShapeError("forward: batch must be rank-2");
  }
  Tensor h = batch;
  if (model.kind == ModelKind::polynomial) {
    h = polynomial_features(h, model.poly_degree, model.poly_half_width);
  }
  if (h.cols() != model.layers.front().in_dim) {
    throw ShapeError("forward: batch width " + std::to_string(h.cols()) +
                     " does not match model input dim " +
                     std::to_string(model.layers.front().in_dim));
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    h = add_bias_row(matmul_nt(h, model.weights[i]), model.biases[i]);
    h = apply_activation(h, model.layers[i].activation);
  }
  return h;
}

Tensor embed_tokens(const Tensor& embedding, const std::vector<int>& tokens, int n, int seq_len) {
  if (static_cast<std::size_t>(n) * seq_len != tokens.size()) {
    throw ShapeError("embed_tokens: token count " + std::to_string(tokens.size()) +
                     " != n * seq_len = " + std::to_string(static_cast<long>(n) * seq_len));
  }
  const int d = embedding.rows();
  // rows of E^T are per-token embeddings; gathering then flattening row-major
  // yields the concatenated sequence embedding per sample
  const Tensor table = transpose(embedding);
  const Tensor gathered = gather_rows(table, tokens);  // [n*seq_len x d]
  return reshape(gathered, {n, seq_len * d});
}

Tensor forward(const EmbeddingModel& model, const std::vector<int>& tokens, int n) {
  return forward(model.head, embed_tokens(model.embedding, tokens, n, model.seq_len));
}

Tensor forward_from_embedding(const EmbeddingModel& model, const Tensor& z) {
  if (z.shape().size() != 2 || z.cols() != model.embed_dim * model.seq_len) {
    throw ShapeError("forward_from_embedding: expected [n x " +
                     std::to_string(model.embed_dim * model.seq_len) + "]");
  }
  return forward(model.head, z);
}

long param_count(const Network& model) {
  long n = 0;
  for (const auto& layer : model.layers) {
    n += static_cast<long>(layer.out_dim) * layer.in_dim + layer.out_dim;
  }
  return n;
}

long param_count(const EmbeddingModel& model) {
  return param_count(model.head) + static_cast<long>(model.embed_dim) * model.vocab;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::identity:
      return "identity";
  }
  return "?";
}

// ------------------------------------------------------------------
// checkpoints
// ------------------------------------------------------------------

namespace {

void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

void write_u32(std::ostream& os, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  os.write(buf, 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  os.write(buf, 8);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

void write_f64_block(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) {
    write_f64(os, x);
  }
}

std::uint8_t read_u8(std::istream& is) {
  const int c = is.get();
  if (c == EOF) {
    throw CheckpointError("checkpoint truncated");
  }
  return static_cast<std::uint8_t>(c);
}

std::uint32_t read_u32(std::istream& is) {
  char buf[4];
  if (!is.read(buf, 4)) {
    throw CheckpointError("checkpoint truncated");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  char buf[8];
  if (!is.read(buf, 8)) {
    throw CheckpointError("checkpoint truncated");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::vector<double> read_f64_block(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) {
    x = read_f64(is);
  }
  return v;
}

void write_header(std::ostream& os, ModelKind kind, std::uint64_t init_seed) {
  os.write(kMagic, 4);
  write_u8(os, kVersion);
  write_u8(os, static_cast<std::uint8_t>(kind));
  write_u64(os, init_seed);
}

ModelKind read_header(std::istream& is, const std::string& path, std::uint64_t& init_seed) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint (expected magic BKD1)");
  }
  const std::uint8_t version = read_u8(is);
  if (version != kVersion) {
    throw CheckpointError("'" + path + "' has unsupported checkpoint version " +
                          std::to_string(version));
  }
  const std::uint8_t kind = read_u8(is);
  if (kind > static_cast<std::uint8_t>(ModelKind::embedding)) {
    throw CheckpointError("'" + path + "' has unknown model kind " + std::to_string(kind));
  }
  init_seed = read_u64(is);
  return static_cast<ModelKind>(kind);
}

void write_network_body(std::ostream& os, const Network& model) {
  write_u32(os, static_cast<std::uint32_t>(model.poly_degree));
  write_f64(os, model.poly_half_width);
  write_u32(os, static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    write_u32(os, static_cast<std::uint32_t>(layer.in_dim));
    write_u32(os, static_cast<std::uint32_t>(layer.out_dim));
    write_u8(os, static_cast<std::uint8_t>(layer.activation));
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    write_f64_block(os, model.weights[i].data());
    write_f64_block(os, model.biases[i].data());
  }
}

Network read_network_body(std::istream& is, ModelKind kind, std::uint64_t init_seed) {
  Network model;
  model.kind = kind;
  model.init_seed = init_seed;
  model.poly_degree = static_cast<int>(read_u32(is));
  model.poly_half_width = read_f64(is);
  const std::uint32_t n_layers = read_u32(is);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec layer;
    layer.in_dim = static_cast<int>(read_u32(is));
    layer.out_dim = static_cast<int>(read_u32(is));
    const std::uint8_t act = read_u8(is);
    if (act > static_cast<std::uint8_t>(Activation::identity)) {
      throw CheckpointError("checkpoint has unknown activation code " + std::to_string(act));
    }
    layer.activation = static_cast<Activation>(act);
    model.layers.push_back(layer);
  }
  validate_layers(model.layers);
  for (const auto& layer : model.layers) {
    auto w = read_f64_block(is, static_cast<std::size_t>(layer.out_dim) * layer.in_dim);
    model.weights.push_back(
        Tensor::from_data({layer.out_dim, layer.in_dim}, std::move(w)).set_requires_grad());
    auto b = read_f64_block(is, static_cast<std::size_t>(layer.out_dim));
    model.biases.push_back(
        Tensor::from_data({layer.out_dim}, std::move(b)).set_requires_grad());
  }
  return model;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw CheckpointError("cannot write checkpoint '" + path + "'");
  }
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw CheckpointError("cannot open checkpoint '" + path + "'");
  }
  return is;
}

}  // namespace

void save_network(const Network& model, const std::string& path) {
  auto os = open_out(path);
  write_header(os, model.kind, model.init_seed);
  write_network_body(os, model);
  if (!os) {
    throw CheckpointError("failed while writing '" + path + "'");
  }
}

Network load_network(const std::string& path) {
  auto is = open_in(path);
  std::uint64_t init_seed = 0;
  const ModelKind kind = read_header(is, path, init_seed);
  if (kind == ModelKind::embedding) {
    throw CheckpointError("'" + path + "' holds an embedding model, not a plain network");
  }
  return read_network_body(is, kind, init_seed);
}

void save_embedding_model(const EmbeddingModel& model, const std::string& path) {
  auto os = open_out(path);
  write_header(os, ModelKind::embedding, model.init_seed);
  write_u32(os, static_cast<std::uint32_t>(model.vocab));
  write_u32(os, static_cast<std::uint32_t>(model.embed_dim));
  write_u32(os, static_cast<std::uint32_t>(model.seq_len));
  write_f64_block(os, model.embedding.data());
  write_network_body(os, model.head);
  if (!os) {
    throw CheckpointError("failed while writing '" + path + "'");
  }
}

EmbeddingModel load_embedding_model(const std::string& path) {
  auto is = open_in(path);
  std::uint64_t init_seed = 0;
  const ModelKind kind = read_header(is, path, init_seed);
  if (kind != ModelKind::embedding) {
    throw CheckpointError("'" + path + "' does not hold an embedding model");
  }
  EmbeddingModel model;
  model.init_seed = init_seed;
  model.vocab = static_cast<int>(read_u32(is));
  model.embed_dim = static_cast<int>(read_u32(is));
  model.seq_len = static_cast<int>(read_u32(is));
  auto w = read_f64_block(is, static_cast<std::size_t>(model.embed_dim) * model.vocab);
  model.embedding =
      Tensor::from_data({model.embed_dim, model.vocab}, std::move(w)).set_requires_grad();
  model.head = read_network_body(is, ModelKind::mlp, init_seed);
  return model;
}

ModelKind peek_model_kind(const std::string& path) {
  auto is = open_in(path);
  std::uint64_t init_seed = 0;
  return read_header(is, path, init_seed);
}

}  // namespace bkd
