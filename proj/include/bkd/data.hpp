#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bkd/nn.hpp"
#include "bkd/tensor.hpp"

namespace bkd {

// Unreadable or malformed dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetKind : std::uint8_t { classification = 0, regression = 1, token = 2 };

struct Dataset {
  DatasetKind kind = DatasetKind::classification;
  Tensor inputs;                // [n x d]; unused for token datasets
  std::vector<int> labels;      // classification and token
  std::vector<double> targets;  // regression
  std::vector<int> tokens;      // token: row-major [n x seq_len] ids
  int seq_len = 0;
  int vocab = 0;
  int num_classes = 0;
  std::string provenance;

  int size() const;
  int feature_dim() const;
};

// IDX containers (big-endian, magic 2051 for images / 2049 for labels).
// Pixels are flattened row-major and scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
// fixture/export writers, same wire layout
void write_idx_images(const std::string& path, const std::vector<std::vector<std::uint8_t>>& images,
                      int rows, int cols);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

// n scalar samples with targets exactly on the teacher polynomial
Dataset gen_synthetic(const PolynomialModel& teacher, int n, double lo, double hi,
                      std::uint64_t seed, bool equal_spacing = false);

// random token sequences labeled by parity of the token-id sum
Dataset gen_token_task(int vocab, int seq_len, int n, std::uint64_t seed);

// seeded selection without replacement; stratified keeps per-class counts
// proportional within one sample
Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed, bool stratified);

// binary dataset container, sibling of the checkpoint format (magic "BKDD")
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace bkd
