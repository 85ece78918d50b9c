#include "bkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "bkd/rng.hpp"

namespace bkd {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 2051;
constexpr std::uint32_t kIdxLabelsMagic = 2049;
constexpr char kDatasetMagic[4] = {'B', 'K', 'D', 'D'};
constexpr std::uint8_t kDatasetVersion = 1;

std::uint32_t read_u32_be(std::istream& is, const std::string& path) {
  unsigned char buf[4];
  if (!is.read(reinterpret_cast<char*>(buf), 4)) {
    throw DataError("'" + path + "' truncated while reading header");
  }
  return (static_cast<std::uint32_t>(buf[0]) << 24) | (static_cast<std::uint32_t>(buf[1]) << 16) |
         (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

void write_u32_be(std::ostream& os, std::uint32_t v) {
  const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(buf), 4);
}

}  // namespace

int Dataset::size() const {
  switch (kind) {
    case DatasetKind::token:
      return seq_len > 0 ? static_cast<int>(tokens.size()) / seq_len : 0;
    case DatasetKind::classification:
    case DatasetKind::regression:
      return inputs.defined() ? inputs.rows() : 0;
  }
  return 0;
}

int Dataset::feature_dim() const {
  if (kind == DatasetKind::token) {
    return seq_len;
  }
  return inputs.defined() ? inputs.cols() : 0;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) {
    throw DataError("cannot open images file '" + images_path + "'");
  }
  const std::uint32_t img_magic = read_u32_be(img, images_path);
  if (img_magic != kIdxImagesMagic) {
    throw DataError("'" + images_path + "': expected images magic " +
                    std::to_string(kIdxImagesMagic) + ", got " + std::to_string(img_magic));
  }
  const std::uint32_t n = read_u32_be(img, images_path);
  const std::uint32_t rows = read_u32_be(img, images_path);
  const std::uint32_t cols = read_u32_be(img, images_path);
  const std::size_t pixels = static_cast<std::size_t>(n) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels))) {
    throw DataError("'" + images_path + "' truncated: expected " + std::to_string(pixels) +
                    " pixel bytes");
  }

  std::ifstream lbl(labels_path, std::ios::binary);
  if (!lbl) {
    throw DataError("cannot open labels file '" + labels_path + "'");
  }
  const std::uint32_t lbl_magic = read_u32_be(lbl, labels_path);
  if (lbl_magic != kIdxLabelsMagic) {
    throw DataError("'" + labels_path + "': expected labels magic " +
                    std::to_string(kIdxLabelsMagic) + ", got " + std::to_string(lbl_magic));
  }
  const std::uint32_t n_labels = read_u32_be(lbl, labels_path);
  if (n_labels != n) {
    throw DataError("count mismatch: " + std::to_string(n) + " images vs " +
                    std::to_string(n_labels) + " labels");
  }
  std::vector<unsigned char> raw_labels(n_labels);
  if (!lbl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n_labels))) {
    throw DataError("'" + labels_path + "' truncated: expected " + std::to_string(n_labels) +
                    " label bytes");
  }

  Dataset ds;
  ds.kind = DatasetKind::classification;
  const int d = static_cast<int>(rows * cols);
  std::vector<double> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    values[i] = static_cast<double>(raw[i]) / 255.0;
  }
  ds.inputs = Tensor::from_data({static_cast<int>(n), d}, std::move(values));
  ds.labels.resize(n_labels);
  int max_label = 0;
  for (std::size_t i = 0; i < raw_labels.size(); ++i) {
    ds.labels[i] = static_cast<int>(raw_labels[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = std::max(10, max_label + 1);
  ds.provenance = "idx:" + images_path;
  return ds;
}

void write_idx_images(const std::string& path, const std::vector<std::vector<std::uint8_t>>& images,
                      int rows, int cols) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw DataError("cannot write '" + path + "'");
  }
  write_u32_be(os, kIdxImagesMagic);
  write_u32_be(os, static_cast<std::uint32_t>(images.size()));
  write_u32_be(os, static_cast<std::uint32_t>(rows));
  write_u32_be(os, static_cast<std::uint32_t>(cols));
  for (const auto& image : images) {
    if (static_cast<int>(image.size()) != rows * cols) {
      throw DataError("image size mismatch while writing '" + path + "'");
    }
    os.write(reinterpret_cast<const char*>(image.data()),
             static_cast<std::streamsize>(image.size()));
  }
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw DataError("cannot write '" + path + "'");
  }
  write_u32_be(os, kIdxLabelsMagic);
  write_u32_be(os, static_cast<std::uint32_t>(labels.size()));
  os.write(reinterpret_cast<const char*>(labels.data()),
           static_cast<std::streamsize>(labels.size()));
}

Dataset gen_synthetic(const PolynomialModel& teacher, int n, double lo, double hi,
                      std::uint64_t seed, bool equal_spacing) {
  if (n < 2) {
    throw std::invalid_argument("gen_synthetic: need at least 2 samples");
  }
  if (!(lo < hi)) {
    throw std::invalid_argument("gen_synthetic: degenerate interval");
  }
  std::vector<double> xs(static_cast<std::size_t>(n));
  if (equal_spacing) {
    for (int i = 0; i < n; ++i) {
      xs[i] = lo + (hi - lo) * static_cast<double>(i) / (n - 1);
    }
  } else {
    Rng rng(seed);
    for (double& x : xs) {
      x = rng.uniform(lo, hi);
    }
    std::sort(xs.begin(), xs.end());
  }
  Dataset ds;
  ds.kind = DatasetKind::regression;
  ds.targets.resize(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ds.targets[i] = teacher.eval(xs[i]);
  }
  ds.inputs = Tensor::from_data({n, 1}, std::move(xs));
  ds.provenance = "synthetic_polynomial";
  return ds;
}

Dataset gen_token_task(int vocab, int seq_len, int n, std::uint64_t seed) {
  if (vocab < 2) {
    throw std::invalid_argument("gen_token_task: vocab must be >= 2");
  }
  if (seq_len < 1 || n < 1) {
    throw std::invalid_argument("gen_token_task: seq_len and n must be positive");
  }
  Rng rng(seed);
  Dataset ds;
  ds.kind = DatasetKind::token;
  ds.seq_len = seq_len;
  ds.vocab = vocab;
  ds.num_classes = 2;
  ds.tokens.resize(static_cast<std::size_t>(n) * seq_len);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int s = 0;
    for (int j = 0; j < seq_len; ++j) {
      const int t = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(vocab)));
      ds.tokens[static_cast<std::size_t>(i) * seq_len + j] = t;
      s += t;
    }
    ds.labels[i] = s % 2;
  }
  ds.provenance = "token_parity";
  return ds;
}

namespace {

Dataset take_indices(const Dataset& ds, const std::vector<int>& keep) {
  Dataset out;
  out.kind = ds.kind;
  out.seq_len = ds.seq_len;
  out.vocab = ds.vocab;
  out.num_classes = ds.num_classes;
  out.provenance = ds.provenance + "|subsample";
  if (ds.kind == DatasetKind::token) {
    out.tokens.reserve(keep.size() * static_cast<std::size_t>(ds.seq_len));
    for (int idx : keep) {
      const auto* src = ds.tokens.data() + static_cast<std::size_t>(idx) * ds.seq_len;
      out.tokens.insert(out.tokens.end(), src, src + ds.seq_len);
    }
  } else {
    out.inputs = gather_rows(ds.inputs, keep).detach();
  }
  if (!ds.labels.empty()) {
    out.labels.reserve(keep.size());
    for (int idx : keep) {
      out.labels.push_back(ds.labels[static_cast<std::size_t>(idx)]);
    }
  }
  if (!ds.targets.empty()) {
    out.targets.reserve(keep.size());
    for (int idx : keep) {
      out.targets.push_back(ds.targets[static_cast<std::size_t>(idx)]);
    }
  }
  return out;
}

}  // namespace

Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed, bool stratified) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("subsample: fraction must lie in (0,1]");
  }
  const int n = ds.size();
  if (fraction == 1.0) {
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    return take_indices(ds, all);
  }
  Rng rng(seed);
  std::vector<int> keep;
  if (stratified && ds.kind != DatasetKind::regression) {
    // per-class selection, rounding each class count to the nearest sample
    std::vector<std::vector<int>> by_class;
    for (int i = 0; i < n; ++i) {
      const int y = ds.labels[static_cast<std::size_t>(i)];
      if (y >= static_cast<int>(by_class.size())) {
        by_class.resize(static_cast<std::size_t>(y) + 1);
      }
      by_class[static_cast<std::size_t>(y)].push_back(i);
    }
    for (auto& members : by_class) {
      if (members.empty()) {
        continue;
      }
      const int want = static_cast<int>(std::llround(fraction * members.size()));
      rng.shuffle(members);
      for (int i = 0; i < want; ++i) {
        keep.push_back(members[static_cast<std::size_t>(i)]);
      }
    }
    std::sort(keep.begin(), keep.end());
  } else {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const int want = static_cast<int>(std::llround(fraction * n));
    keep.assign(order.begin(), order.begin() + std::min(want, n));
    std::sort(keep.begin(), keep.end());
  }
  if (keep.empty()) {
    throw std::invalid_argument("subsample: fraction " + std::to_string(fraction) +
                                " selects zero samples");
  }
  return take_indices(ds, keep);
}

// ------------------------------------------------------------------
// dataset container
// ------------------------------------------------------------------

namespace {

void write_u32_le(std::ostream& os, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  os.write(buf, 4);
}

std::uint32_t read_u32_le(std::istream& is, const std::string& path) {
  char buf[4];
  if (!is.read(buf, 4)) {
    throw DataError("'" + path + "' truncated");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

void write_f64_le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char buf[8];
  for (int i = 0; i < 8; ++i) {
    buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  }
  os.write(buf, 8);
}

double read_f64_le(std::istream& is, const std::string& path) {
  char buf[8];
  if (!is.read(buf, 8)) {
    throw DataError("'" + path + "' truncated");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw DataError("cannot write dataset '" + path + "'");
  }
  os.write(kDatasetMagic, 4);
  os.put(static_cast<char>(kDatasetVersion));
  os.put(static_cast<char>(ds.kind));
  write_u32_le(os, static_cast<std::uint32_t>(ds.size()));
  write_u32_le(os, static_cast<std::uint32_t>(ds.kind == DatasetKind::token ? 0 : ds.feature_dim()));
  write_u32_le(os, static_cast<std::uint32_t>(ds.seq_len));
  write_u32_le(os, static_cast<std::uint32_t>(ds.vocab));
  write_u32_le(os, static_cast<std::uint32_t>(ds.num_classes));
  if (ds.kind == DatasetKind::token) {
    for (int t : ds.tokens) {
      write_u32_le(os, static_cast<std::uint32_t>(t));
    }
  } else {
    for (double v : ds.inputs.data()) {
      write_f64_le(os, v);
    }
  }
  write_u32_le(os, static_cast<std::uint32_t>(ds.labels.size()));
  for (int y : ds.labels) {
    write_u32_le(os, static_cast<std::uint32_t>(y));
  }
  write_u32_le(os, static_cast<std::uint32_t>(ds.targets.size()));
  for (double t : ds.targets) {
    write_f64_le(os, t);
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw DataError("cannot open dataset '" + path + "'");
  }
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0) {
    throw DataError("'" + path + "' is not a dataset container (expected magic BKDD)");
  }
  const int version = is.get();
  if (version != kDatasetVersion) {
    throw DataError("'" + path + "' has unsupported dataset version " + std::to_string(version));
  }
  const int kind = is.get();
  if (kind < 0 || kind > static_cast<int>(DatasetKind::token)) {
    throw DataError("'" + path + "' has unknown dataset kind");
  }
  Dataset ds;
  ds.kind = static_cast<DatasetKind>(kind);
  const int n = static_cast<int>(read_u32_le(is, path));
  const int d = static_cast<int>(read_u32_le(is, path));
  ds.seq_len = static_cast<int>(read_u32_le(is, path));
  ds.vocab = static_cast<int>(read_u32_le(is, path));
  ds.num_classes = static_cast<int>(read_u32_le(is, path));
  if (ds.kind == DatasetKind::token) {
    ds.tokens.resize(static_cast<std::size_t>(n) * ds.seq_len);
    for (int& t : ds.tokens) {
      t = static_cast<int>(read_u32_le(is, path));
    }
  } else {
    std::vector<double> values(static_cast<std::size_t>(n) * d);
    for (double& v : values) {
      v = read_f64_le(is, path);
    }
    ds.inputs = Tensor::from_data({n, d}, std::move(values));
  }
  const int n_labels = static_cast<int>(read_u32_le(is, path));
  ds.labels.resize(static_cast<std::size_t>(n_labels));
  for (int& y : ds.labels) {
    y = static_cast<int>(read_u32_le(is, path));
  }
  const int n_targets = static_cast<int>(read_u32_le(is, path));
  ds.targets.resize(static_cast<std::size_t>(n_targets));
  for (double& t : ds.targets) {
    t = read_f64_le(is, path);
  }
  ds.provenance = "container:" + path;
  return ds;
}

}  // namespace bkd
