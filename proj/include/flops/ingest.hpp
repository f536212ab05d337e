// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_INGEST_HPP
#define FLOPS_INGEST_HPP

#include <algorithm>
#include <array>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flops/dataset.hpp"

namespace flops {

/// Input that cannot be parsed; the message carries the file and line.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LibsvmOptions {
  bool zero_based = false;
  /// Feature count; inferred from the largest index when absent.
  std::optional<Eigen::Index> dim;
  /// Comma-separated label lists become one 0/1 column per distinct label.
  bool multilabel = false;
};

/// A parsed libsvm file. `vocabulary[k]` names label column k (multi-label only).
struct LibsvmData {
  Dataset data;
  std::vector<long> vocabulary;
};

namespace ingest_detail {

inline std::string where(const std::string& path, std::size_t line) { return path + ":" + std::to_string(line) + ": "; }

inline long parse_long(std::string_view s, const std::string& ctx) {
  long v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw FormatError(ctx + "bad integer '" + std::string(s) + "'");
  return v;
}

inline double parse_double(std::string_view s, const std::string& ctx) {
  const std::string buf(s);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(buf.c_str(), &end);
  if (buf.empty() || end != buf.c_str() + buf.size() || errno == ERANGE || !std::isfinite(v))
    throw FormatError(ctx + "bad number '" + buf + "'");
  return v;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

}  // namespace ingest_detail

/// Parses `label[,label...] idx:val ...` lines. Blank lines and `#` comments are skipped.
inline LibsvmData read_libsvm(const std::string& path, const LibsvmOptions& opts = {}) {
  using namespace ingest_detail;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  if (opts.dim && *opts.dim < 1) throw std::invalid_argument("declared dim must be positive");

  std::vector<Eigen::Triplet<double>> trips;
  std::vector<std::vector<long>> label_lists;
  std::vector<double> targets;
  Eigen::Index max_index = -1;
  std::string raw;
  std::size_t lineno = 0;
  int row = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto tokens = split_ws(line);
    if (tokens.empty()) continue;
    const std::string ctx = where(path, lineno);

    std::size_t first = 0;
    std::vector<long> labels;
    if (tokens[0].find(':') == std::string_view::npos) {
      first = 1;
      const auto tok = tokens[0];
      if (opts.multilabel) {
        std::size_t pos = 0;
        while (pos <= tok.size()) {
          const auto comma = tok.find(',', pos);
          const auto piece = tok.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
          if (!piece.empty()) labels.push_back(parse_long(piece, ctx));
          if (comma == std::string_view::npos) break;
          pos = comma + 1;
        }
      } else {
        if (tok.find(',') != std::string_view::npos) throw FormatError(ctx + "label list found but multi-label mode is off");
        targets.push_back(parse_double(tok, ctx));
      }
    } else if (!opts.multilabel) {
      throw FormatError(ctx + "missing label");
    }
    if (opts.multilabel) {
      std::sort(labels.begin(), labels.end());
      labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
      label_lists.push_back(std::move(labels));
    }

    std::vector<Eigen::Index> seen;
    for (std::size_t t = first; t < tokens.size(); ++t) {
      const auto colon = tokens[t].find(':');
      if (colon == std::string_view::npos) throw FormatError(ctx + "expected idx:val, got '" + std::string(tokens[t]) + "'");
      const long written = parse_long(tokens[t].substr(0, colon), ctx);
      long idx = written;
      const double val = parse_double(tokens[t].substr(colon + 1), ctx);
      if (!opts.zero_based) {
        if (idx < 1) throw FormatError(ctx + "index " + std::to_string(idx) + " below 1 in 1-based file");
        --idx;
      } else if (idx < 0) {
        throw FormatError(ctx + "negative index");
      }
      if (opts.dim && idx >= *opts.dim)
        throw FormatError(ctx + "index " + std::to_string(written) + " outside declared dim " + std::to_string(*opts.dim));
      seen.push_back(idx);
      max_index = std::max<Eigen::Index>(max_index, idx);
      trips.emplace_back(row, static_cast<int>(idx), val);
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) throw FormatError(ctx + "duplicate feature index");
    ++row;
  }
  if (row == 0) throw FormatError(path + ": no samples");

  const Eigen::Index dim = opts.dim.value_or(max_index + 1);
  if (dim < 1) throw FormatError(path + ": no features");
  SparseRows X(row, dim);
  X.setFromTriplets(trips.begin(), trips.end());
  X.makeCompressed();

  LibsvmData out;
  out.data.X = std::move(X);
  if (opts.multilabel) {
    for (const auto& ls : label_lists) out.vocabulary.insert(out.vocabulary.end(), ls.begin(), ls.end());
    std::sort(out.vocabulary.begin(), out.vocabulary.end());
    out.vocabulary.erase(std::unique(out.vocabulary.begin(), out.vocabulary.end()), out.vocabulary.end());
    std::map<long, Eigen::Index> col;
    for (std::size_t k = 0; k < out.vocabulary.size(); ++k) col[out.vocabulary[k]] = static_cast<Eigen::Index>(k);
    out.data.Y = Eigen::MatrixXd::Zero(row, static_cast<Eigen::Index>(out.vocabulary.size()));
    for (std::size_t i = 0; i < label_lists.size(); ++i)
      for (long l : label_lists[i]) out.data.Y(static_cast<Eigen::Index>(i), col[l]) = 1.0;
  } else {
    out.data.Y = Eigen::Map<const Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
  }
  return out;
}

/// Writes the sparse or dense rows in libsvm text form. Dense zeros are omitted.
inline void write_libsvm(const std::string& path, const Dataset& d, const std::vector<long>& vocabulary = {},
                         bool zero_based = false) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  const bool multi = !vocabulary.empty();
  if (multi && static_cast<Eigen::Index>(vocabulary.size()) != d.Y.cols())
    throw std::invalid_argument("vocabulary size differs from label columns");
  const Eigen::Index shift = zero_based ? 0 : 1;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    if (multi) {
      bool first = true;
      for (Eigen::Index k = 0; k < d.Y.cols(); ++k)
        if (d.Y(i, k) > 0.5) {
          out << (first ? "" : ",") << vocabulary[static_cast<std::size_t>(k)];
          first = false;
        }
    } else {
      out << d.Y(i, 0);
    }
    if (d.is_sparse()) {
      for (SparseRows::InnerIterator it(d.sparse(), i); it; ++it) out << ' ' << it.col() + shift << ':' << it.value();
    } else {
      const auto& X = d.dense();
      for (Eigen::Index j = 0; j < X.cols(); ++j)
        if (X(i, j) != 0.0) out << ' ' << j + shift << ':' << X(i, j);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

namespace ingest_detail {

inline std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError(path + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) | b[off + 3];
}

}  // namespace ingest_detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// IDX image/label pair (MNIST, EMNIST). Pixels are scaled by 1/255; labels are class ids.
inline Dataset read_idx(const std::string& images_path, const std::string& labels_path) {
  using namespace ingest_detail;
  const auto img = slurp(images_path);
  const auto lab = slurp(labels_path);
  if (be32(img, 0, images_path) != kIdxImagesMagic) throw FormatError(images_path + ": not an IDX image file (bad magic)");
  if (be32(lab, 0, labels_path) != kIdxLabelsMagic) throw FormatError(labels_path + ": not an IDX label file (bad magic)");
  const std::size_t n = be32(img, 4, images_path), rows = be32(img, 8, images_path), cols = be32(img, 12, images_path);
  const std::size_t n_lab = be32(lab, 4, labels_path);
  if (n != n_lab)
    throw FormatError("image count " + std::to_string(n) + " does not match label count " + std::to_string(n_lab));
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path + ": empty image set");
  const std::size_t dim = rows * cols;
  if (img.size() != 16 + n * dim) throw FormatError(images_path + ": truncated or oversized pixel payload");
  if (lab.size() != 8 + n) throw FormatError(labels_path + ": truncated or oversized label payload");

  Dataset d;
  DenseRows X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = img[16 + i * dim + j] / 255.0;
  d.X = std::move(X);
  d.Y.resize(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i) d.Y(static_cast<Eigen::Index>(i), 0) = lab[8 + i];
  return d;
}

/// Writes an IDX pair; pixels must already lie in 0..255.
inline void write_idx(const std::string& images_path, const std::string& labels_path, const std::vector<unsigned char>& pixels,
                      const std::vector<unsigned char>& labels, std::uint32_t rows, std::uint32_t cols) {
  auto put = [](std::ofstream& o, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                static_cast<char>(v)};
    o.write(b.data(), 4);
  };
  std::ofstream im(images_path, std::ios::binary), lb(labels_path, std::ios::binary);
  if (!im || !lb) throw std::runtime_error("cannot write IDX files");
  put(im, kIdxImagesMagic);
  put(im, static_cast<std::uint32_t>(labels.size()));
  put(im, rows);
  put(im, cols);
  im.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  put(lb, kIdxLabelsMagic);
  put(lb, static_cast<std::uint32_t>(labels.size()));
  lb.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

struct LabelSelection {
  LibsvmData data;
  /// Share of all label assignments that fall on the kept labels.
  double retained_fraction = 0.0;
  std::size_t dropped_rows = 0;
};

/// Keeps the k most frequent labels (ties to the smaller label id), ordered by
/// frequency, and drops rows left without labels.
inline LabelSelection select_top_labels(const LibsvmData& in, std::size_t k) {
  const auto& Y = in.data.Y;
  const auto L = static_cast<std::size_t>(Y.cols());
  if (in.vocabulary.size() != L || L == 0) throw std::invalid_argument("select_top_labels needs a multi-label dataset");
  if (k < 1 || k > L) throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the label vocabulary of " + std::to_string(L));
  std::vector<double> freq(L);
  for (std::size_t c = 0; c < L; ++c) freq[c] = Y.col(static_cast<Eigen::Index>(c)).sum();
  std::vector<std::size_t> order(L);
  for (std::size_t c = 0; c < L; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return freq[a] > freq[b]; });
  order.resize(k);

  double total = 0.0, kept = 0.0;
  for (double f : freq) total += f;
  for (auto c : order) kept += freq[c];

  std::vector<std::size_t> rows;
  for (Eigen::Index i = 0; i < Y.rows(); ++i) {
    bool any = false;
    for (auto c : order) any = any || Y(i, static_cast<Eigen::Index>(c)) > 0.5;
    if (any) rows.push_back(static_cast<std::size_t>(i));
  }
  if (rows.empty()) throw std::invalid_argument("no rows keep any of the selected labels");

  LabelSelection out;
  out.data.data = in.data.subset(rows);
  Eigen::MatrixXd Yk(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    Yk.col(static_cast<Eigen::Index>(c)) = out.data.data.Y.col(static_cast<Eigen::Index>(order[c]));
    out.data.vocabulary.push_back(in.vocabulary[order[c]]);
  }
  out.data.data.Y = std::move(Yk);
  out.retained_fraction = total > 0.0 ? kept / total : 0.0;
  out.dropped_rows = static_cast<std::size_t>(Y.rows()) - rows.size();
  return out;
}

// Cache layout, all integers and floats little-endian:
//   char[8]  "FLOPSDS\0"
//   u32      version (1)
//   u32      flags (bit 0: sparse rows)
//   u64      n, dim, label columns, nnz (0 when dense), vocabulary size
//   i64[v]   vocabulary
//   dense:   f64[n * dim] row-major
//   sparse:  u64[n + 1] row offsets, u64[nnz] column indices, f64[nnz] values
//   f64[n * label columns] labels, row-major
inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr std::array<char, 8> kCacheMagic{'F', 'L', 'O', 'P', 'S', 'D', 'S', '\0'};

namespace ingest_detail {

template <class T>
void put_le(std::ostream& o, T v) {
  std::uint64_t bits = 0;
  static_assert(sizeof(T) <= 8);
  std::memcpy(&bits, &v, sizeof(T));
  for (std::size_t b = 0; b < sizeof(T); ++b) o.put(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

template <class T>
T get_le(std::istream& in, const std::string& path) {
  std::array<unsigned char, sizeof(T)> buf{};
  if (!in.read(reinterpret_cast<char*>(buf.data()), sizeof(T))) throw FormatError(path + ": truncated cache");
  std::uint64_t bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) bits |= std::uint64_t{buf[b]} << (8 * b);
  T v;
  std::memcpy(&v, &bits, sizeof(T));
  return v;
}

}  // namespace ingest_detail

inline void write_cache(const std::string& path, const LibsvmData& d) {
  using ingest_detail::put_le;
  std::ofstream o(path, std::ios::binary);
  if (!o) throw std::runtime_error("cannot write " + path);
  const bool sparse = d.data.is_sparse();
  const auto n = static_cast<std::uint64_t>(d.data.rows());
  const auto dim = static_cast<std::uint64_t>(d.data.dim());
  const auto lc = static_cast<std::uint64_t>(d.data.Y.cols());
  o.write(kCacheMagic.data(), kCacheMagic.size());
  put_le<std::uint32_t>(o, kCacheVersion);
  put_le<std::uint32_t>(o, sparse ? 1u : 0u);
  put_le<std::uint64_t>(o, n);
  put_le<std::uint64_t>(o, dim);
  put_le<std::uint64_t>(o, lc);
  put_le<std::uint64_t>(o, sparse ? static_cast<std::uint64_t>(d.data.sparse().nonZeros()) : 0);
  put_le<std::uint64_t>(o, d.vocabulary.size());
  for (long v : d.vocabulary) put_le<std::int64_t>(o, v);
  if (sparse) {
    const auto& X = d.data.sparse();
    std::uint64_t off = 0;
    put_le<std::uint64_t>(o, 0);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      for (SparseRows::InnerIterator it(X, i); it; ++it) ++off;
      put_le<std::uint64_t>(o, off);
    }
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (SparseRows::InnerIterator it(X, i); it; ++it) put_le<std::uint64_t>(o, static_cast<std::uint64_t>(it.col()));
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (SparseRows::InnerIterator it(X, i); it; ++it) put_le<double>(o, it.value());
  } else {
    const auto& X = d.data.dense();
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (Eigen::Index j = 0; j < X.cols(); ++j) put_le<double>(o, X(i, j));
  }
  for (Eigen::Index i = 0; i < d.data.Y.rows(); ++i)
    for (Eigen::Index k = 0; k < d.data.Y.cols(); ++k) put_le<double>(o, d.data.Y(i, k));
  if (!o) throw std::runtime_error("write failed for " + path);
}

inline LibsvmData read_cache(const std::string& path) {
  using ingest_detail::get_le;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCacheMagic) throw FormatError(path + ": not a dataset cache");
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kCacheVersion)
    throw FormatError(path + ": cache version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCacheVersion) + ")");
  const auto flags = get_le<std::uint32_t>(in, path);
  const auto n = get_le<std::uint64_t>(in, path), dim = get_le<std::uint64_t>(in, path);
  const auto lc = get_le<std::uint64_t>(in, path), nnz = get_le<std::uint64_t>(in, path);
  const auto vocab = get_le<std::uint64_t>(in, path);
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 40;
  if (n == 0 || dim == 0 || n > kLimit || dim > kLimit || lc > kLimit || nnz > kLimit || vocab > kLimit)
    throw FormatError(path + ": implausible cache header");

  LibsvmData out;
  for (std::uint64_t v = 0; v < vocab; ++v) out.vocabulary.push_back(static_cast<long>(get_le<std::int64_t>(in, path)));
  if (flags & 1u) {
    std::vector<std::uint64_t> offsets(n + 1);
    for (auto& o : offsets) o = get_le<std::uint64_t>(in, path);
    if (offsets.front() != 0 || offsets.back() != nnz) throw FormatError(path + ": corrupt row offsets");
    std::vector<std::uint64_t> cols(nnz);
    for (auto& c : cols) {
      c = get_le<std::uint64_t>(in, path);
      if (c >= dim) throw FormatError(path + ": column index out of range");
    }
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(nnz);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (offsets[i + 1] < offsets[i]) throw FormatError(path + ": corrupt row offsets");
      for (auto k = offsets[i]; k < offsets[i + 1]; ++k)
        trips.emplace_back(static_cast<int>(i), static_cast<int>(cols[k]), get_le<double>(in, path));
    }
    SparseRows X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    X.setFromTriplets(trips.begin(), trips.end());
    X.makeCompressed();
    out.data.X = std::move(X);
  } else {
    DenseRows X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = get_le<double>(in, path);
    out.data.X = std::move(X);
  }
  out.data.Y.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(lc));
  for (Eigen::Index i = 0; i < out.data.Y.rows(); ++i)
    for (Eigen::Index k = 0; k < out.data.Y.cols(); ++k) out.data.Y(i, k) = get_le<double>(in, path);
  return out;
}

}  // namespace flops

#endif  // FLOPS_INGEST_HPP
