#pragma once

// File formats.
//
// Dataset CSV: UTF-8, header "x1,...,xd,y", one sample per line, values in
// shortest round-trip decimal form.
//
// Model file (little-endian throughout):
//   bytes 0..7   magic "HETMTLM\0"
//   u32          format version (1)
//   u32          flags (bit 0: shared encoder present)
//   u32          activation (0 = relu, 1 = identity)
//   u32          R, then u32 d
//   u32          depth_s, then depth_s + 1 u32 layer widths (d ... q)
//   [u32 depth_c, then depth_c + 1 u32 widths]   if shared present
//   f64 payload  for r in 0..R-1: each layer's weight (column-major) then bias;
//                shared encoder likewise; then alpha_r, beta_r for every r;
//                then alpha_bar, beta_bar
//   u32          CRC-32 (zlib) of every preceding byte

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "hetmtl/data.hpp"
#include "hetmtl/errors.hpp"
#include "hetmtl/model.hpp"
#include "hetmtl/nncore.hpp"

namespace hetmtl::io {

/// Shortest decimal string that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw SchemaError(where + ": cannot parse '" + std::string(s) + "' as a number");
  }
  return v;
}

/// Writes to a sibling temp file and renames it into place.
inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset CSV

inline std::string dataset_csv(const TaskDataset& ds) {
  std::string s;
  for (Index j = 0; j < ds.dim(); ++j) s += "x" + std::to_string(j + 1) + ",";
  s += "y\n";
  for (Index i = 0; i < ds.rows(); ++i) {
    for (Index j = 0; j < ds.dim(); ++j) {
      s += format_double(ds.x(i, j));
      s += ',';
    }
    s += format_double(ds.y(i));
    s += '\n';
  }
  return s;
}

inline void write_dataset_csv(const std::filesystem::path& path, const TaskDataset& ds) {
  ds.validate();
  write_atomic(path, dataset_csv(ds));
}

inline TaskDataset read_dataset_csv(const std::filesystem::path& path, Split role, int task) {
  const std::string text = read_file(path);
  const std::string name = path.string();
  std::vector<std::string_view> lines;
  {
    std::string_view rest(text);
    while (!rest.empty()) {
      const auto nl = rest.find('\n');
      auto line = rest.substr(0, nl);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty()) lines.push_back(line);
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }
  if (lines.empty()) throw SchemaError(name + ": empty file, expected header x1..xd,y");
  const auto header = split_commas(lines.front());
  if (header.back() != "y") {
    throw SchemaError(name + ": missing column 'y' (expected as the last header column)");
  }
  const auto d = static_cast<Index>(header.size() - 1);
  for (Index j = 0; j < d; ++j) {
    const std::string want = "x" + std::to_string(j + 1);
    if (header[static_cast<std::size_t>(j)] != want) {
      throw SchemaError(name + ": header column " + std::to_string(j + 1) + " is '" +
                        std::string(header[static_cast<std::size_t>(j)]) + "', expected '" +
                        want + "'");
    }
  }
  TaskDataset ds;
  ds.role = role;
  ds.task = task;
  const auto n = static_cast<Index>(lines.size() - 1);
  ds.x.resize(n, d);
  ds.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto cells = split_commas(lines[static_cast<std::size_t>(i + 1)]);
    const std::string where = name + " line " + std::to_string(i + 2);
    if (static_cast<Index>(cells.size()) != d + 1) {
      throw SchemaError(where + ": expected " + std::to_string(d + 1) + " columns, found " +
                        std::to_string(cells.size()));
    }
    for (Index j = 0; j < d; ++j) {
      ds.x(i, j) = parse_double(cells[static_cast<std::size_t>(j)],
                                where + " column x" + std::to_string(j + 1));
    }
    ds.y(i) = parse_double(cells.back(), where + " column y");
  }
  if (!ds.x.allFinite() || !ds.y.allFinite()) throw SchemaError(name + ": non-finite values");
  return ds;
}

/// Latent matrix with a leading task column: "task,z1,...,zk".
inline void write_latent_csv(const std::filesystem::path& path, const Matrix& z, int task_label) {
  std::string s = "task";
  for (Index j = 0; j < z.cols(); ++j) s += ",z" + std::to_string(j + 1);
  s += '\n';
  const std::string label = std::to_string(task_label);
  for (Index i = 0; i < z.rows(); ++i) {
    s += label;
    for (Index j = 0; j < z.cols(); ++j) {
      s += ',';
      s += format_double(z(i, j));
    }
    s += '\n';
  }
  write_atomic(path, s);
}

inline Matrix read_latent_csv(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  const auto header = split_commas(line);
  if (header.empty() || header.front() != "task") {
    throw SchemaError(path.string() + ": expected a leading 'task' column");
  }
  const auto k = static_cast<Index>(header.size() - 1);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (static_cast<Index>(cells.size()) != k + 1) throw SchemaError(path.string() + ": ragged row");
    std::vector<double> row;
    for (Index j = 1; j <= k; ++j) {
      row.push_back(parse_double(cells[static_cast<std::size_t>(j)], path.string()));
    }
    rows.push_back(std::move(row));
  }
  Matrix z(static_cast<Index>(rows.size()), k);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Index j = 0; j < k; ++j) z(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  return z;
}

// ---------------------------------------------------------------------------
// Model persistence

inline constexpr char kModelMagic[8] = {'H', 'E', 'T', 'M', 'T', 'L', 'M', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  template <class Derived>
  void block(const Eigen::DenseBase<Derived>& m) {
    for (Index c = 0; c < m.cols(); ++c)
      for (Index r = 0; r < m.rows(); ++r) f64(m(r, c));
  }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string name) : data_(data), name_(std::move(name)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw SchemaError(name_ + ": truncated model file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  void fill(Matrix& m) {
    for (Index c = 0; c < m.cols(); ++c)
      for (Index r = 0; r < m.rows(); ++r) m(r, c) = f64();
  }
  void fill(Vector& v) {
    for (Index i = 0; i < v.size(); ++i) v(i) = f64();
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, p, static_cast<uInt>(n));
  return static_cast<std::uint32_t>(crc);
}

inline void write_layout(ByteWriter& w, const nn::DenseNet& net) {
  w.u32(static_cast<std::uint32_t>(net.depth()));
  w.u32(static_cast<std::uint32_t>(net.in_dim()));
  for (const auto& l : net.layers()) w.u32(static_cast<std::uint32_t>(l.weight.rows()));
}

inline std::vector<Index> read_layout(ByteReader& r, const std::string& name) {
  const auto depth = r.u32();
  if (depth == 0 || depth > 64) throw SchemaError(name + ": implausible network depth");
  std::vector<Index> dims;
  for (std::uint32_t i = 0; i <= depth; ++i) {
    const auto v = r.u32();
    if (v == 0 || v > (1u << 20)) throw SchemaError(name + ": implausible layer width");
    dims.push_back(static_cast<Index>(v));
  }
  return dims;
}

inline nn::DenseNet read_net(ByteReader& r, const std::vector<Index>& dims, nn::Activation act) {
  std::vector<nn::DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    nn::DenseLayer l{Matrix(dims[i + 1], dims[i]), Vector(dims[i + 1])};
    r.fill(l.weight);
    r.fill(l.bias);
    layers.push_back(std::move(l));
  }
  return nn::DenseNet(std::move(layers), act);
}

}  // namespace detail

inline std::vector<unsigned char> serialize_model(const MtlModel& model) {
  model.validate();
  detail::ByteWriter w;
  w.raw(kModelMagic, sizeof kModelMagic);
  w.u32(kModelVersion);
  w.u32(model.shared ? 1u : 0u);
  w.u32(static_cast<std::uint32_t>(model.specifics.front().activation()));
  w.u32(static_cast<std::uint32_t>(model.tasks()));
  w.u32(static_cast<std::uint32_t>(model.input_dim()));
  detail::write_layout(w, model.specifics.front());
  if (model.shared) detail::write_layout(w, *model.shared);
  auto write_net = [&w](const nn::DenseNet& net) {
    for (const auto& l : net.layers()) {
      w.block(l.weight);
      w.block(l.bias);
    }
  };
  for (const auto& s : model.specifics) write_net(s);
  if (model.shared) write_net(*model.shared);
  for (const auto& h : model.heads) {
    w.block(h.alpha);
    w.block(h.beta);
  }
  w.block(model.centers.alpha_bar);
  w.block(model.centers.beta_bar);
  auto bytes = w.bytes();
  const auto crc = detail::crc32_of(bytes.data(), bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(crc >> (8 * i)));
  return bytes;
}

inline MtlModel deserialize_model(std::string_view data, const std::string& name = "model") {
  if (data.size() < sizeof kModelMagic + 4) throw SchemaError(name + ": file too short");
  if (data.substr(0, sizeof kModelMagic) != std::string_view(kModelMagic, sizeof kModelMagic)) {
    throw SchemaError(name + ": not a model file (bad magic)");
  }
  const auto body = data.substr(0, data.size() - 4);
  detail::ByteReader tail(data.substr(data.size() - 4), name);
  const auto stored = tail.u32();
  const auto actual =
      detail::crc32_of(reinterpret_cast<const unsigned char*>(body.data()), body.size());
  if (stored != actual) throw SchemaError(name + ": checksum mismatch");

  detail::ByteReader r(body, name);
  r.take(sizeof kModelMagic);
  const auto version = r.u32();
  if (version != kModelVersion) {
    throw SchemaError(name + ": unsupported model format version " + std::to_string(version));
  }
  const auto flags = r.u32();
  const auto act_code = r.u32();
  if (act_code > 1) throw SchemaError(name + ": unknown activation code");
  const auto act = static_cast<nn::Activation>(act_code);
  const auto R = r.u32();
  const auto d = static_cast<Index>(r.u32());
  if (R == 0 || R > 4096) throw SchemaError(name + ": implausible task count");
  const auto spec_dims = detail::read_layout(r, name);
  std::vector<Index> shared_dims;
  if (flags & 1u) shared_dims = detail::read_layout(r, name);
  if (spec_dims.front() != d || (!shared_dims.empty() && shared_dims.front() != d)) {
    throw SchemaError(name + ": layer layout does not start at the input dimension");
  }

  MtlModel m;
  for (std::uint32_t t = 0; t < R; ++t) m.specifics.push_back(detail::read_net(r, spec_dims, act));
  if (!shared_dims.empty()) m.shared = detail::read_net(r, shared_dims, act);
  const Index q = spec_dims.back();
  const Index p = shared_dims.empty() ? 0 : shared_dims.back();
  for (std::uint32_t t = 0; t < R; ++t) {
    TaskHead h{Vector(q), Vector(p)};
    r.fill(h.alpha);
    r.fill(h.beta);
    m.heads.push_back(std::move(h));
  }
  m.centers = Centers{Vector(q), Vector(p)};
  r.fill(m.centers.alpha_bar);
  r.fill(m.centers.beta_bar);
  if (r.pos() != body.size()) throw SchemaError(name + ": trailing bytes after model payload");
  m.validate();
  return m;
}

inline void save_model(const std::filesystem::path& path, const MtlModel& model) {
  const auto bytes = serialize_model(model);
  write_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline MtlModel load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path), path.string());
}

}  // namespace hetmtl::io
