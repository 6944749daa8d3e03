#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "uq/metrics.hpp"
#include "uq/model.hpp"
#include "uq/tensor.hpp"
#include "uq/train.hpp"

namespace uq {

// ---------------------------------------------------------------------------
// Number formatting. Every double written to CSV or JSON goes through the
// shortest representation that parses back to the same bits, so emitted
// artifacts are both stable across runs and lossless to re-read.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("parse_double: bad number '" + std::string(s) + "'");
  }
  return v;
}

inline std::int64_t parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("parse_int: bad integer '" + std::string(s) + "'");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Files. Artifacts are written once, atomically: the bytes land in a .tmp
// sibling and rename into place, so a crash can never leave a torn file
// behind under the final name.
// ---------------------------------------------------------------------------

inline void atomic_write(const std::filesystem::path& path, std::string_view contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("atomic_write: cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_file: cannot open " + path.string());
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

// ---------------------------------------------------------------------------
// Binary stream helpers. Fixed-width little-endian fields and raw IEEE
// doubles; memcpy of the host representation (this targets x86-64 desks,
// where that *is* little-endian).
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void i64(std::int64_t v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }

  void magic(const char (&tag)[9]) { buf_.append(tag, 8); }

  void tensor(const Tensor& t) {
    u64(t.rank());
    for (std::size_t d = 0; d < t.rank(); ++d) u64(t.dim(d));
    raw(t.data(), t.size() * sizeof(double));
  }

  const std::string& str() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) {
    buf_.append(static_cast<const char*>(p), n);
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof(v));
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, sizeof(v));
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof(v));
    return v;
  }

  void magic(const char (&tag)[9]) {
    if (data_.size() - pos_ < 8 || data_.compare(pos_, 8, tag, 8) != 0) {
      throw std::runtime_error(std::string("checkpoint: bad magic, expected ") + tag);
    }
    pos_ += 8;
  }

  Tensor tensor() {
    const std::size_t rank = u64();
    if (rank == 0 || rank > 4) {
      throw std::runtime_error("checkpoint: implausible tensor rank " +
                               std::to_string(rank));
    }
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      shape[d] = u64();
      total *= shape[d];
    }
    if (total == 0 || total > (1u << 28)) {
      throw std::runtime_error("checkpoint: implausible tensor size");
    }
    Tensor t = Tensor::uninitialized(shape);
    raw(t.data(), total * sizeof(double));
    return t;
  }

  bool done() const { return pos_ == data_.size(); }

  void expect_done() const {
    if (!done()) throw std::runtime_error("checkpoint: trailing bytes");
  }

 private:
  void raw(void* p, std::size_t n) {
    if (data_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints. One file per (member, epoch) holding the adapter tensors plus
// the identifying scalars; loading must reproduce every double bit for bit.
// ---------------------------------------------------------------------------

struct MemberCheckpointFile {
  std::uint64_t config_hash = 0;
  std::uint64_t member_seed = 0;
  std::uint64_t rank = 0;
  double scale = 0.0;  // the LoRA alpha
  std::int64_t epoch = 0;
  std::uint64_t optimizer_digest = 0;
  double val_nll = 0.0;
  std::vector<LoraAdapter> adapters;
};

inline std::string serialize_member_checkpoint(const MemberCheckpointFile& ck) {
  ByteWriter w;
  w.magic("UQADAPT1");
  w.u64(ck.config_hash);
  w.u64(ck.member_seed);
  w.u64(ck.rank);
  w.f64(ck.scale);
  w.i64(ck.epoch);
  w.u64(ck.optimizer_digest);
  w.f64(ck.val_nll);
  w.u64(ck.adapters.size());
  for (const LoraAdapter& ad : ck.adapters) {
    w.u64(ad.layer);
    w.u64(ad.target == LoraAdapter::Target::query ? 0 : 1);
    w.tensor(ad.a);
    w.tensor(ad.b);
  }
  return w.str();
}

inline MemberCheckpointFile parse_member_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  r.magic("UQADAPT1");
  MemberCheckpointFile ck;
  ck.config_hash = r.u64();
  ck.member_seed = r.u64();
  ck.rank = r.u64();
  ck.scale = r.f64();
  ck.epoch = r.i64();
  ck.optimizer_digest = r.u64();
  ck.val_nll = r.f64();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    LoraAdapter ad;
    ad.layer = r.u64();
    const std::uint64_t target = r.u64();
    if (target > 1) throw std::runtime_error("checkpoint: unknown adapter target");
    ad.target = target == 0 ? LoraAdapter::Target::query : LoraAdapter::Target::value;
    ad.a = r.tensor();
    ad.b = r.tensor();
    ad.rank = ck.rank;
    ad.scale = ck.scale;
    ck.adapters.push_back(std::move(ad));
  }
  r.expect_done();
  return ck;
}

inline void save_member_checkpoint(const std::filesystem::path& path,
                                   const MemberCheckpointFile& ck) {
  atomic_write(path, serialize_member_checkpoint(ck));
}

inline MemberCheckpointFile load_member_checkpoint(const std::filesystem::path& path) {
  return parse_member_checkpoint(read_file(path));
}

struct BaseCheckpointFile {
  ModelConfig config;
  std::uint64_t seed = 0;
  BaseWeights weights;
};

inline std::string serialize_base_checkpoint(const BaseCheckpointFile& ck) {
  ByteWriter w;
  w.magic("UQBASE01");
  for (std::size_t v : {ck.config.vocab_size, ck.config.embed_dim, ck.config.num_layers,
                        ck.config.num_heads, ck.config.mlp_dim, ck.config.max_seq_len}) {
    w.u64(v);
  }
  w.u64(ck.seed);
  const auto params = ck.weights.all_params();
  w.u64(params.size());
  for (const Tensor* t : params) w.tensor(*t);
  return w.str();
}

inline BaseCheckpointFile parse_base_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  r.magic("UQBASE01");
  BaseCheckpointFile ck;
  ck.config.vocab_size = r.u64();
  ck.config.embed_dim = r.u64();
  ck.config.num_layers = r.u64();
  ck.config.num_heads = r.u64();
  ck.config.mlp_dim = r.u64();
  ck.config.max_seq_len = r.u64();
  ck.config.validate();
  ck.seed = r.u64();
  ck.weights.layers.resize(ck.config.num_layers);
  auto params = ck.weights.all_params();
  if (r.u64() != params.size()) {
    throw std::runtime_error("checkpoint: base parameter count mismatch");
  }
  for (Tensor* t : params) *t = r.tensor();
  r.expect_done();
  // Cross-check the loaded shapes against what the config dictates; a
  // truncated or shuffled file must not survive to a bind() deep inside.
  BaseWeights expected = init_base(ck.config, 0);
  const auto want = expected.all_params();
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (!params[i]->same_shape(*want[i])) {
      throw std::runtime_error("checkpoint: base tensor " + std::to_string(i) +
                               " has shape " + params[i]->shape_string() +
                               ", config dictates " + want[i]->shape_string());
    }
  }
  return ck;
}

inline void save_base_checkpoint(const std::filesystem::path& path,
                                 const BaseCheckpointFile& ck) {
  atomic_write(path, serialize_base_checkpoint(ck));
}

inline BaseCheckpointFile load_base_checkpoint(const std::filesystem::path& path) {
  return parse_base_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------
// CSV. The schemas are fixed and none of the fields can contain a comma, so
// a plain split is a faithful parser.
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::vector<std::string_view> csv_lines(std::string_view text,
                                               std::string_view expected_header,
                                               const char* what) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    if (pos > start) lines.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  if (lines.empty() || lines[0] != expected_header) {
    throw std::runtime_error(std::string(what) + ": missing header '" +
                             std::string(expected_header) + "'");
  }
  lines.erase(lines.begin());
  return lines;
}
}  // namespace detail

inline constexpr std::string_view kTrainLogHeader = "member,epoch,split,metric,value";

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string out{kTrainLogHeader};
  out += '\n';
  for (const TrainLogRow& r : rows) {
    out += std::to_string(r.member);
    out += ',';
    out += std::to_string(r.epoch);
    out += ',';
    out += r.split;
    out += ',';
    out += r.metric;
    out += ',';
    out += format_double(r.value);
    out += '\n';
  }
  return out;
}

inline std::vector<TrainLogRow> parse_train_log_csv(std::string_view text) {
  std::vector<TrainLogRow> rows;
  for (std::string_view line : detail::csv_lines(text, kTrainLogHeader, "train log")) {
    const auto f = detail::split(line, ',');
    if (f.size() != 5) {
      throw std::runtime_error("train log: malformed row '" + std::string(line) + "'");
    }
    rows.push_back({parse_int(f[0]), parse_int(f[1]), std::string(f[2]),
                    std::string(f[3]), parse_double(f[4])});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Per-sample uncertainty records as JSONL, one object per line. nlohmann
// orders keys alphabetically and prints shortest-round-trip doubles, which
// makes the bytes deterministic.
// ---------------------------------------------------------------------------

struct UncertaintyLine {
  std::int64_t epoch = 0;
  std::string dataset;
  UncertaintyRecord record;
};

inline std::string uncertainty_jsonl(const std::vector<UncertaintyRecord>& records,
                                     std::int64_t epoch, const std::string& dataset) {
  std::string out;
  for (const UncertaintyRecord& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["epoch"] = epoch;
    j["dataset"] = dataset;
    j["entropy"] = r.entropy;
    j["mi"] = r.mutual_information;
    j["probs"] = r.probs;
    j["label"] = r.label;
    j["predicted"] = r.predicted;
    j["correct"] = r.correct;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<UncertaintyLine> parse_uncertainty_jsonl(std::string_view text) {
  std::vector<UncertaintyLine> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    const std::string_view line = text.substr(start, pos - start);
    start = pos + 1;
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    UncertaintyLine ul;
    ul.epoch = j.at("epoch").get<std::int64_t>();
    ul.dataset = j.at("dataset").get<std::string>();
    ul.record.id = j.at("id").get<std::int64_t>();
    ul.record.entropy = j.at("entropy").get<double>();
    ul.record.mutual_information = j.at("mi").get<double>();
    ul.record.probs = j.at("probs").get<std::vector<double>>();
    ul.record.label = j.at("label").get<std::int32_t>();
    ul.record.predicted = j.at("predicted").get<std::int32_t>();
    ul.record.correct = j.at("correct").get<bool>();
    out.push_back(std::move(ul));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Histogram and summary emission.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kHistogramHeader = "bin_entropy_lo,bin_mi_lo,group,count";

/// Full bin grid for both groups, zero counts included, so the row set is a
/// pure function of the edge configuration.
inline std::string histogram_csv(const Histogram2D& h) {
  std::string out{kHistogramHeader};
  out += '\n';
  const char* group_name[2] = {"correct", "incorrect"};
  for (int g = 0; g < 2; ++g) {
    for (std::size_t i = 0; i + 1 < h.entropy_edges.size(); ++i) {
      for (std::size_t j = 0; j + 1 < h.mi_edges.size(); ++j) {
        out += format_double(h.entropy_edges[i]);
        out += ',';
        out += format_double(h.mi_edges[j]);
        out += ',';
        out += group_name[g];
        out += ',';
        out += std::to_string(h.counts[g][i][j]);
        out += '\n';
      }
    }
  }
  return out;
}

/// Sum of all counts in a serialized histogram, the consistency handle for
/// "every sample landed in exactly one bin".
inline std::int64_t histogram_csv_total(std::string_view text) {
  std::int64_t total = 0;
  for (std::string_view line : detail::csv_lines(text, kHistogramHeader, "histogram")) {
    const auto f = detail::split(line, ',');
    if (f.size() != 4) {
      throw std::runtime_error("histogram: malformed row '" + std::string(line) + "'");
    }
    total += parse_int(f[3]);
  }
  return total;
}

inline constexpr std::string_view kSummaryHeader =
    "dataset,epoch,group,count,mean_entropy,median_entropy,mean_mi,median_mi";

struct SummaryRow {
  std::string dataset;
  std::int64_t epoch = 0;
  std::string group;  // "correct" | "incorrect"
  std::int64_t count = 0;
  double mean_entropy = 0.0, median_entropy = 0.0;
  double mean_mi = 0.0, median_mi = 0.0;
};

inline void append_summary_rows(std::vector<SummaryRow>& rows, const Histogram2D& h,
                                const std::string& dataset, std::int64_t epoch) {
  const char* group_name[2] = {"correct", "incorrect"};
  for (int g = 0; g < 2; ++g) {
    rows.push_back({dataset, epoch, group_name[g], h.group_total[g], h.mean_entropy[g],
                    h.median_entropy[g], h.mean_mi[g], h.median_mi[g]});
  }
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out{kSummaryHeader};
  out += '\n';
  for (const SummaryRow& r : rows) {
    out += r.dataset;
    out += ',';
    out += std::to_string(r.epoch);
    out += ',';
    out += r.group;
    out += ',';
    out += std::to_string(r.count);
    for (double v : {r.mean_entropy, r.median_entropy, r.mean_mi, r.median_mi}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

}  // namespace uq
