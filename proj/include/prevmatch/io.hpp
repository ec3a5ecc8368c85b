#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prevmatch/config.hpp"
#include "prevmatch/data.hpp"
#include "prevmatch/metrics.hpp"
#include "prevmatch/registry.hpp"
#include "prevmatch/trainer.hpp"

namespace prevmatch {

// ---------------------------------------------------------------------------
// low-level binary primitives (native little-endian layout)

namespace detail {

class BinWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void i32(std::int32_t v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  void i32s(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i32(x);
  }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& bytes) : buf_(bytes) {}

  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  double f64() { return get<double>(); }
  std::vector<double> f64s() {
    const std::uint64_t n = u64();
    std::vector<double> v(check_count(n, sizeof(double)));
    raw(v.data(), v.size() * sizeof(double));
    return v;
  }
  std::vector<int> i32s() {
    const std::uint64_t n = u64();
    std::vector<int> v(check_count(n, sizeof(std::int32_t)));
    for (auto& x : v) x = i32();
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    std::string s(check_count(n, 1), '\0');
    raw(s.data(), s.size());
    return s;
  }
  bool exhausted() const { return pos_ == buf_.size(); }

  void raw(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw std::runtime_error("checkpoint: unexpected end of data");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::size_t check_count(std::uint64_t n, std::size_t elem) {
    if (n > (buf_.size() - pos_) / elem) {
      throw std::runtime_error("checkpoint: truncated or corrupt data");
    }
    return static_cast<std::size_t>(n);
  }

  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline void write_params(BinWriter& w, const SegModel& model) {
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.i32s(p->shape);
    w.f64s(p->data);
  }
}

inline void read_params_into(BinReader& r, SegModel& model) {
  const auto params = model.parameters();
  const std::uint32_t n = r.u32();
  if (n != params.size()) {
    throw std::runtime_error("checkpoint: parameter count " + std::to_string(n) +
                             " does not match model (" + std::to_string(params.size()) + ")");
  }
  for (const auto& p : params) {
    const auto shape = r.i32s();
    if (shape != p->shape) {
      throw std::runtime_error("checkpoint: parameter shape mismatch, stored " + shape_str(shape) +
                               " vs model " + shape_str(p->shape));
    }
    auto data = r.f64s();
    if (data.size() != p->data.size()) throw std::runtime_error("checkpoint: parameter length mismatch");
    p->data = std::move(data);
  }
}

}  // namespace detail

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to file: " + path);
}

// ---------------------------------------------------------------------------
// checkpoint ("PVMT" v1)

/// Everything needed to continue a run exactly: config echo, model and
/// optimizer state, the previous-model registry, the master seed, the
/// epoch cursor and the history written so far. Serialization is
/// deterministic, so save -> load -> save is byte-identical.
struct Checkpoint {
  TrainConfig config;
  SegModel model;
  OptimizerState opt;
  int registry_capacity = 1;
  double registry_best = 0.0;
  std::vector<Snapshot> snapshots;
  std::uint64_t master_seed = 0;
  int next_epoch = 1;
  std::vector<MetricsRecord> history;
};

inline constexpr char kCheckpointMagic[4] = {'P', 'V', 'M', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::BinWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(config_echo(ck.config));
  detail::write_params(w, ck.model);
  w.f64(ck.opt.base_lr);
  w.f64(ck.opt.momentum);
  w.f64(ck.opt.power);
  w.u32(static_cast<std::uint32_t>(ck.opt.momentum_buffers.size()));
  for (const auto& b : ck.opt.momentum_buffers) w.f64s(b);
  w.u32(static_cast<std::uint32_t>(ck.registry_capacity));
  w.f64(ck.registry_best);
  w.u32(static_cast<std::uint32_t>(ck.snapshots.size()));
  for (const auto& s : ck.snapshots) {
    w.i32(s.epoch);
    w.f64(s.val_score);
    detail::write_params(w, s.model);
  }
  w.u64(ck.master_seed);
  w.i32(ck.next_epoch);
  w.u32(static_cast<std::uint32_t>(ck.history.size()));
  for (const auto& r : ck.history) {
    w.i32(r.epoch);
    w.f64(r.l_s);
    w.f64(r.l_u_standard);
    w.f64(r.l_u_prev);
    w.f64(r.lambda);
    w.f64(r.miou_val);
    w.f64s(r.val_iou);
    w.f64s(r.pseudo_acc);
    w.f64(r.mask_frac_standard);
    w.f64(r.mask_frac_prev);
  }
  return w.bytes();
}

/// Construct the model skeleton a config describes (parameter values are
/// then overwritten from the stored arrays).
inline SegModel model_skeleton(const TrainConfig& cfg) {
  std::vector<int> widths(static_cast<std::size_t>(std::max(cfg.depth - 1, 0)), cfg.hidden_width);
  return SegModel::init(cfg.in_channels, cfg.classes, widths, 3, CounterRng::seeded(0));
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::BinReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic, not a PVMT file");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config = parse_config(r.str());
  ck.model = model_skeleton(ck.config);
  detail::read_params_into(r, ck.model);
  const double base_lr = r.f64();
  const double momentum = r.f64();
  const double power = r.f64();
  ck.opt = OptimizerState::init(ck.model, base_lr, momentum, power);
  const std::uint32_t nbuf = r.u32();
  if (nbuf != ck.opt.momentum_buffers.size()) {
    throw std::runtime_error("checkpoint: optimizer buffer count mismatch");
  }
  for (auto& b : ck.opt.momentum_buffers) {
    auto data = r.f64s();
    if (data.size() != b.size()) throw std::runtime_error("checkpoint: momentum buffer length mismatch");
    b = std::move(data);
  }
  ck.registry_capacity = static_cast<int>(r.u32());
  ck.registry_best = r.f64();
  const std::uint32_t nsnap = r.u32();
  for (std::uint32_t i = 0; i < nsnap; ++i) {
    Snapshot s;
    s.epoch = r.i32();
    s.val_score = r.f64();
    s.model = model_skeleton(ck.config).clone_detached();
    detail::read_params_into(r, s.model);
    ck.snapshots.push_back(std::move(s));
  }
  ck.master_seed = r.u64();
  ck.next_epoch = r.i32();
  const std::uint32_t nrec = r.u32();
  for (std::uint32_t i = 0; i < nrec; ++i) {
    MetricsRecord rec;
    rec.epoch = r.i32();
    rec.l_s = r.f64();
    rec.l_u_standard = r.f64();
    rec.l_u_prev = r.f64();
    rec.lambda = r.f64();
    rec.miou_val = r.f64();
    rec.val_iou = r.f64s();
    rec.pseudo_acc = r.f64s();
    rec.mask_frac_standard = r.f64();
    rec.mask_frac_prev = r.f64();
    ck.history.push_back(std::move(rec));
  }
  if (!r.exhausted()) throw std::runtime_error("checkpoint: trailing bytes after payload");
  return ck;
}

/// Rebuild the registry object a checkpoint describes. Snapshot models
/// are deep copies, so the restored registry is as immutable as the
/// original.
inline PrevRegistry restore_registry(const Checkpoint& ck) {
  std::vector<Snapshot> snaps;
  snaps.reserve(ck.snapshots.size());
  for (const auto& s : ck.snapshots) {
    snaps.push_back(Snapshot{s.model.clone_detached(), s.epoch, s.val_score});
  }
  return PrevRegistry::restore(ck.registry_capacity, ck.registry_best, std::move(snaps));
}

// ---------------------------------------------------------------------------
// metrics CSV

/// Fixed CSV contract: header then one row per epoch, floats printed with
/// 9 significant digits ("nan" for absent values) so identical runs diff
/// equal.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string metrics_csv_header(int num_classes) {
  std::string h = "epoch,l_s,l_u_std,l_u_prev,lambda,miou_val";
  for (int c = 0; c < num_classes; ++c) h += ",iou_c" + std::to_string(c);
  for (int c = 0; c < num_classes; ++c) h += ",pacc_c" + std::to_string(c);
  return h + "\n";
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
  std::string row = std::to_string(r.epoch);
  row += "," + csv_number(r.l_s);
  row += "," + csv_number(r.l_u_standard);
  row += "," + csv_number(r.l_u_prev);
  row += "," + csv_number(r.lambda);
  row += "," + csv_number(r.miou_val);
  for (double v : r.val_iou) row += "," + csv_number(v);
  for (double v : r.pseudo_acc) row += "," + csv_number(v);
  return row + "\n";
}

inline std::string metrics_to_csv(const std::vector<MetricsRecord>& history, int num_classes) {
  std::string out = metrics_csv_header(num_classes);
  for (const auto& r : history) out += metrics_csv_row(r);
  return out;
}

/// Parsed CSV with the raw cell text preserved (export-curves copies cells
/// verbatim so round trips are exact).
struct ParsedCsv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int num_classes = 0;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline ParsedCsv parse_metrics_csv(const std::string& text) {
  ParsedCsv csv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    cells.push_back(cur);
    return cells;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (csv.header.empty()) {
      csv.header = split(line);
      if (csv.header.size() < 6 || csv.header[0] != "epoch") {
        throw std::runtime_error("metrics csv row 1: unexpected header");
      }
      int c = 0;
      while (csv.column("iou_c" + std::to_string(c)) >= 0) ++c;
      csv.num_classes = c;
      if (c == 0 || csv.header.size() != 6 + 2 * static_cast<std::size_t>(c)) {
        throw std::runtime_error("metrics csv row 1: header does not match the metrics contract");
      }
      continue;
    }
    auto cells = split(line);
    if (cells.size() != csv.header.size()) {
      throw std::runtime_error("metrics csv row " + std::to_string(line_no) + ": expected " +
                               std::to_string(csv.header.size()) + " cells, got " +
                               std::to_string(cells.size()));
    }
    csv.rows.push_back(std::move(cells));
  }
  if (csv.header.empty()) throw std::runtime_error("metrics csv: empty file");
  return csv;
}

// ---------------------------------------------------------------------------
// dataset dump ("PVDS" v1)

inline constexpr char kDatasetMagic[4] = {'P', 'V', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string serialize_scenes(const std::vector<Scene>& scenes) {
  detail::BinWriter w;
  w.raw(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(scenes.size()));
  for (const auto& s : scenes) {
    w.i32s(s.image->shape);
    w.f64s(s.image->data);
    w.i32s(s.labels.shape);
    w.i32s(s.labels.data);
  }
  return w.bytes();
}

inline std::vector<Scene> deserialize_scenes(const std::string& bytes) {
  detail::BinReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
    throw std::runtime_error("dataset: bad magic, not a PVDS file");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
  }
  const std::uint32_t n = r.u32();
  std::vector<Scene> scenes;
  scenes.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Scene s;
    auto ishape = r.i32s();
    auto idata = r.f64s();
    s.image = make_tensor(std::move(ishape), std::move(idata));
    auto lshape = r.i32s();
    auto ldata = r.i32s();
    s.labels = LabelMap(std::move(lshape), std::move(ldata));
    scenes.push_back(std::move(s));
  }
  if (!r.exhausted()) throw std::runtime_error("dataset: trailing bytes after payload");
  return scenes;
}

// ---------------------------------------------------------------------------
// curve export

/// Per-class curve files from a metrics CSV: epoch, validation IoU and
/// pseudo-label accuracy columns copied cell-for-cell. Returns the file
/// contents keyed by file name (class<i>.txt).
inline std::vector<std::pair<std::string, std::string>> export_curves_text(
    const ParsedCsv& csv, const std::vector<int>& class_ids) {
  std::vector<std::pair<std::string, std::string>> files;
  for (int cls : class_ids) {
    const int iou_col = csv.column("iou_c" + std::to_string(cls));
    const int pacc_col = csv.column("pacc_c" + std::to_string(cls));
    if (iou_col < 0 || pacc_col < 0) {
      throw std::invalid_argument("export_curves: class " + std::to_string(cls) +
                                  " not present in csv (classes 0.." +
                                  std::to_string(csv.num_classes - 1) + ")");
    }
    std::string body = "epoch val_iou pseudo_acc\n";
    for (const auto& row : csv.rows) {
      body += row[0];
      body += " ";
      body += row[static_cast<std::size_t>(iou_col)];
      body += " ";
      body += row[static_cast<std::size_t>(pacc_col)];
      body += "\n";
    }
    files.emplace_back("class" + std::to_string(cls) + ".txt", std::move(body));
  }
  return files;
}

}  // namespace prevmatch
