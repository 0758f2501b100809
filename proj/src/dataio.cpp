#include "spritz/dataio.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "spritz/errors.hpp"
#include "spritz/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

namespace spritz::dataio {

using json = nlohmann::json;
using spritz::ConfigError;
using spritz::CheckpointError;
using spritz::ParseError;
using spritz::ShapeError;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

int Dataset::count(int label) const {
  int n = 0;
  for (const auto& e : items) n += (e.label == label);
  return n;
}

Tensor Dataset::gather(const std::vector<int>& idx, int begin, int n,
                       std::vector<int>* labels) const {
  Tensor out;
  out.resize_nofill({n, 1, models::kImageSide, models::kImageSide});
  if (labels) labels->resize(n);
  const int64_t px = static_cast<int64_t>(models::kImageSide) *
                     models::kImageSide;
  for (int i = 0; i < n; ++i) {
    const Example& e = items.at(idx.at(begin + i));
    std::memcpy(out.ptr() + i * px, e.grid.ptr(), sizeof(double) * px);
    if (labels) (*labels)[i] = e.label;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

static std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

static double parse_cell(const std::string& cell, int line_no, int col) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc{} || r.ptr != e || !std::isfinite(v))
    throw ParseError("csv line " + std::to_string(line_no) + ", column " +
                     std::to_string(col + 1) + ": bad numeric cell '" + cell +
                     "'");
  return v;
}

std::vector<FeatureRow> load_csv(const std::string& path,
                                 const CsvSchema& schema) {
  if (schema.width < 1)
    throw ConfigError("load_csv: schema width must be >= 1");
  std::ifstream in(path);
  if (!in) throw ParseError("load_csv: cannot open '" + path + "'");
  const int ncol = schema.width + 1;
  const int lcol = schema.label_column < 0 ? ncol - 1 : schema.label_column;
  if (lcol >= ncol)
    throw ConfigError("load_csv: label column " + std::to_string(lcol) +
                      " out of range for width " +
                      std::to_string(schema.width));

  std::string line;
  if (!std::getline(in, line))
    throw ParseError("load_csv: '" + path + "' is empty (no header)");
  if (static_cast<int>(split_line(line).size()) != ncol)
    throw ParseError("csv line 1: header has " +
                     std::to_string(split_line(line).size()) +
                     " columns, expected " + std::to_string(ncol));

  std::vector<FeatureRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (static_cast<int>(cells.size()) != ncol)
      throw ParseError("csv line " + std::to_string(line_no) + ": " +
                       std::to_string(cells.size()) + " columns, expected " +
                       std::to_string(ncol));
    FeatureRow row;
    row.values.reserve(schema.width);
    for (int c = 0; c < ncol; ++c) {
      if (c == lcol) {
        const double v = parse_cell(cells[c], line_no, c);
        if (v != 0.0 && v != 1.0)
          throw ParseError("csv line " + std::to_string(line_no) +
                           ": label must be 0 or 1, got '" + cells[c] + "'");
        row.label = static_cast<int>(v);
      } else {
        row.values.push_back(parse_cell(cells[c], line_no, c));
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

static std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void write_csv(const std::string& path, const std::vector<FeatureRow>& rows,
               const CsvSchema& schema) {
  const int ncol = schema.width + 1;
  const int lcol = schema.label_column < 0 ? ncol - 1 : schema.label_column;
  std::ofstream out(path);
  if (!out) throw ParseError("write_csv: cannot open '" + path + "'");
  for (int c = 0; c < ncol; ++c) {
    if (c) out << ',';
    if (c == lcol)
      out << "label";
    else
      out << 'f' << (c < lcol ? c : c - 1);
  }
  out << '\n';
  for (const auto& row : rows) {
    if (static_cast<int>(row.values.size()) != schema.width)
      throw ShapeError("write_csv: row has " +
                       std::to_string(row.values.size()) +
                       " features, schema says " +
                       std::to_string(schema.width));
    int f = 0;
    for (int c = 0; c < ncol; ++c) {
      if (c) out << ',';
      if (c == lcol)
        out << row.label;
      else
        out << fmt_double(row.values[f++]);
    }
    out << '\n';
  }
}

NormStats compute_stats(const std::vector<FeatureRow>& train) {
  if (train.empty()) throw ConfigError("compute_stats: empty training set");
  const size_t w = train.front().values.size();
  NormStats s;
  s.fmin.assign(w, std::numeric_limits<double>::infinity());
  s.fmax.assign(w, -std::numeric_limits<double>::infinity());
  for (const auto& row : train) {
    if (row.values.size() != w)
      throw ShapeError("compute_stats: inconsistent row widths " +
                       std::to_string(row.values.size()) + " vs " +
                       std::to_string(w));
    for (size_t i = 0; i < w; ++i) {
      s.fmin[i] = std::min(s.fmin[i], row.values[i]);
      s.fmax[i] = std::max(s.fmax[i], row.values[i]);
    }
  }
  return s;
}

Example to_grid(const FeatureRow& row, const NormStats& stats) {
  const size_t w = row.values.size();
  if (w != stats.fmin.size() || w == 0)
    throw ShapeError("to_grid: row width " + std::to_string(w) +
                     " does not match stats width " +
                     std::to_string(stats.fmin.size()));
  std::vector<double> norm(w);
  for (size_t i = 0; i < w; ++i) {
    const double lo = stats.fmin[i], hi = stats.fmax[i];
    if (hi == lo) {
      norm[i] = 0.0;
    } else {
      double v = (row.values[i] - lo) / (hi - lo);
      norm[i] = 255.0 * std::clamp(v, 0.0, 1.0);
    }
  }
  Example ex;
  ex.grid.resize_nofill({1, models::kImageSide, models::kImageSide});
  const int64_t px = ex.grid.numel();
  for (int64_t i = 0; i < px; ++i) ex.grid.data[i] = norm[i % w];
  ex.label = row.label;
  return ex;
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

static Example synth_example(int label, int index, double difficulty,
                             uint64_t seed) {
  Rng r(mix_seed(seed, fnv1a("synth/" + std::to_string(label) +
                                         "/" + std::to_string(index))));
  const int side = models::kImageSide;
  const double tau = 6.283185307179586;

  // shared smooth plaid
  struct Term {
    double fx, fy, px, py, amp;
  };
  Term terms[3];
  int nterms = 2;
  const double low[] = {1.0, 2.0, 3.0};
  for (int t = 0; t < 2; ++t) {
    terms[t].fx = low[r.uniform_int(3)];
    terms[t].fy = low[r.uniform_int(3)];
    terms[t].px = r.uniform(0.0, tau);
    terms[t].py = r.uniform(0.0, tau);
    terms[t].amp = r.uniform(30.0, 55.0);
  }
  if (label == 1) {
    const double high[] = {8.0, 10.0, 12.0};
    terms[2].fx = high[r.uniform_int(3)];
    terms[2].fy = high[r.uniform_int(3)];
    terms[2].px = r.uniform(0.0, tau);
    terms[2].py = r.uniform(0.0, tau);
    terms[2].amp = r.uniform(34.0, 46.0);
    nterms = 3;
  }

  Example ex;
  ex.grid.resize_nofill({1, side, side});
  ex.label = label;
  ex.source_id = "synth/" + std::to_string(label) + "/" + std::to_string(index);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      double v = 127.5;
      for (int t = 0; t < nterms; ++t)
        v += terms[t].amp * std::sin(tau * terms[t].fx * x / side + terms[t].px) *
             std::sin(tau * terms[t].fy * y / side + terms[t].py);
      if (difficulty > 0.0) v += r.normal(0.0, 25.0 * difficulty);
      ex.grid.data[y * side + x] = std::clamp(v, 0.0, 255.0);
    }
  }
  return ex;
}

Dataset synth_dataset(int n_per_class, double difficulty, uint64_t seed) {
  if (n_per_class < 1)
    throw ConfigError("synth_dataset: n_per_class must be >= 1");
  if (difficulty < 0.0)
    throw ConfigError("synth_dataset: difficulty must be >= 0");
  Dataset ds;
  ds.items.reserve(2 * static_cast<size_t>(n_per_class));
  for (int label = 0; label < 2; ++label)
    for (int i = 0; i < n_per_class; ++i)
      ds.items.push_back(synth_example(label, i, difficulty, seed));
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

static const char kMagic[4] = {'S', 'P', 'Z', '1'};
constexpr uint32_t kVersion = 1;

static void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
static void put_pod(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(v));
}

static json graph_descriptor(const Graph& g) {
  json nodes = json::array();
  for (int id = 0; id < g.node_count(); ++id) {
    const nn::Node& nd = g.node(id);
    json n;
    n["op"] = nn::op_name(nd.op);
    n["name"] = nd.name;
    n["inputs"] = nd.inputs;
    if (nd.op == nn::Op::Conv2d || nd.op == nn::Op::TConv2d ||
        nd.op == nn::Op::Dense) {
      n["width"] = nd.out_channels;
      n["stride"] = nd.stride;
    }
    if (nd.op == nn::Op::Reshape) n["to"] = nd.reshape_to;
    nodes.push_back(std::move(n));
  }
  int64_t doubles = 0;
  for (const Tensor* t : const_cast<Graph&>(g).state_tensors())
    doubles += t->numel();
  json d;
  d["name"] = g.name();
  d["input_shape"] = g.input_shape();
  d["nodes"] = std::move(nodes);
  d["doubles"] = doubles;
  return d;
}

static void append_graph_payload(std::string& buf, const Graph& g) {
  for (const Tensor* t : const_cast<Graph&>(g).state_tensors())
    put_bytes(buf, t->data.data(), t->data.size() * sizeof(double));
}

static Graph rebuild_graph(const json& d) {
  Graph g(d.at("name").get<std::string>(),
          d.at("input_shape").get<std::vector<int>>());
  for (const json& n : d.at("nodes")) {
    const std::string op = n.at("op").get<std::string>();
    const std::string name = n.at("name").get<std::string>();
    const auto inputs = n.at("inputs").get<std::vector<int>>();
    if (inputs.empty())
      throw CheckpointError("checkpoint descriptor: node '" + name +
                            "' has no inputs");
    const int in0 = inputs[0];
    if (op == "conv2d")
      g.conv2d(in0, n.at("width").get<int>(), n.at("stride").get<int>(), name);
    else if (op == "tconv2d")
      g.tconv2d(in0, n.at("width").get<int>(), name);
    else if (op == "dense")
      g.dense(in0, n.at("width").get<int>(), name);
    else if (op == "maxpool2x2")
      g.maxpool2x2(in0, name);
    else if (op == "relu")
      g.relu(in0, name);
    else if (op == "sigmoid")
      g.sigmoid(in0, name);
    else if (op == "batchnorm")
      g.batchnorm(in0, name);
    else if (op == "flatten")
      g.flatten(in0, name);
    else if (op == "reshape")
      g.reshape(in0, n.at("to").get<std::vector<int>>(), name);
    else if (op == "concat")
      g.concat(inputs, name);
    else
      throw CheckpointError("checkpoint descriptor: unknown op '" + op + "'");
  }
  return g;
}

static Graph rebuild_checked(const json& d, const std::string& path) {
  try {
    return rebuild_graph(d);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' descriptor mismatch: " +
                          e.what());
  }
}

static void read_graph_payload(Graph& g, const std::string& bytes,
                               size_t& off) {
  for (Tensor* t : g.state_tensors()) {
    const size_t n = t->data.size() * sizeof(double);
    if (off + n > bytes.size())
      throw CheckpointError("checkpoint payload truncated in graph '" +
                            g.name() + "'");
    std::memcpy(t->data.data(), bytes.data() + off, n);
    off += n;
  }
}

static void write_file(const std::string& path, std::string buf) {
  put_pod(buf, fnv1a_bytes(buf.data(), buf.size()));
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw CheckpointError("cannot move checkpoint into place at '" + path +
                          "': " + ec.message());
}

static std::string header_bytes(const json& desc) {
  std::string buf;
  put_bytes(buf, kMagic, 4);
  put_pod(buf, kVersion);
  const std::string js = desc.dump();
  put_pod(buf, static_cast<uint64_t>(js.size()));
  buf += js;
  return buf;
}

/// Returns the descriptor and leaves `off` at the payload start.
static json open_checkpoint(const std::string& path, std::string& bytes,
                            size_t& off) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  bytes = std::move(ss).str();

  if (bytes.size() < 4 + sizeof(uint32_t) + 2 * sizeof(uint64_t))
    throw CheckpointError("checkpoint '" + path + "' is truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");

  uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored),
              sizeof(stored));
  const size_t body = bytes.size() - sizeof(stored);
  if (fnv1a_bytes(bytes.data(), body) != stored)
    throw CheckpointError("checkpoint '" + path +
                          "' failed its checksum (corrupt or truncated)");

  off = 4;
  uint32_t version = 0;
  std::memcpy(&version, bytes.data() + off, sizeof(version));
  off += sizeof(version);
  if (version != kVersion)
    throw CheckpointError("checkpoint '" + path + "' has version " +
                          std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  uint64_t jlen = 0;
  std::memcpy(&jlen, bytes.data() + off, sizeof(jlen));
  off += sizeof(jlen);
  if (off + jlen > body)
    throw CheckpointError("checkpoint '" + path + "' descriptor overruns file");
  json desc;
  try {
    desc = json::parse(bytes.substr(off, jlen));
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' descriptor unreadable: " +
                          e.what());
  }
  off += jlen;
  bytes.resize(body);
  return desc;
}

void save_graph(const Graph& g, const std::string& path) {
  json desc;
  desc["type"] = "graph";
  desc["graph"] = graph_descriptor(g);
  std::string buf = header_bytes(desc);
  append_graph_payload(buf, g);
  write_file(path, std::move(buf));
}

Graph load_graph(const std::string& path) {
  std::string bytes;
  size_t off = 0;
  json desc = open_checkpoint(path, bytes, off);
  if (desc.value("type", "") != "graph")
    throw CheckpointError("descriptor mismatch: '" + path +
                          "' holds a " + desc.value("type", "?") +
                          " checkpoint, expected a single graph");
  Graph g = rebuild_checked(desc.at("graph"), path);
  read_graph_payload(g, bytes, off);
  if (off != bytes.size())
    throw CheckpointError("checkpoint '" + path + "' has " +
                          std::to_string(bytes.size() - off) +
                          " unread payload bytes");
  return g;
}

void save_ensemble(const models::EnsembleModel& m, const std::string& path) {
  json desc;
  desc["type"] = "ensemble";
  desc["thr_leg"] = m.thr_leg;
  desc["thr_mal"] = m.thr_mal;
  desc["combiner_trained"] = m.combiner_trained;
  desc["graphs"] = json::array({graph_descriptor(m.cnn2c),
                                graph_descriptor(m.ae_leg),
                                graph_descriptor(m.ae_mal),
                                graph_descriptor(m.combiner)});
  std::string buf = header_bytes(desc);
  append_graph_payload(buf, m.cnn2c);
  append_graph_payload(buf, m.ae_leg);
  append_graph_payload(buf, m.ae_mal);
  append_graph_payload(buf, m.combiner);
  write_file(path, std::move(buf));
}

models::EnsembleModel load_ensemble(const std::string& path) {
  std::string bytes;
  size_t off = 0;
  json desc = open_checkpoint(path, bytes, off);
  if (desc.value("type", "") != "ensemble")
    throw CheckpointError("descriptor mismatch: '" + path + "' holds a " +
                          desc.value("type", "?") +
                          " checkpoint, expected an ensemble");
  const json& gs = desc.at("graphs");
  if (!gs.is_array() || gs.size() != 4)
    throw CheckpointError("descriptor mismatch: ensemble checkpoint needs 4 "
                          "graphs, found " +
                          std::to_string(gs.size()));
  models::EnsembleModel m{rebuild_checked(gs[0], path),
                          rebuild_checked(gs[1], path),
                          rebuild_checked(gs[2], path),
                          rebuild_checked(gs[3], path),
                          desc.at("thr_leg").get<double>(),
                          desc.at("thr_mal").get<double>(),
                          desc.at("combiner_trained").get<bool>()};
  try {
    for (const char* tap : {"flatten", "logit", "prob"}) m.cnn2c.node_id(tap);
    for (Graph* ae : {&m.ae_leg, &m.ae_mal})
      for (const char* tap : {"latent", "recon"}) ae->node_id(tap);
    m.combiner.node_id("logits");
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint '" + path +
                          "' descriptor mismatch: " + e.what());
  }
  read_graph_payload(m.cnn2c, bytes, off);
  read_graph_payload(m.ae_leg, bytes, off);
  read_graph_payload(m.ae_mal, bytes, off);
  read_graph_payload(m.combiner, bytes, off);
  if (off != bytes.size())
    throw CheckpointError("checkpoint '" + path + "' has " +
                          std::to_string(bytes.size() - off) +
                          " unread payload bytes");
  return m;
}

}  // namespace spritz::dataio
