#include "spritz/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <sstream>

#include "spritz/rng.hpp"

namespace spritz::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '{';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << '}';
  return os.str();
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
  Tensor t;
  t.shape = shape;
  t.data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  return t;
}

Tensor Tensor::from(const std::vector<int>& shape, std::vector<double> values) {
  if (numel_of(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  Tensor t;
  t.shape = shape;
  t.data.assign(values.begin(), values.end());
  return t;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

void Tensor::reset(const std::vector<int>& s) {
  shape = s;
  data.assign(static_cast<size_t>(numel_of(s)), 0.0);
}

void Tensor::resize_nofill(const std::vector<int>& s) {
  shape = s;
  data.resize(static_cast<size_t>(numel_of(s)));
}

void require_shape(const Tensor& t, const std::vector<int>& shape,
                   const std::string& who) {
  if (t.shape != shape)
    throw ShapeError(who + ": expected shape " + shape_str(shape) + ", got " +
                     shape_str(t.shape));
}

bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// im2col / col2im for 3x3 kernels, padding 1, stride 1 or 2.
// The column matrix is {C*9, N*Ho*Wo} row-major with leading dimension
// `ld`; each example occupies a contiguous Ho*Wo block of columns, so one
// matrix product covers the whole batch. `col` points at the example's
// block; row r = c*9 + kr*3 + kc.
// ---------------------------------------------------------------------------

static void conv_out_hw(int h, int w, int stride, int& ho, int& wo) {
  ho = (h - 1) / stride + 1;
  wo = (w - 1) / stride + 1;
}

static void im2col(const double* x, int c, int h, int w, int stride,
                   double* col, int ho, int wo, int64_t ld) {
  for (int ci = 0; ci < c; ++ci) {
    const double* xc = x + static_cast<int64_t>(ci) * h * w;
    for (int kr = 0; kr < 3; ++kr) {
      for (int kc = 0; kc < 3; ++kc) {
        double* row = col + static_cast<int64_t>(ci * 9 + kr * 3 + kc) * ld;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - 1 + kr;
          double* dst = row + static_cast<int64_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::memset(dst, 0, sizeof(double) * wo);
            continue;
          }
          const double* src = xc + static_cast<int64_t>(iy) * w;
          // valid ox range: 0 <= ox*stride - 1 + kc < w
          int lo = 0;
          while (lo < wo && lo * stride - 1 + kc < 0) ++lo;
          int hi = wo - 1;
          while (hi >= lo && hi * stride - 1 + kc >= w) --hi;
          for (int ox = 0; ox < lo; ++ox) dst[ox] = 0.0;
          if (stride == 1) {
            if (hi >= lo)
              std::memcpy(dst + lo, src + (lo - 1 + kc),
                          sizeof(double) * (hi - lo + 1));
          } else {
            for (int ox = lo; ox <= hi; ++ox)
              dst[ox] = src[ox * stride - 1 + kc];
          }
          for (int ox = hi + 1; ox < wo; ++ox) dst[ox] = 0.0;
        }
      }
    }
  }
}

static void col2im_add(const double* col, int c, int h, int w, int stride,
                       double* x, int ho, int wo, int64_t ld) {
  for (int ci = 0; ci < c; ++ci) {
    double* xc = x + static_cast<int64_t>(ci) * h * w;
    for (int kr = 0; kr < 3; ++kr) {
      for (int kc = 0; kc < 3; ++kc) {
        const double* row = col + static_cast<int64_t>(ci * 9 + kr * 3 + kc) * ld;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - 1 + kr;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<int64_t>(oy) * wo;
          double* dst = xc + static_cast<int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - 1 + kc;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

const char* op_name(Op op) {
  switch (op) {
    case Op::Conv2d: return "conv2d";
    case Op::TConv2d: return "tconv2d";
    case Op::Dense: return "dense";
    case Op::MaxPool2x2: return "maxpool2x2";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::BatchNorm: return "batchnorm";
    case Op::Flatten: return "flatten";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
  }
  return "?";
}

Graph::Graph(std::string name, std::vector<int> input_shape)
    : name_(std::move(name)), input_shape_(std::move(input_shape)) {
  if (input_shape_.empty())
    throw ShapeError("graph '" + name_ + "': empty input shape");
  for (int d : input_shape_)
    if (d <= 0) throw ShapeError("graph '" + name_ + "': bad input shape " +
                                 shape_str(input_shape_));
}

std::string Graph::describe_node(int id) const {
  const Node& n = nodes_.at(id);
  std::ostringstream os;
  os << "graph '" << name_ << "' node " << id << " '" << n.name << "' ("
     << op_name(n.op) << ")";
  return os.str();
}

const std::vector<int>& Graph::in_shape_of(int id, int slot) const {
  const int src = nodes_.at(id).inputs.at(slot);
  return src < 0 ? input_shape_ : nodes_.at(src).out_shape;
}

int Graph::add_node(Node n, std::string name) {
  const int id = static_cast<int>(nodes_.size());
  for (int in : n.inputs)
    if (in < -1 || in >= id)
      throw ShapeError("graph '" + name_ + "': node " + std::to_string(id) +
                       " references invalid input " + std::to_string(in));
  n.name = name.empty() ? std::string(op_name(n.op)) + "_" + std::to_string(id)
                        : std::move(name);
  if (by_name_.count(n.name))
    throw ConfigError("graph '" + name_ + "': duplicate node name '" + n.name +
                      "'");
  by_name_[n.name] = id;
  nodes_.push_back(std::move(n));
  return id;
}

static std::vector<int> want_image(const std::vector<int>& s,
                                   const std::string& ctx) {
  if (s.size() != 3)
    throw ShapeError(ctx + ": needs a {C,H,W} input, got " + shape_str(s));
  return s;
}

int Graph::conv2d(int in, int out_channels, int stride, std::string name) {
  Node n;
  n.op = Op::Conv2d;
  n.inputs = {in};
  n.out_channels = out_channels;
  n.stride = stride;
  if (stride != 1 && stride != 2)
    throw ConfigError("conv2d: stride must be 1 or 2");
  if (out_channels <= 0) throw ConfigError("conv2d: bad channel count");
  const auto s = want_image(in < 0 ? input_shape_ : nodes_.at(in).out_shape,
                            "graph '" + name_ + "' conv2d");
  int ho, wo;
  conv_out_hw(s[1], s[2], stride, ho, wo);
  n.out_shape = {out_channels, ho, wo};
  n.w.value = Tensor::zeros({out_channels, s[0] * 9});
  n.w.grad = n.w.value;
  n.b.value = Tensor::zeros({out_channels});
  n.b.grad = n.b.value;
  return add_node(std::move(n), std::move(name));
}

int Graph::tconv2d(int in, int out_channels, std::string name) {
  Node n;
  n.op = Op::TConv2d;
  n.inputs = {in};
  n.out_channels = out_channels;
  n.stride = 2;
  if (out_channels <= 0) throw ConfigError("tconv2d: bad channel count");
  const auto s = want_image(in < 0 ? input_shape_ : nodes_.at(in).out_shape,
                            "graph '" + name_ + "' tconv2d");
  n.out_shape = {out_channels, s[1] * 2, s[2] * 2};
  // Weights live in the layout of the adjoint convolution (the one this
  // op transposes): {Cin, Cout*9}.
  n.w.value = Tensor::zeros({s[0], out_channels * 9});
  n.w.grad = n.w.value;
  n.b.value = Tensor::zeros({out_channels});
  n.b.grad = n.b.value;
  return add_node(std::move(n), std::move(name));
}

int Graph::dense(int in, int width, std::string name) {
  Node n;
  n.op = Op::Dense;
  n.inputs = {in};
  n.out_channels = width;
  if (width <= 0) throw ConfigError("dense: bad width");
  const auto s = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
  if (s.size() != 1)
    throw ShapeError("graph '" + name_ + "' dense: needs a flat {F} input, got " +
                     shape_str(s));
  n.out_shape = {width};
  n.w.value = Tensor::zeros({width, s[0]});
  n.w.grad = n.w.value;
  n.b.value = Tensor::zeros({width});
  n.b.grad = n.b.value;
  return add_node(std::move(n), std::move(name));
}

int Graph::maxpool2x2(int in, std::string name) {
  Node n;
  n.op = Op::MaxPool2x2;
  n.inputs = {in};
  const auto s = want_image(in < 0 ? input_shape_ : nodes_.at(in).out_shape,
                            "graph '" + name_ + "' maxpool2x2");
  if (s[1] % 2 || s[2] % 2)
    throw ShapeError("graph '" + name_ + "' maxpool2x2: odd spatial size " +
                     shape_str(s));
  n.out_shape = {s[0], s[1] / 2, s[2] / 2};
  return add_node(std::move(n), std::move(name));
}

int Graph::relu(int in, std::string name) {
  Node n;
  n.op = Op::Relu;
  n.inputs = {in};
  n.out_shape = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
  return add_node(std::move(n), std::move(name));
}

int Graph::sigmoid(int in, std::string name) {
  Node n;
  n.op = Op::Sigmoid;
  n.inputs = {in};
  n.out_shape = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
  return add_node(std::move(n), std::move(name));
}

int Graph::batchnorm(int in, std::string name) {
  Node n;
  n.op = Op::BatchNorm;
  n.inputs = {in};
  const auto s = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
  if (s.empty()) throw ShapeError("batchnorm: empty input shape");
  n.out_shape = s;
  const int c = s[0];
  n.gamma.value = Tensor::zeros({c});
  n.gamma.grad = n.gamma.value;
  n.beta.value = Tensor::zeros({c});
  n.beta.grad = n.beta.value;
  n.run_mean = Tensor::zeros({c});
  n.run_var = Tensor::zeros({c});
  return add_node(std::move(n), std::move(name));
}

int Graph::flatten(int in, std::string name) {
  Node n;
  n.op = Op::Flatten;
  n.inputs = {in};
  const auto s = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
  n.out_shape = {static_cast<int>(numel_of(s))};
  return add_node(std::move(n), std::move(name));
}

int Graph::reshape(int in, std::vector<int> to, std::string name) {
  Node n;
  n.op = Op::Reshape;
  n.inputs = {in};
  const auto s = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
  if (numel_of(to) != numel_of(s))
    throw ShapeError("graph '" + name_ + "' reshape: " + shape_str(s) +
                     " -> " + shape_str(to) + " changes element count");
  n.out_shape = to;
  n.reshape_to = std::move(to);
  return add_node(std::move(n), std::move(name));
}

int Graph::concat(const std::vector<int>& ins, std::string name) {
  Node n;
  n.op = Op::Concat;
  n.inputs = ins;
  if (ins.empty()) throw ShapeError("concat: no inputs");
  int total = 0;
  for (int in : ins) {
    const auto s = in < 0 ? input_shape_ : nodes_.at(in).out_shape;
    if (s.size() != 1)
      throw ShapeError("graph '" + name_ + "' concat: needs flat {F} inputs, got " +
                       shape_str(s));
    total += s[0];
  }
  n.out_shape = {total};
  return add_node(std::move(n), std::move(name));
}

int Graph::node_id(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end())
    throw ConfigError("graph '" + name_ + "': no node named '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

static bool relu_fed(const std::vector<Node>& nodes, int id) {
  for (size_t j = id + 1; j < nodes.size(); ++j) {
    for (int in : nodes[j].inputs) {
      if (in != id) continue;
      if (nodes[j].op == Op::Relu) return true;
      if (nodes[j].op == Op::BatchNorm &&
          relu_fed(nodes, static_cast<int>(j)))
        return true;
    }
  }
  return false;
}

void Graph::init_params(uint64_t seed) {
  Rng r(seed);
  for (size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::Conv2d:
      case Op::TConv2d:
      case Op::Dense: {
        int fan_in, fan_out;
        if (n.op == Op::Dense) {
          fan_in = n.w.value.shape[1];
          fan_out = n.w.value.shape[0];
        } else if (n.op == Op::Conv2d) {
          fan_in = n.w.value.shape[1];  // Cin*9
          fan_out = n.out_channels * 9;
        } else {
          fan_in = in_shape_of(static_cast<int>(id))[0] * 9;
          fan_out = n.out_channels * 9;
        }
        const double stddev =
            relu_fed(nodes_, static_cast<int>(id))
                ? std::sqrt(2.0 / fan_in)
                : std::sqrt(2.0 / (fan_in + fan_out));
        for (double& v : n.w.value.data) v = r.normal(0.0, stddev);
        n.b.value.fill(0.0);
        break;
      }
      case Op::BatchNorm:
        n.gamma.value.fill(1.0);
        n.beta.value.fill(0.0);
        n.run_mean.fill(0.0);
        n.run_var.fill(1.0);
        break;
      default:
        break;
    }
  }
}

std::vector<Param*> Graph::params() {
  std::vector<Param*> out;
  for (Node& n : nodes_) {
    switch (n.op) {
      case Op::Conv2d:
      case Op::TConv2d:
      case Op::Dense:
        out.push_back(&n.w);
        out.push_back(&n.b);
        break;
      case Op::BatchNorm:
        out.push_back(&n.gamma);
        out.push_back(&n.beta);
        break;
      default:
        break;
    }
  }
  return out;
}

std::vector<Tensor*> Graph::state_tensors() {
  std::vector<Tensor*> out;
  for (Node& n : nodes_) {
    switch (n.op) {
      case Op::Conv2d:
      case Op::TConv2d:
      case Op::Dense:
        out.push_back(&n.w.value);
        out.push_back(&n.b.value);
        break;
      case Op::BatchNorm:
        out.push_back(&n.gamma.value);
        out.push_back(&n.beta.value);
        out.push_back(&n.run_mean);
        out.push_back(&n.run_var);
        break;
      default:
        break;
    }
  }
  return out;
}

int64_t Graph::param_count() const {
  int64_t n = 0;
  for (const Node& nd : nodes_) {
    n += nd.w.value.numel() + nd.b.value.numel() + nd.gamma.value.numel() +
         nd.beta.value.numel();
  }
  return n;
}

void Graph::zero_grads() {
  for (Param* p : params()) p->grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

static void sig_fold(uint64_t& sig, uint64_t v) {
  sig ^= v;
  sig *= 1099511628211ull;
}

// Scalar logistic; file-local name so the unqualified call inside
// Graph::forward cannot collide with the Graph::sigmoid builder.
static double sgm(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

const Tensor& Graph::act(const ExecState& st, int id) const {
  if (!st.fwd_done) throw ConfigError("act: no forward pass has run");
  return st.acts.at(id);
}

const Tensor& Graph::act(const ExecState& st, const std::string& name) const {
  return act(st, node_id(name));
}

const Tensor& Graph::forward(ExecState& st, const Tensor& x, bool training) {
  if (x.shape.size() != input_shape_.size() + 1)
    throw ShapeError("graph '" + name_ + "': input must be {N," +
                     shape_str(input_shape_).substr(1) + ", got " +
                     shape_str(x.shape));
  for (size_t i = 0; i < input_shape_.size(); ++i)
    if (x.shape[i + 1] != input_shape_[i])
      throw ShapeError("graph '" + name_ + "': input shape " +
                       shape_str(x.shape) + " does not match " +
                       shape_str(input_shape_));
  const int n = x.shape[0];
  if (n <= 0) throw ShapeError("graph '" + name_ + "': empty batch");
  if (nodes_.empty()) throw ConfigError("graph '" + name_ + "': no nodes");

  st.batch = n;
  st.training = training;
  st.fwd_done = false;
  st.acts.resize(nodes_.size());
  st.cache.resize(nodes_.size());
  st.input = x;
  if (st.want_signature) st.signature = 1469598103934665603ull;

  for (size_t id = 0; id < nodes_.size(); ++id) {
    Node& nd = nodes_[id];
    const Tensor& in0 =
        nd.inputs[0] < 0 ? st.input : st.acts[nd.inputs[0]];
    Tensor& out = st.acts[id];
    std::vector<int> os = nd.out_shape;
    os.insert(os.begin(), n);

    switch (nd.op) {
      case Op::Conv2d: {
        out.resize_nofill(os);
        const auto& is = nd.inputs[0] < 0 ? input_shape_
                                          : nodes_[nd.inputs[0]].out_shape;
        const int ci = is[0], h = is[1], w = is[2];
        const int co = nd.out_channels;
        int ho, wo;
        conv_out_hw(h, w, nd.stride, ho, wo);
        const int hw = ho * wo;
        const int k = ci * 9;
        // One product per example: the per-example column block stays
        // cache-resident, which beats one giant matrix product here.
        auto& col = st.cache[id].col;
        col.resize(static_cast<size_t>(n) * k * hw);
        CMapRM wm(nd.w.value.ptr(), co, k);
        CMapVec bv(nd.b.value.ptr(), co);
        for (int i = 0; i < n; ++i) {
          double* coln = col.data() + static_cast<int64_t>(i) * k * hw;
          im2col(in0.ptr() + static_cast<int64_t>(i) * ci * h * w, ci, h, w,
                 nd.stride, coln, ho, wo, hw);
          MapRM om(out.ptr() + static_cast<int64_t>(i) * co * hw, co, hw);
          om.noalias() = wm * CMapRM(coln, k, hw);
          om.colwise() += bv;
        }
        break;
      }
      case Op::TConv2d: {
        out.reset(os);
        const auto& is = nd.inputs[0] < 0 ? input_shape_
                                          : nodes_[nd.inputs[0]].out_shape;
        const int ci = is[0], h = is[1], w = is[2];
        const int co = nd.out_channels;
        const int h2 = h * 2, w2 = w * 2;
        const int hw = h * w;
        const int k = co * 9;
        st.scratch.resize(static_cast<size_t>(k) * hw);
        CMapRM wm(nd.w.value.ptr(), ci, k);
        for (int i = 0; i < n; ++i) {
          CMapRM xm(in0.ptr() + static_cast<int64_t>(i) * ci * hw, ci, hw);
          MapRM colm(st.scratch.data(), k, hw);
          colm.noalias() = wm.transpose() * xm;
          double* on = out.ptr() + static_cast<int64_t>(i) * co * h2 * w2;
          col2im_add(st.scratch.data(), co, h2, w2, 2, on, h, w, hw);
          for (int c = 0; c < co; ++c) {
            const double bc = nd.b.value.data[c];
            double* oc = on + static_cast<int64_t>(c) * h2 * w2;
            for (int j = 0; j < h2 * w2; ++j) oc[j] += bc;
          }
        }
        break;
      }
      case Op::Dense: {
        out.resize_nofill(os);
        const int kdim = nd.w.value.shape[1];
        const int m = nd.out_channels;
        CMapRM xm(in0.ptr(), n, kdim);
        CMapRM wm(nd.w.value.ptr(), m, kdim);
        MapRM om(out.ptr(), n, m);
        om.noalias() = xm * wm.transpose();
        om.rowwise() += CMapVec(nd.b.value.ptr(), m).transpose();
        break;
      }
      case Op::MaxPool2x2: {
        out.resize_nofill(os);
        const auto& is = nd.inputs[0] < 0 ? input_shape_
                                          : nodes_[nd.inputs[0]].out_shape;
        const int c = is[0], h = is[1], w = is[2];
        const int ho = h / 2, wo = w / 2;
        auto& amax = st.cache[id].argmax;
        amax.resize(static_cast<size_t>(n) * c * ho * wo);
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < c; ++ch) {
            const double* xc =
                in0.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
            double* oc = out.ptr() + (static_cast<int64_t>(i) * c + ch) * ho * wo;
            int32_t* ac = amax.data() + (static_cast<int64_t>(i) * c + ch) * ho * wo;
            for (int oy = 0; oy < ho; ++oy) {
              for (int ox = 0; ox < wo; ++ox) {
                const int iy = oy * 2, ix = ox * 2;
                // ties keep the first element in row-major order
                double best = xc[iy * w + ix];
                int32_t bi = 0;
                const double v01 = xc[iy * w + ix + 1];
                if (v01 > best) { best = v01; bi = 1; }
                const double v10 = xc[(iy + 1) * w + ix];
                if (v10 > best) { best = v10; bi = 2; }
                const double v11 = xc[(iy + 1) * w + ix + 1];
                if (v11 > best) { best = v11; bi = 3; }
                oc[oy * wo + ox] = best;
                ac[oy * wo + ox] = bi;
              }
            }
          }
        }
        if (st.want_signature)
          for (int32_t a : amax) sig_fold(st.signature, static_cast<uint64_t>(a));
        break;
      }
      case Op::Relu: {
        out.resize_nofill(os);
        const int64_t m = in0.numel();
        for (int64_t i = 0; i < m; ++i) {
          const double v = in0.data[i];
          out.data[i] = v > 0.0 ? v : 0.0;
        }
        if (st.want_signature)
          for (int64_t i = 0; i < m; ++i)
            sig_fold(st.signature, in0.data[i] > 0.0 ? 1u : 0u);
        break;
      }
      case Op::Sigmoid: {
        out.resize_nofill(os);
        const int64_t m = in0.numel();
        for (int64_t i = 0; i < m; ++i) out.data[i] = sgm(in0.data[i]);
        break;
      }
      case Op::BatchNorm: {
        out.resize_nofill(os);
        const int c = nd.out_shape[0];
        const int64_t per = numel_of(nd.out_shape) / c;
        const int64_t cnt = static_cast<int64_t>(n) * per;
        auto& cch = st.cache[id];
        cch.xhat.resize(static_cast<size_t>(cnt) * c);
        cch.invstd.resize(c);
        constexpr double kEps = 1e-5;
        for (int ch = 0; ch < c; ++ch) {
          double mean, var;
          if (training) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
              const double* p =
                  in0.ptr() + (static_cast<int64_t>(i) * c + ch) * per;
              for (int64_t j = 0; j < per; ++j) s += p[j];
            }
            mean = s / cnt;
            double v = 0.0;
            for (int i = 0; i < n; ++i) {
              const double* p =
                  in0.ptr() + (static_cast<int64_t>(i) * c + ch) * per;
              for (int64_t j = 0; j < per; ++j) {
                const double d = p[j] - mean;
                v += d * d;
              }
            }
            var = v / cnt;  // biased, as used for normalization
            nd.run_mean.data[ch] = 0.9 * nd.run_mean.data[ch] + 0.1 * mean;
            nd.run_var.data[ch] = 0.9 * nd.run_var.data[ch] + 0.1 * var;
          } else {
            mean = nd.run_mean.data[ch];
            var = nd.run_var.data[ch];
          }
          const double inv = 1.0 / std::sqrt(var + kEps);
          cch.invstd[ch] = inv;
          const double g = nd.gamma.value.data[ch];
          const double bt = nd.beta.value.data[ch];
          for (int i = 0; i < n; ++i) {
            const int64_t off = (static_cast<int64_t>(i) * c + ch) * per;
            const double* p = in0.ptr() + off;
            double* q = out.ptr() + off;
            double* xh = cch.xhat.data() + off;
            for (int64_t j = 0; j < per; ++j) {
              const double z = (p[j] - mean) * inv;
              xh[j] = z;
              q[j] = g * z + bt;
            }
          }
        }
        break;
      }
      case Op::Flatten:
      case Op::Reshape: {
        out.shape = os;
        out.data = in0.data;
        break;
      }
      case Op::Concat: {
        out.resize_nofill(os);
        const int total = nd.out_shape[0];
        int off = 0;
        for (int in : nd.inputs) {
          const Tensor& t = in < 0 ? st.input : st.acts[in];
          const int f = t.shape[1];
          for (int i = 0; i < n; ++i)
            std::memcpy(out.ptr() + static_cast<int64_t>(i) * total + off,
                        t.ptr() + static_cast<int64_t>(i) * f,
                        sizeof(double) * f);
          off += f;
        }
        break;
      }
    }

    if (!all_finite(out))
      throw NumericalError(describe_node(static_cast<int>(id)) +
                           " produced non-finite values");
  }

  st.fwd_done = true;
  return st.acts.back();
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

static void ensure_dact(ExecState& st, int id) {
  if (id < 0) return;  // dinput is prepared by backward()
  if (!st.dset[id]) {
    st.dacts[id].reset(st.acts[id].shape);
    st.dset[id] = 1;
  }
}

const Tensor& Graph::backward(ExecState& st, const Tensor& dout, int from,
                              bool param_grads, bool input_grad) {
  if (!st.fwd_done)
    throw ConfigError("graph '" + name_ +
                      "': backward called before forward");
  if (from < 0) from = output();
  if (from >= static_cast<int>(nodes_.size()))
    throw ConfigError("graph '" + name_ + "': backward from invalid node");
  if (dout.shape != st.acts[from].shape)
    throw ShapeError("graph '" + name_ + "': gradient seed shape " +
                     shape_str(dout.shape) + " does not match " +
                     describe_node(from) + " output " +
                     shape_str(st.acts[from].shape));

  const int n = st.batch;
  st.dacts.resize(nodes_.size());
  st.dset.assign(nodes_.size(), 0);
  if (input_grad) st.dinput.reset(st.input.shape);
  st.dacts[from] = dout;
  st.dset[from] = 1;

  for (int id = from; id >= 0; --id) {
    if (!st.dset[id]) continue;
    Node& nd = nodes_[id];
    const Tensor& dy = st.dacts[id];
    const int in_id = nd.inputs[0];
    const bool want_dx = input_grad || in_id >= 0;
    const Tensor& in0 = in_id < 0 ? st.input : st.acts[in_id];
    ensure_dact(st, in_id);
    Tensor& dx = in_id < 0 ? st.dinput : st.dacts[in_id];

    switch (nd.op) {
      case Op::Conv2d: {
        const auto& is = in_id < 0 ? input_shape_ : nodes_[in_id].out_shape;
        const int ci = is[0], h = is[1], w = is[2];
        const int co = nd.out_channels;
        int ho, wo;
        conv_out_hw(h, w, nd.stride, ho, wo);
        const int hw = ho * wo;
        const int k = ci * 9;
        const auto& col = st.cache[id].col;
        CMapRM wm(nd.w.value.ptr(), co, k);
        st.scratch.resize(static_cast<size_t>(k) * hw);
        for (int i = 0; i < n; ++i) {
          CMapRM dym(dy.ptr() + static_cast<int64_t>(i) * co * hw, co, hw);
          if (want_dx) {
            MapRM dcolm(st.scratch.data(), k, hw);
            dcolm.noalias() = wm.transpose() * dym;
            col2im_add(st.scratch.data(), ci, h, w, nd.stride,
                       dx.ptr() + static_cast<int64_t>(i) * ci * h * w, ho, wo,
                       hw);
          }
          if (param_grads) {
            CMapRM colm(col.data() + static_cast<int64_t>(i) * k * hw, k, hw);
            MapRM dwm(nd.w.grad.ptr(), co, k);
            dwm.noalias() += dym * colm.transpose();
            MapVec(nd.b.grad.ptr(), co).noalias() += dym.rowwise().sum();
          }
        }
        break;
      }
      case Op::TConv2d: {
        const auto& is = in_id < 0 ? input_shape_ : nodes_[in_id].out_shape;
        const int ci = is[0], h = is[1], w = is[2];
        const int co = nd.out_channels;
        const int h2 = h * 2, w2 = w * 2;
        const int hw = h * w;
        const int k = co * 9;
        st.scratch.resize(static_cast<size_t>(k) * hw);
        CMapRM wm(nd.w.value.ptr(), ci, k);
        for (int i = 0; i < n; ++i) {
          // columns of dy under the forward conv geometry; dx = W * col
          im2col(dy.ptr() + static_cast<int64_t>(i) * co * h2 * w2, co, h2, w2,
                 2, st.scratch.data(), h, w, hw);
          CMapRM colm(st.scratch.data(), k, hw);
          if (want_dx) {
            MapRM dxm(dx.ptr() + static_cast<int64_t>(i) * ci * hw, ci, hw);
            dxm.noalias() += wm * colm;
          }
          if (param_grads) {
            CMapRM xm(in0.ptr() + static_cast<int64_t>(i) * ci * hw, ci, hw);
            MapRM dwm(nd.w.grad.ptr(), ci, k);
            dwm.noalias() += xm * colm.transpose();
            for (int c = 0; c < co; ++c) {
              const double* dc =
                  dy.ptr() + (static_cast<int64_t>(i) * co + c) * h2 * w2;
              double s = 0.0;
              for (int j = 0; j < h2 * w2; ++j) s += dc[j];
              nd.b.grad.data[c] += s;
            }
          }
        }
        break;
      }
      case Op::Dense: {
        const int kdim = nd.w.value.shape[1];
        const int m = nd.out_channels;
        CMapRM dym(dy.ptr(), n, m);
        CMapRM wm(nd.w.value.ptr(), m, kdim);
        if (want_dx) {
          MapRM dxm(dx.ptr(), n, kdim);
          dxm.noalias() += dym * wm;
        }
        if (param_grads) {
          CMapRM xm(in0.ptr(), n, kdim);
          MapRM dwm(nd.w.grad.ptr(), m, kdim);
          dwm.noalias() += dym.transpose() * xm;
          MapVec(nd.b.grad.ptr(), m).noalias() +=
              dym.colwise().sum().transpose();
        }
        break;
      }
      case Op::MaxPool2x2: {
        if (!want_dx) break;
        const auto& is = in_id < 0 ? input_shape_ : nodes_[in_id].out_shape;
        const int c = is[0], h = is[1], w = is[2];
        const int ho = h / 2, wo = w / 2;
        const auto& amax = st.cache[id].argmax;
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < c; ++ch) {
            const int64_t ob = (static_cast<int64_t>(i) * c + ch) * ho * wo;
            double* dxc = dx.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
            for (int oy = 0; oy < ho; ++oy) {
              for (int ox = 0; ox < wo; ++ox) {
                const int32_t a = amax[ob + oy * wo + ox];
                const int iy = oy * 2 + (a >> 1), ix = ox * 2 + (a & 1);
                dxc[iy * w + ix] += dy.data[ob + oy * wo + ox];
              }
            }
          }
        }
        break;
      }
      case Op::Relu: {
        if (!want_dx) break;
        const int64_t m = dy.numel();
        const Tensor& y = st.acts[id];
        for (int64_t i = 0; i < m; ++i)
          if (y.data[i] > 0.0) dx.data[i] += dy.data[i];
        break;
      }
      case Op::Sigmoid: {
        if (!want_dx) break;
        const int64_t m = dy.numel();
        const Tensor& y = st.acts[id];
        for (int64_t i = 0; i < m; ++i)
          dx.data[i] += dy.data[i] * y.data[i] * (1.0 - y.data[i]);
        break;
      }
      case Op::BatchNorm: {
        const int c = nd.out_shape[0];
        const int64_t per = numel_of(nd.out_shape) / c;
        const int64_t cnt = static_cast<int64_t>(n) * per;
        const auto& cch = st.cache[id];
        for (int ch = 0; ch < c; ++ch) {
          const double g = nd.gamma.value.data[ch];
          const double inv = cch.invstd[ch];
          double dsum = 0.0, dxhsum = 0.0;
          for (int i = 0; i < n; ++i) {
            const int64_t off = (static_cast<int64_t>(i) * c + ch) * per;
            const double* dp = dy.ptr() + off;
            const double* xh = cch.xhat.data() + off;
            for (int64_t j = 0; j < per; ++j) {
              dsum += dp[j];
              dxhsum += dp[j] * xh[j];
            }
          }
          if (param_grads) {
            nd.beta.grad.data[ch] += dsum;
            nd.gamma.grad.data[ch] += dxhsum;
          }
          if (!want_dx) continue;
          if (st.training) {
            const double k1 = dsum / cnt, k2 = dxhsum / cnt;
            for (int i = 0; i < n; ++i) {
              const int64_t off = (static_cast<int64_t>(i) * c + ch) * per;
              const double* dp = dy.ptr() + off;
              const double* xh = cch.xhat.data() + off;
              double* dq = dx.ptr() + off;
              for (int64_t j = 0; j < per; ++j)
                dq[j] += g * inv * (dp[j] - k1 - xh[j] * k2);
            }
          } else {
            const double s = g * inv;
            for (int i = 0; i < n; ++i) {
              const int64_t off = (static_cast<int64_t>(i) * c + ch) * per;
              const double* dp = dy.ptr() + off;
              double* dq = dx.ptr() + off;
              for (int64_t j = 0; j < per; ++j) dq[j] += s * dp[j];
            }
          }
        }
        break;
      }
      case Op::Flatten:
      case Op::Reshape: {
        if (!want_dx) break;
        const int64_t m = dy.numel();
        for (int64_t i = 0; i < m; ++i) dx.data[i] += dy.data[i];
        break;
      }
      case Op::Concat: {
        const int total = nd.out_shape[0];
        int off = 0;
        for (int in : nd.inputs) {
          if (in < 0 && !input_grad) {
            off += input_shape_[0];
            continue;
          }
          ensure_dact(st, in);
          Tensor& dxi = in < 0 ? st.dinput : st.dacts[in];
          const int f = in < 0 ? input_shape_[0] : nodes_[in].out_shape[0];
          for (int i = 0; i < n; ++i) {
            const double* src = dy.ptr() + static_cast<int64_t>(i) * total + off;
            double* dst = dxi.ptr() + static_cast<int64_t>(i) * f;
            for (int j = 0; j < f; ++j) dst[j] += src[j];
          }
          off += f;
        }
        break;
      }
    }
  }

  return st.dinput;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double sigmoid(double z) { return sgm(z); }

void softmax2(double z0, double z1, double& p0, double& p1) {
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  const double s = e0 + e1;
  p0 = e0 / s;
  p1 = e1 / s;
}

static void check_labels(const std::vector<int>& labels, int n,
                         const char* who) {
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(n));
  for (int y : labels)
    if (y != 0 && y != 1)
      throw ConfigError(std::string(who) + ": labels must be 0 or 1");
}

LossOut bce_with_logits(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape.size() != 2 || logits.shape[1] != 1)
    throw ShapeError("bce_with_logits: logits must be {N,1}, got " +
                     shape_str(logits.shape));
  const int n = logits.shape[0];
  check_labels(labels, n, "bce_with_logits");
  LossOut out;
  out.grad = Tensor::zeros(logits.shape);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = logits.data[i];
    const double y = labels[i];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    // d/dz = sigmoid(z) - y, written to stay exact under saturation
    out.grad.data[i] = (labels[i] == 1 ? -sigmoid(-z) : sigmoid(z)) / n;
  }
  out.value = total / n;
  return out;
}

LossOut softmax_ce2(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape.size() != 2 || logits.shape[1] != 2)
    throw ShapeError("softmax_ce2: logits must be {N,2}, got " +
                     shape_str(logits.shape));
  const int n = logits.shape[0];
  check_labels(labels, n, "softmax_ce2");
  LossOut out;
  out.grad = Tensor::zeros(logits.shape);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z0 = logits.data[2 * i], z1 = logits.data[2 * i + 1];
    const int y = labels[i];
    const double zy = y == 0 ? z0 : z1;
    const double zo = y == 0 ? z1 : z0;
    const double m = std::max(z0, z1);
    total += m + std::log(std::exp(z0 - m) + std::exp(z1 - m)) - zy;
    const double po = sigmoid(zo - zy);  // probability of the wrong class
    out.grad.data[2 * i + y] = -po / n;
    out.grad.data[2 * i + (1 - y)] = po / n;
  }
  out.value = total / n;
  return out;
}

LossOut mse(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target))
    throw ShapeError("mse: shape mismatch " + shape_str(pred.shape) + " vs " +
                     shape_str(target.shape));
  const int64_t m = pred.numel();
  if (m == 0) throw ShapeError("mse: empty tensors");
  LossOut out;
  out.grad = Tensor::zeros(pred.shape);
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double d = pred.data[i] - target.data[i];
    total += d * d;
    out.grad.data[i] = 2.0 * d / m;
  }
  out.value = total / m;
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

GradCheckReport grad_check(Graph& g, const Tensor& x, uint64_t seed, double h,
                           int param_samples, const std::string& from) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport rep;
  const int fid = from.empty() ? -1 : g.node_id(from);

  ExecState st;
  const Tensor* out0 = &g.forward(st, x, false);
  if (fid >= 0) out0 = &g.act(st, fid);
  Rng r(seed);
  std::vector<double> w(out0->data.size());
  for (double& v : w) v = r.uniform(-1.0, 1.0);

  g.zero_grads();
  Tensor gin = g.backward(st, Tensor::from(out0->shape, w), fid);

  ExecState pst;
  pst.want_signature = true;
  auto probe = [&](const Tensor& px, uint64_t& sig) {
    const Tensor* o = &g.forward(pst, px, false);
    if (fid >= 0) o = &g.act(pst, fid);
    sig = pst.signature;
    double L = 0.0;
    for (size_t i = 0; i < w.size(); ++i) L += w[i] * o->data[i];
    return L;
  };

  // fd_at yields the centered quotient at the given step plus the probe
  // magnitude |f+| + |f-|, or false when the two probes land on
  // different smoothness signatures. Quotient noise comes from rounding
  // inside the forward pass and scales as 1/step, so a coordinate whose
  // gradient is small relative to its noise floor cannot be resolved at
  // the base step. Each coordinate therefore walks a geometric ladder of
  // steps, fine to coarse, and keeps its best sig-valid measurement:
  // rounding noise shrinks along the ladder until the quotient resolves,
  // while a genuine analytic error persists at every rung because the
  // quotients converge to the true derivative, not to the stored one.
  // Discrepancies below a few ulps of the probe values divided by the
  // step count as exact. Coordinates with no sig-valid rung sit against
  // a kink and are skipped.
  auto check = [&](const std::function<bool(double, double&, double&)>& fd_at,
                   double an, const std::string& where, int64_t& counter) {
    const double ulp = std::numeric_limits<double>::epsilon();
    bool measured = false;
    double best_rel = 0.0, best_abs = 0.0;
    for (double mult : {1.0, 8.0, 64.0, 512.0, 4096.0}) {
      double fd, scale;
      if (!fd_at(mult * h, fd, scale)) continue;
      const double abs = std::abs(fd - an);
      const double denom = std::max(std::abs(fd), std::abs(an));
      const double floor = 8.0 * ulp * scale / (2.0 * mult * h);
      const double rel = (denom < 3e-6 || abs <= floor) ? 0.0 : abs / denom;
      if (!measured || rel < best_rel) {
        measured = true;
        best_rel = rel;
        best_abs = abs;
      }
      if (best_rel <= 1e-5) break;
    }
    if (!measured) {
      ++rep.skipped;
      return;
    }
    if (best_rel > rep.max_rel_err) {
      rep.max_rel_err = best_rel;
      rep.worst = where;
    }
    ++counter;
    rep.max_abs_err = std::max(rep.max_abs_err, best_abs);
  };

  Tensor xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    auto fd_at = [&](double step, double& fd, double& scale) {
      const double orig = xp.data[i];
      uint64_t sp, sm;
      xp.data[i] = orig + step;
      const double lp = probe(xp, sp);
      xp.data[i] = orig - step;
      const double lm = probe(xp, sm);
      xp.data[i] = orig;
      if (sp != sm) return false;
      fd = (lp - lm) / (2.0 * step);
      scale = std::abs(lp) + std::abs(lm);
      return true;
    };
    check(fd_at, gin.data[i], "input[" + std::to_string(i) + "]",
          rep.checked_input);
  }

  // Sample parameter coordinates uniformly over all parameter elements.
  auto ps = g.params();
  std::vector<int64_t> prefix;
  int64_t total = 0;
  for (Param* p : ps) {
    prefix.push_back(total);
    total += p->value.numel();
  }
  for (int s = 0; s < param_samples && total > 0; ++s) {
    const int64_t flat = r.uniform_int(total);
    size_t pi = 0;
    while (pi + 1 < ps.size() && prefix[pi + 1] <= flat) ++pi;
    const int64_t idx = flat - prefix[pi];
    double& slot = ps[pi]->value.data[idx];
    auto fd_at = [&](double step, double& fd, double& scale) {
      const double orig = slot;
      uint64_t sp, sm;
      slot = orig + step;
      const double lp = probe(x, sp);
      slot = orig - step;
      const double lm = probe(x, sm);
      slot = orig;
      if (sp != sm) return false;
      fd = (lp - lm) / (2.0 * step);
      scale = std::abs(lp) + std::abs(lm);
      return true;
    };
    check(fd_at, ps[pi]->grad.data[idx],
          "param[" + std::to_string(pi) + "][" + std::to_string(idx) + "]",
          rep.checked_param);
  }

  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return rep;
}

}  // namespace spritz::nn
