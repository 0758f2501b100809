#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spritz/tensor.hpp"

namespace spritz::nn {

enum class Op {
  Conv2d,
  TConv2d,
  Dense,
  MaxPool2x2,
  Relu,
  Sigmoid,
  BatchNorm,
  Flatten,
  Reshape,
  Concat,
};

const char* op_name(Op op);

struct Param {
  Tensor value;
  Tensor grad;
};

struct Node {
  Op op = Op::Relu;
  std::string name;
  std::vector<int> inputs;     // node ids; -1 refers to the graph input
  std::vector<int> out_shape;  // per example, without the batch dimension

  // conv2d / tconv2d / dense
  int out_channels = 0;
  int stride = 1;
  Param w;
  Param b;

  // batchnorm
  Param gamma;
  Param beta;
  Tensor run_mean;
  Tensor run_var;

  std::vector<int> reshape_to;

  bool has_params() const {
    return op == Op::Conv2d || op == Op::TConv2d || op == Op::Dense ||
           op == Op::BatchNorm;
  }
};

struct NodeCache {
  dvec col;                     // conv2d: im2col patches kept for backward
  std::vector<int32_t> argmax;  // maxpool2x2: winning offset per output cell
  dvec xhat;                    // batchnorm: normalized input
  dvec invstd;                  // batchnorm: per-channel 1/sqrt(var + eps)
};

/// Per-run activation workspace. Graph topology and parameters live in
/// Graph; everything produced by a forward/backward cycle lives here, so
/// concurrent evaluation just takes one ExecState per worker. Reusing a
/// state across calls reuses its buffers.
struct ExecState {
  std::vector<Tensor> acts;
  std::vector<Tensor> dacts;
  std::vector<char> dset;
  std::vector<NodeCache> cache;
  dvec scratch;
  Tensor input;
  Tensor dinput;
  int batch = 0;
  bool fwd_done = false;
  bool training = false;

  // When set, forward folds every relu sign and pooling argmax into
  // `signature`; two inputs on the same smooth piece of the network agree.
  bool want_signature = false;
  uint64_t signature = 0;
};

/// A static feed-forward DAG over one input tensor. Nodes are stored in
/// topological order (inputs always precede consumers); the last node is
/// the graph output. Named nodes act as tap points: activations can be
/// read there and gradients can be seeded there.
class Graph {
 public:
  Graph() = default;
  Graph(std::string name, std::vector<int> input_shape);

  // Builders append one node and return its id. Shapes are inferred and
  // validated immediately; parameters are allocated zeroed.
  int conv2d(int in, int out_channels, int stride, std::string name = "");
  int tconv2d(int in, int out_channels, std::string name = "");
  int dense(int in, int width, std::string name = "");
  int maxpool2x2(int in, std::string name = "");
  int relu(int in, std::string name = "");
  int sigmoid(int in, std::string name = "");
  int batchnorm(int in, std::string name = "");
  int flatten(int in, std::string name = "");
  int reshape(int in, std::vector<int> to, std::string name = "");
  int concat(const std::vector<int>& ins, std::string name = "");

  const std::string& name() const { return name_; }
  const std::vector<int>& input_shape() const { return input_shape_; }
  int output() const { return static_cast<int>(nodes_.size()) - 1; }
  int node_id(const std::string& name) const;  // throws on unknown name
  const Node& node(int id) const { return nodes_.at(id); }
  Node& node(int id) { return nodes_.at(id); }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const std::vector<int>& out_shape(int id) const {
    return nodes_.at(id).out_shape;
  }

  /// He-normal for relu-fed conv/dense weights, Xavier-normal elsewhere,
  /// zero biases, identity batchnorm. Deterministic in `seed`.
  void init_params(uint64_t seed);
  int64_t param_count() const;
  void zero_grads();
  std::vector<Param*> params();
  /// Parameters plus batchnorm running statistics, in checkpoint order.
  std::vector<Tensor*> state_tensors();

  /// Runs the graph on a batch {N, input_shape...}. `training` selects
  /// batch statistics in batchnorm nodes and updates running estimates.
  /// Every node output is checked finite; violations raise NumericalError
  /// naming the node.
  const Tensor& forward(ExecState& st, const Tensor& x, bool training = false);

  /// Seeds `dout` at node `from` (default: the output node) and
  /// back-propagates to the graph input; returns d(functional)/d(input).
  /// Parameter gradients accumulate into Param::grad unless `param_grads`
  /// is false (attack loops only need the input gradient). Training loops
  /// pass `input_grad = false` to skip the unused first-layer input pass;
  /// the returned tensor is then stale and must not be read.
  const Tensor& backward(ExecState& st, const Tensor& dout, int from = -1,
                         bool param_grads = true, bool input_grad = true);

  const Tensor& act(const ExecState& st, int id) const;
  const Tensor& act(const ExecState& st, const std::string& name) const;

  std::string describe_node(int id) const;

 private:
  int add_node(Node n, std::string name);
  const std::vector<int>& in_shape_of(int id, int slot = 0) const;
  void check_image_input(int id, const char* who) const;

  std::string name_;
  std::vector<int> input_shape_;
  std::vector<Node> nodes_;
  std::map<std::string, int> by_name_;
};

// ---------------------------------------------------------------------------
// Losses. Each returns the scalar loss (mean over the batch) and its
// gradient with respect to the tensor it was given. Cross-entropy losses
// take pre-activation logits and fold the activation in, which keeps
// gradients exact under saturation: d/dz of the sigmoid BCE is
// sigmoid(z) - y, computed as -sigmoid(-z) for y = 1.
// ---------------------------------------------------------------------------

struct LossOut {
  double value = 0.0;
  Tensor grad;
};

/// Binary cross-entropy over sigmoid logits {N, 1}; labels in {0, 1}.
LossOut bce_with_logits(const Tensor& logits, const std::vector<int>& labels);

/// Two-way softmax cross-entropy over logits {N, 2}; labels in {0, 1}.
LossOut softmax_ce2(const Tensor& logits, const std::vector<int>& labels);

/// Mean squared error over all elements of equal-shaped tensors.
LossOut mse(const Tensor& pred, const Tensor& target);

double sigmoid(double z);
void softmax2(double z0, double z1, double& p0, double& p1);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int64_t checked_input = 0;
  int64_t checked_param = 0;
  int64_t skipped = 0;
  std::string worst;
  double seconds = 0.0;
};

/// Central-difference check of reverse-mode gradients. The functional is
/// a fixed random linear combination of the graph output, or of the
/// activation of node `from` when given (heads that saturate, like a
/// sigmoid over a large logit, are best checked at their pre-activation
/// tap). Every input coordinate is probed at x +/- h plus
/// `param_samples` sampled parameter coordinates. Probes that cross a
/// relu kink or change a pooling argmax (detected by comparing
/// smoothness signatures of the two probes) are skipped: the functional
/// is not differentiable there. Quotient rounding noise scales as
/// 1/step, so each coordinate walks a geometric ladder of steps from h
/// upward and keeps its best kink-free measurement; noise shrinks along
/// the ladder until the coordinate resolves, while a genuine analytic
/// error persists at every rung. Coordinates where both gradient
/// estimates are below 3e-6 in magnitude count as matching, as do
/// discrepancies below the quotient's own resolution (a few ulps of the
/// probe values divided by the step). Coordinates with no kink-free
/// rung are skipped.
GradCheckReport grad_check(Graph& g, const Tensor& x, uint64_t seed,
                           double h = 1e-5, int param_samples = 200,
                           const std::string& from = "");

}  // namespace spritz::nn
