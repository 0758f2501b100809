#include "spritz/models.hpp"

#include <cstring>

#include "spritz/rng.hpp"

namespace spritz::models {

Graph build_cnn2c(uint64_t seed) {
  Graph g("cnn2c", {1, kImageSide, kImageSide});
  int t = -1;
  const int group_width[4] = {6, 12, 24, 27};
  const int group_convs[4] = {3, 2, 2, 2};
  int conv_no = 0;
  for (int grp = 0; grp < 4; ++grp) {
    for (int i = 0; i < group_convs[grp]; ++i) {
      ++conv_no;
      t = g.conv2d(t, group_width[grp], 1, "conv" + std::to_string(conv_no));
      t = g.relu(t);
    }
    if (grp < 3) t = g.maxpool2x2(t, "pool" + std::to_string(grp + 1));
  }
  t = g.flatten(t, "flatten");
  if (g.out_shape(t)[0] != kFlattenWidth)
    throw ShapeError("cnn2c: flatten width " +
                     std::to_string(g.out_shape(t)[0]) + ", expected " +
                     std::to_string(kFlattenWidth));
  t = g.dense(t, 1, "logit");
  g.sigmoid(t, "prob");
  g.init_params(seed);
  return g;
}

Graph build_autoencoder(const std::string& name, uint64_t seed) {
  Graph g(name, {1, kImageSide, kImageSide});
  int t = -1;
  const int enc_width[4] = {8, 16, 16, 32};
  for (int i = 0; i < 4; ++i) {
    t = g.conv2d(t, enc_width[i], 2, "enc" + std::to_string(i + 1));
    t = g.batchnorm(t, "enc_bn" + std::to_string(i + 1));
    t = g.relu(t);
  }
  t = g.flatten(t, "enc_flat");
  if (g.out_shape(t)[0] != kLatentWidth)
    throw ShapeError(name + ": encoder flatten width " +
                     std::to_string(g.out_shape(t)[0]));
  t = g.dense(t, kLatentWidth, "latent");
  t = g.relu(t, "latent_act");
  t = g.dense(t, kLatentWidth, "dec_dense");
  t = g.relu(t);
  t = g.reshape(t, {32, 4, 4}, "dec_cube");
  const int dec_width[4] = {16, 16, 8, 8};
  for (int i = 0; i < 4; ++i) {
    t = g.tconv2d(t, dec_width[i], "dec" + std::to_string(i + 1));
    if (i == 3) t = g.batchnorm(t, "dec_bn");
    t = g.relu(t);
  }
  t = g.conv2d(t, 1, 1, "recon");
  if (g.out_shape(t) != g.input_shape())
    throw ShapeError(name + ": reconstruction shape mismatch");
  g.init_params(seed);
  return g;
}

Graph build_combiner(uint64_t seed) {
  Graph g("combiner", {kCombinerInWidth});
  int t = g.dense(-1, 128, "fc1");
  t = g.relu(t);
  g.dense(t, 2, "logits");
  g.init_params(seed);
  return g;
}

EnsembleModel build_ensemble(uint64_t master_seed) {
  EnsembleModel m;
  m.cnn2c = build_cnn2c(mix_seed(master_seed, fnv1a("cnn2c")));
  m.ae_leg = build_autoencoder("ae_leg", mix_seed(master_seed, fnv1a("ae_leg")));
  m.ae_mal = build_autoencoder("ae_mal", mix_seed(master_seed, fnv1a("ae_mal")));
  m.combiner = build_combiner(mix_seed(master_seed, fnv1a("combiner")));
  return m;
}

static Tensor one_example(const Tensor& x, int i) {
  std::vector<int> shape = x.shape;
  shape[0] = 1;
  const int64_t per = nn::numel_of(shape);
  Tensor out = Tensor::zeros(shape);
  std::memcpy(out.ptr(), x.ptr() + static_cast<int64_t>(i) * per,
              sizeof(double) * per);
  return out;
}

Tensor ensemble_features(EnsembleModel& m, const Tensor& x) {
  const int n = x.shape[0];
  Tensor out = Tensor::zeros({n, kCombinerInWidth});
  ExecState s2c, sleg, smal;
  const int flat_id = m.cnn2c.node_id("flatten");
  const int leg_id = m.ae_leg.node_id("latent");
  const int mal_id = m.ae_mal.node_id("latent");
  for (int i = 0; i < n; ++i) {
    Tensor xi = one_example(x, i);
    m.cnn2c.forward(s2c, xi);
    m.ae_leg.forward(sleg, xi);
    m.ae_mal.forward(smal, xi);
    double* row = out.ptr() + static_cast<int64_t>(i) * kCombinerInWidth;
    std::memcpy(row, m.cnn2c.act(s2c, flat_id).ptr(),
                sizeof(double) * kFlattenWidth);
    std::memcpy(row + kFlattenWidth, m.ae_leg.act(sleg, leg_id).ptr(),
                sizeof(double) * kLatentWidth);
    std::memcpy(row + kFlattenWidth + kLatentWidth,
                m.ae_mal.act(smal, mal_id).ptr(),
                sizeof(double) * kLatentWidth);
  }
  return out;
}

std::vector<double> reconstruction_error(Graph& ae, const Tensor& x) {
  const int n = x.shape[0];
  std::vector<double> errs(n);
  ExecState st;
  for (int i = 0; i < n; ++i) {
    Tensor xi = one_example(x, i);
    const Tensor& rec = ae.forward(st, xi);
    errs[i] = nn::mse(rec, xi).value;
  }
  return errs;
}

OneClassDecision oneclass_decide(Graph& ae, double threshold,
                                 const Tensor& x1) {
  OneClassDecision d;
  d.error = reconstruction_error(ae, x1).at(0);
  d.accept = d.error <= threshold;
  return d;
}

Prediction cnn2c_predict(Graph& g, const Tensor& x1) {
  ExecState st;
  g.forward(st, x1);
  const double z = g.act(st, "logit").data[0];
  Prediction p;
  p.p1 = nn::sigmoid(z);
  p.p0 = 1.0 - p.p1;
  p.label = p.p1 >= 0.5 ? 1 : 0;
  return p;
}

Prediction ensemble_predict(EnsembleModel& m, const Tensor& x1) {
  Tensor f = ensemble_features(m, x1);
  ExecState st;
  const Tensor& z = m.combiner.forward(st, f);
  Prediction p;
  nn::softmax2(z.data[0], z.data[1], p.p0, p.p1);
  p.label = p.p1 >= p.p0 ? 1 : 0;  // exact tie fails closed to H1
  return p;
}

// Appends a copy of nodes [0, upto] of `src` to `dst`, renaming with
// `prefix`; references to the source graph's input are rewired to
// `input_node` (-1 keeps the destination graph input). Returns the id of
// the copied `upto` node.
static int graft(Graph& dst, const Graph& src, int upto,
                 const std::string& prefix, int input_node = -1) {
  std::vector<int> remap(upto + 1, -1);
  for (int id = 0; id <= upto; ++id) {
    const nn::Node& n = src.node(id);
    std::vector<int> ins;
    for (int in : n.inputs) ins.push_back(in < 0 ? input_node : remap[in]);
    const std::string nm = prefix + n.name;
    int nid = -1;
    switch (n.op) {
      case nn::Op::Conv2d:
        nid = dst.conv2d(ins[0], n.out_channels, n.stride, nm);
        break;
      case nn::Op::TConv2d:
        nid = dst.tconv2d(ins[0], n.out_channels, nm);
        break;
      case nn::Op::Dense:
        nid = dst.dense(ins[0], n.out_channels, nm);
        break;
      case nn::Op::MaxPool2x2:
        nid = dst.maxpool2x2(ins[0], nm);
        break;
      case nn::Op::Relu:
        nid = dst.relu(ins[0], nm);
        break;
      case nn::Op::Sigmoid:
        nid = dst.sigmoid(ins[0], nm);
        break;
      case nn::Op::BatchNorm:
        nid = dst.batchnorm(ins[0], nm);
        break;
      case nn::Op::Flatten:
        nid = dst.flatten(ins[0], nm);
        break;
      case nn::Op::Reshape:
        nid = dst.reshape(ins[0], n.reshape_to, nm);
        break;
      case nn::Op::Concat:
        nid = dst.concat(ins, nm);
        break;
    }
    nn::Node& c = dst.node(nid);
    c.w.value = n.w.value;
    c.b.value = n.b.value;
    c.gamma.value = n.gamma.value;
    c.beta.value = n.beta.value;
    c.run_mean = n.run_mean;
    c.run_var = n.run_var;
    remap[id] = nid;
  }
  return remap[upto];
}

Graph compose_ensemble_graph(const EnsembleModel& m) {
  Graph g("ensemble", {1, kImageSide, kImageSide});
  const int flat = graft(g, m.cnn2c, m.cnn2c.node_id("flatten"), "c2_");
  const int leg = graft(g, m.ae_leg, m.ae_leg.node_id("latent"), "leg_");
  const int mal = graft(g, m.ae_mal, m.ae_mal.node_id("latent"), "mal_");
  const int feats = g.concat({flat, leg, mal}, "features");
  graft(g, m.combiner, m.combiner.output(), "cmb_", feats);
  return g;
}

}  // namespace spritz::models
