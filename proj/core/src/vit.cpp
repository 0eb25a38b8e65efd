#include "topo/vit.hpp"

#include "topo/datagen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

namespace topo::vit {

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowArr = Eigen::Array<T, 1, Eigen::Dynamic>;

// ---- configuration ----------------------------------------------------------------

void ModelConfig::validate() const {
  if (embed_dim < 1 || num_layers < 0 || num_heads < 1) throw std::invalid_argument("model: non-positive size");
  if (embed_dim % num_heads != 0) throw std::invalid_argument("model: embed_dim must be divisible by num_heads");
  if (patch_size < 1 || nx % patch_size != 0 || ny % patch_size != 0) {
    throw std::invalid_argument("model: patch_size must divide the grid");
  }
  if (in_channels < 1 || mlp_ratio < 1) throw std::invalid_argument("model: invalid channel or MLP size");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("model: mask_ratio must lie in [0, 1)");
  if (cond_features < 1) throw std::invalid_argument("model: cond_features must be positive");
}

ModelConfig ModelConfig::preset(std::string_view name, int patch_size) {
  static const std::map<std::string, std::array<int, 3>, std::less<>> table{
      {"tiny", {192, 12, 3}},   {"small", {384, 12, 6}},   {"base", {768, 12, 12}},
      {"large", {1024, 24, 16}}, {"huge", {1280, 32, 16}},
  };
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown model preset '" + std::string(name) + "'");
  ModelConfig c;
  c.name = it->first;
  c.embed_dim = it->second[0];
  c.num_layers = it->second[1];
  c.num_heads = it->second[2];
  c.patch_size = patch_size;
  c.validate();
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"name", c.name},           {"embed_dim", c.embed_dim},   {"num_layers", c.num_layers},
          {"num_heads", c.num_heads}, {"patch_size", c.patch_size}, {"in_channels", c.in_channels},
          {"nx", c.nx},               {"ny", c.ny},                 {"mlp_ratio", c.mlp_ratio},
          {"mask_ratio", c.mask_ratio}, {"cond_features", c.cond_features}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.name = j.value("name", std::string("custom"));
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.in_channels = j.value("in_channels", 2);
  c.nx = j.value("nx", 64);
  c.ny = j.value("ny", 64);
  c.mlp_ratio = j.value("mlp_ratio", 4);
  c.mask_ratio = j.value("mask_ratio", 0.0);
  c.cond_features = j.value("cond_features", kStaticCondFeatures);
  c.validate();
  return c;
}

// ---- parameter layout -----------------------------------------------------------------

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int D = c.embed_dim;
  const int H = c.hidden_dim();
  add("patch_embed.weight", {D, c.patch_dim()});
  add("patch_embed.bias", {D});
  add("pos_embed", {c.num_patches(), D});
  add("mask_token", {D});
  add("cond.fc1.weight", {D, c.cond_features});
  add("cond.fc1.bias", {D});
  add("cond.fc2.weight", {D, D});
  add("cond.fc2.bias", {D});
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "norm1.weight", {D});
    add(p + "norm1.bias", {D});
    add(p + "attn.qkv.weight", {3 * D, D});
    add(p + "attn.qkv.bias", {3 * D});
    add(p + "attn.proj.weight", {D, D});
    add(p + "attn.proj.bias", {D});
    add(p + "norm2.weight", {D});
    add(p + "norm2.bias", {D});
    add(p + "mlp.fc1.weight", {H, D});
    add(p + "mlp.fc1.bias", {H});
    add(p + "mlp.fc2.weight", {D, H});
    add(p + "mlp.fc2.bias", {D});
  }
  add("norm.weight", {D});
  add("norm.bias", {D});
  add("head.weight", {c.patch_size * c.patch_size, D});
  add("head.bias", {c.patch_size * c.patch_size});
}

void ParamLayout::add(std::string name, std::vector<int> shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  entries_.push_back({std::move(name), std::move(shape), total_, n});
  total_ += n;
}

const ParamInfo& ParamLayout::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

bool ParamLayout::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamInfo& e) { return e.name == name; });
}

// ---- small kernels -------------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-6;

template <class T>
using CMap = Eigen::Map<const Mat<T>>;
template <class T>
using MMap = Eigen::Map<Mat<T>>;

template <class T>
CMap<T> weight(const ParamVec<T>& p, const ParamInfo& info) {
  return CMap<T>(p.data() + info.offset, info.shape[0], info.shape[1]);
}

template <class T>
Eigen::Map<const RowArr<T>> row(const ParamVec<T>& p, const ParamInfo& info) {
  return Eigen::Map<const RowArr<T>>(p.data() + info.offset, static_cast<Eigen::Index>(info.size));
}

template <class T>
MMap<T> gweight(ParamVec<T>& g, const ParamInfo& info) {
  return MMap<T>(g.data() + info.offset, info.shape[0], info.shape[1]);
}

template <class T>
Eigen::Map<RowArr<T>> grow(ParamVec<T>& g, const ParamInfo& info) {
  return Eigen::Map<RowArr<T>>(g.data() + info.offset, static_cast<Eigen::Index>(info.size));
}

// y = x W^T + b
template <class T>
Mat<T> linear(const Mat<T>& x, const CMap<T>& w, const Eigen::Map<const RowArr<T>>& b) {
  Mat<T> y(x.rows(), w.rows());
  y.noalias() = x * w.transpose();
  y.array().rowwise() += b;
  return y;
}

template <class T>
void linear_backward(const Mat<T>& x, const Mat<T>& dy, const CMap<T>& w, MMap<T> dw, Eigen::Map<RowArr<T>> db,
                     Mat<T>* dx) {
  dw.noalias() += dy.transpose() * x;
  db += dy.colwise().sum().array();
  if (dx) dx->noalias() = dy * w;
}

// Row-wise normalization; returns the normalized rows and fills 1/std.
template <class T>
Mat<T> normalize_rows(const Mat<T>& x, Vec<T>& rstd) {
  const Eigen::Index d = x.cols();
  Mat<T> out(x.rows(), d);
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).sum() / static_cast<T>(d);
    const auto centred = (x.row(r).array() - mean).eval();
    const T var = centred.square().sum() / static_cast<T>(d);
    const T s = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[r] = s;
    out.row(r) = centred * s;
  }
  return out;
}

template <class T>
Mat<T> affine_rows(const Mat<T>& xhat, const Eigen::Map<const RowArr<T>>& g, const Eigen::Map<const RowArr<T>>& b) {
  Mat<T> y = xhat;
  y.array().rowwise() *= g;
  y.array().rowwise() += b;
  return y;
}

// Backward through y = xhat * g + b with xhat = (x - mean) * rstd.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& xhat, const Vec<T>& rstd, const Mat<T>& dy,
                           const Eigen::Map<const RowArr<T>>& g, Eigen::Map<RowArr<T>> dg, Eigen::Map<RowArr<T>> db) {
  dg += (dy.array() * xhat.array()).colwise().sum();
  db += dy.colwise().sum().array();
  Mat<T> dxhat = dy;
  dxhat.array().rowwise() *= g;
  const T inv_d = T(1) / static_cast<T>(xhat.cols());
  Mat<T> dx(xhat.rows(), xhat.cols());
  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
    const T m1 = dxhat.row(r).sum() * inv_d;
    const T m2 = dxhat.row(r).dot(xhat.row(r)) * inv_d;
    dx.row(r) = rstd[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

// tanh-form GELU
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <class T>
Mat<T> gelu(const Mat<T>& x) {
  const auto a = x.array();
  const auto t = (T(kGeluC) * (a + T(kGeluA) * a.cube())).tanh();
  return (T(0.5) * a * (T(1) + t)).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  const auto a = x.array();
  const auto t = (T(kGeluC) * (a + T(kGeluA) * a.cube())).tanh().eval();
  const auto d = T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * T(kGeluC) * (T(1) + T(3 * kGeluA) * a.square());
  return (dy.array() * d).matrix();
}

// Attention of one sequence slice. `qkv` rows [r0, r0+S) hold Q|K|V.
template <class T>
void attention_core(const Mat<T>& qkv, Eigen::Index r0, int S, int D, int heads, Mat<T>& out,
                    std::vector<Mat<T>>* probs, std::size_t probs_base) {
  const int dk = D / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  Mat<T> scores(S, S);
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv.block(r0, h * dk, S, dk);
    const auto k = qkv.block(r0, D + h * dk, S, dk);
    const auto v = qkv.block(r0, 2 * D + h * dk, S, dk);
    scores.noalias() = q * k.transpose();
    scores *= scale;
    const Vec<T> mx = scores.rowwise().maxCoeff();
    scores = (scores.colwise() - mx).array().exp().matrix();
    const Vec<T> inv = scores.rowwise().sum().cwiseInverse();
    scores = inv.asDiagonal() * scores;
    out.block(r0, h * dk, S, dk).noalias() = scores * v;
    if (probs) (*probs)[probs_base + static_cast<std::size_t>(h)] = scores;
  }
}

template <class T>
void attention_core_backward(const Mat<T>& qkv, Eigen::Index r0, int S, int D, int heads, const Mat<T>& d_out,
                             const std::vector<Mat<T>>& probs, std::size_t probs_base, Mat<T>& d_qkv) {
  const int dk = D / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  Mat<T> dp(S, S);
  for (int h = 0; h < heads; ++h) {
    const Mat<T>& p = probs[probs_base + static_cast<std::size_t>(h)];
    const auto q = qkv.block(r0, h * dk, S, dk);
    const auto k = qkv.block(r0, D + h * dk, S, dk);
    const auto v = qkv.block(r0, 2 * D + h * dk, S, dk);
    const auto go = d_out.block(r0, h * dk, S, dk);
    dp.noalias() = go * v.transpose();
    d_qkv.block(r0, 2 * D + h * dk, S, dk).noalias() = p.transpose() * go;
    const Vec<T> rs = (dp.array() * p.array()).rowwise().sum();
    dp = (p.array() * (dp.colwise() - rs).array()).matrix();
    dp *= scale;
    d_qkv.block(r0, h * dk, S, dk).noalias() = dp * k;
    d_qkv.block(r0, D + h * dk, S, dk).noalias() = dp.transpose() * q;
  }
}

template <class T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

}  // namespace

// ---- model -------------------------------------------------------------------------------

template <class T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)), layout_(config_), params_(layout_.total(), T(0)) {
  for (const auto& e : layout_.entries()) {
    if (e.name.ends_with("norm1.weight") || e.name.ends_with("norm2.weight") || e.name == "norm.weight") {
      std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size, T(1));
    }
  }
}

template <class T>
std::span<T> Model<T>::param(std::string_view name) {
  const auto& e = layout_.at(name);
  return {params_.data() + e.offset, e.size};
}

template <class T>
std::span<const T> Model<T>::param(std::string_view name) const {
  const auto& e = layout_.at(name);
  return {params_.data() + e.offset, e.size};
}

template <class T>
void Model<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& e : layout_.entries()) {
    auto* p = params_.data() + e.offset;
    const bool gain = e.name.ends_with("norm1.weight") || e.name.ends_with("norm2.weight") || e.name == "norm.weight";
    if (gain) {
      std::fill_n(p, e.size, T(1));
    } else if (e.name == "pos_embed" || e.name == "mask_token") {
      for (std::size_t k = 0; k < e.size; ++k) p[k] = static_cast<T>(0.02 * normal(rng));
    } else if (e.shape.size() == 2) {
      int fan_out = e.shape[0];
      const int fan_in = e.shape[1];
      if (e.name.ends_with("attn.qkv.weight")) fan_out /= 3;
      const double sd = std::sqrt(2.0 / (fan_in + fan_out));
      for (std::size_t k = 0; k < e.size; ++k) p[k] = static_cast<T>(sd * normal(rng));
    } else {
      std::fill_n(p, e.size, T(0));
    }
  }
}

template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> Model<T>::cond_token(std::span<const T> features) const {
  const int D = config_.embed_dim;
  const int F = config_.cond_features;
  if (static_cast<int>(features.size()) != F) {
    throw std::invalid_argument("conditioning vector has " + std::to_string(features.size()) + " features, model expects " +
                                std::to_string(F));
  }
  const auto& w1 = layout_.at("cond.fc1.weight");
  const auto& b1 = layout_.at("cond.fc1.bias");
  Mat<T> h(1, D);
  // Explicit ascending-order sum: appending zero-weight inputs leaves every
  // partial sum, and therefore the result, bit-identical.
  for (int i = 0; i < D; ++i) {
    T acc = params_[b1.offset + static_cast<std::size_t>(i)];
    for (int j = 0; j < F; ++j) acc += params_[w1.offset + static_cast<std::size_t>(i) * F + j] * features[static_cast<std::size_t>(j)];
    h(0, i) = acc;
  }
  const Mat<T> a = gelu(h);
  const Mat<T> c = linear<T>(a, weight(params_, layout_.at("cond.fc2.weight")), row(params_, layout_.at("cond.fc2.bias")));
  return c.row(0).transpose();
}

template <class T>
Mat<T> Model<T>::embed(const Batch<T>& batch) const {
  const int B = batch.size;
  const int N = config_.num_patches();
  const int S = config_.seq_len();
  const int D = config_.embed_dim;
  if (batch.patches.rows() != static_cast<Eigen::Index>(B) * N || batch.patches.cols() != config_.patch_dim()) {
    throw std::invalid_argument("batch patches do not match the model config");
  }
  if (batch.cond.rows() != B || batch.cond.cols() != config_.cond_features) {
    throw std::invalid_argument("conditioning vector width " + std::to_string(batch.cond.cols()) +
                                " does not match the model (" + std::to_string(config_.cond_features) + ")");
  }
  const Mat<T> e = linear<T>(batch.patches, weight(params_, layout_.at("patch_embed.weight")),
                             row(params_, layout_.at("patch_embed.bias")));
  const CMap<T> pos = weight(params_, layout_.at("pos_embed"));
  const auto mask = row(params_, layout_.at("mask_token"));
  Mat<T> x(static_cast<Eigen::Index>(B) * S, D);
  for (int b = 0; b < B; ++b) {
    std::vector<T> f(batch.cond.row(b).data(), batch.cond.row(b).data() + batch.cond.cols());
    x.row(static_cast<Eigen::Index>(b) * S) = cond_token(f).transpose();
    x.block(static_cast<Eigen::Index>(b) * S + 1, 0, N, D) = e.block(static_cast<Eigen::Index>(b) * N, 0, N, D) + pos;
    if (b < static_cast<int>(batch.masked.size())) {
      for (int i : batch.masked[static_cast<std::size_t>(b)]) {
        x.row(static_cast<Eigen::Index>(b) * S + 1 + i) = mask.matrix() + pos.row(i);
      }
    }
  }
  return x;
}

template <class T>
Mat<T> Model<T>::run_block(int l, const Mat<T>& tokens) const {
  const int D = config_.embed_dim;
  const std::string p = "blocks." + std::to_string(l) + ".";
  Vec<T> rstd;
  Mat<T> x = tokens;
  const Mat<T> ln1 = affine_rows<T>(normalize_rows<T>(x, rstd), row(params_, layout_.at(p + "norm1.weight")),
                                    row(params_, layout_.at(p + "norm1.bias")));
  const Mat<T> qkv = linear<T>(ln1, weight(params_, layout_.at(p + "attn.qkv.weight")), row(params_, layout_.at(p + "attn.qkv.bias")));
  Mat<T> attn(x.rows(), D);
  attention_core<T>(qkv, 0, static_cast<int>(x.rows()), D, config_.num_heads, attn, nullptr, 0);
  x += linear<T>(attn, weight(params_, layout_.at(p + "attn.proj.weight")), row(params_, layout_.at(p + "attn.proj.bias")));
  const Mat<T> ln2 = affine_rows<T>(normalize_rows<T>(x, rstd), row(params_, layout_.at(p + "norm2.weight")),
                                    row(params_, layout_.at(p + "norm2.bias")));
  const Mat<T> h = linear<T>(ln2, weight(params_, layout_.at(p + "mlp.fc1.weight")), row(params_, layout_.at(p + "mlp.fc1.bias")));
  x += linear<T>(gelu(h), weight(params_, layout_.at(p + "mlp.fc2.weight")), row(params_, layout_.at(p + "mlp.fc2.bias")));
  return x;
}

template <class T>
const Mat<T>& Model<T>::forward(const Batch<T>& batch, Cache<T>& cache) const {
  const auto& c = config_;
  const int B = batch.size;
  const int N = c.num_patches();
  const int S = c.seq_len();
  const int D = c.embed_dim;
  const int P = c.patch_size;
  const auto& L = layout_;

  Mat<T> x = embed(batch);
  cache.batch = B;
  cache.valid = false;
  // conditioning intermediates for backward
  cache.cond_hidden.resize(B, D);
  {
    const auto& w1 = L.at("cond.fc1.weight");
    const auto& b1 = L.at("cond.fc1.bias");
    const int F = c.cond_features;
    for (int b = 0; b < B; ++b) {
      for (int i = 0; i < D; ++i) {
        T acc = params_[b1.offset + static_cast<std::size_t>(i)];
        for (int j = 0; j < F; ++j) acc += params_[w1.offset + static_cast<std::size_t>(i) * F + j] * batch.cond(b, j);
        cache.cond_hidden(b, i) = acc;
      }
    }
    cache.cond_act = gelu(cache.cond_hidden);
  }

  cache.layers.resize(static_cast<std::size_t>(c.num_layers));
  for (int l = 0; l < c.num_layers; ++l) {
    auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    lc.ln1 = normalize_rows<T>(x, lc.rstd1);
    const Mat<T> y1 = affine_rows<T>(lc.ln1, row(params_, L.at(p + "norm1.weight")), row(params_, L.at(p + "norm1.bias")));
    lc.qkv = linear<T>(y1, weight(params_, L.at(p + "attn.qkv.weight")), row(params_, L.at(p + "attn.qkv.bias")));
    lc.attn.resize(x.rows(), D);
    lc.probs.resize(static_cast<std::size_t>(B) * c.num_heads);
    for (int b = 0; b < B; ++b) {
      attention_core<T>(lc.qkv, static_cast<Eigen::Index>(b) * S, S, D, c.num_heads, lc.attn, &lc.probs,
                        static_cast<std::size_t>(b) * c.num_heads);
    }
    x.noalias() += linear<T>(lc.attn, weight(params_, L.at(p + "attn.proj.weight")), row(params_, L.at(p + "attn.proj.bias")));
    lc.ln2 = normalize_rows<T>(x, lc.rstd2);
    const Mat<T> y2 = affine_rows<T>(lc.ln2, row(params_, L.at(p + "norm2.weight")), row(params_, L.at(p + "norm2.bias")));
    lc.hidden = linear<T>(y2, weight(params_, L.at(p + "mlp.fc1.weight")), row(params_, L.at(p + "mlp.fc1.bias")));
    lc.act = gelu(lc.hidden);
    x.noalias() += linear<T>(lc.act, weight(params_, L.at(p + "mlp.fc2.weight")), row(params_, L.at(p + "mlp.fc2.bias")));
  }

  cache.final_norm = normalize_rows<T>(x, cache.final_rstd);
  const Mat<T> y = affine_rows<T>(cache.final_norm, row(params_, L.at("norm.weight")), row(params_, L.at("norm.bias")));
  cache.head_in.resize(static_cast<Eigen::Index>(B) * N, D);
  for (int b = 0; b < B; ++b) {
    cache.head_in.block(static_cast<Eigen::Index>(b) * N, 0, N, D) = y.block(static_cast<Eigen::Index>(b) * S + 1, 0, N, D);
  }
  const Mat<T> z = linear<T>(cache.head_in, weight(params_, L.at("head.weight")), row(params_, L.at("head.bias")));

  const int px = c.patches_x();
  cache.output.resize(B, c.nx * c.ny);
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < N; ++n) {
      const int pi = n % px, pj = n / px;
      for (int r = 0; r < P; ++r) {
        for (int col = 0; col < P; ++col) {
          const int idx = (pj * P + r) * c.nx + pi * P + col;
          cache.output(b, idx) = sigmoid(z(static_cast<Eigen::Index>(b) * N + n, r * P + col));
        }
      }
    }
  }
  cache.valid = true;
  return cache.output;
}

template <class T>
void Model<T>::backward(const Batch<T>& batch, const Cache<T>& cache, const Mat<T>& d_output, ParamVec<T>& grads) const {
  if (!cache.valid || cache.batch != batch.size) throw std::logic_error("backward needs the intermediates of a forward pass");
  if (d_output.rows() != batch.size || d_output.cols() != cache.output.cols()) {
    throw std::invalid_argument("output gradient shape mismatch");
  }
  if (grads.size() != params_.size()) grads.assign(params_.size(), T(0));
  const auto& c = config_;
  const auto& L = layout_;
  const int B = batch.size;
  const int N = c.num_patches();
  const int S = c.seq_len();
  const int D = c.embed_dim;
  const int P = c.patch_size;
  const int px = c.patches_x();

  // logistic + unpatchify
  Mat<T> dz(static_cast<Eigen::Index>(B) * N, P * P);
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < N; ++n) {
      const int pi = n % px, pj = n / px;
      for (int r = 0; r < P; ++r) {
        for (int col = 0; col < P; ++col) {
          const int idx = (pj * P + r) * c.nx + pi * P + col;
          const T o = cache.output(b, idx);
          dz(static_cast<Eigen::Index>(b) * N + n, r * P + col) = d_output(b, idx) * o * (T(1) - o);
        }
      }
    }
  }
  Mat<T> d_head_in;
  linear_backward<T>(cache.head_in, dz, weight(params_, L.at("head.weight")), gweight(grads, L.at("head.weight")),
                     grow(grads, L.at("head.bias")), &d_head_in);
  Mat<T> dy = Mat<T>::Zero(static_cast<Eigen::Index>(B) * S, D);
  for (int b = 0; b < B; ++b) {
    dy.block(static_cast<Eigen::Index>(b) * S + 1, 0, N, D) = d_head_in.block(static_cast<Eigen::Index>(b) * N, 0, N, D);
  }
  Mat<T> dx = layer_norm_backward<T>(cache.final_norm, cache.final_rstd, dy, row(params_, L.at("norm.weight")),
                                     grow(grads, L.at("norm.weight")), grow(grads, L.at("norm.bias")));

  for (int l = c.num_layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    // MLP branch
    {
      Mat<T> d_act;
      linear_backward<T>(lc.act, dx, weight(params_, L.at(p + "mlp.fc2.weight")), gweight(grads, L.at(p + "mlp.fc2.weight")),
                         grow(grads, L.at(p + "mlp.fc2.bias")), &d_act);
      const Mat<T> d_hidden = gelu_backward<T>(lc.hidden, d_act);
      Mat<T> y2 = affine_rows<T>(lc.ln2, row(params_, L.at(p + "norm2.weight")), row(params_, L.at(p + "norm2.bias")));
      Mat<T> d_y2;
      linear_backward<T>(y2, d_hidden, weight(params_, L.at(p + "mlp.fc1.weight")), gweight(grads, L.at(p + "mlp.fc1.weight")),
                         grow(grads, L.at(p + "mlp.fc1.bias")), &d_y2);
      dx += layer_norm_backward<T>(lc.ln2, lc.rstd2, d_y2, row(params_, L.at(p + "norm2.weight")),
                                   grow(grads, L.at(p + "norm2.weight")), grow(grads, L.at(p + "norm2.bias")));
    }
    // attention branch
    {
      Mat<T> d_attn;
      linear_backward<T>(lc.attn, dx, weight(params_, L.at(p + "attn.proj.weight")), gweight(grads, L.at(p + "attn.proj.weight")),
                         grow(grads, L.at(p + "attn.proj.bias")), &d_attn);
      Mat<T> d_qkv(lc.qkv.rows(), lc.qkv.cols());
      for (int b = 0; b < B; ++b) {
        attention_core_backward<T>(lc.qkv, static_cast<Eigen::Index>(b) * S, S, D, c.num_heads, d_attn, lc.probs,
                                   static_cast<std::size_t>(b) * c.num_heads, d_qkv);
      }
      Mat<T> y1 = affine_rows<T>(lc.ln1, row(params_, L.at(p + "norm1.weight")), row(params_, L.at(p + "norm1.bias")));
      Mat<T> d_y1;
      linear_backward<T>(y1, d_qkv, weight(params_, L.at(p + "attn.qkv.weight")), gweight(grads, L.at(p + "attn.qkv.weight")),
                         grow(grads, L.at(p + "attn.qkv.bias")), &d_y1);
      dx += layer_norm_backward<T>(lc.ln1, lc.rstd1, d_y1, row(params_, L.at(p + "norm1.weight")),
                                   grow(grads, L.at(p + "norm1.weight")), grow(grads, L.at(p + "norm1.bias")));
    }
  }

  // embedding
  auto d_pos = gweight(grads, L.at("pos_embed"));
  auto d_mask = grow(grads, L.at("mask_token"));
  Mat<T> d_embed(static_cast<Eigen::Index>(B) * N, D);
  Mat<T> d_cond(B, D);
  for (int b = 0; b < B; ++b) {
    d_cond.row(b) = dx.row(static_cast<Eigen::Index>(b) * S);
    const auto tokens = dx.block(static_cast<Eigen::Index>(b) * S + 1, 0, N, D);
    d_pos += tokens;
    d_embed.block(static_cast<Eigen::Index>(b) * N, 0, N, D) = tokens;
    if (b < static_cast<int>(batch.masked.size())) {
      for (int i : batch.masked[static_cast<std::size_t>(b)]) {
        d_mask += tokens.row(i).array();
        d_embed.row(static_cast<Eigen::Index>(b) * N + i).setZero();
      }
    }
  }
  linear_backward<T>(batch.patches, d_embed, weight(params_, L.at("patch_embed.weight")),
                     gweight(grads, L.at("patch_embed.weight")), grow(grads, L.at("patch_embed.bias")), nullptr);

  Mat<T> d_cond_act;
  linear_backward<T>(cache.cond_act, d_cond, weight(params_, L.at("cond.fc2.weight")), gweight(grads, L.at("cond.fc2.weight")),
                     grow(grads, L.at("cond.fc2.bias")), &d_cond_act);
  const Mat<T> d_cond_hidden = gelu_backward<T>(cache.cond_hidden, d_cond_act);
  linear_backward<T>(batch.cond, d_cond_hidden, weight(params_, L.at("cond.fc1.weight")),
                     gweight(grads, L.at("cond.fc1.weight")), grow(grads, L.at("cond.fc1.bias")), nullptr);
}

template <class T>
template <class U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_);
  for (std::size_t k = 0; k < params_.size(); ++k) out.params()[k] = static_cast<U>(params_[k]);
  return out;
}

template <class T>
Mat<T> self_attention(const Mat<T>& x, const Mat<T>& wq, const Mat<T>& wk, const Mat<T>& wv, const Mat<T>& wo, int heads,
                      std::vector<Mat<T>>* probs) {
  const auto D = x.cols();
  if (D % heads != 0) throw std::invalid_argument("embedding width must be divisible by the head count");
  Mat<T> qkv(x.rows(), 3 * D);
  qkv.leftCols(D).noalias() = x * wq.transpose();
  qkv.middleCols(D, D).noalias() = x * wk.transpose();
  qkv.rightCols(D).noalias() = x * wv.transpose();
  Mat<T> attn(x.rows(), D);
  if (probs) probs->resize(static_cast<std::size_t>(heads));
  attention_core<T>(qkv, 0, static_cast<int>(x.rows()), static_cast<int>(D), heads, attn, probs, 0);
  return attn * wo.transpose();
}

// ---- inputs --------------------------------------------------------------------------------

template <class T>
Mat<T> patchify(std::span<const float> channels, int C, int nx, int ny, int P) {
  if (P < 1 || nx % P != 0 || ny % P != 0) throw std::invalid_argument("patchify: patch size must divide the grid");
  const std::size_t cells = static_cast<std::size_t>(nx) * ny;
  if (channels.size() != cells * C) throw std::invalid_argument("patchify: channel data does not match the grid");
  const int px = nx / P, py = ny / P;
  Mat<T> out(px * py, P * P * C);
  for (int pj = 0; pj < py; ++pj) {
    for (int pi = 0; pi < px; ++pi) {
      const int n = pj * px + pi;
      for (int ch = 0; ch < C; ++ch) {
        for (int r = 0; r < P; ++r) {
          for (int col = 0; col < P; ++col) {
            const std::size_t src = ch * cells + static_cast<std::size_t>(pj * P + r) * nx + pi * P + col;
            out(n, ch * P * P + r * P + col) = static_cast<T>(channels[src]);
          }
        }
      }
    }
  }
  return out;
}

template <class T>
std::vector<T> unpatchify(const Mat<T>& patches, int nx, int ny, int P) {
  const int px = nx / P, py = ny / P;
  if (patches.rows() != px * py || patches.cols() != P * P) throw std::invalid_argument("unpatchify: shape mismatch");
  std::vector<T> out(static_cast<std::size_t>(nx) * ny);
  for (int n = 0; n < px * py; ++n) {
    const int pi = n % px, pj = n / px;
    for (int r = 0; r < P; ++r)
      for (int col = 0; col < P; ++col) out[static_cast<std::size_t>(pj * P + r) * nx + pi * P + col] = patches(n, r * P + col);
  }
  return out;
}

std::vector<double> conditioning_vector(const ProblemSpec& spec, int nx, int ny,
                                        const std::optional<std::array<double, 10>>& fft, bool dynamic_width) {
  const auto n = load_node(spec, nx, ny);
  std::vector<double> v{spec.volume_fraction, static_cast<double>(n.x) / nx, static_cast<double>(n.y) / ny, spec.fx,
                        spec.fy};
  v.resize(kStaticCondFeatures, 0.0);
  for (int g : spec.bc_groups) v[5 + static_cast<std::size_t>(g)] = 1.0;
  if (dynamic_width || fft) {
    v.resize(kDynamicCondFeatures, 0.0);
    if (fft) std::copy(fft->begin(), fft->end(), v.begin() + kStaticCondFeatures);
  }
  return v;
}

std::vector<double> conditioning_vector(const data::Sample& s, bool dynamic_width) {
  std::vector<double> v{s.vf, s.load_x, s.load_y, s.fx, s.fy};
  v.resize(kStaticCondFeatures, 0.0);
  for (auto g : s.bc_groups) v[5 + static_cast<std::size_t>(g)] = 1.0;
  if (dynamic_width) {
    v.resize(kDynamicCondFeatures, 0.0);
    std::copy(s.fft.begin(), s.fft.end(), v.begin() + kStaticCondFeatures);
  }
  return v;
}

std::vector<int> choose_mask(int n, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in [0, 1)");
  const int k = static_cast<int>(std::floor(ratio * n));
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(n - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
Batch<T> make_batch(const ModelConfig& c, std::span<const data::Sample* const> samples, std::span<const int> symmetry,
                    std::uint64_t mask_seed) {
  const int B = static_cast<int>(samples.size());
  const int N = c.num_patches();
  const bool dynamic = c.cond_features == kDynamicCondFeatures;
  Batch<T> batch;
  batch.size = B;
  batch.patches.resize(static_cast<Eigen::Index>(B) * N, c.patch_dim());
  batch.cond.resize(B, c.cond_features);
  batch.masked.resize(static_cast<std::size_t>(B));
  const std::size_t cells = static_cast<std::size_t>(c.nx) * c.ny;
  std::vector<float> chan(2 * cells);
  for (int b = 0; b < B; ++b) {
    const data::Sample* s = samples[static_cast<std::size_t>(b)];
    data::Sample moved;
    if (!symmetry.empty() && symmetry[static_cast<std::size_t>(b)] != 0) {
      moved = data::apply_symmetry(*s, data::Symmetry::all()[static_cast<std::size_t>(symmetry[static_cast<std::size_t>(b)])], c.nx);
      s = &moved;
    }
    if (s->von_mises.size() != cells) throw std::invalid_argument("sample grid does not match the model");
    std::copy(s->von_mises.begin(), s->von_mises.end(), chan.begin());
    std::copy(s->strain_energy.begin(), s->strain_energy.end(), chan.begin() + static_cast<std::ptrdiff_t>(cells));
    batch.patches.block(static_cast<Eigen::Index>(b) * N, 0, N, c.patch_dim()) = patchify<T>(chan, 2, c.nx, c.ny, c.patch_size);
    const auto cond = conditioning_vector(*s, dynamic);
    if (static_cast<int>(cond.size()) != c.cond_features) throw std::invalid_argument("conditioning width mismatch");
    for (int j = 0; j < c.cond_features; ++j) batch.cond(b, j) = static_cast<T>(cond[static_cast<std::size_t>(j)]);
    if (c.mask_ratio > 0.0) batch.masked[static_cast<std::size_t>(b)] = choose_mask(N, c.mask_ratio, data::derive_seed(mask_seed, b));
  }
  return batch;
}

template <class T>
Batch<T> make_batch(const ModelConfig& c, const fea::FieldMaps& fields, std::span<const double> cond) {
  if (fields.nx != c.nx || fields.ny != c.ny) throw std::invalid_argument("field grid does not match the model");
  if (static_cast<int>(cond.size()) != c.cond_features) {
    throw std::invalid_argument("conditioning vector has " + std::to_string(cond.size()) + " features, model expects " +
                                std::to_string(c.cond_features));
  }
  std::vector<float> chan(fields.von_mises.begin(), fields.von_mises.end());
  chan.insert(chan.end(), fields.strain_energy.begin(), fields.strain_energy.end());
  Batch<T> batch;
  batch.size = 1;
  batch.patches = patchify<T>(chan, 2, c.nx, c.ny, c.patch_size);
  batch.cond.resize(1, c.cond_features);
  for (int j = 0; j < c.cond_features; ++j) batch.cond(0, j) = static_cast<T>(cond[static_cast<std::size_t>(j)]);
  batch.masked.resize(1);
  return batch;
}

fea::DensityField predict(const Model<float>& model, const fea::FieldMaps& fields, std::span<const double> cond) {
  const auto batch = make_batch<float>(model.config(), fields, cond);
  Cache<float> cache;
  const auto& out = model.forward(batch, cache);
  fea::DensityField d;
  d.nx = model.config().nx;
  d.ny = model.config().ny;
  d.values.assign(out.data(), out.data() + out.cols());
  return d;
}

// ---- checkpoints ------------------------------------------------------------------------------

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  std::string buf("TOPW", 4);
  auto put32 = [&](std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); };
  put32(kCheckpointVersion);
  const std::string cfg = to_json(model.config()).dump();
  put32(static_cast<std::uint32_t>(cfg.size()));
  buf += cfg;
  for (const auto& e : model.layout().entries()) {
    const auto len = static_cast<std::uint16_t>(e.name.size());
    buf.append(reinterpret_cast<const char*>(&len), 2);
    buf += e.name;
    put32(static_cast<std::uint32_t>(e.shape.size()));
    for (int s : e.shape) put32(static_cast<std::uint32_t>(s));
    for (std::size_t k = 0; k < e.size; ++k) {
      const float f = static_cast<float>(model.params()[e.offset + k]);
      buf.append(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (data.size() - pos < n) throw CheckpointError(std::string("checkpoint truncated in ") + what);
  };
  auto get32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, data.data() + pos, 4);
    pos += 4;
    return v;
  };
  need(4, "header");
  if (data.compare(0, 4, "TOPW") != 0) throw CheckpointError("not a checkpoint (bad magic)");
  pos = 4;
  const auto version = get32("header");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = get32("header");
  need(cfg_len, "config");
  ModelConfig config;
  try {
    config = config_from_json(nlohmann::json::parse(data.substr(pos, cfg_len)));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
  }
  pos += cfg_len;
  Model<float> model(config);
  std::vector<bool> seen(model.layout().entries().size(), false);
  while (pos < data.size()) {
    need(2, "record name");
    std::uint16_t len;
    std::memcpy(&len, data.data() + pos, 2);
    pos += 2;
    need(len, "record name");
    const std::string name = data.substr(pos, len);
    pos += len;
    if (!model.layout().contains(name)) throw CheckpointError("unexpected parameter '" + name + "'");
    const auto& e = model.layout().at(name);
    const auto rank = get32("record shape");
    std::vector<int> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get32("record shape")));
    if (shape != e.shape) throw CheckpointError("shape mismatch for '" + name + "'");
    need(e.size * 4, name.c_str());
    std::memcpy(model.params().data() + e.offset, data.data() + pos, e.size * 4);
    pos += e.size * 4;
    seen[static_cast<std::size_t>(&e - model.layout().entries().data())] = true;
  }
  for (std::size_t k = 0; k < seen.size(); ++k) {
    if (!seen[k]) throw CheckpointError("checkpoint is missing '" + model.layout().entries()[k].name + "'");
  }
  return model;
}

template <class T>
Model<T> widen_conditioning(const Model<T>& model, int features) {
  const int old_f = model.config().cond_features;
  if (features < old_f) throw std::invalid_argument("cannot narrow the conditioning input");
  ModelConfig c = model.config();
  c.cond_features = features;
  Model<T> out(c);
  for (const auto& e : out.layout().entries()) {
    const auto src = model.param(e.name);
    auto dst = out.param(e.name);
    if (e.name == "cond.fc1.weight") {
      const int D = c.embed_dim;
      for (int i = 0; i < D; ++i) {
        for (int j = 0; j < features; ++j) {
          dst[static_cast<std::size_t>(i) * features + j] = j < old_f ? src[static_cast<std::size_t>(i) * old_f + j] : T(0);
        }
      }
    } else {
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return out;
}

// ---- instantiations ----------------------------------------------------------------------------

#define TOPO_VIT_INSTANTIATE(T)                                                                              \
  template class Model<T>;                                                                                  \
  template Mat<T> self_attention<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&, \
                                    int, std::vector<Mat<T>>*);                                             \
  template Mat<T> patchify<T>(std::span<const float>, int, int, int, int);                                  \
  template std::vector<T> unpatchify<T>(const Mat<T>&, int, int, int);                                      \
  template Batch<T> make_batch<T>(const ModelConfig&, std::span<const data::Sample* const>,                 \
                                  std::span<const int>, std::uint64_t);                                     \
  template Batch<T> make_batch<T>(const ModelConfig&, const fea::FieldMaps&, std::span<const double>);      \
  template void save_checkpoint<T>(const Model<T>&, const std::filesystem::path&);                          \
  template Model<T> widen_conditioning<T>(const Model<T>&, int);

TOPO_VIT_INSTANTIATE(float)
TOPO_VIT_INSTANTIATE(double)

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;

}  // namespace topo::vit
