#pragma once

// Vision-transformer operator from physics fields to a density field.
//
// Token sequence per sample: index 0 is the conditioning token, indices 1..N
// are patch tokens in row-major patch-grid order (patch row 0 at the bottom).
// Blocks are pre-norm: x += Attn(LN(x)); x += MLP(LN(x)). After the last block
// a final LayerNorm is applied, the conditioning token is dropped and a linear
// head maps each patch token to P*P logits that are squashed by a logistic.
//
// The model is templated on the scalar so that the same code runs in float for
// training and in double for finite-difference checks.

#include "topo/fea.hpp"
#include "topo/problem.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace topo::data {
struct Sample;
}

namespace topo::vit {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Flat parameter storage. The aligned allocator pins the base address so that
/// Eigen's vectorized kernels take the same code path on every run.
template <class T>
using ParamVec = std::vector<T, Eigen::aligned_allocator<T>>;

inline constexpr int kStaticCondFeatures = 17;   // vf, load x/y, fx, fy, 12 BC flags
inline constexpr int kDynamicCondFeatures = 27;  // + 10 FFT amplitudes

struct ModelConfig {
  std::string name = "tiny";
  int embed_dim = 192;
  int num_layers = 12;
  int num_heads = 3;
  int patch_size = 4;
  int in_channels = 2;
  int nx = 64;
  int ny = 64;
  int mlp_ratio = 4;
  double mask_ratio = 0.0;
  int cond_features = kStaticCondFeatures;

  void validate() const;

  int patches_x() const { return nx / patch_size; }
  int patches_y() const { return ny / patch_size; }
  int num_patches() const { return patches_x() * patches_y(); }
  int seq_len() const { return num_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * in_channels; }
  int head_dim() const { return embed_dim / num_heads; }
  int hidden_dim() const { return embed_dim * mlp_ratio; }

  /// tiny(192,12,3), small(384,12,6), base(768,12,12), large(1024,24,16), huge(1280,32,16).
  static ModelConfig preset(std::string_view name, int patch_size = 4);

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

struct ParamInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Names, shapes and offsets of every parameter tensor, in a fixed order.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  const std::vector<ParamInfo>& entries() const { return entries_; }
  std::size_t total() const { return total_; }
  const ParamInfo& at(std::string_view name) const;
  bool contains(std::string_view name) const;

 private:
  void add(std::string name, std::vector<int> shape);
  std::vector<ParamInfo> entries_;
  std::size_t total_ = 0;
};

/// A batch of model inputs. Patches are stored one row per patch, samples
/// consecutive; `masked[b]` lists the patch indices of sample b replaced by
/// the mask token.
template <class T>
struct Batch {
  int size = 0;
  Mat<T> patches;  // (size * N) x patch_dim
  Mat<T> cond;     // size x cond_features
  std::vector<std::vector<int>> masked;
};

/// Intermediates retained by forward() for backward().
template <class T>
struct Cache {
  struct Layer {
    Mat<T> ln1, ln2;                  // normalized (pre-affine) activations
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd1, rstd2;
    Mat<T> qkv;                       // (B*S) x 3D
    std::vector<Mat<T>> probs;        // B*h matrices S x S
    Mat<T> attn;                      // concatenated heads, (B*S) x D
    Mat<T> hidden;                    // MLP pre-activation, (B*S) x 4D
    Mat<T> act;                       // GELU output
  };
  int batch = 0;
  Mat<T> cond_hidden, cond_act;       // B x D
  std::vector<Layer> layers;
  Mat<T> final_norm;                  // (B*S) x D, pre-affine
  Eigen::Matrix<T, Eigen::Dynamic, 1> final_rstd;
  Mat<T> head_in;                     // (B*N) x D
  Mat<T> output;                      // B x (nx*ny), values in [0,1]
  bool valid = false;
};

template <class T>
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  ParamVec<T>& params() { return params_; }
  const ParamVec<T>& params() const { return params_; }

  std::span<T> param(std::string_view name);
  std::span<const T> param(std::string_view name) const;

  /// Variance 2/(fan_in+fan_out) for weight matrices, 0.02^2 for positional
  /// and mask embeddings, zero biases, unit LayerNorm gains.
  void init(std::uint64_t seed);

  /// Returns B x (nx*ny) densities in [0,1]; retains intermediates in `cache`.
  const Mat<T>& forward(const Batch<T>& batch, Cache<T>& cache) const;

  /// Accumulates parameter gradients for upstream gradient `d_output`
  /// (B x nx*ny, w.r.t. the squashed output) into `grads`.
  void backward(const Batch<T>& batch, const Cache<T>& cache, const Mat<T>& d_output,
                ParamVec<T>& grads) const;

  /// Token matrix (B*S x D) entering the first block.
  Mat<T> embed(const Batch<T>& batch) const;

  /// One transformer block applied to a single sequence (S' x D).
  Mat<T> run_block(int layer, const Mat<T>& tokens) const;

  /// Conditioning token for one feature vector.
  Eigen::Matrix<T, Eigen::Dynamic, 1> cond_token(std::span<const T> features) const;

  template <class U>
  Model<U> cast() const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  ParamVec<T> params_;
};

/// Multi-head scaled dot-product attention on one sequence: softmax(QK^T/sqrt(dk))V
/// per head, heads concatenated, then W_O. Weights are D x D in (out, in) layout.
/// When `probs` is given it receives the h attention matrices.
template <class T>
Mat<T> self_attention(const Mat<T>& x, const Mat<T>& wq, const Mat<T>& wk, const Mat<T>& wv, const Mat<T>& wo,
                      int heads, std::vector<Mat<T>>* probs = nullptr);

// ---- inputs -----------------------------------------------------------------------

/// N x (P*P*C) patch rows, channel-major inside each patch. `channels` holds C
/// consecutive nx*ny arrays (row 0 at the bottom).
template <class T>
Mat<T> patchify(std::span<const float> channels, int channels_count, int nx, int ny, int p);

/// Inverse of patchify for a single channel: N x (P*P) -> nx*ny.
template <class T>
std::vector<T> unpatchify(const Mat<T>& patches, int nx, int ny, int p);

/// [vf, load_x, load_y, fx, fy, bc flags(12), fft(10)?]
std::vector<double> conditioning_vector(const ProblemSpec& spec, int nx, int ny,
                                        const std::optional<std::array<double, 10>>& fft = std::nullopt,
                                        bool dynamic_width = false);
std::vector<double> conditioning_vector(const data::Sample& sample, bool dynamic_width);

/// Patch indices to mask: floor(ratio * n) distinct indices, sorted, from the seed.
std::vector<int> choose_mask(int n, double ratio, std::uint64_t seed);

/// Packs samples into a batch. `symmetry[k]` (optional) selects one of the 8
/// square symmetries applied to sample k on the fly.
template <class T>
Batch<T> make_batch(const ModelConfig& config, std::span<const data::Sample* const> samples,
                    std::span<const int> symmetry = {}, std::uint64_t mask_seed = 0);

/// Batch of one from freshly computed fields and a problem spec.
template <class T>
Batch<T> make_batch(const ModelConfig& config, const fea::FieldMaps& fields, std::span<const double> cond);

/// Single-sample inference: fields in, density out.
fea::DensityField predict(const Model<float>& model, const fea::FieldMaps& fields, std::span<const double> cond);

// ---- checkpoints --------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);
Model<float> load_checkpoint(const std::filesystem::path& path);

/// Copy of `model` whose conditioning input accepts `features` inputs; the new
/// first-layer columns are zero so static behaviour is preserved exactly.
template <class T>
Model<T> widen_conditioning(const Model<T>& model, int features);

}  // namespace topo::vit
