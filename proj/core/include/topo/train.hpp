#pragma once

// Model training: Adam with an optional cosine schedule, on-the-fly square
// symmetry augmentation, masked reconstruction, auxiliary losses, transfer
// modes that freeze parts of a pretrained model, checkpoint/resume.

#include "topo/datagen.hpp"
#include "topo/losses.hpp"
#include "topo/vit.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace topo::train {

enum class LrSchedule { constant, cosine };
enum class TransferMode { none, cond_projection, decoder_projection, decoder_layers };

std::string to_string(LrSchedule s);
std::string to_string(TransferMode m);
LrSchedule lr_schedule_from_string(const std::string& s);
TransferMode transfer_mode_from_string(const std::string& s);

struct TrainConfig {
  int iterations = 20000;
  int batch_size = 32;
  int micro_batch = 8;  // samples per forward/backward pass; bounds memory
  double learning_rate = 3e-4;
  LrSchedule lr_schedule = LrSchedule::cosine;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double mask_ratio = 0.0;
  double lambda_aux = losses::kLambdaAux;
  losses::FmParams fm;
  TransferMode transfer_mode = TransferMode::none;
  bool augment = true;
  int checkpoint_every = 1000;
  int log_every = 50;
  int validate_every = 1000;
  std::size_t validation_limit = 500;

  void validate() const;
  double lr_at(int iteration) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LogEntry {
  int iteration = 0;
  losses::LossBreakdown loss;
  double val_mse = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<LogEntry> entries;

  /// Header `iter,total,primary,vf,ld,fm,val_mse,seconds`; missing val_mse is empty.
  void write_csv(std::ostream& os) const;
  static TrainLog read_csv(std::istream& is);
};

/// Element-level trainability for a transfer mode.
struct TrainableSet {
  std::vector<char> mask;          // one flag per parameter scalar
  std::vector<std::string> names;  // tensors (or column ranges) that train
  std::size_t count = 0;
};

/// `static_features` is the conditioning width of the pretrained model; the
/// columns beyond it are the widened ones.
TrainableSet trainable_set(const vit::Model<float>& model, TransferMode mode,
                           int static_features = vit::kStaticCondFeatures);

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean per-pixel squared error over the validation subset; never mutates the model.
double validation_mse(const vit::Model<float>& model, const data::Dataset& data, std::size_t limit = 500,
                      int micro_batch = 8);

/// Loss breakdown and gradient of one prediction against its sample.
losses::TotalLoss sample_loss(std::span<const float> prediction, const data::Sample& sample, int nx, int ny,
                              std::span<const char> pixel_mask, const TrainConfig& config);

class Trainer {
 public:
  /// `model` is either freshly initialized or pretrained (transfer modes).
  Trainer(const data::Dataset& data, vit::Model<float> model, TrainConfig config);

  const vit::Model<float>& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  const TrainableSet& trainable() const { return trainable_; }
  int iteration() const { return iteration_; }
  bool done() const { return iteration_ >= config_.iterations; }

  /// One optimizer step on a deterministic batch; returns the batch-mean loss.
  /// Throws TrainError on a non-finite loss or gradient (parameters untouched).
  losses::LossBreakdown step();

  /// Batch record indices and symmetry indices for an iteration.
  std::pair<std::vector<std::uint32_t>, std::vector<int>> batch_plan(int iteration) const;

  /// Model + optimizer state (`model.topw`, `optimizer.bin`) in `dir`.
  void save_state(const std::filesystem::path& dir) const;
  void load_state(const std::filesystem::path& dir);

 private:
  const data::Dataset& data_;
  vit::Model<float> model_;
  TrainConfig config_;
  TrainableSet trainable_;
  std::vector<float> m_, v_;
  int iteration_ = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints, log.csv
  bool resume = false;
  std::function<void(const LogEntry&)> on_log;
};

struct TrainResult {
  vit::Model<float> model;
  TrainLog log;
};

/// Runs the loop to `config.iterations`. With an output directory the log is
/// written to log.csv, state every `checkpoint_every` iterations and at the
/// end, and a non-finite loss leaves `diagnostic.topw` before rethrowing.
TrainResult train(const data::Dataset& data, vit::Model<float> model, const TrainConfig& config,
                  const TrainOptions& options = {});

/// Pretrained static model made ready for a transfer mode (conditioning widened).
vit::Model<float> prepare_transfer(const vit::Model<float>& pretrained, TransferMode mode);

/// A training run as one document:
///   {"model": {"preset": "tiny", "patch_size": 4} or full config fields,
///    "train": {...}, "init_seed": 0, "pretrained": "path.topw"}
struct RunConfig {
  vit::ModelConfig model;
  TrainConfig train;
  std::uint64_t init_seed = 0;
  std::optional<std::filesystem::path> pretrained;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& r);

/// Fresh model on the dataset's grid and conditioning width, or the
/// pretrained checkpoint prepared for the run's transfer mode.
vit::Model<float> initial_model(const RunConfig& run, const data::Dataset& data);

}  // namespace topo::train
