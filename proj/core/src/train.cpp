#include "topo/train.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace topo::train {

std::string to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

std::string to_string(TransferMode m) {
  switch (m) {
    case TransferMode::none: return "none";
    case TransferMode::cond_projection: return "cond_projection";
    case TransferMode::decoder_projection: return "decoder_projection";
    case TransferMode::decoder_layers: return "decoder_layers";
  }
  return "none";
}

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw std::invalid_argument("unknown lr_schedule '" + s + "'");
}

TransferMode transfer_mode_from_string(const std::string& s) {
  for (auto m : {TransferMode::none, TransferMode::cond_projection, TransferMode::decoder_projection,
                 TransferMode::decoder_layers}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown transfer_mode '" + s + "'");
}

void TrainConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("train: iterations must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
  if (micro_batch < 1) throw std::invalid_argument("train: micro_batch must be at least 1");
  if (!(learning_rate >= 0)) throw std::invalid_argument("train: learning_rate must be non-negative");
  if (!(mask_ratio >= 0 && mask_ratio < 1)) throw std::invalid_argument("train: mask_ratio must lie in [0, 1)");
  if (!(lambda_aux >= 0)) throw std::invalid_argument("train: lambda_aux must be non-negative");
  if (checkpoint_every < 1 || log_every < 1 || validate_every < 1) {
    throw std::invalid_argument("train: cadences must be positive");
  }
  fm.validate();
}

double TrainConfig::lr_at(int it) const {
  if (lr_schedule == LrSchedule::constant) return learning_rate;
  return 0.5 * learning_rate * (1.0 + std::cos(M_PI * static_cast<double>(it) / iterations));
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"micro_batch", c.micro_batch},
          {"learning_rate", c.learning_rate},
          {"lr_schedule", to_string(c.lr_schedule)},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"mask_ratio", c.mask_ratio},
          {"lambda_aux", c.lambda_aux},
          {"fm", {{"alpha", c.fm.alpha}, {"beta", c.fm.beta}, {"max_iters", c.fm.max_iters}, {"tol", c.fm.tol}}},
          {"transfer_mode", to_string(c.transfer_mode)},
          {"augment", c.augment},
          {"checkpoint_every", c.checkpoint_every},
          {"log_every", c.log_every},
          {"validate_every", c.validate_every},
          {"validation_limit", c.validation_limit}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.micro_batch = j.value("micro_batch", c.micro_batch);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_schedule = lr_schedule_from_string(j.value("lr_schedule", to_string(c.lr_schedule)));
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.seed = j.value("seed", c.seed);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.lambda_aux = j.value("lambda_aux", c.lambda_aux);
  if (j.contains("fm")) {
    const auto& f = j.at("fm");
    c.fm.alpha = f.value("alpha", c.fm.alpha);
    c.fm.beta = f.value("beta", c.fm.beta);
    c.fm.max_iters = f.value("max_iters", c.fm.max_iters);
    c.fm.tol = f.value("tol", c.fm.tol);
  }
  c.transfer_mode = transfer_mode_from_string(j.value("transfer_mode", to_string(c.transfer_mode)));
  c.augment = j.value("augment", c.augment);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.validation_limit = j.value("validation_limit", c.validation_limit);
  c.validate();
  return c;
}

// ---- log -----------------------------------------------------------------------------------

void TrainLog::write_csv(std::ostream& os) const {
  os << "iter,total,primary,vf,ld,fm,val_mse,seconds\n";
  os << std::setprecision(9);
  for (const auto& e : entries) {
    os << e.iteration << ',' << e.loss.total << ',' << e.loss.primary << ',' << e.loss.vf << ',' << e.loss.ld << ','
       << e.loss.fm << ',';
    if (!std::isnan(e.val_mse)) os << e.val_mse;
    os << ',' << e.seconds << '\n';
  }
}

TrainLog TrainLog::read_csv(std::istream& is) {
  TrainLog log;
  std::string line;
  if (!std::getline(is, line) || line.rfind("iter,", 0) != 0) throw std::runtime_error("training log: missing header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() == 7) f.emplace_back();
    if (f.size() != 8) throw std::runtime_error("training log: malformed row '" + line + "'");
    LogEntry e;
    e.iteration = std::stoi(f[0]);
    e.loss.total = std::stod(f[1]);
    e.loss.primary = std::stod(f[2]);
    e.loss.vf = std::stod(f[3]);
    e.loss.ld = std::stod(f[4]);
    e.loss.fm = std::stod(f[5]);
    if (!f[6].empty()) e.val_mse = std::stod(f[6]);
    e.seconds = f[7].empty() ? 0.0 : std::stod(f[7]);
    log.entries.push_back(e);
  }
  return log;
}

// ---- trainable parameters --------------------------------------------------------------------

TrainableSet trainable_set(const vit::Model<float>& model, TransferMode mode, int static_features) {
  const auto& layout = model.layout();
  const auto& c = model.config();
  TrainableSet t;
  t.mask.assign(layout.total(), 0);
  auto whole = [&](const std::string& name) {
    const auto& e = layout.at(name);
    std::fill_n(t.mask.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size, 1);
    t.names.push_back(name);
  };
  if (mode != TransferMode::none && c.cond_features <= static_features) {
    throw std::invalid_argument("transfer mode " + to_string(mode) + " needs a model with a widened conditioning input");
  }
  auto widened_columns = [&] {
    const auto& e = layout.at("cond.fc1.weight");
    for (int i = 0; i < c.embed_dim; ++i) {
      for (int j = static_features; j < c.cond_features; ++j) t.mask[e.offset + static_cast<std::size_t>(i) * c.cond_features + j] = 1;
    }
    t.names.push_back("cond.fc1.weight[:, " + std::to_string(static_features) + ":" + std::to_string(c.cond_features) + "]");
  };

  switch (mode) {
    case TransferMode::none:
      std::fill(t.mask.begin(), t.mask.end(), 1);
      for (const auto& e : layout.entries()) t.names.push_back(e.name);
      break;
    case TransferMode::cond_projection:
      for (const char* n : {"cond.fc1.weight", "cond.fc1.bias", "cond.fc2.weight", "cond.fc2.bias"}) whole(n);
      break;
    case TransferMode::decoder_projection:
      whole("head.weight");
      whole("head.bias");
      widened_columns();
      break;
    case TransferMode::decoder_layers:
      whole("head.weight");
      whole("head.bias");
      for (int l = std::max(0, c.num_layers - 2); l < c.num_layers; ++l) {
        const std::string prefix = "blocks." + std::to_string(l) + ".";
        for (const auto& e : layout.entries()) {
          if (e.name.rfind(prefix, 0) == 0) whole(e.name);
        }
      }
      widened_columns();
      break;
  }
  t.count = static_cast<std::size_t>(std::count(t.mask.begin(), t.mask.end(), 1));
  return t;
}

vit::Model<float> prepare_transfer(const vit::Model<float>& pretrained, TransferMode mode) {
  if (mode == TransferMode::none) return pretrained;
  if (pretrained.config().cond_features >= vit::kDynamicCondFeatures) return pretrained;
  return vit::widen_conditioning(pretrained, vit::kDynamicCondFeatures);
}

// ---- losses and validation ---------------------------------------------------------------------

losses::TotalLoss sample_loss(std::span<const float> prediction, const data::Sample& sample, int nx, int ny,
                              std::span<const char> pixel_mask, const TrainConfig& config) {
  fea::DensityField pred;
  pred.nx = nx;
  pred.ny = ny;
  pred.values.assign(prediction.begin(), prediction.end());
  return losses::total_loss(pred, sample.topology_field(nx, ny), sample.problem(nx, ny), pixel_mask, config.lambda_aux,
                            config.fm);
}

double validation_mse(const vit::Model<float>& model, const data::Dataset& data, std::size_t limit, int micro_batch) {
  const auto subset = data.manifest.metric_subset(limit);
  if (subset.empty()) throw std::invalid_argument("validation split is empty");
  auto cfg = model.config();
  cfg.mask_ratio = 0.0;
  const std::size_t cells = static_cast<std::size_t>(cfg.nx) * cfg.ny;
  double sum = 0.0;
  vit::Cache<float> cache;
  for (std::size_t start = 0; start < subset.size(); start += static_cast<std::size_t>(micro_batch)) {
    const std::size_t end = std::min(subset.size(), start + static_cast<std::size_t>(micro_batch));
    std::vector<const data::Sample*> ptrs;
    for (std::size_t k = start; k < end; ++k) ptrs.push_back(&data.samples.at(subset[k]));
    const auto batch = vit::make_batch<float>(cfg, ptrs);
    const auto& out = model.forward(batch, cache);
    for (std::size_t b = 0; b < ptrs.size(); ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < cells; ++k) {
        const double d = static_cast<double>(out(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k))) - ptrs[b]->topology[k];
        s += d * d;
      }
      sum += s / static_cast<double>(cells);
    }
  }
  return sum / static_cast<double>(subset.size());
}

// ---- trainer ---------------------------------------------------------------------------------------

Trainer::Trainer(const data::Dataset& data, vit::Model<float> model, TrainConfig config)
    : data_(data), model_(std::move(model)), config_(std::move(config)) {
  config_.validate();
  if (data_.manifest.train.empty()) throw std::invalid_argument("training split is empty");
  if (data_.manifest.nx != model_.config().nx || data_.manifest.ny != model_.config().ny) {
    throw std::invalid_argument("dataset grid does not match the model");
  }
  const bool dynamic = std::any_of(data_.samples.begin(), data_.samples.end(),
                                   [](const data::Sample& s) { return s.dynamic_kind != DynamicKind::none; });
  const int need = dynamic ? vit::kDynamicCondFeatures : vit::kStaticCondFeatures;
  if (model_.config().cond_features != need) {
    throw std::invalid_argument(std::string(dynamic ? "dynamic" : "static") + " dataset needs a model with " +
                                std::to_string(need) + " conditioning features, got " +
                                std::to_string(model_.config().cond_features));
  }
  trainable_ = trainable_set(model_, config_.transfer_mode);
  m_.assign(model_.params().size(), 0.0f);
  v_.assign(model_.params().size(), 0.0f);
}

std::pair<std::vector<std::uint32_t>, std::vector<int>> Trainer::batch_plan(int it) const {
  std::mt19937_64 rng(data::derive_seed(config_.seed, static_cast<std::uint64_t>(it)));
  const auto& pool = data_.manifest.train;
  std::vector<std::uint32_t> idx;
  std::vector<int> sym;
  for (int b = 0; b < config_.batch_size; ++b) {
    idx.push_back(pool[static_cast<std::size_t>(rng() % pool.size())]);
    sym.push_back(config_.augment ? static_cast<int>(rng() % 8) : 0);
  }
  return {idx, sym};
}

losses::LossBreakdown Trainer::step() {
  const auto& mc = model_.config();
  const int nx = mc.nx, ny = mc.ny;
  auto cfg = mc;
  cfg.mask_ratio = config_.mask_ratio;
  const auto [idx, sym] = batch_plan(iteration_);
  const auto symmetries = data::Symmetry::all();
  const int B = config_.batch_size;

  vit::ParamVec<float> grads(model_.params().size(), 0.0f);
  losses::LossBreakdown mean;
  mean.lambda_aux = config_.lambda_aux;
  vit::Cache<float> cache;
  for (int start = 0; start < B; start += config_.micro_batch) {
    const int end = std::min(B, start + config_.micro_batch);
    std::vector<data::Sample> moved;
    moved.reserve(static_cast<std::size_t>(end - start));
    for (int b = start; b < end; ++b) {
      const auto& s = data_.samples.at(idx[static_cast<std::size_t>(b)]);
      const int k = sym[static_cast<std::size_t>(b)];
      moved.push_back(k == 0 ? s : data::apply_symmetry(s, symmetries[static_cast<std::size_t>(k)], nx));
    }
    std::vector<const data::Sample*> ptrs;
    for (const auto& s : moved) ptrs.push_back(&s);
    const auto batch = vit::make_batch<float>(cfg, ptrs, {},
                                              data::derive_seed(config_.seed ^ 0x6d61736bULL, static_cast<std::uint64_t>(iteration_) * 4096 + start));
    const auto& out = model_.forward(batch, cache);
    vit::Mat<float> d_out(out.rows(), out.cols());
    for (int b = 0; b < end - start; ++b) {
      const auto& masked = batch.masked[static_cast<std::size_t>(b)];
      const auto pm = masked.empty() ? std::vector<char>{} : losses::pixel_mask(masked, nx, ny, mc.patch_size);
      const auto loss = sample_loss(std::span<const float>(out.row(b).data(), static_cast<std::size_t>(out.cols())),
                                    moved[static_cast<std::size_t>(b)], nx, ny, pm, config_);
      mean.primary += loss.parts.primary / B;
      mean.vf += loss.parts.vf / B;
      mean.ld += loss.parts.ld / B;
      mean.fm += loss.parts.fm / B;
      mean.total += loss.parts.total / B;
      for (Eigen::Index k = 0; k < out.cols(); ++k) d_out(b, k) = static_cast<float>(loss.grad[static_cast<std::size_t>(k)] / B);
    }
    model_.backward(batch, cache, d_out, grads);
  }

  if (!std::isfinite(mean.total)) throw TrainError("non-finite loss at iteration " + std::to_string(iteration_));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (trainable_.mask[k] && !std::isfinite(grads[k])) {
      throw TrainError("non-finite gradient at iteration " + std::to_string(iteration_));
    }
  }

  const double lr = config_.lr_at(iteration_);
  const int t = iteration_ + 1;
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  const float b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  auto& p = model_.params();
  if (lr > 0.0) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (!trainable_.mask[k]) continue;
      const float g = grads[k];
      m_[k] = b1 * m_[k] + (1.0f - b1) * g;
      v_[k] = b2 * v_[k] + (1.0f - b2) * g * g;
      const double mh = m_[k] / c1, vh = v_[k] / c2;
      p[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + config_.adam_eps));
    }
  }
  ++iteration_;
  return mean;
}

void Trainer::save_state(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  vit::save_checkpoint(model_, dir / "model.topw");
  const auto tmp = dir / "optimizer.bin.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write("TOPO", 4);
    const std::uint32_t version = 1;
    const auto it = static_cast<std::uint64_t>(iteration_);
    const auto n = static_cast<std::uint64_t>(m_.size());
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&it), 8);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(m_.data()), static_cast<std::streamsize>(n * 4));
    out.write(reinterpret_cast<const char*>(v_.data()), static_cast<std::streamsize>(n * 4));
    if (!out) throw std::runtime_error("cannot write optimizer state in " + dir.string());
  }
  std::filesystem::rename(tmp, dir / "optimizer.bin");
}

void Trainer::load_state(const std::filesystem::path& dir) {
  auto model = vit::load_checkpoint(dir / "model.topw");
  if (model.config() != model_.config()) throw std::runtime_error("checkpoint config differs from the training model");
  std::ifstream in(dir / "optimizer.bin", std::ios::binary);
  if (!in) throw std::runtime_error("missing optimizer state in " + dir.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t it = 0, n = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&it), 8);
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || std::memcmp(magic, "TOPO", 4) != 0 || version != 1 || n != m_.size()) {
    throw std::runtime_error("optimizer state in " + dir.string() + " is invalid");
  }
  in.read(reinterpret_cast<char*>(m_.data()), static_cast<std::streamsize>(n * 4));
  in.read(reinterpret_cast<char*>(v_.data()), static_cast<std::streamsize>(n * 4));
  if (!in) throw std::runtime_error("optimizer state in " + dir.string() + " is truncated");
  model_ = std::move(model);
  iteration_ = static_cast<int>(it);
}

// ---- loop --------------------------------------------------------------------------------------------

TrainResult train(const data::Dataset& data, vit::Model<float> model, const TrainConfig& config, const TrainOptions& opt) {
  Trainer trainer(data, std::move(model), config);
  TrainLog log;
  double elapsed_before = 0.0;
  const auto log_path = opt.out_dir ? std::optional(*opt.out_dir / "log.csv") : std::nullopt;
  if (opt.resume && opt.out_dir && std::filesystem::exists(*opt.out_dir / "optimizer.bin")) {
    trainer.load_state(*opt.out_dir);
    if (std::filesystem::exists(*log_path)) {
      std::ifstream in(*log_path);
      for (const auto& e : TrainLog::read_csv(in).entries) {
        if (e.iteration <= trainer.iteration()) log.entries.push_back(e);
      }
      if (!log.entries.empty()) elapsed_before = log.entries.back().seconds;
    }
  }
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    std::ofstream(*opt.out_dir / "train_config.json") << to_json(config).dump(2) << '\n';
  }
  auto flush_log = [&] {
    if (!log_path) return;
    std::ofstream out(*log_path, std::ios::trunc);
    log.write_csv(out);
  };

  const auto t0 = std::chrono::steady_clock::now();
  while (!trainer.done()) {
    losses::LossBreakdown loss;
    try {
      loss = trainer.step();
    } catch (const TrainError&) {
      if (opt.out_dir) vit::save_checkpoint(trainer.model(), *opt.out_dir / "diagnostic.topw");
      flush_log();
      throw;
    }
    const int it = trainer.iteration();
    const bool last = trainer.done();
    if (it % config.log_every == 0 || it == 1 || last) {
      LogEntry e;
      e.iteration = it;
      e.loss = loss;
      if ((it % config.validate_every == 0 || last) && !data.manifest.validation.empty()) {
        e.val_mse = validation_mse(trainer.model(), data, config.validation_limit, config.micro_batch);
      }
      e.seconds = elapsed_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.entries.push_back(e);
      if (opt.on_log) opt.on_log(e);
      flush_log();
    }
    if (opt.out_dir && (it % config.checkpoint_every == 0 || last)) trainer.save_state(*opt.out_dir);
  }
  return {trainer.model(), log};
}

// ---- run documents ------------------------------------------------------------------------------

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig r;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("preset")) {
      r.model = vit::ModelConfig::preset(m.at("preset").get<std::string>(), m.value("patch_size", 4));
      r.model.nx = m.value("nx", r.model.nx);
      r.model.ny = m.value("ny", r.model.ny);
      r.model.mask_ratio = m.value("mask_ratio", r.model.mask_ratio);
    } else {
      r.model = vit::config_from_json(m);
    }
  }
  if (j.contains("train")) r.train = train_config_from_json(j.at("train"));
  r.init_seed = j.value("init_seed", std::uint64_t{0});
  if (j.contains("pretrained") && !j.at("pretrained").is_null()) r.pretrained = j.at("pretrained").get<std::string>();
  r.train.validate();
  return r;
}

nlohmann::json to_json(const RunConfig& r) {
  nlohmann::json j{{"model", vit::to_json(r.model)}, {"train", to_json(r.train)}, {"init_seed", r.init_seed}};
  j["pretrained"] = r.pretrained ? nlohmann::json(r.pretrained->string()) : nlohmann::json(nullptr);
  return j;
}

vit::Model<float> initial_model(const RunConfig& run, const data::Dataset& data) {
  const bool dynamic = std::any_of(data.samples.begin(), data.samples.end(),
                                   [](const data::Sample& s) { return s.dynamic_kind != DynamicKind::none; });
  if (run.pretrained) {
    auto model = prepare_transfer(vit::load_checkpoint(*run.pretrained), run.train.transfer_mode);
    if (dynamic && model.config().cond_features < vit::kDynamicCondFeatures) {
      throw std::invalid_argument("pretrained model on a dynamic dataset needs a transfer mode");
    }
    return model;
  }
  if (run.train.transfer_mode != TransferMode::none) {
    throw std::invalid_argument("transfer mode " + to_string(run.train.transfer_mode) + " needs a pretrained model");
  }
  auto cfg = run.model;
  cfg.nx = data.manifest.nx;
  cfg.ny = data.manifest.ny;
  cfg.cond_features = dynamic ? vit::kDynamicCondFeatures : vit::kStaticCondFeatures;
  vit::Model<float> model(cfg);
  model.init(run.init_seed);
  return model;
}

}  // namespace topo::train
