#include "topo/datagen.hpp"
#include "topo/evaluate.hpp"
#include "topo/io.hpp"
#include "topo/request.hpp"
#include "topo/serve.hpp"
#include "topo/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

int run_gen_data(const topo::data::GenerationOptions& base, const std::string& out) {
  auto opts = base;
  const auto t0 = std::chrono::steady_clock::now();
  opts.on_failure = [](std::size_t k, const std::string& why) {
    std::cerr << "sample " << k << " skipped: " << why << '\n';
  };
  opts.on_progress = [&](std::size_t done) {
    if (done % 50 == 0 || done == opts.count) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << done << "/" << opts.count << " samples, " << s << " s\n";
    }
  };
  const auto ds = topo::data::generate_dataset(opts);
  topo::data::write_dataset(ds, out);
  std::cout << "wrote " << ds.manifest.count << " records to " << out << '\n';
  return 0;
}

struct SolveArgs {
  std::string spec, out;
  int max_iters = 200;
};

int run_solve(const SolveArgs& a) {
  const auto req = topo::parse_problem_request(read_json(a.spec));
  topo::fea::GridDomain domain;
  domain.nx = req.nx;
  domain.ny = req.ny;
  topo::data::GenerationSettings settings;
  settings.simp.max_iters = a.max_iters;
  topo::simp::OptimizationResult r;
  if (req.spec.dynamic_kind == topo::DynamicKind::none) {
    r = topo::simp::optimize_static(domain, req.spec, settings.simp);
  } else {
    const auto signal = topo::fea::DynamicLoadSignal::make(topo::signal_kind(req.spec.dynamic_kind),
                                                           settings.dynamics.n_steps, settings.dynamics.duration);
    r = topo::simp::optimize_dynamic(domain, req.spec, signal, settings.simp, settings.dynamics);
  }
  fs::create_directories(a.out);
  topo::io::write_density(r.density, fs::path(a.out) / "density.json");
  std::ofstream trace(fs::path(a.out) / "trace.csv");
  r.trace.write_csv(trace);
  topo::io::write_png(r.density, fs::path(a.out) / "density.png");
  std::cout << "compliance " << r.final_objective << " after " << r.trace.entries.size() << " iterations, vf "
            << r.density.mean() << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, config, out;
  bool resume = false;
};

int run_train(const TrainArgs& a) {
  const auto run = topo::train::run_config_from_json(read_json(a.config));
  const auto data = topo::data::read_dataset(a.data);
  auto model = topo::train::initial_model(run, data);
  fs::create_directories(a.out);
  write_json(topo::train::to_json(run), fs::path(a.out) / "run.json");
  topo::train::TrainOptions opts;
  opts.out_dir = a.out;
  opts.resume = a.resume;
  opts.on_log = [](const topo::train::LogEntry& e) {
    std::cerr << "iter " << e.iteration << " loss " << e.loss.total << " (primary " << e.loss.primary << ")";
    if (!std::isnan(e.val_mse)) std::cerr << " val_mse " << e.val_mse;
    std::cerr << ' ' << e.seconds << " s\n";
  };
  const auto result = topo::train::train(data, std::move(model), run.train, opts);
  std::cout << "trained " << run.train.iterations << " iterations; checkpoint " << (fs::path(a.out) / "model.topw")
            << '\n';
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, report;
  std::size_t limit = 500;
  bool postprocess = false;
};

int run_eval(const EvalArgs& a) {
  const auto data = topo::data::read_dataset(a.data);
  const auto model = topo::vit::load_checkpoint(a.checkpoint);
  std::vector<const topo::data::Sample*> samples;
  for (auto k : data.manifest.metric_subset(a.limit)) samples.push_back(&data.samples.at(k));
  if (samples.empty()) throw std::runtime_error("dataset has no validation samples");
  auto preds = topo::eval::predict_samples(model, samples);
  const int nx = data.manifest.nx, ny = data.manifest.ny;
  json report{{"checkpoint", a.checkpoint}, {"data", a.data}};
  report["metrics"] = topo::eval::to_json(topo::eval::metrics(preds, samples, nx, ny));
  report["stress_strain"] = topo::eval::to_json(topo::eval::stress_strain_stats(preds, samples, nx, ny));
  if (a.postprocess) {
    for (auto& p : preds) p = topo::eval::postprocess_fm(p).density;
    report["postprocessed"] = topo::eval::to_json(topo::eval::metrics(preds, samples, nx, ny));
  }
  write_json(report, a.report);
  std::cout << report["metrics"].dump(2) << '\n';
  return 0;
}

struct SweepArgs {
  std::string checkpoint, data, out;
  std::uint32_t sample_id = 0;
  topo::eval::SweepOptions opts;
};

int run_sweep(const SweepArgs& a) {
  const auto data = topo::data::read_dataset(a.data);
  const auto model = topo::vit::load_checkpoint(a.checkpoint);
  const topo::data::Sample* base = nullptr;
  for (const auto& s : data.samples) {
    if (s.id == a.sample_id) {
      base = &s;
      break;
    }
  }
  if (!base) throw std::runtime_error("no sample with id " + std::to_string(a.sample_id));
  const auto curve = topo::eval::vf_sweep(model, *base, data.manifest.nx, data.manifest.ny, a.opts);
  if (a.out.empty()) {
    topo::eval::write_sweep_csv(curve, std::cout);
  } else {
    std::ofstream out(a.out);
    if (!out) throw std::runtime_error("cannot write " + a.out);
    topo::eval::write_sweep_csv(curve, out);
  }
  return 0;
}

struct PostArgs {
  std::string in, out;
  topo::eval::PostprocessOptions opts;
};

int run_postprocess(const PostArgs& a) {
  const auto r = topo::eval::postprocess_fm(topo::io::read_density(a.in), a.opts);
  topo::io::write_density(r.density, a.out);
  std::cout << "FM " << r.fm_history.front() << " -> " << r.fm_history.back() << " in " << r.fm_history.size() - 1
            << " steps\n";
  return 0;
}

topo::serve::Server* g_server = nullptr;

struct ServeArgs {
  std::optional<int> port;
  std::optional<std::string> checkpoint;
  std::string host = "0.0.0.0";
  int workers = 4;
};

int run_serve(ServeArgs a) {
  topo::serve::apply_environment(a.port, a.checkpoint);
  topo::serve::ServiceOptions so;
  so.workers = std::max(1, a.workers / 2);
  topo::serve::Service service(so);
  if (a.checkpoint) service.set_model(topo::serve::load_model(*a.checkpoint));
  topo::serve::ServerOptions o;
  o.host = a.host;
  o.port = a.port.value_or(8080);
  o.workers = a.workers;
  topo::serve::Server server(service, o);
  const int port = server.bind();
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cerr << "listening on " << o.host << ':' << port
            << (a.checkpoint ? " with " + *a.checkpoint : std::string(" (no model loaded)")) << '\n';
  server.listen();
  g_server = nullptr;
  return 0;
}

int run_export_png(const std::string& in, const std::string& out) {
  topo::io::write_png(topo::io::read_density(in), out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"topo: topology optimization toolkit"};
  app.require_subcommand(1, 1);

  topo::data::GenerationOptions gen;
  gen.count = 2000;
  gen.workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a dataset with the SIMP oracle");
  gen_cmd->add_option("--n,--count", gen.count, "samples before augmentation");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--nx", gen.nx);
  gen_cmd->add_option("--ny", gen.ny);
  gen_cmd->add_flag("--dynamic", gen.dynamic, "sample sine/impulse loads");
  gen_cmd->add_flag("--augment", gen.augment, "store the 8 symmetric images of each training sample");
  gen_cmd->add_option("--workers", gen.workers);
  gen_cmd->add_option("--out", gen_out, "output directory")->required();

  SolveArgs solve;
  auto* solve_cmd = app.add_subcommand("solve", "classical SIMP on a problem document");
  solve_cmd->add_option("--spec", solve.spec, "problem JSON")->required()->check(CLI::ExistingFile);
  solve_cmd->add_option("--out", solve.out, "output directory (density.json, trace.csv, density.png)")->required();
  solve_cmd->add_option("--max-iters", solve.max_iters);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", tr.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--config", tr.config, "run JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "output directory")->required();
  train_cmd->add_flag("--resume", tr.resume, "continue from the state in --out");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "metrics of a checkpoint on the validation subset");
  eval_cmd->add_option("--data", ev.data)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--report", ev.report, "output JSON")->required();
  eval_cmd->add_option("--limit", ev.limit, "validation samples used");
  eval_cmd->add_flag("--postprocess", ev.postprocess, "also report metrics after FM post-processing");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "volume-fraction generalization sweep");
  sweep_cmd->add_option("--checkpoint", sw.checkpoint)->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--data", sw.data, "dataset holding the base sample")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--sample-id", sw.sample_id)->required();
  sweep_cmd->add_option("--from", sw.opts.from);
  sweep_cmd->add_option("--to", sw.opts.to);
  sweep_cmd->add_option("--steps", sw.opts.steps);
  sweep_cmd->add_option("--out", sw.out, "CSV path (default stdout)");

  PostArgs pp;
  auto* post_cmd = app.add_subcommand("postprocess", "floating-material gradient post-processing");
  post_cmd->add_option("--density-in", pp.in)->required()->check(CLI::ExistingFile);
  post_cmd->add_option("--density-out", pp.out)->required();
  post_cmd->add_option("--steps", pp.opts.n_steps);
  post_cmd->add_option("--step-size", pp.opts.step_size);

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
  serve_cmd->add_option("--port", sv.port, "default $TOPO_PORT or 8080");
  serve_cmd->add_option("--checkpoint", sv.checkpoint, "default $TOPO_CKPT");
  serve_cmd->add_option("--host", sv.host);
  serve_cmd->add_option("--workers", sv.workers, "HTTP threads");

  std::string png_in, png_out;
  auto* png_cmd = app.add_subcommand("export-png", "write a density as 8-bit grayscale PNG");
  png_cmd->add_option("--density", png_in)->required()->check(CLI::ExistingFile);
  png_cmd->add_option("--out", png_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto parsed = app.get_subcommands();
    std::cerr << (parsed.empty() ? app.help() : parsed.front()->help());
    return 2;
  }
  try {
    if (*gen_cmd) return run_gen_data(gen, gen_out);
    if (*solve_cmd) return run_solve(solve);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*sweep_cmd) return run_sweep(sw);
    if (*post_cmd) return run_postprocess(pp);
    if (*serve_cmd) return run_serve(sv);
    if (*png_cmd) return run_export_png(png_in, png_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
