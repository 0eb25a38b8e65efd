#include "topo/serve.hpp"

#include "topo/datagen.hpp"
#include "topo/losses.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace topo::serve {

using nlohmann::json;

namespace {

Response error(int status, const std::string& message, const std::string& field = {}) {
  json body{{"error", message}};
  if (!field.empty()) body["field"] = field;
  return {status, std::move(body)};
}

Response bad_request(const RequestError& e) { return error(400, e.what(), e.field()); }

std::string content_hash(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize k = 0; k < in.gcount(); ++k) {
      h ^= static_cast<unsigned char>(buf[k]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str().substr(0, 12);
}

json trace_json(const simp::OptimizationTrace& t) {
  json out = json::array();
  for (const auto& e : t.entries) {
    out.push_back({{"iteration", e.iteration}, {"compliance", e.compliance}, {"vf", e.volume_fraction}, {"change", e.change}});
  }
  return out;
}

json parse_body(std::string_view body) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw RequestError("body", std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

std::shared_ptr<const LoadedModel> load_model(const std::filesystem::path& checkpoint) {
  auto m = std::make_shared<LoadedModel>(LoadedModel{vit::load_checkpoint(checkpoint), {}, checkpoint});
  m->id = checkpoint.stem().string() + "-" + content_hash(checkpoint);
  return m;
}

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "unknown";
}

Service::Service(ServiceOptions options) : options_(std::move(options)) {
  options_.simp.validate();
  const int n = std::max(1, options_.workers);
  for (int k = 0; k < n; ++k) workers_.emplace_back([this] { worker_loop(); });
}

Service::~Service() {
  {
    std::lock_guard lock(jobs_mu_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

void Service::set_model(std::shared_ptr<const LoadedModel> model) {
  std::lock_guard lock(model_mu_);
  model_ = std::move(model);
}

std::shared_ptr<const LoadedModel> Service::model() const {
  std::lock_guard lock(model_mu_);
  return model_;
}

Response Service::health() const { return {200, {{"status", "ok"}}}; }

Response Service::meta() const {
  const auto m = model();
  const int nx = m ? m->model.config().nx : 64, ny = m ? m->model.config().ny : 64;
  const auto catalog = BcCatalog::make(nx, ny);
  json groups = json::array();
  for (const auto& g : catalog.groups()) groups.push_back({{"name", g.name}, {"nodes", g.nodes}});
  json body{{"catalog", {{"version", std::string(catalog.version())}, {"nx", nx}, {"ny", ny}, {"groups", groups}}},
            {"dynamic_kinds", {"sine", "impulse"}},
            {"model", nullptr},
            {"checkpoint_id", nullptr}};
  if (m) {
    body["model"] = {{"config", vit::to_json(m->model.config())},
                     {"parameters", m->model.params().size()},
                     {"dynamic", m->model.config().cond_features > vit::kStaticCondFeatures}};
    body["checkpoint_id"] = m->id;
  }
  return {200, body};
}

Response Service::predict(std::string_view body) const {
  const auto t0 = std::chrono::steady_clock::now();
  ProblemRequest req;
  try {
    req = parse_problem_request(body);
  } catch (const RequestError& e) {
    return bad_request(e);
  }
  const auto m = model();
  if (!m) return error(503, "no model loaded");
  const auto& cfg = m->model.config();
  if (req.nx != cfg.nx || req.ny != cfg.ny) {
    return error(400, "grid: model expects " + std::to_string(cfg.nx) + "x" + std::to_string(cfg.ny), "grid");
  }
  const bool dynamic_model = cfg.cond_features > vit::kStaticCondFeatures;
  if (req.spec.dynamic_kind != DynamicKind::none && !dynamic_model) {
    return error(400, "dynamic: the loaded model has no load-spectrum inputs", "dynamic");
  }
  try {
    fea::GridDomain domain;
    domain.nx = req.nx;
    domain.ny = req.ny;
    const auto problem = resolve(req.spec, domain);
    const auto fields = fea::input_fields(domain, problem.bc, problem.load);
    std::optional<std::array<double, 10>> fft;
    if (req.spec.dynamic_kind != DynamicKind::none) {
      const auto signal = fea::DynamicLoadSignal::make(signal_kind(req.spec.dynamic_kind), options_.dynamics.n_steps,
                                                       options_.dynamics.duration);
      fft = data::fft_features(signal);
    }
    const auto cond = vit::conditioning_vector(req.spec, req.nx, req.ny, fft, dynamic_model);
    auto density = vit::predict(m->model, fields, cond);
    if (req.postprocess) density = eval::postprocess_fm(density, options_.postprocess).density;
    const double fm = losses::fm_loss(density, options_.postprocess.fm, false).value;
    const double ld = losses::ld_loss(density, req.spec.load_element, req.spec.fx, req.spec.fy).value;
    const double vf = fea::binarize(density).mean();
    const double ms =
        std::max(1e-3, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    return {200,
            {{"density", density.values},
             {"nx", density.nx},
             {"ny", density.ny},
             {"vf_achieved", vf},
             {"fm_value", fm},
             {"ld_value", ld},
             {"elapsed_ms", ms},
             {"model_id", m->id}}};
  } catch (const std::exception& e) {
    return error(500, std::string("prediction failed: ") + e.what());
  }
}

Response Service::solve(std::string_view body) {
  ProblemRequest req;
  try {
    req = parse_problem_request(body);
  } catch (const RequestError& e) {
    return bad_request(e);
  }
  std::string id;
  {
    std::lock_guard lock(jobs_mu_);
    id = "job-" + std::to_string(next_job_++);
    jobs_.emplace(id, Job{std::move(req), {}});
    queue_.push_back(id);
  }
  jobs_cv_.notify_one();
  return {202, {{"job_id", id}}};
}

std::optional<JobSnapshot> Service::job_snapshot(const std::string& id) const {
  std::lock_guard lock(jobs_mu_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second.snap;
}

Response Service::job(const std::string& id) const {
  const auto snap = job_snapshot(id);
  if (!snap) return error(404, "unknown job '" + id + "'", "id");
  json body{{"job_id", id}, {"state", to_string(snap->state)}, {"iteration", snap->iteration},
            {"compliance", snap->compliance}};
  if (snap->state == JobState::done) {
    body["density"] = snap->density.values;
    body["nx"] = snap->density.nx;
    body["ny"] = snap->density.ny;
    body["volume_fraction"] = snap->density.mean();
    body["trace"] = trace_json(snap->trace);
  }
  if (snap->state == JobState::failed) body["reason"] = snap->reason;
  return {200, body};
}

Response Service::load_checkpoint(std::string_view body) {
  std::string path;
  try {
    const auto doc = parse_body(body);
    if (!doc.is_object() || !doc.contains("path") || !doc["path"].is_string()) {
      throw RequestError("path", "expected a checkpoint path string");
    }
    path = doc["path"].get<std::string>();
  } catch (const RequestError& e) {
    return bad_request(e);
  }
  try {
    set_model(load_model(path));
  } catch (const std::exception& e) {
    return error(400, std::string("path: ") + e.what(), "path");
  }
  return {200, {{"model_id", model()->id}}};
}

void Service::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(jobs_mu_);
      jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
    }
    run_job(id);
  }
}

void Service::run_job(const std::string& id) {
  ProblemRequest req;
  {
    std::lock_guard lock(jobs_mu_);
    auto& job = jobs_.at(id);
    job.snap.state = JobState::running;
    req = job.request;
  }
  const auto progress = [&](const simp::TraceEntry& e) {
    std::lock_guard lock(jobs_mu_);
    auto& snap = jobs_.at(id).snap;
    snap.iteration = e.iteration;
    snap.compliance = e.compliance;
  };
  try {
    fea::GridDomain domain;
    domain.nx = req.nx;
    domain.ny = req.ny;
    simp::OptimizationResult result;
    if (req.spec.dynamic_kind == DynamicKind::none) {
      result = simp::optimize_static(domain, req.spec, options_.simp, progress);
    } else {
      const auto signal = fea::DynamicLoadSignal::make(signal_kind(req.spec.dynamic_kind), options_.dynamics.n_steps,
                                                       options_.dynamics.duration);
      result = simp::optimize_dynamic(domain, req.spec, signal, options_.simp, options_.dynamics, progress);
    }
    std::lock_guard lock(jobs_mu_);
    auto& snap = jobs_.at(id).snap;
    snap.state = JobState::done;
    snap.compliance = result.final_objective;
    snap.density = std::move(result.density);
    snap.trace = std::move(result.trace);
  } catch (const std::exception& e) {
    std::lock_guard lock(jobs_mu_);
    auto& snap = jobs_.at(id).snap;
    snap.state = JobState::failed;
    snap.reason = e.what();
  }
}

// ---- environment and HTTP --------------------------------------------------------------

void apply_environment(std::optional<int>& port, std::optional<std::string>& checkpoint) {
  if (!port) {
    if (const char* p = std::getenv("TOPO_PORT"); p && *p) {
      try {
        port = std::stoi(p);
      } catch (const std::exception&) {
        throw std::invalid_argument(std::string("TOPO_PORT: not a port number '") + p + "'");
      }
    }
  }
  if (!checkpoint) {
    if (const char* c = std::getenv("TOPO_CKPT"); c && *c) checkpoint = c;
  }
}

struct Server::Impl {
  Service& service;
  ServerOptions options;
  httplib::Server http;
  int port = -1;

  Impl(Service& s, ServerOptions o) : service(s), options(std::move(o)) {}
};

Server::Server(Service& service, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  auto& http = impl_->http;
  const int threads = std::max(1, impl_->options.workers);
  http.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  http.set_default_headers({{"Access-Control-Allow-Origin", impl_->options.cors_origin},
                            {"Access-Control-Allow-Headers", "Content-Type"},
                            {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  const auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  Service& s = impl_->service;
  http.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  http.Get("/api/v1/health", [&s, reply](const httplib::Request&, httplib::Response& res) { reply(res, s.health()); });
  http.Get("/api/v1/meta", [&s, reply](const httplib::Request&, httplib::Response& res) { reply(res, s.meta()); });
  http.Post("/api/v1/predict",
            [&s, reply](const httplib::Request& req, httplib::Response& res) { reply(res, s.predict(req.body)); });
  http.Post("/api/v1/solve",
            [&s, reply](const httplib::Request& req, httplib::Response& res) { reply(res, s.solve(req.body)); });
  http.Get(R"(/api/v1/jobs/([^/]+))", [&s, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, s.job(req.matches[1].str()));
  });
  http.Post("/api/v1/admin/load-checkpoint", [&s, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, s.load_checkpoint(req.body));
  });
  http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", what}}.dump(), "application/json");
  });
}

Server::~Server() { stop(); }

int Server::bind() {
  auto& o = impl_->options;
  if (o.port == 0) {
    impl_->port = impl_->http.bind_to_any_port(o.host);
  } else {
    impl_->port = impl_->http.bind_to_port(o.host, o.port) ? o.port : -1;
  }
  if (impl_->port < 0) throw std::runtime_error("cannot bind " + o.host + ":" + std::to_string(o.port));
  return impl_->port;
}

void Server::listen() {
  if (impl_->port < 0) bind();
  impl_->http.listen_after_bind();
}

void Server::stop() {
  if (impl_->http.is_running()) impl_->http.stop();
}

}  // namespace topo::serve
