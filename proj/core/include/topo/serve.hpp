#pragma once

// Inference service. Service holds the request handlers as plain functions of
// a body string returning (status, JSON), so they can be exercised without a
// socket; Server binds them to HTTP routes.

#include "topo/evaluate.hpp"
#include "topo/request.hpp"
#include "topo/vit.hpp"

#include <nlohmann/json.hpp>

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace topo::serve {

struct Response {
  int status = 200;
  nlohmann::json body;
};

struct LoadedModel {
  vit::Model<float> model;
  std::string id;  // file stem + content hash
  std::filesystem::path path;
};

std::shared_ptr<const LoadedModel> load_model(const std::filesystem::path& checkpoint);

enum class JobState { queued, running, done, failed };
std::string to_string(JobState s);

struct JobSnapshot {
  JobState state = JobState::queued;
  int iteration = 0;
  double compliance = 0.0;
  std::string reason;
  fea::DensityField density;
  simp::OptimizationTrace trace;
};

struct ServiceOptions {
  int workers = 1;  // SIMP job threads
  simp::SimpConfig simp;
  simp::DynamicSettings dynamics;
  eval::PostprocessOptions postprocess;
};

class Service {
 public:
  explicit Service(ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  Response health() const;
  Response meta() const;
  Response predict(std::string_view body) const;
  Response solve(std::string_view body);
  Response job(const std::string& id) const;
  Response load_checkpoint(std::string_view body);

  /// Replaces the resident model; throws on an unreadable checkpoint.
  void set_model(std::shared_ptr<const LoadedModel> model);
  std::shared_ptr<const LoadedModel> model() const;

  std::optional<JobSnapshot> job_snapshot(const std::string& id) const;

 private:
  struct Job {
    ProblemRequest request;
    JobSnapshot snap;
  };

  void worker_loop();
  void run_job(const std::string& id);

  ServiceOptions options_;
  mutable std::mutex model_mu_;
  std::shared_ptr<const LoadedModel> model_;

  mutable std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  std::uint64_t next_job_ = 1;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

struct ServerOptions {
  std::string host = "0.0.0.0";
  int port = 8080;
  int workers = 4;  // HTTP threads
  std::string cors_origin = "*";
};

/// Fills port and checkpoint from TOPO_PORT / TOPO_CKPT when they were not
/// given explicitly.
void apply_environment(std::optional<int>& port, std::optional<std::string>& checkpoint);

class Server {
 public:
  Server(Service& service, ServerOptions options);
  ~Server();

  /// Binds the socket; returns the bound port (useful with port 0).
  int bind();
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace topo::serve
