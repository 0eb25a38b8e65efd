#pragma once

// Dataset generation: random problem sampling, SIMP ground truth, input
// fields, square-symmetry augmentation, load-signal spectra, and the on-disk
// dataset format (manifest.json + samples.bin).

#include "topo/fea.hpp"
#include "topo/problem.hpp"
#include "topo/simp.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace topo::data {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr int kNumFftFeatures = 10;

/// One dataset record. Scalars are kept in the single precision they are
/// stored with so that write/read round trips are exact.
struct Sample {
  std::uint32_t id = 0;
  float vf = 0.0f;
  float load_x = 0.0f;  // load node x / nx
  float load_y = 0.0f;  // load node y / ny
  float fx = 0.0f;
  float fy = 0.0f;
  std::vector<std::uint8_t> bc_groups;
  DynamicKind dynamic_kind = DynamicKind::none;
  std::array<float, kNumFftFeatures> fft{};  // zeros for static samples
  float true_compliance = 0.0f;
  std::vector<float> von_mises;      // nx * ny, row 0 at the bottom
  std::vector<float> strain_energy;  // nx * ny
  std::vector<float> topology;       // nx * ny

  /// Problem spec for this record on an nx-by-ny grid. The load node is
  /// explicit; the load element is the incident element (min(x, nx-1), min(y, ny-1)).
  ProblemSpec problem(int nx, int ny) const;
  fea::FieldMaps fields(int nx, int ny) const;
  fea::DensityField topology_field(int nx, int ny) const;

  bool operator==(const Sample&) const = default;
};

struct DatasetManifest {
  std::uint32_t version = kFormatVersion;
  int nx = 64;
  int ny = 64;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string catalog_version{kCatalogVersion};
  bool augmented = false;
  std::vector<std::uint32_t> train;       // record indices
  std::vector<std::uint32_t> validation;  // record indices

  /// First min(500, |validation|) validation records.
  std::vector<std::uint32_t> metric_subset(std::size_t limit = 500) const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic random problem for the given seed; resamples (up to 1000
/// times) when the load node is fixed or fewer than two nodes are fixed.
ProblemSpec sample_problem(std::uint64_t seed, int nx = 64, int ny = 64);

/// Randomly picks sine or impulse for a dynamic variant of sample_problem.
ProblemSpec sample_dynamic_problem(std::uint64_t seed, int nx = 64, int ny = 64);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Magnitudes of DFT bins 0..9 over the first n_steps samples, divided by n_steps.
std::array<double, kNumFftFeatures> fft_features(const fea::DynamicLoadSignal& signal);

/// All n_steps DFT magnitudes, unnormalized.
std::vector<double> dft_magnitudes(const fea::DynamicLoadSignal& signal);

struct GenerationSettings {
  simp::SimpConfig simp;
  simp::DynamicSettings dynamics;
};

Sample make_sample(std::uint32_t id, const ProblemSpec& spec, const fea::FieldMaps& fields,
                   const fea::DensityField& topology, double true_compliance, int nx, int ny);

/// Runs the input-field FEA and the SIMP optimizer for one spec.
Sample generate_sample(const ProblemSpec& spec, const fea::GridDomain& domain,
                       const GenerationSettings& settings = {}, std::uint32_t id = 0);

// ---- square symmetries --------------------------------------------------------

/// Element of the dihedral group of the square, as an integer matrix acting
/// on coordinates centred on the domain.
struct Symmetry {
  int a = 1, b = 0, c = 0, d = 1;  // [[a, b], [c, d]]

  static std::array<Symmetry, 8> all();
  Symmetry then(const Symmetry& next) const;
  bool operator==(const Symmetry&) const = default;
};

NodeCoord transform_node(const Symmetry& s, NodeCoord n, int size);
ElementCoord transform_element(const Symmetry& s, ElementCoord e, int size);

Sample apply_symmetry(const Sample& sample, const Symmetry& s, int size);

/// The 8 images of a sample under the symmetries of the square (identity first).
std::vector<Sample> augment(const Sample& sample, int size);

// ---- datasets -------------------------------------------------------------------

struct GenerationOptions {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  int nx = 64;
  int ny = 64;
  bool dynamic = false;
  bool augment = false;
  int workers = 1;
  GenerationSettings settings;
  /// Called for skipped samples with (index, reason).
  std::function<void(std::size_t, const std::string&)> on_failure;
  /// Called after each finished sample with the number completed so far.
  std::function<void(std::size_t)> on_progress;
};

/// Deterministic 90/10 train/validation split of record indices.
void assign_split(DatasetManifest& manifest, std::size_t count, std::uint64_t seed);

/// Generates samples, splits them, then (optionally) augments the training
/// side only. Failed samples are dropped.
Dataset generate_dataset(const GenerationOptions& options);

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace topo::data
