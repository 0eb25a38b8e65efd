#include "topo/datagen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <thread>

namespace topo::data {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

namespace {

// Uniform mappings written out by hand: the standard distributions are not
// guaranteed to produce the same numbers across library implementations.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int n) {
  return static_cast<int>(rng() % static_cast<std::uint64_t>(n));
}

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (size_t k = v.size(); k > 1; --k) {
    const size_t j = static_cast<size_t>(rng() % k);
    std::swap(v[k - 1], v[j]);
  }
}

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

ProblemSpec draw_spec(std::mt19937_64& rng, int nx, int ny, const std::vector<ElementCoord>& perimeter) {
  ProblemSpec s;
  std::vector<int> groups(kCatalogSize);
  for (int g = 0; g < kCatalogSize; ++g) groups[static_cast<size_t>(g)] = g;
  shuffle(groups, rng);
  const int n_bc = 1 + uniform_int(rng, 4);
  s.bc_groups.assign(groups.begin(), groups.begin() + n_bc);
  std::sort(s.bc_groups.begin(), s.bc_groups.end());

  s.load_element = perimeter[static_cast<size_t>(uniform_int(rng, static_cast<int>(perimeter.size())))];
  s.load_node = load_node(s, nx, ny);
  const int k = uniform_int(rng, kNumLoadAngles);
  s.load_angle_index = k;
  std::tie(s.fx, s.fy) = angle_direction(k);
  // Rounded through f32 so the stored record reproduces the spec exactly.
  s.volume_fraction = static_cast<float>(0.3 + 0.2 * uniform01(rng));
  return s;
}

bool acceptable(const ProblemSpec& s, const BcCatalog& catalog, int nx) {
  std::set<int> fixed;
  for (int g : s.bc_groups) {
    const auto& nodes = catalog.groups()[static_cast<size_t>(g)].nodes;
    fixed.insert(nodes.begin(), nodes.end());
  }
  // One pinned node still leaves a rigid rotation about it.
  if (fixed.size() < 2) return false;
  const auto n = *s.load_node;
  return !fixed.contains(n.y * (nx + 1) + n.x);
}

ProblemSpec sample_impl(std::uint64_t seed, int nx, int ny, bool dynamic) {
  std::mt19937_64 rng(seed);
  const auto catalog = BcCatalog::make(nx, ny);
  const auto perimeter = perimeter_elements(nx, ny);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    ProblemSpec s = draw_spec(rng, nx, ny, perimeter);
    if (dynamic) s.dynamic_kind = uniform_int(rng, 2) == 0 ? DynamicKind::sine : DynamicKind::impulse;
    if (acceptable(s, catalog, nx)) return s;
  }
  throw std::runtime_error("sample_problem: no admissible spec after 1000 attempts");
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 of the combined state
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

ProblemSpec sample_problem(std::uint64_t seed, int nx, int ny) { return sample_impl(seed, nx, ny, false); }

ProblemSpec sample_dynamic_problem(std::uint64_t seed, int nx, int ny) {
  return sample_impl(seed, nx, ny, true);
}

// ---- spectra --------------------------------------------------------------------

std::vector<double> dft_magnitudes(const fea::DynamicLoadSignal& signal) {
  const int n = signal.n_steps;
  if (n < 1 || signal.samples.size() < static_cast<size_t>(n)) {
    throw std::invalid_argument("dft: signal shorter than its step count");
  }
  std::vector<double> out(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    std::complex<double> acc = 0.0;
    for (int t = 0; t < n; ++t) {
      // Reduce the phase index first so large k*t stays exact.
      const double phase = -2.0 * std::numbers::pi * static_cast<double>((static_cast<long long>(k) * t) % n) / n;
      acc += signal.samples[static_cast<size_t>(t)] * std::polar(1.0, phase);
    }
    out[static_cast<size_t>(k)] = std::abs(acc);
  }
  return out;
}

std::array<double, kNumFftFeatures> fft_features(const fea::DynamicLoadSignal& signal) {
  if (signal.n_steps < 20) throw std::invalid_argument("fft_features: signal needs at least 20 steps");
  const auto mags = dft_magnitudes(signal);
  std::array<double, kNumFftFeatures> out{};
  for (int k = 0; k < kNumFftFeatures; ++k) out[static_cast<size_t>(k)] = mags[static_cast<size_t>(k)] / signal.n_steps;
  return out;
}

// ---- samples ----------------------------------------------------------------------

ProblemSpec Sample::problem(int nx, int ny) const {
  ProblemSpec s;
  s.bc_groups.assign(bc_groups.begin(), bc_groups.end());
  const NodeCoord n{static_cast<int>(std::lround(static_cast<double>(load_x) * nx)),
                    static_cast<int>(std::lround(static_cast<double>(load_y) * ny))};
  s.load_node = n;
  s.load_element = {std::clamp(n.x, 0, nx - 1), std::clamp(n.y, 0, ny - 1)};
  const double norm = std::hypot(static_cast<double>(fx), static_cast<double>(fy));
  if (norm == 0.0) throw DatasetError("sample " + std::to_string(id) + ": zero load vector");
  s.fx = fx / norm;
  s.fy = fy / norm;
  s.volume_fraction = vf;
  s.dynamic_kind = dynamic_kind;
  return s;
}

fea::FieldMaps Sample::fields(int nx, int ny) const {
  fea::FieldMaps f;
  f.nx = nx;
  f.ny = ny;
  f.von_mises.assign(von_mises.begin(), von_mises.end());
  f.strain_energy.assign(strain_energy.begin(), strain_energy.end());
  f.normalized = true;
  return f;
}

fea::DensityField Sample::topology_field(int nx, int ny) const {
  fea::DensityField d;
  d.nx = nx;
  d.ny = ny;
  d.values.assign(topology.begin(), topology.end());
  return d;
}

Sample make_sample(std::uint32_t id, const ProblemSpec& spec, const fea::FieldMaps& fields,
                   const fea::DensityField& topology, double true_compliance, int nx, int ny) {
  Sample s;
  s.id = id;
  s.vf = static_cast<float>(spec.volume_fraction);
  const auto n = load_node(spec, nx, ny);
  s.load_x = static_cast<float>(static_cast<double>(n.x) / nx);
  s.load_y = static_cast<float>(static_cast<double>(n.y) / ny);
  s.fx = static_cast<float>(spec.fx);
  s.fy = static_cast<float>(spec.fy);
  for (int g : spec.bc_groups) s.bc_groups.push_back(static_cast<std::uint8_t>(g));
  s.dynamic_kind = spec.dynamic_kind;
  s.true_compliance = static_cast<float>(true_compliance);
  s.von_mises = to_float(fields.von_mises);
  s.strain_energy = to_float(fields.strain_energy);
  s.topology = to_float(topology.values);
  return s;
}

Sample generate_sample(const ProblemSpec& spec, const fea::GridDomain& domain,
                       const GenerationSettings& settings, std::uint32_t id) {
  const auto r = resolve(spec, domain);
  const auto fields = fea::input_fields(domain, r.bc, r.load);
  simp::SimpConfig config = settings.simp;
  simp::OptimizationResult opt;
  std::optional<fea::DynamicLoadSignal> signal;
  if (spec.dynamic_kind == DynamicKind::none) {
    opt = simp::optimize_static(domain, spec, config);
  } else {
    signal = fea::DynamicLoadSignal::make(signal_kind(spec.dynamic_kind), settings.dynamics.n_steps,
                                          settings.dynamics.duration);
    opt = simp::optimize_dynamic(domain, spec, *signal, config, settings.dynamics);
  }
  const double c = simp::design_compliance(domain, spec, opt.density, settings.dynamics);
  if (!std::isfinite(c)) throw std::runtime_error("ground-truth design has non-finite compliance");
  Sample s = make_sample(id, spec, fields, opt.density, c, domain.nx, domain.ny);
  if (signal) {
    const auto f = fft_features(*signal);
    for (int k = 0; k < kNumFftFeatures; ++k) s.fft[static_cast<size_t>(k)] = static_cast<float>(f[static_cast<size_t>(k)]);
  }
  return s;
}

// ---- symmetries ---------------------------------------------------------------------

std::array<Symmetry, 8> Symmetry::all() {
  return {{
      {1, 0, 0, 1},    // identity
      {0, -1, 1, 0},   // rotate 90
      {-1, 0, 0, -1},  // rotate 180
      {0, 1, -1, 0},   // rotate 270
      {-1, 0, 0, 1},   // mirror x
      {1, 0, 0, -1},   // mirror y
      {0, 1, 1, 0},    // transpose
      {0, -1, -1, 0},  // anti-transpose
  }};
}

Symmetry Symmetry::then(const Symmetry& n) const {
  return {n.a * a + n.b * c, n.a * b + n.b * d, n.c * a + n.d * c, n.c * b + n.d * d};
}

namespace {

// Points in doubled, centred coordinates so that node and element centres are
// both integral.
std::pair<int, int> apply(const Symmetry& s, int u, int v) { return {s.a * u + s.b * v, s.c * u + s.d * v}; }

std::vector<int> group_permutation(const Symmetry& s, int size) {
  const auto catalog = BcCatalog::make(size, size);
  std::vector<std::vector<int>> images;
  for (const auto& g : catalog.groups()) {
    std::vector<int> img;
    for (int node : g.nodes) {
      const NodeCoord n{node % (size + 1), node / (size + 1)};
      const auto m = transform_node(s, n, size);
      img.push_back(m.y * (size + 1) + m.x);
    }
    std::sort(img.begin(), img.end());
    images.push_back(std::move(img));
  }
  std::vector<int> perm(catalog.groups().size(), -1);
  for (size_t g = 0; g < images.size(); ++g) {
    for (size_t h = 0; h < catalog.groups().size(); ++h) {
      if (catalog.groups()[h].nodes == images[g]) perm[g] = static_cast<int>(h);
    }
    if (perm[g] < 0) throw std::logic_error("catalog is not closed under the symmetry");
  }
  return perm;
}

std::vector<float> permute_field(const std::vector<float>& f, const Symmetry& s, int size) {
  std::vector<float> out(f.size());
  for (int j = 0; j < size; ++j) {
    for (int i = 0; i < size; ++i) {
      const auto t = transform_element(s, {i, j}, size);
      out[static_cast<size_t>(t.j) * size + t.i] = f[static_cast<size_t>(j) * size + i];
    }
  }
  return out;
}

}  // namespace

NodeCoord transform_node(const Symmetry& s, NodeCoord n, int size) {
  const auto [u, v] = apply(s, 2 * n.x - size, 2 * n.y - size);
  return {(u + size) / 2, (v + size) / 2};
}

ElementCoord transform_element(const Symmetry& s, ElementCoord e, int size) {
  const auto [u, v] = apply(s, 2 * e.i + 1 - size, 2 * e.j + 1 - size);
  return {(u + size - 1) / 2, (v + size - 1) / 2};
}

Sample apply_symmetry(const Sample& sample, const Symmetry& s, int size) {
  const size_t cells = static_cast<size_t>(size) * size;
  if (sample.topology.size() != cells || sample.von_mises.size() != cells ||
      sample.strain_energy.size() != cells) {
    throw std::invalid_argument("augment: sample arrays do not match a square grid of the given size");
  }
  Sample out = sample;
  const NodeCoord n{static_cast<int>(std::lround(static_cast<double>(sample.load_x) * size)),
                    static_cast<int>(std::lround(static_cast<double>(sample.load_y) * size))};
  const auto m = transform_node(s, n, size);
  out.load_x = static_cast<float>(static_cast<double>(m.x) / size);
  out.load_y = static_cast<float>(static_cast<double>(m.y) / size);
  // Entries of s are 0 or +-1, so this is exact in f32.
  out.fx = static_cast<float>(s.a * sample.fx + s.b * sample.fy);
  out.fy = static_cast<float>(s.c * sample.fx + s.d * sample.fy);
  const auto perm = group_permutation(s, size);
  out.bc_groups.clear();
  for (auto g : sample.bc_groups) out.bc_groups.push_back(static_cast<std::uint8_t>(perm[g]));
  std::sort(out.bc_groups.begin(), out.bc_groups.end());
  out.von_mises = permute_field(sample.von_mises, s, size);
  out.strain_energy = permute_field(sample.strain_energy, s, size);
  out.topology = permute_field(sample.topology, s, size);
  return out;
}

std::vector<Sample> augment(const Sample& sample, int size) {
  std::vector<Sample> out;
  out.reserve(8);
  for (const auto& s : Symmetry::all()) out.push_back(apply_symmetry(sample, s, size));
  return out;
}

// ---- datasets ---------------------------------------------------------------------------

std::vector<std::uint32_t> DatasetManifest::metric_subset(std::size_t limit) const {
  const size_t n = std::min(limit, validation.size());
  return {validation.begin(), validation.begin() + static_cast<std::ptrdiff_t>(n)};
}

void assign_split(DatasetManifest& manifest, std::size_t count, std::uint64_t seed) {
  std::vector<std::uint32_t> order(count);
  for (size_t k = 0; k < count; ++k) order[k] = static_cast<std::uint32_t>(k);
  std::mt19937_64 rng(derive_seed(seed, 0x5711));
  shuffle(order, rng);
  const auto n_val = static_cast<size_t>(std::llround(0.1 * static_cast<double>(count)));
  manifest.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  manifest.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(manifest.validation.begin(), manifest.validation.end());
  std::sort(manifest.train.begin(), manifest.train.end());
}

Dataset generate_dataset(const GenerationOptions& options) {
  fea::GridDomain domain;
  domain.nx = options.nx;
  domain.ny = options.ny;
  domain.validate();

  std::vector<std::optional<Sample>> slots(options.count);
  std::atomic<size_t> next{0};
  std::atomic<size_t> done{0};
  std::mutex report;
  auto worker = [&] {
    for (size_t k = next++; k < options.count; k = next++) {
      const auto seed = derive_seed(options.seed, k);
      try {
        const auto spec = options.dynamic ? sample_dynamic_problem(seed, options.nx, options.ny)
                                          : sample_problem(seed, options.nx, options.ny);
        slots[k] = generate_sample(spec, domain, options.settings, static_cast<std::uint32_t>(k));
      } catch (const std::exception& e) {
        std::lock_guard lock(report);
        if (options.on_failure) options.on_failure(k, e.what());
      }
      const size_t finished = ++done;
      if (options.on_progress) {
        std::lock_guard lock(report);
        options.on_progress(finished);
      }
    }
  };
  const int n_workers = std::max(1, options.workers);
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<Sample> base;
  for (auto& s : slots) {
    if (s) base.push_back(std::move(*s));
  }

  Dataset ds;
  ds.manifest.nx = options.nx;
  ds.manifest.ny = options.ny;
  ds.manifest.seed = options.seed;
  ds.manifest.augmented = options.augment;
  DatasetManifest split;
  assign_split(split, base.size(), options.seed);

  if (!options.augment) {
    ds.samples = std::move(base);
    ds.manifest.train = split.train;
    ds.manifest.validation = split.validation;
  } else {
    if (options.nx != options.ny) throw std::invalid_argument("augmentation needs a square grid");
    std::vector<bool> is_val(base.size(), false);
    for (auto v : split.validation) is_val[v] = true;
    for (size_t k = 0; k < base.size(); ++k) {
      const auto idx = static_cast<std::uint32_t>(ds.samples.size());
      if (is_val[k]) {
        ds.manifest.validation.push_back(idx);
        ds.samples.push_back(std::move(base[k]));
        continue;
      }
      for (auto& img : augment(base[k], options.nx)) {
        ds.manifest.train.push_back(static_cast<std::uint32_t>(ds.samples.size()));
        ds.samples.push_back(std::move(img));
      }
    }
  }
  ds.manifest.count = ds.samples.size();
  return ds;
}

// ---- I/O ----------------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'O', 'P', 'F'};

template <class T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

void put_floats(std::string& buf, const std::vector<float>& v) {
  buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  bool at_end() const { return pos_ == data_.size(); }

  template <class T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }

  void read(void* dst, size_t n) {
    if (data_.size() - pos_ < n) throw Truncated{};
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  struct Truncated {};

 private:
  std::string data_;
  size_t pos_ = 0;
};

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  const auto& m = dataset.manifest;
  const size_t cells = static_cast<size_t>(m.nx) * m.ny;
  if (m.count != dataset.samples.size()) throw std::invalid_argument("manifest count does not match samples");
  std::filesystem::create_directories(dir);

  std::string buf(kMagic, 4);
  put(buf, kFormatVersion);
  for (const auto& s : dataset.samples) {
    if (s.von_mises.size() != cells || s.strain_energy.size() != cells || s.topology.size() != cells) {
      throw std::invalid_argument("sample " + std::to_string(s.id) + ": arrays do not match the grid");
    }
    put(buf, s.id);
    put(buf, s.vf);
    put(buf, s.load_x);
    put(buf, s.load_y);
    put(buf, s.fx);
    put(buf, s.fy);
    put(buf, static_cast<std::uint8_t>(s.bc_groups.size()));
    for (auto g : s.bc_groups) put(buf, g);
    put(buf, static_cast<std::uint8_t>(s.dynamic_kind));
    for (float f : s.fft) put(buf, f);
    put(buf, s.true_compliance);
    put_floats(buf, s.von_mises);
    put_floats(buf, s.strain_energy);
    put_floats(buf, s.topology);
  }
  std::ofstream bin(dir / "samples.bin", std::ios::binary | std::ios::trunc);
  bin.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!bin) throw DatasetError("cannot write " + (dir / "samples.bin").string());

  nlohmann::json j;
  j["version"] = m.version;
  j["nx"] = m.nx;
  j["ny"] = m.ny;
  j["count"] = m.count;
  j["seed"] = m.seed;
  j["split"] = {{"train", m.train}, {"validation", m.validation}};
  j["augmented"] = m.augmented;
  j["catalog_version"] = m.catalog_version;
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << j.dump(2) << '\n';
  if (!man) throw DatasetError("cannot write " + (dir / "manifest.json").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  auto& m = ds.manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw DatasetError("missing " + (dir / "manifest.json").string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
      m.version = j.at("version").get<std::uint32_t>();
      m.nx = j.at("nx").get<int>();
      m.ny = j.at("ny").get<int>();
      m.count = j.at("count").get<size_t>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.train = j.at("split").at("train").get<std::vector<std::uint32_t>>();
      m.validation = j.at("split").at("validation").get<std::vector<std::uint32_t>>();
      m.augmented = j.at("augmented").get<bool>();
      m.catalog_version = j.at("catalog_version").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(std::string("manifest: ") + e.what());
    }
  }
  if (m.version != kFormatVersion) {
    throw DatasetError("manifest version " + std::to_string(m.version) + " is not supported");
  }
  if (m.nx <= 0 || m.ny <= 0) throw DatasetError("manifest: invalid grid size");

  std::ifstream bin(dir / "samples.bin", std::ios::binary);
  if (!bin) throw DatasetError("missing " + (dir / "samples.bin").string());
  std::string data((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  Reader r(std::move(data));
  try {
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw DatasetError("samples.bin: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kFormatVersion) {
      throw DatasetError("samples.bin: version " + std::to_string(version) + " is not supported");
    }
  } catch (const Reader::Truncated&) {
    throw DatasetError("samples.bin: truncated header");
  }

  const size_t cells = static_cast<size_t>(m.nx) * m.ny;
  ds.samples.reserve(m.count);
  for (size_t k = 0; k < m.count; ++k) {
    try {
      Sample s;
      s.id = r.get<std::uint32_t>();
      s.vf = r.get<float>();
      s.load_x = r.get<float>();
      s.load_y = r.get<float>();
      s.fx = r.get<float>();
      s.fy = r.get<float>();
      const auto n_bc = r.get<std::uint8_t>();
      s.bc_groups.resize(n_bc);
      if (n_bc) r.read(s.bc_groups.data(), n_bc);
      const auto kind = r.get<std::uint8_t>();
      if (kind > 2) throw DatasetError("record " + std::to_string(k) + ": unknown dynamic kind");
      s.dynamic_kind = static_cast<DynamicKind>(kind);
      r.read(s.fft.data(), sizeof(float) * s.fft.size());
      s.true_compliance = r.get<float>();
      for (auto* v : {&s.von_mises, &s.strain_energy, &s.topology}) {
        v->resize(cells);
        r.read(v->data(), cells * sizeof(float));
      }
      ds.samples.push_back(std::move(s));
    } catch (const Reader::Truncated&) {
      throw DatasetError("samples.bin: truncated record " + std::to_string(k));
    }
  }
  if (!r.at_end()) throw DatasetError("samples.bin: trailing bytes after record " + std::to_string(m.count));
  return ds;
}

}  // namespace topo::data
