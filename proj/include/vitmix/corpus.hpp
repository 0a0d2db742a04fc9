// Procedural histology-like corpus with controlled anatomy and appearance.
//
// Anatomy (the class signal) is a field of elongated blobs whose dominant
// orientation depends on the binary label: class 0 blobs lie horizontally,
// class 1 vertically. The drawing distribution is identical across domains.
//
// Appearance (the domain signal) is an invertible color pipeline applied on
// top of the grayscale structure: per-channel affine, rotation of the color
// vector around the gray axis, a fixed per-domain noise texture, then a
// global affine squash that keeps every value inside (0,1) without clamping.
// Because each stage is invertible, undoing a domain's color map recovers
// the structure exactly, which the generator self-tests rely on.
//
// Train domains occupy a compact region of the appearance parameter space;
// the val and test domains sit outside the training hull (most visibly in
// hue angle and red gain), so those splits are out-of-distribution by
// construction.
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vitmix/common.hpp"
#include "vitmix/image_io.hpp"
#include "vitmix/rng.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

struct DomainSpec {
  int id = 0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  double hue_angle = 0.0; // rotation around the gray axis, radians
  double noise_amp = 0.0;
  // Fixed sinusoid noise texture parameters, one set per channel.
  std::array<std::array<double, 5>, 3> noise_freq{};
  std::array<std::array<double, 3>, 3> noise_phase{};
};

constexpr int kDomainCount = 8;
// Squash applied after the color pipeline; chosen so worst-case values stay
// strictly inside (0,1), keeping the pipeline invertible (no clamping).
constexpr double kSquashScale = 0.65;
constexpr double kSquashBias = 0.12;

inline const DomainSpec& domain_spec(int id) {
  if (id < 0 || id >= kDomainCount)
    throw ConfigError("unknown domain id " + std::to_string(id) + " (have 0.." +
                      std::to_string(kDomainCount - 1) + ")");
  static const std::vector<DomainSpec> table = [] {
    // gains/biases/hues: domains 0-2 (train) stay in a tight range; 3 (val)
    // and 4 (test) sit outside it on the hue axis and red gain.
    const std::array<std::array<double, 3>, kDomainCount> gains = {{
        {1.06, 0.96, 0.93},
        {1.00, 1.00, 1.00},
        {0.94, 1.02, 1.06},
        {1.10, 0.90, 1.08},
        {0.84, 1.12, 0.88},
        {1.03, 0.98, 0.97},
        {0.97, 1.01, 1.03},
        {1.08, 0.93, 1.02},
    }};
    const std::array<std::array<double, 3>, kDomainCount> biases = {{
        {0.02, -0.01, -0.02},
        {0.00, 0.00, 0.00},
        {-0.02, 0.01, 0.02},
        {0.03, -0.03, 0.01},
        {-0.04, 0.03, -0.02},
        {0.01, 0.00, -0.01},
        {-0.01, 0.00, 0.01},
        {0.02, -0.02, 0.00},
    }};
    const std::array<double, kDomainCount> hues = {-0.35, 0.0, 0.35, 0.75, -0.95, 0.15, -0.15, 0.55};
    const std::array<double, kDomainCount> amps = {0.025, 0.02, 0.03, 0.035, 0.045, 0.022, 0.028, 0.032};
    std::vector<DomainSpec> t(kDomainCount);
    for (int d = 0; d < kDomainCount; ++d) {
      t[static_cast<std::size_t>(d)].id = d;
      t[static_cast<std::size_t>(d)].gain = gains[static_cast<std::size_t>(d)];
      t[static_cast<std::size_t>(d)].bias = biases[static_cast<std::size_t>(d)];
      t[static_cast<std::size_t>(d)].hue_angle = hues[static_cast<std::size_t>(d)];
      t[static_cast<std::size_t>(d)].noise_amp = amps[static_cast<std::size_t>(d)];
      Rng nr = Rng::split(0x6f1d3ull + static_cast<std::uint64_t>(d), "domain-noise");
      for (int c = 0; c < 3; ++c) {
        for (int k = 0; k < 5; ++k)
          t[static_cast<std::size_t>(d)].noise_freq[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)] =
              nr.uniform(1.0, 4.0);
        for (int k = 0; k < 3; ++k)
          t[static_cast<std::size_t>(d)].noise_phase[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)] =
              nr.uniform(0.0, 6.283185307179586);
      }
    }
    return t;
  }();
  return table[static_cast<std::size_t>(id)];
}

namespace detail {

// Rotation of an RGB vector around the gray axis (1,1,1)/sqrt(3).
inline std::array<std::array<double, 3>, 3> hue_rotation(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = 1.0 / std::sqrt(3.0);
  std::array<std::array<double, 3>, 3> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double v = (1.0 - c) * u * u;
      if (i == j) v += c;
      r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
    }
  // skew-symmetric part: s * [u]_x
  r[0][1] += -s * u;
  r[0][2] += s * u;
  r[1][0] += s * u;
  r[1][2] += -s * u;
  r[2][0] += -s * u;
  r[2][1] += s * u;
  return r;
}

inline double domain_noise_at(const DomainSpec& d, int channel, double x, double y,
                              double size) {
  const auto& f = d.noise_freq[static_cast<std::size_t>(channel)];
  const auto& p = d.noise_phase[static_cast<std::size_t>(channel)];
  const double tau = 6.283185307179586;
  const double a = std::sin(tau * (f[0] * x + f[1] * y) / size + p[0]) *
                   std::cos(tau * f[2] * y / size + p[1]);
  const double b = 0.5 * std::sin(tau * (f[3] * x - f[4] * y) / size + p[2]);
  return (a + b) / 1.5;
}

} // namespace detail

// Grayscale anatomy field (H, W) in (0.3, 0.78]: dark oriented blobs on a
// light background. The orientation distribution is the only class signal.
template <class S>
Tensor<S> generate_structure(int label, Rng& rng, std::int64_t size = 32) {
  if (label != 0 && label != 1)
    throw ConfigError("generate_structure: binary labels only, got " + std::to_string(label));
  std::vector<double> field(static_cast<std::size_t>(size * size), 0.0);
  const int blobs = 9;
  for (int b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(2.0, static_cast<double>(size) - 2.0);
    const double cy = rng.uniform(2.0, static_cast<double>(size) - 2.0);
    const double sig_major = rng.uniform(3.0, 4.5);
    const double sig_minor = rng.uniform(1.0, 1.6);
    const double amp = rng.uniform(0.6, 1.0);
    const double mean_angle = label == 0 ? 0.0 : 1.5707963267948966;
    const double theta = mean_angle + 0.22 * rng.normal();
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double u = ct * dx + st * dy;  // along the major axis
        const double v = -st * dx + ct * dy; // across it
        field[static_cast<std::size_t>(y * size + x)] +=
            amp * std::exp(-(u * u / (2.0 * sig_major * sig_major) +
                             v * v / (2.0 * sig_minor * sig_minor)));
      }
  }
  Tensor<S> out = Tensor<S>::zeros({size, size});
  S* px = out.mutable_data();
  for (std::int64_t i = 0; i < size * size; ++i) {
    const double s = field[static_cast<std::size_t>(i)];
    px[i] = static_cast<S>(0.78 - 0.48 * (s / (0.6 + s)));
  }
  return out;
}

// Horizontal-gradient energy fraction of a grayscale field. Vertically
// elongated blobs (class 1) vary faster along x, pushing the value above
// 0.5; horizontally elongated ones stay below. This is the generator's own
// class discriminant used in self-tests.
template <class S>
double structure_statistic(const Tensor<S>& gray) {
  if (gray.ndim() != 2)
    throw ShapeError("structure_statistic: expected (H,W), got " + shape_str(gray.shape()));
  const std::int64_t h = gray.dim(0), w = gray.dim(1);
  const S* g = gray.data();
  double ex = 0.0, ey = 0.0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (x + 1 < w) {
        const double d = static_cast<double>(g[y * w + x + 1]) - static_cast<double>(g[y * w + x]);
        ex += d * d;
      }
      if (y + 1 < h) {
        const double d = static_cast<double>(g[(y + 1) * w + x]) - static_cast<double>(g[y * w + x]);
        ey += d * d;
      }
    }
  const double denom = ex + ey;
  return denom == 0.0 ? 0.5 : ex / denom;
}

// Apply a domain's color pipeline to a grayscale structure -> (3, H, W).
template <class S>
Tensor<S> apply_characteristic(const Tensor<S>& structure, int domain_id) {
  const DomainSpec& d = domain_spec(domain_id);
  const std::int64_t h = structure.dim(0), w = structure.dim(1);
  const auto rot = detail::hue_rotation(d.hue_angle);
  Tensor<S> out = Tensor<S>::zeros({3, h, w});
  const S* g = structure.data();
  S* px = out.mutable_data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double gv = static_cast<double>(g[y * w + x]);
      std::array<double, 3> v{};
      for (int c = 0; c < 3; ++c)
        v[static_cast<std::size_t>(c)] =
            d.gain[static_cast<std::size_t>(c)] * gv + d.bias[static_cast<std::size_t>(c)];
      std::array<double, 3> r{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          r[static_cast<std::size_t>(i)] +=
              rot[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
      for (int c = 0; c < 3; ++c) {
        const double n = detail::domain_noise_at(d, c, static_cast<double>(x),
                                                 static_cast<double>(y), static_cast<double>(w));
        const double val = kSquashBias + kSquashScale * (r[static_cast<std::size_t>(c)] + d.noise_amp * n);
        px[(c * h + y) * w + x] = static_cast<S>(val);
      }
    }
  return out;
}

// Exact inverse of apply_characteristic given the domain id.
template <class S>
Tensor<S> recover_structure(const Tensor<S>& image, int domain_id) {
  const DomainSpec& d = domain_spec(domain_id);
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("recover_structure: expected (3,H,W), got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(1), w = image.dim(2);
  const auto rot = detail::hue_rotation(-d.hue_angle); // transpose == inverse
  Tensor<S> out = Tensor<S>::zeros({h, w});
  const S* px = image.data();
  S* g = out.mutable_data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      std::array<double, 3> v{};
      for (int c = 0; c < 3; ++c) {
        const double n = detail::domain_noise_at(d, c, static_cast<double>(x),
                                                 static_cast<double>(y), static_cast<double>(w));
        v[static_cast<std::size_t>(c)] =
            (static_cast<double>(px[(c * h + y) * w + x]) - kSquashBias) / kSquashScale -
            d.noise_amp * n;
      }
      std::array<double, 3> r{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          r[static_cast<std::size_t>(i)] +=
              rot[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
      double acc = 0.0;
      for (int c = 0; c < 3; ++c)
        acc += (r[static_cast<std::size_t>(c)] - d.bias[static_cast<std::size_t>(c)]) /
               d.gain[static_cast<std::size_t>(c)];
      g[y * w + x] = static_cast<S>(acc / 3.0);
    }
  return out;
}

template <class S>
struct DomainSample {
  Tensor<S> image; // (3, H, W), values in (0,1)
  int label = -1;  // -1 when withheld (unlabeled pool)
  int domain = 0;
  bool labeled = true;
};

// Deterministic per-sample generation: the structure seed is derived from
// (corpus seed, split, domain, index), so regeneration is byte-identical and
// independent of generation order.
template <class S>
DomainSample<S> generate_sample(int label, int domain_id, Rng& rng, std::int64_t size = 32) {
  DomainSample<S> s;
  s.label = label;
  s.domain = domain_id;
  Tensor<S> structure = generate_structure<S>(label, rng, size);
  s.image = apply_characteristic(structure, domain_id);
  return s;
}

// ---------------------------------------------------------------------------
// Manifest, corpus building, index I/O
// ---------------------------------------------------------------------------

struct CorpusManifest {
  std::uint64_t seed = 42;
  std::int64_t image_size = 32;
  std::vector<int> train_domains = {0, 1, 2};
  int val_domain = 3;
  int test_domain = 4;
  std::int64_t labeled_per_domain = 1000;
  std::int64_t unlabeled_per_domain = 1000;
  std::int64_t val_count = 500;
  std::int64_t test_count = 500;
  int generator_version = 1;

  void validate() const {
    for (int d : train_domains) {
      domain_spec(d);
      if (d == val_domain || d == test_domain)
        throw ConfigError("manifest: val/test domains must be disjoint from train domains");
    }
    domain_spec(val_domain);
    domain_spec(test_domain);
    if (val_domain == test_domain)
      throw ConfigError("manifest: val and test domains must differ");
    if (train_domains.empty() || labeled_per_domain <= 0)
      throw ConfigError("manifest: need at least one train domain with labeled samples");
  }

  static CorpusManifest from_kv(const KvConfig& kv) {
    CorpusManifest m;
    m.seed = static_cast<std::uint64_t>(kv.get_i64_or("seed", 42));
    m.image_size = kv.get_i64_or("image_size", 32);
    if (kv.has("train_domains")) {
      m.train_domains.clear();
      std::istringstream is(kv.get("train_domains"));
      std::string tok;
      while (std::getline(is, tok, ',')) m.train_domains.push_back(std::stoi(tok));
    }
    m.val_domain = static_cast<int>(kv.get_i64_or("val_domain", 3));
    m.test_domain = static_cast<int>(kv.get_i64_or("test_domain", 4));
    m.labeled_per_domain = kv.get_i64_or("labeled_per_domain", 1000);
    m.unlabeled_per_domain = kv.get_i64_or("unlabeled_per_domain", 1000);
    m.val_count = kv.get_i64_or("val_count", 500);
    m.test_count = kv.get_i64_or("test_count", 500);
    m.generator_version = static_cast<int>(kv.get_i64_or("generator_version", 1));
    m.validate();
    return m;
  }

  static CorpusManifest load(const std::filesystem::path& path) {
    return from_kv(KvConfig::load(path));
  }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set_i64("seed", static_cast<std::int64_t>(seed));
    kv.set_i64("image_size", image_size);
    std::string td;
    for (std::size_t i = 0; i < train_domains.size(); ++i) {
      if (i) td += ",";
      td += std::to_string(train_domains[i]);
    }
    kv.set("train_domains", td);
    kv.set_i64("val_domain", val_domain);
    kv.set_i64("test_domain", test_domain);
    kv.set_i64("labeled_per_domain", labeled_per_domain);
    kv.set_i64("unlabeled_per_domain", unlabeled_per_domain);
    kv.set_i64("val_count", val_count);
    kv.set_i64("test_count", test_count);
    kv.set_i64("generator_version", generator_version);
    return kv;
  }
};

struct IndexEntry {
  std::string path; // relative to the corpus root
  int label = -1;   // -1 encodes the "-" (withheld) marker
  int domain = 0;
  std::string split; // train | unlabeled | val | test
};

inline void write_index(const std::filesystem::path& root,
                        const std::vector<IndexEntry>& entries) {
  CsvWriter csv(root / "index.csv", "path,label,domain,split");
  for (const auto& e : entries)
    csv.row({e.path, e.label < 0 ? "-" : std::to_string(e.label), std::to_string(e.domain),
             e.split});
}

inline std::vector<IndexEntry> read_index(const std::filesystem::path& root) {
  std::ifstream in(root / "index.csv");
  if (!in) throw IoError("cannot open corpus index: " + (root / "index.csv").string());
  std::vector<IndexEntry> out;
  std::string line;
  std::getline(in, line); // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    IndexEntry e;
    std::string label;
    std::getline(is, e.path, ',');
    std::getline(is, label, ',');
    std::string dom;
    std::getline(is, dom, ',');
    std::getline(is, e.split, ',');
    e.label = label == "-" ? -1 : std::stoi(label);
    e.domain = std::stoi(dom);
    out.push_back(std::move(e));
  }
  return out;
}

namespace detail {
inline std::uint64_t sample_seed(const CorpusManifest& m, const std::string& split,
                                 int domain, std::int64_t index) {
  std::uint64_t h = m.seed;
  h = fnv1a(split.data(), split.size(), h ^ 0x9e3779b97f4a7c15ull);
  h ^= static_cast<std::uint64_t>(domain) * 0xff51afd7ed558ccdull;
  h ^= static_cast<std::uint64_t>(index) * 0xc4ceb9fe1a85ec53ull;
  return h;
}
} // namespace detail

// Generates the corpus on disk: PPM images plus index.csv and a manifest
// echo. Labels alternate deterministically, so every split is class-balanced.
template <class S>
std::vector<IndexEntry> build_corpus(const CorpusManifest& m,
                                     const std::filesystem::path& out_dir) {
  m.validate();
  std::filesystem::create_directories(out_dir / "images");
  std::vector<IndexEntry> entries;

  auto emit = [&](const std::string& split, int domain, std::int64_t count, bool labeled) {
    for (std::int64_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % 2);
      Rng rng(detail::sample_seed(m, split, domain, i));
      DomainSample<S> s = generate_sample<S>(label, domain, rng, m.image_size);
      char name[64];
      std::snprintf(name, sizeof(name), "%s_d%d_%06lld.ppm", split.c_str(), domain,
                    static_cast<long long>(i));
      const std::string rel = std::string("images/") + name;
      write_image(s.image, out_dir / rel);
      entries.push_back({rel, labeled ? label : -1, domain, split});
    }
  };

  for (int d : m.train_domains) emit("train", d, m.labeled_per_domain, true);
  for (int d : m.train_domains) emit("unlabeled", d, m.unlabeled_per_domain, false);
  emit("val", m.val_domain, m.val_count, true);
  emit("test", m.test_domain, m.test_count, true);

  write_index(out_dir, entries);
  m.to_kv().save(out_dir / "manifest.txt");
  return entries;
}

// ---------------------------------------------------------------------------
// In-memory dataset
// ---------------------------------------------------------------------------

template <class S>
struct Dataset {
  std::vector<Tensor<S>> images;
  std::vector<int> labels;  // -1 for unlabeled
  std::vector<int> domains;
  std::vector<std::string> splits;
  std::map<std::string, std::vector<std::size_t>> by_split;

  std::size_t size() const { return images.size(); }

  const std::vector<std::size_t>& split_indices(const std::string& name) const {
    auto it = by_split.find(name);
    if (it == by_split.end())
      throw ConfigError("dataset has no split named '" + name + "'");
    return it->second;
  }

  static Dataset load(const std::filesystem::path& root) {
    Dataset ds;
    for (const auto& e : read_index(root)) {
      ds.by_split[e.split].push_back(ds.images.size());
      ds.images.push_back(read_image<S>(root / e.path));
      ds.labels.push_back(e.label);
      ds.domains.push_back(e.domain);
      ds.splits.push_back(e.split);
    }
    if (ds.images.empty()) throw IoError("corpus at " + root.string() + " is empty");
    return ds;
  }
};

// Re-register an existing PPM corpus as new domains, optionally resampling
// to the configured image size. domain_map maps source domain ids to target
// ids; missing keys keep their id.
template <class S>
std::vector<IndexEntry> ingest_folder(const std::filesystem::path& src,
                                      const std::map<int, int>& domain_map,
                                      const std::filesystem::path& out_dir,
                                      std::int64_t target_size = 0) {
  auto src_entries = read_index(src);
  std::filesystem::create_directories(out_dir / "images");
  std::vector<IndexEntry> entries;
  std::int64_t counter = 0;
  for (const auto& e : src_entries) {
    Tensor<S> img = read_image<S>(src / e.path);
    if (target_size > 0 && (img.dim(1) != target_size || img.dim(2) != target_size))
      img = resize_bicubic(img, target_size, target_size);
    IndexEntry out = e;
    auto it = domain_map.find(e.domain);
    if (it != domain_map.end()) out.domain = it->second;
    char name[64];
    std::snprintf(name, sizeof(name), "ing_%06lld.ppm", static_cast<long long>(counter++));
    out.path = std::string("images/") + name;
    write_image(img, out_dir / out.path);
    entries.push_back(std::move(out));
  }
  write_index(out_dir, entries);
  return entries;
}

} // namespace vitmix
