#pragma once

// Synthetic point-cloud data, file formats, and augmentation.
//
// Generators sample four analytic surfaces uniformly by area and attach
// exact unit normals and per-point part labels.  Surface noise is an
// isotropic gaussian displacement whose norm is rejection-capped at three
// standard deviations, so every noisy point provably stays within
// 3 * noise of the surface.
//
// Text format, one cloud per file:
//   line 1:  N D C label        (points, dims, classes, class id)
//   N lines: D reals [part]     (part label column present for all or none)
// Coordinates print with %.17g and round-trip exactly through double.

#include "pointformer/geometry.hpp"
#include "pointformer/rng.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace pf {

enum class ShapeKind { sphere = 0, cube = 1, cylinder = 2, torus = 3 };
inline constexpr Index kNumShapeKinds = 4;

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::torus: return "torus";
  }
  return "?";
}

template <class S>
struct Sample {
  PointCloud<S> cloud;
  Index label = 0;     // class id
  Index category = 0;  // conditioning id for segmentation
  std::vector<Index> part_labels;
};

namespace detail {

// Displacement with per-axis std `noise`, rejected until its norm is at
// most 3 * noise.
inline void add_capped_noise(double noise, RngStream& rng, double& x, double& y, double& z) {
  if (noise <= 0.0) return;
  double dx, dy, dz;
  do {
    dx = noise * rng.gaussian();
    dy = noise * rng.gaussian();
    dz = noise * rng.gaussian();
  } while (dx * dx + dy * dy + dz * dz > 9.0 * noise * noise);
  x += dx;
  y += dy;
  z += dz;
}

}  // namespace detail

// Cloud layout: columns [x y z nx ny nz].  Geometry per kind:
//   sphere    radius 1; parts: upper / lower hemisphere
//   cube      surface of [-1, 1]^3; parts: the three axis pairs
//   cylinder  radius 0.5, z in [-1, 1]; parts: caps / side
//   torus     ring radius 0.7, tube radius 0.3; parts: inner / outer half
template <class S>
Sample<S> generate_synthetic(ShapeKind kind, Index n, double noise, std::uint64_t seed) {
  if (n < 64) throw UsageError("generate_synthetic: need at least 64 points");
  if (noise < 0.0) throw UsageError("generate_synthetic: noise must be non-negative");
  RngStream rng(derive_seed(seed, 0xDA7Au, static_cast<std::uint64_t>(kind)));

  Sample<S> sample;
  sample.label = static_cast<Index>(kind);
  sample.category = static_cast<Index>(kind);
  sample.cloud.data.resize(n, 6);
  sample.part_labels.resize(static_cast<std::size_t>(n));

  constexpr double pi = std::numbers::pi;
  for (Index i = 0; i < n; ++i) {
    double x = 0, y = 0, z = 0, nx = 0, ny = 0, nz = 0;
    Index part = 0;
    switch (kind) {
      case ShapeKind::sphere: {
        double gx, gy, gz, norm2;
        do {
          gx = rng.gaussian();
          gy = rng.gaussian();
          gz = rng.gaussian();
          norm2 = gx * gx + gy * gy + gz * gz;
        } while (norm2 < 1e-12);
        const double inv = 1.0 / std::sqrt(norm2);
        x = gx * inv;
        y = gy * inv;
        z = gz * inv;
        nx = x;
        ny = y;
        nz = z;
        part = z >= 0.0 ? 0 : 1;
        break;
      }
      case ShapeKind::cube: {
        const Index face = static_cast<Index>(rng.uniform_index(6));
        const double u = rng.uniform(-1.0, 1.0);
        const double v = rng.uniform(-1.0, 1.0);
        const Index axis = face / 2;
        const double sign = (face % 2 == 0) ? 1.0 : -1.0;
        double c[3] = {0, 0, 0};
        c[axis] = sign;
        c[(axis + 1) % 3] = u;
        c[(axis + 2) % 3] = v;
        x = c[0];
        y = c[1];
        z = c[2];
        nx = axis == 0 ? sign : 0.0;
        ny = axis == 1 ? sign : 0.0;
        nz = axis == 2 ? sign : 0.0;
        part = axis;
        break;
      }
      case ShapeKind::cylinder: {
        // Area: side 2*pi*0.5*2, caps 2*pi*0.25 -> P(cap) = 0.2.
        const double r = 0.5;
        if (rng.uniform() < 0.2) {
          const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
          const double rad = r * std::sqrt(rng.uniform());
          const double phi = rng.uniform(0.0, 2.0 * pi);
          x = rad * std::cos(phi);
          y = rad * std::sin(phi);
          z = sign;
          nz = sign;
          part = 0;
        } else {
          const double phi = rng.uniform(0.0, 2.0 * pi);
          x = r * std::cos(phi);
          y = r * std::sin(phi);
          z = rng.uniform(-1.0, 1.0);
          nx = std::cos(phi);
          ny = std::sin(phi);
          part = 1;
        }
        break;
      }
      case ShapeKind::torus: {
        // Accept theta with probability proportional to the local area
        // element (R + r cos theta).
        const double R = 0.7, r = 0.3;
        const double phi = rng.uniform(0.0, 2.0 * pi);
        double theta;
        do {
          theta = rng.uniform(0.0, 2.0 * pi);
        } while (rng.uniform() > (R + r * std::cos(theta)) / (R + r));
        const double ct = std::cos(theta), st = std::sin(theta);
        const double cp = std::cos(phi), sp = std::sin(phi);
        x = (R + r * ct) * cp;
        y = (R + r * ct) * sp;
        z = r * st;
        nx = ct * cp;
        ny = ct * sp;
        nz = st;
        part = ct < 0.0 ? 0 : 1;  // inner ring vs outer ring
        break;
      }
    }
    detail::add_capped_noise(noise, rng, x, y, z);
    sample.cloud.data(i, 0) = S(x);
    sample.cloud.data(i, 1) = S(y);
    sample.cloud.data(i, 2) = S(z);
    sample.cloud.data(i, 3) = S(nx);
    sample.cloud.data(i, 4) = S(ny);
    sample.cloud.data(i, 5) = S(nz);
    sample.part_labels[static_cast<std::size_t>(i)] = part;
  }
  return sample;
}

inline Index parts_for(ShapeKind kind) {
  return kind == ShapeKind::cube ? 3 : 2;
}

// Centers xyz on the centroid and scales the farthest point onto the unit
// sphere.  Normals are directions and stay untouched.  A degenerate cloud
// (all points identical) maps to all zeros.
template <class S>
PointCloud<S> normalize_unit_sphere(PointCloud<S> cloud) {
  require_cloud(cloud, "normalize_unit_sphere");
  auto xyz = cloud.data.template leftCols<3>();
  const Eigen::Matrix<S, 1, 3> centroid = xyz.colwise().mean();
  xyz.rowwise() -= centroid;
  S max_norm = S(0);
  for (Index i = 0; i < cloud.size(); ++i) max_norm = std::max(max_norm, S(xyz.row(i).norm()));
  if (max_norm > S(0)) xyz /= max_norm;
  return cloud;
}

// Uniformly random rotation from a normalised gaussian quaternion.
template <class S>
Matrix2D<S> random_rotation(RngStream& rng) {
  double q[4];
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (double& v : q) {
      v = rng.gaussian();
      norm2 += v * v;
    }
  } while (norm2 < 1e-12);
  const double inv = 1.0 / std::sqrt(norm2);
  const double w = q[0] * inv, x = q[1] * inv, y = q[2] * inv, z = q[3] * inv;
  Matrix2D<S> R(3, 3);
  R(0, 0) = S(1 - 2 * (y * y + z * z));
  R(0, 1) = S(2 * (x * y - w * z));
  R(0, 2) = S(2 * (x * z + w * y));
  R(1, 0) = S(2 * (x * y + w * z));
  R(1, 1) = S(1 - 2 * (x * x + z * z));
  R(1, 2) = S(2 * (y * z - w * x));
  R(2, 0) = S(2 * (x * z - w * y));
  R(2, 1) = S(2 * (y * z + w * x));
  R(2, 2) = S(1 - 2 * (x * x + y * y));
  return R;
}

// Rotates coordinates and normals by the same matrix.
template <class S>
Sample<S> apply_rotation(Sample<S> sample, const Matrix2D<S>& rot) {
  require_shape(rot, 3, 3, "apply_rotation: rotation");
  auto xyz = sample.cloud.data.template leftCols<3>();
  xyz = (xyz * rot.transpose()).eval();
  if (sample.cloud.has_normals()) {
    auto nrm = sample.cloud.data.template middleCols<3>(3);
    nrm = (nrm * rot.transpose()).eval();
  }
  return sample;
}

struct AugmentConfig {
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double translate = 0.1;
  double dropout_max = 0.5;  // upper bound on the dropped fraction
  Index min_keep = 1;
};

// Random isotropic scale, random translation, then point dropout.  The
// cloud keeps its row count: dropped rows are replaced by copies of
// surviving rows (labels travel along), and at least min_keep distinct
// points always survive.
template <class S>
Sample<S> augment(Sample<S> sample, const AugmentConfig& cfg, RngStream& rng) {
  require_cloud(sample.cloud, "augment");
  if (cfg.scale_lo <= 0.0 || cfg.scale_hi < cfg.scale_lo) {
    throw UsageError("augment: invalid scale range");
  }
  if (cfg.dropout_max < 0.0 || cfg.dropout_max >= 1.0) {
    throw UsageError("augment: dropout_max must be in [0, 1)");
  }
  const Index n = sample.cloud.size();
  if (cfg.min_keep < 1 || cfg.min_keep > n) throw UsageError("augment: min_keep out of range");

  auto xyz = sample.cloud.data.template leftCols<3>();
  const S s = S(rng.uniform(cfg.scale_lo, cfg.scale_hi));
  xyz *= s;
  Eigen::Matrix<S, 1, 3> shift;
  for (int c = 0; c < 3; ++c) shift(c) = S(rng.uniform(-cfg.translate, cfg.translate));
  xyz.rowwise() += shift;

  const double ratio = rng.uniform(0.0, cfg.dropout_max);
  std::vector<Index> survivors;
  std::vector<Index> dropped;
  for (Index i = 0; i < n; ++i) {
    if (rng.uniform() < ratio) {
      dropped.push_back(i);
    } else {
      survivors.push_back(i);
    }
  }
  while (static_cast<Index>(survivors.size()) < cfg.min_keep) {
    const auto j = rng.uniform_index(dropped.size());
    survivors.push_back(dropped[j]);
    dropped[j] = dropped.back();
    dropped.pop_back();
  }
  if (!dropped.empty()) {
    const bool has_parts = !sample.part_labels.empty();
    for (Index i : dropped) {
      const Index src = survivors[rng.uniform_index(survivors.size())];
      sample.cloud.data.row(i) = sample.cloud.data.row(src);
      if (has_parts) {
        sample.part_labels[static_cast<std::size_t>(i)] =
            sample.part_labels[static_cast<std::size_t>(src)];
      }
    }
  }
  return sample;
}

// ---------------------------------------------------------------------------
// Text I/O.

template <class S>
void save_cloud(const std::string& path, const Sample<S>& sample, Index num_classes) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot open for writing");
  const Index n = sample.cloud.size();
  const Index d = sample.cloud.dim();
  const bool parts = !sample.part_labels.empty();
  if (parts && static_cast<Index>(sample.part_labels.size()) != n) {
    throw UsageError("save_cloud: part label count does not match point count");
  }
  os << n << " " << d << " " << num_classes << " " << sample.label << "\n";
  char buf[64];
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < d; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", double(sample.cloud.data(i, c)));
      os << (c ? " " : "") << buf;
    }
    if (parts) os << " " << sample.part_labels[static_cast<std::size_t>(i)];
    os << "\n";
  }
  if (!os) throw DataError(path + ": write failed");
}

template <class S>
Sample<S> load_cloud(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(path + ": cannot open");
  auto fail = [&](int line, const std::string& msg) {
    throw DataError(path + ":" + std::to_string(line) + ": " + msg);
  };

  std::string line;
  if (!std::getline(is, line)) fail(1, "missing header");
  long long n = 0, d = 0, c = 0, label = 0;
  {
    std::istringstream hs(line);
    std::string extra;
    if (!(hs >> n >> d >> c >> label) || (hs >> extra)) {
      fail(1, "header must be: N D C label");
    }
  }
  if (n < 1) fail(1, "point count must be positive");
  if (d != 3 && d != 6) fail(1, "point dimension must be 3 or 6");
  if (c < 2) fail(1, "class count must be at least 2");
  if (label < 0 || label >= c) fail(1, "label out of range");

  Sample<S> sample;
  sample.label = static_cast<Index>(label);
  sample.category = static_cast<Index>(label);
  sample.cloud.data.resize(static_cast<Index>(n), static_cast<Index>(d));
  bool has_parts = false;
  for (long long i = 0; i < n; ++i) {
    const int lineno = static_cast<int>(i) + 2;
    if (!std::getline(is, line)) fail(lineno, "expected " + std::to_string(n) + " point lines");
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f) fields.push_back(f);
    if (i == 0) {
      if (fields.size() == static_cast<std::size_t>(d) + 1) {
        has_parts = true;
        sample.part_labels.resize(static_cast<std::size_t>(n));
      } else if (fields.size() != static_cast<std::size_t>(d)) {
        fail(lineno, "expected " + std::to_string(d) + " coordinates");
      }
    } else if (fields.size() != static_cast<std::size_t>(d) + (has_parts ? 1 : 0)) {
      fail(lineno, "inconsistent field count");
    }
    for (long long col = 0; col < d; ++col) {
      try {
        std::size_t used = 0;
        const double v = std::stod(fields[static_cast<std::size_t>(col)], &used);
        if (used != fields[static_cast<std::size_t>(col)].size()) throw std::invalid_argument("");
        sample.cloud.data(static_cast<Index>(i), static_cast<Index>(col)) = S(v);
      } catch (const std::exception&) {
        fail(lineno, "bad coordinate '" + fields[static_cast<std::size_t>(col)] + "'");
      }
    }
    if (has_parts) {
      try {
        std::size_t used = 0;
        const long long p = std::stoll(fields.back(), &used);
        if (used != fields.back().size() || p < 0 || p >= c) throw std::invalid_argument("");
        sample.part_labels[static_cast<std::size_t>(i)] = static_cast<Index>(p);
      } catch (const std::exception&) {
        fail(lineno, "bad part label '" + fields.back() + "'");
      }
    }
  }
  std::string rest;
  while (std::getline(is, rest)) {
    if (!rest.empty() && rest.find_first_not_of(" \t\r") != std::string::npos) {
      fail(static_cast<int>(n) + 2, "trailing content after " + std::to_string(n) + " points");
    }
  }
  return sample;
}

// Manifest: one "path label category" per line, '#' comments, paths
// relative to the manifest's directory.
struct ManifestEntry {
  std::string path;
  Index label = 0;
  Index category = 0;
};

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(path + ": cannot open");
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string file;
    if (!(ls >> file)) continue;
    long long label = 0, category = 0;
    std::string extra;
    if (!(ls >> label >> category) || (ls >> extra) || label < 0 || category < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected: path label category");
    }
    ManifestEntry e;
    std::filesystem::path fp(file);
    e.path = fp.is_absolute() ? fp.string() : (dir / fp).string();
    e.label = static_cast<Index>(label);
    e.category = static_cast<Index>(category);
    entries.push_back(std::move(e));
  }
  return entries;
}

template <class S>
std::vector<Sample<S>> load_dataset(const std::string& manifest_path) {
  std::vector<Sample<S>> out;
  for (const auto& e : load_manifest(manifest_path)) {
    Sample<S> s = load_cloud<S>(e.path);
    s.label = e.label;
    s.category = e.category;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset builders.

template <class S>
struct SplitData {
  std::vector<Sample<S>> train;
  std::vector<Sample<S>> test;
};

// Balanced four-class dataset; every cloud is normalised and, when
// rotate is set, spun by an independent uniform rotation.
template <class S>
SplitData<S> make_classification_dataset(Index n_train, Index n_test, Index n_points,
                                         double noise, std::uint64_t seed, bool rotate) {
  SplitData<S> out;
  auto build = [&](Index count, std::uint64_t salt, std::vector<Sample<S>>& dst) {
    for (Index i = 0; i < count; ++i) {
      const auto kind = static_cast<ShapeKind>(i % kNumShapeKinds);
      Sample<S> s =
          generate_synthetic<S>(kind, n_points, noise, derive_seed(seed, salt, std::uint64_t(i)));
      s.cloud = normalize_unit_sphere(std::move(s.cloud));
      if (rotate) {
        RngStream rot_rng(derive_seed(seed, salt ^ 0xF07Au, std::uint64_t(i)));
        s = apply_rotation(std::move(s), random_rotation<S>(rot_rng));
      }
      dst.push_back(std::move(s));
    }
  };
  build(n_train, 0x7EA1u, out.train);
  build(n_test, 0x7E57u, out.test);
  return out;
}

// Cylinder cap/side segmentation set (2 parts, category fixed).
template <class S>
SplitData<S> make_segmentation_dataset(Index n_train, Index n_test, Index n_points, double noise,
                                       std::uint64_t seed, bool rotate) {
  SplitData<S> out;
  auto build = [&](Index count, std::uint64_t salt, std::vector<Sample<S>>& dst) {
    for (Index i = 0; i < count; ++i) {
      Sample<S> s = generate_synthetic<S>(ShapeKind::cylinder, n_points, noise,
                                          derive_seed(seed, salt, std::uint64_t(i)));
      s.label = 0;
      s.category = static_cast<Index>(ShapeKind::cylinder);
      s.cloud = normalize_unit_sphere(std::move(s.cloud));
      if (rotate) {
        RngStream rot_rng(derive_seed(seed, salt ^ 0xF07Au, std::uint64_t(i)));
        s = apply_rotation(std::move(s), random_rotation<S>(rot_rng));
      }
      dst.push_back(std::move(s));
    }
  };
  build(n_train, 0x5E61u, out.train);
  build(n_test, 0x5E57u, out.test);
  return out;
}

}  // namespace pf
