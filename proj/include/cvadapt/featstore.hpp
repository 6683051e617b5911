#pragma once

// Feature storage: global feature sets, local feature maps, geo-tags, and the
// pooling / normalization steps that turn backbone outputs into initial
// features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "cvadapt/detail/binary_io.hpp"
#include "cvadapt/detail/text.hpp"
#include "cvadapt/error.hpp"

namespace cvadapt {

enum class View : std::uint32_t { Query = 0, Reference = 1 };

inline constexpr double kGemClamp = 1e-6;
inline constexpr double kDegenerateNorm = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-5;

/// A named collection of equal-length vectors for one view. Row i of `data`
/// belongs to `ids[i]`; that order is authoritative everywhere downstream.
struct FeatureSet {
  View view = View::Query;
  std::vector<std::string> ids;
  Eigen::MatrixXd data;  // count x dim
  bool normalized = false;

  std::size_t count() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }

  /// Checks every invariant; throws `Error` describing the first violation.
  void validate() const {
    if (ids.size() != count()) throw Error("id count does not match vector count");
    if (dim() == 0) throw Error("feature dimension must be positive");
    if (!data.allFinite()) throw Error("non-finite feature");
    std::unordered_set<std::string_view> seen;
    seen.reserve(ids.size());
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw Error("duplicate record id '" + id + "'");
    }
    if (normalized) {
      for (Eigen::Index i = 0; i < data.rows(); ++i) {
        if (std::abs(data.row(i).norm() - 1.0) > kUnitNormTolerance) {
          throw Error("record '" + ids[static_cast<std::size_t>(i)] + "' flagged normalized but norm is " +
                      detail::format_double(data.row(i).norm()));
        }
      }
    }
  }

  /// Rows selected by `indices`, in that order.
  FeatureSet subset(std::span<const std::size_t> indices) const {
    FeatureSet out;
    out.view = view;
    out.normalized = normalized;
    out.data.resize(static_cast<Eigen::Index>(indices.size()), data.cols());
    out.ids.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      out.data.row(static_cast<Eigen::Index>(k)) = data.row(static_cast<Eigen::Index>(indices[k]));
      out.ids.push_back(ids[indices[k]]);
    }
    return out;
  }

  /// Map from record id to row index.
  std::unordered_map<std::string, std::size_t> index() const {
    std::unordered_map<std::string, std::size_t> out;
    out.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(ids[i], i);
    return out;
  }
};

/// H x W grid of local descriptors, stored (row, col, channel) row-major.
struct LocalFeatureMap {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t dim = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col, std::size_t channel) const {
    return values[(row * width + col) * dim + channel];
  }
  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
};

struct GeoTag {
  std::string id;
  double lat = 0.0;
  double lon = 0.0;
};

/// Generalized-mean pooling over the spatial grid of `map`:
///   x_c = (sum_i max(v_ic, 1e-6)^p)^(1/p)
/// This is a plain sum over cells (no 1/(HW) factor); downstream L2
/// normalization removes the constant.
inline std::vector<double> gem_pool(const LocalFeatureMap& map, double p) {
  if (!(p >= 1.0) || !std::isfinite(p)) throw Error("GeM exponent must be >= 1");
  if (map.cells() == 0 || map.dim == 0) throw Error("empty feature map");
  if (map.values.size() != map.cells() * map.dim) throw Error("feature map size does not match its shape");

  std::vector<double> acc(map.dim, 0.0);
  for (std::size_t cell = 0; cell < map.cells(); ++cell) {
    for (std::size_t c = 0; c < map.dim; ++c) {
      double v = map.values[cell * map.dim + c];
      if (!std::isfinite(v)) throw Error("non-finite feature");
      acc[c] += std::pow(std::max(v, kGemClamp), p);
    }
  }
  for (auto& a : acc) {
    a = std::pow(a, 1.0 / p);
    if (!std::isfinite(a)) throw Error("non-finite feature");
  }
  return acc;
}

inline std::vector<double> l2_normalize(std::span<const double> x) {
  double sq = 0.0;
  for (double v : x) sq += v * v;
  double norm = std::sqrt(sq);
  if (!(norm > kDegenerateNorm)) throw Error("degenerate vector");
  std::vector<double> out(x.begin(), x.end());
  for (auto& v : out) v /= norm;
  return out;
}

/// Normalizes every row of `m` in place.
inline void l2_normalize_rows(Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double norm = m.row(i).norm();
    if (!(norm > kDegenerateNorm)) throw Error("degenerate vector");
    m.row(i) /= norm;
  }
}

// ---------------------------------------------------------------------------
// CVFT v1: magic "CVFT", u32 version, u32 view, u64 count, u32 dim, u32 flags,
// count*dim float32 row-major, then per record u16 length + UTF-8 id bytes.

inline constexpr std::string_view kFeatureMagic = "CVFT";
inline constexpr std::string_view kMapMagic = "CVFM";
inline constexpr std::uint32_t kFormatVersion = 1;

inline std::vector<char> encode_feature_set(const FeatureSet& set) {
  set.validate();
  detail::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(set.view));
  w.u64(set.count());
  w.u32(static_cast<std::uint32_t>(set.dim()));
  w.u32(set.normalized ? 1u : 0u);
  for (Eigen::Index i = 0; i < set.data.rows(); ++i) {
    for (Eigen::Index c = 0; c < set.data.cols(); ++c) w.f32(static_cast<float>(set.data(i, c)));
  }
  for (const auto& id : set.ids) {
    if (id.size() > std::numeric_limits<std::uint16_t>::max()) throw Error("record id too long: " + id.substr(0, 32));
    w.u16(static_cast<std::uint16_t>(id.size()));
    w.bytes(id);
  }
  return w.buffer();
}

inline FeatureSet decode_feature_set(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes), "corrupt feature file");
  if (r.remaining() < 8) throw Error("unrecognized format");
  if (r.bytes(4) != kFeatureMagic) throw Error("unrecognized format");
  if (r.u32() != kFormatVersion) throw Error("unrecognized format");

  FeatureSet set;
  std::uint32_t view = r.u32();
  if (view > 1) throw Error("corrupt feature file");
  set.view = static_cast<View>(view);
  std::uint64_t count = r.u64();
  std::uint32_t dim = r.u32();
  std::uint32_t flags = r.u32();
  if (dim == 0) throw Error("corrupt feature file");
  set.normalized = (flags & 1u) != 0;

  r.require_elements(count, 4ull * dim);
  set.data.resize(static_cast<Eigen::Index>(count), dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    for (std::uint32_t c = 0; c < dim; ++c) set.data(static_cast<Eigen::Index>(i), c) = r.f32();
  }
  r.require_elements(count, 2);
  set.ids.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint16_t len = r.u16();
    set.ids.emplace_back(r.bytes(len));
  }
  if (!r.at_end()) throw Error("corrupt feature file");
  set.validate();
  return set;
}

inline void save_feature_set(const FeatureSet& set, const std::string& path) {
  detail::write_file(path, encode_feature_set(set));
}

inline FeatureSet load_feature_set(const std::string& path) {
  return decode_feature_set(detail::ByteReader::slurp(path));
}

// CVFM v1: magic "CVFM", u32 version, u32 H, u32 W, u32 dim, then H*W*dim
// float32 in (row, col, channel) order.

inline void save_feature_map(const LocalFeatureMap& map, const std::string& path) {
  if (map.values.size() != map.cells() * map.dim) throw Error("feature map size does not match its shape");
  detail::ByteWriter w;
  w.bytes(kMapMagic);
  w.u32(kFormatVersion);
  w.u32(map.height);
  w.u32(map.width);
  w.u32(map.dim);
  for (double v : map.values) w.f32(static_cast<float>(v));
  w.write_file(path);
}

inline LocalFeatureMap load_feature_map(const std::string& path) {
  detail::ByteReader r(detail::ByteReader::slurp(path), "corrupt feature map file");
  if (r.remaining() < 8) throw Error("unrecognized format");
  if (r.bytes(4) != kMapMagic) throw Error("unrecognized format");
  if (r.u32() != kFormatVersion) throw Error("unrecognized format");
  LocalFeatureMap map;
  map.height = r.u32();
  map.width = r.u32();
  map.dim = r.u32();
  std::uint64_t n = static_cast<std::uint64_t>(map.height) * map.width * map.dim;
  r.require_elements(n, 4);
  map.values.resize(n);
  for (auto& v : map.values) v = r.f32();
  if (!r.at_end()) throw Error("corrupt feature map file");
  return map;
}

// Geo-tag sidecar: CSV with header `id,lat,lon`.

inline std::vector<GeoTag> load_geo_tags(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "id,lat,lon") {
    throw Error("geo-tag file '" + path + "' must start with header id,lat,lon");
  }
  std::vector<GeoTag> tags;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split(line, ',');
    if (f.size() != 3) throw Error("geo-tag line " + std::to_string(lineno) + ": expected 3 fields");
    GeoTag t{std::string(f[0]), detail::parse_double(f[1], "lat"), detail::parse_double(f[2], "lon")};
    if (!(t.lat >= -90.0 && t.lat <= 90.0) || !(t.lon >= -180.0 && t.lon <= 180.0)) {
      throw Error("geo-tag line " + std::to_string(lineno) + ": coordinates out of range");
    }
    tags.push_back(std::move(t));
  }
  return tags;
}

inline void save_geo_tags(const std::vector<GeoTag>& tags, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "id,lat,lon\n";
  for (const auto& t : tags) {
    out << t.id << ',' << detail::format_double(t.lat) << ',' << detail::format_double(t.lon) << '\n';
  }
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace cvadapt
