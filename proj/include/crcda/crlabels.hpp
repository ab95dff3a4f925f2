#pragma once

// Contextual-relation pseudo labels. Ground-truth maps are tiled into regions at
// two sizes; each region is described by its class composition and the
// orientations of its class boundaries, regions are clustered with DBSCAN, and
// the cluster index becomes the region's label.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/json_util.hpp"
#include "crcda/parallel.hpp"
#include "crcda/scene.hpp"

namespace crcda {

inline constexpr int kCrLabelsVersion = 1;

struct RegionSize {
  std::size_t rh = 0;
  std::size_t rw = 0;
  friend bool operator==(const RegionSize&, const RegionSize&) = default;
};

struct CrConfig {
  std::array<RegionSize, 2> sizes{{{8, 16}, {16, 32}}};
  std::size_t bins = 8;
  // <= 0 selects eps from the data (see auto_eps).
  double eps = 0.0;
  std::size_t min_pts = 4;
  std::size_t max_clusters = 100;

  friend bool operator==(const CrConfig&, const CrConfig&) = default;
};

/// Throws ConfigError unless every region size tiles an H x W map.
inline void validate(const CrConfig& c, std::size_t H, std::size_t W) {
  for (const auto& s : c.sizes) {
    if (s.rh == 0 || s.rw == 0) throw ConfigError("region sizes must be positive");
    if (H % s.rh || W % s.rw)
      throw ConfigError("image size " + std::to_string(H) + "x" + std::to_string(W) +
                        " is not divisible by region size " + std::to_string(s.rh) + "x" + std::to_string(s.rw));
  }
  if (c.bins == 0) throw ConfigError("orientation bins must be positive");
  if (c.min_pts == 0) throw ConfigError("min_pts must be at least 1");
  if (c.max_clusters == 0) throw ConfigError("max_clusters must be at least 1");
}

struct RegionGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<LabelMap> regions;  // row-major over (i, j)
};

inline RegionGrid crop_regions(const LabelMap& m, RegionSize s) {
  if (s.rh == 0 || s.rw == 0 || m.height % s.rh || m.width % s.rw)
    throw ConfigError("crop_regions: " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                      " map does not tile into " + std::to_string(s.rh) + "x" + std::to_string(s.rw) + " regions");
  RegionGrid g;
  g.rows = m.height / s.rh;
  g.cols = m.width / s.rw;
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.cols; ++j) {
      LabelMap r(s.rh, s.rw);
      for (std::size_t y = 0; y < s.rh; ++y)
        for (std::size_t x = 0; x < s.rw; ++x) r.at(y, x) = m.at(i * s.rh + y, j * s.rw + x);
      g.regions.push_back(std::move(r));
    }
  return g;
}

/// Class histogram (C entries) followed by a histogram of boundary-normal
/// orientations folded into [0, pi) (B entries). Both parts are normalised;
/// the orientation part is all zero for a single-class region.
inline std::vector<double> region_descriptor(const LabelMap& r, std::size_t C, std::size_t B) {
  std::vector<double> d(C + B, 0.0);
  const std::size_t h = r.height, w = r.width;
  for (auto c : r.labels) {
    require(c < C, "region_descriptor: class id out of range");
    d[c] += 1.0;
  }
  for (std::size_t c = 0; c < C; ++c) d[c] /= static_cast<double>(h * w);

  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return r.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  // Central differences of one class's indicator, replicate at the region edge.
  auto grad = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::uint8_t c) {
    const double gx = 0.5 * ((at(y, x + 1) == c) - (at(y, x - 1) == c));
    const double gy = 0.5 * ((at(y + 1, x) == c) - (at(y - 1, x) == c));
    return std::array<double, 2>{gx, gy};
  };

  double votes = 0.0;
  for (std::size_t yy = 0; yy < h; ++yy) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const auto y = static_cast<std::ptrdiff_t>(yy), x = static_cast<std::ptrdiff_t>(xx);
      const auto c = r.at(yy, xx);
      const std::array<std::array<std::ptrdiff_t, 2>, 4> nbr = {{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
      int other = -1;
      for (const auto& [ny, nx] : nbr) {
        if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) || nx >= static_cast<std::ptrdiff_t>(w)) continue;
        if (at(ny, nx) != c) {
          other = at(ny, nx);
          break;
        }
      }
      if (other < 0) continue;
      auto g = grad(y, x, c);
      if (g[0] == 0.0 && g[1] == 0.0) g = grad(y, x, static_cast<std::uint8_t>(other));
      if (g[0] == 0.0 && g[1] == 0.0) continue;  // thin structure: no defined normal
      double th = std::atan2(g[1], g[0]);
      if (th < 0.0) th += std::numbers::pi;
      if (th >= std::numbers::pi) th -= std::numbers::pi;
      const auto bin = std::min(B - 1, static_cast<std::size_t>(th / std::numbers::pi * static_cast<double>(B)));
      d[C + bin] += 1.0;
      votes += 1.0;
    }
  }
  if (votes > 0.0)
    for (std::size_t b = 0; b < B; ++b) d[C + b] /= votes;
  return d;
}

/// Row-major n x dim point matrix.
struct PointSet {
  std::size_t dim = 0;
  std::vector<double> coords;

  std::size_t size() const { return dim == 0 ? 0 : coords.size() / dim; }
  std::span<const double> operator[](std::size_t i) const { return {coords.data() + i * dim, dim}; }
  void push(std::span<const double> p) {
    if (dim == 0) dim = p.size();
    require(p.size() == dim, "PointSet: dimension mismatch");
    coords.insert(coords.end(), p.begin(), p.end());
  }
};

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

inline constexpr int kNoise = -1;

/// DBSCAN with the L2 metric. A point is core when at least min_pts points
/// (itself included) lie within distance eps. Points are scanned in ascending
/// index order; each unassigned core point seeds a new cluster, and a border
/// point joins the first cluster that reaches it.
///
/// Bit-identical points always share a label, so they are collapsed first and
/// the scan runs over distinct points weighted by multiplicity.
inline std::vector<int> dbscan(const PointSet& pts, double eps, std::size_t min_pts) {
  require(eps > 0.0, "dbscan: eps must be positive");
  require(min_pts >= 1, "dbscan: min_pts must be at least 1");
  const std::size_t n = pts.size();
  if (n == 0) return {};

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(pts[a].begin(), pts[a].end(), pts[b].begin(), pts[b].end());
  });
  std::vector<std::size_t> rep_of(n);  // point -> distinct index
  std::vector<std::size_t> first;      // distinct -> smallest original index
  std::vector<std::size_t> mult;
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = order[k];
    if (k == 0 || !std::ranges::equal(pts[i], pts[order[k - 1]])) {
      first.push_back(i);
      mult.push_back(0);
    }
    rep_of[i] = first.size() - 1;
    ++mult.back();
    first.back() = std::min(first.back(), i);
  }
  // Distinct points in order of first appearance.
  std::vector<std::size_t> scan(first.size());
  std::iota(scan.begin(), scan.end(), 0);
  std::sort(scan.begin(), scan.end(), [&](std::size_t a, std::size_t b) { return first[a] < first[b]; });

  const std::size_t m = first.size();
  auto neighbours = [&](std::size_t u, std::vector<std::size_t>& out) {
    out.clear();
    const auto pu = pts[first[u]];
    for (std::size_t k = 0; k < m; ++k) {
      const auto v = scan[k];
      if (std::sqrt(sq_dist(pu, pts[first[v]])) <= eps) out.push_back(v);
    }
  };

  std::vector<char> core(m, 0);
  std::vector<std::size_t> nb;
  for (std::size_t u = 0; u < m; ++u) {
    neighbours(u, nb);
    std::size_t count = 0;
    for (auto v : nb) count += mult[v];
    core[u] = count >= min_pts;
  }

  std::vector<int> label(m, kNoise);
  int next = 0;
  std::vector<std::size_t> queue;
  for (std::size_t k = 0; k < m; ++k) {
    const auto seed = scan[k];
    if (label[seed] != kNoise || !core[seed]) continue;
    const int id = next++;
    label[seed] = id;
    queue.assign(1, seed);
    for (std::size_t q = 0; q < queue.size(); ++q) {
      neighbours(queue[q], nb);
      for (auto v : nb) {
        if (label[v] != kNoise) continue;
        label[v] = id;
        if (core[v]) queue.push_back(v);
      }
    }
  }

  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = label[rep_of[i]];
  return out;
}

/// Default eps: median k-distance (k = min_pts) over the distinct descriptors,
/// using a fixed sample of at most 1000 of them. Label maps repeat whole
/// regions, so the distinct set is what carries the density structure.
inline double auto_eps(const PointSet& pts, std::size_t min_pts, std::size_t sample = 1000) {
  std::vector<std::vector<double>> uniq;
  for (std::size_t i = 0; i < pts.size(); ++i) uniq.emplace_back(pts[i].begin(), pts[i].end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() > sample) {
    std::mt19937_64 rng(0x5eed);
    for (std::size_t i = 0; i < sample; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, uniq.size() - 1);
      std::swap(uniq[i], uniq[d(rng)]);
    }
    uniq.resize(sample);
  }
  if (uniq.size() < 2) return 1.0;  // all points identical; any radius gives one cluster
  const std::size_t k = std::min(std::max<std::size_t>(min_pts, 1), uniq.size() - 1);
  std::vector<double> kdist, row;
  for (std::size_t a = 0; a < uniq.size(); ++a) {
    row.clear();
    for (std::size_t b = 0; b < uniq.size(); ++b)
      if (a != b) row.push_back(std::sqrt(sq_dist(uniq[a], uniq[b])));
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k - 1), row.end());
    kdist.push_back(row[k - 1]);
  }
  std::nth_element(kdist.begin(), kdist.begin() + static_cast<std::ptrdiff_t>(kdist.size() / 2), kdist.end());
  return kdist[kdist.size() / 2];
}

struct ClusterResult {
  std::size_t num_clusters = 0;
  std::vector<int> labels;                    // per point, in [0, num_clusters)
  std::vector<std::vector<double>> centroids;  // member means
  std::vector<std::size_t> sizes;
  std::size_t raw_clusters = 0;  // DBSCAN cluster count before merging
  std::size_t noise_points = 0;
};

/// Reconciles DBSCAN output with a cluster budget: while there are more than
/// `cap` clusters, the smallest (ties: lower id) merges into the cluster with
/// the nearest centroid (ties: lower id). Noise points then join their nearest
/// centroid, ids are compacted in ascending order and centroids recomputed.
inline ClusterResult reconcile_clusters(const PointSet& pts, const std::vector<int>& raw, std::size_t cap) {
  require(raw.size() == pts.size(), "reconcile_clusters: label count mismatch");
  require(cap >= 1, "reconcile_clusters: cap must be at least 1");
  const std::size_t n = pts.size(), dim = pts.dim;
  int k_raw = 0;
  for (int l : raw) k_raw = std::max(k_raw, l + 1);
  if (k_raw == 0)
    throw PipelineError("DBSCAN found no clusters; increase eps or lower min_pts");
  const auto K = static_cast<std::size_t>(k_raw);

  std::vector<std::size_t> count(K, 0);
  std::vector<std::vector<double>> sum(K, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i] == kNoise) continue;
    const auto c = static_cast<std::size_t>(raw[i]);
    ++count[c];
    for (std::size_t d = 0; d < dim; ++d) sum[c][d] += pts[i][d];
  }
  auto centroid = [&](std::size_t c) {
    std::vector<double> v(dim);
    for (std::size_t d = 0; d < dim; ++d) v[d] = sum[c][d] / static_cast<double>(count[c]);
    return v;
  };
  std::vector<std::size_t> parent(K);
  std::iota(parent.begin(), parent.end(), 0);
  std::vector<char> alive(K, 1);
  std::size_t n_alive = K;
  while (n_alive > cap) {
    std::size_t s = K;
    for (std::size_t c = 0; c < K; ++c)
      if (alive[c] && (s == K || count[c] < count[s])) s = c;
    const auto cs = centroid(s);
    std::size_t t = K;
    double best = 0.0;
    for (std::size_t c = 0; c < K; ++c) {
      if (!alive[c] || c == s) continue;
      const double d = sq_dist(cs, centroid(c));
      if (t == K || d < best) t = c, best = d;
    }
    count[t] += count[s];
    for (std::size_t d = 0; d < dim; ++d) sum[t][d] += sum[s][d];
    alive[s] = 0;
    parent[s] = t;
    --n_alive;
  }
  auto root = [&](std::size_t c) {
    while (parent[c] != c) c = parent[c];
    return c;
  };

  std::vector<std::size_t> compact(K, 0);
  std::vector<std::size_t> survivors;
  for (std::size_t c = 0; c < K; ++c)
    if (alive[c]) {
      compact[c] = survivors.size();
      survivors.push_back(c);
    }
  std::vector<std::vector<double>> merged_centroids;
  for (auto c : survivors) merged_centroids.push_back(centroid(c));

  ClusterResult out;
  out.raw_clusters = K;
  out.num_clusters = survivors.size();
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i] != kNoise) {
      out.labels[i] = static_cast<int>(compact[root(static_cast<std::size_t>(raw[i]))]);
      continue;
    }
    ++out.noise_points;
    std::size_t best_c = 0;
    double best = sq_dist(pts[i], merged_centroids[0]);
    for (std::size_t c = 1; c < merged_centroids.size(); ++c) {
      const double d = sq_dist(pts[i], merged_centroids[c]);
      if (d < best) best = d, best_c = c;
    }
    out.labels[i] = static_cast<int>(best_c);
  }
  out.centroids.assign(out.num_clusters, std::vector<double>(dim, 0.0));
  out.sizes.assign(out.num_clusters, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(out.labels[i]);
    ++out.sizes[c];
    for (std::size_t d = 0; d < dim; ++d) out.centroids[c][d] += pts[i][d];
  }
  for (std::size_t c = 0; c < out.num_clusters; ++c)
    for (auto& v : out.centroids[c]) v /= static_cast<double>(out.sizes[c]);
  return out;
}

struct CrHead {
  RegionSize size;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double eps = 0.0;  // radius actually used
  std::size_t num_clusters = 0;
  std::size_t raw_clusters = 0;
  std::size_t noise_points = 0;
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> cluster_sizes;
  std::vector<std::vector<std::int32_t>> grids;  // per image, rows*cols labels row-major

  friend bool operator==(const CrHead&, const CrHead&) = default;
};

struct CrLabelSet {
  CrConfig config;
  std::size_t num_classes = kNumClasses;
  std::size_t height = 0;
  std::size_t width = 0;
  std::array<CrHead, 2> heads;

  std::size_t num_images() const { return heads[0].grids.size(); }
  friend bool operator==(const CrLabelSet&, const CrLabelSet&) = default;
};

/// Clusters all regions of the given (source) label maps, independently per head.
inline CrLabelSet build_cr_labels(std::span<const LabelMap> maps, const CrConfig& cfg,
                                  std::size_t num_classes = kNumClasses) {
  if (maps.empty()) throw PipelineError("no source label maps to build contextual-relation labels from");
  const std::size_t H = maps[0].height, W = maps[0].width;
  validate(cfg, H, W);
  for (const auto& m : maps)
    if (m.height != H || m.width != W) throw PipelineError("source label maps differ in size");

  CrLabelSet out;
  out.config = cfg;
  out.num_classes = num_classes;
  out.height = H;
  out.width = W;
  for (std::size_t k = 0; k < 2; ++k) {
    const RegionSize rs = cfg.sizes[k];
    CrHead& head = out.heads[k];
    head.size = rs;
    head.rows = H / rs.rh;
    head.cols = W / rs.rw;
    const std::size_t per = head.rows * head.cols, dim = num_classes + cfg.bins;

    std::vector<std::vector<double>> desc(maps.size());
    parallel_for(maps.size(), [&](std::size_t i) {
      const auto g = crop_regions(maps[i], rs);
      desc[i].reserve(per * dim);
      for (const auto& r : g.regions) {
        const auto d = region_descriptor(r, num_classes, cfg.bins);
        desc[i].insert(desc[i].end(), d.begin(), d.end());
      }
    });
    PointSet pts;
    pts.dim = dim;
    for (auto& d : desc) pts.coords.insert(pts.coords.end(), d.begin(), d.end());

    head.eps = cfg.eps > 0.0 ? cfg.eps : auto_eps(pts, cfg.min_pts);
    const auto raw = dbscan(pts, head.eps, cfg.min_pts);
    auto res = reconcile_clusters(pts, raw, cfg.max_clusters);
    head.num_clusters = res.num_clusters;
    head.raw_clusters = res.raw_clusters;
    head.noise_points = res.noise_points;
    head.centroids = std::move(res.centroids);
    head.cluster_sizes = std::move(res.sizes);
    head.grids.assign(maps.size(), std::vector<std::int32_t>(per));
    for (std::size_t i = 0; i < maps.size(); ++i)
      for (std::size_t r = 0; r < per; ++r) head.grids[i][r] = res.labels[i * per + r];
  }
  return out;
}

// --- persistence -------------------------------------------------------------

inline void to_json(json& j, const CrConfig& c) {
  j = json{{"sizes", {{c.sizes[0].rh, c.sizes[0].rw}, {c.sizes[1].rh, c.sizes[1].rw}}},
           {"bins", c.bins},
           {"eps", c.eps},
           {"min_pts", c.min_pts},
           {"max_clusters", c.max_clusters}};
}

inline void from_json(const json& j, CrConfig& c) {
  const std::string w = "crlabels";
  detail::reject_unknown_keys(j, {"sizes", "bins", "eps", "min_pts", "max_clusters"}, w);
  if (j.contains("sizes")) {
    const auto& s = j.at("sizes");
    if (!s.is_array() || s.size() != 2) throw ConfigError("crlabels.sizes: exactly two region sizes are required");
    for (std::size_t k = 0; k < 2; ++k) {
      if (!s[k].is_array() || s[k].size() != 2) throw ConfigError("crlabels.sizes: each size is [rows, cols]");
      try {
        c.sizes[k] = {s[k][0].get<std::size_t>(), s[k][1].get<std::size_t>()};
      } catch (const json::exception& e) {
        throw ConfigError(std::string("crlabels.sizes: ") + e.what());
      }
    }
  }
  detail::read_opt(j, "bins", c.bins, w);
  detail::read_opt(j, "eps", c.eps, w);
  detail::read_opt(j, "min_pts", c.min_pts, w);
  detail::read_opt(j, "max_clusters", c.max_clusters, w);
}

inline json cr_labels_to_json(const CrLabelSet& s) {
  json heads = json::array();
  for (const auto& h : s.heads)
    heads.push_back({{"region", {h.size.rh, h.size.rw}},
                     {"rows", h.rows},
                     {"cols", h.cols},
                     {"eps", h.eps},
                     {"num_clusters", h.num_clusters},
                     {"raw_clusters", h.raw_clusters},
                     {"noise_points", h.noise_points},
                     {"cluster_sizes", h.cluster_sizes},
                     {"centroids", h.centroids},
                     {"grids", h.grids}});
  return json{{"format", "crcda-crlabels"},
              {"version", kCrLabelsVersion},
              {"config", s.config},
              {"num_classes", s.num_classes},
              {"height", s.height},
              {"width", s.width},
              {"heads", heads}};
}

inline CrLabelSet cr_labels_from_json(const json& j) {
  try {
    if (j.value("format", "") != "crcda-crlabels") throw FormatError("crlabels: not a crlabels file");
    const int v = j.at("version").get<int>();
    if (v != kCrLabelsVersion)
      throw FormatError("crlabels: version " + std::to_string(v) + " unsupported (expected " +
                        std::to_string(kCrLabelsVersion) + ")");
    CrLabelSet s;
    s.config = j.at("config").get<CrConfig>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    const auto& hs = j.at("heads");
    if (!hs.is_array() || hs.size() != 2) throw FormatError("crlabels: expected two heads");
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& jh = hs[k];
      CrHead& h = s.heads[k];
      h.size = {jh.at("region")[0].get<std::size_t>(), jh.at("region")[1].get<std::size_t>()};
      h.rows = jh.at("rows").get<std::size_t>();
      h.cols = jh.at("cols").get<std::size_t>();
      h.eps = jh.at("eps").get<double>();
      h.num_clusters = jh.at("num_clusters").get<std::size_t>();
      h.raw_clusters = jh.at("raw_clusters").get<std::size_t>();
      h.noise_points = jh.at("noise_points").get<std::size_t>();
      h.cluster_sizes = jh.at("cluster_sizes").get<std::vector<std::size_t>>();
      h.centroids = jh.at("centroids").get<std::vector<std::vector<double>>>();
      h.grids = jh.at("grids").get<std::vector<std::vector<std::int32_t>>>();
      if (h.num_clusters == 0 || h.centroids.size() != h.num_clusters)
        throw FormatError("crlabels: head " + std::to_string(k + 1) + " centroid count mismatch");
      for (const auto& g : h.grids) {
        if (g.size() != h.rows * h.cols) throw FormatError("crlabels: grid size mismatch");
        for (auto l : g)
          if (l < 0 || static_cast<std::size_t>(l) >= h.num_clusters)
            throw FormatError("crlabels: label out of range");
      }
    }
    if (s.heads[0].grids.size() != s.heads[1].grids.size()) throw FormatError("crlabels: heads disagree on image count");
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("crlabels: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

inline void save_cr_labels(const std::filesystem::path& path, const CrLabelSet& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << cr_labels_to_json(s).dump() << '\n';
}

inline CrLabelSet load_cr_labels(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("missing " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + " is not valid JSON: " + e.what());
  }
  return cr_labels_from_json(j);
}

}  // namespace crcda
