#pragma once

// Single-query retrieval evaluation under the Market-1501 protocol:
// distance matrix, protocol filtering, per-query ranking, AP, mAP and CMC.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mros/binary_io.hpp"
#include "mros/error.hpp"
#include "mros/parallel.hpp"

namespace mros {

enum class Metric { kL2, kCosine };

inline Metric parse_metric(const std::string& s) {
  if (s == "l2") return Metric::kL2;
  if (s == "cosine") return Metric::kCosine;
  raise<ConfigError>("unknown metric '", s, "' (expected l2 or cosine)");
}

inline const char* metric_name(Metric m) { return m == Metric::kL2 ? "l2" : "cosine"; }

struct EmbeddingSet {
  std::size_t dim = 0;
  std::vector<float> descriptors;  // count × dim, row-major
  std::vector<int> identities;
  std::vector<int> cameras;
  std::vector<std::string> sources;

  std::size_t size() const { return identities.size(); }
  std::span<const float> row(std::size_t i) const { return {descriptors.data() + i * dim, dim}; }

  void push_back(std::span<const float> d, int identity, int camera, std::string source = {}) {
    if (size() == 0 && dim == 0) dim = d.size();
    if (d.size() != dim) raise<DimensionError>("embedding of width ", d.size(), " added to set of width ", dim);
    descriptors.insert(descriptors.end(), d.begin(), d.end());
    identities.push_back(identity);
    cameras.push_back(camera);
    sources.push_back(std::move(source));
  }

  void validate() const {
    if (descriptors.size() != size() * dim || cameras.size() != size() || sources.size() != size()) {
      raise<ContractError>("embedding set fields are misaligned");
    }
  }
};

struct DistanceMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

inline double l2_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double cosine_distance(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += static_cast<double>(a[k]) * b[k];
    na += static_cast<double>(a[k]) * a[k];
    nb += static_cast<double>(b[k]) * b[k];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? 1.0 - dot / denom : 1.0;
}

inline DistanceMatrix distance_matrix(const EmbeddingSet& query, const EmbeddingSet& gallery, Metric metric) {
  if (query.dim != gallery.dim) {
    raise<DimensionError>("descriptor width mismatch: query dim ", query.dim, " vs gallery dim ", gallery.dim);
  }
  DistanceMatrix dm{query.size(), gallery.size(), std::vector<double>(query.size() * gallery.size())};
  parallel_for(query.size(), [&](std::size_t i) {
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      dm.values[i * dm.cols + j] = metric == Metric::kL2 ? l2_distance(query.row(i), gallery.row(j))
                                                         : cosine_distance(query.row(i), gallery.row(j));
    }
  });
  return dm;
}

// Gallery entries sharing the query's identity and camera, and junk entries
// (identity -1), are invalid.
inline std::vector<bool> protocol_filter(int query_identity, int query_camera, const EmbeddingSet& gallery) {
  std::vector<bool> valid(gallery.size());
  for (std::size_t j = 0; j < gallery.size(); ++j) {
    const bool same_view = gallery.identities[j] == query_identity && gallery.cameras[j] == query_camera;
    valid[j] = !same_view && gallery.identities[j] != -1;
  }
  return valid;
}

// One query's gallery ordering: ascending distance, ties by gallery index.
struct RankingResult {
  std::vector<std::size_t> order;
  std::vector<bool> relevant;  // per position
  std::vector<bool> valid;     // per position

  std::size_t relevant_valid_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < order.size(); ++k) n += valid[k] && relevant[k];
    return n;
  }
};

inline RankingResult rank_gallery(std::span<const double> distances, std::span<const int> gallery_ids,
                                  int query_identity, const std::vector<bool>& valid) {
  RankingResult r;
  r.order.resize(distances.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return distances[a] < distances[b]; });
  for (auto j : r.order) {
    r.relevant.push_back(gallery_ids[j] == query_identity);
    r.valid.push_back(valid[j]);
  }
  return r;
}

// Σ over relevant hits of precision at that hit, divided by the number of
// relevant entries; invalid entries are removed before positions are counted.
// Empty when the query has no valid relevant entry.
inline std::optional<double> average_precision(const RankingResult& r) {
  const std::size_t total = r.relevant_valid_count();
  if (total == 0) return std::nullopt;
  double ap = 0.0;
  std::size_t position = 0, hits = 0;
  for (std::size_t k = 0; k < r.order.size(); ++k) {
    if (!r.valid[k]) continue;
    ++position;
    if (r.relevant[k]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(position);
    }
  }
  return ap / static_cast<double>(total);
}

// 1-based position of the first valid relevant entry among valid entries.
inline std::optional<std::size_t> first_hit(const RankingResult& r) {
  std::size_t position = 0;
  for (std::size_t k = 0; k < r.order.size(); ++k) {
    if (!r.valid[k]) continue;
    ++position;
    if (r.relevant[k]) return position;
  }
  return std::nullopt;
}

// curve[k-1] = fraction of scored queries whose first hit is at position <= k.
inline std::vector<double> cmc(const std::vector<RankingResult>& rankings, std::size_t max_rank) {
  std::vector<double> curve(max_rank, 0.0);
  std::size_t scored = 0;
  for (const auto& r : rankings) {
    auto hit = first_hit(r);
    if (!hit) continue;
    ++scored;
    for (std::size_t k = *hit; k <= max_rank; ++k) curve[k - 1] += 1.0;
  }
  if (scored == 0) raise<DataError>("CMC: no query has a valid relevant gallery entry");
  for (auto& v : curve) v /= static_cast<double>(scored);
  return curve;
}

struct EvalOptions {
  Metric metric = Metric::kL2;
  bool protocol = true;
  std::size_t max_rank = 50;
};

struct EvalReport {
  double mAP = 0.0;
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
  std::vector<double> ap;  // per query; NaN for skipped queries
  std::vector<double> cmc;
  std::size_t scored = 0;
  std::size_t skipped = 0;
};

inline EvalReport evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery, const EvalOptions& opts = {}) {
  query.validate();
  gallery.validate();
  if (query.size() == 0 || gallery.size() == 0) raise<DataError>("evaluation needs non-empty query and gallery sets");
  const auto dm = distance_matrix(query, gallery, opts.metric);
  std::vector<RankingResult> rankings(query.size());
  parallel_for(query.size(), [&](std::size_t i) {
    auto valid = opts.protocol ? protocol_filter(query.identities[i], query.cameras[i], gallery)
                               : std::vector<bool>(gallery.size(), true);
    rankings[i] = rank_gallery(std::span<const double>(dm.values.data() + i * dm.cols, dm.cols), gallery.identities,
                               query.identities[i], valid);
  });
  EvalReport rep;
  rep.ap.assign(query.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<RankingResult> scored;
  double total = 0.0;
  for (std::size_t i = 0; i < query.size(); ++i) {
    if (auto ap = average_precision(rankings[i])) {
      rep.ap[i] = *ap;
      total += *ap;
      scored.push_back(std::move(rankings[i]));
    }
  }
  rep.scored = scored.size();
  rep.skipped = query.size() - rep.scored;
  if (rep.scored == 0) raise<DataError>("empty evaluation: every query lacks a valid relevant gallery entry");
  rep.mAP = total / static_cast<double>(rep.scored);
  rep.cmc = cmc(scored, std::max<std::size_t>(opts.max_rank, 10));
  rep.rank1 = rep.cmc[0];
  rep.rank5 = rep.cmc[4];
  rep.rank10 = rep.cmc[9];
  return rep;
}

// ---------------------------------------------------------------------------
// Embedding files
//
//   "MREB" | version u32 | count u64 | dim u64 | float32[count*dim]
// with a sidecar CSV `<file>.csv`: row,identity,camera,source_path.

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".csv");
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set,
                             const std::string& fingerprint = {}) {
  set.validate();
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) raise<DataError>("cannot write embeddings to ", path.string());
    binary::write_magic(os, "MREB");
    binary::write_le<std::uint32_t>(os, kEmbeddingFormatVersion);
    binary::write_le<std::uint64_t>(os, set.size());
    binary::write_le<std::uint64_t>(os, set.dim);
    for (float v : set.descriptors) binary::write_le<float>(os, v);
  }
  std::ofstream csv(sidecar_path(path));
  if (!csv) raise<DataError>("cannot write sidecar for ", path.string());
  if (!fingerprint.empty()) csv << "# config_fingerprint=" << fingerprint << '\n';
  csv << "row,identity,camera,source_path\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    csv << i << ',' << set.identities[i] << ',' << set.cameras[i] << ',' << set.sources[i] << '\n';
  }
}

inline EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise<DataError>("cannot open embeddings ", path.string());
  binary::expect_magic(is, "MREB", path.string());
  auto version = binary::read_le<std::uint32_t>(is, "embedding version");
  if (version != kEmbeddingFormatVersion) raise<DataError>("unsupported embedding format version ", version);
  EmbeddingSet set;
  const auto count = binary::read_le<std::uint64_t>(is, "embedding count");
  set.dim = binary::read_le<std::uint64_t>(is, "embedding dim");
  set.descriptors.resize(count * set.dim);
  for (auto& v : set.descriptors) v = binary::read_le<float>(is, "embedding data");

  std::ifstream csv(sidecar_path(path));
  if (!csv) raise<DataError>("missing sidecar ", sidecar_path(path).string());
  std::string line;
  while (std::getline(csv, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("row,", 0) == 0) continue;
    std::istringstream ls(line);
    std::string row, id, cam, src;
    std::getline(ls, row, ',');
    std::getline(ls, id, ',');
    std::getline(ls, cam, ',');
    std::getline(ls, src);
    try {
      if (std::stoull(row) != set.identities.size()) raise<DataError>("sidecar rows out of order in ", path.string());
      set.identities.push_back(std::stoi(id));
      set.cameras.push_back(std::stoi(cam));
    } catch (const std::logic_error&) {
      raise<DataError>("malformed sidecar line in ", sidecar_path(path).string(), ": ", line);
    }
    set.sources.push_back(src);
  }
  if (set.identities.size() != count) {
    raise<DataError>("sidecar lists ", set.identities.size(), " rows but ", path.string(), " holds ", count);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string report_csv(const EvalReport& r, const std::string& fingerprint = {}) {
  std::ostringstream os;
  os << std::setprecision(17);
  if (!fingerprint.empty()) os << "# config_fingerprint=" << fingerprint << '\n';
  os << "mAP,rank1,rank5,rank10,scored_queries,skipped_queries\n";
  os << r.mAP << ',' << r.rank1 << ',' << r.rank5 << ',' << r.rank10 << ',' << r.scored << ',' << r.skipped << '\n';
  return os.str();
}

inline std::string report_markdown(const EvalReport& r, const std::string& label, const std::string& fingerprint = {}) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "| Model | mAP | Rank-1 | Rank-5 | Rank-10 |\n";
  os << "|---|---|---|---|---|\n";
  os << "| " << label << " | " << 100.0 * r.mAP << " | " << 100.0 * r.rank1 << " | " << 100.0 * r.rank5 << " | "
     << 100.0 * r.rank10 << " |\n";
  if (!fingerprint.empty()) os << "\nconfig fingerprint: `" << fingerprint << "`\n";
  return os.str();
}

}  // namespace mros
