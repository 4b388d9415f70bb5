#pragma once

// Dataset ingestion (Market-1501 layout), synthetic identity datasets,
// P×K batch sampling and the training-time augmentation chain.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mros/error.hpp"
#include "mros/image.hpp"

namespace mros {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Records and filenames

inline constexpr int kJunkIdentity = -1;

struct ImageRecord {
  int identity = 0;  // -1 marks junk / distractor boxes
  int camera = 1;
  int sequence = 1;
  int frame = 0;
  int box = 0;
  std::string extension = ".jpg";
  fs::path path;

  std::string image_id() const { return path.stem().string(); }
};

// Parses `<id>_c<cam>s<seq>_<frame>_<box>.{jpg,jpeg,png}`.
inline ImageRecord parse_market_filename(const std::string& name) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)(\.(?:jpe?g|png))$)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) raise<DataError>("cannot parse Market-1501 filename: ", name);
  ImageRecord r;
  try {
    r.identity = std::stoi(m[1]);
    r.camera = std::stoi(m[2]);
    r.sequence = std::stoi(m[3]);
    r.frame = std::stoi(m[4]);
    r.box = std::stoi(m[5]);
  } catch (const std::out_of_range&) {
    raise<DataError>("numeric field out of range in filename: ", name);
  }
  if (r.camera < 1) raise<DataError>("camera index must be positive in filename: ", name);
  r.extension = m[6];
  r.path = name;
  return r;
}

inline std::string format_market_filename(const ImageRecord& r) {
  char buf[96];
  if (r.identity < 0) {
    std::snprintf(buf, sizeof buf, "%d_c%ds%d_%06d_%02d", r.identity, r.camera, r.sequence, r.frame, r.box);
  } else {
    std::snprintf(buf, sizeof buf, "%04d_c%ds%d_%06d_%02d", r.identity, r.camera, r.sequence, r.frame, r.box);
  }
  return buf + r.extension;
}

// Original identity -> dense class index in [0, num_classes).
class IdentityMap {
 public:
  IdentityMap() = default;

  static IdentityMap from_records(const std::vector<ImageRecord>& records) {
    std::set<int> ids;
    for (const auto& r : records) ids.insert(r.identity);
    IdentityMap map;
    for (int id : ids) map.add(id);
    return map;
  }

  void add(int original) {
    if (!dense_.count(original)) {
      dense_[original] = static_cast<int>(originals_.size());
      originals_.push_back(original);
    }
  }

  int dense(int original) const {
    auto it = dense_.find(original);
    if (it == dense_.end()) raise<DataError>("identity ", original, " is not a training class");
    return it->second;
  }
  int original(int dense) const { return originals_.at(static_cast<std::size_t>(dense)); }
  std::size_t size() const { return originals_.size(); }

  void save(const fs::path& path) const {
    std::ofstream os(path);
    if (!os) raise<DataError>("cannot write identity map ", path.string());
    for (std::size_t i = 0; i < originals_.size(); ++i) os << originals_[i] << ' ' << i << '\n';
  }

  static IdentityMap load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) raise<DataError>("cannot read identity map ", path.string());
    IdentityMap map;
    int original = 0, dense = 0;
    while (is >> original >> dense) {
      if (dense != static_cast<int>(map.size())) raise<DataError>("identity map ", path.string(), " is not dense");
      map.add(original);
    }
    return map;
  }

  bool operator==(const IdentityMap& o) const { return originals_ == o.originals_; }

 private:
  std::map<int, int> dense_;
  std::vector<int> originals_;
};

struct DatasetSplit {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> gallery;
  std::vector<ImageRecord> query;
  IdentityMap classes;  // dense labels for train identities
};

// Records plus decoded pixels (empty when features are imported instead).
struct Dataset {
  DatasetSplit split;
  std::unordered_map<std::string, Image> images;  // keyed by record path string

  const Image& image(const ImageRecord& r) const {
    auto it = images.find(r.path.string());
    if (it == images.end()) raise<DataError>("no pixels loaded for ", r.path.string());
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Image codec

inline Image load_image(const fs::path& path, std::size_t height, std::size_t width) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) raise<DataError>("cannot decode image ", path.string());
  if (static_cast<std::size_t>(bgr.rows) != height || static_cast<std::size_t>(bgr.cols) != width) {
    cv::Mat resized;
    cv::resize(bgr, resized, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_LINEAR);
    bgr = resized;
  }
  Image img = Image::blank(3, height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(row[x][2 - c]) / 255.0f;
  }
  return img;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void save_png(const fs::path& path, const Image& img) {
  if (img.channels != 3) raise<DataError>("save_png supports 3-channel images only");
  cv::Mat bgr(static_cast<int>(img.height), static_cast<int>(img.width), CV_8UC3);
  for (std::size_t y = 0; y < img.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) row[x][2 - c] = to_byte(img.at(c, y, x));
  }
  if (!cv::imwrite(path.string(), bgr)) raise<DataError>("cannot write image ", path.string());
}

// ---------------------------------------------------------------------------
// Market-1501 layout

inline constexpr const char* kTrainDir = "bounding_box_train";
inline constexpr const char* kGalleryDir = "bounding_box_test";
inline constexpr const char* kQueryDir = "query";

inline std::vector<ImageRecord> scan_market_dir(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg" || ext == ".png") names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  std::vector<ImageRecord> out;
  out.reserve(names.size());
  for (const auto& n : names) {
    auto r = parse_market_filename(n);
    r.path = dir / n;
    out.push_back(std::move(r));
  }
  return out;
}

// Reads the three Market-1501 subdirectories. Junk boxes (identity -1) are
// dropped from training and kept in the gallery for protocol handling.
inline DatasetSplit load_market(const fs::path& root) {
  for (const char* sub : {kTrainDir, kGalleryDir, kQueryDir}) {
    if (!fs::is_directory(root / sub)) {
      raise<DataError>("dataset layout error: missing ", (root / sub).string());
    }
  }
  DatasetSplit split;
  for (auto& r : scan_market_dir(root / kTrainDir)) {
    if (r.identity != kJunkIdentity) split.train.push_back(std::move(r));
  }
  split.gallery = scan_market_dir(root / kGalleryDir);
  split.query = scan_market_dir(root / kQueryDir);
  if (split.train.empty() && split.gallery.empty() && split.query.empty()) {
    raise<DataError>("empty dataset: no parsable images under ", root.string());
  }
  split.classes = IdentityMap::from_records(split.train);
  return split;
}

// Decodes every image of the split at the given resolution.
inline Dataset load_market_images(const fs::path& root, std::size_t height, std::size_t width) {
  Dataset ds{load_market(root), {}};
  for (const auto* list : {&ds.split.train, &ds.split.gallery, &ds.split.query}) {
    for (const auto& r : *list) ds.images.emplace(r.path.string(), load_image(r.path, height, width));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic identities

struct SyntheticSpec {
  std::size_t num_identities = 20;
  std::size_t images_per_identity = 12;
  std::size_t num_cameras = 3;
  std::size_t image_height = 48;
  std::size_t image_width = 24;
  double noise_level = 0.08;
  std::uint64_t seed = 0;
};

inline void validate(const SyntheticSpec& spec, std::size_t min_images_per_identity = 1) {
  if (spec.num_identities < 2) raise<ConfigError>("synthetic spec: need at least 2 identities");
  if (spec.num_cameras < 1) raise<ConfigError>("synthetic spec: need at least 1 camera");
  if (spec.images_per_identity < min_images_per_identity) {
    raise<ConfigError>("synthetic spec: images_per_identity=", spec.images_per_identity, " is below K=",
                       min_images_per_identity);
  }
  if (spec.images_per_identity < 4) {
    raise<ConfigError>("synthetic spec: images_per_identity=", spec.images_per_identity,
                       " leaves no room for train, query and gallery images (need >= 4)");
  }
  if (spec.image_height < 6 || spec.image_width < 2) raise<ConfigError>("synthetic spec: image too small");
  if (spec.noise_level < 0.0) raise<ConfigError>("synthetic spec: negative noise level");
}

// Each identity is a column of horizontal colour bands with seeded heights
// and colours plus a side panel; cameras add a fixed colour tint; every image
// gets i.i.d. Gaussian pixel noise. Pixels are quantized to 8 bits so
// in-memory and PNG round-tripped datasets are identical.
//
// Per identity, image i is seen by camera (i mod cameras) + 1. The first
// half of the images go to train; of the rest, the first image from each
// camera becomes a query (keeping at least one for the gallery) and the
// remainder forms the gallery.
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t min_images_per_identity = 1) {
  validate(spec, min_images_per_identity);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t h = spec.image_height, w = spec.image_width;

  std::vector<std::array<double, 3>> tints(spec.num_cameras);
  for (auto& t : tints)
    for (auto& v : t) v = (unit(rng) - 0.5) * 0.16;

  Dataset ds;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    // Pattern: 3-5 bands with random boundaries, plus a vertical panel.
    const std::size_t bands = 3 + static_cast<std::size_t>(unit(rng) * 3.0);
    std::vector<std::size_t> cuts{0, h};
    while (cuts.size() < bands + 1) {
      auto c = static_cast<std::size_t>(1 + unit(rng) * static_cast<double>(h - 1));
      if (std::find(cuts.begin(), cuts.end(), c) == cuts.end()) cuts.push_back(c);
    }
    std::sort(cuts.begin(), cuts.end());
    std::vector<std::array<double, 3>> colors(bands);
    for (auto& col : colors)
      for (auto& v : col) v = 0.1 + 0.8 * unit(rng);
    const std::size_t panel_x0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(w / 2));
    const std::size_t panel_w = 1 + w / 4;
    const std::size_t panel_y0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(h / 2));
    const std::size_t panel_h = h / 4;
    std::array<double, 3> panel{};
    for (auto& v : panel) v = 0.1 + 0.8 * unit(rng);

    Image base = Image::blank(3, h, w);
    for (std::size_t y = 0; y < h; ++y) {
      std::size_t band = 0;
      while (y >= cuts[band + 1]) ++band;
      for (std::size_t x = 0; x < w; ++x) {
        const bool in_panel = x >= panel_x0 && x < panel_x0 + panel_w && y >= panel_y0 && y < panel_y0 + panel_h;
        for (std::size_t c = 0; c < 3; ++c)
          base.at(c, y, x) = static_cast<float>(in_panel ? panel[c] : colors[band][c]);
      }
    }

    std::normal_distribution<double> noise(0.0, spec.noise_level > 0.0 ? spec.noise_level : 1.0);
    const std::size_t n = spec.images_per_identity, train_count = n / 2;
    std::set<int> query_cams;
    for (std::size_t i = 0; i < n; ++i) {
      ImageRecord r;
      r.identity = static_cast<int>(id + 1);
      r.camera = static_cast<int>(i % spec.num_cameras + 1);
      r.sequence = 1;
      r.frame = static_cast<int>(i);
      r.box = 0;
      r.extension = ".png";
      Image img = base;
      const auto& tint = tints[static_cast<std::size_t>(r.camera - 1)];
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < h * w; ++p) {
          double v = img.pixels[c * h * w + p] + tint[c];
          if (spec.noise_level > 0.0) v += noise(rng);
          img.pixels[c * h * w + p] = static_cast<float>(to_byte(static_cast<float>(v))) / 255.0f;
        }
      std::vector<ImageRecord>* dest = nullptr;
      const char* sub = nullptr;
      if (i < train_count) {
        dest = &ds.split.train, sub = kTrainDir;
      } else {
        if (!query_cams.count(r.camera) && query_cams.size() + 1 < n - train_count) {
          query_cams.insert(r.camera);
          dest = &ds.split.query, sub = kQueryDir;
        } else {
          dest = &ds.split.gallery, sub = kGalleryDir;
        }
      }
      r.path = fs::path(sub) / format_market_filename(r);
      ds.images.emplace(r.path.string(), std::move(img));
      dest->push_back(std::move(r));
    }
  }
  // Same record order as a directory scan of the written dataset.
  for (auto* list : {&ds.split.train, &ds.split.gallery, &ds.split.query}) {
    std::sort(list->begin(), list->end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.path < b.path; });
  }
  ds.split.classes = IdentityMap::from_records(ds.split.train);
  return ds;
}

// Writes images in the Market-1501 layout under `root`, plus the identity
// map and a manifest listing every file with its content hash.
inline void write_dataset(const Dataset& ds, const fs::path& root, const std::string& header = {}) {
  for (const char* sub : {kTrainDir, kGalleryDir, kQueryDir}) fs::create_directories(root / sub);
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) raise<DataError>("cannot write manifest under ", root.string());
  if (!header.empty()) manifest << header;
  std::vector<std::string> keys;
  for (const auto& [key, _] : ds.images) keys.push_back(key);
  std::sort(keys.begin(), keys.end());
  for (const auto& key : keys) {
    save_png(root / key, ds.images.at(key));
    std::ifstream in(root / key, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::uint64_t hash = 1469598103934665603ULL;
    for (unsigned char c : bytes) hash = (hash ^ c) * 1099511628211ULL;
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash));
    manifest << key << ' ' << hex << '\n';
  }
  ds.split.classes.save(root / "id_map.txt");
}

// ---------------------------------------------------------------------------
// P×K sampling

struct PKBatch {
  std::vector<std::size_t> indices;  // into the training record list
  std::vector<int> labels;           // dense class per sample
};

// Groups training records by dense label and draws P×K batches. One epoch is
// ceil(num_identities / P) batches over a shuffled identity order, so every
// identity appears at least once per epoch.
class PKSampler {
 public:
  PKSampler(const std::vector<ImageRecord>& train, const IdentityMap& classes, std::size_t p, std::size_t k)
      : p_(p), k_(k) {
    if (p < 1 || k < 1) raise<ConfigError>("P and K must be positive (P=", p, ", K=", k, ")");
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < train.size(); ++i) by_label[classes.dense(train[i].identity)].push_back(i);
    for (auto& [label, idx] : by_label) {
      labels_.push_back(label);
      members_.push_back(std::move(idx));
    }
    if (labels_.size() < p) {
      raise<DataError>("sampler needs at least P=", p, " training identities, found ", labels_.size());
    }
  }

  std::size_t batches_per_epoch() const { return (labels_.size() + p_ - 1) / p_; }
  std::size_t batch_size() const { return p_ * k_; }

  template <typename Rng>
  std::vector<PKBatch> epoch(Rng& rng) const {
    std::vector<std::size_t> order(labels_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<PKBatch> out;
    for (std::size_t b = 0; b < batches_per_epoch(); ++b) {
      std::vector<std::size_t> chosen(order.begin() + static_cast<std::ptrdiff_t>(b * p_),
                                      order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), (b + 1) * p_)));
      if (chosen.size() < p_) {
        std::vector<std::size_t> rest;
        for (std::size_t g = 0; g < labels_.size(); ++g) {
          if (std::find(chosen.begin(), chosen.end(), g) == chosen.end()) rest.push_back(g);
        }
        std::shuffle(rest.begin(), rest.end(), rng);
        chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(p_ - chosen.size()));
      }
      PKBatch batch;
      for (auto g : chosen) {
        auto members = members_[g];
        if (members.size() >= k_) {
          std::shuffle(members.begin(), members.end(), rng);
          members.resize(k_);
        } else {
          std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
          std::vector<std::size_t> drawn(k_);
          for (auto& d : drawn) d = members[pick(rng)];
          members = std::move(drawn);
        }
        for (auto idx : members) {
          batch.indices.push_back(idx);
          batch.labels.push_back(labels_[g]);
        }
      }
      out.push_back(std::move(batch));
    }
    return out;
  }

 private:
  std::size_t p_, k_;
  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> members_;
};

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  std::size_t pad = 10;
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;  // max is 1/min
  std::size_t erase_attempts = 100;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

// Random choices of one augmentation pass, separable from their application.
struct AugmentDraw {
  std::size_t crop_y = 0;
  std::size_t crop_x = 0;
  bool flip = false;
  bool erase = false;
  std::size_t erase_y = 0, erase_x = 0, erase_h = 0, erase_w = 0;
};

template <typename Rng>
AugmentDraw draw_augment(std::size_t height, std::size_t width, Rng& rng, const AugmentConfig& cfg) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * cfg.pad);
  AugmentDraw d;
  d.crop_y = offset(rng);
  d.crop_x = offset(rng);
  d.flip = unit(rng) < cfg.flip_prob;
  if (unit(rng) < cfg.erase_prob) {
    const double area = static_cast<double>(height * width);
    std::uniform_real_distribution<double> target(cfg.erase_area_min, cfg.erase_area_max);
    std::uniform_real_distribution<double> aspect(cfg.erase_aspect_min, 1.0 / cfg.erase_aspect_min);
    for (std::size_t attempt = 0; attempt < cfg.erase_attempts; ++attempt) {
      const double a = target(rng) * area;
      const double r = aspect(rng);
      const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(a * r)));
      const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(a / r)));
      const double frac = static_cast<double>(eh * ew) / area;
      if (eh == 0 || ew == 0 || eh >= height || ew >= width || frac < cfg.erase_area_min ||
          frac > cfg.erase_area_max) {
        continue;
      }
      d.erase = true;
      d.erase_h = eh;
      d.erase_w = ew;
      d.erase_y = std::uniform_int_distribution<std::size_t>(0, height - eh)(rng);
      d.erase_x = std::uniform_int_distribution<std::size_t>(0, width - ew)(rng);
      break;
    }
  }
  return d;
}

// Per-channel (x - mean) / std.
inline Image normalize_image(Image img, const AugmentConfig& cfg) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      auto& v = img.pixels[c * plane + p];
      v = static_cast<float>((v - cfg.mean[c % 3]) / cfg.std[c % 3]);
    }
  return img;
}

// Crop of the image zero-padded by `pad` on every side, taken at (y, x) in
// the padded frame; output keeps the input size.
inline Image pad_and_crop(const Image& img, std::size_t pad, std::size_t y0, std::size_t x0) {
  if (y0 > 2 * pad || x0 > 2 * pad) raise<ContractError>("crop offset exceeds padding");
  const std::size_t h = img.height, w = img.width;
  Image out = Image::blank(img.channels, h, w);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t py = y + y0, px = x + x0;
        const bool inside = py >= pad && py < pad + h && px >= pad && px < pad + w;
        out.at(c, y, x) = inside ? img.at(c, py - pad, px - pad) : 0.0f;
      }
  return out;
}

inline Image flip_horizontal(Image img) {
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y) {
      auto* row = &img.pixels[(c * img.height + y) * img.width];
      std::reverse(row, row + img.width);
    }
  return img;
}

// Zero-pad and crop, optional mirror, normalize, optional erase filled with
// the per-channel mean values.
inline Image apply_augment(const Image& img, const AugmentDraw& d, const AugmentConfig& cfg) {
  Image out = pad_and_crop(img, cfg.pad, d.crop_y, d.crop_x);
  if (d.flip) out = flip_horizontal(std::move(out));
  out = normalize_image(std::move(out), cfg);
  if (d.erase) {
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = d.erase_y; y < d.erase_y + d.erase_h; ++y)
        for (std::size_t x = d.erase_x; x < d.erase_x + d.erase_w; ++x)
          out.at(c, y, x) = static_cast<float>(cfg.mean[c % 3]);
  }
  return out;
}

template <typename Rng>
Image augment(const Image& img, Rng& rng, const AugmentConfig& cfg) {
  if (!cfg.enabled) return normalize_image(img, cfg);
  return apply_augment(img, draw_augment(img.height, img.width, rng, cfg), cfg);
}

}  // namespace mros
