#pragma once

// Optimization: warm-up + staircase learning rate, Adam, the P×K training
// step with all three losses, class-center updates, checkpoints and the
// epoch loop.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mros/binary_io.hpp"
#include "mros/config.hpp"
#include "mros/data.hpp"
#include "mros/error.hpp"
#include "mros/evaluator.hpp"
#include "mros/losses.hpp"
#include "mros/model.hpp"
#include "mros/parallel.hpp"
#include "mros/tensor.hpp"
#include "mros/tensor_io.hpp"

namespace mros {

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct LrSchedule {
  double base_lr = 0.001;
  std::size_t warmup_epochs = 10;
  double warmup_coefficient = 0.01;
  double decay_factor = 0.1;
  std::size_t decay_period = 30;
};

// Linear ramp from coefficient·base to base over the warm-up epochs, then
// base · factor^floor((e - warmup) / period).
inline double lr_at_epoch(std::size_t epoch, const LrSchedule& s) {
  if (epoch < s.warmup_epochs) {
    const double t = static_cast<double>(epoch) / static_cast<double>(s.warmup_epochs);
    return s.base_lr * (s.warmup_coefficient + (1.0 - s.warmup_coefficient) * t);
  }
  const auto drops = (epoch - s.warmup_epochs) / s.decay_period;
  return s.base_lr * std::pow(s.decay_factor, static_cast<double>(drops));
}

inline LrSchedule schedule_of(const RunConfig& c) {
  return {c.base_lr, c.warmup_epochs, c.warmup_coefficient, c.decay_factor, c.decay_period};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  struct Moments {
    std::vector<double> m, v;
  };
  AdamOptions opts;
  std::uint64_t step = 0;
  std::map<std::string, Moments> moments;
};

// One bias-corrected Adam update of every parameter. A parameter that
// received no gradient is treated as having a zero gradient.
inline void adam_step(const std::vector<NamedTensor>& params, OptimizerState& state, double lr) {
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) raise<DivergenceError>("non-finite gradient in parameter ", p.name);
    }
  }
  ++state.step;
  const auto& o = state.opts;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (const auto& p : params) {
    Tensor t = p.tensor;
    auto& mom = state.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(t.numel(), 0.0);
      mom.v.assign(t.numel(), 0.0);
    }
    if (mom.m.size() != t.numel()) raise<DimensionError>("optimizer moments do not match parameter ", p.name);
    auto grad = t.grad();
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double g = grad.empty() ? 0.0 : grad[i];
      g += o.weight_decay * data[i];
      mom.m[i] = o.beta1 * mom.m[i] + (1.0 - o.beta1) * g;
      mom.v[i] = o.beta2 * mom.v[i] + (1.0 - o.beta2) * g * g;
      const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Model construction

inline std::unique_ptr<Backbone> make_backbone(const RunConfig& cfg, std::mt19937_64& rng) {
  if (cfg.backbone == "features") return std::make_unique<FeatureFileBackbone>(cfg.features_manifest);
  return std::make_unique<ToyBackbone>(cfg.toy_backbone(), cfg.stripes, rng);
}

inline std::unique_ptr<Model> make_model(const RunConfig& cfg, std::size_t num_classes, std::mt19937_64& rng) {
  cfg.validate();
  auto backbone = make_backbone(cfg, rng);
  return std::make_unique<Model>(std::move(backbone), cfg.head_config(num_classes), rng);
}

// Number of center tables: one on G, or one per stripe row for local metric losses.
inline std::vector<ClassCenters> make_centers(const HeadConfig& h, double update_rate) {
  if (h.global_metric) return {ClassCenters::zeros(h.num_classes, h.descriptor_dim(), update_rate)};
  return std::vector<ClassCenters>(h.rows_per_resolution(), ClassCenters::zeros(h.num_classes, h.c4, update_rate));
}

inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic") return generate_synthetic(cfg.synthetic_spec(), cfg.K);
  if (cfg.backbone == "features") return Dataset{load_market(cfg.dataset), {}};
  return load_market_images(cfg.dataset, cfg.input_height, cfg.input_width);
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "MRCK" | version u32 | header_len u64 | header text | payload
// The header holds `key value` metadata lines, the config as `config k=v`
// lines, and `tensor name offset length` entries pointing into the payload of
// concatenated tensor records.

struct Checkpoint {
  RunConfig config;
  std::size_t num_classes = 0;
  std::size_t epoch = 0;
  std::uint64_t adam_step = 0;
  std::string rng_state;
  std::string fingerprint;
  std::map<std::string, Tensor> tensors;

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) raise<DataError>("checkpoint lacks tensor ", name);
    return it->second;
  }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ostringstream payload(std::ios::binary);
  std::ostringstream header;
  header << "fingerprint " << ck.config.fingerprint() << '\n';
  header << "num_classes " << ck.num_classes << '\n';
  header << "epoch " << ck.epoch << '\n';
  header << "adam_step " << ck.adam_step << '\n';
  header << "rng " << ck.rng_state << '\n';
  std::istringstream cfg(ck.config.to_text());
  for (std::string line; std::getline(cfg, line);) header << "config " << line << '\n';
  for (const auto& [name, t] : ck.tensors) {
    const auto offset = static_cast<std::uint64_t>(payload.tellp());
    write_tensor(payload, t);
    const auto length = static_cast<std::uint64_t>(payload.tellp()) - offset;
    header << "tensor " << name << ' ' << offset << ' ' << length << '\n';
  }
  const std::string head = header.str(), body = payload.str();
  std::ofstream os(path, std::ios::binary);
  if (!os) raise<DataError>("cannot write checkpoint ", path.string());
  binary::write_magic(os, "MRCK");
  binary::write_le<std::uint32_t>(os, kCheckpointVersion);
  binary::write_le<std::uint64_t>(os, head.size());
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  os.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!os) raise<DataError>("write failed for checkpoint ", path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise<DataError>("cannot open checkpoint ", path.string());
  binary::expect_magic(is, "MRCK", path.string());
  const auto version = binary::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) raise<DataError>("unsupported checkpoint version ", version);
  const auto head_len = binary::read_le<std::uint64_t>(is, "checkpoint header length");
  std::string head(head_len, '\0');
  if (!is.read(head.data(), static_cast<std::streamsize>(head_len))) raise<DataError>("truncated checkpoint header");
  const std::string body((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  std::string config_text;
  std::istringstream lines(head);
  for (std::string line; std::getline(lines, line);) {
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp), rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "fingerprint") ck.fingerprint = rest;
    else if (key == "num_classes") ck.num_classes = std::stoull(rest);
    else if (key == "epoch") ck.epoch = std::stoull(rest);
    else if (key == "adam_step") ck.adam_step = std::stoull(rest);
    else if (key == "rng") ck.rng_state = rest;
    else if (key == "config") config_text += rest + "\n";
    else if (key == "tensor") {
      std::istringstream ts(rest);
      std::string name;
      std::uint64_t offset = 0, length = 0;
      if (!(ts >> name >> offset >> length) || offset + length > body.size()) {
        raise<DataError>("corrupt tensor entry in checkpoint: ", line);
      }
      std::istringstream blob(body.substr(offset, length), std::ios::binary);
      ck.tensors.emplace(name, read_tensor(blob));
    } else if (!key.empty()) {
      raise<DataError>("unknown checkpoint header line: ", line);
    }
  }
  ck.config = RunConfig::parse(config_text);
  if (ck.config.fingerprint() != ck.fingerprint) {
    raise<DataError>("checkpoint config does not match its fingerprint ", ck.fingerprint);
  }
  return ck;
}

// Parameters and BN running statistics.
inline void load_model_state(Model& model, const Checkpoint& ck) {
  for (const auto& p : model.parameters()) {
    Tensor dst = p.tensor;
    const auto& src = ck.tensor("param." + p.name);
    if (dst.shape() != src.shape()) raise<DataError>("checkpoint tensor ", p.name, " has wrong shape");
    auto d = dst.mutable_data();
    std::copy(src.data().begin(), src.data().end(), d.begin());
  }
  for (auto& h : model.head().stripes) {
    const std::string name = "r" + std::to_string(h.resolution) + ".s" + std::to_string(h.row);
    auto m = ck.tensor("bn.mean." + name).data();
    auto v = ck.tensor("bn.var." + name).data();
    if (m.size() != h.stats.mean.size() || v.size() != h.stats.var.size()) {
      raise<DataError>("checkpoint BN statistics ", name, " have wrong size");
    }
    h.stats.mean.assign(m.begin(), m.end());
    h.stats.var.assign(v.begin(), v.end());
  }
}

// ---------------------------------------------------------------------------
// Trainer

struct StepResult {
  double triplet = 0.0;
  double center = 0.0;
  double cross = 0.0;
  double total = 0.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based count of completed epochs
  double lr = 0.0;
  StepResult loss;  // mean over the epoch's steps
  std::optional<EvalReport> eval;
};

inline std::string metrics_csv_header(const std::string& fingerprint) {
  return "# config_fingerprint=" + fingerprint + "\nepoch,lr,L_triplet,L_center,L_cross,total,mAP,rank1\n";
}

inline std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << m.epoch << ',' << m.lr << ',' << m.loss.triplet << ',' << m.loss.center << ','
     << m.loss.cross << ',' << m.loss.total << ',';
  if (m.eval) os << m.eval->mAP << ',' << m.eval->rank1;
  else os << ',';
  os << '\n';
  return os.str();
}

class Trainer {
 public:
  Trainer(RunConfig cfg, std::shared_ptr<const Dataset> data)
      : cfg_(std::move(cfg)), data_(std::move(data)), rng_(cfg_.seed) {
    cfg_.validate();
    if (data_->split.train.empty()) raise<DataError>("training split is empty");
    model_ = make_model(cfg_, data_->split.classes.size(), rng_);
    centers_ = make_centers(model_->config(), cfg_.center_update_rate);
    opt_.opts = {cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps, cfg_.weight_decay};
    sampler_.emplace(data_->split.train, data_->split.classes, cfg_.P, cfg_.K);
  }

  // Restores model, optimizer, centers, epoch and RNG from a checkpoint. The
  // checkpoint's config must agree with `cfg` on everything except the
  // run-length keys (epochs, eval_every, threads).
  static Trainer resume(const Checkpoint& ck, RunConfig cfg, std::shared_ptr<const Dataset> data) {
    auto comparable = [](RunConfig c) {
      c.epochs = 0;
      c.eval_every = 1;
      c.threads = 0;
      return c.to_text();
    };
    if (comparable(ck.config) != comparable(cfg)) {
      raise<ConfigError>("checkpoint was produced with a different configuration (fingerprint ", ck.fingerprint, ")");
    }
    Trainer t(std::move(cfg), std::move(data));
    t.restore(ck);
    return t;
  }

  StepResult train_step(const PKBatch& batch) {
    const double lr = lr_at_epoch(epoch_, schedule_of(cfg_));
    return train_step(batch, lr);
  }

  StepResult train_step(const PKBatch& batch, double lr) {
    const auto inputs = batch_inputs(batch);
    auto params = model_->parameters();
    for (auto& p : params) p.tensor.zero_grad();

    auto out = model_->forward(inputs, Mode::kTrain);
    const auto& hc = model_->config();
    const std::span<const int> labels(batch.labels);
    auto features = out.metric_features(hc);
    if (features.size() != centers_.size()) raise<ContractError>("center tables do not match metric features");

    LossParts parts;
    for (std::size_t f = 0; f < features.size(); ++f) {
      auto trip = triplet_batch_hard(features[f], labels, cfg_.alpha);
      auto cent = center_loss(features[f], labels, centers_[f]);
      parts.triplet = f == 0 ? trip : add(parts.triplet, trip);
      parts.center = f == 0 ? cent : add(parts.center, cent);
    }
    if (features.size() > 1) {
      const double inv = 1.0 / static_cast<double>(features.size());
      parts.triplet = scale(parts.triplet, inv);
      parts.center = scale(parts.center, inv);
    }
    parts.cross = total_cross_entropy(out.logits, labels, cfg_.epsilon, hc.num_stripe_heads());
    auto total = total_loss(parts, cfg_.loss_weights());
    if (!std::isfinite(total.item())) raise<DivergenceError>("training diverged: total loss is ", total.item());

    total.backward();
    adam_step(params, opt_, lr);
    for (std::size_t f = 0; f < features.size(); ++f) update_centers(features[f], labels, centers_[f]);
    return {parts.triplet.item(), parts.center.item(), parts.cross.item(), total.item()};
  }

  // One pass of ceil(identities / P) P×K batches at this epoch's rate.
  EpochMetrics run_epoch() {
    EpochMetrics m;
    m.lr = lr_at_epoch(epoch_, schedule_of(cfg_));
    const auto batches = sampler_->epoch(rng_);
    for (const auto& b : batches) {
      auto r = train_step(b, m.lr);
      m.loss.triplet += r.triplet;
      m.loss.center += r.center;
      m.loss.cross += r.cross;
      m.loss.total += r.total;
    }
    const double n = static_cast<double>(batches.size());
    m.loss = {m.loss.triplet / n, m.loss.center / n, m.loss.cross / n, m.loss.total / n};
    m.epoch = ++epoch_;
    return m;
  }

  EmbeddingSet embed(const std::vector<ImageRecord>& records) const {
    if (records.empty()) raise<DataError>("cannot embed an empty split");
    return embed_records(*model_, records, data_.get(), cfg_);
  }

  EvalReport evaluate() const {
    return mros::evaluate(embed(data_->split.query), embed(data_->split.gallery), cfg_.eval_options());
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = cfg_;
    ck.fingerprint = cfg_.fingerprint();
    ck.num_classes = model_->config().num_classes;
    ck.epoch = epoch_;
    ck.adam_step = opt_.step;
    std::ostringstream rs;
    rs << rng_;
    ck.rng_state = rs.str();
    for (const auto& p : model_->parameters()) {
      ck.tensors.emplace("param." + p.name, p.tensor.detach());
      if (auto it = opt_.moments.find(p.name); it != opt_.moments.end()) {
        ck.tensors.emplace("adam.m." + p.name, Tensor(p.tensor.shape(), it->second.m));
        ck.tensors.emplace("adam.v." + p.name, Tensor(p.tensor.shape(), it->second.v));
      }
    }
    for (const auto& h : model_->head().stripes) {
      const std::string name = "r" + std::to_string(h.resolution) + ".s" + std::to_string(h.row);
      ck.tensors.emplace("bn.mean." + name, Tensor({h.stats.mean.size()}, h.stats.mean));
      ck.tensors.emplace("bn.var." + name, Tensor({h.stats.var.size()}, h.stats.var));
    }
    for (std::size_t k = 0; k < centers_.size(); ++k) {
      ck.tensors.emplace("centers." + std::to_string(k),
                         Tensor({centers_[k].num_classes, centers_[k].dim}, centers_[k].values));
    }
    return ck;
  }

  std::size_t epoch() const { return epoch_; }
  const RunConfig& config() const { return cfg_; }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  const std::vector<ClassCenters>& centers() const { return centers_; }
  const OptimizerState& optimizer() const { return opt_; }
  const Dataset& dataset() const { return *data_; }
  const PKSampler& sampler() const { return *sampler_; }
  std::mt19937_64& rng() { return rng_; }

  static EmbeddingSet embed_records(const Model& model, const std::vector<ImageRecord>& records, const Dataset* data,
                                    const RunConfig& cfg) {
    std::vector<std::vector<float>> rows(records.size());
    const auto aug = cfg.augment_config();
    parallel_for(
        records.size(),
        [&](std::size_t i) {
          BackboneInput in{records[i].image_id(), {}};
          if (model.backbone().needs_pixels()) in.pixels = to_tensor(normalize_image(data->image(records[i]), aug));
          rows[i] = model.embed(in);
        },
        cfg.threads);
    EmbeddingSet set;
    for (std::size_t i = 0; i < records.size(); ++i) {
      set.push_back(rows[i], records[i].identity, records[i].camera, records[i].path.string());
    }
    return set;
  }

 private:
  std::vector<BackboneInput> batch_inputs(const PKBatch& batch) {
    const auto& train = data_->split.train;
    const auto aug = cfg_.augment_config();
    std::vector<BackboneInput> inputs;
    inputs.reserve(batch.indices.size());
    for (auto idx : batch.indices) {
      const auto& rec = train.at(idx);
      BackboneInput in{rec.image_id(), {}};
      if (model_->backbone().needs_pixels()) in.pixels = to_tensor(augment(data_->image(rec), rng_, aug));
      inputs.push_back(std::move(in));
    }
    return inputs;
  }

  void restore(const Checkpoint& ck) {
    if (ck.num_classes != model_->config().num_classes) {
      raise<DataError>("checkpoint has ", ck.num_classes, " classes, dataset has ", model_->config().num_classes);
    }
    load_model_state(*model_, ck);
    for (const auto& p : model_->parameters()) {
      if (ck.tensors.count("adam.m." + p.name)) {
        auto& mom = opt_.moments[p.name];
        auto m = ck.tensor("adam.m." + p.name).data();
        auto v = ck.tensor("adam.v." + p.name).data();
        mom.m.assign(m.begin(), m.end());
        mom.v.assign(v.begin(), v.end());
      }
    }
    for (std::size_t k = 0; k < centers_.size(); ++k) {
      auto c = ck.tensor("centers." + std::to_string(k)).data();
      if (c.size() != centers_[k].values.size()) raise<DataError>("checkpoint center table ", k, " has wrong size");
      centers_[k].values.assign(c.begin(), c.end());
    }
    opt_.step = ck.adam_step;
    epoch_ = ck.epoch;
    std::istringstream rs(ck.rng_state);
    rs >> rng_;
    if (!rs) raise<DataError>("corrupt RNG state in checkpoint");
  }

  RunConfig cfg_;
  std::shared_ptr<const Dataset> data_;
  std::mt19937_64 rng_;
  std::unique_ptr<Model> model_;
  std::vector<ClassCenters> centers_;
  OptimizerState opt_;
  std::optional<PKSampler> sampler_;
  std::size_t epoch_ = 0;
};

// Rebuilds just the model (for embedding) from a checkpoint.
inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ck) {
  std::mt19937_64 rng(ck.config.seed);
  auto model = make_model(ck.config, ck.num_classes, rng);
  load_model_state(*model, ck);
  return model;
}

struct FitResult {
  std::vector<EpochMetrics> epochs;
  std::optional<EvalReport> final_eval;
  Checkpoint final_checkpoint;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::optional<Checkpoint> resume;
  std::ostream* log = nullptr;
};

// Runs epochs [start, cfg.epochs) with periodic evaluation, writing
// metrics.csv, last.ckpt after each epoch and final.ckpt at the end. On a
// numeric divergence the current state goes to diverged.ckpt before the
// error propagates.
inline FitResult fit(const RunConfig& cfg, std::shared_ptr<const Dataset> data, const FitOptions& opts = {}) {
  Trainer trainer = opts.resume ? Trainer::resume(*opts.resume, cfg, data) : Trainer(cfg, data);
  const bool write = !opts.out_dir.empty();
  std::ofstream csv;
  if (write) {
    std::filesystem::create_directories(opts.out_dir);
    csv.open(opts.out_dir / "metrics.csv", opts.resume ? std::ios::app : std::ios::trunc);
    if (!csv) raise<DataError>("cannot write metrics under ", opts.out_dir.string());
    if (!opts.resume) csv << metrics_csv_header(cfg.fingerprint());
    data->split.classes.save(opts.out_dir / "id_map.txt");
  }
  FitResult result;
  while (trainer.epoch() < cfg.epochs) {
    EpochMetrics m;
    try {
      m = trainer.run_epoch();
    } catch (const DivergenceError&) {
      if (write) save_checkpoint(opts.out_dir / "diverged.ckpt", trainer.checkpoint());
      throw;
    }
    if (m.epoch % cfg.eval_every == 0 || m.epoch == cfg.epochs) m.eval = trainer.evaluate();
    if (opts.log) {
      *opts.log << "epoch " << m.epoch << " lr " << m.lr << " triplet " << m.loss.triplet << " center "
                << m.loss.center << " cross " << m.loss.cross << " total " << m.loss.total;
      if (m.eval) *opts.log << " mAP " << m.eval->mAP << " rank1 " << m.eval->rank1;
      *opts.log << std::endl;
    }
    if (write) {
      csv << metrics_csv_row(m) << std::flush;
      save_checkpoint(opts.out_dir / "last.ckpt", trainer.checkpoint());
    }
    result.final_eval = m.eval;
    result.epochs.push_back(std::move(m));
  }
  result.final_checkpoint = trainer.checkpoint();
  if (write) save_checkpoint(opts.out_dir / "final.ckpt", result.final_checkpoint);
  return result;
}

}  // namespace mros
