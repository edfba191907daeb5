#pragma once

// Single-stage classification training with AdamW, periodic validation and
// checkpointing.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "patentret/augment.hpp"
#include "patentret/checkpoint.hpp"
#include "patentret/dataset.hpp"
#include "patentret/eval.hpp"
#include "patentret/model.hpp"
#include "patentret/optim.hpp"
#include "patentret/retrieval.hpp"

namespace patentret {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string manifest_path;
  AugmentPolicy augment;
  ModelConfig model;  // num_classes is filled in from the train split
  double lr = 1e-3;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t max_iters = 20000;
  std::uint64_t seed = 0;
  std::string checkpoint_path = "model.prkt";
  std::string best_checkpoint_path;  // empty: derived from checkpoint_path
  std::string log_path;              // empty: no CSV log
  std::size_t log_every = 50;
  std::size_t eval_every = 500;      // 0: evaluate only at the end
  std::size_t eval_batch_size = 128;

  /// Documented defaults: 256x256 drawings, 224 crops, batch 128, 20000 iters.
  static TrainConfig paper_defaults() {
    TrainConfig c;
    c.model.backbone.input_size = 256;
    c.augment.crop_size = 224;
    c.augment.translate_max = 16;
    return c;
  }

  /// Desk-scale preset: 64x64 drawings, [16,32,64,128] backbone, batch 64,
  /// 2000 iters.
  static TrainConfig toy() {
    TrainConfig c;
    c.model.backbone = BackboneConfig{};
    c.model.backbone.input_size = 64;
    c.augment.crop_size = 56;
    c.augment.translate_max = 4;
    c.augment.hflip_prob = 0.5;
    c.batch_size = 64;
    c.max_iters = 2000;
    c.eval_every = 500;
    return c;
  }

  std::string best_path() const {
    if (!best_checkpoint_path.empty()) return best_checkpoint_path;
    std::filesystem::path p(checkpoint_path);
    return (p.parent_path() / (p.stem().string() + ".best" + p.extension().string())).string();
  }

  void validate() const {
    augment.validate();
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be nonnegative");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch norm needs a batch)");
    if (max_iters == 0) throw ConfigError("max_iters must be positive");
    if (log_every == 0) throw ConfigError("log_every must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json model = c.model;
  j = {{"manifest", c.manifest_path},
       {"augment", c.augment},
       {"backbone", model.at("backbone")},
       {"embed_dim", c.model.embed_dim},
       {"head", to_string(c.model.head)},
       {"scale", c.model.scale},
       {"margin", c.model.margin},
       {"gem_init", c.model.gem_init},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"max_iters", c.max_iters},
       {"seed", c.seed},
       {"checkpoint_path", c.checkpoint_path},
       {"best_checkpoint_path", c.best_checkpoint_path},
       {"log_path", c.log_path},
       {"log_every", c.log_every},
       {"eval_every", c.eval_every},
       {"eval_batch_size", c.eval_batch_size}};
}

/// Missing keys keep the values already in `c`, so a file can override a
/// preset.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.manifest_path = j.value("manifest", c.manifest_path);
  if (j.contains("augment")) {
    nlohmann::json a = c.augment;
    a.update(j.at("augment"));
    c.augment = a.get<AugmentPolicy>();
  }
  if (j.contains("backbone")) {
    nlohmann::json b = c.model.backbone;
    b.update(j.at("backbone"));
    c.model.backbone = b.get<BackboneConfig>();
  }
  c.model.embed_dim = j.value("embed_dim", c.model.embed_dim);
  if (j.contains("head")) c.model.head = head_kind_from_string(j.at("head").get<std::string>());
  c.model.scale = j.value("scale", c.model.scale);
  c.model.margin = j.value("margin", c.model.margin);
  c.model.gem_init = j.value("gem_init", c.model.gem_init);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  c.best_checkpoint_path = j.value("best_checkpoint_path", c.best_checkpoint_path);
  c.log_path = j.value("log_path", c.log_path);
  c.log_every = j.value("log_every", c.log_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
}

/// Reads a config file. A top-level "preset": "toy" | "paper" selects the
/// base values that the remaining keys override.
inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open train config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  const std::string preset = j.value("preset", std::string("paper"));
  TrainConfig c;
  if (preset == "toy")
    c = TrainConfig::toy();
  else if (preset == "paper")
    c = TrainConfig::paper_defaults();
  else
    throw ConfigError(path.string() + ": unknown preset '" + preset + "'");
  try {
    c = [&] {
      TrainConfig out = c;
      from_json(j, out);
      return out;
    }();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  // Relative manifest paths resolve against the config file.
  if (!c.manifest_path.empty() && std::filesystem::path(c.manifest_path).is_relative())
    c.manifest_path = (path.parent_path() / c.manifest_path).string();
  return c;
}

/// Draws fixed-size batches from a per-epoch shuffle of [0, n).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t batch) {
    if (batch > n_) throw TrainError("batch larger than the dataset");
    if (pos_ + batch > order_.size()) {
      ++epoch_;
      reshuffle();
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<long>(pos_),
                                 order_.begin() + static_cast<long>(pos_ + batch));
    pos_ += batch;
    return out;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng = Rng::derive(seed_, 0xE90C0000ull + epoch_);
    rng.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

struct TrainRecord {
  std::size_t iter = 0;
  double loss = 0;
  std::optional<MetricsReport> val;
};

struct TrainResult {
  std::vector<double> losses;  // one per iteration
  std::vector<TrainRecord> log;
  std::optional<MetricsReport> final_val;
  double best_val_map = -1;
  std::size_t best_iter = 0;
  double seconds = 0;
  Checkpoint final_checkpoint;
};

using TrainProgress = std::function<void(const TrainRecord&)>;

/// Large-block allocator settings: graph buffers are freed and reallocated
/// every step, and returning them to the OS each time dominates small runs.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// In-memory training set: decoded images plus integer labels.
struct TrainingSet {
  std::vector<DrawingImage> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
};

inline TrainingSet load_training_set(const DatasetManifest& manifest) {
  TrainingSet ts;
  std::map<std::string, int> index;
  for (const auto& e : manifest.of_split(Split::train)) {
    auto [it, fresh] = index.emplace(e.patent_id, static_cast<int>(ts.class_names.size()));
    if (fresh) ts.class_names.push_back(e.patent_id);
    ts.images.push_back(load_image(manifest.resolve(e)));
    ts.labels.push_back(it->second);
  }
  if (ts.images.empty()) throw TrainError("train split is empty");
  return ts;
}

/// Augmented batch [N,1,S,S]; each sample draws from its own stream so the
/// result does not depend on evaluation order.
inline Tensor<float> assemble_batch(const TrainingSet& ts, const std::vector<std::size_t>& rows,
                                    const AugmentPolicy& policy, std::uint64_t seed, std::size_t iter) {
  const std::size_t s = policy.crop_size;
  Tensor<float> batch(Shape{rows.size(), 1, s, s});
  for (std::size_t b = 0; b < rows.size(); ++b) {
    Rng rng = Rng::derive(seed ^ 0xA0C3E7ull, iter * 4096 + b);
    const auto x = apply_policy<float>(ts.images[rows[b]], policy, rng, AugmentMode::train, 0);
    std::copy(x.data.begin(), x.data.end(), batch.data.begin() + static_cast<long>(b * s * s));
  }
  return batch;
}

/// One forward/backward/AdamW step; returns the loss before the update.
inline double train_step(ModelParams<float>& params, OptimizerState<float>& opt, const Tensor<float>& batch,
                         std::span<const int> labels, double lr, double weight_decay) {
  params.zero_grad();
  Graph<float> g;
  auto r = model_forward(g.constant(batch), params, /*train=*/true);
  auto loss = head_loss(r.neck.head_input, labels, params);
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("loss became non-finite");
  g.backward(loss);
  adamw_step(params, opt, lr, weight_decay);
  return value;
}

inline MetricsReport validate_model(const ModelParams<float>& params, const DatasetManifest& manifest,
                                    std::size_t batch_size) {
  return evaluate(embed_dataset(params, manifest, Split::val, batch_size));
}

inline Checkpoint make_checkpoint(const ModelParams<float>& params, const OptimizerState<float>& opt,
                                  const TrainConfig& config, const std::vector<std::string>& class_names) {
  Checkpoint ck;
  ck.params = params;
  ck.optimizer = opt;
  ck.train_config = config;
  ck.class_names = class_names;
  return ck;
}

/// Full training run. Writes the final checkpoint, the best-val checkpoint
/// (when a val split exists) and the CSV log named in `config`.
inline TrainResult train(TrainConfig config, const TrainProgress& progress = {}) {
  tune_allocator();
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto manifest = load_manifest(config.manifest_path);
  const auto ts = load_training_set(manifest);
  if (config.batch_size > ts.images.size())
    throw TrainError("batch_size " + std::to_string(config.batch_size) + " exceeds the " +
                     std::to_string(ts.images.size()) + " training images; use --batch-size " +
                     std::to_string(ts.images.size()) + " or smaller");
  const bool has_val = !manifest.of_split(Split::val).empty();

  config.model.num_classes = ts.class_names.size();
  if (config.model.num_classes < 2) throw TrainError("training needs at least 2 patent_ids");
  auto params = init_params<float>(config.model, config.seed);
  OptimizerState<float> opt;
  EpochSampler sampler(ts.images.size(), config.seed);

  std::ofstream log;
  if (!config.log_path.empty()) {
    log.open(config.log_path);
    if (!log) throw TrainError("cannot write log " + config.log_path);
    log << "iter,loss,val_mAP,val_rank1\n";
  }

  TrainResult result;
  std::vector<int> labels(config.batch_size);
  for (std::size_t it = 1; it <= config.max_iters; ++it) {
    const auto rows = sampler.next(config.batch_size);
    for (std::size_t b = 0; b < rows.size(); ++b) labels[b] = ts.labels[rows[b]];
    const auto batch = assemble_batch(ts, rows, config.augment, config.seed, it);
    const double loss = train_step(params, opt, batch, labels, config.lr, config.weight_decay);
    result.losses.push_back(loss);

    const bool do_eval = has_val && ((config.eval_every > 0 && it % config.eval_every == 0) || it == config.max_iters);
    if (it % config.log_every != 0 && !do_eval && it != 1) continue;
    TrainRecord rec{it, loss, std::nullopt};
    if (do_eval) {
      rec.val = validate_model(params, manifest, config.eval_batch_size);
      if (rec.val->mAP > result.best_val_map) {
        result.best_val_map = rec.val->mAP;
        result.best_iter = it;
        save_checkpoint(make_checkpoint(params, opt, config, ts.class_names), config.best_path());
      }
    }
    if (log) {
      log << it << ',' << nlohmann::json(loss).dump() << ',';
      if (rec.val) log << nlohmann::json(rec.val->mAP).dump() << ',' << nlohmann::json(rec.val->rank(1)).dump();
      else log << ',';
      log << '\n';
    }
    result.log.push_back(rec);
    if (rec.val) result.final_val = rec.val;
    if (progress) progress(rec);
  }
  result.final_checkpoint = make_checkpoint(params, opt, config, ts.class_names);
  if (!config.checkpoint_path.empty()) save_checkpoint(result.final_checkpoint, config.checkpoint_path);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace patentret
