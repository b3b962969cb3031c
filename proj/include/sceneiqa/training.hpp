#pragma once

// Training engine: scene-balanced S x K batching, within-scene pair sampling,
// patch sampling, learning-rate schedules, Adam updates and lowest-loss
// checkpoint selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sceneiqa/autograd.hpp"
#include "sceneiqa/core.hpp"
#include "sceneiqa/error.hpp"
#include "sceneiqa/image.hpp"
#include "sceneiqa/losses.hpp"
#include "sceneiqa/models.hpp"

namespace sceneiqa::training {

struct BatchSpec {
  int scenes = 4;             // S
  int samples_per_scene = 32;  // K

  int batch_size() const { return scenes * samples_per_scene; }

  void validate() const {
    if (scenes < 1) throw ValidationError("batch scenes (S) must be >= 1");
    if (samples_per_scene < 2) throw ValidationError("samples per scene (K) must be >= 2");
  }
};

// K record indices drawn from one scene.
struct SceneSlot {
  std::string scene_id;
  std::vector<std::size_t> records;
};

using Batch = std::vector<SceneSlot>;

namespace detail {

// Fills a slot from `primary` first, then other scene members without
// replacement, then with replacement once the scene is exhausted.
inline std::vector<std::size_t> fill_slot(std::vector<std::size_t> primary, const std::vector<std::size_t>& members,
                                          std::size_t k, std::mt19937_64& rng) {
  if (primary.size() < k) {
    std::vector<std::size_t> rest;
    for (std::size_t m : members) {
      if (std::find(primary.begin(), primary.end(), m) == primary.end()) rest.push_back(m);
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t i = 0; i < rest.size() && primary.size() < k; ++i) primary.push_back(rest[i]);
  }
  std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
  while (primary.size() < k) primary.push_back(members[pick(rng)]);
  return primary;
}

}  // namespace detail

// One epoch of batches. Each scene is cut into ceil(n/K) shuffled slots of K
// records (short slots are topped up from the same scene); slots of the same
// round are grouped S scenes at a time, and a short final group is completed
// with extra scenes drawn at random. Every batch holds S distinct scenes.
inline std::vector<Batch> scene_balanced_batches(const Manifest& manifest, const BatchSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto scenes = manifest.scene_ids();
  const auto S = static_cast<std::size_t>(spec.scenes);
  const auto K = static_cast<std::size_t>(spec.samples_per_scene);
  if (scenes.size() < S) {
    throw ValidationError("batching needs at least " + std::to_string(S) + " scenes, manifest has " +
                          std::to_string(scenes.size()));
  }
  std::mt19937_64 rng(seed);

  std::vector<std::vector<std::vector<std::size_t>>> slots(scenes.size());
  std::size_t rounds = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& members = manifest.scene_members(scenes[s]);
    std::vector<std::size_t> perm = members;
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t count = (perm.size() + K - 1) / K;
    for (std::size_t r = 0; r < count; ++r) {
      const auto begin = perm.begin() + static_cast<std::ptrdiff_t>(r * K);
      const auto end = perm.begin() + static_cast<std::ptrdiff_t>(std::min(perm.size(), (r + 1) * K));
      slots[s].push_back(detail::fill_slot({begin, end}, members, K, rng));
    }
    rounds = std::max(rounds, count);
  }

  std::vector<Batch> batches;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<std::size_t> order;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      if (r < slots[s].size()) order.push_back(s);
    }
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += S) {
      Batch batch;
      std::vector<std::size_t> used;
      for (std::size_t i = start; i < std::min(order.size(), start + S); ++i) {
        batch.push_back({scenes[order[i]], slots[order[i]][r]});
        used.push_back(order[i]);
      }
      if (batch.size() < S) {
        std::vector<std::size_t> extra;
        for (std::size_t s = 0; s < scenes.size(); ++s) {
          if (std::find(used.begin(), used.end(), s) == used.end()) extra.push_back(s);
        }
        std::shuffle(extra.begin(), extra.end(), rng);
        for (std::size_t i = 0; batch.size() < S; ++i) {
          const auto& members = manifest.scene_members(scenes[extra[i]]);
          batch.push_back({scenes[extra[i]], detail::fill_slot({}, members, K, rng)});
        }
      }
      batches.push_back(std::move(batch));
    }
  }
  return batches;
}

// Within-scene pairs as positions into `records`, each unordered pair once with
// a random orientation, shuffled. Positions holding the same record are never
// paired. `max_pairs` = 0 keeps all pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::span<const std::size_t> records, std::mt19937_64& rng,
                                                                     std::size_t max_pairs = 0) {
  if (records.size() < 2) throw ValidationError("sample_pairs: a scene needs at least 2 records");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t j = i + 1; j < records.size(); ++j) {
      if (records[i] == records[j]) continue;
      pairs.push_back(coin(rng) ? std::pair{i, j} : std::pair{j, i});
    }
  }
  std::shuffle(pairs.begin(), pairs.end(), rng);
  if (max_pairs > 0 && pairs.size() > max_pairs) pairs.resize(max_pairs);
  return pairs;
}

struct Patch {
  int top = 0;
  int left = 0;
  int size = 0;
  bool flipped = false;
  double score = 0.0;  // inherited from the source image
};

// n random size x size windows, each horizontally flipped with probability flip_p.
inline std::vector<Patch> sample_patches(const Image& source, int n, int size, double flip_p, std::mt19937_64& rng,
                                         double source_score = 0.0) {
  if (n < 1) throw ValidationError("sample_patches: n must be >= 1");
  if (size < 1 || source.height < size || source.width < size) {
    throw ValidationError("sample_patches: source smaller than the patch size");
  }
  std::uniform_int_distribution<int> top(0, source.height - size);
  std::uniform_int_distribution<int> left(0, source.width - size);
  std::bernoulli_distribution flip(std::clamp(flip_p, 0.0, 1.0));
  std::vector<Patch> patches;
  patches.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Patch p;
    p.top = top(rng);
    p.left = left(rng);
    p.size = size;
    p.flipped = flip(rng);
    p.score = source_score;
    patches.push_back(p);
  }
  return patches;
}

inline Image extract_patch(const Image& source, const Patch& patch) {
  Image out = crop(source, patch.top, patch.left, patch.size, patch.size);
  return patch.flipped ? hflip(out) : out;
}

enum class ScheduleKind { step, cosine };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::step;
  // Step decay: base_lr / decay_factor^floor(epoch / decay_every).
  double base_lr = 2e-5;
  double decay_factor = 10.0;
  int decay_every = 5;
  // Cosine: linear warm-up to max_lr, then a half cosine down to min_lr over cycle_epochs.
  double max_lr = 1e-4;
  double min_lr = 0.0;
  int cycle_epochs = 30;
  int warmup_epochs = 0;

  void validate() const {
    if (kind == ScheduleKind::step) {
      if (!(base_lr > 0.0)) throw ValidationError("step schedule: base_lr must be > 0");
      if (!(decay_factor > 1.0)) throw ValidationError("step schedule: decay_factor must be > 1");
      if (decay_every < 1) throw ValidationError("step schedule: decay_every must be >= 1");
    } else {
      if (!(max_lr > 0.0) || min_lr < 0.0 || min_lr > max_lr) throw ValidationError("cosine schedule: need 0 <= min_lr <= max_lr, max_lr > 0");
      if (cycle_epochs < 1) throw ValidationError("cosine schedule: cycle_epochs must be >= 1");
      if (warmup_epochs < 0) throw ValidationError("cosine schedule: warmup_epochs must be >= 0");
    }
  }
};

// Warm-up epochs e < W use max_lr * (e + 1) / (W + 1); the cosine phase starts
// at max_lr on epoch W and stays at min_lr after cycle_epochs.
inline double lr_at(const ScheduleSpec& s, int epoch) {
  if (epoch < 0) throw ValidationError("lr_at: epoch must be >= 0");
  if (s.kind == ScheduleKind::step) {
    return s.base_lr / std::pow(s.decay_factor, static_cast<double>(epoch / s.decay_every));
  }
  if (epoch < s.warmup_epochs) {
    return s.max_lr * static_cast<double>(epoch + 1) / static_cast<double>(s.warmup_epochs + 1);
  }
  const int t = std::min(epoch - s.warmup_epochs, s.cycle_epochs);
  if (t == s.cycle_epochs) return s.min_lr;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(s.cycle_epochs);
  return s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + std::cos(phase));
}

enum class LossKind { ssi, merged, fidelity, patch, huber };

inline std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::ssi: return "ssi";
    case LossKind::merged: return "merged";
    case LossKind::fidelity: return "fidelity";
    case LossKind::patch: return "patch";
    case LossKind::huber: return "huber";
  }
  return "unknown";
}

inline LossKind parse_loss_kind(const std::string& name) {
  for (auto k : {LossKind::ssi, LossKind::merged, LossKind::fidelity, LossKind::patch, LossKind::huber}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown loss '" + name + "'");
}

struct TrainConfig {
  LossKind loss = LossKind::ssi;
  models::ModelConfig model;
  BatchSpec batch;
  ScheduleSpec schedule;
  int epochs = 100;
  std::uint64_t seed = 0;

  // Adam; weight decay as an L2 term, or decoupled (AdamW) when requested.
  double weight_decay = 5e-4;
  bool decoupled_weight_decay = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Groups not listed in pretrained_groups are "fresh" and train at
  // lr * fresh_lr_multiplier, but only when some group is pretrained.
  double fresh_lr_multiplier = 10.0;
  std::set<std::string> pretrained_groups;

  double scene_loss_weight = 1.0;  // cross-entropy weight for models with a scene head
  double huber_delta = losses::kDefaultHuberDelta;
  int patches_per_image = 25;  // views per image for the patch loss
  double patch_jitter = 0.05;  // feature-space stand-in for random crops
  bool patch_squared = false;

  void validate() const {
    batch.validate();
    schedule.validate();
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (loss == LossKind::merged && batch.samples_per_scene % 2 != 0) {
      throw ValidationError("merged ranking loss pairs consecutive samples; K must be even");
    }
    if (loss == LossKind::patch && patches_per_image < 1) throw ValidationError("patches_per_image must be >= 1");
    if (!(huber_delta > 0.0)) throw ValidationError("huber delta must be > 0");
    if (weight_decay < 0.0) throw ValidationError("weight decay must be >= 0");
  }
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  bool checkpoint = false;
};

struct TrainResult {
  models::Model model;  // lowest-training-loss snapshot
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_loss = 0.0;
};

inline void write_history(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,loss,lr,checkpoint_flag\n";
  for (const auto& h : history) {
    out << h.epoch << ',' << sceneiqa::detail::format_double(h.loss) << ',' << sceneiqa::detail::format_double(h.lr) << ','
        << (h.checkpoint ? 1 : 0) << '\n';
  }
}

inline void save_history(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_history(out, history);
}

class Adam {
 public:
  Adam(const models::ParamStore& params, const TrainConfig& config) : config_(config) {
    for (const auto& e : params.entries()) {
      first_.push_back(models::Matrix::Zero(e.value.rows(), e.value.cols()));
      second_.push_back(models::Matrix::Zero(e.value.rows(), e.value.cols()));
    }
  }

  void step(models::ParamStore& params, const std::vector<models::Matrix>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const bool boost = !config_.pretrained_groups.empty();
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      if (grads[i].size() == 0) continue;
      const bool fresh = config_.pretrained_groups.count(e.group) == 0;
      const double group_lr = (boost && fresh) ? lr * config_.fresh_lr_multiplier : lr;
      models::Matrix g = grads[i];
      if (!config_.decoupled_weight_decay && config_.weight_decay > 0.0) g += config_.weight_decay * e.value;
      first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g;
      second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
      if (config_.decoupled_weight_decay && config_.weight_decay > 0.0) e.value *= (1.0 - group_lr * config_.weight_decay);
      const models::Matrix m_hat = first_[i] / c1;
      const models::Matrix v_hat = second_[i] / c2;
      e.value.array() -= group_lr * m_hat.array() / (v_hat.array().sqrt() + config_.epsilon);
    }
  }

 private:
  const TrainConfig& config_;
  std::vector<models::Matrix> first_;
  std::vector<models::Matrix> second_;
  long t_ = 0;
};

namespace detail {

struct BatchData {
  models::Matrix inputs;                 // input_dim x columns
  std::vector<int> scene_index;          // per column
  std::vector<double> targets;           // per image
  std::vector<std::size_t> record_ids;   // per image
  std::vector<std::size_t> slot_sizes;   // images per scene slot
  int views = 1;                         // columns per image
};

inline BatchData gather_batch(const Batch& batch, const Manifest& manifest, const FeatureStore& features,
                              const std::map<std::string, int>& scene_index, int views, double jitter,
                              std::mt19937_64& rng) {
  BatchData data;
  data.views = views;
  std::size_t images = 0;
  for (const auto& slot : batch) images += slot.records.size();
  data.inputs.resize(static_cast<Eigen::Index>(features.dim()), static_cast<Eigen::Index>(images * views));
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::Index col = 0;
  for (const auto& slot : batch) {
    data.slot_sizes.push_back(slot.records.size());
    const int scene = scene_index.at(slot.scene_id);
    for (std::size_t idx : slot.records) {
      const auto& record = manifest.records()[idx];
      const auto& f = features_for(features, record);
      data.targets.push_back(record.jod_overall);
      data.record_ids.push_back(idx);
      for (int v = 0; v < views; ++v, ++col) {
        for (std::size_t k = 0; k < f.size(); ++k) {
          data.inputs(static_cast<Eigen::Index>(k), col) = f[k] + (views > 1 ? jitter * noise(rng) : 0.0);
        }
        data.scene_index.push_back(scene);
      }
    }
  }
  return data;
}

inline losses::LossValue batch_loss(const TrainConfig& config, const BatchData& data, std::span<const double> pred,
                                    std::mt19937_64& rng) {
  switch (config.loss) {
    case LossKind::ssi: {
      std::vector<losses::ScoreVector> p, g;
      std::size_t offset = 0;
      for (std::size_t n : data.slot_sizes) {
        p.push_back({"", {pred.begin() + static_cast<std::ptrdiff_t>(offset), pred.begin() + static_cast<std::ptrdiff_t>(offset + n)}});
        g.push_back({"", {data.targets.begin() + static_cast<std::ptrdiff_t>(offset),
                          data.targets.begin() + static_cast<std::ptrdiff_t>(offset + n)}});
        offset += n;
      }
      return losses::ssi_loss(p, g);
    }
    case LossKind::merged: return losses::merged_rank_loss(pred, data.targets);
    case LossKind::fidelity: {
      losses::LossValue out;
      out.grad.assign(pred.size(), 0.0);
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      std::size_t offset = 0;
      for (std::size_t n : data.slot_sizes) {
        const std::span<const std::size_t> ids(data.record_ids.data() + offset, n);
        for (auto [a, b] : sample_pairs(ids, rng)) pairs.emplace_back(offset + a, offset + b);
        offset += n;
      }
      if (pairs.empty()) throw ValidationError("fidelity loss: batch has no distinct within-scene pairs");
      const double inv = 1.0 / static_cast<double>(pairs.size());
      for (auto [x, y] : pairs) {
        const auto l = losses::fidelity_loss(pred[x], pred[y], losses::pair_label(data.targets[x], data.targets[y]));
        out.value += l.value * inv;
        out.grad[x] += l.grad[0] * inv;
        out.grad[y] += l.grad[1] * inv;
      }
      return out;
    }
    case LossKind::patch: {
      losses::LossValue out;
      out.grad.assign(pred.size(), 0.0);
      const auto views = static_cast<std::size_t>(data.views);
      const double inv = 1.0 / static_cast<double>(data.targets.size());
      for (std::size_t i = 0; i < data.targets.size(); ++i) {
        const auto l = losses::patch_loss(pred.subspan(i * views, views), data.targets[i], config.patch_squared);
        out.value += l.value * inv;
        for (std::size_t v = 0; v < views; ++v) out.grad[i * views + v] = l.grad[v] * inv;
      }
      return out;
    }
    case LossKind::huber: return losses::huber_loss(pred, data.targets, config.huber_delta);
  }
  throw ValidationError("unknown loss kind");
}

}  // namespace detail

// Gradient descent over scene-balanced batches. The returned model is the
// end-of-epoch snapshot with the lowest mean training loss.
inline TrainResult train(TrainConfig config, const Manifest& manifest, const FeatureStore& features,
                         const models::ParamStore* init = nullptr) {
  config.model.scenes = manifest.scene_ids();
  config.model.input_dim = static_cast<int>(features.dim());
  config.validate();
  for (const auto& r : manifest.records()) (void)features_for(features, r);

  models::Model model(config.model);
  if (init != nullptr) {
    for (auto& e : model.params().entries()) {
      if (init->contains(e.name) && init->get(e.name).rows() == e.value.rows() && init->get(e.name).cols() == e.value.cols()) {
        e.value = init->get(e.name);
      }
    }
  }
  std::map<std::string, int> scene_index;
  for (std::size_t s = 0; s < config.model.scenes.size(); ++s) scene_index[config.model.scenes[s]] = static_cast<int>(s);

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam optimizer(model.params(), config);
  TrainResult result;
  std::optional<models::ParamStore> best;
  const int views = config.loss == LossKind::patch ? config.patches_per_image : 1;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config.schedule, epoch);
    const auto batches = scene_balanced_batches(manifest, config.batch, config.seed + 1000003ULL * static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto data = detail::gather_batch(batches[b], manifest, features, scene_index, views, config.patch_jitter, rng);
      ad::Tape tape;
      const models::Bound bound(tape, model.params());
      models::ForwardContext ctx;
      ctx.mode = models::Mode::train;
      ctx.scene_index = data.scene_index;
      ctx.rng = &rng;
      const auto out = model.forward(tape, bound, data.inputs, ctx);
      const models::Matrix& score = out.score.value();
      const std::span<const double> pred(score.data(), static_cast<std::size_t>(score.size()));
      if (!score.allFinite()) {
        throw DivergenceError("non-finite prediction at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      const auto loss = detail::batch_loss(config, data, pred, rng);
      double total = loss.value;

      std::vector<std::pair<ad::Var, models::Matrix>> seeds;
      seeds.emplace_back(out.score, Eigen::Map<const models::Matrix>(loss.grad.data(), 1, static_cast<Eigen::Index>(loss.grad.size())));
      if (out.scene_log_probs && config.scene_loss_weight > 0.0) {
        const models::Matrix target = models::one_hot(data.scene_index, config.model.scene_count());
        const double scale = config.scene_loss_weight / static_cast<double>(data.scene_index.size());
        total += -scale * target.cwiseProduct(out.scene_log_probs->value()).sum();
        seeds.emplace_back(*out.scene_log_probs, -scale * target);
      }
      if (!std::isfinite(total)) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      tape.backward(seeds);
      std::vector<models::Matrix> grads;
      grads.reserve(bound.vars().size());
      for (const auto& v : bound.vars()) grads.push_back(tape.grad(v));
      optimizer.step(model.params(), grads, lr);
      epoch_loss += total;
    }
    epoch_loss /= static_cast<double>(batches.size());
    result.history.push_back({epoch, epoch_loss, lr, false});
    if (!best || epoch_loss < result.best_loss) {
      best = model.params();
      result.best_loss = epoch_loss;
      result.best_epoch = epoch;
    }
  }
  result.history[static_cast<std::size_t>(result.best_epoch)].checkpoint = true;
  result.model = models::Model(config.model, std::move(*best));
  return result;
}

}  // namespace sceneiqa::training
