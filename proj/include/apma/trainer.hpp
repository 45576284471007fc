#pragma once

// Two-phase training: supervised pretraining of the segmentation path on the
// source domain, then alternating discriminator / generator updates.

#include "apma/datapipe.hpp"
#include "apma/losses.hpp"
#include "apma/nets.hpp"
#include "apma/optim.hpp"
#include "apma/random.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

/// Which adaptation mechanisms are active.
struct AblationFlags {
  bool en = true;       // reconstruction branch on both domains
  bool de_feat = true;  // feature-space discriminator
  bool de_pred = true;  // prediction-space discriminator

  bool any_disc() const { return de_feat || de_pred; }
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct TrainConfig {
  double lr0 = 2e-4;
  double poly_power = 0.9;
  std::size_t total_iters = 2000;
  std::size_t pretrain_iters = 500;
  std::size_t batch_size = 4;
  std::size_t patch = 64;
  LossWeights weights{};
  AblationFlags ablation{};
  std::uint64_t seed = 0;
  AdamConfig adam{};
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t disc_steps = 1;        // discriminator updates per generator update
  bool augment = false;

  void validate() const {
    if (total_iters < 1) throw std::invalid_argument("train.total_iters must be >= 1");
    if (!(lr0 > 0) || !std::isfinite(lr0)) throw std::invalid_argument("train.lr0 must be positive");
    if (!(poly_power >= 0)) throw std::invalid_argument("train.poly_power must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    if (disc_steps < 1) throw std::invalid_argument("train.disc_steps must be >= 1");
    weights.validate();
  }
};

/// lr0 * (1 - iter / total_iters)^power.
inline double poly_lr(std::size_t iter, const TrainConfig& cfg) {
  if (cfg.total_iters == 0) throw std::invalid_argument("poly_lr: total_iters must be >= 1");
  if (iter > cfg.total_iters)
    throw std::out_of_range("poly_lr: iteration " + std::to_string(iter) + " beyond " + std::to_string(cfg.total_iters));
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(cfg.total_iters), cfg.poly_power);
}

struct HistoryRow {
  std::size_t iter = 0;
  double lr = 0;
  LossValues loss;
};

template <typename T>
struct TrainState {
  NetworkBundle<T> bundle;
  Adam<T> opt_gen;
  Adam<T> opt_d_pred;
  Adam<T> opt_d_feat;
  std::size_t iter = 0;
  std::size_t pretrain_done = 0;
  Rng rng;
  std::vector<HistoryRow> pretrain_history;
  std::vector<HistoryRow> history;
  std::size_t d_pred_updates = 0;
  std::size_t d_feat_updates = 0;

  std::vector<Component<T>*> gen_group() { return bundle.generator(); }
  std::vector<Component<T>*> d_pred_group() { return {&bundle.d_pred}; }
  std::vector<Component<T>*> d_feat_group() { return {&bundle.d_feat}; }
};

/// Fresh state: weights and the sampling stream are both seeded from cfg.seed.
template <typename T>
TrainState<T> init_state(const ArchConfig& arch, const TrainConfig& cfg) {
  TrainState<T> s;
  s.rng = Rng(cfg.seed);
  s.bundle = build_bundle<T>(arch, s.rng);
  s.opt_gen = Adam<T>("generator", s.gen_group(), cfg.adam);
  s.opt_d_pred = Adam<T>("d_pred", s.d_pred_group(), cfg.adam);
  s.opt_d_feat = Adam<T>("d_feat", s.d_feat_group(), cfg.adam);
  return s;
}

namespace detail {

inline void check_term(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericalError("non-finite " + std::string(term) + " loss");
}

/// Evaluates one loss term, prefixing any numerical failure with the term's name.
template <typename F>
auto term(const char* name, F&& f) {
  try {
    return f();
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(name) + " loss: " + e.what());
  }
}

inline NumericalError at_iteration(const char* phase, std::size_t iter, const NumericalError& e) {
  return NumericalError(std::string(phase) + " iteration " + std::to_string(iter) + ": " + e.what());
}

template <typename T>
void release_all(TrainState<T>& s) {
  Adam<T>::release_grads(s.gen_group());
  Adam<T>::release_grads(s.d_pred_group());
  Adam<T>::release_grads(s.d_feat_group());
}

}  // namespace detail

/// Supervised segmentation steps on source batches at constant lr0. Only the
/// encoder and segmentation decoder receive gradients.
template <typename T>
void pretrain_ge(TrainState<T>& s, const ImageStack& source, const TrainConfig& cfg) {
  if (!source.has_labels()) throw DataError("pretraining requires a labeled source stack");
  const SampleOptions so{cfg.patch, cfg.batch_size, cfg.augment};
  while (s.pretrain_done < cfg.pretrain_iters) {
    const auto batch = sample_source<T>(source, so, s.rng);
    detail::release_all(s);
    Var<T> loss;
    try {
      loss = detail::term("seg", [&] { return seg_loss(forward_ge(s.bundle, Var<T>::constant(batch.x_s)).p, batch.y_s); });
      detail::check_term(loss.item(), "seg");
    } catch (const NumericalError& e) {
      throw detail::at_iteration("pretraining", s.pretrain_done, e);
    }
    backward(loss);
    s.opt_gen.step(s.gen_group(), cfg.lr0);
    HistoryRow row;
    row.iter = s.pretrain_done;
    row.lr = cfg.lr0;
    row.loss.seg = loss.item();
    s.pretrain_history.push_back(row);
    ++s.pretrain_done;
  }
}

/// Phase D: the enabled discriminators take `cfg.disc_steps` Adam steps on
/// generator outputs computed without a tape. Logs the first step's losses.
template <typename T>
void discriminator_phase(TrainState<T>& s, const TrainBatch<T>& batch, const TrainConfig& cfg, double lr,
                         LossValues& log) {
  const auto& A = cfg.ablation;
  const auto& w = cfg.weights;
  auto& net = s.bundle;
  if (!A.any_disc()) return;
  GeOutputs<T> src, tgt;
  {
    NoGradGuard no_grad;
    src = forward_ge(net, Var<T>::constant(batch.x_s));
    tgt = forward_ge(net, Var<T>::constant(batch.x_t));
  }
  for (std::size_t k = 0; k < cfg.disc_steps; ++k) {
    detail::release_all(s);
    Var<T> dp, df;
    if (A.de_pred)
      dp = detail::term("d_pred", [&] {
        return disc_loss(forward_disc(net.d_pred, net.arch, src.p), forward_disc(net.d_pred, net.arch, tgt.p));
      });
    if (A.de_feat)
      df = detail::term("d_feat", [&] {
        return disc_loss(forward_disc(net.d_feat, net.arch, src.f), forward_disc(net.d_feat, net.arch, tgt.f));
      });
    if (k == 0) {
      if (A.de_pred) log.d_pred_loss = dp.item();
      if (A.de_feat) log.d_feat_loss = df.item();
      detail::check_term(log.d_pred_loss, "d_pred");
      detail::check_term(log.d_feat_loss, "d_feat");
    }
    backward(weighted_sum<T>({{w.lambda_pred, A.de_pred ? &dp : nullptr}, {w.lambda_feat, A.de_feat ? &df : nullptr}}));
    if (A.de_pred) {
      s.opt_d_pred.step(s.d_pred_group(), lr);
      ++s.d_pred_updates;
    }
    if (A.de_feat) {
      s.opt_d_feat.step(s.d_feat_group(), lr);
      ++s.d_feat_updates;
    }
  }
  detail::release_all(s);
}

/// Phase G: one Adam step of encoder and both decoders on the gated composite
/// objective. Discriminators are frozen for the duration of the phase.
template <typename T>
void generator_phase(TrainState<T>& s, const TrainBatch<T>& batch, const TrainConfig& cfg, double lr, LossValues& log) {
  const auto& A = cfg.ablation;
  const auto& w = cfg.weights;
  auto& net = s.bundle;
  detail::release_all(s);
  net.d_pred.set_trainable(false);
  net.d_feat.set_trainable(false);
  struct Restore {
    NetworkBundle<T>& n;
    ~Restore() {
      n.d_pred.set_trainable(true);
      n.d_feat.set_trainable(true);
    }
  } restore{net};

  const auto xs = Var<T>::constant(batch.x_s), xt = Var<T>::constant(batch.x_t);
  const auto enc_s = encode(net, xs), enc_t = encode(net, xt);
  const auto ge_s = decode_seg(net, enc_s), ge_t = decode_seg(net, enc_t);
  Var<T> seg = detail::term("seg", [&] { return seg_loss(ge_s.p, batch.y_s); }), rec, gp, gf;
  if (A.en)
    rec = detail::term("rec", [&] { return rec_loss(batch.x_s, decode_rec(net, enc_s), batch.x_t, decode_rec(net, enc_t)); });
  if (A.de_pred) gp = detail::term("g_pred", [&] { return gen_adv_loss(forward_disc(net.d_pred, net.arch, ge_t.p)); });
  if (A.de_feat) gf = detail::term("g_feat", [&] { return gen_adv_loss(forward_disc(net.d_feat, net.arch, ge_t.f)); });

  log.seg = seg.item();
  if (A.en) log.rec = rec.item();
  if (A.de_pred) log.g_pred_loss = gp.item();
  if (A.de_feat) log.g_feat_loss = gf.item();
  detail::check_term(log.seg, "seg");
  detail::check_term(log.rec, "rec");
  detail::check_term(log.g_pred_loss, "g_pred");
  detail::check_term(log.g_feat_loss, "g_feat");

  backward(weighted_sum<T>({{1.0, &seg},
                            {w.lambda_rec, A.en ? &rec : nullptr},
                            {w.lambda_feat, A.de_feat ? &gf : nullptr},
                            {w.lambda_pred, A.de_pred ? &gp : nullptr}}));
  s.opt_gen.step(s.gen_group(), lr);
  detail::release_all(s);
}

/// One alternation. Phase D trains the enabled discriminators on detached
/// generator outputs; phase G trains encoder and decoders on the gated
/// composite objective with the discriminators held fixed. A non-finite loss
/// raises NumericalError naming the iteration and the term.
template <typename T>
void adapt_step(TrainState<T>& s, const TrainBatch<T>& batch, const TrainConfig& cfg) {
  HistoryRow row;
  row.iter = s.iter;
  row.lr = poly_lr(s.iter, cfg);
  try {
    discriminator_phase(s, batch, cfg, row.lr, row.loss);
    generator_phase(s, batch, cfg, row.lr, row.loss);
  } catch (const NumericalError& e) {
    throw detail::at_iteration("adaptation", s.iter, e);
  }
  s.history.push_back(row);
  ++s.iter;
}

}  // namespace apma
