#pragma once

// Training loop: synthetic-pair sampling, gradient accumulation, AdamW with
// a step-down schedule, loss logging, and checkpoint writing.

#include <random>
#include <string>
#include <vector>

#include "smat/loss.hpp"
#include "smat/model.hpp"
#include "smat/optim.hpp"
#include "smat/synth.hpp"
#include "smat/tracker.hpp"

namespace smat {

struct TrainConfig {
  int epochs = 20;
  int pairs_per_epoch = 2000;
  int batch_size = 8;
  int n_sequences = 8;      // synthetic corpus size
  int max_frame_gap = 10;   // template/search frames at most this far apart
  double lr = 4e-4;
  double weight_decay = 1e-4;
  double backbone_lr_mult = 0.1;
  double lr_drop_factor = 0.1;
  double lr_drop_at = 0.8;  // fraction of epochs completed before the drop
  double warmup_frac = 0.0;  // fraction of total steps ramping lr up linearly
  double center_jitter = 0.12;  // search-center shift, fraction of crop side
  double scale_jitter_lo = 0.8, scale_jitter_hi = 1.25;
  bool flip = true;             // joint horizontal flip with p = 0.5
  std::uint64_t seed = 1;
  SynthConfig synth;            // per-sequence template; seed varies per clip
  LossWeights loss;
  std::string loss_csv_path;    // written when non-empty
  std::string checkpoint_path;  // written when non-empty
  bool verbose = false;         // per-epoch line on stderr
};

// learning-rate multiplier for a 0-based epoch index
double lr_scale_at(const TrainConfig& cfg, int epoch);

// The exact per-clip configs train_model builds its corpus from, so a caller
// can regenerate the clips a run was trained on.
std::vector<SynthConfig> training_corpus(const TrainConfig& cfg);

struct TrainPair {
  Tensor z_img, x_img;
  BoundingBox gt;  // target box in search-crop pixels
};

// One augmented template/search pair from a sequence: area-factor crops,
// jittered search center and scale, optional joint horizontal flip.
TrainPair sample_pair(const SynthSequence& seq, const ModelConfig& mc,
                      const TrainConfig& cfg, std::mt19937_64& rng);

struct TrainResult {
  int steps = 0;
  double first_loss = 0, final_loss = 0;
  std::vector<double> epoch_loss;  // mean total per epoch
  std::string loss_csv;            // "step,lr,focal,l1,iou,total"
};

TrainResult train_model(TrackModelT<float>& model, const TrainConfig& cfg);

}  // namespace smat
