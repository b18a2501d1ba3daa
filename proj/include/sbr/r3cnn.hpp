// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"
#include "sbr/heads.hpp"
#include "sbr/nets.hpp"
#include "sbr/nn/optim.hpp"
#include "sbr/roi.hpp"
#include "sbr/synthdata.hpp"

namespace sbr {

// ---------------------------------------------------------------------------
// Loop configuration

struct LoopConfig {
  /// L_t: loops run at training time.
  int train_loops = 3;
  /// L_e: loops run at inference; 0 means L_t.
  int eval_loops = 0;
  /// u^1..u^{L_t}; empty selects threshold_schedule(L_t).
  std::vector<double> thresholds;
  /// Loss weight per loop; empty selects default_alphas(L_t).
  std::vector<double> alpha;
  /// Head pair per loop, one letter each ('a', 'b', ...); empty means all 'a'.
  std::string alternation;
  /// H: number of detection/mask head pairs.
  int head_pairs = 1;
  /// Internal mask iterations at inference: L_e when set, otherwise L_t.
  bool mask_iterations_follow_eval = true;

  int effective_eval_loops() const { return eval_loops > 0 ? eval_loops : train_loops; }
  std::vector<double> effective_thresholds() const;
  std::vector<double> effective_alphas() const;
  std::string effective_alternation() const;
};

/// Evenly spaced thresholds from 0.5 in 0.1 steps; L_t in [1, 5].
std::vector<double> threshold_schedule(int train_loops);
/// {1, 1/2, 1/4, 1/8, 1/16} truncated to L_t.
std::vector<double> default_alphas(int train_loops);
/// Zero-based head pair of loop t (1-based); repeats the string cyclically
/// past its end.
int alternation_select(int t, const std::string& alternation);
/// Throws std::invalid_argument naming the offending field.
void validate_loop_config(const LoopConfig& cfg);

// ---------------------------------------------------------------------------
// Samples

/// One image ready for the network: normalized pixels and its instances.
struct Sample {
  int image_id = 0;
  ImageSize size;
  std::vector<float> pixels;  // (v - 128) / 64, row-major
  std::vector<LabeledBox> gts;
  std::vector<Mask> masks;  // parallel to gts
};

std::vector<Sample> make_samples(const GeneratedDataset& dataset);

template <typename T>
nn::Tensor<T> image_tensor(const Sample& sample);

/// Crop of `mask` to `box` resampled at `size` x `size` bin centers with
/// bilinear weights and binarized at 0.5.
std::vector<float> mask_target(const Mask& mask, const Box& box, int size = 28);
/// Inverse of mask_target: paint box-relative probabilities into the image
/// and threshold at 0.5.
Mask paste_mask(std::span<const float> probs, int size, const Box& box, ImageSize image);

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  BackboneConfig backbone{1, 16, 4, false};
  AnchorConfig anchors;
  /// head.in_channels is also the FPN width.
  HeadConfig head = [] {
    HeadConfig h;
    h.det_variant = DetVariant::kFcBaseline;
    h.in_channels = 32;
    h.fc_dim = 256;
    h.mask_convs = 2;
    return h;
  }();
  bool use_groie = false;
  GroieConfig groie;
  LevelRule level_rule;
  int sampling_ratio = 2;
  LoopConfig loops;
  RpnLossParams rpn;
  ProposalParams train_proposals{200, 128, 0.7, 1e-3, 0.0};
  ProposalParams test_proposals{200, 100, 0.7, 1e-3, 0.0};
  int rois_per_image = 64;
  double positive_fraction = 0.25;
  int max_mask_rois = 16;
  DeltaNormalization box_norm;
  double box_beta = 1.0;
  bool add_gt_proposals = true;
  double maskiou_weight = 1.0;
  double score_floor = 0.05;
  double nms_threshold = 0.5;
  int max_detections = 50;
};

template <typename T>
class R3Model : public nn::Module<T> {
 public:
  struct HeadPair {
    DetectionHead<T> det;
    MaskHead<T> mask;
    std::optional<MaskIouHead<T>> maskiou;
  };

  R3Model() = default;
  R3Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  FeaturePyramid<T> features(const nn::Tensor<T>& image) const;
  AnchorGrid anchors(ImageSize image) const;
  nn::Tensor<T> extract_det(const FeaturePyramid<T>& pyramid, const RoiRequest& rois) const;
  nn::Tensor<T> extract_mask(const FeaturePyramid<T>& pyramid, const RoiRequest& rois) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;

  Backbone<T> backbone;
  Fpn<T> fpn;
  RpnHead<T> rpn;
  GroieExtractor<T> det_groie, mask_groie;
  std::vector<HeadPair> pairs;

 private:
  ModelConfig cfg_;
};

// ---------------------------------------------------------------------------
// Instrumentation

/// Per-loop statistics. Positive IoUs land in 50 bins of width 0.01 over
/// [0.5, 1.0]; the coarse 0.05 histogram and the median derive from them.
struct LoopStats {
  static constexpr int kFineBins = 50;
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
  std::array<std::int64_t, kFineBins> fine{};
  double iou_sum = 0.0;
  std::int64_t steps = 0;
  double cls_loss = 0.0, box_loss = 0.0, mask_loss = 0.0, maskiou_loss = 0.0;  // sums over steps

  void add_positive(double iou);
  std::array<std::int64_t, 10> histogram() const;
  /// Interpolated within the 0.01 bin; NaN without positives.
  double median() const;
  double mean() const;
  /// Fraction of positives with IoU >= threshold (a multiple of 0.01).
  double mass_above(double threshold) const;
};

struct LoopTrace {
  std::vector<LoopStats> loops;

  void merge(const LoopTrace& other);
  std::string to_json() const;
  static LoopTrace from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Training step

/// Discrete decisions of one step, recorded once and replayed so that the
/// loss is a smooth function of the parameters (finite-difference checks).
struct StepPlan {
  struct Loop {
    std::vector<Box> proposals;  // b^t fed to loop t
    std::vector<int> sampled;
  };
  std::vector<Loop> loops;
};

struct StepOptions {
  std::uint64_t seed = 0;
  StepPlan* record = nullptr;
  const StepPlan* replay = nullptr;
  /// Loops whose losses enter the total (all when empty).
  std::vector<bool> loop_enabled;
  /// Leave the RPN terms out of the total.
  bool skip_rpn = false;
};

template <typename T>
struct LoopLosses {
  nn::Tensor<T> cls, box, mask, maskiou;
  int pair = 0;
};

template <typename T>
struct StepResult {
  nn::Tensor<T> total;
  nn::Tensor<T> rpn_objectness, rpn_box;
  std::vector<LoopLosses<T>> loops;
  LoopTrace trace;
};

template <typename T>
StepResult<T> train_step(const R3Model<T>& model, const Sample& sample, const StepOptions& options = {});

/// alpha-weighted sum of per-loop sums plus RPN terms.
double combine_losses(std::span<const double> alpha, std::span<const double> loop_sums, double rpn = 0.0);

// ---------------------------------------------------------------------------
// Inference

struct InstancePrediction {
  int image_id = 0;
  int category_id = 0;
  Box box;
  double score = 0.0;
  Mask mask;
  double mask_score = 0.0;
};

/// What each inference loop saw, for inspection.
struct InferenceTrace {
  std::vector<std::vector<Box>> boxes;                 // input boxes per loop
  std::vector<std::vector<std::vector<double>>> probs;  // per loop, per box, K+1
  std::vector<std::vector<double>> averaged;            // per box, K+1
};

/// Arithmetic mean of per-loop class distributions.
std::vector<std::vector<double>> average_scores(const std::vector<std::vector<std::vector<double>>>& per_loop);

template <typename T>
std::vector<InstancePrediction> infer(const R3Model<T>& model, const Sample& sample,
                                      InferenceTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Training driver

struct OptimConfig {
  int epochs = 12;
  int batch_size = 2;
  /// Learning rate at the reference batch; the applied rate scales linearly
  /// with batch_size / reference_batch.
  double base_lr = 0.02;
  int reference_batch = 16;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::vector<int> decay_epochs{8, 11};
  double decay_gamma = 0.1;
  int warmup_iters = 50;
  double max_grad_norm = 10.0;
  std::uint64_t seed = 0;

  double scaled_lr() const { return base_lr * batch_size / reference_batch; }
  double lr_at(int epoch, std::int64_t iteration) const;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double last_loss = 0.0;
  double lr = 0.0;
  LoopTrace trace;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double final_loss = 0.0;
};

template <typename T>
TrainResult train(R3Model<T>& model, const std::vector<Sample>& samples, const OptimConfig& optim,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary: magic, version, config text, then named float tensors.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const R3Model<T>& model, const std::string& config_text);

/// Returns the stored config text; parameters must match by name and size.
template <typename T>
std::string load_checkpoint(const std::filesystem::path& path, R3Model<T>& model);

/// Reads only the stored config text.
std::string read_checkpoint_config(const std::filesystem::path& path);

}  // namespace sbr
