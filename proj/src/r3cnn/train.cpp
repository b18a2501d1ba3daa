// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "sbr/r3cnn.hpp"

namespace sbr {

using nn::Tensor;

// ---------------------------------------------------------------- trace

void LoopStats::add_positive(double iou) {
  ++positives;
  iou_sum += iou;
  const int bin = std::clamp(static_cast<int>(std::floor((iou - 0.5) * 100.0 + 1e-9)), 0, kFineBins - 1);
  ++fine[static_cast<std::size_t>(bin)];
}

std::array<std::int64_t, 10> LoopStats::histogram() const {
  std::array<std::int64_t, 10> h{};
  for (int i = 0; i < kFineBins; ++i) h[static_cast<std::size_t>(i / 5)] += fine[static_cast<std::size_t>(i)];
  return h;
}

double LoopStats::median() const {
  const std::int64_t total = std::accumulate(fine.begin(), fine.end(), std::int64_t{0});
  if (total == 0) return std::numeric_limits<double>::quiet_NaN();
  const double half = 0.5 * static_cast<double>(total);
  double below = 0.0;
  for (int i = 0; i < kFineBins; ++i) {
    const double c = static_cast<double>(fine[static_cast<std::size_t>(i)]);
    if (below + c >= half && c > 0) return 0.5 + 0.01 * (i + (half - below) / c);
    below += c;
  }
  return 1.0;
}

double LoopStats::mean() const {
  return positives == 0 ? std::numeric_limits<double>::quiet_NaN() : iou_sum / static_cast<double>(positives);
}

double LoopStats::mass_above(double threshold) const {
  const std::int64_t total = std::accumulate(fine.begin(), fine.end(), std::int64_t{0});
  if (total == 0) return 0.0;
  const int from = std::clamp(static_cast<int>(std::lround((threshold - 0.5) * 100.0)), 0, kFineBins);
  std::int64_t above = 0;
  for (int i = from; i < kFineBins; ++i) above += fine[static_cast<std::size_t>(i)];
  return static_cast<double>(above) / static_cast<double>(total);
}

void LoopTrace::merge(const LoopTrace& other) {
  if (loops.size() < other.loops.size()) loops.resize(other.loops.size());
  for (std::size_t l = 0; l < other.loops.size(); ++l) {
    auto& a = loops[l];
    const auto& b = other.loops[l];
    a.positives += b.positives;
    a.negatives += b.negatives;
    for (int i = 0; i < LoopStats::kFineBins; ++i) a.fine[static_cast<std::size_t>(i)] += b.fine[static_cast<std::size_t>(i)];
    a.iou_sum += b.iou_sum;
    a.steps += b.steps;
    a.cls_loss += b.cls_loss;
    a.box_loss += b.box_loss;
    a.mask_loss += b.mask_loss;
    a.maskiou_loss += b.maskiou_loss;
  }
}

std::string LoopTrace::to_json() const {
  nlohmann::ordered_json j;
  j["bin_width"] = 0.05;
  j["range"] = {0.5, 1.0};
  j["loops"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < loops.size(); ++l) {
    const auto& s = loops[l];
    nlohmann::ordered_json e;
    e["loop"] = l + 1;
    e["positives"] = s.positives;
    e["negatives"] = s.negatives;
    e["histogram"] = s.histogram();
    e["fine_counts"] = s.fine;
    e["iou_sum"] = s.iou_sum;
    e["steps"] = s.steps;
    e["losses"] = {{"cls", s.cls_loss}, {"box", s.box_loss}, {"mask", s.mask_loss}, {"maskiou", s.maskiou_loss}};
    j["loops"].push_back(e);
  }
  return j.dump(1);
}

LoopTrace LoopTrace::from_json(const std::string& text) {
  LoopTrace t;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& e : j.at("loops")) {
      LoopStats s;
      s.positives = e.at("positives").get<std::int64_t>();
      s.negatives = e.at("negatives").get<std::int64_t>();
      const auto fine = e.at("fine_counts").get<std::vector<std::int64_t>>();
      if (fine.size() != LoopStats::kFineBins) throw std::runtime_error("fine_counts must have 50 entries");
      std::copy(fine.begin(), fine.end(), s.fine.begin());
      s.iou_sum = e.at("iou_sum").get<double>();
      s.steps = e.at("steps").get<std::int64_t>();
      const auto& l = e.at("losses");
      s.cls_loss = l.at("cls").get<double>();
      s.box_loss = l.at("box").get<double>();
      s.mask_loss = l.at("mask").get<double>();
      s.maskiou_loss = l.at("maskiou").get<double>();
      t.loops.push_back(s);
    }
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("LoopTrace: ") + e.what());
  }
  return t;
}

// ---------------------------------------------------------------- training

double OptimConfig::lr_at(int epoch, std::int64_t iteration) const {
  double lr = scaled_lr();
  for (int d : decay_epochs)
    if (epoch >= d) lr *= decay_gamma;
  if (iteration < warmup_iters) lr *= 0.001 + (1.0 - 0.001) * static_cast<double>(iteration) / warmup_iters;
  return lr;
}

template <typename T>
TrainResult train(R3Model<T>& model, const std::vector<Sample>& samples, const OptimConfig& optim,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  if (samples.empty()) throw std::invalid_argument("train: no samples");
  if (optim.batch_size < 1) throw std::invalid_argument("optim.batch_size: must be >= 1");
  if (optim.epochs < 1) throw std::invalid_argument("optim.epochs: must be >= 1");
  nn::Sgd<T> sgd(model.named_parameters(), {optim.momentum, optim.weight_decay, optim.max_grad_norm});
  TrainResult result;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t iteration = 0;
  for (int epoch = 0; epoch < optim.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(optim.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochLog log;
    log.epoch = epoch + 1;
    double sum = 0.0;
    std::int64_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(optim.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(optim.batch_size));
      const T inv = T(1) / static_cast<T>(end - start);
      sgd.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        StepOptions so;
        so.seed = optim.seed ^ (static_cast<std::uint64_t>(iteration) << 20) ^ order[b];
        auto r = train_step(model, samples[order[b]], so);
        nn::scale(r.total, inv).backward();
        batch_loss += static_cast<double>(r.total.item());
        log.trace.merge(r.trace);
      }
      log.lr = optim.lr_at(epoch, iteration);
      sgd.step(log.lr);
      batch_loss /= static_cast<double>(end - start);
      if (!std::isfinite(batch_loss)) throw std::runtime_error("train: loss became non-finite");
      sum += batch_loss;
      log.last_loss = batch_loss;
      ++steps;
      ++iteration;
    }
    log.mean_loss = sum / static_cast<double>(steps);
    result.final_loss = log.last_loss;
    if (on_epoch) on_epoch(log);
    result.epochs.push_back(std::move(log));
  }
  return result;
}

template TrainResult train<float>(R3Model<float>&, const std::vector<Sample>&, const OptimConfig&,
                                  const std::function<void(const EpochLog&)>&);
template TrainResult train<double>(R3Model<double>&, const std::vector<Sample>&, const OptimConfig&,
                                   const std::function<void(const EpochLog&)>&);

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'B', 'R', 'C', 'K', 'P', 'T', '\0'};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return v;
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ULL << 30)) throw CheckpointError("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return s;
}

std::ifstream open_checked(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError("checkpoint: " + path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  return is;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const R3Model<T>& model, const std::string& config_text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot write " + path.string());
  os.write(kMagic, 8);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, config_text.size());
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  const auto params = model.named_parameters();
  put<std::uint64_t>(os, params.size());
  for (const auto& [name, t] : params) {
    put<std::uint64_t>(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(t.numel()));
    for (T v : t.values()) put<float>(os, static_cast<float>(v));
  }
  if (!os) throw CheckpointError("checkpoint: write failed for " + path.string());
}

std::string read_checkpoint_config(const std::filesystem::path& path) {
  auto is = open_checked(path);
  return get_string(is);
}

template <typename T>
std::string load_checkpoint(const std::filesystem::path& path, R3Model<T>& model) {
  auto is = open_checked(path);
  std::string config = get_string(is);
  auto params = model.named_parameters();
  const auto count = get<std::uint64_t>(is);
  if (count != params.size())
    throw CheckpointError("checkpoint: holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const std::string stored = get_string(is);
    if (stored != name) throw CheckpointError("checkpoint: expected tensor '" + name + "', found '" + stored + "'");
    const auto numel = get<std::uint64_t>(is);
    if (numel != static_cast<std::uint64_t>(t.numel()))
      throw CheckpointError("checkpoint: size mismatch for '" + name + "'");
    auto tt = t;
    for (auto& v : tt.values()) v = static_cast<T>(get<float>(is));
  }
  return config;
}

template void save_checkpoint<float>(const std::filesystem::path&, const R3Model<float>&, const std::string&);
template void save_checkpoint<double>(const std::filesystem::path&, const R3Model<double>&, const std::string&);
template std::string load_checkpoint<float>(const std::filesystem::path&, R3Model<float>&);
template std::string load_checkpoint<double>(const std::filesystem::path&, R3Model<double>&);

}  // namespace sbr
