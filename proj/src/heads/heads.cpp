// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/heads.hpp"

#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "sbr/nn/losses.hpp"
#include "sbr/nn/ops.hpp"

namespace sbr {

using nn::Tensor;

namespace {

constexpr int kRoiSize = 7;

struct VariantName {
  DetVariant v;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {DetVariant::kFcBaseline, "fc_baseline"},       {DetVariant::kL2c7x7, "l2c_7x7"},
    {DetVariant::kL2cRect, "l2c_rect"},             {DetVariant::kL2c7x7NlB, "l2c_7x7+nl_b"},
    {DetVariant::kL2cRectNlB, "l2c_rect+nl_b"},     {DetVariant::kL2c7x7NlA, "l2c_7x7+nl_a"},
    {DetVariant::kL2c7x7NlBNlA, "l2c_7x7+nl_b+nl_a"},
};

std::string group_digits(std::int64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

template <typename T>
std::string describe(const nn::NamedTensors<T>& params) {
  const Tensor<T>* weight = nullptr;
  const Tensor<T>* bias = nullptr;
  for (const auto& [name, t] : params) {
    if (name.ends_with("weight") && !weight) weight = &t;
    else if (name.ends_with("bias") && !bias) bias = &t;
  }
  if (params.size() > 2 || !weight) return std::to_string(params.size()) + " tensors";
  std::ostringstream os;
  const auto& s = weight->shape();
  if (s.size() == 4) {  // [O, C, kh, kw]
    os << s[1] << "x" << s[2] << "x" << s[3] << "x" << s[0] << " (W)";
  } else if (s.size() == 2) {  // [O, I]
    os << s[1] << "x" << s[0] << " (W)";
  } else {
    os << weight->numel() << " (W)";
  }
  if (bias && bias->defined()) os << " + " << bias->numel() << " (b)";
  return os.str();
}

template <typename T>
std::int64_t numel_of(const nn::NamedTensors<T>& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace

const char* det_variant_name(DetVariant v) {
  for (const auto& e : kVariantNames)
    if (e.v == v) return e.name;
  return "?";
}

DetVariant parse_det_variant(const std::string& name) {
  for (const auto& e : kVariantNames)
    if (name == e.name) return e.v;
  throw std::invalid_argument("unknown head variant '" + name + "'");
}

bool variant_is_rect(DetVariant v) {
  return v == DetVariant::kL2cRect || v == DetVariant::kL2cRectNlB;
}
bool variant_has_nl_before(DetVariant v) {
  return v == DetVariant::kL2c7x7NlB || v == DetVariant::kL2cRectNlB || v == DetVariant::kL2c7x7NlBNlA;
}
bool variant_has_nl_after(DetVariant v) {
  return v == DetVariant::kL2c7x7NlA || v == DetVariant::kL2c7x7NlBNlA;
}

std::int64_t ParamTable::total() const {
  std::int64_t n = 0;
  for (const auto& r : rows) n += r.count;
  return n;
}

const ParamRow* ParamTable::find(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return &r;
  return nullptr;
}

std::string ParamTable::to_text() const {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "Name" << "  " << std::right << std::setw(12)
     << "# Params" << "  Description\n";
  for (const auto& r : rows)
    os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::right << std::setw(12)
       << group_digits(r.count) << "  " << r.description << "\n";
  os << std::left << std::setw(static_cast<int>(w)) << "Total" << "  " << std::right << std::setw(12)
     << group_digits(total()) << "\n";
  return os.str();
}

std::string ParamTable::to_json() const {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"name", r.name}, {"params", r.count}, {"description", r.description}});
  j["total"] = total();
  return j.dump(2);
}

template <typename T>
ParamTable count_params(const nn::Module<T>& module) {
  std::map<std::string, nn::NamedTensors<T>> groups;
  std::vector<std::string> order;
  for (auto& [name, t] : module.named_parameters()) {
    const auto dot = name.rfind('.');
    const std::string layer = dot == std::string::npos ? name : name.substr(0, dot);
    if (!groups.count(layer)) order.push_back(layer);
    groups[layer].emplace_back(name, t);
  }
  ParamTable table;
  for (const auto& layer : order)
    table.rows.push_back({layer, numel_of(groups[layer]), describe(groups[layer])});
  return table;
}

template <typename T>
ParamTable count_params(const std::vector<NamedLayer<T>>& layers) {
  ParamTable table;
  for (const auto& l : layers) {
    const auto params = l.module->named_parameters();
    table.rows.push_back({l.name, numel_of(params), describe(params)});
  }
  return table;
}

// ---------------------------------------------------------------- Trunk

template <typename T>
Trunk<T>::Trunk(DetVariant variant, int c, int fc_dim, const NonLocalConfig& nl, nn::Rng& rng)
    : variant_(variant) {
  if (c <= 0 || c % 4 != 0) throw std::invalid_argument("Trunk: in_channels must be a positive multiple of 4");
  const auto kaiming = nn::Init::kaiming_fan_out();
  if (variant == DetVariant::kFcBaseline) {
    if (fc_dim <= 0) throw std::invalid_argument("Trunk: fc_dim must be positive");
    fcs_.emplace_back(c * kRoiSize * kRoiSize, fc_dim, nn::Init::kaiming_fan_in(), rng);
    fcs_.emplace_back(fc_dim, fc_dim, nn::Init::kaiming_fan_in(), rng);
    flat_ = fc_dim;
    return;
  }
  if (variant_has_nl_before(variant)) nl_before_ = std::make_shared<NonLocalBlock<T>>(c, nl, rng);
  if (variant_is_rect(variant)) {
    // 7x3 then 3x7, each keeping the 7x7 extent.
    auto rect = [&](int in, int out, bool tall) {
      return tall ? nn::Conv2d<T>(in, out, 7, 3, {1, 1, 3, 1}, kaiming, rng)
                  : nn::Conv2d<T>(in, out, 3, 7, {1, 1, 1, 3}, kaiming, rng);
    };
    convs_.push_back(rect(c, c, true));
    convs_.push_back(rect(c, c / 2, false));
    convs_.push_back(rect(c / 2, c / 2, true));
    convs_.push_back(rect(c / 2, c / 4, false));
    conv_names_ = {"L2C (conv1a)", "L2C (conv1b)", "L2C (conv2a)", "L2C (conv2b)"};
  } else {
    convs_.push_back(nn::Conv2d<T>::same(c, c / 2, 7, kaiming, rng));
    convs_.push_back(nn::Conv2d<T>::same(c / 2, c / 4, 7, kaiming, rng));
    conv_names_ = {"L2C (conv1)", "L2C (conv2)"};
  }
  if (variant_has_nl_after(variant)) {
    if ((c / 4) % nl.reduction != 0) throw std::invalid_argument("Trunk: C/4 not divisible by NL reduction");
    nl_after_ = std::make_shared<NonLocalBlock<T>>(c / 4, nl, rng);
  }
  flat_ = c / 4 * kRoiSize * kRoiSize;
}

template <typename T>
Tensor<T> Trunk<T>::operator()(const Tensor<T>& x) const {
  const auto n = x.dim(0);
  if (!fcs_.empty()) {
    Tensor<T> h = nn::reshape(x, {n, x.dim(1) * x.dim(2) * x.dim(3)});
    for (const auto& fc : fcs_) h = nn::relu(fc(h));
    return h;
  }
  Tensor<T> h = nl_before_ ? (*nl_before_)(x) : x;
  for (const auto& conv : convs_) h = nn::relu(conv(h));
  if (nl_after_) h = (*nl_after_)(h);
  return nn::reshape(h, {n, flat_});
}

template <typename T>
void Trunk<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  for (std::size_t i = 0; i < fcs_.size(); ++i)
    fcs_[i].collect_parameters(nn::join_name(prefix, "fc" + std::to_string(i + 1)), out);
  if (nl_before_) nl_before_->collect_parameters(nn::join_name(prefix, "nl_b"), out);
  for (std::size_t i = 0; i < convs_.size(); ++i)
    convs_[i].collect_parameters(nn::join_name(prefix, "conv" + std::to_string(i + 1)), out);
  if (nl_after_) nl_after_->collect_parameters(nn::join_name(prefix, "nl_a"), out);
}

template <typename T>
std::vector<NamedLayer<T>> Trunk<T>::layers() const {
  std::vector<NamedLayer<T>> out;
  for (std::size_t i = 0; i < fcs_.size(); ++i) out.push_back({"FC " + std::to_string(i + 1), &fcs_[i]});
  if (nl_before_) out.push_back({"NL_b", nl_before_.get()});
  for (std::size_t i = 0; i < convs_.size(); ++i) out.push_back({conv_names_[i], &convs_[i]});
  if (nl_after_) out.push_back({"NL_a", nl_after_.get()});
  return out;
}

// ---------------------------------------------------------------- detection

template <typename T>
DetectionHead<T>::DetectionHead(const HeadConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  if (cfg.num_classes < 1) throw std::invalid_argument("DetectionHead: num_classes must be >= 1");
  trunk_ = Trunk<T>(cfg.det_variant, cfg.in_channels, cfg.fc_dim, cfg.nonlocal, rng);
  const int reg_classes = cfg.class_agnostic_regression ? 1 : cfg.num_classes;
  cls_ = nn::Linear<T>(trunk_.flat_size(), cfg.num_classes + 1, nn::Init::normal(0.01), rng);
  reg_ = nn::Linear<T>(trunk_.flat_size(), 4 * reg_classes, nn::Init::normal(0.001), rng);
}

template <typename T>
DetectionOutput<T> DetectionHead<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != kRoiSize || x.dim(3) != kRoiSize)
    throw std::invalid_argument("DetectionHead: expected [n, " + std::to_string(cfg_.in_channels) +
                                ", 7, 7] RoI features, got " + nn::shape_string(x.shape()));
  const Tensor<T> h = trunk_(x);
  const auto n = x.dim(0);
  const std::int64_t reg_classes = cfg_.class_agnostic_regression ? 1 : cfg_.num_classes;
  return {cls_(h), nn::reshape(reg_(h), {n, reg_classes, 4})};
}

template <typename T>
void DetectionHead<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  trunk_.collect_parameters(nn::join_name(prefix, "trunk"), out);
  cls_.collect_parameters(nn::join_name(prefix, "cls"), out);
  reg_.collect_parameters(nn::join_name(prefix, "reg"), out);
}

template <typename T>
std::vector<NamedLayer<T>> DetectionHead<T>::layers() const {
  auto out = trunk_.layers();
  out.push_back({"cls", &cls_});
  out.push_back({"reg", &reg_});
  return out;
}

// ---------------------------------------------------------------- mask

template <typename T>
MaskHead<T>::MaskHead(const HeadConfig& cfg, nn::Rng& rng) : channels_(cfg.in_channels) {
  if (cfg.mask_convs < 1) throw std::invalid_argument("MaskHead: mask_convs must be >= 1");
  const int c = cfg.in_channels;
  const auto kaiming = nn::Init::kaiming_fan_out();
  for (int i = 0; i < cfg.mask_convs; ++i) m1_.push_back(nn::Conv2d<T>::same(c, c, 3, kaiming, rng));
  c1_ = nn::Conv2d<T>::same(c, c, 1, kaiming, rng);
  up_ = nn::ConvTranspose2x2<T>(c, c, kaiming, rng);
  c2_ = nn::Conv2d<T>::same(c, cfg.num_classes, 1, kaiming, rng);
}

template <typename T>
Tensor<T> MaskHead<T>::body(const Tensor<T>& x) const {
  ++m1_calls_;
  Tensor<T> h = x;
  for (const auto& conv : m1_) h = nn::relu(conv(h));
  return h;
}

template <typename T>
Tensor<T> MaskHead<T>::operator()(const Tensor<T>& x, int iterations) const {
  if (iterations < 1) throw std::invalid_argument("MaskHead: internal iterations must be >= 1");
  if (x.rank() != 4 || x.dim(1) != channels_ || x.dim(2) != 14 || x.dim(3) != 14)
    throw std::invalid_argument("MaskHead: expected [n, " + std::to_string(channels_) +
                                ", 14, 14], got " + nn::shape_string(x.shape()));
  m1_calls_ = 0;
  // C1 of the null state leaves only its bias.
  Tensor<T> m = body(nn::add(x, c1_(Tensor<T>(x.shape(), T(0)))));
  for (int i = 1; i < iterations; ++i) m = body(nn::add(x, c1_(m)));
  return c2_(nn::relu(up_(m)));
}

template <typename T>
void MaskHead<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  for (std::size_t i = 0; i < m1_.size(); ++i)
    m1_[i].collect_parameters(nn::join_name(prefix, "m1." + std::to_string(i)), out);
  c1_.collect_parameters(nn::join_name(prefix, "c1"), out);
  up_.collect_parameters(nn::join_name(prefix, "up"), out);
  c2_.collect_parameters(nn::join_name(prefix, "c2"), out);
}

// ---------------------------------------------------------------- mask IoU

template <typename T>
MaskIouHead<T>::MaskIouHead(const HeadConfig& cfg, nn::Rng& rng) {
  const int c = cfg.in_channels;
  const auto kaiming = nn::Init::kaiming_fan_out();
  convs_.push_back(nn::Conv2d<T>::same(c + 1, c, 3, kaiming, rng));
  convs_.push_back(nn::Conv2d<T>::same(c, c, 3, kaiming, rng));
  convs_.push_back(nn::Conv2d<T>::same(c, c, 3, kaiming, rng));
  convs_.push_back(nn::Conv2d<T>(c, c, 3, 3, {2, 2, 1, 1}, kaiming, rng));
  trunk_ = Trunk<T>(cfg.maskiou_variant, c, cfg.fc_dim, cfg.nonlocal, rng);
  out_ = nn::Linear<T>(trunk_.flat_size(), cfg.num_classes, nn::Init::normal(0.01), rng);
}

template <typename T>
Tensor<T> MaskIouHead<T>::operator()(const Tensor<T>& features, const Tensor<T>& mask_probs) const {
  Tensor<T> h = nn::concat<T>({features, nn::max_pool2x2(mask_probs)}, 1);
  for (const auto& conv : convs_) h = nn::relu(conv(h));
  return out_(trunk_(h));
}

template <typename T>
void MaskIouHead<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  for (std::size_t i = 0; i < convs_.size(); ++i)
    convs_[i].collect_parameters(nn::join_name(prefix, "conv" + std::to_string(i + 1)), out);
  trunk_.collect_parameters(nn::join_name(prefix, "trunk"), out);
  out_.collect_parameters(nn::join_name(prefix, "out"), out);
}

template <typename T>
std::vector<NamedLayer<T>> MaskIouHead<T>::layers() const {
  std::vector<NamedLayer<T>> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) out.push_back({"conv" + std::to_string(i + 1), &convs_[i]});
  for (auto& l : trunk_.layers()) out.push_back(l);
  out.push_back({trunk_.variant() == DetVariant::kFcBaseline ? "FC 3" : "FC", &out_});
  return out;
}

// ---------------------------------------------------------------- losses

template <typename T>
DetectionLoss<T> detection_loss(const DetectionOutput<T>& out, std::span<const int> labels,
                                std::span<const BoxDeltas> target_deltas, double beta) {
  const auto n = out.class_logits.dim(0);
  if (static_cast<std::int64_t>(labels.size()) != n || static_cast<std::int64_t>(target_deltas.size()) != n)
    throw std::invalid_argument("detection_loss: labels, targets and predictions differ in length");
  DetectionLoss<T> loss;
  if (n == 0) {
    loss.cls = Tensor<T>::scalar(T(0));
    loss.box = Tensor<T>::scalar(T(0));
    return loss;
  }
  loss.cls = nn::cross_entropy(out.class_logits, labels);
  const auto k = out.deltas.dim(1);
  std::vector<int> rows;
  nn::Buffer<T> target;
  for (std::int64_t i = 0; i < n; ++i) {
    if (labels[i] <= 0) continue;
    rows.push_back(static_cast<int>(i * k + (k == 1 ? 0 : labels[i] - 1)));
    const auto& d = target_deltas[i];
    for (double v : {d.dx, d.dy, d.dw, d.dh}) target.push_back(static_cast<T>(v));
  }
  loss.num_positive = static_cast<int>(rows.size());
  if (rows.empty()) {
    loss.box = Tensor<T>::scalar(T(0));
    return loss;
  }
  const Tensor<T> pred = nn::index_select(nn::reshape(out.deltas, {n * k, 4}), rows);
  const Tensor<T> tgt({static_cast<std::int64_t>(rows.size()), 4}, std::move(target));
  loss.box = nn::scale(nn::smooth_l1(pred, tgt, static_cast<T>(beta)), T(1) / static_cast<T>(n));
  return loss;
}

template <typename T>
Tensor<T> select_class_masks(const Tensor<T>& logits, std::span<const int> labels) {
  const auto n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw std::invalid_argument("select_class_masks: one label per proposal expected");
  std::vector<int> rows(labels.size());
  for (std::int64_t i = 0; i < n; ++i) {
    if (labels[i] < 1 || labels[i] > k) throw std::invalid_argument("select_class_masks: label out of range");
    rows[i] = static_cast<int>(i * k + labels[i] - 1);
  }
  return nn::reshape(nn::index_select(nn::reshape(logits, {n * k, h, w}), rows), {n, h, w});
}

template <typename T>
Tensor<T> mask_loss(const Tensor<T>& logits, std::span<const int> labels, const Tensor<T>& targets) {
  if (logits.dim(0) == 0) return Tensor<T>::scalar(T(0));
  return nn::bce_with_logits(select_class_masks(logits, labels), targets);
}

// ---------------------------------------------------------------- parity tables

ParamTable layer_comparison_table() {
  const nn::ShapeOnlyScope shapes_only;
  nn::Rng rng(0);
  const NonLocalConfig nl;
  const Trunk<float> fc(DetVariant::kFcBaseline, 256, 1024, nl, rng);
  const Trunk<float> sq(DetVariant::kL2c7x7, 256, 1024, nl, rng);
  const Trunk<float> rect(DetVariant::kL2cRect, 256, 1024, nl, rng);
  std::vector<NamedLayer<float>> all;
  for (const auto* t : {&fc, &sq, &rect})
    for (auto& l : t->layers()) all.push_back(l);
  const ParamTable flat = count_params(all);
  ParamTable ordered;
  for (const char* name : {"FC 1", "L2C (conv1)", "L2C (conv1a)", "L2C (conv1b)", "FC 2", "L2C (conv2)",
                           "L2C (conv2a)", "L2C (conv2b)"})
    ordered.rows.push_back(*flat.find(name));
  return ordered;
}

ParamTable variant_totals_table(int num_classes) {
  const nn::ShapeOnlyScope shapes_only;
  nn::Rng rng(0);
  ParamTable table;
  HeadConfig cfg;
  cfg.in_channels = 256;
  cfg.num_classes = num_classes;
  cfg.class_agnostic_regression = true;
  for (const auto& e : kVariantNames) {
    cfg.det_variant = e.v;
    const Trunk<float> trunk(e.v, 256, cfg.fc_dim, cfg.nonlocal, rng);
    table.rows.push_back({std::string("trunk ") + e.name, trunk.num_parameters(), "shared trunk only"});
    table.rows.push_back({std::string("detector ") + e.name, DetectionHead<float>(cfg, rng).num_parameters(),
                          "trunk + cls + class-agnostic reg"});
  }
  for (DetVariant v : {DetVariant::kFcBaseline, DetVariant::kL2c7x7, DetVariant::kL2cRect,
                       DetVariant::kL2c7x7NlB, DetVariant::kL2cRectNlB}) {
    cfg.maskiou_variant = v;
    table.rows.push_back({std::string("maskiou ") + det_variant_name(v), MaskIouHead<float>(cfg, rng).num_parameters(),
                          "4 convs + trunk + per-class output"});
  }
  return table;
}

#define SBR_INSTANTIATE_HEADS(T)                                                                  \
  template ParamTable count_params<T>(const nn::Module<T>&);                                      \
  template ParamTable count_params<T>(const std::vector<NamedLayer<T>>&);                         \
  template class Trunk<T>;                                                                        \
  template class DetectionHead<T>;                                                                \
  template class MaskHead<T>;                                                                     \
  template class MaskIouHead<T>;                                                                  \
  template DetectionLoss<T> detection_loss<T>(const DetectionOutput<T>&, std::span<const int>,    \
                                              std::span<const BoxDeltas>, double);                \
  template Tensor<T> select_class_masks<T>(const Tensor<T>&, std::span<const int>);               \
  template Tensor<T> mask_loss<T>(const Tensor<T>&, std::span<const int>, const Tensor<T>&);

SBR_INSTANTIATE_HEADS(float)
SBR_INSTANTIATE_HEADS(double)

}  // namespace sbr
