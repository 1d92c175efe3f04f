#include "bmod/objectives.hpp"

#include "bmod/error.hpp"
#include "bmod/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bmod::objectives {

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kFull: return "full";
    case AblationMode::kNonmovingBg: return "nonmoving_bg";
    case AblationMode::kFullMapReg: return "full_map_reg";
    case AblationMode::kUnweightedBce: return "unweighted_bce";
    case AblationMode::kNoBgSlot: return "no_bg_slot";
  }
  return "full";
}

AblationMode ablation_mode_from_string(const std::string& name) {
  if (name == "full") return AblationMode::kFull;
  if (name == "nonmoving_bg") return AblationMode::kNonmovingBg;
  if (name == "full_map_reg") return AblationMode::kFullMapReg;
  if (name == "unweighted_bce") return AblationMode::kUnweightedBce;
  if (name == "no_bg_slot") return AblationMode::kNoBgSlot;
  throw ConfigError("unknown ablation_mode '" + name + "'");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha}, {"log_epsilon", c.log_epsilon}, {"ablation_mode", to_string(c.ablation_mode)}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") value.get_to(c.alpha);
    else if (key == "log_epsilon") value.get_to(c.log_epsilon);
    else if (key == "ablation_mode") c.ablation_mode = ablation_mode_from_string(value.get<std::string>());
    else throw ConfigError("unknown key 'loss." + key + "'");
  }
  if (c.alpha < 0.0) throw ConfigError("loss.alpha must be >= 0");
  if (c.log_epsilon <= 0.0) throw ConfigError("loss.log_epsilon must be > 0");
}

void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = nlohmann::json{{"mse", b.mse}, {"wbce", b.wbce}, {"fgbg", b.fgbg}, {"total", b.total}};
}

namespace {

void check_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b || a == 0) throw std::invalid_argument(std::string(what) + ": size mismatch or empty input");
}

// -log(max(x, eps)) and its derivative in x.
inline double neg_log(double x, double eps) { return -std::log(std::max(x, eps)); }
inline double neg_log_grad(double x, double eps) { return x > eps ? -1.0 / x : 0.0; }

}  // namespace

double bce_cost(std::span<const std::uint8_t> mask, std::span<const double> column, double eps) {
  return weighted_bce(mask, column, eps, false);
}

MatchResult match_masks_to_slots(std::span<const motion::Mask> masks, std::span<const double> attention,
                                 int num_positions, int num_slots, int first_object_slot, double eps) {
  if (attention.size() != static_cast<std::size_t>(num_positions) * num_slots)
    throw std::invalid_argument("match_masks_to_slots: attention size mismatch");
  MatchResult out;
  const int c = static_cast<int>(masks.size());
  const int k = num_slots - first_object_slot;
  if (c == 0 || k <= 0) {
    for (int i = 0; i < c; ++i) out.unmatched_masks.push_back(i);
    return out;
  }
  std::vector<double> column(num_positions);
  std::vector<double> cost(static_cast<std::size_t>(c) * k);
  for (int j = 0; j < k; ++j) {
    for (int n = 0; n < num_positions; ++n) column[n] = attention[static_cast<std::size_t>(n) * num_slots + first_object_slot + j];
    for (int i = 0; i < c; ++i) {
      if (masks[i].size() != static_cast<std::size_t>(num_positions))
        throw std::invalid_argument("match_masks_to_slots: mask not at attention resolution");
      cost[static_cast<std::size_t>(i) * k + j] = bce_cost(masks[i].data, column, eps);
    }
  }
  const Assignment a = solve_assignment(cost, c, k);
  for (int i = 0; i < c; ++i) {
    if (a.row_to_col[i] >= 0)
      out.pairs.emplace_back(i, first_object_slot + a.row_to_col[i]);
    else
      out.unmatched_masks.push_back(i);
  }
  out.total_cost = a.total;
  return out;
}

double nll_reg_loss(std::span<const std::uint8_t> m_fg, std::span<const double> w_fg, double alpha, double eps,
                    std::span<double> grad) {
  check_sizes(m_fg.size(), w_fg.size(), "nll_reg_loss");
  const double n = static_cast<double>(m_fg.size());
  std::size_t unlabeled = 0;
  for (auto m : m_fg) unlabeled += m == 0;
  double nll = 0.0, reg = 0.0;
  for (std::size_t i = 0; i < m_fg.size(); ++i) {
    if (m_fg[i]) nll += neg_log(w_fg[i], eps);
    else reg += w_fg[i];
  }
  const double reg_scale = unlabeled > 0 ? alpha / static_cast<double>(unlabeled) : 0.0;
  if (!grad.empty()) {
    for (std::size_t i = 0; i < m_fg.size(); ++i)
      grad[i] = m_fg[i] ? neg_log_grad(w_fg[i], eps) / n : reg_scale;
  }
  return nll / n + reg_scale * reg;
}

double fgbg_loss(std::span<const std::pair<std::span<const std::uint8_t>, std::span<const double>>> frames,
                 double alpha, double eps) {
  if (frames.empty()) throw std::invalid_argument("fgbg_loss: empty batch");
  double sum = 0.0;
  for (const auto& [m, w] : frames) sum += nll_reg_loss(m, w, alpha, eps);
  return sum / static_cast<double>(frames.size());
}

double weighted_bce(std::span<const std::uint8_t> m, std::span<const double> w, double eps, bool weighted,
                    std::span<double> grad) {
  check_sizes(m.size(), w.size(), "weighted_bce");
  const double n = static_cast<double>(m.size());
  double r = 0.0;
  for (auto v : m) r += v != 0;
  r /= n;
  const double pos_weight = weighted ? 2.0 - r : 1.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) sum += pos_weight * neg_log(w[i], eps);
    else sum += neg_log(1.0 - w[i], eps);
  }
  if (!grad.empty()) {
    for (std::size_t i = 0; i < m.size(); ++i)
      grad[i] = m[i] ? pos_weight * neg_log_grad(w[i], eps) / n : -neg_log_grad(1.0 - w[i], eps) / n;
  }
  return sum / n;
}

double reconstruction_loss(std::span<const double> predicted, std::span<const double> target, std::span<double> grad) {
  check_sizes(predicted.size(), target.size(), "reconstruction_loss");
  const double n = static_cast<double>(predicted.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - target[i];
    sum += d * d;
    if (!grad.empty()) grad[i] = 2.0 * d / n;
  }
  return sum / n;
}

double ablation_nonmoving_bg(std::span<const std::uint8_t> m_fg, std::span<const double> w_bg, double eps,
                             std::span<double> grad) {
  std::vector<std::uint8_t> target(m_fg.size());
  for (std::size_t i = 0; i < m_fg.size(); ++i) target[i] = m_fg[i] ? 0 : 1;
  return weighted_bce(target, w_bg, eps, false, grad);
}

double ablation_full_map_reg(std::span<const std::uint8_t> m_fg, std::span<const double> w_fg, double alpha,
                             double eps, std::span<double> grad) {
  check_sizes(m_fg.size(), w_fg.size(), "ablation_full_map_reg");
  const double n = static_cast<double>(m_fg.size());
  double nll = 0.0, reg = 0.0;
  for (std::size_t i = 0; i < m_fg.size(); ++i) {
    if (m_fg[i]) nll += neg_log(w_fg[i], eps);
    reg += w_fg[i];
  }
  if (!grad.empty()) {
    for (std::size_t i = 0; i < m_fg.size(); ++i)
      grad[i] = (m_fg[i] ? neg_log_grad(w_fg[i], eps) / n : 0.0) + alpha / n;
  }
  return nll / n + alpha * reg / n;
}

LossBreakdown total_loss(const LossInputs& in, const LossConfig& config, LossGradients* grads) {
  const int n = in.num_positions, s = in.num_slots;
  const std::size_t frame_size = static_cast<std::size_t>(n) * s;
  const double eps = config.log_epsilon;
  const AblationMode mode = config.ablation_mode;
  const bool uses_bg = mode != AblationMode::kNoBgSlot;
  if (uses_bg && !in.background_slot)
    throw ConfigError("ablation mode '" + to_string(mode) + "' needs a background slot");
  const bool weighted = mode != AblationMode::kUnweightedBce && mode != AblationMode::kNoBgSlot;

  LossBreakdown out;
  if (grads) {
    grads->attention.assign(in.frames.size(), std::vector<double>(frame_size, 0.0));
    grads->reconstruction.assign(in.reconstruction.size(), 0.0);
  }
  if (!in.reconstruction.empty())
    out.mse = reconstruction_loss(in.reconstruction, in.target,
                                  grads ? std::span<double>(grads->reconstruction) : std::span<double>());

  std::size_t pairs = 0;
  for (const auto& f : in.frames) pairs += f.supervision ? f.supervision->match.pairs.size() : 0;

  std::vector<double> column(n), g(n);
  for (std::size_t fi = 0; fi < in.frames.size(); ++fi) {
    const FrameTerms& f = in.frames[fi];
    if (f.attention.size() != frame_size) throw std::invalid_argument("total_loss: attention size mismatch");
    const FrameSupervision* sup = f.supervision;
    if (!sup) throw std::invalid_argument("total_loss: frame without supervision");
    auto put_column = [&](int slot, double sign, std::span<const double> grad_col) {
      if (!grads) return;
      auto& dst = grads->attention[fi];
      for (int i = 0; i < n; ++i) dst[static_cast<std::size_t>(i) * s + slot] += sign * grad_col[i];
    };
    auto get_column = [&](int slot) {
      for (int i = 0; i < n; ++i) column[i] = f.attention[static_cast<std::size_t>(i) * s + slot];
    };

    for (const auto& [mask_idx, slot] : sup->match.pairs) {
      get_column(slot);
      const double scale = 1.0 / static_cast<double>(pairs);
      out.wbce += scale * weighted_bce(sup->masks[mask_idx].data, column, eps, weighted,
                                       grads ? std::span<double>(g) : std::span<double>());
      put_column(slot, scale, g);
    }

    if (!uses_bg) continue;
    const double frame_scale = 1.0 / static_cast<double>(in.frames.size());
    get_column(0);
    const auto& m_fg = sup->m_fg.data;
    if (mode == AblationMode::kNonmovingBg) {
      out.fgbg += frame_scale * ablation_nonmoving_bg(m_fg, column, eps, grads ? std::span<double>(g) : std::span<double>());
      put_column(0, frame_scale, g);
      continue;
    }
    // W_fg = 1 - W_bg, so dL/dW_bg = -dL/dW_fg.
    for (auto& v : column) v = 1.0 - v;
    const double term = mode == AblationMode::kFullMapReg
                            ? ablation_full_map_reg(m_fg, column, config.alpha, eps, grads ? std::span<double>(g) : std::span<double>())
                            : nll_reg_loss(m_fg, column, config.alpha, eps, grads ? std::span<double>(g) : std::span<double>());
    out.fgbg += frame_scale * term;
    put_column(0, -frame_scale, g);
  }
  out.total = out.mse + out.wbce + out.fgbg;
  return out;
}

}  // namespace bmod::objectives
