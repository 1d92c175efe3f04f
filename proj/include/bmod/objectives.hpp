#pragma once

#include "bmod/motion_cues.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bmod::objectives {

enum class AblationMode {
  kFull,           // wBCE + fg/bg one-class loss
  kNonmovingBg,    // plain BCE pushing the background slot onto 1 - m_fg
  kFullMapReg,     // regularization over the whole W_fg map
  kUnweightedBce,  // object term without the (2 - r) weight
  kNoBgSlot,       // no reserved slot, no fg/bg term, plain BCE
};

std::string to_string(AblationMode mode);
AblationMode ablation_mode_from_string(const std::string& name);

struct LossConfig {
  double alpha = 0.2;
  double log_epsilon = 1e-7;
  AblationMode ablation_mode = AblationMode::kFull;

  bool operator==(const LossConfig&) const = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

struct LossBreakdown {
  double mse = 0.0;
  double wbce = 0.0;
  double fgbg = 0.0;
  double total = 0.0;
};

void to_json(nlohmann::json& j, const LossBreakdown& b);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (mask index, slot column in W)
  std::vector<int> unmatched_masks;
  double total_cost = 0.0;
};

// Mean per-pixel BCE between a binary mask and one attention column,
// with log(max(., eps)).
double bce_cost(std::span<const std::uint8_t> mask, std::span<const double> column, double eps);

// Pairs masks (already at grid resolution) with object columns of W ([N, S]
// row-major). Columns before `first_object_slot` are never matched. When
// there are more masks than object slots only the optimally assigned subset is
// kept.
MatchResult match_masks_to_slots(std::span<const motion::Mask> masks, std::span<const double> attention,
                                 int num_positions, int num_slots, int first_object_slot, double eps);

// The loss functions below optionally write dL/dW into `grad` (same length as
// the attention argument; overwritten, not accumulated).

// -(1/N) sum_i m(i) log(max(W_fg(i), eps)) + (alpha/N_s) sum_{j: m(j)=0} W_fg(j),
// with the second term 0 when N_s = 0.
double nll_reg_loss(std::span<const std::uint8_t> m_fg, std::span<const double> w_fg, double alpha, double eps,
                    std::span<double> grad = {});

// Mean of nll_reg_loss over every (m_fg, W_fg) frame pair of a batch.
double fgbg_loss(std::span<const std::pair<std::span<const std::uint8_t>, std::span<const double>>> frames,
                 double alpha, double eps);

// (1/N) sum_i [-(2 - r) m_i log(max(W_i, eps)) - (1 - m_i) log(max(1 - W_i, eps))]
// with r = mean(m). With weighted = false the positive weight is 1.
double weighted_bce(std::span<const std::uint8_t> m, std::span<const double> w, double eps, bool weighted = true,
                    std::span<double> grad = {});

double reconstruction_loss(std::span<const double> predicted, std::span<const double> target,
                           std::span<double> grad = {});

// Plain BCE between (1 - m_fg) and W_bg.
double ablation_nonmoving_bg(std::span<const std::uint8_t> m_fg, std::span<const double> w_bg, double eps,
                             std::span<double> grad = {});

// nll_reg_loss with the regularizer averaged over all N positions.
double ablation_full_map_reg(std::span<const std::uint8_t> m_fg, std::span<const double> w_fg, double alpha,
                             double eps, std::span<double> grad = {});

// Supervision for one frame at attention resolution.
struct FrameSupervision {
  std::vector<motion::Mask> masks;
  motion::Mask m_fg;
  MatchResult match;
};

struct FrameTerms {
  std::span<const double> attention;  // [N, S]
  const FrameSupervision* supervision = nullptr;
};

struct LossInputs {
  int num_positions = 0;
  int num_slots = 0;
  bool background_slot = true;
  std::vector<FrameTerms> frames;           // all B x T frames
  std::span<const double> reconstruction;   // every predicted pixel of the batch
  std::span<const double> target;
};

struct LossGradients {
  std::vector<std::vector<double>> attention;  // per frame, [N, S]
  std::vector<double> reconstruction;
};

// L = mse + object term + background term. The object term is averaged over
// all matched pairs of the batch (0 when there are none); the background term
// is averaged over frames and depends on the ablation mode.
LossBreakdown total_loss(const LossInputs& in, const LossConfig& config, LossGradients* grads = nullptr);

}  // namespace bmod::objectives
