#pragma once

#include <string>
#include <vector>

#include "moder/config.hpp"

namespace moder {

enum class AblationAxis { Loss, Alpha, K, TemplateAug };

/// "loss", "alpha", "k", "template_aug" (case-insensitive); ConfigError otherwise.
AblationAxis parse_axis(const std::string& name);
std::string axis_name(AblationAxis axis);

/// The config of one row. ALPHA sets both the forge alpha and alpha_seen,
/// so alpha = 0 reduces every prototype to zero-shot. The cross-entropy row
/// trains all experts jointly because its loss does not decompose.
RunConfig ablation_row_config(const RunConfig& base, AblationAxis axis, const std::string& value);

struct AblationRow {
  std::string value;
  MetricsReport report;
  std::string config_hash;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::Alpha;
  std::string protocol;
  MetricsReport zero_shot;
  std::vector<AblationRow> rows;
  /// Hash of the base config; every row differs from it only on the axis.
  std::string base_hash;

  std::string to_markdown() const;
};

/// One pipeline run per value with shared seeds. ALPHA and K rows reuse a
/// single trained stream; the other axes share diffusion replay.
AblationTable ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values);

}  // namespace moder
