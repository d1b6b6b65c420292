// SPDX-License-Identifier: Apache-2.0
// Standalone SVG charts for training histories and ablation studies.
#pragma once

#include <string>
#include <vector>

#include "amn/study.hpp"
#include "amn/training.hpp"

namespace amn::plot {

/// Train and validation loss against epoch.
std::string loss_curves_svg(const std::vector<EpochRecord> &history,
                            const std::string &title = "Training loss");

/// Grouped bars (tagging, segment, event F1) per study row with CI whiskers.
std::string study_bars_svg(const std::vector<StudyCsvRow> &rows,
                           const std::string &title = "Ablation study");

} // namespace amn::plot
