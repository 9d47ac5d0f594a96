#pragma once

#include "bridgediff/common.hpp"

#include <filesystem>
#include <vector>

namespace bridgediff {

// header "step,loss", steps starting at 1, losses with 6 significant digits
void export_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses);

}  // namespace bridgediff
