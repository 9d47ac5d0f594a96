#include "bridgediff/loss_csv.hpp"

#include <cstdio>
#include <fstream>

namespace bridgediff {

void export_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    BD_CHECK(!losses.empty(), "export_loss_csv: empty loss series");
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        BD_CHECK(out.good(), "export_loss_csv: cannot open '{}'", tmp.string());
        out << "step,loss\n";
        char buf[64];
        for (size_t i = 0; i < losses.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%#.6g", losses[i]);
            out << (i + 1) << "," << buf << "\n";
        }
        BD_CHECK(out.good(), "export_loss_csv: write failed for '{}'", tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace bridgediff
