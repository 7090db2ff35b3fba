#pragma once

#include <string>
#include <vector>

#include "manf/errors.hpp"

namespace manf {

// One horizon step of one series in a quantile forecast table.
struct QuantileRow {
    std::size_t t = 0;
    std::size_t series = 0;
    double q05 = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0, q95 = 0.0;
    double actual = 0.0;
};

// `t,series,q05,q25,q50,q75,q95,actual` with a header row.
void save_quantile_csv(const std::string& path, const std::vector<QuantileRow>& rows);
std::vector<QuantileRow> load_quantile_csv(const std::string& path);

// Prediction-interval chart for one series: 90% and 50% bands as filled
// polygons, median line, and the actuals on top.
std::string render_band_svg(const std::vector<QuantileRow>& rows, std::size_t series,
                            std::size_t width = 720, std::size_t height = 360);

}  // namespace manf
