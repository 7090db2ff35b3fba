#include "manf/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace manf {

void save_quantile_csv(const std::string& path, const std::vector<QuantileRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "t,series,q05,q25,q50,q75,q95,actual\n";
    char buf[192];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.t,
                      r.series, r.q05, r.q25, r.q50, r.q75, r.q95, r.actual);
        out << buf;
    }
    if (!out) throw IoError("write failed: '" + path + "'");
}

std::vector<QuantileRow> load_quantile_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw FormatError("quantile csv '" + path + "' is empty");
    if (line == "t,series,q05,q25,q50,q75,q95,actual\r") line.pop_back();
    if (line != "t,series,q05,q25,q50,q75,q95,actual") {
        throw FormatError("quantile csv '" + path + "': unexpected header '" + line + "'");
    }
    std::vector<QuantileRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        QuantileRow r;
        if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf,%lf,%lf,%lf", &r.t, &r.series, &r.q05,
                        &r.q25, &r.q50, &r.q75, &r.q95, &r.actual) != 8) {
            throw FormatError("quantile csv '" + path + "' line " + std::to_string(lineno) +
                              ": expected 8 fields");
        }
        rows.push_back(r);
    }
    return rows;
}

namespace {

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    return buf;
}

}  // namespace

std::string render_band_svg(const std::vector<QuantileRow>& rows, std::size_t series,
                            std::size_t width, std::size_t height) {
    std::vector<QuantileRow> sel;
    for (const auto& r : rows) {
        if (r.series == series) sel.push_back(r);
    }
    if (sel.empty()) throw ContractError("no rows for series " + std::to_string(series));
    std::sort(sel.begin(), sel.end(),
              [](const QuantileRow& a, const QuantileRow& b) { return a.t < b.t; });

    double lo = sel[0].q05, hi = sel[0].q95;
    for (const auto& r : sel) {
        lo = std::min({lo, r.q05, r.actual});
        hi = std::max({hi, r.q95, r.actual});
    }
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;

    const double margin = 24.0;
    const double plot_w = static_cast<double>(width) - 2 * margin;
    const double plot_h = static_cast<double>(height) - 2 * margin;
    const double t0 = static_cast<double>(sel.front().t);
    const double t1 = static_cast<double>(sel.back().t);
    const double span = std::max(t1 - t0, 1.0);
    auto px = [&](std::size_t t) { return margin + plot_w * (static_cast<double>(t) - t0) / span; };
    auto py = [&](double v) { return margin + plot_h * (hi - v) / (hi - lo); };

    auto band = [&](double QuantileRow::* upper, double QuantileRow::* lower) {
        std::string pts;
        for (const auto& r : sel) pts += fmt(px(r.t)) + "," + fmt(py(r.*upper)) + " ";
        for (auto it = sel.rbegin(); it != sel.rend(); ++it) {
            pts += fmt(px(it->t)) + "," + fmt(py((*it).*lower)) + " ";
        }
        pts.pop_back();
        return pts;
    };
    auto line = [&](double QuantileRow::* field) {
        std::string pts;
        for (const auto& r : sel) pts += fmt(px(r.t)) + "," + fmt(py(r.*field)) + " ";
        pts.pop_back();
        return pts;
    };

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
        << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
        << "  <polygon class=\"band90\" fill=\"#c6dbef\" points=\""
        << band(&QuantileRow::q95, &QuantileRow::q05) << "\"/>\n"
        << "  <polygon class=\"band50\" fill=\"#6baed6\" points=\""
        << band(&QuantileRow::q75, &QuantileRow::q25) << "\"/>\n"
        << "  <polyline class=\"median\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"1.5\""
        << " points=\"" << line(&QuantileRow::q50) << "\"/>\n"
        << "  <polyline class=\"actual\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\""
        << " stroke-dasharray=\"4 2\" points=\"" << line(&QuantileRow::actual) << "\"/>\n"
        << "</svg>\n";
    return svg.str();
}

}  // namespace manf
