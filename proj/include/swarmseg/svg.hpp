/*
 * Copyright 2026 swarmseg contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "swarmseg/common.hpp"
#include "swarmseg/serialize.hpp"

namespace swarmseg {

/// One polyline on a chart.
struct SvgSeries {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points;  // (x, y)
};

namespace detail {

inline std::string svg_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string svg_tick_label(double v) {
    char buf[64];
    const double a = std::abs(v);
    if (v != 0.0 && (a >= 10000.0 || a < 0.001))
        std::snprintf(buf, sizeof(buf), "%.1e", v);
    else
        std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

}  // namespace detail

/// Render series as a simple line chart and return the SVG document.
/// Intended for small observability plots, not publication figures.
inline std::string render_svg_chart(const std::string& title, const std::string& x_label,
                                    const std::string& y_label,
                                    const std::vector<SvgSeries>& series, int width = 760,
                                    int height = 420) {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool any = false;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            if (!any) {
                xmin = xmax = x;
                ymin = ymax = y;
                any = true;
            } else {
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        }
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double pad_y = 0.05 * (ymax - ymin);
    ymin -= pad_y;
    ymax += pad_y;

    const double ml = 64, mr = 16, mt = 36, mb = 46;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
           "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) +
           " " + std::to_string(height) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + detail::svg_num(ml + pw / 2) + "\" y=\"20\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";

    // Grid and ticks.
    const int nticks = 5;
    for (int i = 0; i <= nticks; ++i) {
        const double fx = xmin + (xmax - xmin) * i / nticks;
        const double fy = ymin + (ymax - ymin) * i / nticks;
        out += "<line x1=\"" + detail::svg_num(px(fx)) + "\" y1=\"" + detail::svg_num(mt) +
               "\" x2=\"" + detail::svg_num(px(fx)) + "\" y2=\"" + detail::svg_num(mt + ph) +
               "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
        out += "<line x1=\"" + detail::svg_num(ml) + "\" y1=\"" + detail::svg_num(py(fy)) +
               "\" x2=\"" + detail::svg_num(ml + pw) + "\" y2=\"" + detail::svg_num(py(fy)) +
               "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + detail::svg_num(px(fx)) + "\" y=\"" + detail::svg_num(mt + ph + 16) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" +
               detail::svg_tick_label(fx) + "</text>\n";
        out += "<text x=\"" + detail::svg_num(ml - 6) + "\" y=\"" + detail::svg_num(py(fy) + 3) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
               detail::svg_tick_label(fy) + "</text>\n";
    }
    out += "<rect x=\"" + detail::svg_num(ml) + "\" y=\"" + detail::svg_num(mt) + "\" width=\"" +
           detail::svg_num(pw) + "\" height=\"" + detail::svg_num(ph) +
           "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    out += "<text x=\"" + detail::svg_num(ml + pw / 2) + "\" y=\"" +
           detail::svg_num(height - 10.0) + "\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"11\">" + x_label + "</text>\n";
    out += "<text x=\"14\" y=\"" + detail::svg_num(mt + ph / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
           "transform=\"rotate(-90 14 " + detail::svg_num(mt + ph / 2) + ")\">" + y_label +
           "</text>\n";

    // Series and legend.
    double ly = mt + 10;
    for (const auto& s : series) {
        std::string pts;
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            pts += detail::svg_num(px(x)) + "," + detail::svg_num(py(y)) + " ";
        }
        out += "<polyline fill=\"none\" stroke=\"" + s.color +
               "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        out += "<line x1=\"" + detail::svg_num(ml + pw - 130) + "\" y1=\"" + detail::svg_num(ly) +
               "\" x2=\"" + detail::svg_num(ml + pw - 112) + "\" y2=\"" + detail::svg_num(ly) +
               "\" stroke=\"" + s.color + "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + detail::svg_num(ml + pw - 106) + "\" y=\"" + detail::svg_num(ly + 3) +
               "\" font-family=\"sans-serif\" font-size=\"10\">" + s.label + "</text>\n";
        ly += 14;
    }
    out += "</svg>\n";
    return out;
}

inline void write_svg_chart(const std::string& path, const std::string& title,
                            const std::string& x_label, const std::string& y_label,
                            const std::vector<SvgSeries>& series, int width = 760,
                            int height = 420) {
    write_text(path, render_svg_chart(title, x_label, y_label, series, width, height));
}

/// Default palette for chart series.
inline std::string svg_palette(size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    return colors[i % (sizeof(colors) / sizeof(colors[0]))];
}

}  // namespace swarmseg
