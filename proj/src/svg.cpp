#include "mergelab/svg.hpp"

#include "mergelab/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace mergelab {

namespace {

constexpr double width = 640, height = 420;
constexpr double left = 70, right = 150, top = 40, bottom = 60;

const char * palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v, int prec = 2) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    std::string s(buf);
    if (s == "-0.00" || s == "-0.0" || s == "-0") s.erase(0, 1);
    return s;
}

std::string escape(const std::string & s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default:  out += c;
        }
    }
    return out;
}

struct axes {
    double x0, x1, y0, y1;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
    double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

axes make_axes(double x0, double x1, double y0, double y1) {
    if (x1 - x0 <= 0) { x0 -= 0.5; x1 += 0.5; }
    if (y1 - y0 <= 0) { y0 -= 0.5; y1 += 0.5; }
    const double mx = 0.05 * (x1 - x0), my = 0.05 * (y1 - y0);
    return {x0 - mx, x1 + mx, y0 - my, y1 + my};
}

std::string frame(const axes & a, const std::string & title, const std::string & x_label, const std::string & y_label) {
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width, 0) + "\" height=\"" + fmt(height, 0) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + fmt(width / 2, 0) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
         "</text>\n";
    const double xl = left, xr = width - right, yt = top, yb = height - bottom;
    s += "<rect x=\"" + fmt(xl) + "\" y=\"" + fmt(yt) + "\" width=\"" + fmt(xr - xl) + "\" height=\"" + fmt(yb - yt) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = a.x0 + (a.x1 - a.x0) * i / 4.0;
        const double yv = a.y0 + (a.y1 - a.y0) * i / 4.0;
        s += "<text x=\"" + fmt(a.px(xv)) + "\" y=\"" + fmt(yb + 16) + "\" text-anchor=\"middle\">" + fmt(xv, 3) +
             "</text>\n";
        s += "<text x=\"" + fmt(xl - 6) + "\" y=\"" + fmt(a.py(yv) + 4) + "\" text-anchor=\"end\">" + fmt(yv, 3) +
             "</text>\n";
    }
    s += "<text x=\"" + fmt((xl + xr) / 2) + "\" y=\"" + fmt(height - 18) + "\" text-anchor=\"middle\">" +
         escape(x_label) + "</text>\n";
    s += "<text x=\"16\" y=\"" + fmt((yt + yb) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         fmt((yt + yb) / 2) + ")\">" + escape(y_label) + "</text>\n";
    return s;
}

} // namespace

linear_fit least_squares(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) fail(error_kind::argument, "least squares needs >= 2 paired points");
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) fail(error_kind::degenerate, "least squares undefined for constant x");
    linear_fit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    return f;
}

std::string line_chart_svg(const std::string & title, const std::string & x_label, const std::string & y_label,
                           const std::vector<line_series> & series, std::optional<double> reference_y) {
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto & s : series) {
        for (const auto & [x, y] : s.points) {
            x0 = std::min(x0, x); x1 = std::max(x1, x);
            y0 = std::min(y0, y); y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0)) fail(error_kind::validation, "nothing to plot");
    if (reference_y) { y0 = std::min(y0, *reference_y); y1 = std::max(y1, *reference_y); }
    const axes a = make_axes(x0, x1, y0, y1);
    std::string s = frame(a, title, x_label, y_label);
    if (reference_y) {
        s += "<line x1=\"" + fmt(a.px(a.x0)) + "\" y1=\"" + fmt(a.py(*reference_y)) + "\" x2=\"" + fmt(a.px(a.x1)) +
             "\" y2=\"" + fmt(a.py(*reference_y)) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    }
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char * color = palette[i % 10];
        std::string pts;
        for (const auto & [x, y] : series[i].points) {
            if (!pts.empty()) pts += ' ';
            pts += fmt(a.px(x)) + "," + fmt(a.py(y));
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts +
             "\"/>\n";
        const double ly = top + 14 + 16 * static_cast<double>(i);
        s += "<line x1=\"" + fmt(width - right + 10) + "\" y1=\"" + fmt(ly - 4) + "\" x2=\"" +
             fmt(width - right + 28) + "\" y2=\"" + fmt(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + fmt(width - right + 32) + "\" y=\"" + fmt(ly) + "\">" + escape(series[i].label) +
             "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

std::string scatter_svg(const std::string & title, const std::string & x_label, const std::string & y_label,
                        std::span<const double> x, std::span<const double> y, const std::string & annotation) {
    if (x.empty() || x.size() != y.size()) fail(error_kind::validation, "nothing to plot");
    const auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
    const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
    const axes a = make_axes(*xmin, *xmax, *ymin, *ymax);
    std::string s = frame(a, title, x_label, y_label);
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += "<circle cx=\"" + fmt(a.px(x[i])) + "\" cy=\"" + fmt(a.py(y[i])) + "\" r=\"3\" fill=\"" + palette[0] +
             "\" fill-opacity=\"0.7\"/>\n";
    }
    if (x.size() >= 2 && *xmax > *xmin) {
        const auto f = least_squares(x, y);
        auto clampy = [&](double v) { return std::clamp(v, a.y0, a.y1); };
        s += "<line x1=\"" + fmt(a.px(*xmin)) + "\" y1=\"" + fmt(a.py(clampy(f.intercept + f.slope * *xmin))) +
             "\" x2=\"" + fmt(a.px(*xmax)) + "\" y2=\"" + fmt(a.py(clampy(f.intercept + f.slope * *xmax))) +
             "\" stroke=\"" + palette[3] + "\" stroke-width=\"1.5\"/>\n";
    }
    s += "<text x=\"" + fmt(left + 8) + "\" y=\"" + fmt(top + 16) + "\">" + escape(annotation) + "</text>\n";
    s += "</svg>\n";
    return s;
}

std::string spectrum_plot(const csv_table & spectrum, std::optional<double> chance) {
    const std::size_t ck = spectrum.column("k");
    const std::size_t ct = spectrum.column("task");
    const std::size_t ca = spectrum.column("accuracy");
    if (spectrum.rows.empty()) fail(error_kind::validation, "spectrum CSV has no rows; nothing to plot");
    std::map<std::string, std::vector<std::pair<double, double>>> by_task;
    std::map<double, std::pair<double, int>> mean_by_k;
    for (const auto & row : spectrum.rows) {
        const double k = parse_number(row[ck], "k column");
        const double acc = parse_number(row[ca], "accuracy column");
        by_task["task " + row[ct]].emplace_back(k, acc);
        auto & m = mean_by_k[k];
        m.first += acc;
        m.second += 1;
    }
    std::vector<line_series> series;
    for (auto & [label, pts] : by_task) {
        std::sort(pts.begin(), pts.end());
        series.push_back({label, pts});
    }
    line_series avg{"mean", {}};
    for (const auto & [k, m] : mean_by_k) avg.points.emplace_back(k, m.first / m.second);
    series.push_back(avg);
    return line_chart_svg("Accuracy of cumulative merges", "number of merged experts k", "accuracy", series, chance);
}

scatter_data scatter_from_records(const csv_table & records, const std::string & measure, const std::string & method) {
    const std::size_t cm = records.column(measure);
    const std::size_t cd = records.column("delta");
    const std::size_t cmeth = records.column("method");
    scatter_data d;
    for (const auto & row : records.rows) {
        if (row[cmeth] != method || row[cm].empty()) continue;
        d.measure.push_back(parse_number(row[cm], measure + " column"));
        d.neg_delta_pp.push_back(-100.0 * parse_number(row[cd], "delta column"));
    }
    if (d.measure.empty()) {
        fail(error_kind::validation, "records CSV has no '" + method + "' rows with " + measure + "; nothing to plot");
    }
    d.stats = correlate_measures(measure, d.measure, d.neg_delta_pp);
    return d;
}

std::string correlation_annotation(const correlation_report & r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "n = %zu  rho = %.3f (p = %.3g)  r = %.3f (p = %.3g)", r.n, r.spearman_rho,
                  r.spearman_p, r.pearson_r, r.pearson_p);
    return buf;
}

std::string scatter_plot(const scatter_data & d, const std::string & measure) {
    return scatter_svg(measure + " vs merge drop", measure, "-delta (percentage points)", d.measure, d.neg_delta_pp,
                       correlation_annotation(d.stats));
}

} // namespace mergelab
