#pragma once

#include "mergelab/csv.hpp"
#include "mergelab/stats.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mergelab {

struct line_series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

struct linear_fit {
    double slope = 0.0;
    double intercept = 0.0;
};

linear_fit least_squares(std::span<const double> x, std::span<const double> y);

// Deterministic SVG text: fixed canvas, fixed number formatting.
std::string line_chart_svg(const std::string & title, const std::string & x_label, const std::string & y_label,
                           const std::vector<line_series> & series, std::optional<double> reference_y = std::nullopt);

std::string scatter_svg(const std::string & title, const std::string & x_label, const std::string & y_label,
                        std::span<const double> x, std::span<const double> y, const std::string & annotation);

// Per-task accuracy against k from a spectrum CSV (k,task,accuracy[,in_merge]).
std::string spectrum_plot(const csv_table & spectrum, std::optional<double> chance = std::nullopt);

struct scatter_data {
    std::vector<double> measure;
    std::vector<double> neg_delta_pp; // -delta in percentage points
    correlation_report stats;         // measure vs -delta
};

// Rows of a records CSV for one method (all init modes).
scatter_data scatter_from_records(const csv_table & records, const std::string & measure, const std::string & method);
std::string scatter_plot(const scatter_data & d, const std::string & measure);

std::string correlation_annotation(const correlation_report & r);

} // namespace mergelab
