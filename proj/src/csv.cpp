#include "mergelab/csv.hpp"

#include "mergelab/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mergelab {

std::string format_number(double v) {
    if (v == 0.0) return "0"; // also folds -0
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string format_optional(const std::optional<double> & v) {
    return v ? format_number(*v) : std::string();
}

std::size_t csv_table::column(const std::string & name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    fail(error_kind::validation, "CSV is missing column '" + name + "'");
}

bool csv_table::has_column(const std::string & name) const {
    for (const auto & h : header) {
        if (h == name) return true;
    }
    return false;
}

static std::vector<std::string> split_line(const std::string & line) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cell);
            cell.clear();
        } else if (c != '\r') {
            cell.push_back(c);
        }
    }
    cells.push_back(cell);
    for (auto & s : cells) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }
    return cells;
}

csv_table parse_csv(const std::string & text) {
    csv_table t;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = split_line(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size()) {
            fail(error_kind::validation, "CSV line " + std::to_string(line_no) + " has " +
                                             std::to_string(cells.size()) + " cells, header has " +
                                             std::to_string(t.header.size()));
        }
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) {
        fail(error_kind::validation, "CSV has no header");
    }
    return t;
}

csv_table read_csv(const std::filesystem::path & path) {
    return parse_csv(read_text_file(path));
}

std::string to_csv(const csv_table & t) {
    std::string out;
    auto emit = [&](const std::vector<std::string> & cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += cells[i];
        }
        out += '\n';
    };
    emit(t.header);
    for (const auto & r : t.rows) emit(r);
    return out;
}

double parse_number(const std::string & cell, const std::string & what) {
    double v = 0.0;
    const char * first = cell.data();
    const char * last = cell.data() + cell.size();
    if (first != last && *first == '+') ++first;
    auto res = std::from_chars(first, last, v);
    if (cell.empty() || res.ec != std::errc() || res.ptr != last || !std::isfinite(v)) {
        fail(error_kind::validation, "invalid number '" + cell + "' in " + what);
    }
    return v;
}

void write_text_file(const std::filesystem::path & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(error_kind::io, "cannot open '" + path.string() + "' for writing");
    }
    out << text;
    if (!out) {
        fail(error_kind::io, "write failed for '" + path.string() + "'");
    }
}

std::string read_text_file(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(error_kind::io, "cannot open '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace mergelab
