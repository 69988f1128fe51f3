#include "mergelab/similarity.hpp"

#include "mergelab/csv.hpp"
#include "mergelab/error.hpp"
#include "mergelab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mergelab {

static std::string regex_escape(const std::string & s) {
    static const std::string special = R"(\^$.|?*+()[]{})";
    std::string out;
    for (char c : s) {
        if (special.find(c) != std::string::npos) out.push_back('\\');
        out.push_back(c);
    }
    return out;
}

layer_grouping::layer_grouping(std::string pattern) : pattern_(std::move(pattern)) {
    const auto pos = pattern_.find("{}");
    if (pos == std::string::npos || pattern_.find("{}", pos + 2) != std::string::npos) {
        fail(error_kind::argument, "grouping pattern '" + pattern_ + "' must contain exactly one \"{}\"");
    }
    const std::string prefix = pattern_.substr(0, pos);
    const std::string suffix = pattern_.substr(pos + 2);
    // digits must not continue past the placeholder, so "layer_1" does not match "layer_12" as 1
    regex_ = std::regex(regex_escape(prefix) + "([0-9]+)" + (suffix.empty() ? "(?![0-9])" : regex_escape(suffix)));
}

static long layer_of_impl(const std::regex & re, const std::string & name) {
    std::smatch m;
    if (!std::regex_search(name, m, re)) return other_layer;
    const std::string digits = m[1].str();
    if (digits.size() > 9) return other_layer;
    return std::stol(digits);
}

long layer_grouping::layer_of(const std::string & tensor_name) const {
    return layer_of_impl(regex_, tensor_name);
}

std::map<long, std::vector<std::string>> layer_grouping::group(const checkpoint & c) const {
    std::map<long, std::vector<std::string>> groups;
    for (const auto & [name, _] : c.tensors) {
        groups[layer_of(name)].push_back(name);
    }
    return groups;
}

std::string layer_label(long layer) {
    return layer == other_layer ? "other" : std::to_string(layer);
}

// Layers ascending, "other" last.
static std::vector<long> ordered_layers(const std::map<long, std::vector<std::string>> & groups) {
    std::vector<long> out;
    for (const auto & [layer, _] : groups) {
        if (layer != other_layer) out.push_back(layer);
    }
    if (groups.count(other_layer)) out.push_back(other_layer);
    return out;
}

static double layer_cosine(const checkpoint & a, const checkpoint & b, const std::vector<std::string> & names) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto & name : names) {
        const auto & ta = a.tensors.at(name).data;
        const auto & tb = b.tensors.at(name).data;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            const double x = ta[i], y = tb[i];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<layer_value> cosine_layerwise(const checkpoint & a, const checkpoint & b, const layer_grouping & g) {
    check_compatible(a, b);
    const auto groups = g.group(a);
    std::vector<layer_value> out;
    for (long layer : ordered_layers(groups)) {
        out.push_back({layer, layer_cosine(a, b, groups.at(layer))});
    }
    return out;
}

static double frobenius_sq(const matrix & w) {
    double s = 0.0;
    for (double v : w.data) s += v * v;
    return s;
}

// One step of v <- W^T W v; returns ||W v||^2 / ||v||^2 and overwrites v with
// the normalized next iterate (or leaves it zero if W^T W v vanished).
static double power_step(const matrix & w, std::vector<double> & v, std::vector<double> & wv) {
    double vv = 0.0;
    for (double x : v) vv += x * x;
    for (std::size_t r = 0; r < w.rows; ++r) {
        double s = 0.0;
        const auto row = w.row(r);
        for (std::size_t c = 0; c < w.cols; ++c) s += row[c] * v[c];
        wv[r] = s;
    }
    double wvwv = 0.0;
    for (double x : wv) wvwv += x * x;
    std::vector<double> next(w.cols, 0.0);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const auto row = w.row(r);
        for (std::size_t c = 0; c < w.cols; ++c) next[c] += row[c] * wv[r];
    }
    double nn = 0.0;
    for (double x : next) nn += x * x;
    const double norm = std::sqrt(nn);
    for (std::size_t c = 0; c < w.cols; ++c) v[c] = norm > 0.0 ? next[c] / norm : 0.0;
    return wvwv / vv;
}

stable_rank_result stable_rank_of(const matrix & w) {
    if (w.rows < 2 || w.cols < 2) {
        fail(error_kind::argument, "stable rank needs a matrix with at least 2 rows and 2 columns");
    }
    const double fro = frobenius_sq(w);
    if (fro == 0.0) {
        fail(error_kind::degenerate, "stable rank of a zero matrix is undefined");
    }
    constexpr int max_iterations = 1000;
    constexpr double tolerance = 1e-10;

    stable_rank_result res;
    std::vector<double> v(w.cols, 1.0);
    std::vector<double> wv(w.rows);
    rng restart_rng(0x5eedf00dULL);
    double prev = -1.0;
    int restarts = 0;
    for (int it = 1; it <= max_iterations; ++it) {
        const double rq = power_step(w, v, wv);
        res.iterations = it;
        const bool collapsed = std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
        if (collapsed) {
            // start vector orthogonal to the row space; retry from a random direction
            if (++restarts > 8) {
                fail(error_kind::degenerate, "power iteration collapsed repeatedly");
            }
            for (auto & x : v) x = restart_rng.normal();
            prev = -1.0;
            continue;
        }
        res.sigma_max_sq = std::max(res.sigma_max_sq, rq);
        if (prev >= 0.0 && std::fabs(rq - prev) <= tolerance * rq) {
            res.sigma_max_sq = rq;
            res.converged = true;
            break;
        }
        prev = rq;
    }
    res.value = fro / res.sigma_max_sq;
    return res;
}

bool stable_rank_eligible(const tensor & t) {
    if (t.shape.size() < 2) return false;
    const std::size_t rows = static_cast<std::size_t>(t.shape[0]);
    return rows >= 2 && t.size() / rows >= 2;
}

double stable_rank(const tensor & t) {
    if (!stable_rank_eligible(t)) {
        fail(error_kind::argument, "stable rank needs a tensor with >= 2 axes and both reshaped dims >= 2, got " +
                                       shape_str(t.shape));
    }
    const std::size_t rows = static_cast<std::size_t>(t.shape[0]);
    matrix m(rows, t.size() / rows);
    for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = t.data[i];
    return stable_rank_of(m).value;
}

static std::optional<double> mean_of(const std::vector<layer_similarity> & rows,
                                     std::optional<double> layer_similarity::*field, bool include_other) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto & r : rows) {
        if (r.layer == other_layer && !include_other) continue;
        if (const auto & v = r.*field) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

void similarity_report::update_means(bool include_other) {
    mean_cosine = mean_of(per_layer, &layer_similarity::cosine, include_other);
    mean_stable_rank_diff = mean_of(per_layer, &layer_similarity::stable_rank_diff, include_other);
    mean_l2_diff = mean_of(per_layer, &layer_similarity::l2_norm_diff, include_other);
    mean_cka = mean_of(per_layer, &layer_similarity::cka, include_other);
}

bool similarity_report::has_cka() const {
    return std::any_of(per_layer.begin(), per_layer.end(), [](const auto & r) { return r.cka.has_value(); }) ||
           mean_cka.has_value();
}

similarity_report parametric_diff(const checkpoint & a, const checkpoint & b, const layer_grouping & g,
                                  bool include_other) {
    check_compatible(a, b);
    const auto groups = g.group(a);
    similarity_report report;
    for (long layer : ordered_layers(groups)) {
        const auto & names = groups.at(layer);
        layer_similarity row;
        row.layer = layer;
        row.cosine = layer_cosine(a, b, names);

        double na = 0.0, nb = 0.0;
        double sr_sum = 0.0;
        std::size_t sr_count = 0;
        for (const auto & name : names) {
            const auto & ta = a.tensors.at(name);
            const auto & tb = b.tensors.at(name);
            for (float x : ta.data) na += static_cast<double>(x) * x;
            for (float y : tb.data) nb += static_cast<double>(y) * y;
            if (!stable_rank_eligible(ta)) continue;
            try {
                sr_sum += std::fabs(stable_rank(ta) - stable_rank(tb));
                ++sr_count;
            } catch (const error & e) {
                if (e.kind() != error_kind::degenerate) throw;
            }
        }
        row.l2_norm_diff = std::fabs(std::sqrt(na) - std::sqrt(nb));
        if (sr_count) row.stable_rank_diff = sr_sum / static_cast<double>(sr_count);
        report.per_layer.push_back(row);
    }
    report.update_means(include_other);
    return report;
}

static matrix centered(const matrix & x) {
    matrix c = x;
    for (std::size_t j = 0; j < x.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) mean += x(i, j);
        mean /= static_cast<double>(x.rows);
        for (std::size_t i = 0; i < x.rows; ++i) c(i, j) -= mean;
    }
    return c;
}

// Squared Frobenius norm of A^T B for A (n, p), B (n, q).
static double cross_frobenius_sq(const matrix & a, const matrix & b) {
    std::vector<double> prod(a.cols * b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const auto ra = a.row(i);
        const auto rb = b.row(i);
        for (std::size_t p = 0; p < a.cols; ++p) {
            const double x = ra[p];
            double * out = prod.data() + p * b.cols;
            for (std::size_t q = 0; q < b.cols; ++q) out[q] += x * rb[q];
        }
    }
    double s = 0.0;
    for (double v : prod) s += v * v;
    return s;
}

double linear_cka(const matrix & x, const matrix & y) {
    if (x.rows != y.rows) {
        fail(error_kind::argument, "CKA inputs have different sample counts (" + std::to_string(x.rows) + " vs " +
                                       std::to_string(y.rows) + ")");
    }
    if (x.rows < 3) {
        fail(error_kind::argument, "CKA needs at least 3 samples");
    }
    for (double v : x.data) {
        if (!std::isfinite(v)) fail(error_kind::argument, "CKA input has a non-finite entry");
    }
    for (double v : y.data) {
        if (!std::isfinite(v)) fail(error_kind::argument, "CKA input has a non-finite entry");
    }
    const matrix xc = centered(x);
    const matrix yc = centered(y);
    const double xx = std::sqrt(cross_frobenius_sq(xc, xc));
    const double yy = std::sqrt(cross_frobenius_sq(yc, yc));
    if (xx == 0.0 || yy == 0.0) {
        fail(error_kind::degenerate, "CKA undefined: an input has zero variance");
    }
    const double xy = cross_frobenius_sq(yc, xc);
    return std::clamp(xy / (xx * yy), 0.0, 1.0);
}

void activation_set::validate() const {
    if (layers.empty()) {
        fail(error_kind::validation, "activation set has no layers");
    }
    const std::size_t n = layers.front().rows;
    if (n == 0) {
        fail(error_kind::validation, "activation set has no samples");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto & m = layers[l];
        if (m.rows != n) {
            fail(error_kind::validation, "activation layer " + std::to_string(l) + " has " + std::to_string(m.rows) +
                                             " rows, expected " + std::to_string(n));
        }
        if (m.data.size() != m.rows * m.cols) {
            fail(error_kind::validation, "activation layer " + std::to_string(l) + " buffer size mismatch");
        }
        for (double v : m.data) {
            if (!std::isfinite(v)) fail(error_kind::validation, "activation set has a non-finite entry");
        }
    }
}

activation_set activation_set::take_rows(const std::vector<std::size_t> & rows) const {
    activation_set out;
    out.probe_id = probe_id;
    for (const auto & m : layers) {
        matrix s(rows.size(), m.cols);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto src = m.row(rows[i]);
            std::copy(src.begin(), src.end(), s.row(i).begin());
        }
        out.layers.push_back(std::move(s));
    }
    return out;
}

cka_profile_result cka_profile(const activation_set & a, const activation_set & b) {
    if (a.probe_id != b.probe_id) {
        fail(error_kind::argument, "activation sets come from different probes ('" + a.probe_id + "' vs '" +
                                       b.probe_id + "')");
    }
    if (a.layers.size() != b.layers.size()) {
        fail(error_kind::argument, "activation sets have different layer counts");
    }
    if (a.n_samples() != b.n_samples()) {
        fail(error_kind::argument, "activation sets have different sample counts");
    }
    cka_profile_result res;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        try {
            const double v = linear_cka(a.layers[l], b.layers[l]);
            res.per_layer.emplace_back(v);
            sum += v;
            ++n;
        } catch (const error & e) {
            if (e.kind() != error_kind::degenerate) throw;
            res.per_layer.emplace_back(std::nullopt);
        }
    }
    if (n) res.mean = sum / static_cast<double>(n);
    return res;
}

void attach_cka(similarity_report & report, const cka_profile_result & profile, bool include_other) {
    for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
        const long layer = static_cast<long>(l);
        auto it = std::find_if(report.per_layer.begin(), report.per_layer.end(),
                               [&](const auto & r) { return r.layer == layer; });
        if (it == report.per_layer.end()) {
            layer_similarity row;
            row.layer = layer;
            row.cka = profile.per_layer[l];
            // keep ascending order with "other" last
            auto pos = std::find_if(report.per_layer.begin(), report.per_layer.end(),
                                    [&](const auto & r) { return r.layer == other_layer || r.layer > layer; });
            report.per_layer.insert(pos, row);
        } else {
            it->cka = profile.per_layer[l];
        }
    }
    report.update_means(include_other);
}

std::vector<std::size_t> subsample_rows(std::size_t n, std::size_t max_rows, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (n <= max_rows) return idx;
    rng gen(seed);
    gen.shuffle(idx.begin(), idx.end());
    idx.resize(max_rows);
    std::sort(idx.begin(), idx.end());
    return idx;
}

checkpoint activation_set_to_checkpoint(const activation_set & s) {
    s.validate();
    checkpoint c;
    c.metadata["probe_id"] = s.probe_id;
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
        const auto & m = s.layers[l];
        std::vector<float> data(m.data.size());
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(m.data[i]);
        c.tensors.emplace("layer_" + std::to_string(l),
                          tensor({static_cast<std::int64_t>(m.rows), static_cast<std::int64_t>(m.cols)},
                                 std::move(data)));
    }
    return c;
}

activation_set activation_set_from_checkpoint(const checkpoint & c) {
    activation_set s;
    auto it = c.metadata.find("probe_id");
    if (it == c.metadata.end()) {
        fail(error_kind::validation, "activation file has no \"probe_id\" metadata");
    }
    s.probe_id = it->second;
    const layer_grouping g("layer_{}");
    std::map<long, const tensor *> by_layer;
    for (const auto & [name, t] : c.tensors) {
        const long l = g.layer_of(name);
        if (l == other_layer || name != "layer_" + std::to_string(l)) {
            fail(error_kind::validation, "activation tensor '" + name + "' is not named layer_{i}");
        }
        if (t.shape.size() != 2) {
            fail(error_kind::validation, "activation tensor '" + name + "' must be 2-D (n_samples, d)");
        }
        by_layer[l] = &t;
    }
    long expect = 0;
    for (const auto & [l, t] : by_layer) {
        if (l != expect++) {
            fail(error_kind::validation, "activation layers must be numbered 0..L-1 without gaps");
        }
        matrix m(static_cast<std::size_t>(t->shape[0]), static_cast<std::size_t>(t->shape[1]));
        for (std::size_t i = 0; i < t->data.size(); ++i) m.data[i] = t->data[i];
        s.layers.push_back(std::move(m));
    }
    s.validate();
    return s;
}

activation_set load_activation_set(const std::filesystem::path & path) {
    return activation_set_from_checkpoint(load_checkpoint(path));
}

void save_activation_set(const activation_set & s, const std::filesystem::path & path) {
    save_checkpoint(activation_set_to_checkpoint(s), path, dtype::f32);
}

std::string similarity_report_csv(const similarity_report & r, bool with_cka) {
    std::string out = with_cka ? "layer,cosine,stable_rank_diff,l2_norm_diff,cka\n"
                               : "layer,cosine,stable_rank_diff,l2_norm_diff\n";
    for (const auto & row : r.per_layer) {
        out += layer_label(row.layer) + "," + format_optional(row.cosine) + "," +
               format_optional(row.stable_rank_diff) + "," + format_optional(row.l2_norm_diff);
        if (with_cka) out += "," + format_optional(row.cka);
        out += "\n";
    }
    out += "mean," + format_optional(r.mean_cosine) + "," + format_optional(r.mean_stable_rank_diff) + "," +
           format_optional(r.mean_l2_diff);
    if (with_cka) out += "," + format_optional(r.mean_cka);
    out += "\n";
    return out;
}

} // namespace mergelab
