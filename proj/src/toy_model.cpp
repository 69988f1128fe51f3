#include "mergelab/error.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/toy.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace mergelab::toy {

static std::string weight_name(std::size_t l) { return "layer_" + std::to_string(l) + ".w"; }
static std::string bias_name(std::size_t l) { return "layer_" + std::to_string(l) + ".b"; }

void model::validate() const {
    if (sizes.size() < 2) {
        fail(error_kind::argument, "model needs at least an input and an output size");
    }
    if (params.tensors.size() != 2 * n_layers()) {
        fail(error_kind::validation, "model has " + std::to_string(params.tensors.size()) + " tensors, expected " +
                                         std::to_string(2 * n_layers()));
    }
    for (std::size_t l = 0; l < n_layers(); ++l) {
        const auto & w = params.at(weight_name(l));
        const auto & b = params.at(bias_name(l));
        const shape_t ws{static_cast<std::int64_t>(sizes[l + 1]), static_cast<std::int64_t>(sizes[l])};
        const shape_t bs{static_cast<std::int64_t>(sizes[l + 1])};
        if (w.shape != ws || b.shape != bs) {
            fail(error_kind::validation, "layer " + std::to_string(l) + " parameter shapes do not match sizes");
        }
    }
}

static model make_model(const std::vector<std::size_t> & sizes, const std::function<float(std::size_t)> & weight) {
    if (sizes.size() < 2 || std::any_of(sizes.begin(), sizes.end(), [](auto s) { return s == 0; })) {
        fail(error_kind::argument, "model layer sizes must be positive and at least two");
    }
    model m;
    m.sizes = sizes;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const std::size_t in = sizes[l], out = sizes[l + 1];
        std::vector<float> w(in * out);
        for (auto & v : w) v = weight(in);
        m.params.tensors.emplace(weight_name(l), tensor({static_cast<std::int64_t>(out), static_cast<std::int64_t>(in)},
                                                        std::move(w)));
        m.params.tensors.emplace(bias_name(l), tensor({static_cast<std::int64_t>(out)}, std::vector<float>(out, 0.0f)));
    }
    return m;
}

model init_model(const std::vector<std::size_t> & sizes, std::uint64_t seed, double gain) {
    rng gen(seed);
    return make_model(sizes, [&](std::size_t fan_in) {
        return static_cast<float>(gain * gen.normal() / std::sqrt(static_cast<double>(fan_in)));
    });
}

model zero_model(const std::vector<std::size_t> & sizes) {
    return make_model(sizes, [](std::size_t) { return 0.0f; });
}

model with_params(const model & shape_from, checkpoint params) {
    model m;
    m.sizes = shape_from.sizes;
    m.params = std::move(params);
    m.validate();
    return m;
}

dense_params to_dense(const model & m) {
    m.validate();
    dense_params p;
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
        const auto & w = m.params.at(weight_name(l));
        const auto & b = m.params.at(bias_name(l));
        matrix mw(m.sizes[l + 1], m.sizes[l]);
        for (std::size_t i = 0; i < w.size(); ++i) mw.data[i] = w.data[i];
        p.w.push_back(std::move(mw));
        p.b.emplace_back(b.data.begin(), b.data.end());
    }
    return p;
}

model from_dense(const model & shape_from, const dense_params & p) {
    model m;
    m.sizes = shape_from.sizes;
    m.params.metadata = shape_from.params.metadata;
    for (std::size_t l = 0; l < p.w.size(); ++l) {
        std::vector<float> w(p.w[l].data.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(p.w[l].data[i]);
        std::vector<float> b(p.b[l].size());
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<float>(p.b[l][i]);
        m.params.tensors.emplace(weight_name(l), tensor({static_cast<std::int64_t>(p.w[l].rows),
                                                         static_cast<std::int64_t>(p.w[l].cols)},
                                                        std::move(w)));
        m.params.tensors.emplace(bias_name(l), tensor({static_cast<std::int64_t>(p.b[l].size())}, std::move(b)));
    }
    m.validate();
    return m;
}

// out = x W^T + b
static matrix affine(const matrix & x, const matrix & w, const std::vector<double> & b) {
    matrix out(x.rows, w.rows);
    for (std::size_t n = 0; n < x.rows; ++n) {
        const auto xr = x.row(n);
        auto o = out.row(n);
        for (std::size_t j = 0; j < w.rows; ++j) {
            const auto wr = w.row(j);
            double s = b[j];
            for (std::size_t i = 0; i < w.cols; ++i) s += xr[i] * wr[i];
            o[j] = s;
        }
    }
    return out;
}

static forward_result forward_dense(const dense_params & p, const matrix & batch) {
    forward_result res;
    matrix h = batch;
    for (std::size_t l = 0; l < p.w.size(); ++l) {
        matrix z = affine(h, p.w[l], p.b[l]);
        if (l + 1 == p.w.size()) {
            res.logits = std::move(z);
        } else {
            for (double & v : z.data) v = std::tanh(v);
            res.activations.push_back(z);
            h = std::move(z);
        }
    }
    return res;
}

forward_result forward(const model & m, const matrix & batch) {
    if (batch.cols != m.sizes.front()) {
        fail(error_kind::argument, "batch has " + std::to_string(batch.cols) + " columns, model expects " +
                                       std::to_string(m.sizes.front()));
    }
    return forward_dense(to_dense(m), batch);
}

static dense_params zeros_like(const dense_params & p) {
    dense_params z;
    for (std::size_t l = 0; l < p.w.size(); ++l) {
        z.w.emplace_back(p.w[l].rows, p.w[l].cols);
        z.b.emplace_back(p.b[l].size(), 0.0);
    }
    return z;
}

double loss_and_gradient(const dense_params & p, const matrix & x, std::span<const int> y, dense_params * grad) {
    if (x.rows != y.size() || x.rows == 0) {
        fail(error_kind::argument, "batch and label counts differ or are empty");
    }
    const std::size_t n_layers = p.w.size();
    std::vector<matrix> inputs; // input to each layer
    inputs.reserve(n_layers);
    matrix h = x;
    matrix logits;
    for (std::size_t l = 0; l < n_layers; ++l) {
        inputs.push_back(h);
        matrix z = affine(h, p.w[l], p.b[l]);
        if (l + 1 == n_layers) {
            logits = std::move(z);
        } else {
            for (double & v : z.data) v = std::tanh(v);
            h = std::move(z);
        }
    }

    const std::size_t batch = x.rows;
    const std::size_t k = logits.cols;
    const double inv_batch = 1.0 / static_cast<double>(batch);
    double loss = 0.0;
    matrix delta(batch, k); // dL/dlogits
    for (std::size_t n = 0; n < batch; ++n) {
        const auto row = logits.row(n);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double log_z = mx + std::log(z);
        const auto label = static_cast<std::size_t>(y[n]);
        if (label >= k) fail(error_kind::argument, "label out of range");
        loss += log_z - row[label];
        for (std::size_t c = 0; c < k; ++c) {
            delta(n, c) = (std::exp(row[c] - log_z) - (c == label ? 1.0 : 0.0)) * inv_batch;
        }
    }
    loss *= inv_batch;
    if (!grad) return loss;

    *grad = zeros_like(p);
    for (std::size_t l = n_layers; l-- > 0;) {
        const matrix & in = inputs[l];
        auto & gw = grad->w[l];
        auto & gb = grad->b[l];
        for (std::size_t n = 0; n < batch; ++n) {
            const auto d = delta.row(n);
            const auto a = in.row(n);
            for (std::size_t j = 0; j < gw.rows; ++j) {
                const double dj = d[j];
                if (dj == 0.0) continue;
                gb[j] += dj;
                auto gr = gw.row(j);
                for (std::size_t i = 0; i < gw.cols; ++i) gr[i] += dj * a[i];
            }
        }
        if (l == 0) break;
        // back through W and the tanh that produced `in`
        matrix prev(batch, in.cols);
        for (std::size_t n = 0; n < batch; ++n) {
            const auto d = delta.row(n);
            auto pr = prev.row(n);
            for (std::size_t j = 0; j < p.w[l].rows; ++j) {
                const auto wr = p.w[l].row(j);
                for (std::size_t i = 0; i < in.cols; ++i) pr[i] += d[j] * wr[i];
            }
            const auto a = in.row(n);
            for (std::size_t i = 0; i < in.cols; ++i) pr[i] *= 1.0 - a[i] * a[i];
        }
        delta = std::move(prev);
    }
    return loss;
}

static matrix gather_rows(const matrix & x, std::span<const std::size_t> idx) {
    matrix out(idx.size(), x.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto src = x.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

static bool representable(const dense_params & p) {
    const double limit = std::numeric_limits<float>::max();
    for (std::size_t l = 0; l < p.w.size(); ++l) {
        for (double v : p.w[l].data) {
            if (!(std::fabs(v) <= limit)) return false;
        }
        for (double v : p.b[l]) {
            if (!(std::fabs(v) <= limit)) return false;
        }
    }
    return true;
}

train_result train(const model & m, const dataset & data, const train_config & cfg) {
    if (!(cfg.lr >= 0.0)) {
        fail(error_kind::argument, "learning rate must be non-negative");
    }
    if (cfg.epochs < 0 || cfg.batch_size < 1) {
        fail(error_kind::argument, "epochs must be >= 0 and batch_size >= 1");
    }
    if (data.size() == 0 || data.x.cols != m.sizes.front()) {
        fail(error_kind::argument, "training data is empty or has the wrong width");
    }
    dense_params p = to_dense(m);
    train_result res;
    auto check = [&](double loss, int epoch) {
        if (!std::isfinite(loss)) {
            fail(error_kind::training, "training diverged (non-finite loss) at epoch " + std::to_string(epoch));
        }
        res.loss_trace.push_back(loss);
    };
    check(loss_and_gradient(p, data.x, data.y, nullptr), 0);
    if (cfg.lr == 0.0) {
        // zero step size: parameters stay bit-identical
        for (int e = 1; e <= cfg.epochs; ++e) res.loss_trace.push_back(res.loss_trace.front());
        res.trained = m;
        return res;
    }

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    dense_params g;
    std::vector<int> labels;
    for (int e = 1; e <= cfg.epochs; ++e) {
        rng gen(derive_seed(cfg.seed, static_cast<std::uint64_t>(e)));
        gen.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const matrix xb = gather_rows(data.x, idx);
            labels.resize(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.y[idx[i]];
            const double loss = loss_and_gradient(p, xb, labels, &g);
            if (!std::isfinite(loss)) {
                fail(error_kind::training, "training diverged (non-finite loss) at epoch " + std::to_string(e));
            }
            for (std::size_t l = 0; l < p.w.size(); ++l) {
                for (std::size_t i = 0; i < p.w[l].data.size(); ++i) p.w[l].data[i] -= cfg.lr * g.w[l].data[i];
                for (std::size_t i = 0; i < p.b[l].size(); ++i) p.b[l][i] -= cfg.lr * g.b[l][i];
            }
        }
        check(loss_and_gradient(p, data.x, data.y, nullptr), e);
        if (!representable(p)) {
            fail(error_kind::training, "training diverged (parameters overflow float32) at epoch " + std::to_string(e));
        }
    }
    res.trained = from_dense(m, p);
    return res;
}

eval_result evaluate(const model & m, const dataset & data) {
    if (data.size() == 0) {
        fail(error_kind::argument, "evaluation set is empty");
    }
    const auto out = forward(m, data.x);
    eval_result res;
    res.item_scores.resize(data.size());
    double correct = 0.0;
    for (std::size_t n = 0; n < data.size(); ++n) {
        const auto row = out.logits.row(n);
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        res.item_scores[n] = pred == data.y[n] ? 1.0 : 0.0;
        correct += res.item_scores[n];
    }
    res.accuracy = correct / static_cast<double>(data.size());
    return res;
}

} // namespace mergelab::toy
