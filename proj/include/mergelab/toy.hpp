#pragma once

#include "mergelab/checkpoint.hpp"
#include "mergelab/matrix.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mergelab::toy {

// Gaussian-cluster classification with isotropic noise. Each class owns
// `clusters_per_class` centroids; blob b belongs to class b % n_classes.
struct task_spec {
    std::uint64_t seed = 0;
    int input_dim = 16;
    int n_classes = 4;
    int n_train = 1000;
    int n_eval = 400;
    double separation = 6.0; // minimum centroid distance, in units of noise sd
    double noise = 1.0;
    int clusters_per_class = 1;
    std::string family = "gaussian_clusters";

    void validate() const;
};

struct dataset {
    matrix x;
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
};

struct task {
    task_spec spec;
    matrix centroids; // (n_classes * clusters_per_class, input_dim)
    dataset train;
    dataset eval;
};

task generate_task(const task_spec & spec);

// Fresh draws from a task's distribution with class-balanced labels.
dataset sample_task(const task & t, std::size_t n, std::uint64_t seed);

// Class of the closest centroid for every row.
std::vector<int> nearest_centroid(const matrix & centroids, int n_classes, const matrix & x);

// Fully connected tanh network; parameters "layer_{i}.w" (out, in) and
// "layer_{i}.b" (out).
struct model {
    std::vector<std::size_t> sizes; // input_dim, hidden..., n_classes
    checkpoint params;

    std::size_t n_layers() const { return sizes.size() - 1; }
    void validate() const;
};

// Weights N(0, gain^2 / fan_in), zero biases.
model init_model(const std::vector<std::size_t> & sizes, std::uint64_t seed, double gain = 1.0);
model zero_model(const std::vector<std::size_t> & sizes);
model with_params(const model & shape_from, checkpoint params);

struct forward_result {
    matrix logits;                   // (batch, n_classes)
    std::vector<matrix> activations; // post-tanh, one per hidden layer
};

forward_result forward(const model & m, const matrix & batch);

// Double-precision view of the parameters used by training.
struct dense_params {
    std::vector<matrix> w;              // (out, in)
    std::vector<std::vector<double>> b; // (out)
};

dense_params to_dense(const model & m);
model from_dense(const model & shape_from, const dense_params & p);

// Mean softmax cross-entropy over the batch; fills grad when non-null.
double loss_and_gradient(const dense_params & p, const matrix & x, std::span<const int> y, dense_params * grad);

struct train_config {
    int epochs = 20;
    double lr = 0.05;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

struct train_result {
    model trained;
    std::vector<double> loss_trace; // full-data loss before training, then after every epoch
};

// Minibatch SGD; throws error_kind::training on a non-finite loss.
train_result train(const model & m, const dataset & data, const train_config & cfg);

struct eval_result {
    double accuracy = 0.0;
    std::vector<double> item_scores; // 1 for a correct argmax, else 0
};

// Argmax ties go to the lowest class index.
eval_result evaluate(const model & m, const dataset & data);

} // namespace mergelab::toy
