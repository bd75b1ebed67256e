#pragma once

#include "transfed/data.hpp"
#include "transfed/model.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testing {

using transfed::MatrixXd;

MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0);

/// Windows of class c are a fixed random signature for c plus Gaussian noise.
transfed::data::Dataset gaussian_signatures(int n_classes, int per_class, int rows, int features, double noise,
                                            std::uint64_t seed);

/// max over entries of |analytic - numeric| / max(|analytic|, |numeric|, floor),
/// numeric being the central difference with step h.
double max_relative_error(const MatrixXd& analytic, const std::function<double()>& loss, MatrixXd& param,
                          double h = 1e-5, double floor = 1e-6);

/// Worst relative error over every model parameter for the mean cross-entropy.
double model_gradient_error(transfed::model::Model& model, std::span<const MatrixXd> batch, std::span<const int> labels,
                            std::string* worst = nullptr);

struct TlsFiles {
  std::filesystem::path ca, server_cert, server_key, client_cert, client_key;
};

/// Self-signed CA plus a server and a client certificate issued by it.
TlsFiles make_test_certs(const std::filesystem::path& dir);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace testing
