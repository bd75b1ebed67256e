#include "support.hpp"

#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace testing {

MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

transfed::data::Dataset gaussian_signatures(int n_classes, int per_class, int rows, int features, double noise,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<MatrixXd> signature;
  for (int c = 0; c < n_classes; ++c) signature.push_back(random_matrix(rows, features, rng));
  transfed::data::Dataset d;
  d.n_classes = n_classes;
  d.source = "synthetic";
  for (int i = 0; i < per_class; ++i)
    for (int c = 0; c < n_classes; ++c) {
      transfed::data::Window w;
      w.values = signature[static_cast<std::size_t>(c)] + random_matrix(rows, features, rng, noise);
      w.label = c;
      d.windows.push_back(std::move(w));
    }
  return d;
}

double max_relative_error(const MatrixXd& analytic, const std::function<double()>& loss, MatrixXd& param, double h,
                          double floor) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double keep = param.data()[i];
    param.data()[i] = keep + h;
    const double up = loss();
    param.data()[i] = keep - h;
    const double down = loss();
    param.data()[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.data()[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

double model_gradient_error(transfed::model::Model& model, std::span<const MatrixXd> batch, std::span<const int> labels,
                            std::string* worst_name) {
  const auto step = model.loss_and_gradients(batch, labels);
  transfed::ParameterSet params = model.params();
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto loss = [&] {
      model.set_params(params);
      const MatrixXd probs = model.forward(batch);
      return transfed::numerics::cross_entropy(probs, labels);
    };
    const double e = max_relative_error(step.grads[t].value, loss, params[t].value);
    if (e > worst) {
      worst = e;
      if (worst_name) *worst_name = params[t].name;
    }
  }
  model.set_params(params);
  return worst;
}

namespace {

struct Free {
  void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
  void operator()(X509* p) const { X509_free(p); }
};

std::unique_ptr<EVP_PKEY, Free> make_key() {
  EVP_PKEY* key = EVP_EC_gen("prime256v1");
  if (!key) throw std::runtime_error("EC key generation failed");
  return std::unique_ptr<EVP_PKEY, Free>(key);
}

void add_ext(X509* cert, X509* issuer, int nid, const char* value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value);
  if (!ext) throw std::runtime_error("bad certificate extension");
  X509_add_ext(cert, ext, -1);
  X509_EXTENSION_free(ext);
}

std::unique_ptr<X509, Free> make_cert(EVP_PKEY* key, const char* cn, X509* issuer, EVP_PKEY* issuer_key, bool ca,
                                      long serial) {
  std::unique_ptr<X509, Free> cert(X509_new());
  X509_set_version(cert.get(), 2);
  ASN1_INTEGER_set(X509_get_serialNumber(cert.get()), serial);
  X509_gmtime_adj(X509_getm_notBefore(cert.get()), -3600);
  X509_gmtime_adj(X509_getm_notAfter(cert.get()), 3600L * 24 * 30);
  X509_set_pubkey(cert.get(), key);
  X509_NAME* name = X509_get_subject_name(cert.get());
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC, reinterpret_cast<const unsigned char*>(cn), -1, -1, 0);
  X509* signer = issuer ? issuer : cert.get();
  X509_set_issuer_name(cert.get(), X509_get_subject_name(signer));
  if (ca) {
    add_ext(cert.get(), signer, NID_basic_constraints, "critical,CA:TRUE");
    add_ext(cert.get(), signer, NID_key_usage, "critical,keyCertSign,cRLSign");
  } else {
    add_ext(cert.get(), signer, NID_basic_constraints, "CA:FALSE");
    add_ext(cert.get(), signer, NID_subject_alt_name, "IP:127.0.0.1,DNS:localhost");
  }
  if (!X509_sign(cert.get(), issuer_key ? issuer_key : key, EVP_sha256()))
    throw std::runtime_error("certificate signing failed");
  return cert;
}

void write_pem(const std::filesystem::path& p, X509* cert) {
  FILE* f = std::fopen(p.c_str(), "w");
  if (!f) throw std::runtime_error("cannot write " + p.string());
  PEM_write_X509(f, cert);
  std::fclose(f);
}

void write_pem(const std::filesystem::path& p, EVP_PKEY* key) {
  FILE* f = std::fopen(p.c_str(), "w");
  if (!f) throw std::runtime_error("cannot write " + p.string());
  PEM_write_PrivateKey(f, key, nullptr, nullptr, 0, nullptr, nullptr);
  std::fclose(f);
}

}  // namespace

TlsFiles make_test_certs(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  TlsFiles files{dir / "ca.pem", dir / "server.pem", dir / "server.key", dir / "client.pem", dir / "client.key"};
  auto ca_key = make_key();
  auto ca = make_cert(ca_key.get(), "transfed test CA", nullptr, nullptr, true, 1);
  auto server_key = make_key();
  auto server = make_cert(server_key.get(), "localhost", ca.get(), ca_key.get(), false, 2);
  auto client_key = make_key();
  auto client = make_cert(client_key.get(), "client", ca.get(), ca_key.get(), false, 3);
  write_pem(files.ca, ca.get());
  write_pem(files.server_cert, server.get());
  write_pem(files.server_key, server_key.get());
  write_pem(files.client_cert, client.get());
  write_pem(files.client_key, client_key.get());
  return files;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("transfed_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
