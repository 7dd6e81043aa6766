#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "chips/endpoint.hpp"
#include "chips/numerics.hpp"

namespace chips {

/// Clustered image-text pairs. Each cluster has a latent center; a pair draws a latent
/// point near its center and renders it through fixed image and text maps plus noise.
struct ClusterWorldSpec {
  std::size_t d_v = 32;
  std::size_t d_t = 32;
  std::size_t d = 16;
  std::size_t latent = 8;
  std::size_t clusters = 5;
  double center_scale = 2.0;
  double within_sigma = 0.7;
  double feature_noise = 0.3;
  double tau_log = 2.302585092994046;  // ln 10
  double init_scale = 1.0;             // W entries ~ N(0, init_scale^2 / rows)
};

class ClusterWorld {
 public:
  ClusterWorld(const ClusterWorldSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    Rng rng(derive_seed(seed, "cluster-world"));
    centers_ = random_normal_matrix(rng, spec.clusters, spec.latent, spec.center_scale / std::sqrt(double(spec.latent)));
    map_v_ = random_normal_matrix(rng, spec.d_v, spec.latent, 1.0 / std::sqrt(double(spec.latent)));
    map_t_ = random_normal_matrix(rng, spec.d_t, spec.latent, 1.0 / std::sqrt(double(spec.latent)));
  }

  const ClusterWorldSpec& spec() const noexcept { return spec_; }

  /// Random projection heads; the image and text heads start uncorrelated.
  EndpointParams init_params(std::uint64_t stream = 0) const {
    Rng rng(derive_seed(seed_, "init-params"), stream);
    EndpointParams p(spec_.d_v, spec_.d_t, spec_.d, spec_.tau_log);
    p.w_v = random_normal_matrix(rng, spec_.d_v, spec_.d, spec_.init_scale / std::sqrt(double(spec_.d_v)));
    p.w_t = random_normal_matrix(rng, spec_.d_t, spec_.d, spec_.init_scale / std::sqrt(double(spec_.d_t)));
    return p;
  }

  /// One pair from cluster c, drawn from the given generator.
  void sample(std::size_t c, Rng& rng, std::span<double> h, std::span<double> t) const {
    Vector z(spec_.latent);
    for (std::size_t a = 0; a < spec_.latent; ++a) z[a] = centers_(c, a) + spec_.within_sigma * rng.normal();
    const Vector hv = matvec(map_v_, z), tv = matvec(map_t_, z);
    for (std::size_t r = 0; r < spec_.d_v; ++r) h[r] = hv[r] + spec_.feature_noise * rng.normal();
    for (std::size_t r = 0; r < spec_.d_t; ++r) t[r] = tv[r] + spec_.feature_noise * rng.normal();
  }

  /// Batch with the given cluster labels; ids start at first_id.
  FeatureBatch batch(std::span<const std::size_t> labels, Rng& rng, std::uint64_t first_id = 0) const {
    FeatureBatch b;
    b.h = DenseMatrix(labels.size(), spec_.d_v);
    b.t = DenseMatrix(labels.size(), spec_.d_t);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      b.ids.push_back(first_id + i);
      sample(labels[i], rng, b.h.row(i), b.t.row(i));
    }
    return b;
  }

  /// Labels for n pool samples: cluster 0 with probability target_rate, others uniform.
  std::vector<std::size_t> mixed_labels(std::size_t n, double target_rate, Rng& rng) const {
    std::vector<std::size_t> out(n);
    for (auto& c : out)
      c = (spec_.clusters == 1 || rng.uniform() < target_rate) ? 0 : 1 + rng.below(spec_.clusters - 1);
    return out;
  }

 private:
  ClusterWorldSpec spec_;
  std::uint64_t seed_;
  DenseMatrix centers_;
  DenseMatrix map_v_;
  DenseMatrix map_t_;
};

}  // namespace chips
