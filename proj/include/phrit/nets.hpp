#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phrit/autodiff.hpp"
#include "phrit/skeleton.hpp"
#include "phrit/vec.hpp"

// Network bundle: RefNet f (canonical signed distance), 16 part DeformNets
// g_i and their inverses, a global bone encoder, and the per-identity latent
// table. All trainable parameters live in one flat ParamVector; evaluation
// paths exist both on the autodiff tape and as plain-double fast paths.
namespace phrit::nets {

enum class Activation { Softplus, Sine, Relu };

Activation activation_from_string(const std::string& s);
std::string activation_name(Activation a);

struct MlpSpec {
  int input = 3;
  std::vector<int> hidden{128, 128, 128, 128, 128};
  int output = 1;
  Activation act = Activation::Softplus;
};

struct NetConfig {
  std::vector<int> refnet_hidden{128, 128, 128, 128, 128};
  std::vector<int> deform_hidden{64, 64, 64};  // per stage
  std::vector<int> encoder_hidden{32, 32};
  int dgamma = 128;
  int skip_stages = 2;      // N; a DeformNet composes N+1 stages
  bool holistic = false;    // single stage with the same total layer count
  Activation act = Activation::Softplus;
  Activation refnet_act = Activation::Softplus;  // periodic option for the template
  double softplus_beta = 100.0;
  double sine_omega = 30.0;
  double input_scale = 0.01;         // RefNet mm -> unit-ish coordinates
  double deform_input_scale = 0.02;  // stage point input scaling
  double length_scale = 0.01;        // bone-length encoder input scaling
  Vec3 input_center{0, 0, 0};        // RefNet recentering (mm)
  double geo_init_radius = 80.0;     // mm
  double gamma_init_std = 0.01;

  int stage_count() const { return holistic ? 1 : skip_stages + 1; }
  std::vector<int> stage_hidden() const;
  int beta_dim(int part) const { return dgamma + 16 + skel::length_dim(part); }
  int cond_dim(int part) const { return skel::theta_dim(part) + beta_dim(part); }
};

struct LayerLayout {
  int64_t w = 0, b = 0;
  int rows = 0, cols = 0;
};

struct MlpLayout {
  std::vector<LayerLayout> layers;
  int input() const { return layers.front().cols; }
  int output() const { return layers.back().rows; }
};

struct PartLayout {
  std::vector<MlpLayout> fwd;  // stage MLPs
  std::vector<MlpLayout> inv;
};

struct NetworkBundle {
  NetConfig cfg;
  ad::ParamVector params;
  std::vector<uint64_t> identity_ids;

  MlpLayout refnet;
  MlpLayout encoder;
  std::array<PartLayout, skel::kParts> parts;
  int64_t gamma_off = 0;

  int gamma_row(uint64_t id) const;  // -1 when unknown
  std::span<const double> gamma(int row) const;
  std::vector<double> mean_gamma() const;
  uint64_t layout_hash() const { return params.layout_hash(); }
  uint64_t param_hash() const;
};

// Deterministic initialization: RefNet gets a sphere-like geometric init of
// radius cfg.geo_init_radius about cfg.input_center; every deform stage's
// final affine layer starts at zero so both directions are the identity map;
// latent codes are Normal(0, gamma_init_std^2).
NetworkBundle init_networks(const NetConfig& cfg, std::span<const uint64_t> identity_ids,
                            uint64_t seed);
inline NetworkBundle init_networks(const NetConfig& cfg,
                                   std::initializer_list<uint64_t> identity_ids,
                                   uint64_t seed) {
  return init_networks(cfg, std::span<const uint64_t>(identity_ids.begin(), identity_ids.size()),
                       seed);
}

// ---- Tape evaluation ----

ad::Val mlp_eval(ad::Tape& t, const NetworkBundle& b, const MlpLayout& L, ad::Val x);

using DualVec = ad::Dual3;

DualVec mlp_eval_dual(ad::Tape& t, const NetworkBundle& b, const MlpLayout& L, DualVec x);

// f(x) in mm; x is a length-3 node in mm.
ad::Val refnet_eval(ad::Tape& t, const NetworkBundle& b, ad::Val x3);
DualVec refnet_eval_dual(ad::Tape& t, const NetworkBundle& b, DualVec x3);

// One full deform or inverse-deform pass: y = x + sum of stage residuals.
// cond = theta ⊕ beta for the part; throws DimMismatch on a wrong length.
ad::Val deform_eval(ad::Tape& t, const NetworkBundle& b, int part, bool inverse, ad::Val x3,
                    ad::Val cond);
DualVec deform_eval_dual(ad::Tape& t, const NetworkBundle& b, int part, bool inverse,
                         DualVec x3, ad::Val cond);

// Bone-length encoder (20 raw lengths -> F_g in R^16), applies length_scale.
ad::Val encoder_eval(ad::Tape& t, const NetworkBundle& b, ad::Val lengths20);

// ---- Plain-double fast paths ----

double refnet_eval_d(const NetworkBundle& b, const Vec3& x);
struct ValueGrad {
  double value;
  Vec3 grad;
};
ValueGrad refnet_grad_d(const NetworkBundle& b, const Vec3& x);

std::array<double, 16> encoder_eval_d(const NetworkBundle& b,
                                      const std::array<double, 20>& lengths);

// Conditioning vector [theta | gamma | F_g | L_part] for one part.
std::vector<double> make_cond(const NetworkBundle& b, int part,
                              const std::vector<double>& theta,
                              std::span<const double> gamma,
                              const std::array<double, 16>& fg,
                              const skel::BoneLengths& lengths);

// Per-part evaluation cache: the conditioning contribution to each stage's
// first layer is folded into an effective bias, leaving only the 3 point
// columns per call.
struct DeformCache {
  int part = 0;
  bool inverse = false;
  std::vector<std::vector<double>> stage_bias;  // per stage, first-layer bias
};

DeformCache make_deform_cache(const NetworkBundle& b, int part, bool inverse,
                              std::span<const double> cond);
Vec3 deform_point_d(const NetworkBundle& b, const DeformCache& cache, const Vec3& x);

}  // namespace phrit::nets
