#include <doctest.h>

#include <cmath>

#include "phrit/field.hpp"
#include "phrit/nets.hpp"
#include "phrit/rng.hpp"
#include "testutil.hpp"

using namespace phrit;
using namespace phrit::nets;

namespace {

NetConfig desk_config() {
  NetConfig cfg;
  cfg.refnet_hidden = {32, 32};
  cfg.deform_hidden = {16, 16};
  cfg.encoder_hidden = {16, 16};
  cfg.dgamma = 8;
  cfg.skip_stages = 1;
  cfg.input_center = prochand::ProcHandModel::mean().aabb().center();
  return cfg;
}

}  // namespace

TEST_CASE("conditioning dimension table") {
  NetConfig cfg;  // paper defaults, dgamma 128
  CHECK(cfg.beta_dim(0) == 149);
  CHECK(cfg.beta_dim(1) == 145);
  CHECK(skel::theta_dim(0) == 17);
  CHECK(skel::theta_dim(1) == 4);
  CHECK(skel::theta_dim(3) == 2);
  CHECK(cfg.cond_dim(0) == 17 + 149);
}

TEST_CASE("identity at init and determinism") {
  const std::vector<uint64_t> ids = {10, 20};
  NetworkBundle a = init_networks(desk_config(), ids, 42);
  NetworkBundle b = init_networks(desk_config(), ids, 42);
  REQUIRE(a.params.data.size() == b.params.data.size());
  for (std::size_t i = 0; i < a.params.data.size(); ++i)
    CHECK(a.params.data[i] == b.params.data[i]);

  // Residual identity for both directions, all parts.
  Rng rng(3);
  for (int p = 0; p < skel::kParts; ++p) {
    std::vector<double> cond(size_t(a.cfg.cond_dim(p)));
    for (auto& v : cond) v = rng.normal();
    const Vec3 x{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const auto cf = make_deform_cache(a, p, false, cond);
    const auto ci = make_deform_cache(a, p, true, cond);
    CHECK(norm(deform_point_d(a, cf, x) - x) == 0.0);
    CHECK(norm(deform_point_d(a, ci, x) - x) == 0.0);
  }
}

TEST_CASE("geometric initialization is sphere-like") {
  NetworkBundle b = init_networks(desk_config(), {}, 7);
  const Vec3 c = b.cfg.input_center;
  CHECK(refnet_eval_d(b, c) < 0.0);
  CHECK(refnet_eval_d(b, c + Vec3{3 * b.cfg.geo_init_radius, 0, 0}) > 0.0);
  // f should be close to |x - c| - r0 at a ring of probe points.
  Rng rng(5);
  double max_err = 0;
  for (int i = 0; i < 64; ++i) {
    const Vec3 u = testutil::random_unit(rng);
    const double r = rng.uniform(20.0, 160.0);
    const double f = refnet_eval_d(b, c + u * r);
    max_err = std::max(max_err, std::abs(f - (r - b.cfg.geo_init_radius)));
  }
  CHECK(max_err < 0.15 * b.cfg.geo_init_radius);
}

TEST_CASE("tape and double paths agree") {
  NetworkBundle b = init_networks(desk_config(), {1}, 11);
  Rng rng(1);
  for (auto& p : b.params.data) p += rng.normal(0.0, 0.05);
  ad::Tape t;
  t.bind(b.params.data.data(), b.params.data.size());
  for (int i = 0; i < 20; ++i) {
    const Vec3 x{rng.uniform(-120, 120), rng.uniform(-40, 220), rng.uniform(-60, 60)};
    const double d_fast = refnet_eval_d(b, x);
    const double d[3] = {x.x, x.y, x.z};
    const double d_tape = t.value1(refnet_eval(t, b, t.constant(std::span<const double>(d, 3))));
    CHECK(d_fast == doctest::Approx(d_tape).epsilon(1e-12));

    const auto vg = refnet_grad_d(b, x);
    CHECK(vg.value == doctest::Approx(d_fast).epsilon(1e-12));
    const double h = 1e-5;
    for (int k = 0; k < 3; ++k) {
      Vec3 xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      const double fd = (refnet_eval_d(b, xp) - refnet_eval_d(b, xm)) / (2 * h);
      CHECK(std::abs(vg.grad[k] - fd) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("deform cache matches tape evaluation") {
  NetworkBundle b = init_networks(desk_config(), {1}, 13);
  Rng rng(2);
  for (auto& p : b.params.data) p += rng.normal(0.0, 0.05);
  ad::Tape t;
  t.bind(b.params.data.data(), b.params.data.size());
  for (int p = 0; p < skel::kParts; p += 5) {
    std::vector<double> cond(size_t(b.cfg.cond_dim(p)));
    for (auto& v : cond) v = rng.normal(0.0, 0.3);
    const auto cache = make_deform_cache(b, p, true, cond);
    for (int i = 0; i < 5; ++i) {
      const Vec3 x{rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-40, 40)};
      const Vec3 fast = deform_point_d(b, cache, x);
      const double xd[3] = {x.x, x.y, x.z};
      const ad::Val cv = t.constant(std::span<const double>(cond.data(), cond.size()));
      const ad::Val y =
          deform_eval(t, b, p, true, t.constant(std::span<const double>(xd, 3)), cv);
      const Vec3 tape_y = t.value3(y);
      CHECK(norm(fast - tape_y) < 1e-12);
    }
  }
}

TEST_CASE("dimension mismatch raises") {
  NetworkBundle b = init_networks(desk_config(), {1}, 1);
  ad::Tape t;
  t.bind(b.params.data.data(), b.params.data.size());
  // Palm conditioning fed to a finger net.
  std::vector<double> cond(size_t(b.cfg.cond_dim(0)), 0.0);
  const ad::Val cv = t.constant(std::span<const double>(cond.data(), cond.size()));
  const double xd[3] = {0, 0, 0};
  const ad::Val x = t.constant(std::span<const double>(xd, 3));
  CHECK_THROWS_AS(deform_eval(t, b, 1, true, x, cv), DimMismatch);
  CHECK_THROWS_AS(make_deform_cache(b, 1, false, cond), DimMismatch);
  CHECK_THROWS_AS(make_deform_cache(b, 99, false, cond), BadPartIndex);
}

TEST_CASE("shape code assembly") {
  NetworkBundle b = init_networks(desk_config(), {1, 2}, 3);
  const skel::Skeleton s = testutil::reference_flat_skeleton();
  const skel::BoneLengths lengths = skel::bone_length_features(s);
  const skel::LocalPose pose = skel::local_pose(s);
  std::array<double, 20> raw{};
  for (int k = 0; k < 20; ++k) raw[size_t(k)] = lengths.raw[size_t(k)];
  const auto fg = encoder_eval_d(b, raw);
  const auto g0 = b.gamma(0);

  const auto cond_palm = make_cond(b, 0, pose.theta[0], g0, fg, lengths);
  CHECK(int(cond_palm.size()) == b.cfg.cond_dim(0));
  const auto cond_idx = make_cond(b, 4, pose.theta[4], g0, fg, lengths);
  CHECK(int(cond_idx.size()) == b.cfg.cond_dim(4));
  // Both parts carry the same F_g segment bitwise.
  const int dg = b.cfg.dgamma;
  const int t0 = skel::theta_dim(0), t4 = skel::theta_dim(4);
  for (int k = 0; k < 16; ++k)
    CHECK(cond_palm[size_t(t0 + dg + k)] == cond_idx[size_t(t4 + dg + k)]);
  // Palm carries 5 palmar lengths, finger its own bone length.
  CHECK(cond_palm.size() == size_t(t0 + dg + 16 + 5));
  CHECK(cond_idx.back() == doctest::Approx(lengths.part_length(4)));
}

TEST_CASE("purity of evaluation") {
  NetworkBundle b = init_networks(desk_config(), {1}, 17);
  const Vec3 x{10, 50, 5};
  CHECK(refnet_eval_d(b, x) == refnet_eval_d(b, x));
}
