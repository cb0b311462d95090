#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "phrit/geom.hpp"
#include "phrit/mc.hpp"
#include "phrit/skeleton.hpp"

// Procedural articulated-hand oracle: 20 tapered capsules (one per bone)
// joined by a smooth union with exact analytic signed distance and gradient.
// It plays the role of real scan data: it generates posed surface samples
// with normals and part labels, sparse canonical<->posed correspondences, and
// a canonical template with skinning weights.
namespace phrit::prochand {

struct HandIdentity {
  uint64_t seed = 0;
  double scale = 1.0;                          // in [0.9, 1.1]
  double palm_width = 1.0;                     // in [0.85, 1.15]
  std::array<double, 5> thickness{1, 1, 1, 1, 1};  // per finger, [0.85, 1.15]
  std::array<double, 5> length{1, 1, 1, 1, 1};     // per finger, [0.85, 1.15]

  static HandIdentity from_seed(uint64_t seed);
  static HandIdentity mean();  // all factors 1
};

struct ProcHandModel {
  skel::Skeleton canonical;  // flat reference pose, identity-scaled
  std::array<Vec3, skel::kBones> head, tail;      // canonical capsule segments
  std::array<double, skel::kBones> r_head, r_tail;  // mm
  double smooth_k = 4.0;                            // blend sharpness (mm)
  HandIdentity identity;

  static ProcHandModel make(const HandIdentity& id);
  static ProcHandModel mean() { return make(HandIdentity::mean()); }

  geom::Aabb aabb() const;  // canonical capsule hull
};

// Part owning each bone's capsule: palmar bones belong to the palm part.
inline constexpr int capsule_part(int bone) {
  const int f = bone / 4, m = bone % 4;
  return m == 0 ? 0 : 3 * f + m;
}

// Posed capsule set: segment endpoints follow the posed bone endpoints.
struct CapsuleSet {
  std::array<Vec3, skel::kBones> head, tail;
  std::array<double, skel::kBones> r_head, r_tail;
  double k = 4.0;
};

CapsuleSet posed_capsules(const ProcHandModel& model, const skel::Skeleton& posed);
inline CapsuleSet canonical_capsules(const ProcHandModel& model) {
  return posed_capsules(model, model.canonical);
}

// Exact tapered-capsule signed distance and its gradient.
struct DistGrad {
  double d;
  Vec3 grad;
};
DistGrad round_cone_sdf(const Vec3& p, const Vec3& a, const Vec3& b, double r1, double r2);

// Signed distance of the smooth union. The blend sharpness fades with
// distance from the surface so the far field matches the nearest capsule.
double sdf(const CapsuleSet& caps, const Vec3& x);
DistGrad sdf_grad(const CapsuleSet& caps, const Vec3& x);

// Per-part distances (palm = smooth union of its five palmar capsules at
// constant sharpness k), skinning weights (softmax of -d_part/k) and labels.
std::array<double, skel::kParts> part_distances(const CapsuleSet& caps, const Vec3& x);
std::array<double, skel::kParts> skinning_weights(const CapsuleSet& caps, const Vec3& x);
int part_label(const CapsuleSet& caps, const Vec3& x);

double posed_sdf(const ProcHandModel& model, const skel::Skeleton& posed, const Vec3& x);

// Damped Newton projection onto the zero level set; nullopt when it fails to
// reach |sdf| < tol within max_steps.
std::optional<Vec3> project_to_surface(const CapsuleSet& caps, Vec3 x, double tol = 1e-4,
                                       int max_steps = 50);

// ---- Canonical template ----

struct OracleTemplate {
  geom::TriMesh mesh;
  std::vector<std::array<double, skel::kParts>> weights;  // rows sum to 1
};

// Marching cubes over the canonical SDF at roughly cubic cells, longest axis
// getting grid_res nodes; weights evaluated at the vertices.
OracleTemplate template_with_skinning(const ProcHandModel& model, int grid_res,
                                      int threads = 1);

// Linear blend skinning of a template to the posed frames.
geom::TriMesh lbs_pose(const geom::TriMesh& mesh,
                       const std::vector<std::array<double, skel::kParts>>& weights,
                       const std::array<geom::Rigid, skel::kParts>& canonical_frames,
                       const std::array<geom::Rigid, skel::kParts>& posed_frames);

// ---- Pose sampling ----

// Samples joint angles per finger level and rebuilds keypoints by forward
// kinematics; the palm (wrist + MCPs) stays at the canonical pose. Frames are
// built exactly as bone_transforms does, so local_pose() recovers the
// sampled angles.
struct PoseSampler {
  double flex_min = 0.0, flex_max = 1.4;  // radians
  double abd_max = 0.3;
  uint64_t seed = 0;

  skel::Skeleton sample(const skel::Skeleton& canonical, uint64_t pose_index) const;
};

// ---- Scans ----

struct SyntheticScan {
  skel::Skeleton skeleton;  // posed, identity-scaled
  HandIdentity identity;
  geom::PointCloud surface;            // posed world, unit normals
  std::vector<uint8_t> labels;         // part per point
  std::vector<Vec3> corr_canonical;    // mean-canonical template vertices
  std::vector<Vec3> corr_posed;        // their LBS-posed positions
  std::vector<uint8_t> corr_part;      // argmax skinning weight
  uint64_t seed = 0;
};

// Surface samples come from the exact posed SDF (Newton-projected, |sdf| <
// 1e-4 mm); correspondences transport mean-template vertices by LBS, playing
// the role of fitted mesh annotations.
SyntheticScan sample_scan(const ProcHandModel& model, const skel::Skeleton& posed,
                          const OracleTemplate& mean_template,
                          const std::array<geom::Rigid, skel::kParts>& mean_canonical_frames,
                          int n_points, int n_corr, uint64_t seed);

}  // namespace phrit::prochand
