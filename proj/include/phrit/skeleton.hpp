#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "phrit/errors.hpp"
#include "phrit/geom.hpp"
#include "phrit/vec.hpp"

// 21-keypoint hand skeleton and everything derived from it: 20 bone
// transforms, 16 part frames, local joint-angle poses and bone-length
// features. The core math is templated on the scalar type so the same code
// runs on plain doubles and on autodiff scalars.
//
// Conventions (0-based, frozen across file formats):
//   keypoints: 0 = wrist; finger f in 0..4 (thumb, index, middle, ring,
//              pinky) owns keypoints 1+4f .. 4+4f = MCP, PIP, DIP, TIP.
//   bones:     bone 4f+0 = palmar (wrist->MCP); 4f+1/2/3 = proximal, middle,
//              distal phalanx of finger f. Bone 8 is the middle palmar bone.
//   parts:     part 0 = palm (frame = bone 8); parts 1..15 = phalanges in
//              order (thumb prox, thumb mid, thumb dist, index prox, ...).
namespace phrit::skel {

inline constexpr int kKeypoints = 21;
inline constexpr int kBones = 20;
inline constexpr int kParts = 16;
inline constexpr int kMiddlePalmarBone = 8;
inline constexpr double kMinBoneLengthMm = 1.0;

struct BoneEnds {
  int head, tail;  // keypoint indices
};

inline constexpr BoneEnds bone_endpoints(int bone) {
  const int f = bone / 4, m = bone % 4;
  return m == 0 ? BoneEnds{0, 1 + 4 * f} : BoneEnds{m + 4 * f, m + 1 + 4 * f};
}

// Bone backing each part's frame; palm uses the middle palmar bone.
inline constexpr int part_bone(int part) {
  if (part == 0) return kMiddlePalmarBone;
  const int f = (part - 1) / 3, m = (part - 1) % 3;
  return 4 * f + 1 + m;
}

// 17 for the palm, 4 for proximal/middle phalanges, 2 for distal ones.
inline constexpr int theta_dim(int part) {
  if (part == 0) return 17;
  return (part - 1) % 3 == 2 ? 2 : 4;
}

// 5 palmar lengths for the palm, 1 bone length for finger parts.
inline constexpr int length_dim(int part) { return part == 0 ? 5 : 1; }

inline constexpr int theta_dim_total() { return 17 + 10 * 4 + 5 * 2; }  // 67

struct Skeleton {
  std::array<Vec3, kKeypoints> keypoints;  // mm

  // Checks finiteness and bone lengths; throws DegenerateBone.
  void validate() const;
  std::array<double, kKeypoints * 3> flat() const;
  static Skeleton from_flat(const double* xyz);
};

template <class Real>
using Keypoints = std::array<V3<Real>, kKeypoints>;

template <class Real>
struct LocalPoseT {
  // theta[0] has 17 entries: 4 spreading angles, 3 arching dihedrals, then
  // (abduction, flexion) for the five MCP joints in finger order. Finger
  // parts hold (abd, flex) for the joint at each bone end, distal parts only
  // the proximal one.
  std::array<std::vector<Real>, kParts> theta;
};

template <class Real>
struct BoneLengthsT {
  std::array<Real, kBones> raw;  // bone order

  std::array<Real, 5> palmar() const {
    return {raw[0], raw[4], raw[8], raw[12], raw[16]};
  }
  // Length feature of a part: palm gets palmar(), fingers their own bone.
  Real part_length(int part) const { return raw[size_t(part_bone(part))]; }
};

using LocalPose = LocalPoseT<double>;
using BoneLengths = BoneLengthsT<double>;

// ---- Templated core ----

namespace detail {

template <class Real>
V3<Real> bone_dir(const Keypoints<Real>& kp, int bone, bool check = true) {
  const BoneEnds e = bone_endpoints(bone);
  const V3<Real> d = kp[size_t(e.tail)] - kp[size_t(e.head)];
  const Real len = norm(d);
  if (check && !(primal(len) >= kMinBoneLengthMm))
    throw DegenerateBone("bone " + std::to_string(bone) + " shorter than 1 mm");
  return {d.x / len, d.y / len, d.z / len};
}

// Palm-plane reference: normalize((index MCP - wrist) x (pinky MCP - wrist)).
template <class Real>
V3<Real> palm_reference(const Keypoints<Real>& kp) {
  const V3<Real> a = kp[5] - kp[0];
  const V3<Real> b = kp[17] - kp[0];
  const V3<Real> n = cross(a, b);
  const Real len = norm(n);
  if (!(primal(len) > 1e-9)) throw CollinearPalm("index/pinky MCP collinear with wrist");
  return {n.x / len, n.y / len, n.z / len};
}

// Frame with local +y along `dir`; z from projecting `ref` off y. Falls back
// to global +z then +x when ref is within 1e-6 of parallel to y.
template <class Real>
M3<Real> frame_from_dir(const V3<Real>& y, const V3<Real>& ref) {
  V3<Real> r = ref;
  if (primal(abs(dot(y, r))) > 1.0 - 1e-6) {
    r = V3<Real>{Real(0), Real(0), Real(1)};
    if (primal(abs(dot(y, r))) > 1.0 - 1e-6) r = V3<Real>{Real(1), Real(0), Real(0)};
  }
  V3<Real> z = r - dot(r, y) * y;
  const Real zl = norm(z);
  z = V3<Real>{z.x / zl, z.y / zl, z.z / zl};
  const V3<Real> x = cross(y, z);
  return M3<Real>::from_cols(x, y, z);
}

// (abduction, flexion) of a unit child direction expressed in parent frame R.
// A child aligned with the parent's +y axis reads (0, 0).
template <class Real>
std::array<Real, 2> joint_angles(const M3<Real>& parent_R, const V3<Real>& child_dir) {
  const V3<Real> d = parent_R.tmul(child_dir);
  const Real flex = atan2(-d.z, d.y);
  const Real abd = atan2(d.x, sqrt(d.y * d.y + d.z * d.z));
  return {abd, flex};
}

}  // namespace detail

template <class Real>
std::array<RigidT<Real>, kBones> bone_transforms_t(const Keypoints<Real>& kp) {
  const V3<Real> ref = detail::palm_reference(kp);
  std::array<RigidT<Real>, kBones> out;
  for (int b = 0; b < kBones; ++b) {
    const BoneEnds e = bone_endpoints(b);
    out[size_t(b)].t = (kp[size_t(e.head)] + kp[size_t(e.tail)]) * 0.5;
    out[size_t(b)].R = detail::frame_from_dir(detail::bone_dir(kp, b), ref);
  }
  return out;
}

template <class Real>
std::array<RigidT<Real>, kParts> part_frames_t(const std::array<RigidT<Real>, kBones>& bones) {
  std::array<RigidT<Real>, kParts> out;
  for (int p = 0; p < kParts; ++p) out[size_t(p)] = bones[size_t(part_bone(p))];
  return out;
}

template <class Real>
BoneLengthsT<Real> bone_lengths_t(const Keypoints<Real>& kp) {
  BoneLengthsT<Real> out;
  for (int b = 0; b < kBones; ++b) {
    const BoneEnds e = bone_endpoints(b);
    out.raw[size_t(b)] = norm(kp[size_t(e.tail)] - kp[size_t(e.head)]);
  }
  return out;
}

template <class Real>
LocalPoseT<Real> local_pose_t(const Keypoints<Real>& kp) {
  using detail::bone_dir;
  using detail::joint_angles;

  std::array<V3<Real>, 5> palmar;
  for (int f = 0; f < 5; ++f) palmar[size_t(f)] = bone_dir(kp, 4 * f);

  const V3<Real> ref = detail::palm_reference(kp);
  // Bone frames for the joint-angle parent frames.
  std::array<M3<Real>, kBones> frames;
  for (int b = 0; b < kBones; ++b)
    frames[size_t(b)] = detail::frame_from_dir(bone_dir(kp, b), ref);

  LocalPoseT<Real> out;
  auto& palm = out.theta[0];
  palm.reserve(17);

  // Spreading: interior angles between consecutive palmar directions.
  for (int f = 0; f < 4; ++f) {
    const Real c = clamp1(dot(palmar[size_t(f)], palmar[size_t(f) + 1]), -1.0, 1.0);
    palm.push_back(acos(c));
  }
  // Arching: signed dihedrals between planes of palmar triples. Positive when
  // the third direction has positive component along the first plane normal.
  for (int f = 0; f < 3; ++f) {
    const V3<Real>& a = palmar[size_t(f)];
    const V3<Real>& b = palmar[size_t(f) + 1];
    const V3<Real>& c = palmar[size_t(f) + 2];
    const V3<Real> n1 = cross(a, b), n2 = cross(b, c);
    if (primal(norm(n1)) < 1e-8 || primal(norm(n2)) < 1e-8)
      throw CollinearPalm("collinear palmar bone triple");
    palm.push_back(atan2(dot(cross(n1, n2), b), dot(n1, n2)));
  }
  // MCP joint angles, parent = palmar bone frame.
  for (int f = 0; f < 5; ++f) {
    const auto [abd, flex] = joint_angles(frames[size_t(4 * f)], bone_dir(kp, 4 * f + 1));
    palm.push_back(abd);
    palm.push_back(flex);
  }

  for (int p = 1; p < kParts; ++p) {
    const int f = (p - 1) / 3, m = (p - 1) % 3;
    const int bone = 4 * f + 1 + m;
    auto& th = out.theta[size_t(p)];
    th.reserve(size_t(theta_dim(p)));
    // Joint at the proximal end of this bone.
    {
      const auto [abd, flex] =
          joint_angles(frames[size_t(bone - 1)], bone_dir(kp, bone));
      th.push_back(abd);
      th.push_back(flex);
    }
    // Joint at the distal end, absent for distal phalanges (fingertips).
    if (m < 2) {
      const auto [abd, flex] =
          joint_angles(frames[size_t(bone)], bone_dir(kp, bone + 1));
      th.push_back(abd);
      th.push_back(flex);
    }
  }
  return out;
}

// ---- Plain-double wrappers ----

std::array<geom::Rigid, kBones> bone_transforms(const Skeleton& s);
std::array<geom::Rigid, kParts> part_frames(const std::array<geom::Rigid, kBones>& bones);
std::array<geom::Rigid, kParts> part_frames(const Skeleton& s);
LocalPose local_pose(const Skeleton& s);
BoneLengths bone_length_features(const Skeleton& s);

inline Vec3 to_local(const geom::Rigid& frame, const Vec3& p) { return frame.apply_inverse(p); }
inline Vec3 from_local(const geom::Rigid& frame, const Vec3& p) { return frame.apply(p); }

// Flattened theta in part order; size 67. Used to condition networks.
std::vector<double> flatten_pose(const LocalPose& pose);

// JSON skeleton file: {"keypoints_mm": [[x,y,z] x 21]}.
Skeleton load_skeleton_json(const std::string& path);
void save_skeleton_json(const Skeleton& s, const std::string& path);

}  // namespace phrit::skel
