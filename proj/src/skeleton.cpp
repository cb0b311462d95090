#include "phrit/skeleton.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace phrit::skel {

void Skeleton::validate() const {
  for (const auto& p : keypoints) {
    if (!finite(p)) throw DegenerateBone("non-finite keypoint");
  }
  for (int b = 0; b < kBones; ++b) {
    const BoneEnds e = bone_endpoints(b);
    const double len = norm(keypoints[size_t(e.tail)] - keypoints[size_t(e.head)]);
    if (!(len > kMinBoneLengthMm))
      throw DegenerateBone("bone " + std::to_string(b) + " shorter than 1 mm");
  }
}

std::array<double, kKeypoints * 3> Skeleton::flat() const {
  std::array<double, kKeypoints * 3> out{};
  for (int i = 0; i < kKeypoints; ++i) {
    out[size_t(3 * i + 0)] = keypoints[size_t(i)].x;
    out[size_t(3 * i + 1)] = keypoints[size_t(i)].y;
    out[size_t(3 * i + 2)] = keypoints[size_t(i)].z;
  }
  return out;
}

Skeleton Skeleton::from_flat(const double* xyz) {
  Skeleton s;
  for (int i = 0; i < kKeypoints; ++i)
    s.keypoints[size_t(i)] = {xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]};
  return s;
}

std::array<geom::Rigid, kBones> bone_transforms(const Skeleton& s) {
  return bone_transforms_t<double>(s.keypoints);
}

std::array<geom::Rigid, kParts> part_frames(const std::array<geom::Rigid, kBones>& bones) {
  return part_frames_t<double>(bones);
}

std::array<geom::Rigid, kParts> part_frames(const Skeleton& s) {
  return part_frames(bone_transforms(s));
}

LocalPose local_pose(const Skeleton& s) {
  LocalPose pose = local_pose_t<double>(s.keypoints);
  int total = 0;
  for (int p = 0; p < kParts; ++p) {
    if (int(pose.theta[size_t(p)].size()) != theta_dim(p))
      throw DimMismatch("theta dimension mismatch for part " + std::to_string(p));
    total += int(pose.theta[size_t(p)].size());
  }
  if (total != theta_dim_total()) throw DimMismatch("theta total dimension != 67");
  return pose;
}

BoneLengths bone_length_features(const Skeleton& s) {
  return bone_lengths_t<double>(s.keypoints);
}

std::vector<double> flatten_pose(const LocalPose& pose) {
  std::vector<double> out;
  out.reserve(size_t(theta_dim_total()));
  for (const auto& th : pose.theta) out.insert(out.end(), th.begin(), th.end());
  return out;
}

Skeleton load_skeleton_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("bad skeleton file: ") + e.what());
  }
  if (!j.contains("keypoints_mm")) throw DataError("skeleton file lacks keypoints_mm");
  const auto& arr = j["keypoints_mm"];
  if (!arr.is_array() || arr.size() != kKeypoints)
    throw DataError("keypoints_mm must hold exactly 21 entries");
  Skeleton s;
  for (int i = 0; i < kKeypoints; ++i) {
    const auto& p = arr[size_t(i)];
    if (!p.is_array() || p.size() != 3)
      throw DataError("keypoint " + std::to_string(i) + " must be [x,y,z]");
    s.keypoints[size_t(i)] = {p[0].get<double>(), p[1].get<double>(), p[2].get<double>()};
  }
  s.validate();
  return s;
}

void save_skeleton_json(const Skeleton& s, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : s.keypoints) arr.push_back({p.x, p.y, p.z});
  nlohmann::json j;
  j["keypoints_mm"] = arr;
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

}  // namespace phrit::skel
