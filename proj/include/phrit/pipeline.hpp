#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phrit/autodiff.hpp"
#include "phrit/mc.hpp"
#include "phrit/nets.hpp"
#include "phrit/prochand.hpp"
#include "phrit/skeleton.hpp"

// Inference pipeline: extract the canonical template once (cached with
// provenance), then drive it from a skeleton and shape code: per-part
// deformation in canonical local coordinates, rigid transport by the posed
// frames, and skinning-weight blending. Everything stays differentiable with
// respect to the keypoints and the latent code through the autodiff tape.
namespace phrit::pipeline {

inline constexpr double kWeightCutoff = 1e-4;

struct VertexInfluence {
  int part;
  double weight;
  Vec3 local;  // canonical LCS_i coordinates
};

struct CanonicalTemplate {
  geom::TriMesh mesh;
  std::vector<std::array<double, skel::kParts>> weights;   // rows sum to 1
  std::vector<std::vector<VertexInfluence>> influences;    // weight > cutoff
  std::array<geom::Rigid, skel::kParts> canonical_frames;
  uint64_t provenance = 0;  // hash of parameters + grid
  mc::GridSpec grid;
};

struct SkinningSource {
  const geom::TriMesh& mesh;
  const std::vector<std::array<double, skel::kParts>>& weights;
};

uint64_t template_provenance(const nets::NetworkBundle& bundle, const mc::GridSpec& grid);

// Marching cubes over the trained RefNet; skinning weights transferred from
// the source template by nearest-surface-point barycentric interpolation.
// When cache_path is non-empty and holds a template with matching provenance
// it is loaded instead (no marching-cubes invocation).
CanonicalTemplate extract_template(const nets::NetworkBundle& bundle, const mc::GridSpec& grid,
                                   const SkinningSource& source,
                                   const std::string& cache_path = "", int threads = 1);

void save_template(const CanonicalTemplate& tpl, const std::string& path);
CanonicalTemplate load_template(const std::string& path);

struct Reconstruction {
  geom::TriMesh mesh;  // template topology
  skel::Skeleton skeleton;
  std::vector<double> gamma;
};

struct InferOptions {
  bool rigid_only = false;  // freeze deformation stages at identity (LBS baseline)
  int threads = 1;
};

Reconstruction infer(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                     const skel::Skeleton& skeleton, std::span<const double> gamma,
                     const InferOptions& opt = {});

// Positions of a vertex subset only (plain doubles); shared by the gradient
// check and the fitting loop.
std::vector<Vec3> infer_vertices(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                                 const skel::Skeleton& skeleton, std::span<const double> gamma,
                                 std::span<const uint32_t> subset, bool rigid_only = false);

// Tape-backed inference graph over a vertex subset.
struct InferGraph {
  std::array<ad::Val, skel::kKeypoints * 3> keypoints;
  ad::Val gamma;
  std::vector<ad::SVec3> vertices;
};
InferGraph build_infer_graph(ad::Tape& tape, const CanonicalTemplate& tpl,
                             const nets::NetworkBundle& bundle, const skel::Skeleton& skeleton,
                             std::span<const double> gamma,
                             std::span<const uint32_t> subset);

struct GradCheckReport {
  double max_rel_err_keypoints = 0;
  double max_rel_err_gamma = 0;
  double grad_inf_norm = 0;
  bool pass = false;
};

// Gradient of mean vertex displacement w.r.t. every keypoint coordinate and
// every latent entry, validated against central finite differences.
GradCheckReport infer_grad_check(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                                 const skel::Skeleton& skeleton, std::span<const double> gamma,
                                 int probe_vertices = 120, uint64_t seed = 0,
                                 double rel_tol = 1e-3);

struct FitOptions {
  int steps = 300;
  double lr_keypoints = 1e-2;
  double lr_gamma = 1e-2;
  double w_regu = 1e-4;
  int recon_subsample = 800;
  int cloud_subsample = 800;
  bool optimize_keypoints = true;
  bool optimize_gamma = true;
  uint64_t seed = 0;
  int threads = 1;
};

struct FitResult {
  skel::Skeleton skeleton;
  std::vector<double> gamma;
  Reconstruction recon;
  std::vector<double> loss_trace;       // per-step objective
  std::vector<double> best_trace;       // recorded minimum, non-increasing
  double best_loss = 0;
};

// Symmetric chamfer between the driven template and the cloud, minimized over
// (keypoints, gamma) with Adam; nearest-neighbor pairings are refreshed every
// step. Returns the best iterate. Throws Diverged on a non-finite objective
// and EmptyCloud for clouds below 100 points.
FitResult fit_to_pointcloud(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                            const geom::PointCloud& cloud, const skel::Skeleton& init_skeleton,
                            const FitOptions& opt = {});

}  // namespace phrit::pipeline
