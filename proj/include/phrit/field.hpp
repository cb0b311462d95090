#pragma once

#include <array>
#include <functional>
#include <vector>

#include "phrit/autodiff.hpp"
#include "phrit/io.hpp"
#include "phrit/nets.hpp"
#include "phrit/prochand.hpp"
#include "phrit/skeleton.hpp"

// Training engine: assembles the deformation-field losses over per-part
// surface batches expressed in local coordinate systems, and runs the
// optimizer schedule. Surface terms are evaluated per scan on a reusable
// tape; per-scan gradients are reduced in a fixed order so training is
// deterministic regardless of thread count.
namespace phrit::field {

struct LossWeights {
  double sdf = 0.1;
  double norm = 1.0;
  double cycle = 0.1;
  double mano = 0.1;
  double regu = 1e-4;
  double off = 0.1;
  double igr = 1.0;
};

struct AblationFlags {
  bool disable_norm = false;
  bool holistic_stages = false;   // consumed at bundle construction
  bool dense_mano_plus = false;   // densified correspondence supervision
};

struct TrainConfig {
  int batch_scans = 32;
  double lr = 5e-4;
  std::vector<int> decay_epochs{250, 500};  // lr *= 0.5 at each
  int epochs = 1000;
  int points_per_part = 128;
  int off_per_scan = 512;
  int igr_per_scan = 512;
  double alpha_o = 100.0;
  LossWeights weights;
  AblationFlags flags;
  int dense_factor = 10;
  int checkpoint_interval = 0;  // 0 = only final
  int threads = 1;
  uint64_t seed = 1;
};

// The fixed canonical space shared by the whole artifact: the mean-identity
// flat skeleton, its part frames (the T_i of the losses) and the off-surface
// sampling domain (mean hand AABB inflated 20%).
struct CanonicalSpace {
  skel::Skeleton skeleton;
  std::array<geom::Rigid, skel::kParts> frames;
  geom::Aabb omega;

  static CanonicalSpace make();
};

struct PartBatch {
  std::vector<Vec3> x_local;           // surface points, posed LCS_i
  std::vector<Vec3> n_local;           // unit normals, posed LCS_i
  std::vector<Vec3> corr_posed_local;  // correspondence targets, posed LCS_i
  std::vector<Vec3> corr_canon_local;  // canonical LCS_i side
  std::vector<double> theta;
};

struct ScanBatch {
  int scan_index = 0;
  int gamma_row = 0;
  skel::BoneLengths lengths;
  std::array<PartBatch, skel::kParts> parts;
  std::vector<Vec3> off_samples;  // Omega \ Omega_0 (E_O)
  std::vector<Vec3> igr_samples;  // Omega (E_IGR)
};

// Deterministic per (seed, epoch, scan index). Off-surface samples exclude
// 2 mm balls around the scan's canonical-side correspondences.
ScanBatch build_scan_batch(const prochand::SyntheticScan& scan, int scan_index, int gamma_row,
                           const CanonicalSpace& canonical, const TrainConfig& cfg, int epoch,
                           const io::Dataset* dataset_for_dense = nullptr);

struct TermSums {
  double sdf = 0, norm = 0, cycle = 0, mano = 0, regu = 0, off = 0, igr = 0;
  long long n_sdf = 0, n_norm = 0, n_cycle = 0, n_mano = 0, n_regu = 0, n_off = 0, n_igr = 0;

  void accumulate(const TermSums& o);
};

struct TermMeans {
  double sdf = 0, norm = 0, cycle = 0, mano = 0, regu = 0, off = 0, igr = 0;
  double total(const LossWeights& w) const;
};

TermMeans means_of(const TermSums& sums, const LossWeights& w);

// Builds the scan's weighted loss on the tape. Each term enters the scalar
// loss as w_t * sum_t / global_count_t; pass the batch-wide counts so that
// summing per-scan losses yields the exact batch mean. Returns the loss node
// plus this scan's raw term sums for logging.
struct ScanLoss {
  ad::Val loss;
  TermSums sums;
};
ScanLoss build_scan_loss(ad::Tape& tape, const nets::NetworkBundle& bundle,
                         const ScanBatch& batch, const CanonicalSpace& canonical,
                         const LossWeights& weights, bool disable_norm, double alpha_o,
                         const TermSums& global_counts);

// Value-only per-term evaluation (means over this batch alone).
TermMeans loss_terms(const nets::NetworkBundle& bundle, const ScanBatch& batch,
                     const CanonicalSpace& canonical, double alpha_o,
                     bool with_norm = true);
double total_loss(const nets::NetworkBundle& bundle, const ScanBatch& batch,
                  const CanonicalSpace& canonical, const LossWeights& weights,
                  bool disable_norm, double alpha_o);

// Independent evaluation path for tests: the canonical field and the per-part
// maps are arbitrary callables; E_norm uses a central-difference Jacobian of
// the inverse map. Mirrors the tape losses on analytic oracles.
struct FieldOracle {
  std::function<double(const Vec3&)> value;
  std::function<Vec3(const Vec3&)> grad;
};
struct DeformOracle {
  std::function<Vec3(int part, const Vec3&)> fwd;
  std::function<Vec3(int part, const Vec3&)> inv;
};
TermMeans loss_terms_oracle(const FieldOracle& f, const DeformOracle& maps,
                            const ScanBatch& batch, const CanonicalSpace& canonical,
                            double alpha_o);

// ---- Training ----

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  TermMeans means;
  double total = 0;
  double wall_s = 0;
};

struct TrainCallbacks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(int epoch, const nets::NetworkBundle&)> on_checkpoint;
};

std::vector<uint64_t> unique_identity_seeds(const io::Dataset& ds);

// Epoch loop: shuffled scan order, mini-batches, Adam with the step decay
// schedule. Aborts with NonFiniteLoss naming the offending term. Fully
// deterministic per seed (thread count does not change results).
std::vector<EpochLog> train(const io::Dataset& ds, nets::NetworkBundle& bundle,
                            const TrainConfig& cfg, const TrainCallbacks& cb = {});

}  // namespace phrit::field
