#pragma once

#include <string>
#include <vector>

#include "phrit/nets.hpp"
#include "phrit/prochand.hpp"

// Binary file formats (all little-endian):
//   scan      "PHRITSCN" — header, identity params, skeleton (f64), then
//             points/normals as f32 triples and part labels as u8, followed
//             by correspondence pairs.
//   ckpt      "PHRITCKPT" — text header (key=value lines) describing the
//             architecture, ending with end_header, then parameters as f32 in
//             layout order. The loader verifies the layout hash.
//   template  "PHRITOTL" — oracle template mesh + skinning weights.
namespace phrit::io {

void save_scan(const prochand::SyntheticScan& scan, const std::string& path);
prochand::SyntheticScan load_scan(const std::string& path);

void save_checkpoint(const nets::NetworkBundle& bundle, const std::string& path);
nets::NetworkBundle load_checkpoint(const std::string& path);

void save_oracle_template(const prochand::OracleTemplate& tpl, const std::string& path);
prochand::OracleTemplate load_oracle_template(const std::string& path);

// ---- Dataset directory ----
//
// <dir>/manifest.txt        key = value (seed, counts, generation settings)
// <dir>/template.bin        mean-identity oracle template (skinning source)
// <dir>/train_####.bin      training scans
// <dir>/test_####.bin       held-out scans

struct Dataset {
  std::vector<prochand::SyntheticScan> train;
  std::vector<prochand::SyntheticScan> test;
  prochand::OracleTemplate mean_template;
  uint64_t seed = 0;
};

struct SynthSettings {
  int train_identities = 10;
  int train_poses = 10;
  int test_pairs = 10;
  int points_per_scan = 2048;
  int corr_per_scan = 256;
  int template_grid = 64;
  double flex_min = 0.0, flex_max = 1.4, abd_max = 0.3;
  uint64_t seed = 7;
  int threads = 1;
};

// Deterministic per seed: identity seeds and pose streams are derived from
// it, test pairs use identity/pose streams disjoint from training.
Dataset synthesize_dataset(const SynthSettings& s);
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace phrit::io
