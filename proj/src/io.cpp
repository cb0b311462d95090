#include "phrit/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "phrit/config.hpp"
#include "phrit/parallel.hpp"
#include "phrit/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace phrit::io {

namespace {

template <class T>
void write_pod(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw DataError("truncated file");
  return v;
}

void write_magic(std::ofstream& f, const char* magic) {
  f.write(magic, std::streamsize(std::strlen(magic)));
}

void expect_magic(std::ifstream& f, const char* magic) {
  const std::size_t n = std::strlen(magic);
  std::string buf(n, '\0');
  f.read(buf.data(), std::streamsize(n));
  if (!f || buf != magic) throw DataError(std::string("bad magic, expected ") + magic);
}

void write_vec3f(std::ofstream& f, const std::vector<Vec3>& v) {
  std::vector<float> flat(v.size() * 3);
  for (std::size_t i = 0; i < v.size(); ++i) {
    flat[3 * i + 0] = float(v[i].x);
    flat[3 * i + 1] = float(v[i].y);
    flat[3 * i + 2] = float(v[i].z);
  }
  f.write(reinterpret_cast<const char*>(flat.data()),
          std::streamsize(flat.size() * sizeof(float)));
}

std::vector<Vec3> read_vec3f(std::ifstream& f, std::size_t n) {
  std::vector<float> flat(n * 3);
  f.read(reinterpret_cast<char*>(flat.data()), std::streamsize(flat.size() * sizeof(float)));
  if (!f) throw DataError("truncated vec3 block");
  std::vector<Vec3> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = {double(flat[3 * i]), double(flat[3 * i + 1]), double(flat[3 * i + 2])};
  return out;
}

}  // namespace

void save_scan(const prochand::SyntheticScan& scan, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  write_magic(f, "PHRITSCN");
  write_pod<uint32_t>(f, 1);
  write_pod<uint32_t>(f, uint32_t(scan.surface.points.size()));
  write_pod<uint32_t>(f, uint32_t(scan.corr_canonical.size()));
  write_pod<uint64_t>(f, scan.seed);
  write_pod<uint64_t>(f, scan.identity.seed);
  write_pod<double>(f, scan.identity.scale);
  write_pod<double>(f, scan.identity.palm_width);
  for (double v : scan.identity.thickness) write_pod<double>(f, v);
  for (double v : scan.identity.length) write_pod<double>(f, v);
  for (const auto& kp : scan.skeleton.keypoints) {
    write_pod<double>(f, kp.x);
    write_pod<double>(f, kp.y);
    write_pod<double>(f, kp.z);
  }
  write_vec3f(f, scan.surface.points);
  write_vec3f(f, scan.surface.normals);
  f.write(reinterpret_cast<const char*>(scan.labels.data()),
          std::streamsize(scan.labels.size()));
  write_vec3f(f, scan.corr_canonical);
  write_vec3f(f, scan.corr_posed);
  f.write(reinterpret_cast<const char*>(scan.corr_part.data()),
          std::streamsize(scan.corr_part.size()));
  if (!f) throw DataError("write failed: " + path);
}

prochand::SyntheticScan load_scan(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  expect_magic(f, "PHRITSCN");
  const uint32_t version = read_pod<uint32_t>(f);
  if (version != 1) throw DataError("unsupported scan version");
  const uint32_t n = read_pod<uint32_t>(f);
  const uint32_t m = read_pod<uint32_t>(f);
  prochand::SyntheticScan scan;
  scan.seed = read_pod<uint64_t>(f);
  scan.identity.seed = read_pod<uint64_t>(f);
  scan.identity.scale = read_pod<double>(f);
  scan.identity.palm_width = read_pod<double>(f);
  for (double& v : scan.identity.thickness) v = read_pod<double>(f);
  for (double& v : scan.identity.length) v = read_pod<double>(f);
  for (auto& kp : scan.skeleton.keypoints) {
    kp.x = read_pod<double>(f);
    kp.y = read_pod<double>(f);
    kp.z = read_pod<double>(f);
  }
  scan.skeleton.validate();
  scan.surface.points = read_vec3f(f, n);
  scan.surface.normals = read_vec3f(f, n);
  scan.labels.resize(n);
  f.read(reinterpret_cast<char*>(scan.labels.data()), std::streamsize(n));
  scan.corr_canonical = read_vec3f(f, m);
  scan.corr_posed = read_vec3f(f, m);
  scan.corr_part.resize(m);
  f.read(reinterpret_cast<char*>(scan.corr_part.data()), std::streamsize(m));
  if (!f) throw DataError("truncated scan file " + path);
  for (uint8_t l : scan.labels)
    if (l >= skel::kParts) throw DataError("scan label out of range in " + path);
  return scan;
}

// ---- Checkpoints ----

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::string tok;
  for (char c : s) {
    if (c == ',') {
      if (!tok.empty()) out.push_back(std::stoi(tok));
      tok.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      tok += c;
    }
  }
  if (!tok.empty()) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace

void save_checkpoint(const nets::NetworkBundle& bundle, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  const auto& cfg = bundle.cfg;
  f << "PHRITCKPT\n";
  f << "version=1\n";
  f << "refnet_hidden=" << join_ints(cfg.refnet_hidden) << "\n";
  f << "deform_hidden=" << join_ints(cfg.deform_hidden) << "\n";
  f << "encoder_hidden=" << join_ints(cfg.encoder_hidden) << "\n";
  f << "dgamma=" << cfg.dgamma << "\n";
  f << "skip_stages=" << cfg.skip_stages << "\n";
  f << "holistic=" << (cfg.holistic ? 1 : 0) << "\n";
  f << "activation=" << nets::activation_name(cfg.act) << "\n";
  f << "refnet_activation=" << nets::activation_name(cfg.refnet_act) << "\n";
  f << "softplus_beta=" << cfg.softplus_beta << "\n";
  f << "sine_omega=" << cfg.sine_omega << "\n";
  f << "input_scale=" << cfg.input_scale << "\n";
  f << "deform_input_scale=" << cfg.deform_input_scale << "\n";
  f << "length_scale=" << cfg.length_scale << "\n";
  f.precision(17);
  f << "input_center=" << cfg.input_center.x << "," << cfg.input_center.y << ","
    << cfg.input_center.z << "\n";
  f << "geo_init_radius=" << cfg.geo_init_radius << "\n";
  f << "gamma_init_std=" << cfg.gamma_init_std << "\n";
  f << "identity_ids=";
  for (std::size_t i = 0; i < bundle.identity_ids.size(); ++i)
    f << (i ? "," : "") << bundle.identity_ids[i];
  f << "\n";
  f << "layout_hash=" << bundle.layout_hash() << "\n";
  f << "param_count=" << bundle.params.data.size() << "\n";
  f << "end_header\n";
  std::vector<float> fp(bundle.params.data.size());
  for (std::size_t i = 0; i < fp.size(); ++i) fp[i] = float(bundle.params.data[i]);
  f.write(reinterpret_cast<const char*>(fp.data()), std::streamsize(fp.size() * sizeof(float)));
  if (!f) throw DataError("write failed: " + path);
}

nets::NetworkBundle load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "PHRITCKPT") throw DataError("not a checkpoint file");
  std::map<std::string, std::string> kv;
  while (std::getline(f, line)) {
    if (line == "end_header") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad checkpoint header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("checkpoint header lacks " + k);
    return it->second;
  };

  nets::NetConfig cfg;
  cfg.refnet_hidden = split_ints(need("refnet_hidden"));
  cfg.deform_hidden = split_ints(need("deform_hidden"));
  cfg.encoder_hidden = split_ints(need("encoder_hidden"));
  cfg.dgamma = std::stoi(need("dgamma"));
  cfg.skip_stages = std::stoi(need("skip_stages"));
  cfg.holistic = need("holistic") == "1";
  cfg.act = nets::activation_from_string(need("activation"));
  cfg.refnet_act = nets::activation_from_string(need("refnet_activation"));
  cfg.softplus_beta = std::stod(need("softplus_beta"));
  cfg.sine_omega = std::stod(need("sine_omega"));
  cfg.input_scale = std::stod(need("input_scale"));
  cfg.deform_input_scale = std::stod(need("deform_input_scale"));
  cfg.length_scale = std::stod(need("length_scale"));
  {
    const std::string& c = need("input_center");
    double x = 0, y = 0, z = 0;
    if (std::sscanf(c.c_str(), "%lf,%lf,%lf", &x, &y, &z) != 3)
      throw DataError("bad input_center in checkpoint");
    cfg.input_center = {x, y, z};
  }
  cfg.geo_init_radius = std::stod(need("geo_init_radius"));
  cfg.gamma_init_std = std::stod(need("gamma_init_std"));

  std::vector<uint64_t> ids;
  {
    const std::string& s = need("identity_ids");
    std::string tok;
    for (char c : s) {
      if (c == ',') {
        if (!tok.empty()) ids.push_back(std::stoull(tok));
        tok.clear();
      } else {
        tok += c;
      }
    }
    if (!tok.empty()) ids.push_back(std::stoull(tok));
  }

  nets::NetworkBundle bundle = nets::init_networks(cfg, ids, 0);
  const uint64_t expect_hash = std::stoull(need("layout_hash"));
  if (bundle.layout_hash() != expect_hash)
    throw DataError("checkpoint layout hash mismatch");
  const std::size_t count = std::stoull(need("param_count"));
  if (count != bundle.params.data.size())
    throw DataError("checkpoint parameter count mismatch");

  std::vector<float> fp(count);
  f.read(reinterpret_cast<char*>(fp.data()), std::streamsize(count * sizeof(float)));
  if (!f) throw DataError("truncated checkpoint payload");
  for (std::size_t i = 0; i < count; ++i) bundle.params.data[i] = double(fp[i]);
  return bundle;
}

// ---- Oracle template ----

void save_oracle_template(const prochand::OracleTemplate& tpl, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  write_magic(f, "PHRITOTL");
  write_pod<uint32_t>(f, 1);
  write_pod<uint32_t>(f, uint32_t(tpl.mesh.vertices.size()));
  write_pod<uint32_t>(f, uint32_t(tpl.mesh.faces.size()));
  for (const auto& v : tpl.mesh.vertices) {
    write_pod<double>(f, v.x);
    write_pod<double>(f, v.y);
    write_pod<double>(f, v.z);
  }
  for (const auto& face : tpl.mesh.faces)
    for (int k = 0; k < 3; ++k) write_pod<int32_t>(f, face[size_t(k)]);
  for (const auto& w : tpl.weights)
    for (double v : w) write_pod<double>(f, v);
  if (!f) throw DataError("write failed: " + path);
}

prochand::OracleTemplate load_oracle_template(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  expect_magic(f, "PHRITOTL");
  const uint32_t version = read_pod<uint32_t>(f);
  if (version != 1) throw DataError("unsupported template version");
  const uint32_t nv = read_pod<uint32_t>(f);
  const uint32_t nf = read_pod<uint32_t>(f);
  prochand::OracleTemplate tpl;
  tpl.mesh.vertices.resize(nv);
  for (auto& v : tpl.mesh.vertices) {
    v.x = read_pod<double>(f);
    v.y = read_pod<double>(f);
    v.z = read_pod<double>(f);
  }
  tpl.mesh.faces.resize(nf);
  for (auto& face : tpl.mesh.faces)
    for (int k = 0; k < 3; ++k) face[size_t(k)] = read_pod<int32_t>(f);
  tpl.weights.resize(nv);
  for (auto& w : tpl.weights)
    for (double& v : w) v = read_pod<double>(f);
  return tpl;
}

// ---- Dataset ----

Dataset synthesize_dataset(const SynthSettings& s) {
  Dataset ds;
  ds.seed = s.seed;
  const prochand::ProcHandModel mean_model = prochand::ProcHandModel::mean();
  ds.mean_template = prochand::template_with_skinning(mean_model, s.template_grid, s.threads);
  const auto mean_frames = skel::part_frames(mean_model.canonical);

  Rng root(s.seed);
  // Streams: 1 = train identities, 2 = train poses, 3 = test identities,
  // 4 = test poses, 5 = scan sampling.
  auto identity_seed = [&](bool test, int index) {
    return root.split(test ? 3 : 1).split(uint64_t(index)).seed();
  };

  struct Job {
    bool test;
    int identity_index, pose_index, flat_index;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < s.train_identities; ++i)
    for (int p = 0; p < s.train_poses; ++p)
      jobs.push_back({false, i, p, int(jobs.size())});
  const int n_train = int(jobs.size());
  for (int t = 0; t < s.test_pairs; ++t) jobs.push_back({true, t, t, int(jobs.size())});

  ds.train.resize(size_t(n_train));
  ds.test.resize(size_t(s.test_pairs));
  parallel_for(jobs.size(), s.threads, [&](std::size_t ji) {
    const Job& job = jobs[ji];
    const uint64_t id_seed = identity_seed(job.test, job.identity_index);
    const prochand::ProcHandModel model =
        prochand::ProcHandModel::make(prochand::HandIdentity::from_seed(id_seed));
    prochand::PoseSampler sampler;
    sampler.flex_min = s.flex_min;
    sampler.flex_max = s.flex_max;
    sampler.abd_max = s.abd_max;
    sampler.seed = root.split(job.test ? 4 : 2).seed();
    const skel::Skeleton posed = sampler.sample(model.canonical, uint64_t(job.pose_index));
    const uint64_t scan_seed = root.split(5).split(uint64_t(job.flat_index)).seed();
    auto scan = prochand::sample_scan(model, posed, ds.mean_template, mean_frames,
                                      s.points_per_scan, s.corr_per_scan, scan_seed);
    if (job.test)
      ds.test[size_t(job.identity_index)] = std::move(scan);
    else
      ds.train[size_t(job.flat_index)] = std::move(scan);
  });
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream mf(fs::path(dir) / "manifest.txt");
  if (!mf) throw DataError("cannot write dataset manifest in " + dir);
  mf << "format = phrit-dataset-1\n";
  mf << "seed = " << ds.seed << "\n";
  mf << "n_train = " << ds.train.size() << "\n";
  mf << "n_test = " << ds.test.size() << "\n";
  mf.close();
  save_oracle_template(ds.mean_template, (fs::path(dir) / "template.bin").string());
  char name[64];
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    std::snprintf(name, sizeof(name), "train_%04zu.bin", i);
    save_scan(ds.train[i], (fs::path(dir) / name).string());
  }
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    std::snprintf(name, sizeof(name), "test_%04zu.bin", i);
    save_scan(ds.test[i], (fs::path(dir) / name).string());
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const cfg::Config mf = cfg::Config::load((fs::path(dir) / "manifest.txt").string());
  if (mf.get_string("format", "") != "phrit-dataset-1")
    throw DataError("not a phrit dataset directory: " + dir);
  Dataset ds;
  ds.seed = uint64_t(mf.get_int64("seed", 0));
  const int n_train = mf.get_int("n_train", 0);
  const int n_test = mf.get_int("n_test", 0);
  ds.mean_template = load_oracle_template((fs::path(dir) / "template.bin").string());
  char name[64];
  for (int i = 0; i < n_train; ++i) {
    std::snprintf(name, sizeof(name), "train_%04d.bin", i);
    ds.train.push_back(load_scan((fs::path(dir) / name).string()));
  }
  for (int i = 0; i < n_test; ++i) {
    std::snprintf(name, sizeof(name), "test_%04d.bin", i);
    ds.test.push_back(load_scan((fs::path(dir) / name).string()));
  }
  return ds;
}

}  // namespace phrit::io
