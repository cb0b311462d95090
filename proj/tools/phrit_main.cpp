// phrit: dataset synthesis, training, template extraction, skeleton-driven
// inference, point-cloud fitting, evaluation, and the ablation matrix.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "phrit/config.hpp"
#include "phrit/field.hpp"
#include "phrit/io.hpp"
#include "phrit/metrics.hpp"
#include "phrit/parallel.hpp"
#include "phrit/pipeline.hpp"
#include "phrit/rng.hpp"

using namespace phrit;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "phrit 1.0";
constexpr int kFormatVersion = 1;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = hardware_threads();
  uint64_t seed = 7;
};

cfg::Config resolve_config(const CommonArgs& args) {
  cfg::Config c;
  if (!args.config_path.empty()) c = cfg::Config::load(args.config_path);
  for (const auto& o : args.overrides) c.apply_override(o);
  return c;
}

nets::NetConfig net_config_from(const cfg::Config& c) {
  nets::NetConfig cfg;
  cfg.refnet_hidden = c.get_int_list("refnet_hidden", cfg.refnet_hidden);
  cfg.deform_hidden = c.get_int_list("deform_hidden", cfg.deform_hidden);
  cfg.encoder_hidden = c.get_int_list("encoder_hidden", cfg.encoder_hidden);
  cfg.dgamma = c.get_int("dgamma", cfg.dgamma);
  cfg.skip_stages = c.get_int("skip_stages", cfg.skip_stages);
  cfg.holistic = c.get_bool("holistic_stages", cfg.holistic);
  cfg.act = nets::activation_from_string(c.get_string("activation", "softplus"));
  cfg.refnet_act = nets::activation_from_string(c.get_string("refnet_activation", "softplus"));
  cfg.softplus_beta = c.get_double("softplus_beta", cfg.softplus_beta);
  cfg.sine_omega = c.get_double("sine_omega", cfg.sine_omega);
  cfg.geo_init_radius = c.get_double("geo_init_radius", cfg.geo_init_radius);
  cfg.gamma_init_std = c.get_double("gamma_init_std", cfg.gamma_init_std);
  cfg.input_center = prochand::ProcHandModel::mean().aabb().center();
  return cfg;
}

field::TrainConfig train_config_from(const cfg::Config& c, const CommonArgs& args) {
  field::TrainConfig cfg;
  cfg.batch_scans = c.get_int("batch_scans", cfg.batch_scans);
  cfg.lr = c.get_double("lr", cfg.lr);
  cfg.decay_epochs = c.get_int_list("lr_decay_epochs", cfg.decay_epochs);
  cfg.epochs = c.get_int("epochs", cfg.epochs);
  cfg.points_per_part = c.get_int("points_per_part", cfg.points_per_part);
  cfg.off_per_scan = c.get_int("off_surface_per_scan", cfg.off_per_scan);
  cfg.igr_per_scan = c.get_int("igr_per_scan", cfg.igr_per_scan);
  cfg.alpha_o = c.get_double("alpha_o", cfg.alpha_o);
  cfg.weights.sdf = c.get_double("w_sdf", cfg.weights.sdf);
  cfg.weights.norm = c.get_double("w_norm", cfg.weights.norm);
  cfg.weights.cycle = c.get_double("w_cycle", cfg.weights.cycle);
  cfg.weights.mano = c.get_double("w_mano", cfg.weights.mano);
  cfg.weights.regu = c.get_double("w_regu", cfg.weights.regu);
  cfg.weights.off = c.get_double("w_off", cfg.weights.off);
  cfg.weights.igr = c.get_double("w_igr", cfg.weights.igr);
  cfg.flags.disable_norm = c.get_bool("disable_norm", false);
  cfg.flags.holistic_stages = c.get_bool("holistic_stages", false);
  cfg.flags.dense_mano_plus = c.get_bool("dense_mano_plus", false);
  cfg.dense_factor = c.get_int("dense_factor", cfg.dense_factor);
  cfg.checkpoint_interval = c.get_int("checkpoint_interval", cfg.checkpoint_interval);
  cfg.threads = args.threads;
  cfg.seed = uint64_t(c.get_int64("seed", (long long)args.seed));
  return cfg;
}

// Every run writes a manifest naming the command, versions, seeds and the
// resolved configuration, enough to reproduce it exactly.
void write_manifest(const std::string& dir, const std::string& command,
                    const cfg::Config& resolved, const CommonArgs& args) {
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / "run_manifest.txt");
  f << "tool = " << kVersion << "\n";
  f << "format_version = " << kFormatVersion << "\n";
  f << "command = " << command << "\n";
  f << "seed = " << args.seed << "\n";
  f << "threads = " << args.threads << "\n";
  f << "# resolved configuration\n";
  f << resolved.dump();
}

mc::GridSpec template_grid(const cfg::Config& c) {
  const int res = c.get_int("template_grid", 128);
  const geom::Aabb box = prochand::ProcHandModel::mean().aabb().inflated(0.10);
  const Vec3 ext = box.extent();
  const double cell = std::max({ext.x, ext.y, ext.z}) / double(res - 1);
  mc::GridSpec grid;
  grid.bounds = box;
  grid.nx = int(std::ceil(ext.x / cell)) + 1;
  grid.ny = int(std::ceil(ext.y / cell)) + 1;
  grid.nz = int(std::ceil(ext.z / cell)) + 1;
  return grid;
}

std::vector<double> gamma_for(const nets::NetworkBundle& bundle, const std::string& spec) {
  if (spec == "mean") return bundle.mean_gamma();
  if (spec.rfind("id:", 0) == 0) {
    const uint64_t id = std::stoull(spec.substr(3));
    const int row = bundle.gamma_row(id);
    if (row < 0) throw DataError("identity " + spec.substr(3) + " not in the latent table");
    auto g = bundle.gamma(row);
    return {g.begin(), g.end()};
  }
  throw ConfigError("gamma must be 'mean' or 'id:<seed>'");
}

geom::PointCloud dense_scan_cloud(const prochand::SyntheticScan& scan, int n, uint64_t seed) {
  const auto model =
      prochand::ProcHandModel::make(prochand::HandIdentity::from_seed(scan.identity.seed));
  const auto caps = prochand::posed_capsules(model, scan.skeleton);
  geom::Aabb box{scan.skeleton.keypoints[0], scan.skeleton.keypoints[0]};
  for (const auto& p : scan.skeleton.keypoints) box.expand(p);
  box = box.inflated(0.6);
  Rng rng(seed);
  geom::PointCloud out;
  while (int(out.points.size()) < n) {
    Vec3 x{rng.uniform(box.min.x, box.max.x), rng.uniform(box.min.y, box.max.y),
           rng.uniform(box.min.z, box.max.z)};
    const auto p = prochand::project_to_surface(caps, x);
    if (p) {
      out.points.push_back(*p);
      out.normals.push_back(normalized(prochand::sdf_grad(caps, *p).grad));
    }
  }
  return out;
}

struct EvalRow {
  std::string scan;
  double chamfer, normal_consistency, iou, v2v_rs, v2s_rs, v2v_sr, v2s_sr;
};

EvalRow evaluate_scan(const pipeline::CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                      const prochand::SyntheticScan& scan, const std::string& name,
                      bool rigid_only, int samples, int iou_res, int threads, uint64_t seed) {
  pipeline::InferOptions opt;
  opt.rigid_only = rigid_only;
  opt.threads = threads;
  const auto rec = pipeline::infer(tpl, bundle, scan.skeleton, bundle.mean_gamma(), opt);

  geom::PointCloud recon_cloud = geom::sample_surface(rec.mesh, size_t(samples), seed);
  const geom::PointCloud scan_cloud = dense_scan_cloud(scan, samples, seed ^ 0x77);

  // Oracle posed mesh for IoU / V2S.
  const auto model =
      prochand::ProcHandModel::make(prochand::HandIdentity::from_seed(scan.identity.seed));
  const auto caps = prochand::posed_capsules(model, scan.skeleton);
  geom::Aabb box{scan.skeleton.keypoints[0], scan.skeleton.keypoints[0]};
  for (const auto& p : scan.skeleton.keypoints) box.expand(p);
  box = box.inflated(0.35);
  const Vec3 ext = box.extent();
  const double cell = std::max({ext.x, ext.y, ext.z}) / 95.0;
  mc::GridSpec grid{box, int(std::ceil(ext.x / cell)) + 1, int(std::ceil(ext.y / cell)) + 1,
                    int(std::ceil(ext.z / cell)) + 1};
  const geom::TriMesh scan_mesh = mc::marching_cubes(
      [&](const Vec3& p) { return prochand::sdf(caps, p); }, grid, 0.0, threads);

  EvalRow row;
  row.scan = name;
  row.chamfer = metrics::chamfer_l1(recon_cloud, scan_cloud);
  row.normal_consistency = metrics::normal_consistency(recon_cloud, scan_cloud);
  row.iou = metrics::iou_voxel(rec.mesh, scan_mesh, iou_res);
  row.v2v_rs = metrics::v2v(rec.mesh.vertices, scan_mesh.vertices);
  row.v2s_rs = metrics::v2s(rec.mesh.vertices, scan_mesh);
  row.v2v_sr = metrics::v2v(scan_mesh.vertices, rec.mesh.vertices);
  row.v2s_sr = metrics::v2s(scan_mesh.vertices, rec.mesh);
  return row;
}

// ---- Commands ----

int cmd_synth(const CommonArgs& args, const std::string& out_dir) {
  const cfg::Config c = resolve_config(args);
  io::SynthSettings s;
  s.train_identities = c.get_int("train_identities", s.train_identities);
  s.train_poses = c.get_int("train_poses", s.train_poses);
  s.test_pairs = c.get_int("test_pairs", s.test_pairs);
  s.points_per_scan = c.get_int("points_per_scan", s.points_per_scan);
  s.corr_per_scan = c.get_int("corr_per_scan", s.corr_per_scan);
  s.template_grid = c.get_int("oracle_template_grid", 64);
  s.flex_min = c.get_double("flex_min", s.flex_min);
  s.flex_max = c.get_double("flex_max", s.flex_max);
  s.abd_max = c.get_double("abd_max", s.abd_max);
  s.seed = uint64_t(c.get_int64("seed", (long long)args.seed));
  s.threads = args.threads;

  std::printf("synthesizing %dx%d train + %d test scans into %s\n", s.train_identities,
              s.train_poses, s.test_pairs, out_dir.c_str());
  const io::Dataset ds = io::synthesize_dataset(s);
  io::save_dataset(ds, out_dir);
  write_manifest(out_dir, "synth", c, args);
  std::printf("wrote %zu train and %zu test scans\n", ds.train.size(), ds.test.size());
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_dir, const std::string& out_dir) {
  const cfg::Config c = resolve_config(args);
  const io::Dataset ds = io::load_dataset(data_dir);
  nets::NetConfig ncfg = net_config_from(c);
  field::TrainConfig tcfg = train_config_from(c, args);
  nets::NetworkBundle bundle =
      nets::init_networks(ncfg, field::unique_identity_seeds(ds), tcfg.seed);

  fs::create_directories(out_dir);
  write_manifest(out_dir, "train", c, args);
  std::ofstream log(fs::path(out_dir) / "log.csv");
  log << "epoch,lr,loss_sdf,loss_norm,loss_cycle,loss_mano,loss_regu,loss_o,loss_igr,total,"
         "wall_s\n";
  log.precision(17);
  std::printf("training: %d epochs, %zu scans, lr %g, weights w_S=%g w_n=%g w_c=%g w_m=%g "
              "w_r=%g w_O=%g w_I=%g\n",
              tcfg.epochs, ds.train.size(), tcfg.lr, tcfg.weights.sdf, tcfg.weights.norm,
              tcfg.weights.cycle, tcfg.weights.mano, tcfg.weights.regu, tcfg.weights.off,
              tcfg.weights.igr);

  field::TrainCallbacks cb;
  cb.on_epoch = [&](const field::EpochLog& e) {
    log << e.epoch << "," << e.lr << "," << e.means.sdf << "," << e.means.norm << ","
        << e.means.cycle << "," << e.means.mano << "," << e.means.regu << "," << e.means.off
        << "," << e.means.igr << "," << e.total << "," << e.wall_s << "\n";
    log.flush();
    if (e.epoch % 10 == 0)
      std::printf("epoch %4d  lr %.2e  total %.5f\n", e.epoch, e.lr, e.total);
  };
  cb.on_checkpoint = [&](int epoch, const nets::NetworkBundle& b) {
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_epoch%04d.bin", epoch);
    io::save_checkpoint(b, (fs::path(out_dir) / name).string());
  };
  field::train(ds, bundle, tcfg, cb);
  io::save_checkpoint(bundle, (fs::path(out_dir) / "final.ckpt").string());
  std::printf("wrote %s\n", (fs::path(out_dir) / "final.ckpt").string().c_str());
  return 0;
}

int cmd_template(const CommonArgs& args, const std::string& ckpt, const std::string& data_dir,
                 const std::string& out_path) {
  const cfg::Config c = resolve_config(args);
  const nets::NetworkBundle bundle = io::load_checkpoint(ckpt);
  const io::Dataset ds = io::load_dataset(data_dir);
  const mc::GridSpec grid = template_grid(c);
  const auto tpl = pipeline::extract_template(
      bundle, grid, {ds.mean_template.mesh, ds.mean_template.weights}, out_path, args.threads);
  std::printf("template: %zu vertices, %zu faces, cached at %s\n", tpl.mesh.vertices.size(),
              tpl.mesh.faces.size(), out_path.c_str());
  return 0;
}

int cmd_infer(const CommonArgs& args, const std::string& ckpt, const std::string& tpl_path,
              const std::string& skeleton_path, const std::string& gamma_spec,
              const std::string& out_obj) {
  const nets::NetworkBundle bundle = io::load_checkpoint(ckpt);
  const pipeline::CanonicalTemplate tpl = pipeline::load_template(tpl_path);
  const skel::Skeleton skeleton = skel::load_skeleton_json(skeleton_path);
  const auto gamma = gamma_for(bundle, gamma_spec);
  pipeline::InferOptions opt;
  opt.threads = args.threads;
  const auto rec = pipeline::infer(tpl, bundle, skeleton, gamma, opt);
  geom::save_obj(rec.mesh, out_obj);
  std::printf("wrote %s (%zu vertices)\n", out_obj.c_str(), rec.mesh.vertices.size());
  return 0;
}

int cmd_fit(const CommonArgs& args, const std::string& ckpt, const std::string& tpl_path,
            const std::string& cloud_path, const std::string& init_skeleton_path, int steps,
            const std::string& out_mesh, const std::string& out_skeleton) {
  const nets::NetworkBundle bundle = io::load_checkpoint(ckpt);
  const pipeline::CanonicalTemplate tpl = pipeline::load_template(tpl_path);
  const geom::PointCloud cloud = geom::load_point_cloud(cloud_path);
  const skel::Skeleton init = skel::load_skeleton_json(init_skeleton_path);

  pipeline::FitOptions opt;
  opt.steps = steps;
  opt.threads = args.threads;
  opt.seed = args.seed;
  const auto fit = pipeline::fit_to_pointcloud(tpl, bundle, cloud, init, opt);
  geom::save_obj(fit.recon.mesh, out_mesh);
  if (!out_skeleton.empty()) skel::save_skeleton_json(fit.skeleton, out_skeleton);
  std::printf("fit objective %.4f mm after %d steps; wrote %s\n", fit.best_loss, steps,
              out_mesh.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt, const std::string& tpl_path,
             const std::string& data_dir, const std::string& out_csv, bool rigid_baseline) {
  const cfg::Config c = resolve_config(args);
  const nets::NetworkBundle bundle = io::load_checkpoint(ckpt);
  const pipeline::CanonicalTemplate tpl = pipeline::load_template(tpl_path);
  const io::Dataset ds = io::load_dataset(data_dir);
  const int samples = c.get_int("eval_samples", 40000);
  const int iou_res = c.get_int("iou_res", 128);

  std::ofstream csv(out_csv);
  if (!csv) throw DataError("cannot open " + out_csv);
  csv << "scan,chamfer_l1_mm,normal_consistency,iou,v2v_recon_to_scan_mm,"
         "v2s_recon_to_scan_mm,v2v_scan_to_recon_mm,v2s_scan_to_recon_mm\n";
  double mean_chamfer = 0;
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "test_%04zu", i);
    const EvalRow row = evaluate_scan(tpl, bundle, ds.test[i], name, rigid_baseline, samples,
                                      iou_res, args.threads, 1000 + i);
    csv << row.scan << "," << row.chamfer << "," << row.normal_consistency << "," << row.iou
        << "," << row.v2v_rs << "," << row.v2s_rs << "," << row.v2v_sr << "," << row.v2s_sr
        << "\n";
    mean_chamfer += row.chamfer;
    std::printf("%s: chamfer %.3f mm, iou %.3f\n", name, row.chamfer, row.iou);
  }
  if (!ds.test.empty())
    std::printf("mean chamfer %.3f mm over %zu scans; wrote %s\n",
                mean_chamfer / double(ds.test.size()), ds.test.size(), out_csv.c_str());
  return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& data_dir, const std::string& out_dir) {
  const cfg::Config base = resolve_config(args);
  const io::Dataset ds = io::load_dataset(data_dir);
  fs::create_directories(out_dir);
  write_manifest(out_dir, "ablate", base, args);

  struct Variant {
    const char* name;
    const char* override_key;  // nullptr for baseline
  };
  const Variant variants[] = {{"baseline", nullptr},
                              {"disable_norm", "disable_norm"},
                              {"holistic_stages", "holistic_stages"},
                              {"dense_mano_plus", "dense_mano_plus"}};

  std::ofstream table(fs::path(out_dir) / "ablation.csv");
  table << "config,chamfer_l1_mm,normal_consistency\n";
  for (const auto& variant : variants) {
    cfg::Config c = base;
    if (variant.override_key) c.apply_override(std::string(variant.override_key) + "=1");
    std::printf("[ablate] training %s...\n", variant.name);
    nets::NetConfig ncfg = net_config_from(c);
    field::TrainConfig tcfg = train_config_from(c, args);
    nets::NetworkBundle bundle =
        nets::init_networks(ncfg, field::unique_identity_seeds(ds), tcfg.seed);
    field::train(ds, bundle, tcfg);
    io::save_checkpoint(bundle,
                        (fs::path(out_dir) / (std::string(variant.name) + ".ckpt")).string());

    const mc::GridSpec grid = template_grid(c);
    const auto tpl = pipeline::extract_template(
        bundle, grid, {ds.mean_template.mesh, ds.mean_template.weights}, "", args.threads);
    double chamfer = 0, nc = 0;
    const int samples = c.get_int("eval_samples", 40000);
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      const EvalRow row = evaluate_scan(tpl, bundle, ds.test[i], "", false, samples, 96,
                                        args.threads, 1000 + i);
      chamfer += row.chamfer;
      nc += row.normal_consistency;
    }
    chamfer /= double(ds.test.size());
    nc /= double(ds.test.size());
    table << variant.name << "," << chamfer << "," << nc << "\n";
    table.flush();
    std::printf("[ablate] %s: chamfer %.3f mm, normal consistency %.4f\n", variant.name,
                chamfer, nc);
  }
  std::printf("wrote %s\n", (fs::path(out_dir) / "ablation.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PHRIT hand model: implicit template + part deformation networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  CommonArgs common;
  app.add_option("--config", common.config_path, "flat key=value configuration file");
  app.add_option("--set", common.overrides, "override config entries (key=value)");
  app.add_option("--threads", common.threads, "worker thread cap");
  app.add_option("--seed", common.seed, "base seed when the config has none");

  std::string out_dir, data_dir, ckpt, tpl_path, skeleton_path, cloud_path;
  std::string gamma_spec = "mean", out_mesh, out_skeleton, out_csv;
  int fit_steps = 300;
  bool rigid_baseline = false;

  auto* synth = app.add_subcommand("synth", "generate a procedural scan dataset");
  synth->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train the networks on a dataset");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "run output directory")->required();

  auto* tmpl = app.add_subcommand("template", "extract and cache the canonical template");
  tmpl->add_option("--ckpt", ckpt, "checkpoint file")->required();
  tmpl->add_option("--data", data_dir, "dataset directory (skinning source)")->required();
  tmpl->add_option("--out", tpl_path, "template cache path")->required();

  auto* infer = app.add_subcommand("infer", "drive the template from a skeleton file");
  infer->add_option("--ckpt", ckpt)->required();
  infer->add_option("--template", tpl_path)->required();
  infer->add_option("--skeleton", skeleton_path, "skeleton json")->required();
  infer->add_option("--gamma", gamma_spec, "mean or id:<seed>");
  infer->add_option("--out", out_mesh, "output OBJ")->required();

  auto* fit = app.add_subcommand("fit", "fit skeleton and shape code to a point cloud");
  fit->add_option("--ckpt", ckpt)->required();
  fit->add_option("--template", tpl_path)->required();
  fit->add_option("--cloud", cloud_path, "PLY or OBJ point cloud")->required();
  fit->add_option("--init-skeleton", skeleton_path)->required();
  fit->add_option("--steps", fit_steps);
  fit->add_option("--out-mesh", out_mesh)->required();
  fit->add_option("--out-skeleton", out_skeleton);

  auto* eval = app.add_subcommand("eval", "metrics table over the test split");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--template", tpl_path)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--out", out_csv, "output CSV")->required();
  eval->add_flag("--rigid-baseline", rigid_baseline,
                 "freeze deformation stages at identity (LBS baseline)");

  auto* ablate = app.add_subcommand("ablate", "run the ablation matrix");
  ablate->add_option("--data", data_dir)->required();
  ablate->add_option("--out", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(common, out_dir);
    if (train->parsed()) return cmd_train(common, data_dir, out_dir);
    if (tmpl->parsed()) return cmd_template(common, ckpt, data_dir, tpl_path);
    if (infer->parsed())
      return cmd_infer(common, ckpt, tpl_path, skeleton_path, gamma_spec, out_mesh);
    if (fit->parsed())
      return cmd_fit(common, ckpt, tpl_path, cloud_path, skeleton_path, fit_steps, out_mesh,
                     out_skeleton);
    if (eval->parsed())
      return cmd_eval(common, ckpt, tpl_path, data_dir, out_csv, rigid_baseline);
    if (ablate->parsed()) return cmd_ablate(common, data_dir, out_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NonFiniteLoss& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const Diverged& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
