// Command-line entry point: training, tracking, evaluation, benchmarking,
// parameter audits, attention export, and synthetic-data generation.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "smat/bench.hpp"
#include "smat/checkpoint.hpp"
#include "smat/config.hpp"
#include "smat/gradcheck.hpp"
#include "smat/metrics.hpp"
#include "smat/train.hpp"

namespace fs = std::filesystem;
using namespace smat;

namespace {

ModelConfig config_from_flags(const std::string& preset,
                              const std::string& variant,
                              const std::string& attention,
                              std::uint64_t seed) {
  ModelConfig cfg = ModelConfig::preset(preset);
  cfg.variant = parse_fusion_variant(variant);
  cfg.attention = parse_attention_kind(attention);
  cfg.seed = seed;
  return cfg;
}

TrackModelT<float> model_from_checkpoint(const std::string& path) {
  auto ckpt = load_checkpoint(path);
  auto meta = checkpoint_meta(ckpt);
  const char* presets[] = {"desk", "mini", "full"};
  if (meta.preset < 0 || meta.preset > 2)
    throw std::runtime_error("checkpoint carries unknown preset code " +
                             std::to_string(meta.preset));
  ModelConfig cfg = ModelConfig::preset(presets[meta.preset]);
  cfg.variant = (FusionVariant)meta.variant;
  cfg.attention =
      meta.attention ? AttentionKind::Standard : AttentionKind::Separable;
  auto model = make_track_model<float>(cfg);
  auto reg = build_registry(model);
  load_into_registry(ckpt, reg);
  return model;
}

struct SequenceOnDisk {
  std::string name;
  std::vector<std::string> frame_paths;
  std::vector<BoundingBox> gt;
};

SequenceOnDisk read_sequence_dir(const fs::path& dir) {
  SequenceOnDisk seq;
  seq.name = dir.filename().string();
  seq.gt = load_annotations((dir / "groundtruth.txt").string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    auto stem = e.path().filename().string();
    if (stem.rfind("frame_", 0) != 0) continue;
    if (ext == ".ppm" || (ext == ".png" && png_supported()))
      seq.frame_paths.push_back(e.path().string());
  }
  std::sort(seq.frame_paths.begin(), seq.frame_paths.end());
  if (seq.frame_paths.empty())
    throw std::runtime_error("no frame_*.ppm files under " + dir.string());
  if (seq.frame_paths.size() != seq.gt.size())
    throw std::runtime_error(dir.string() + ": " +
                             std::to_string(seq.frame_paths.size()) +
                             " frames but " + std::to_string(seq.gt.size()) +
                             " groundtruth boxes");
  return seq;
}

// Annotation files beneath a path: a lone .txt file, a directory of .txt
// files, or a directory of clip directories holding groundtruth.txt.
std::vector<std::pair<std::string, fs::path>> annotation_files(
    const fs::path& root) {
  std::vector<std::pair<std::string, fs::path>> out;
  if (fs::is_regular_file(root)) {
    out.emplace_back(root.stem().string(), root);
    return out;
  }
  if (!fs::is_directory(root))
    throw std::runtime_error("no such file or directory: " + root.string());
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(root))
    entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& p : entries) {
    if (fs::is_regular_file(p) && p.extension() == ".txt")
      out.emplace_back(p.stem().string(), p);
    else if (fs::is_directory(p) && fs::exists(p / "groundtruth.txt"))
      out.emplace_back(p.filename().string(), p / "groundtruth.txt");
  }
  return out;
}

fs::path matching_annotation(const fs::path& root, const std::string& name) {
  if (fs::is_regular_file(root)) return root;  // single-clip pairing
  if (fs::exists(root / (name + ".txt"))) return root / (name + ".txt");
  if (fs::exists(root / name / "groundtruth.txt"))
    return root / name / "groundtruth.txt";
  throw std::runtime_error("no annotation for clip '" + name + "' under " +
                           root.string());
}

std::vector<BoundingBox> track_sequence(const TrackModelT<float>& model,
                                        const SequenceOnDisk& seq,
                                        bool window) {
  TrackerOptions opt;
  opt.window = window;
  Tracker tr(&model, opt);
  std::vector<BoundingBox> pred;
  for (std::size_t i = 0; i < seq.frame_paths.size(); ++i) {
    Image frame = read_image(seq.frame_paths[i]);
    if (i == 0) tr.init(frame, seq.gt[0]);
    pred.push_back(tr.track_frame(frame));
  }
  return pred;
}

// in-memory variant used for synthetic evaluation
std::vector<BoundingBox> track_sequence(const TrackModelT<float>& model,
                                        const SynthSequence& seq,
                                        bool window) {
  TrackerOptions opt;
  opt.window = window;
  Tracker tr(&model, opt);
  std::vector<BoundingBox> pred;
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    if (i == 0) tr.init(seq.frames[0], seq.boxes[0]);
    pred.push_back(tr.track_frame(seq.frames[i]));
  }
  return pred;
}

void write_sequence_dir(const SynthSequence& seq, const fs::path& dir) {
  fs::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    std::snprintf(name, sizeof name, "frame_%04zu.ppm", i);
    write_ppm((dir / name).string(), seq.frames[i]);
  }
  save_annotations((dir / "groundtruth.txt").string(), seq.boxes);
}

// apply a key=value config file beneath explicit command-line flags
void apply_train_config(const ConfigMap& file, CLI::App* cmd,
                        TrainConfig& tc) {
  auto absent = [&](const char* flag) { return cmd->count(flag) == 0; };
  if (absent("--epochs"))
    tc.epochs = (int)config_get_int(file, "epochs", tc.epochs);
  if (absent("--pairs"))
    tc.pairs_per_epoch =
        (int)config_get_int(file, "pairs_per_epoch", tc.pairs_per_epoch);
  if (absent("--batch"))
    tc.batch_size = (int)config_get_int(file, "batch_size", tc.batch_size);
  if (absent("--sequences"))
    tc.n_sequences = (int)config_get_int(file, "n_sequences", tc.n_sequences);
  if (absent("--lr")) tc.lr = config_get_num(file, "lr", tc.lr);
  if (absent("--wd"))
    tc.weight_decay = config_get_num(file, "weight_decay", tc.weight_decay);
  if (absent("--seed"))
    tc.seed = (std::uint64_t)config_get_int(file, "seed", (long long)tc.seed);
  if (absent("--frame-side"))
    tc.synth.frame_side =
        (int)config_get_int(file, "frame_side", tc.synth.frame_side);
  if (absent("--target-size"))
    tc.synth.target_size =
        config_get_num(file, "target_size", tc.synth.target_size);
  if (absent("--synth-frames"))
    tc.synth.n_frames =
        (int)config_get_int(file, "n_frames", tc.synth.n_frames);
  if (absent("--motion"))
    tc.synth.motion = config_get_num(file, "motion", tc.synth.motion);
}

int run_gradcheck(std::uint64_t seed, double eps, double tol);

std::map<std::string, long long> group_params(
    const ParamRegistry<float>& reg) {
  std::map<std::string, long long> groups;
  for (const auto& e : reg.entries) {
    // group by the first two dotted components, e.g. backbone.stage2
    auto p1 = e.name.find('.');
    auto p2 = p1 == std::string::npos ? p1 : e.name.find('.', p1 + 1);
    std::string key =
        p2 == std::string::npos ? e.name : e.name.substr(0, p2);
    long long n = 1;
    for (int dim : e.tensor.shape()) n *= dim;
    groups[key] += n;
  }
  return groups;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lightweight separable-attention tracker"};
  app.require_subcommand(1);

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model on synthetic clips");
  std::string t_preset = "desk", t_variant = "D", t_attn = "separable";
  std::string t_out = "model.ckpt", t_csv, t_config;
  TrainConfig tc;
  std::uint64_t t_seed = 1;
  bool t_verbose = false;
  train->add_option("--preset", t_preset, "desk|mini|full");
  train->add_option("--variant", t_variant, "fusion wiring A|B|C|D");
  train->add_option("--attention", t_attn, "separable|standard");
  train->add_option("--epochs", tc.epochs, "training epochs");
  train->add_option("--pairs", tc.pairs_per_epoch, "pairs per epoch");
  train->add_option("--batch", tc.batch_size, "pairs per optimizer step");
  train->add_option("--sequences", tc.n_sequences, "synthetic clips");
  train->add_option("--lr", tc.lr, "peak learning rate");
  train->add_option("--wd", tc.weight_decay, "decoupled weight decay");
  train->add_option("--seed", t_seed, "master seed");
  train->add_option("--synth-frames", tc.synth.n_frames, "frames per clip");
  train->add_option("--frame-side", tc.synth.frame_side, "clip frame side");
  train->add_option("--target-size", tc.synth.target_size, "target side px");
  train->add_option("--motion", tc.synth.motion, "target walk step");
  train->add_option("--out", t_out, "checkpoint path");
  train->add_option("--loss-csv", t_csv, "per-step loss table path");
  train->add_option("--config", t_config, "key=value config file");
  train->add_flag("--verbose", t_verbose, "per-epoch progress on stderr");

  // ---- track ----
  auto* track = app.add_subcommand("track", "run the tracker over one clip");
  std::string k_ckpt, k_seq, k_out = "predictions.txt";
  bool k_nowin = false;
  track->add_option("--checkpoint", k_ckpt, "trained weights")->required();
  track->add_option("--seq", k_seq, "clip directory")->required();
  track->add_option("--out", k_out, "predicted boxes file");
  track->add_flag("--no-window", k_nowin, "disable score windowing");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "metrics over clips, JSON on stdout");
  std::string e_ckpt, e_data, e_pred, e_gt;
  int e_synth = 0;
  std::uint64_t e_seed = 100;
  int e_frames = 20, e_side = 320;
  double e_target = 64;
  bool e_nowin = false;
  eval->add_option("--pred", e_pred,
                   "saved predictions (.txt file or directory); scores them "
                   "against --gt without running a model");
  eval->add_option("--gt", e_gt, "groundtruth boxes matching --pred");
  eval->add_option("--checkpoint", e_ckpt, "trained weights (tracking modes)");
  eval->add_option("--data", e_data, "directory of clip directories");
  eval->add_option("--synth", e_synth, "evaluate on N synthetic clips");
  eval->add_option("--seed", e_seed, "synthetic clip seed");
  eval->add_option("--frames", e_frames, "frames per synthetic clip");
  eval->add_option("--side", e_side, "synthetic frame side");
  eval->add_option("--target-size", e_target, "synthetic target side");
  eval->add_flag("--no-window", e_nowin, "disable score windowing");

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "attention timing, CSV on stdout");
  std::vector<int> b_ks = {256, 512, 1024, 2048, 4096};
  int b_d = 48, b_reps = 5, b_vreps = 101, b_kz = 64, b_kx = 256;
  bool b_variants = false;
  bench->add_option("--k", b_ks, "token counts")->delimiter(',');
  bench->add_option("--d", b_d, "token width");
  bench->add_option("--reps", b_reps, "timed repetitions per point");
  bench->add_flag("--variants", b_variants, "also time fusion wirings A-D");
  bench->add_option("--variant-reps", b_vreps, "repetitions per wiring");
  bench->add_option("--kz", b_kz, "template tokens for wiring timings");
  bench->add_option("--kx", b_kx, "search tokens for wiring timings");

  // ---- gradcheck ----
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  std::uint64_t g_seed = 5;
  double g_eps = 1e-5, g_tol = 1e-4;
  gc->add_option("--seed", g_seed, "rng seed");
  gc->add_option("--eps", g_eps, "finite-difference step");
  gc->add_option("--tol", g_tol, "max relative error");

  // ---- params ----
  auto* params = app.add_subcommand("params", "per-module parameter counts");
  std::string p_preset = "desk", p_variant = "D", p_attn = "separable";
  params->add_option("--preset", p_preset, "desk|mini|full");
  params->add_option("--variant", p_variant, "fusion wiring A|B|C|D");
  params->add_option("--attention", p_attn, "separable|standard");

  // ---- export-attn ----
  auto* ex = app.add_subcommand("export-attn",
                                "write per-stage attention maps of one frame");
  std::string x_ckpt, x_seq, x_prefix = "attn";
  std::string x_preset = "desk", x_variant = "D", x_attn = "separable";
  int x_frame = 1;
  std::uint64_t x_seed = 100;
  ex->add_option("--checkpoint", x_ckpt, "trained weights (random if absent)");
  ex->add_option("--seq", x_seq, "clip directory (synthetic if absent)");
  ex->add_option("--frame", x_frame, "tracked frame index to export");
  ex->add_option("--out", x_prefix, "output path prefix");
  ex->add_option("--preset", x_preset, "model preset when untrained");
  ex->add_option("--variant", x_variant, "fusion wiring when untrained");
  ex->add_option("--attention", x_attn, "attention kind when untrained");
  ex->add_option("--seed", x_seed, "seed for weights and synthetic clip");

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "write a synthetic clip to disk");
  std::string s_out;
  SynthConfig sc;
  synth->add_option("--out", s_out, "output directory")->required();
  synth->add_option("--seed", sc.seed, "clip seed");
  synth->add_option("--frames", sc.n_frames, "frame count");
  synth->add_option("--side", sc.frame_side, "frame side px");
  synth->add_option("--target-size", sc.target_size, "initial target side");
  synth->add_option("--motion", sc.motion, "walk step scale");
  synth->add_option("--scale-jitter", sc.scale_jitter, "size drift scale");
  synth->add_flag("--ellipse", sc.ellipse, "elliptic target");
  synth->add_flag("--occluder", sc.occluder, "mid-sequence occluder bar");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train)) {
      if (!t_config.empty())
        apply_train_config(load_config(t_config), train, tc);
      tc.seed = train->count("--seed") ? t_seed : tc.seed;
      tc.loss_csv_path = t_csv;
      tc.checkpoint_path = t_out;
      tc.verbose = t_verbose;
      ModelConfig mc = config_from_flags(t_preset, t_variant, t_attn, tc.seed);
      auto model = make_track_model<float>(mc);
      auto res = train_model(model, tc);
      std::cout << "steps " << res.steps << "\nfirst_loss " << res.first_loss
                << "\nfinal_loss " << res.final_loss << "\ncheckpoint "
                << t_out << "\n";
    } else if (app.got_subcommand(track)) {
      auto model = model_from_checkpoint(k_ckpt);
      auto seq = read_sequence_dir(k_seq);
      auto pred = track_sequence(model, seq, !k_nowin);
      save_annotations(k_out, pred);
      std::cerr << seq.name << ": " << pred.size() << " boxes -> " << k_out
                << "\n";
    } else if (app.got_subcommand(eval)) {
      std::vector<std::vector<BoundingBox>> pred, gt;
      std::vector<std::string> names;
      if (!e_pred.empty() || !e_gt.empty()) {
        if (e_pred.empty() || e_gt.empty())
          throw std::runtime_error("eval: --pred and --gt go together");
        auto files = annotation_files(e_pred);
        if (files.empty())
          throw std::runtime_error("eval: no prediction files under " +
                                   e_pred);
        for (const auto& [name, pfile] : files) {
          pred.push_back(load_annotations(pfile.string()));
          gt.push_back(
              load_annotations(matching_annotation(e_gt, name).string()));
          names.push_back(name);
        }
        std::cout << metrics_to_json(compute_metrics(pred, gt, names)) << "\n";
        return 0;
      }
      if (e_ckpt.empty())
        throw std::runtime_error("eval: give --pred/--gt or --checkpoint");
      auto model = model_from_checkpoint(e_ckpt);
      if (!e_data.empty()) {
        std::vector<fs::path> dirs;
        for (const auto& e : fs::directory_iterator(e_data))
          if (e.is_directory()) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) {
          auto seq = read_sequence_dir(d);
          pred.push_back(track_sequence(model, seq, !e_nowin));
          gt.push_back(seq.gt);
          names.push_back(seq.name);
        }
      } else {
        int n = e_synth > 0 ? e_synth : 3;
        for (int i = 0; i < n; ++i) {
          SynthConfig c;
          c.seed = e_seed + 31 * (std::uint64_t)i;
          c.n_frames = e_frames;
          c.frame_side = e_side;
          c.target_size = e_target;
          c.ellipse = (i % 2) == 1;
          auto seq = synth_sequence(c);
          pred.push_back(track_sequence(model, seq, !e_nowin));
          gt.push_back(seq.boxes);
          names.push_back("synth" + std::to_string(i));
        }
      }
      std::cout << metrics_to_json(compute_metrics(pred, gt, names)) << "\n";
    } else if (app.got_subcommand(bench)) {
      auto pts = bench_attention(b_ks, b_d, b_reps);
      std::cout << bench_csv(pts);
      if (b_ks.size() >= 2)
        std::cout << "# separable_slope " << bench_slope(pts, "separable")
                  << "\n# standard_slope " << bench_slope(pts, "standard")
                  << "\n";
      if (b_variants) {
        std::cout << "variant,median_ms\n";
        for (const auto& r : bench_fusion_variants(b_kz, b_kx, b_d, b_vreps))
          std::cout << fusion_variant_name(r.variant) << "," << r.median_ms
                    << "\n";
      }
    } else if (app.got_subcommand(gc)) {
      return run_gradcheck(g_seed, g_eps, g_tol);
    } else if (app.got_subcommand(params)) {
      ModelConfig mc = config_from_flags(p_preset, p_variant, p_attn, 1);
      auto model = make_track_model<float>(mc);
      auto reg = build_registry(model);
      for (const auto& [name, count] : group_params(reg))
        std::cout << name << " " << count << "\n";
      std::cout << "correlation 0 (parameter-free)\n";
      long long total = reg.total_count();
      std::cout << "total " << total << "\n";
      if (mc.preset_code == 2) {
        double ref = 3.8e6;
        std::cout << "reference 3800000\ndeviation "
                  << 100.0 * ((double)total - ref) / ref << "%\n";
      }
    } else if (app.got_subcommand(ex)) {
      TrackModelT<float> model =
          !x_ckpt.empty()
              ? model_from_checkpoint(x_ckpt)
              : make_track_model<float>(
                    config_from_flags(x_preset, x_variant, x_attn, x_seed));
      TrackerOptions opt;
      opt.capture_traces = true;
      Tracker tr(&model, opt);
      std::vector<AttentionExport> files;
      if (!x_seq.empty()) {
        auto seq = read_sequence_dir(x_seq);
        if (x_frame < 1 || x_frame >= (int)seq.frame_paths.size())
          throw std::runtime_error("--frame out of range (1.." +
                                   std::to_string(seq.frame_paths.size() - 1) +
                                   ")");
        for (int i = 0; i <= x_frame; ++i) {
          Image frame = read_image(seq.frame_paths[i]);
          if (i == 0) {
            tr.init(frame, seq.gt[0]);
            tr.track_frame(frame);  // init echo
          } else {
            tr.track_frame(frame);
          }
        }
      } else {
        SynthConfig c;
        c.seed = x_seed;
        c.n_frames = std::max(x_frame + 1, 2);
        auto seq = synth_sequence(c);
        tr.init(seq.frames[0], seq.boxes[0]);
        tr.track_frame(seq.frames[0]);
        for (int i = 1; i <= x_frame; ++i) tr.track_frame(seq.frames[i]);
      }
      files = export_attention_maps(tr.last_traces(), x_prefix);
      for (const auto& f : files)
        std::cout << f.csv_path << " " << f.pgm_path << " (" << f.rows << "x"
                  << f.cols << ")\n";
    } else if (app.got_subcommand(synth)) {
      write_sequence_dir(synth_sequence(sc), s_out);
      std::cout << s_out << ": " << sc.n_frames << " frames\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

namespace {

int run_gradcheck(std::uint64_t seed, double eps, double tol) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  auto fill = [&](TensorD t) {
    for (auto& v : t.vec()) v = u(rng);
    t.set_requires_grad(true);
    return t;
  };
  int failures = 0;
  auto report = [&](const char* name, double err) {
    bool ok = err < tol;
    if (!ok) ++failures;
    std::cout << name << " max_rel_err " << err << (ok ? " ok" : " FAIL")
              << "\n";
  };

  {
    auto x = fill(TensorD::zeros({6, 4}));
    auto p = make_separable_attention<double>(4, rng);
    report("separable_layer", grad_check<double>(
        [&](const TensorD& t) { return sum_all(separable_layer_forward(t, p)); },
        x, eps));
  }
  {
    auto x = fill(TensorD::zeros({5, 4}));
    auto p = make_standard_attention<double>(4, rng);
    report("standard_layer", grad_check<double>(
        [&](const TensorD& t) {
          return sum_all(standard_attention_forward(t, p));
        },
        x, eps));
  }
  {
    auto x = fill(TensorD::zeros({6, 6, 3}));
    auto p = make_inverted_residual<double>(3, 5, 1, 2.0, rng);
    report("inverted_residual", grad_check<double>(
        [&](const TensorD& t) {
          return sum_all(inverted_residual_forward(t, p));
        },
        x, eps));
  }
  {
    auto z = fill(TensorD::zeros({4, 4}));
    auto x = fill(TensorD::zeros({8, 4}));
    auto p = make_fusion_params<double>(FusionVariant::D, 4, rng);
    report("mixed_fusion", grad_check<double>(
        [&](const TensorD& t) {
          auto [zf, xf] = fusion_forward(p, z, t);
          return add(sum_all(zf), sum_all(xf));
        },
        x, eps));
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace
