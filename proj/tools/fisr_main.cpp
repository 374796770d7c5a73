// Command-line driver: dataset generation, training, evaluation, the
// ablation matrix, the finite-difference gradient suite, and PNG export.

#include <CLI11.hpp>
#include <iostream>

#include "fisr/ablate.hpp"
#include "fisr/gradcheck_suite.hpp"
#include "fisr/trainer.hpp"

namespace {

using namespace fisr;

struct CliOptions {
  NetworkConfig net;
  TrainConfig train;
  std::string config_file;
  std::string conv = "dfc";
  std::string qsm = "on";
  bool no_augment = false;
};

// Network and training flags shared by train/ablate. Flags override the
// --config file, which overrides the built-in defaults.
void add_common_flags(CLI::App* cmd, CliOptions& o) {
  cmd->add_option("--config", o.config_file, "key=value config file");
  cmd->add_option("--channels", o.net.channels, "feature channels");
  cmd->add_option("--feu", o.net.feu_per_ffb, "units per block");
  cmd->add_option("--ffb", o.net.ffb_count, "block count");
  cmd->add_option("--window", o.net.window, "attention window");
  cmd->add_option("--heads", o.net.heads, "attention heads");
  cmd->add_option("--scale", o.net.scale, "upscaling factor");
  cmd->add_option("--conv", o.conv,
                  "conv branch: none|ndc|ldfc|rdfc|adfc|dfc");
  cmd->add_option("--qsm", o.qsm, "quaternion block: on|off");
  cmd->add_option("--dfc-k", o.net.dfc_k, "flow-conv kernel length");
  cmd->add_option("--max-offset", o.net.max_offset, "offset bound");
  cmd->add_option("--lr", o.train.lr, "learning rate");
  cmd->add_option("--batch", o.train.batch, "batch size");
  cmd->add_option("--iterations", o.train.iterations, "training steps");
  cmd->add_option("--ema-decay", o.train.ema_decay, "EMA decay");
  cmd->add_option("--crop", o.train.lr_crop, "LR crop size");
  cmd->add_option("--seed", o.train.seed, "run seed");
  cmd->add_option("--eval-every", o.train.eval_every, "eval interval");
  cmd->add_option("--ckpt", o.train.checkpoint_dir, "checkpoint directory");
  cmd->add_option("--data", o.train.data_root, "dataset root");
  cmd->add_option("--train-split", o.train.train_split, "training split");
  cmd->add_option("--eval-split", o.train.eval_split, "evaluation split");
  cmd->add_flag("--no-augment", o.no_augment, "disable flips/rotations");
}

// Applies the config file under the CLI values: file keys fill in only the
// flags the user did not pass.
void merge_config_file(const CLI::App* cmd, CliOptions& o) {
  if (o.config_file.empty()) return;
  KvMap kv = parse_kv_file(o.config_file);
  auto passed = [&](const std::string& flag) {
    const CLI::Option* opt = cmd->get_option_no_throw(flag);
    return opt && opt->count() > 0;
  };
  KvMap effective = kv;
  auto drop_if_passed = [&](const std::string& flag, const std::string& key) {
    if (passed(flag)) effective.erase(key);
  };
  drop_if_passed("--channels", "channels");
  drop_if_passed("--feu", "feu_per_ffb");
  drop_if_passed("--ffb", "ffb_count");
  drop_if_passed("--window", "window");
  drop_if_passed("--heads", "heads");
  drop_if_passed("--scale", "scale");
  drop_if_passed("--conv", "conv");
  drop_if_passed("--qsm", "qsm");
  drop_if_passed("--dfc-k", "dfc_k");
  drop_if_passed("--max-offset", "max_offset");
  drop_if_passed("--lr", "lr");
  drop_if_passed("--batch", "batch");
  drop_if_passed("--iterations", "iterations");
  drop_if_passed("--ema-decay", "ema_decay");
  drop_if_passed("--crop", "lr_crop");
  drop_if_passed("--seed", "seed");
  drop_if_passed("--eval-every", "eval_every");
  drop_if_passed("--no-augment", "augment");
  network_config_from_kv(effective, o.net);
  train_config_from_kv(effective, o.train);
}

void finalize_options(CliOptions& o) {
  o.net.conv_variant = conv_variant_from_string(o.conv);
  if (o.qsm != "on" && o.qsm != "off")
    throw ConfigError("--qsm must be on or off, got " + o.qsm);
  o.net.qsm_enabled = o.qsm == "on";
  if (o.no_augment) o.train.augment = false;
  o.net.validate();
  o.train.validate();
}

int cmd_gen_data(uint64_t seed, int count, int64_t size, int scale,
                 double exponent, bool single_velocity, bool bicubic,
                 const std::string& out, const std::string& split) {
  DatasetSpec spec;
  spec.root = out;
  spec.split = split;
  spec.count = count;
  spec.height = spec.width = size;
  spec.scale = scale;
  spec.seed = seed;
  spec.spectrum_exponent = exponent;
  spec.multi_velocities = !single_velocity;
  spec.bicubic_degrade = bicubic;
  std::vector<std::string> ids = generate_dataset(spec);
  std::cout << "wrote " << ids.size() << " samples to " << out << '/' << split
            << '\n';
  return 0;
}

int cmd_train(CliOptions& o, const std::string& resume) {
  auto train_set =
      load_dataset<float>(o.train.data_root, o.train.train_split, o.net.scale);
  std::vector<FlowSample<float>> eval_set;
  try {
    eval_set = load_dataset<float>(o.train.data_root, o.train.eval_split,
                                   o.net.scale);
  } catch (const ConfigError&) {
    // No eval split: train-only run, checkpoints still written.
  }
  Trainer<float> trainer(o.net, o.train, std::move(train_set),
                         std::move(eval_set), &std::cout);
  if (!resume.empty()) trainer.restore(load_checkpoint<float>(resume));
  trainer.run();
  std::cout << "# done steps=" << trainer.step_index() << " checkpoint="
            << o.train.checkpoint_dir << "/latest\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_root,
             const std::string& split, bool use_ema, const std::string& mode,
             int scale, const std::string& csv_path) {
  EvalMode em = mode == "bicubic"
                    ? EvalMode::Bicubic
                    : (mode == "oracle" ? EvalMode::Oracle : EvalMode::Model);
  MetricReport report;
  if (em == EvalMode::Model) {
    if (ckpt.empty()) throw ConfigError("eval: --ckpt required in model mode");
    Checkpoint<float> ck = load_checkpoint<float>(ckpt);
    FisrNet<float> net(ck.net_cfg);
    std::map<std::string, Tensor<float>> by_name(ck.tensors.begin(),
                                                 ck.tensors.end());
    for (auto& [name, p] : net.params().items()) {
      const std::string want = use_ema ? "ema/" + name : name;
      auto it = by_name.find(want);
      if (it == by_name.end())
        throw ConfigError("eval: checkpoint misses tensor " + want);
      if (it->second.shape() != p.shape())
        throw ConfigError("eval: shape mismatch for " + want);
      std::copy_n(it->second.data(), p.numel(), p.data());
    }
    auto samples = load_dataset<float>(data_root, split, ck.net_cfg.scale);
    report = evaluate_samples(&net, samples, em);
    std::cout << "# weights=" << (use_ema ? "ema" : "raw") << '\n';
  } else {
    auto samples = load_dataset<float>(data_root, split, scale);
    report = evaluate_samples<float>(nullptr, samples, em);
    std::cout << "# mode=" << mode << '\n';
  }
  std::cout << report.table();
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw ConfigError("eval: cannot open " + csv_path);
    out << report.csv();
  }
  return 0;
}

int cmd_ablate(CliOptions& o, const std::string& out_dir) {
  auto train_set =
      load_dataset<float>(o.train.data_root, o.train.train_split, o.net.scale);
  auto eval_set =
      load_dataset<float>(o.train.data_root, o.train.eval_split, o.net.scale);
  AblationReport rep = run_ablation(o.net, o.train, train_set, eval_set,
                                    &std::cout);
  std::cout << rep.table2 << '\n' << rep.table3 << '\n' << rep.table4;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/ablation.txt", std::ios::trunc);
    out << rep.table2 << '\n' << rep.table3 << '\n' << rep.table4;
    if (!out) throw ConfigError("ablate: cannot write " + out_dir);
  }
  return 0;
}

int cmd_export_png(const std::string& in, const std::string& out) {
  Tensor<float> t = fld_read<float>(in);
  if (t.rank() == 4 && t.dim(0) == 1)
    t = reshape(t, {t.dim(1), t.dim(2), t.dim(3)});
  png_export(t, out);
  std::cout << "wrote " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-image super-resolution toolkit"};
  app.require_subcommand(1);

  // gen-data
  uint64_t gd_seed = 1;
  int gd_count = 16, gd_scale = 2;
  int64_t gd_size = 128;
  double gd_exponent = -5.0 / 3.0;
  bool gd_single = false, gd_bicubic = false;
  std::string gd_out = "data", gd_split = "train";
  CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic fields");
  gen->add_option("--seed", gd_seed, "base seed");
  gen->add_option("--count", gd_count, "sample count");
  gen->add_option("--size", gd_size, "HR side length (power of two)");
  gen->add_option("--scale", gd_scale, "downsampling factor");
  gen->add_option("--exponent", gd_exponent, "spectrum exponent");
  gen->add_flag("--single-velocity", gd_single,
                "replicate one channel instead of three");
  gen->add_flag("--bicubic-degrade", gd_bicubic,
                "bicubic decimation instead of box average");
  gen->add_option("--out", gd_out, "dataset root");
  gen->add_option("--split", gd_split, "split name");

  // train
  CliOptions tr;
  std::string tr_resume;
  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common_flags(train, tr);
  train->add_option("--resume", tr_resume, "checkpoint directory to resume");

  // eval
  std::string ev_ckpt, ev_data = "data", ev_split = "test", ev_mode = "model";
  std::string ev_csv;
  int ev_scale = 2;
  bool ev_ema = false;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory");
  ev->add_option("--data", ev_data, "dataset root");
  ev->add_option("--split", ev_split, "split name");
  ev->add_option("--mode", ev_mode, "model|bicubic|oracle");
  ev->add_option("--scale", ev_scale, "dataset scale for model-free modes");
  ev->add_option("--csv", ev_csv, "also write the report as CSV");
  ev->add_flag("--ema", ev_ema, "use EMA weights");

  // ablate
  CliOptions ab;
  ab.train.iterations = 200;  // matrix default; override with --iterations
  std::string ab_out;
  CLI::App* ablate = app.add_subcommand("ablate", "run the ablation matrix");
  add_common_flags(ablate, ab);
  ablate->add_option("--out", ab_out, "directory for the table file");

  // gradcheck
  CLI::App* gradc =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");

  // export-png
  std::string xp_in, xp_out;
  CLI::App* xp = app.add_subcommand("export-png", "convert a field to PNG");
  xp->add_option("--in", xp_in, "input .fld path")->required();
  xp->add_option("--out", xp_out, "output .png path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(gd_seed, gd_count, gd_size, gd_scale, gd_exponent,
                          gd_single, gd_bicubic, gd_out, gd_split);
    if (train->parsed()) {
      merge_config_file(train, tr);
      finalize_options(tr);
      return cmd_train(tr, tr_resume);
    }
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_split, ev_ema, ev_mode, ev_scale,
                      ev_csv);
    if (ablate->parsed()) {
      merge_config_file(ablate, ab);
      finalize_options(ab);
      return cmd_ablate(ab, ab_out);
    }
    if (gradc->parsed())
      return run_gradcheck_suite(std::cout) == 0 ? 0 : 1;
    if (xp->parsed()) return cmd_export_png(xp_in, xp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
