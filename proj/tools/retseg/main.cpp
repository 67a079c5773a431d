#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "retseg/config.hpp"
#include "retseg/data.hpp"
#include "retseg/eval.hpp"
#include "retseg/gradcheck.hpp"
#include "retseg/image_io.hpp"
#include "retseg/moco.hpp"
#include "retseg/probe.hpp"
#include "retseg/train.hpp"
#include "retseg/unet.hpp"

namespace fs = std::filesystem;
using namespace retseg;

namespace {

// Binds CLI options to config-file keys: file values fill in options the
// user did not pass on the command line, and the final values form the
// resolved configuration written next to the outputs.
class Binder {
 public:
  template <class T>
  void bind(CLI::Option* opt, const std::string& key, T& var) {
    items_.push_back({opt, key,
                      [&var, key](const std::string& s) {
                        if constexpr (std::is_same_v<T, std::string>) {
                          var = s;
                        } else if constexpr (std::is_same_v<T, bool>) {
                          if (s == "1" || s == "true")
                            var = true;
                          else if (s == "0" || s == "false")
                            var = false;
                          else
                            throw ConfigError("key '" + key + "': expected 0/1, got '" + s + "'");
                        } else {
                          std::istringstream is(s);
                          is >> var;
                          if (is.fail() || !is.eof())
                            throw ConfigError("key '" + key + "': cannot parse '" + s + "'");
                        }
                      },
                      [&var]() {
                        std::ostringstream os;
                        os << var;
                        return os.str();
                      }});
  }

  std::map<std::string, std::string> resolve(const std::string& config_path,
                                             const std::string& command) {
    if (!config_path.empty()) {
      ConfigFile cf = ConfigFile::load(config_path);
      for (auto& it : items_) {
        if (it.opt->count() == 0 && cf.has(it.key)) it.set(cf.get(it.key));
        (void)cf.get_or(it.key, "");  // mark known
      }
      cf.check_all_consumed();
    }
    std::map<std::string, std::string> resolved;
    resolved["command"] = command;
    for (auto& it : items_) resolved[it.key] = it.get();
    return resolved;
  }

 private:
  struct Item {
    CLI::Option* opt;
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::vector<Item> items_;
};

std::vector<Sample> load_dataset(const std::string& manifest_path) {
  const DatasetManifest man = load_manifest(manifest_path);
  std::vector<Sample> samples = load_all(man);
  if (man.resize_width > 0)
    for (auto& s : samples) s = resize_sample_to_width(s, man.resize_width);
  return samples;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

std::vector<std::string> parse_str_list(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

UNetConfig make_unet_config(bool conv_skip, const std::string& decoder_widths_csv) {
  UNetConfig c;
  c.conv_skip_connections = conv_skip;
  if (!decoder_widths_csv.empty()) c.decoder_widths = parse_int_list(decoder_widths_csv);
  c.validate();
  return c;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------- pretrain

void add_pretrain(CLI::App& app) {
  auto* cmd = app.add_subcommand("pretrain", "Self-supervised encoder pre-training");
  struct Opts {
    std::string config, data, out_base = "runs", out;
    int epochs = 600, batch = 64, queue = 4096, checkpoint_every = 10, crop = 128, period = 50;
    double tau = 0.07, alpha = 0.999, weight_decay = 1e-4, lr_max = 1e-2, lr_min = 1e-8;
    std::uint64_t seed = 1;
    bool include_head = false;
  };
  auto o = std::make_shared<Opts>();
  auto b = std::make_shared<Binder>();
  cmd->add_option("--config", o->config, "key=value config file");
  b->bind(cmd->add_option("--data", o->data, "unlabeled dataset manifest"), "data", o->data);
  b->bind(cmd->add_option("--epochs", o->epochs), "epochs", o->epochs);
  b->bind(cmd->add_option("--batch", o->batch), "batch", o->batch);
  b->bind(cmd->add_option("--queue", o->queue, "key queue length l_K"), "queue", o->queue);
  b->bind(cmd->add_option("--tau", o->tau, "InfoNCE temperature"), "tau", o->tau);
  b->bind(cmd->add_option("--alpha", o->alpha, "momentum coefficient"), "alpha", o->alpha);
  b->bind(cmd->add_option("--weight-decay", o->weight_decay), "weight_decay", o->weight_decay);
  b->bind(cmd->add_option("--lr-max", o->lr_max), "lr_max", o->lr_max);
  b->bind(cmd->add_option("--lr-min", o->lr_min), "lr_min", o->lr_min);
  b->bind(cmd->add_option("--lr-period", o->period, "epochs per cosine restart"), "lr_period",
          o->period);
  b->bind(cmd->add_option("--crop", o->crop, "view crop size"), "crop", o->crop);
  b->bind(cmd->add_option("--checkpoint-every", o->checkpoint_every), "checkpoint_every",
          o->checkpoint_every);
  b->bind(cmd->add_option("--seed", o->seed), "seed", o->seed);
  b->bind(cmd->add_flag("--include-head", o->include_head, "store the projection head too"),
          "include_head", o->include_head);
  cmd->add_option("--out", o->out, "run directory (default: runs/<hash>-<timestamp>)");
  cmd->callback([o, b]() {
    auto resolved = b->resolve(o->config, "pretrain");
    if (o->data.empty()) throw ConfigError("pretrain: --data is required");
    const auto samples = load_dataset(o->data);
    const std::string run_dir = make_run_dir(o->out_base, resolved, o->out);
    write_resolved_config(run_dir, resolved);

    UNetConfig ucfg;
    MoCoState state = make_moco_state(ucfg, o->queue, o->seed, static_cast<float>(o->tau),
                                      static_cast<float>(o->alpha));
    PretrainConfig pc;
    pc.epochs = o->epochs;
    pc.batch_size = o->batch;
    pc.queue_len = o->queue;
    pc.tau = static_cast<float>(o->tau);
    pc.alpha = static_cast<float>(o->alpha);
    pc.weight_decay = static_cast<float>(o->weight_decay);
    pc.checkpoint_every = o->checkpoint_every;
    pc.seed = o->seed;
    pc.schedule.eta_max = static_cast<float>(o->lr_max);
    pc.schedule.eta_min = static_cast<float>(o->lr_min);
    pc.schedule.period = o->period;
    pc.augment.view_crop_size = o->crop;
    pc.checkpoint_dir = (fs::path(run_dir) / "checkpoints").string();
    pc.include_head = o->include_head;

    PretrainResult result = pretrain(state, samples, pc);
    write_text((fs::path(run_dir) / "loss.csv").string(), pretrain_csv(result.history));
    const std::string final_path = (fs::path(run_dir) / "encoder.ntc").string();
    save_checkpoint_raw(final_path, result.encoder_checkpoint.tensors);
    std::cout << "pretrain: " << result.history.size() << " steps, encoder checkpoint at "
              << final_path << "\n";
  });
}

// ---------------------------------------------------------------- finetune

void add_finetune(CLI::App& app) {
  auto* cmd = app.add_subcommand("finetune", "Supervised segmentation fine-tuning");
  struct Opts {
    std::string config, data, out_base = "runs", out, init_encoder, target = "vessels";
    std::string decoder_widths;
    int epochs = 1500, batch = 4, checkpoint_every = 10, train_images = 0, period = 50;
    double weight_decay = 0.0, lr_max = 1e-2, lr_min = 1e-8, val_fraction = 0.2;
    std::uint64_t seed = 1;
    bool conv_skip = false;
  };
  auto o = std::make_shared<Opts>();
  auto b = std::make_shared<Binder>();
  cmd->add_option("--config", o->config, "key=value config file");
  b->bind(cmd->add_option("--data", o->data, "labeled dataset manifest"), "data", o->data);
  b->bind(cmd->add_option("--init-encoder", o->init_encoder, "encoder checkpoint to start from"),
          "init_encoder", o->init_encoder);
  b->bind(cmd->add_option("--target", o->target), "target", o->target);
  b->bind(cmd->add_option("--train-images", o->train_images,
                          "few-shot cap on training images (0 = all)"),
          "train_images", o->train_images);
  b->bind(cmd->add_option("--val-fraction", o->val_fraction), "val_fraction", o->val_fraction);
  b->bind(cmd->add_option("--epochs", o->epochs), "epochs", o->epochs);
  b->bind(cmd->add_option("--batch", o->batch), "batch", o->batch);
  b->bind(cmd->add_option("--weight-decay", o->weight_decay), "weight_decay", o->weight_decay);
  b->bind(cmd->add_option("--lr-max", o->lr_max), "lr_max", o->lr_max);
  b->bind(cmd->add_option("--lr-min", o->lr_min), "lr_min", o->lr_min);
  b->bind(cmd->add_option("--lr-period", o->period), "lr_period", o->period);
  b->bind(cmd->add_option("--checkpoint-every", o->checkpoint_every), "checkpoint_every",
          o->checkpoint_every);
  b->bind(cmd->add_flag("--conv-skip", o->conv_skip, "convolutional skip connections"),
          "conv_skip", o->conv_skip);
  b->bind(cmd->add_option("--decoder-widths", o->decoder_widths, "e.g. 16,8,4"), "decoder_widths",
          o->decoder_widths);
  b->bind(cmd->add_option("--seed", o->seed), "seed", o->seed);
  cmd->add_option("--out", o->out, "run directory");
  cmd->callback([o, b]() {
    auto resolved = b->resolve(o->config, "finetune");
    if (o->data.empty()) throw ConfigError("finetune: --data is required");
    const auto samples = load_dataset(o->data);
    // validation is carved from the full training pool before any few-shot cap
    auto [train_idx, val_idx] = split(samples.size(), o->val_fraction, o->seed);
    if (o->train_images > 0 &&
        static_cast<std::size_t>(o->train_images) < train_idx.size())
      train_idx.resize(static_cast<std::size_t>(o->train_images));
    std::vector<Sample> train_set, val_set;
    for (auto i : train_idx) train_set.push_back(samples[i]);
    for (auto i : val_idx) val_set.push_back(samples[i]);

    const std::string run_dir = make_run_dir(o->out_base, resolved, o->out);
    write_resolved_config(run_dir, resolved);

    UNetConfig ucfg = make_unet_config(o->conv_skip, o->decoder_widths);
    RngStream rng = RngStream::keyed(o->seed, {0xF17Eu});
    UNetModel model = build_unet(ucfg, rng);

    TrainRunConfig tc;
    tc.epochs = o->epochs;
    tc.batch_size = o->batch;
    tc.weight_decay = static_cast<float>(o->weight_decay);
    tc.checkpoint_every = o->checkpoint_every;
    tc.seed = o->seed;
    tc.schedule.eta_max = static_cast<float>(o->lr_max);
    tc.schedule.eta_min = static_cast<float>(o->lr_min);
    tc.schedule.period = o->period;
    tc.target = o->target;
    tc.checkpoint_dir = (fs::path(run_dir) / "checkpoints").string();
    tc.init_encoder_checkpoint = o->init_encoder;

    FinetuneResult result = finetune(model, train_set, val_set, tc);
    write_text((fs::path(run_dir) / "history.csv").string(), history_csv(result.history));
    const auto& best = result.checkpoints[result.best_checkpoint];
    const std::string best_path = (fs::path(run_dir) / "best.ntc").string();
    save_checkpoint_raw(best_path, best.data.tensors);
    std::ostringstream summary;
    summary << "best_epoch," << result.best_epoch << "\n"
            << "epochs_to_best," << epochs_to_best(result) << "\n";
    if (best.has_val) summary << "best_val_dice," << best.val_dice << "\n";
    write_text((fs::path(run_dir) / "summary.csv").string(), summary.str());
    std::cout << "finetune: best checkpoint at epoch " << result.best_epoch << " -> " << best_path
              << "\n";
  });
}

// ---------------------------------------------------------------- evaluate

EvalReport evaluate_checkpoint(UNetModel& model, const std::vector<Sample>& train_set,
                               const std::vector<Sample>& test_set, const std::string& target,
                               bool use_tta, bool want_auprc) {
  std::vector<Image> train_probs;
  std::vector<Mask> train_gts, train_fovs;
  for (const auto& s : train_set) {
    train_probs.push_back(predict_tta(model, s.image, use_tta));
    train_gts.push_back(s.targets.at(target));
    train_fovs.push_back(s.fov);
  }
  EvalReport r;
  r.threshold = select_threshold(train_probs, train_gts, train_fovs);

  std::vector<Image> probs;
  std::vector<Mask> gts, fovs;
  for (const auto& s : test_set) {
    probs.push_back(predict_tta(model, s.image, use_tta));
    gts.push_back(s.targets.at(target));
    fovs.push_back(s.fov);
  }
  r.dice = pooled_dice(probs, gts, fovs, r.threshold, &r.counts);
  for (std::size_t i = 0; i < test_set.size(); ++i)
    r.per_image_dice.emplace_back(test_set[i].id,
                                  pooled_dice({probs[i]}, {gts[i]}, {fovs[i]}, r.threshold));
  if (want_auprc) {
    std::vector<float> scores;
    std::vector<std::uint8_t> labels;
    pool_pixels(probs, gts, fovs, scores, labels);
    r.auprc = auprc(pr_curve(scores, labels));
    r.has_auprc = true;
  }
  return r;
}

void add_evaluate(CLI::App& app) {
  auto* cmd = app.add_subcommand("evaluate", "Evaluation protocol: TTA, training-set threshold, "
                                             "pooled Dice / AUPRC");
  struct Opts {
    std::string config, checkpoint, test, train, out_base = "runs", out, target = "vessels";
    std::string metric = "dice", decoder_widths;
    bool no_tta = false, conv_skip = false;
    std::uint64_t seed = 1;
  };
  auto o = std::make_shared<Opts>();
  auto b = std::make_shared<Binder>();
  cmd->add_option("--config", o->config, "key=value config file");
  b->bind(cmd->add_option("--checkpoint", o->checkpoint, "trained model checkpoint"),
          "checkpoint", o->checkpoint);
  b->bind(cmd->add_option("--test", o->test, "test manifest"), "test", o->test);
  b->bind(cmd->add_option("--train", o->train, "training manifest for threshold selection"),
          "train", o->train);
  b->bind(cmd->add_option("--target", o->target), "target", o->target);
  b->bind(cmd->add_option("--metric", o->metric, "dice | auprc | both"), "metric", o->metric);
  b->bind(cmd->add_flag("--no-tta", o->no_tta), "no_tta", o->no_tta);
  b->bind(cmd->add_flag("--conv-skip", o->conv_skip), "conv_skip", o->conv_skip);
  b->bind(cmd->add_option("--decoder-widths", o->decoder_widths), "decoder_widths",
          o->decoder_widths);
  b->bind(cmd->add_option("--seed", o->seed), "seed", o->seed);
  cmd->add_option("--out", o->out, "run directory");
  cmd->callback([o, b]() {
    auto resolved = b->resolve(o->config, "evaluate");
    if (o->checkpoint.empty() || o->test.empty() || o->train.empty())
      throw ConfigError("evaluate: --checkpoint, --test and --train are required");
    if (o->metric != "dice" && o->metric != "auprc" && o->metric != "both")
      throw ConfigError("evaluate: --metric must be dice, auprc or both");
    const auto train_set = load_dataset(o->train);
    const auto test_set = load_dataset(o->test);
    UNetConfig ucfg = make_unet_config(o->conv_skip, o->decoder_widths);
    RngStream rng = RngStream::keyed(o->seed, {0xE7A1u});
    UNetModel model = build_unet(ucfg, rng);
    load_checkpoint(o->checkpoint, model.params);

    EvalReport r = evaluate_checkpoint(model, train_set, test_set, o->target, !o->no_tta,
                                       o->metric != "dice");
    const std::string run_dir = make_run_dir(o->out_base, resolved, o->out);
    write_resolved_config(run_dir, resolved);
    write_text((fs::path(run_dir) / "report.txt").string(), format_report(r));
    write_text((fs::path(run_dir) / "report.csv").string(),
               report_csv_header() + "\n" + report_csv_row(r, "evaluate") + "\n");
    std::cout << format_report(r);
  });
}

// ---------------------------------------------------------------- transfer

void add_transfer(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "transfer", "Cross-dataset grid over checkpoint/threshold selection provenance");
  struct Opts {
    std::string config, checkpoints, source_train, target_train, target_test;
    std::string out_base = "runs", out, target = "vessels", decoder_widths = "16,8,4";
    bool conv_skip = false, no_tta = false;
    double val_fraction = 0.2;
    std::uint64_t seed = 1;
  };
  auto o = std::make_shared<Opts>();
  auto b = std::make_shared<Binder>();
  cmd->add_option("--config", o->config, "key=value config file");
  b->bind(cmd->add_option("--checkpoints", o->checkpoints,
                          "directory of training checkpoints (ckpt_epoch*.ntc)"),
          "checkpoints", o->checkpoints);
  b->bind(cmd->add_option("--source-train", o->source_train), "source_train", o->source_train);
  b->bind(cmd->add_option("--target-train", o->target_train), "target_train", o->target_train);
  b->bind(cmd->add_option("--target-test", o->target_test), "target_test", o->target_test);
  b->bind(cmd->add_option("--target", o->target), "target", o->target);
  b->bind(cmd->add_option("--val-fraction", o->val_fraction), "val_fraction", o->val_fraction);
  b->bind(cmd->add_flag("--conv-skip", o->conv_skip), "conv_skip", o->conv_skip);
  b->bind(cmd->add_flag("--no-tta", o->no_tta), "no_tta", o->no_tta);
  b->bind(cmd->add_option("--decoder-widths", o->decoder_widths), "decoder_widths",
          o->decoder_widths);
  b->bind(cmd->add_option("--seed", o->seed), "seed", o->seed);
  cmd->add_option("--out", o->out, "run directory");
  cmd->callback([o, b]() {
    auto resolved = b->resolve(o->config, "transfer");
    if (o->checkpoints.empty() || o->source_train.empty() || o->target_train.empty() ||
        o->target_test.empty())
      throw ConfigError(
          "transfer: --checkpoints, --source-train, --target-train and --target-test are "
          "required");
    std::vector<std::string> ckpt_files;
    for (const auto& e : fs::directory_iterator(o->checkpoints))
      if (e.path().extension() == ".ntc") ckpt_files.push_back(e.path().string());
    std::sort(ckpt_files.begin(), ckpt_files.end());
    if (ckpt_files.empty())
      throw IoError("transfer: no .ntc checkpoints in " + o->checkpoints);

    const auto source_train = load_dataset(o->source_train);
    const auto target_train = load_dataset(o->target_train);
    const auto target_test = load_dataset(o->target_test);

    UNetConfig ucfg = make_unet_config(o->conv_skip, o->decoder_widths);
    RngStream rng = RngStream::keyed(o->seed, {0x7Fu});
    UNetModel model = build_unet(ucfg, rng);

    // validation pools used for checkpoint selection on each side
    auto selection_set = [&](const std::vector<Sample>& pool) {
      auto [tr, va] = split(pool.size(), o->val_fraction, o->seed);
      std::vector<Sample> out;
      for (auto i : va) out.push_back(pool[i]);
      if (out.empty()) out = pool;  // tiny pools: select on everything
      return out;
    };
    const std::vector<Sample> source_val = selection_set(source_train);
    const std::vector<Sample> target_val = selection_set(target_train);

    auto best_by_val = [&](const std::vector<Sample>& val_set) {
      std::string best_path;
      double best_dice = -1.0;
      for (const auto& path : ckpt_files) {
        load_checkpoint(path, model.params);
        std::vector<Image> probs;
        std::vector<Mask> gts, fovs;
        for (const auto& s : val_set) {
          probs.push_back(predict_tta(model, s.image, false));
          gts.push_back(s.targets.at(o->target));
          fovs.push_back(s.fov);
        }
        const double d = pooled_dice(probs, gts, fovs, 0.5f);
        if (d > best_dice) {
          best_dice = d;
          best_path = path;
        }
      }
      return best_path;
    };
    const std::string ckpt_source = best_by_val(source_val);
    const std::string ckpt_target = best_by_val(target_val);

    const std::string run_dir = make_run_dir(o->out_base, resolved, o->out);
    write_resolved_config(run_dir, resolved);
    std::ostringstream csv;
    csv << "checkpoint_select,threshold_select," << report_csv_header() << "\n";
    for (const std::string cs : {"source", "target"}) {
      const std::string& ckpt = cs == "source" ? ckpt_source : ckpt_target;
      load_checkpoint(ckpt, model.params);
      for (const std::string ts : {"source", "target"}) {
        const auto& thr_set = ts == "source" ? source_train : target_train;
        EvalReport r = evaluate_checkpoint(model, thr_set, target_test, o->target, !o->no_tta,
                                           /*want_auprc=*/true);
        csv << cs << "," << ts << "," << report_csv_row(r, cs + "/" + ts) << "\n";
      }
    }
    write_text((fs::path(run_dir) / "transfer.csv").string(), csv.str());
    std::cout << csv.str();
  });
}

// ------------------------------------------------------------------- probe

void add_probe(CLI::App& app) {
  auto* cmd = app.add_subcommand("probe", "Feature-target Pearson correlation analysis");
  struct Opts {
    std::string config, checkpoint, data, out_base = "runs", out;
    std::string targets = "vessels,lesions", units;
    bool compare_random = false;
    std::uint64_t seed = 1;
  };
  auto o = std::make_shared<Opts>();
  auto b = std::make_shared<Binder>();
  cmd->add_option("--config", o->config, "key=value config file");
  b->bind(cmd->add_option("--checkpoint", o->checkpoint, "encoder checkpoint"), "checkpoint",
          o->checkpoint);
  b->bind(cmd->add_option("--data", o->data, "labeled manifest"), "data", o->data);
  b->bind(cmd->add_option("--targets", o->targets, "comma-separated target names"), "targets",
          o->targets);
  b->bind(cmd->add_option("--units", o->units, "units to export as activation maps, e.g. 0,5,17"),
          "units", o->units);
  b->bind(cmd->add_flag("--compare-random", o->compare_random,
                        "also run a random-init encoder for comparison"),
          "compare_random", o->compare_random);
  b->bind(cmd->add_option("--seed", o->seed), "seed", o->seed);
  cmd->add_option("--out", o->out, "run directory");
  cmd->callback([o, b]() {
    auto resolved = b->resolve(o->config, "probe");
    if (o->data.empty()) throw ConfigError("probe: --data is required");
    const auto samples = load_dataset(o->data);
    const auto target_names = parse_str_list(o->targets);

    UNetConfig ucfg;
    RngStream rng = RngStream::keyed(o->seed, {0x9B0Eu});
    UNetModel model = build_unet(ucfg, rng);
    if (!o->checkpoint.empty()) load_checkpoint(o->checkpoint, model.params, "encoder.");

    const std::string run_dir = make_run_dir(o->out_base, resolved, o->out);
    write_resolved_config(run_dir, resolved);

    CorrelationMatrix m = feature_target_correlation(model, samples, target_names);
    write_text((fs::path(run_dir) / "correlations.csv").string(), correlation_csv(m));
    for (const auto& t : target_names)
      std::cout << "max |r| (" << t << "): " << max_abs_r(m, t) << "\n";

    if (o->compare_random) {
      RngStream rrng = RngStream::keyed(o->seed, {0x9B0Fu});
      UNetModel random_model = build_unet(ucfg, rrng);
      CorrelationMatrix mr = feature_target_correlation(random_model, samples, target_names);
      write_text((fs::path(run_dir) / "correlations_random.csv").string(), correlation_csv(mr));
      for (const auto& t : target_names)
        std::cout << "max |r| random (" << t << "): " << max_abs_r(mr, t) << "\n";
    }

    if (!o->units.empty() && !samples.empty()) {
      for (int u : parse_int_list(o->units)) {
        Image map = activation_map(model, samples.front().image, u);
        const std::string path =
            (fs::path(run_dir) / ("unit" + std::to_string(u) + "_" + samples.front().id + ".pgm"))
                .string();
        write_image(path, map);
      }
    }
    std::cout << "probe: wrote " << (fs::path(run_dir) / "correlations.csv").string() << "\n";
  });
}

// ------------------------------------------------------------------- stats

std::map<std::string, double> read_paired_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::map<std::string, double> rows;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw ValueError(path + ": expected 'id,value' rows, got '" + line + "'");
    const std::string id = line.substr(0, comma);
    if (rows.count(id)) throw ValueError(path + ": duplicate id '" + id + "'");
    rows[id] = std::stod(line.substr(comma + 1));
  }
  if (rows.empty()) throw ValueError(path + ": no data rows");
  return rows;
}

void add_stats(CLI::App& app) {
  auto* cmd = app.add_subcommand("stats", "Paired t confidence interval over matching splits");
  struct Opts {
    std::string a, b, out;
    bool two_sided = false;
    double level = 0.95;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--a", o->a, "CSV (header, then id,value) for arm A")->required();
  cmd->add_option("--b", o->b, "CSV for arm B")->required();
  cmd->add_flag("--two-sided", o->two_sided);
  cmd->add_option("--level", o->level, "confidence level");
  cmd->add_option("--out", o->out, "optional output CSV path");
  cmd->callback([o]() {
    const auto a = read_paired_csv(o->a);
    const auto bmap = read_paired_csv(o->b);
    std::string unmatched;
    for (const auto& [id, v] : a)
      if (!bmap.count(id)) unmatched += (unmatched.empty() ? "" : ", ") + id;
    for (const auto& [id, v] : bmap)
      if (!a.count(id)) unmatched += (unmatched.empty() ? "" : ", ") + id;
    if (!unmatched.empty())
      throw ValueError("stats: unmatched split ids: " + unmatched);
    std::vector<double> diffs;
    for (const auto& [id, v] : a) diffs.push_back(v - bmap.at(id));
    const TInterval ci = paired_tci(diffs, o->two_sided ? Sided::Two : Sided::One, o->level);
    std::ostringstream os;
    os << "n,mean_diff,lower,upper,significant\n"
       << diffs.size() << "," << ci.mean << "," << ci.lower << "," << ci.upper << ","
       << (ci.significant ? 1 : 0) << "\n";
    if (!o->out.empty()) write_text(o->out, os.str());
    std::cout << os.str();
  });
}

// ---------------------------------------------------------------- synth-gen

void add_synth_gen(CLI::App& app) {
  auto* cmd = app.add_subcommand("synth-gen", "Generate a synthetic fundus-like dataset");
  struct Opts {
    std::string config, out = "synth";
    int count = 32, size = 512;
    std::uint64_t seed = 1;
  };
  auto o = std::make_shared<Opts>();
  auto b = std::make_shared<Binder>();
  cmd->add_option("--config", o->config, "key=value config file");
  b->bind(cmd->add_option("--count", o->count), "count", o->count);
  b->bind(cmd->add_option("--size", o->size, "square image size"), "size", o->size);
  b->bind(cmd->add_option("--seed", o->seed), "seed", o->seed);
  cmd->add_option("--out", o->out, "output directory")->required();
  cmd->callback([o, b]() {
    auto resolved = b->resolve(o->config, "synth-gen");
    SynthConfig sc;
    sc.size = o->size;
    const auto samples = synth_generate(o->count, sc, o->seed);
    const std::string manifest = save_dataset(o->out, samples);
    write_resolved_config(o->out, resolved);
    std::cout << "synth-gen: wrote " << samples.size() << " samples, manifest at " << manifest
              << "\n";
  });
}

// ---------------------------------------------------------------- gradcheck

double check_conv2d(std::uint64_t seed) {
  RngStream rng = RngStream::keyed(seed, {0xC0u});
  Tensor x = he_init({2, 3, 6, 6}, 3, rng);
  Tensor w = he_init({4, 3, 3, 3}, 27, rng);
  Tensor bias = he_init({4}, 1, rng);
  return grad_check(
      {x, w, bias},
      [&](FloatTape* tape) {
        Tensor y = conv2d(tape, x, w, bias, 1, Pad::Same);
        return mean(tape, mul(tape, y, y));
      },
      [&](const std::vector<TensorT<double>>& in) {
        TensorT<double> y = conv2d<double>(nullptr, in[0], in[1], in[2], 1, Pad::Same);
        double acc = 0.0;
        for (double v : y.data()) acc += v * v;
        return acc / static_cast<double>(y.size());
      });
}

double check_unet_composite(std::uint64_t seed) {
  UNetConfig cfg;
  cfg.encoder_levels = 3;
  cfg.base_filters = 4;
  RngStream rng = RngStream::keyed(seed, {0xC3u});
  UNetModel model = build_unet(cfg, rng);
  Tensor x = he_init({1, 3, 16, 16}, 3, rng);
  Tensor target = Tensor::zeros({1, 1, 16, 16});
  for (auto& v : target.data()) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
  UNetModelT<double> dmodel = cast_unet<double>(model);
  GradCheckOptions opt;
  opt.max_coords_per_input = 6;
  // A small step keeps the central difference from stepping across
  // ReLU/maxpool kinks; the f64 forward tolerates it without round-off.
  opt.eps = 1e-4;
  return grad_check(
      {x},
      [&](FloatTape* tape) {
        // Train-mode batch norm keeps activations normalized so the sigmoid
        // head does not saturate past the BCE clamp, where the loss is flat.
        Tensor pred = forward(model, x, Mode::Train, tape);
        return bce_masked(tape, pred, target, Tensor());
      },
      [&](const std::vector<TensorT<double>>& in) {
        TensorT<double> pred =
            forward(dmodel, in[0], Mode::Train, static_cast<Tape<double>*>(nullptr));
        TensorT<double> t = to_double(target);
        TensorT<double> loss = bce_masked<double>(nullptr, pred, t, TensorT<double>());
        return loss.item();
      },
      opt);
}

void add_gradcheck(CLI::App& app) {
  auto* cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  struct Opts {
    int seeds = 5;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--seeds", o->seeds, "random seeds per check");
  cmd->callback([o]() {
    bool ok = true;
    double worst_conv = 0.0, worst_unet = 0.0;
    for (int s = 0; s < o->seeds; ++s) {
      worst_conv = std::max(worst_conv, check_conv2d(static_cast<std::uint64_t>(s) + 1));
      worst_unet = std::max(worst_unet, check_unet_composite(static_cast<std::uint64_t>(s) + 1));
    }
    std::cout << "conv2d max rel error: " << worst_conv << (worst_conv < 1e-3 ? "  ok" : "  FAIL")
              << "\n";
    std::cout << "unet composite max rel error: " << worst_unet
              << (worst_unet < 1e-2 ? "  ok" : "  FAIL") << "\n";
    ok = worst_conv < 1e-3 && worst_unet < 1e-2;
    if (!ok) throw ValueError("gradcheck failed");
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised retinal segmentation toolkit"};
  app.require_subcommand(1);
  add_pretrain(app);
  add_finetune(app);
  add_evaluate(app);
  add_transfer(app);
  add_probe(app);
  add_stats(app);
  add_synth_gen(app);
  add_gradcheck(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
