// iodf: train, compress, decompress, evaluate and benchmark integer discrete flows.
//
// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 verification failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iodf/iodf.hpp"

namespace fs = std::filesystem;
using namespace iodf;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out;
  std::string data;
  std::string val;
  std::string path = "float";
  std::string format = "ppm";
  std::vector<int> batch;
  int stage = 5;
  int threads = 1;
  int count = 1000;
  int height = 16;
  int width = 16;
  int runs = 20;
};

RunConfig run_config(const Options& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) rc.train.seed = *o.seed;
  if (!o.batch.empty()) rc.train.batch = o.batch.front();
  rc.train.validate();
  return rc;
}

std::string image_name(std::size_t i, ImageFormat f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06zu", i);
  return std::string(buf) + format_extension(f);
}

void write_dataset(const std::string& dir, const Tensor<std::uint8_t>& images, ImageFormat f,
                   const std::vector<std::string>& names = {}) {
  fs::create_directories(dir);
  for (int i = 0; i < images.dim(0); ++i) {
    const std::string name = i < static_cast<int>(names.size()) ? names[i] : image_name(i, f);
    write_image((fs::path(dir) / name).string(), image_at(images, i), f);
  }
}

// Training and validation images: --data/--val when given, otherwise synthetic from the seed.
TrainData training_data(const Options& o, const RunConfig& rc) {
  const FlowConfig& fc = rc.flow;
  if (o.data.empty()) {
    const auto all = gen_synth(rc.train.seed, rc.train_images + rc.val_images, fc.height, fc.width, fc.channels);
    return {slice_batch(all, 0, rc.train_images), slice_batch(all, rc.train_images, all.dim(0))};
  }
  const Tensor<std::uint8_t> train = load_dataset(o.data).images;
  if (!o.val.empty()) return {train, load_dataset(o.val).images};
  const int n = train.dim(0);
  if (n <= rc.val_images) throw FormatError("dataset too small to hold out " + std::to_string(rc.val_images) +
                                            " validation images; pass --val");
  return {slice_batch(train, 0, n - rc.val_images), slice_batch(train, n - rc.val_images, n)};
}

StageHooks print_and_save(const std::string& out) {
  StageHooks h;
  h.report = [](const StageReport& r) { std::cout << r.line() << std::endl; };
  if (!out.empty())
    h.checkpoint = [out](int stage, const FlowModel& m) { save_model(m, out + ".stage" + std::to_string(stage)); };
  return h;
}

void require(const std::string& v, const char* flag) {
  if (v.empty()) throw CLI::RequiredError(flag);
}

int cmd_gen_synth(const Options& o) {
  require(o.out, "--out");
  const std::uint64_t seed = o.seed.value_or(0);
  const auto images = gen_synth(seed, o.count, o.height, o.width);
  write_dataset(o.out, images, parse_format(o.format));
  std::cout << "wrote " << images.dim(0) << " images to " << o.out << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  require(o.out, "--out");
  if (o.stage < 1 || o.stage > 5) throw CLI::ValidationError("--stage", "must be in [1, 5]");
  const RunConfig rc = run_config(o);
  PipelineResult res = run_pipeline(rc.flow, rc.train, training_data(o, rc), print_and_save(o.out), o.stage);
  for (const auto& w : res.prune_warnings) std::cerr << "warning: " << w << "\n";
  if (res.f0) std::cout << "f0=" << res.f0 << " final_flops=" << calculate_flops(res.model) << "\n";
  save_model(res.model, o.out);
  return 0;
}

int cmd_prune(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.out, "--out");
  const FlowModel m = load_model(o.checkpoint);
  if (!model_gated(m)) throw Error("checkpoint has no gates to prune (train through stage 2 first)");
  PruneResult p = prune(m);
  for (const auto& w : p.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "flops_before=" << calculate_flops(m) << " flops_after=" << calculate_flops(p.model) << "\n";
  save_model(p.model, o.out);
  return 0;
}

int cmd_quantize(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.out, "--out");
  if (o.stage != 4 && o.stage != 5) throw CLI::ValidationError("--stage", "quantize runs stage 4 or 5");
  const RunConfig rc = run_config(o);
  FlowModel m = load_model(o.checkpoint);
  if (m.config.height != rc.flow.height || m.config.width != rc.flow.width || m.config.channels != rc.flow.channels)
    throw Error("config image shape does not match the checkpoint");
  Trainer tr(rc.train, training_data(o, rc), print_and_save(o.out));
  if (m.quant == QuantState::kNone) tr.stage4(m, tr.calibration_batch());
  if (o.stage == 5 && m.quant != QuantState::kFull) tr.stage5(m);
  save_model(m, o.out);
  return 0;
}

int cmd_compress(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.data, "--data");
  require(o.out, "--out");
  const FlowModel m = load_model(o.checkpoint);
  const Dataset d = load_dataset(o.data);
  const Container c = compress(m, d.images, parse_path(o.path));
  write_file(o.out, serialize_container(c));
  std::cout << "images=" << c.count << " bytes=" << c.payload.size() << " coding_bpd=" << coding_bpd(c) << "\n";
  return 0;
}

int cmd_decompress(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.data, "--data");
  require(o.out, "--out");
  const FlowModel m = load_model(o.checkpoint);
  const Container c = parse_container(read_file(o.data));
  const auto images = decompress(m, c);
  write_dataset(o.out, images, parse_format(o.format));
  std::cout << "wrote " << images.dim(0) << " images to " << o.out << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.data, "--data");
  const FlowModel m = load_model(o.checkpoint);
  const Dataset d = load_dataset(o.data);
  const InferencePath path = parse_path(o.path);
  const double analytic = mean_bpd(analytic_bits(m, images_to_int(d.images), path), m.config.dims());
  const Container c = compress(m, d.images, path);
  const double coding = coding_bpd(c);
  std::printf("analytic_bpd=%.6f coding_bpd=%.6f gap=%.6f\n", analytic, coding, coding - analytic);
  return 0;
}

int cmd_bench(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  const FlowModel m = load_model(o.checkpoint);
  const Tensor<std::uint8_t> pool =
      o.data.empty() ? gen_synth(o.seed.value_or(0), 32, m.config.height, m.config.width, m.config.channels)
                     : load_dataset(o.data).images;
  const std::vector<int> batches = o.batch.empty() ? std::vector<int>{4, 8, 16, 32} : o.batch;
  std::vector<InferencePath> paths = {InferencePath::kFloat};
  if (m.quant == QuantState::kFull) paths.push_back(InferencePath::kInteger);
  else std::cerr << "note: checkpoint is not fully quantized; integer path skipped\n";
  for (const auto& r : run_bench(m, pool, paths, batches, o.runs)) std::cout << r.line() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Integer discrete flow lossless image codec"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key=value run configuration");
    c->add_option("--seed", o.seed, "seed for initialization, shuffling and synthetic data");
    c->add_option("--threads", o.threads, "worker threads for batched inference")->check(CLI::Range(1, 256));
  };

  auto* gen = app.add_subcommand("gen-synth", "write a reproducible synthetic image dataset");
  common(gen);
  gen->add_option("--out", o.out, "output directory");
  gen->add_option("--count", o.count, "number of images")->check(CLI::Range(1, 1 << 24));
  gen->add_option("--height", o.height, "image height")->check(CLI::Range(1, 65535));
  gen->add_option("--width", o.width, "image width")->check(CLI::Range(1, 65535));
  gen->add_option("--format", o.format, "ppm or u8t");

  auto* train = app.add_subcommand("train", "run training stages 1 through --stage");
  common(train);
  train->add_option("--data", o.data, "training images (default: synthetic)");
  train->add_option("--val", o.val, "validation images");
  train->add_option("--out", o.out, "final checkpoint; per-stage checkpoints go to <out>.stage<n>");
  train->add_option("--stage", o.stage, "last stage to run (1..5)");
  train->add_option("--batch", o.batch, "batch size")->expected(1);

  auto* prune_cmd = app.add_subcommand("prune", "remove gated-off filters from a stage-2 checkpoint");
  common(prune_cmd);
  prune_cmd->add_option("--checkpoint", o.checkpoint, "gated checkpoint");
  prune_cmd->add_option("--out", o.out, "pruned checkpoint");

  auto* quant = app.add_subcommand("quantize", "run stages 4-5 on a stage-3 checkpoint");
  common(quant);
  quant->add_option("--checkpoint", o.checkpoint, "stage-3 checkpoint");
  quant->add_option("--data", o.data, "training images (default: synthetic)");
  quant->add_option("--val", o.val, "validation images");
  quant->add_option("--out", o.out, "quantized checkpoint");
  quant->add_option("--stage", o.stage, "4 (activations) or 5 (activations and weights)");
  quant->add_option("--batch", o.batch, "batch size")->expected(1);

  auto* comp = app.add_subcommand("compress", "compress images into a container");
  common(comp);
  comp->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  comp->add_option("--data", o.data, "image file or directory");
  comp->add_option("--out", o.out, "container file");
  comp->add_option("--path", o.path, "inference path: float, fake or int");

  auto* decomp = app.add_subcommand("decompress", "restore images from a container");
  common(decomp);
  decomp->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  decomp->add_option("--data", o.data, "container file");
  decomp->add_option("--out", o.out, "output directory");
  decomp->add_option("--format", o.format, "ppm or u8t");

  auto* eval = app.add_subcommand("eval", "report analytic and coding bits per dimension");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  eval->add_option("--data", o.data, "image file or directory");
  eval->add_option("--path", o.path, "inference path: float, fake or int");

  auto* bench = app.add_subcommand("bench", "latency and bandwidth per path and batch size");
  common(bench);
  bench->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  bench->add_option("--data", o.data, "image pool (default: synthetic)");
  bench->add_option("--batch", o.batch, "batch sizes (default 4 8 16 32)");
  bench->add_option("--runs", o.runs, "timed runs per row")->check(CLI::Range(1, 100000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    eval_threads() = o.threads;
    if (*gen) return cmd_gen_synth(o);
    if (*train) return cmd_train(o);
    if (*prune_cmd) return cmd_prune(o);
    if (*quant) return cmd_quantize(o);
    if (*comp) return cmd_compress(o);
    if (*decomp) return cmd_decompress(o);
    if (*eval) return cmd_eval(o);
    if (*bench) return cmd_bench(o);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
