#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <sys/wait.h>

#include "test_util.hpp"

using namespace iodf;
using namespace iodf::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("iodf_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(IODF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void expect_same_model(const FlowModel& a, const FlowModel& b) {
  EXPECT_EQ(serialize_model(a), serialize_model(b));
  EXPECT_EQ(model_checksum(a), model_checksum(b));
  const auto images = random_images(99, 3, a.config);
  for (InferencePath p : {InferencePath::kFloat, InferencePath::kFake, InferencePath::kInteger}) {
    if (p != InferencePath::kFloat && a.quant != QuantState::kFull) continue;
    EXPECT_EQ(analytic_bits(a, images_to_int(images), p), analytic_bits(b, images_to_int(images), p));
  }
}

}  // namespace

TEST(Checkpoint, RoundTripsEveryModelState) {
  const FlowConfig cfg = small_config();
  FlowModel plain = perturbed_model(cfg, 1);
  expect_same_model(plain, deserialize_model(serialize_model(plain)));

  FlowModel gated = perturbed_model(cfg, 2);
  random_gates(gated, 3, 3);
  const FlowModel gated_back = deserialize_model(serialize_model(gated));
  expect_same_model(gated, gated_back);
  EXPECT_TRUE(model_gated(gated_back));

  const FlowModel pruned = prune(gated).model;
  const FlowModel pruned_back = deserialize_model(serialize_model(pruned));
  expect_same_model(pruned, pruned_back);
  EXPECT_TRUE(model_pruned(pruned_back));

  const FlowModel q = quantized_model(cfg, 4);
  expect_same_model(q, deserialize_model(serialize_model(q)));
}

TEST(Checkpoint, FileRoundTrip) {
  const fs::path dir = scratch_dir("ckpt");
  const FlowModel m = quantized_model(small_config(), 5);
  save_model(m, (dir / "m.bin").string());
  expect_same_model(m, load_model((dir / "m.bin").string()));
  EXPECT_THROW(load_model((dir / "missing.bin").string()), Error);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsFormatError) {
  const auto bytes = serialize_model(perturbed_model(small_config(), 6));
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    auto bad = bytes;
    bad[rng.below(bad.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    EXPECT_THROW(deserialize_model(bad), FormatError);
  }
  EXPECT_THROW(deserialize_model(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3)), FormatError);
  EXPECT_THROW(deserialize_model(std::vector<std::uint8_t>{}), FormatError);
}

TEST(ChecksumTest, SensitiveToEveryParameterKind) {
  const FlowModel a = quantized_model(small_config(), 8);
  FlowModel b = a;
  b.levels[1].couplings[1].net.last.weight[0] += 1e-6f;
  EXPECT_NE(model_checksum(a), model_checksum(b));
  b = a;
  b.levels[0].couplings[0].net.blocks[1].conv2.act_scale[0] *= 1.001f;
  EXPECT_NE(model_checksum(a), model_checksum(b));
  b = a;
  b.final_log_s[3] += 1e-3f;
  EXPECT_NE(model_checksum(a), model_checksum(b));
}

TEST(Images, PpmAndU8tRoundTrip) {
  const auto batch = gen_synth(9, 4, 5, 7);
  for (int i = 0; i < 4; ++i) {
    const Image img = image_at(batch, i);
    EXPECT_EQ(decode_ppm(encode_ppm(img)), img);
    EXPECT_EQ(decode_u8t(encode_u8t(img)), img);
  }
  const auto gray = random_images(10, 1, 1, 3, 4);
  EXPECT_EQ(decode_u8t(encode_u8t(image_at(gray, 0))), image_at(gray, 0));
  EXPECT_THROW(encode_ppm(image_at(gray, 0)), FormatError);
}

TEST(Images, PpmHeaderVariants) {
  const std::string text = "P6\n# comment\n2 1\n255\n";
  std::vector<std::uint8_t> b(text.begin(), text.end());
  for (int v : {1, 2, 3, 4, 5, 6}) b.push_back(static_cast<std::uint8_t>(v));
  const Image img = decode_ppm(b);
  EXPECT_EQ(img.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(img.vec(), (std::vector<std::uint8_t>{1, 4, 2, 5, 3, 6}));
  b.pop_back();
  EXPECT_THROW(decode_ppm(b), FormatError);
  const std::string deep = "P6 2 1 65535\n";
  EXPECT_THROW(decode_ppm(std::vector<std::uint8_t>(deep.begin(), deep.end())), FormatError);
}

TEST(Images, DirectoryDatasetInNameOrder) {
  const fs::path dir = scratch_dir("data");
  const auto batch = gen_synth(11, 3, 4, 4);
  write_image((dir / "b.ppm").string(), image_at(batch, 1), ImageFormat::kPpm);
  write_image((dir / "a.u8t").string(), image_at(batch, 0), ImageFormat::kU8t);
  write_image((dir / "c.ppm").string(), image_at(batch, 2), ImageFormat::kPpm);
  const Dataset d = load_dataset(dir.string());
  EXPECT_EQ(d.names, (std::vector<std::string>{"a.u8t", "b.ppm", "c.ppm"}));
  EXPECT_EQ(d.images, batch);
  EXPECT_THROW(load_dataset((dir / "nope").string()), FormatError);
  fs::remove_all(dir);
}

TEST(Synth, DeterministicAndVaried) {
  EXPECT_EQ(gen_synth(1, 5, 16, 16), gen_synth(1, 5, 16, 16));
  EXPECT_NE(gen_synth(1, 5, 16, 16), gen_synth(2, 5, 16, 16));
  const auto many = gen_synth(3, 100, 16, 16);
  std::set<int> values(many.vec().begin(), many.vec().end());
  EXPECT_GE(values.size(), 64u);
  EXPECT_EQ(many.shape(), (Shape{100, 3, 16, 16}));
}

TEST(Config, ParsesKeysCommentsAndLists) {
  const RunConfig rc = parse_config("# header\nlevels = 3 # trailing\nheight=32\nwidth=32\nlambda=1, 2,4,8\n\nseed=17\n");
  EXPECT_EQ(rc.flow.levels, 3);
  EXPECT_EQ(rc.flow.height, 32);
  EXPECT_EQ(rc.train.lambda, (std::vector<double>{1, 2, 4, 8}));
  EXPECT_EQ(rc.train.seed, 17u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("levls=2\n"), Error);
  EXPECT_THROW(parse_config("levels=two\n"), Error);
  EXPECT_THROW(parse_config("levels\n"), Error);
  EXPECT_THROW(parse_config("alpha=0.4\n"), Error);
  EXPECT_THROW(parse_config("lambda=\n"), Error);
}

TEST(Config, FormatRoundTrip) {
  const RunConfig rc = load_config(std::string(IODF_CONFIG_DIR) + "/desk.cfg");
  EXPECT_EQ(rc.flow.hidden, 32);
  EXPECT_EQ(format_config(parse_config(format_config(rc))), format_config(rc));
}

TEST(Cli, EndToEndAndExitCodes) {
  const fs::path dir = scratch_dir("cli");
  const std::string d = dir.string();
  const FlowModel m = quantized_model(small_config(), 12);
  save_model(m, d + "/m.bin");
  ASSERT_EQ(run_cli("gen-synth --out " + d + "/imgs --count 6 --height 8 --width 8 --seed 3"), 0);
  ASSERT_EQ(run_cli("compress --checkpoint " + d + "/m.bin --data " + d + "/imgs --out " + d + "/c.iodf --path int"), 0);
  ASSERT_EQ(run_cli("decompress --checkpoint " + d + "/m.bin --data " + d + "/c.iodf --out " + d + "/back"), 0);
  EXPECT_EQ(load_dataset(d + "/back").images, load_dataset(d + "/imgs").images);
  EXPECT_EQ(run_cli("eval --checkpoint " + d + "/m.bin --data " + d + "/imgs --path fake"), 0);

  EXPECT_EQ(run_cli("compress --bogus-flag"), 1);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("compress --checkpoint " + d + "/m.bin --data " + d + "/imgs --out " + d + "/x --path sideways"), 1);

  save_model(quantized_model(small_config(), 13), d + "/other.bin");
  EXPECT_EQ(run_cli("decompress --checkpoint " + d + "/other.bin --data " + d + "/c.iodf --out " + d + "/y"), 3);

  write_file(d + "/junk.iodf", std::vector<std::uint8_t>{1, 2, 3});
  EXPECT_EQ(run_cli("decompress --checkpoint " + d + "/m.bin --data " + d + "/junk.iodf --out " + d + "/z"), 2);
  EXPECT_EQ(run_cli("compress --checkpoint " + d + "/missing.bin --data " + d + "/imgs --out " + d + "/x"), 2);
  fs::remove_all(dir);
}
