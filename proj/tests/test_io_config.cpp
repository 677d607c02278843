#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "come/config.hpp"
#include "come/io.hpp"

using namespace come;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("come_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.sources = 2;
  c.classes = 3;
  c.experts = 4;
  c.top_k = 2;
  c.expert_hidden = 6;
  c.fine_centers = 4;
  c.coarse_centers = 2;
  return c;
}

}  // namespace

TEST(Sha256, KnownDigests) {
  EXPECT_EQ(sha256_hex({}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string abc = "abc";
  EXPECT_EQ(sha256_hex({reinterpret_cast<const unsigned char*>(abc.data()), abc.size()}),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(FormatReal, RoundTripsAndNan) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678}) EXPECT_EQ(std::stod(format_real(v)), v);
  EXPECT_EQ(format_real(NAN), "nan");
  EXPECT_EQ(format_real(0.5), "0.5");
}

TEST(Dataset, RoundTripIsExact) {
  const fs::path dir = temp_dir("dataset");
  DataConfig c;
  c.width = 8;
  c.tokens = 3;
  c.samples = 20;
  c.seed = 5;
  const Dataset d = gen_dataset(c);
  write_dataset(dir / "train.bin", d.train);
  EXPECT_EQ(read_dataset(dir / "train.bin"), d.train);
}

TEST(Dataset, RejectsCorruptFiles) {
  const fs::path dir = temp_dir("corrupt");
  write_text(dir / "bad.bin", "NOPE0000");
  EXPECT_THROW(read_dataset(dir / "bad.bin"), std::runtime_error);
  DataConfig c;
  c.width = 8;
  c.tokens = 2;
  c.samples = 5;
  write_dataset(dir / "ok.bin", gen_dataset(c).train);
  const auto size = fs::file_size(dir / "ok.bin");
  fs::resize_file(dir / "ok.bin", size - 3);
  EXPECT_THROW(read_dataset(dir / "ok.bin"), std::runtime_error);
  EXPECT_THROW(read_dataset(dir / "missing.bin"), std::runtime_error);
}

TEST(Checkpoint, RoundTripRestoresRoundedParameters) {
  const fs::path dir = temp_dir("checkpoint");
  ComeModel model(tiny_model(), 7);
  const Checkpoint ck = make_checkpoint(model, R"({"note":"x"})");
  write_checkpoint(dir / "ck.bin", ck);
  const Checkpoint back = read_checkpoint(dir / "ck.bin");
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(back.frozen_seeds, (std::vector<std::uint64_t>{1001, 2002}));
  ASSERT_EQ(back.blobs.size(), ck.blobs.size());
  ModelParams restored = params_from_checkpoint(back, model.config());
  auto names = model.params().names();
  auto original = model.params().pointers();
  auto loaded = restored.pointers();
  ASSERT_EQ(original.size(), loaded.size());
  for (std::size_t i = 0; i < original.size(); ++i)
    for (std::size_t k = 0; k < original[i]->size(); ++k)
      EXPECT_EQ(loaded[i]->values()[k], static_cast<double>(static_cast<float>(original[i]->values()[k])))
          << names[i];
}

TEST(Checkpoint, RejectsShapeMismatchAndTrailingBytes) {
  const fs::path dir = temp_dir("checkpoint_bad");
  ComeModel model(tiny_model(), 7);
  const Checkpoint ck = make_checkpoint(model, "{}");
  ModelConfig wider = tiny_model();
  wider.experts = 6;
  EXPECT_THROW(params_from_checkpoint(ck, wider), std::runtime_error);
  write_checkpoint(dir / "ck.bin", ck);
  {
    std::ofstream out(dir / "ck.bin", std::ios::app | std::ios::binary);
    out << "x";
  }
  EXPECT_THROW(read_checkpoint(dir / "ck.bin"), std::runtime_error);
}

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c = parse_run_config("{}");
  EXPECT_EQ(c.train.steps, 2000u);
  EXPECT_EQ(c.train.batch_size, 8u);
  EXPECT_DOUBLE_EQ(c.train.optimizer.lr, 1.4e-4);
  EXPECT_EQ(c.model.experts, 8u);
  EXPECT_DOUBLE_EQ(c.model.capacity_factor, 1.25);
  const RunConfig again = parse_run_config(dump_run_config(c));
  EXPECT_EQ(dump_run_config(again), dump_run_config(c));
}

TEST(Config, RejectsUnknownAndIllTypedKeys) {
  EXPECT_THROW(parse_run_config(R"({"model":{"expertz":4}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"extra":{}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"model":{"experts":"four"}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"train":{"steps":-1}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"model":{"clustering":"spectral"}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("{not json"), std::invalid_argument);
  try {
    parse_run_config(R"({"model":{"expertz":4}})");
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("model.expertz"), std::string::npos);
  }
}

TEST(Config, OverridesApplyOnTop) {
  const std::vector<std::string> sets{"model.top_k=3", "model.clustering=multistep",
                                      "train.lr=0.001", "ablation.no_tb=true"};
  const RunConfig c = load_run_config(R"({"model":{"top_k":2}})", sets);
  EXPECT_EQ(c.model.top_k, 3u);
  EXPECT_EQ(c.model.clustering, ClusterStrategy::multistep);
  EXPECT_DOUBLE_EQ(c.train.optimizer.lr, 0.001);
  EXPECT_TRUE(c.ablation.no_tb);
  const std::vector<std::string> bad{"model.nope=1"};
  EXPECT_THROW(load_run_config("", bad), std::invalid_argument);
  const std::vector<std::string> malformed{"model.top_k"};
  EXPECT_THROW(load_run_config("", malformed), std::invalid_argument);
}

TEST(Config, ValidationCatchesInconsistentRuns) {
  RunConfig c = parse_run_config("{}");
  c.model.top_k = 9;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = parse_run_config("{}");
  c.model.experts = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.ablation.no_tb = true;
  EXPECT_NO_THROW(c.validate());
  c = parse_run_config("{}");
  c.model.kind = ModelKind::dense;
  c.ablation.no_ste = true;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, KeysAreDottedAndUnique) {
  const auto keys = config_keys();
  std::set<std::string> unique(keys.begin(), keys.end());
  EXPECT_EQ(unique.size(), keys.size());
  EXPECT_TRUE(unique.count("model.capacity_factor"));
  EXPECT_TRUE(unique.count("data.weights"));
}
