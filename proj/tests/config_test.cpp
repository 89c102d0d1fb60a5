#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "smkd/config.hpp"
#include "smkd/error.hpp"

using namespace smkd;

namespace {

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected ConfigError";
  return "";
}

}  // namespace

TEST(ConfigFile, ParsesCommentsAndWhitespace) {
  auto f = ConfigFile::parse("# header\n\n  dataset = synthetic  # inline\nepochs=3\nlr_note = a b c\n", "x.cfg");
  EXPECT_EQ(f.get_string("dataset", ""), "synthetic");
  EXPECT_EQ(f.get_uint("epochs", 0), 3u);
  EXPECT_EQ(f.get_string("lr_note", ""), "a b c");
  EXPECT_EQ(f.entries().at("epochs").line, 4u);
  EXPECT_EQ(f.get_uint("missing", 7), 7u);
}

TEST(ConfigFile, MalformedLineNamesLine) {
  auto msg = message_of([] { ConfigFile::parse("dataset = synthetic\nepochs 3\n", "bad.cfg"); });
  EXPECT_NE(msg.find("bad.cfg:2"), std::string::npos) << msg;
}

TEST(ConfigFile, DuplicateKeyNamesBothLines) {
  auto msg = message_of([] { ConfigFile::parse("epochs = 1\nseed = 2\nepochs = 3\n", "d.cfg"); });
  EXPECT_NE(msg.find("d.cfg:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(ConfigFile, TypedAccessorsRejectGarbage) {
  auto f = ConfigFile::parse("a = 1.5x\nb = -3\nc = maybe\n", "t.cfg");
  EXPECT_THROW(f.get_double("a", 0), ConfigError);
  EXPECT_THROW(f.get_uint("b", 0), ConfigError);
  EXPECT_THROW(f.get_bool("c", false), ConfigError);
  auto msg = message_of([&] { f.get_uint("b", 0); });
  EXPECT_NE(msg.find("t.cfg:2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
}

TEST(Experiment, MissingRequiredKeyIsNamed) {
  auto msg = message_of([] { build_experiment(ConfigFile::parse("dataset = synthetic\n", "m.cfg")); });
  EXPECT_NE(msg.find("epochs"), std::string::npos) << msg;
}

TEST(Experiment, UnknownKeyNamesKeyAndLine) {
  auto msg = message_of([] { build_experiment(ConfigFile::parse("dataset = synthetic\nepochs = 1\nepoch = 2\n", "u.cfg")); });
  EXPECT_NE(msg.find("u.cfg:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'epoch'"), std::string::npos) << msg;
}

TEST(Experiment, InvalidValueNamesKey) {
  auto msg = message_of(
      [] { build_experiment(ConfigFile::parse("dataset = synthetic\nepochs = 1\nloss = hinge\n", "v.cfg")); });
  EXPECT_NE(msg.find("v.cfg:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'loss'"), std::string::npos) << msg;

  msg = message_of([] {
    build_experiment(ConfigFile::parse("dataset = synthetic\nepochs = 1\nimage_size = 30\npatch_size = 8\n", "g.cfg"));
  });
  EXPECT_NE(msg.find("image_size"), std::string::npos) << msg;
}

TEST(Experiment, CifarNeedsPath) {
  EXPECT_THROW(build_experiment(ConfigFile::parse("dataset = cifar10\nepochs = 1\n")), ConfigError);
}

TEST(Experiment, DerivedDefaults) {
  auto x = build_experiment(ConfigFile::parse("dataset = synthetic\nepochs = 4\nembed_dim = 32\nnum_heads = 2\n"
                                              "image_size = 16\npatch_size = 4\nseed = 9\n"));
  EXPECT_EQ(x.train.epochs, 4u);
  EXPECT_EQ(x.head.in_dim, 32u);
  EXPECT_EQ(x.train.global_aug.out_size, 16u);
  EXPECT_EQ(x.train.local_aug.out_size, 8u);
  EXPECT_EQ(x.eval.seed, 9u);
  EXPECT_EQ(x.data.synthetic.image_size, 16u);
  ASSERT_EQ(x.eval_modes.size(), 1u);
  EXPECT_EQ(x.eval_modes[0], x.eval.mode);
}

TEST(Experiment, ListsOfModesAndMethods) {
  auto x = build_experiment(ConfigFile::parse(
      "dataset = synthetic\nepochs = 5\neval_modes = cls, cls+weighted_avg_pool\neval_methods = prototype,linear\n"));
  ASSERT_EQ(x.eval_modes.size(), 2u);
  EXPECT_EQ(x.eval_modes[1], FeatureMode::parse("cls+weighted_avg_pool"));
  ASSERT_EQ(x.eval_methods.size(), 2u);
  EXPECT_EQ(x.eval_methods[1], EvalMethod::classifier);
}

TEST(Experiment, LoadsFromFileAndKeepsText) {
  auto path = std::filesystem::temp_directory_path() / "smkd_config_test.cfg";
  const std::string text = "dataset = synthetic\nepochs = 5\n";
  std::ofstream(path) << text;
  auto x = load_experiment(path);
  EXPECT_EQ(x.text, text);
  std::filesystem::remove(path);
  EXPECT_THROW(load_experiment(path), ConfigError);
}

TEST(ArchitectureHash, SensitiveToShapesOnly) {
  VitConfig v;
  HeadConfig h;
  const auto base = architecture_hash(v, h);
  EXPECT_EQ(base, architecture_hash(v, h));
  HeadConfig temp = h;
  temp.teacher_temp = 0.5;
  EXPECT_EQ(base, architecture_hash(v, temp));
  VitConfig deeper = v;
  deeper.depth += 1;
  EXPECT_NE(base, architecture_hash(deeper, h));
  HeadConfig wider = h;
  wider.out_dim *= 2;
  EXPECT_NE(base, architecture_hash(v, wider));
  EXPECT_EQ(hash_hex(0x1234).size(), 16u);
  EXPECT_EQ(hash_hex(0x1234), "0000000000001234");
}

TEST(LoadData, SyntheticSplitPartitionsClasses) {
  DataConfig d;
  d.synthetic.n_classes = 12;
  d.synthetic.per_class = 4;
  d.synthetic.image_size = 8;
  auto data = load_data(d);
  EXPECT_EQ(data.split.base.size(), 6u);
  EXPECT_EQ(data.split.novel.size(), 5u);
  EXPECT_EQ(data.base_indices.size(), 24u);
  EXPECT_EQ(data.novel.size(), 20u);
  for (auto i : data.base_indices) EXPECT_LT(data.all.labels[i], 6);
}
