#include "protossl/datagen.hpp"

#include <nlohmann/json.hpp>
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace protossl;
namespace fs = std::filesystem;

namespace {

GenConfig small_config() {
  GenConfig cfg;
  cfg.pretrain_groups = 24;
  cfg.pretrain_val_groups = 8;
  cfg.target_train = 160;
  cfg.target_val = 48;
  cfg.target_test = 64;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("window counts") {
  WindowSpec spec{20, 10};
  CHECK(spec.count(200) == 19);  // (200-20)/10 + 1

  Vec sample = Vec::LinSpaced(3 * 200, 0, 1);
  Mat w = window_matrix(sample, 3, 200, spec);
  CHECK(w.rows() == 19);
  CHECK(w.cols() == 60);

  WindowSpec whole{40, 40};
  Vec s2 = Vec::Zero(40);
  CHECK(window_matrix(s2, 1, 40, whole).rows() == 1);

  WindowSpec disjoint{20, 20};
  Vec s3 = Vec::LinSpaced(40, 0, 39);
  Mat w3 = window_matrix(s3, 1, 40, disjoint);
  CHECK(w3.rows() == 2);
  CHECK(w3(0, 0) == 0.0);
  CHECK(w3(1, 0) == 20.0);  // second window starts at stride
}

TEST_CASE("window slice content matches source") {
  WindowSpec spec{4, 2};
  Vec sample(2 * 8);
  for (Index i = 0; i < sample.size(); ++i) sample(i) = static_cast<double>(i);
  Mat w = window_matrix(sample, 2, 8, spec);
  CHECK(w.rows() == 3);
  // window 1 starts at t=2; channel 1 occupies [8..16) in the flat sample
  CHECK(w(1, 0) == 2.0);
  CHECK(w(1, 4) == 10.0);
}

TEST_CASE("generate rejects infeasible configs") {
  GenConfig cfg = small_config();
  cfg.max_motifs = 11;  // 11 * 20 > 200
  CHECK_THROWS_AS(generate(cfg, Rng(1, "gen")), std::invalid_argument);

  GenConfig bad_stride = small_config();
  bad_stride.window.stride = 7;  // (200-20) % 7 != 0
  CHECK_THROWS_AS(generate(bad_stride, Rng(1, "gen")), std::invalid_argument);

  GenConfig tiny = small_config();
  tiny.target_train = 3;  // < num_labels
  CHECK_THROWS_AS(generate(tiny, Rng(1, "gen")), std::invalid_argument);
}

TEST_CASE("zero-noise groups are identical waveforms") {
  GenConfig cfg = small_config();
  cfg.noise_sigma = 0.0;
  cfg.min_motifs = 1;
  cfg.max_motifs = 1;
  auto out = generate(cfg, Rng(3, "gen"));
  for (Index g = 0; g < cfg.pretrain_groups; ++g) {
    CHECK(out.pretrain_train.X.row(2 * g) == out.pretrain_train.X.row(2 * g + 1));
    CHECK(out.pretrain_train.group_ids[static_cast<std::size_t>(2 * g)] ==
          out.pretrain_train.group_ids[static_cast<std::size_t>(2 * g + 1)]);
  }
}

TEST_CASE("generated corpus structure") {
  GenConfig cfg = small_config();
  auto out = generate(cfg, Rng(7, "gen"));

  CHECK(out.target_train.size() == cfg.target_train);
  CHECK(out.target_train.num_labels() == cfg.num_labels);
  CHECK(out.library.motifs.size() == 25);  // 6 labels x 2 variants + confounder + 12 distractors

  // every label positive in every split
  for (const Dataset* ds : {&out.target_train, &out.target_val, &out.target_test}) {
    for (Index l = 0; l < ds->num_labels(); ++l) {
      CHECK(ds->Y.col(l).sum() >= 1.0);
    }
  }

  // group ids never span splits
  std::set<std::int64_t> seen;
  for (const Dataset* ds : {&out.pretrain_train, &out.pretrain_val, &out.target_train,
                            &out.target_val, &out.target_test}) {
    std::set<std::int64_t> ids(ds->group_ids.begin(), ds->group_ids.end());
    for (auto id : ids) CHECK(seen.count(id) == 0);
    seen.insert(ids.begin(), ids.end());
  }

  // unit-peak motif templates
  for (const auto& m : out.library.motifs) {
    CHECK(m.waveform.cwiseAbs().maxCoeff() == doctest::Approx(1.0));
  }

  // finite data
  CHECK(all_finite(out.target_train.X));
  CHECK(all_finite(out.pretrain_train.X));
}

TEST_CASE("same seed gives byte-identical dataset files") {
  GenConfig cfg = small_config();
  const fs::path d1 = fs::temp_directory_path() / "protossl_gen_a";
  const fs::path d2 = fs::temp_directory_path() / "protossl_gen_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  save_dataset(generate(cfg, Rng(11, "gen")).target_train, d1, {{"seed", 11}});
  save_dataset(generate(cfg, Rng(11, "gen")).target_train, d2, {{"seed", 11}});
  CHECK(slurp(d1 / "data.bin") == slurp(d2 / "data.bin"));
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));

  auto round = load_dataset(d1);
  CHECK(round.size() == cfg.target_train);
  CHECK(round.channels == cfg.channels);
  CHECK(round.split == "target_train");
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("different seeds differ") {
  GenConfig cfg = small_config();
  auto a = generate(cfg, Rng(1, "gen"));
  auto b = generate(cfg, Rng(2, "gen"));
  CHECK(a.target_train.X != b.target_train.X);
}

TEST_CASE("nested subsets: nesting, coverage, stratification") {
  GenConfig cfg = small_config();
  cfg.target_train = 512;
  auto out = generate(cfg, Rng(5, "gen"));
  const auto& train = out.target_train;

  auto subsets = nested_subsets(train, {512, 128, 32}, Rng(5, "sub"));
  REQUIRE(subsets.size() == 3);
  CHECK(subsets[0].size() == 512);
  CHECK(subsets[1].size() == 128);
  CHECK(subsets[2].size() == 32);

  for (std::size_t i = 0; i + 1 < subsets.size(); ++i) {
    std::set<Index> parent(subsets[i].begin(), subsets[i].end());
    for (Index idx : subsets[i + 1]) CHECK(parent.count(idx) == 1);
  }

  Vec full_rate = train.Y.colwise().mean();
  for (const auto& sub : subsets) {
    Dataset view = train.rows(sub);
    for (Index l = 0; l < train.num_labels(); ++l) {
      const double pos = view.Y.col(l).sum();
      CHECK(pos >= 1.0);
      if (train.Y.col(l).sum() >= 20.0) {
        const double rate = pos / static_cast<double>(view.size());
        CHECK(rate >= 0.5 * full_rate(l));
        CHECK(rate <= 1.5 * full_rate(l));
      }
    }
  }

  // sizes=[N] is the identity subset
  auto full = nested_subsets(train, {512}, Rng(5, "sub"));
  CHECK(full[0].size() == 512);

  CHECK_THROWS_AS(nested_subsets(train, {128, 128}, Rng(1, "sub")), std::invalid_argument);
  CHECK_THROWS_AS(nested_subsets(train, {4}, Rng(1, "sub")), std::invalid_argument);
}

TEST_CASE("a label with a single positive is forced into every subset") {
  // hand-built corpus: label 2 has exactly one positive (sample 17)
  Dataset ds;
  ds.channels = 1;
  ds.timesteps = 4;
  ds.split = "target_train";
  const Index n = 64;
  ds.X = Mat::Zero(n, 4);
  ds.Y = Mat::Zero(n, 3);
  for (Index i = 0; i < n; ++i) {
    ds.Y(i, i % 2) = 1.0;
    ds.group_ids.push_back(i);
  }
  ds.Y(17, 2) = 1.0;
  ds.label_names = {"a", "b", "c"};

  auto subsets = nested_subsets(ds, {32, 8}, Rng(9, "sub"));
  for (const auto& sub : subsets) {
    CHECK(std::count(sub.begin(), sub.end(), 17) == 1);
  }
}
