#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "targprof/dataset.hpp"
#include "targprof/errors.hpp"

using namespace targprof;

namespace {

Dataset from_text(const std::string& text, LoadConfig cfg = {}) {
  return dataset_from_table(parse_csv(text), cfg);
}

Dataset toy_counts(const std::vector<int>& counts) {
  std::string text = "y,provider,w1\n";
  for (std::size_t a = 0; a < counts.size(); ++a) {
    for (int i = 0; i < counts[a]; ++i) {
      text += "0.5,p" + std::to_string(a) + ",0.1\n";
    }
  }
  return from_text(text);
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("loads a small table with string provider labels") {
  const auto d = from_text(
      "y,provider,w1\n"
      "1,A,0.1\n"
      "0,B,0.2\n"
      "1,A,0.3\n"
      "0,B,0.4\n");
  CHECK(d.n() == 4);
  CHECK(d.k() == 1);
  CHECK(d.m() == 2);
  CHECK(d.provider_labels[0] == "A");
  CHECK(d.provider_labels[1] == "B");
  CHECK(d.provider == std::vector<int>{0, 1, 0, 1});
  CHECK(d.binary_outcome);
  // order preserving: row i of the file is observation i
  CHECK(d.y[2] == 1.0);
  CHECK(d.x(3, 0) == 0.4);
}

TEST_CASE("outcome kind is inferred and overridable") {
  CHECK(from_text("y,provider,w1\n0,A,1\n1,B,2\n").binary_outcome);
  CHECK_FALSE(from_text("y,provider,w1\n0.5,A,1\n1,B,2\n").binary_outcome);
  LoadConfig cont;
  cont.outcome_kind = "continuous";
  CHECK_FALSE(from_text("y,provider,w1\n0,A,1\n1,B,2\n", cont).binary_outcome);
  LoadConfig bin;
  bin.outcome_kind = "binary";
  CHECK_THROWS_WITH_AS(from_text("y,provider,w1\n0.5,A,1\n1,B,2\n", bin),
                       doctest::Contains("outside {0, 1}"), ValidationError);
}

TEST_CASE("load errors name the row and column") {
  CHECK_THROWS_WITH_AS(from_text("y,provider,w1\n1,A,0.1\n0,B,0.2\n,A,0.3\n"),
                       doctest::Contains("row 3"), ValidationError);
  CHECK_THROWS_WITH_AS(from_text("y,provider,w1\n1,A,abc\n"), doctest::Contains("'w1'"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(from_text("y,provider,w1\n1,A\n"), doctest::Contains("fields"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(from_text("y,provider,w1\n1,A,inf\n"), doctest::Contains("non-finite"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(from_text("outcome,provider,w1\n1,A,1\n"),
                       doctest::Contains("outcome column 'y' not found"), ValidationError);
}

TEST_CASE("covariate columns default to names starting with w") {
  const auto d = from_text("y,provider,w1,ignored,w2\n1,A,0.1,9,0.2\n0,B,0.3,9,0.4\n");
  CHECK(d.k() == 2);
  CHECK(d.covariate_names == std::vector<std::string>{"w1", "w2"});
  LoadConfig cfg;
  cfg.covariate_cols = {"ignored"};
  const auto d2 = from_text("y,provider,w1,ignored,w2\n1,A,0.1,9,0.2\n0,B,0.3,9,0.4\n", cfg);
  CHECK(d2.k() == 1);
  CHECK(d2.x(0, 0) == 9.0);
}

TEST_CASE("load_csv reads from disk") {
  const std::string path = "dataset_load_test.csv";
  {
    std::ofstream out(path);
    out << "y,provider,w1\n1,A,0.5\n0,B,0.25\n";
  }
  const auto d = load_csv(path, LoadConfig{});
  CHECK(d.n() == 2);
  CHECK(d.provider_labels[1] == "B");
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_csv(path, LoadConfig{}), ValidationError);
}

TEST_CASE("minimum-volume filter drops small providers and reindexes") {
  const auto d = toy_counts({150, 40});
  const auto f = filter_min_volume(d, 100);
  CHECK(f.data.m() == 1);
  CHECK(f.data.n() == 150);
  CHECK(f.data.provider_labels == std::vector<std::string>{"p0"});
  CHECK(f.dropped_labels == std::vector<std::string>{"p1"});
  CHECK(f.dropped_rows == 40);
  for (int p : f.data.provider) CHECK(p == 0);
}

TEST_CASE("minimum-volume filter identity and failure cases") {
  const auto d = toy_counts({5, 3});
  const auto same = filter_min_volume(d, 1);
  CHECK(same.data.n() == d.n());
  CHECK(same.dropped_labels.empty());
  const auto small = toy_counts({99, 99});
  CHECK_THROWS_WITH_AS(filter_min_volume(small, 100), doctest::Contains("removed every provider"),
                       ValidationError);
}

TEST_CASE("folds partition the rows with balanced provider strata") {
  const auto d = toy_counts({101, 47, 13});
  const auto fa = make_folds(d, 10, 42);
  REQUIRE(static_cast<int>(fa.fold.size()) == d.n());
  std::vector<std::vector<int>> per_provider_fold_counts(3, std::vector<int>(10, 0));
  for (int i = 0; i < d.n(); ++i) {
    REQUIRE(fa.fold[i] >= 0);
    REQUIRE(fa.fold[i] < 10);
    ++per_provider_fold_counts[d.provider[i]][fa.fold[i]];
  }
  for (int a = 0; a < 3; ++a) {
    int lo = d.n(), hi = 0;
    for (int c : per_provider_fold_counts[a]) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    CHECK(hi - lo <= 1);
  }
  // validation/training accessors cover every row exactly once
  const auto va = fa.validation_rows();
  std::set<int> seen;
  for (const auto& rows : va) {
    for (int r : rows) CHECK(seen.insert(r).second);
  }
  CHECK(static_cast<int>(seen.size()) == d.n());
}

TEST_CASE("fold sizes are forced when they divide evenly") {
  const auto d = toy_counts({10});
  const auto fa = make_folds(d, 5, 7);
  std::vector<int> sizes(5, 0);
  for (int f : fa.fold) ++sizes[f];
  for (int s : sizes) CHECK(s == 2);
}

TEST_CASE("overall fold sizes differ by at most one") {
  const auto d = toy_counts({101});
  const auto fa = make_folds(d, 10, 3);
  std::vector<int> sizes(10, 0);
  for (int f : fa.fold) ++sizes[f];
  for (int s : sizes) {
    CHECK(s >= 10);
    CHECK(s <= 11);
  }
}

TEST_CASE("fold assignment is deterministic and seed-sensitive") {
  const auto d = toy_counts({40, 25});
  const auto a = make_folds(d, 5, 11);
  const auto b = make_folds(d, 5, 11);
  CHECK(a.fold == b.fold);
  const auto c = make_folds(d, 5, 12);
  CHECK(a.fold != c.fold);
}

TEST_CASE("providers smaller than the fold count are flagged") {
  const auto d = toy_counts({20, 3});
  const auto fa = make_folds(d, 5, 2);
  REQUIRE(fa.warnings.size() == 1);
  CHECK(fa.warnings[0].find("p1") != std::string::npos);
  // the provider's rows still land in distinct folds, keeping it present in
  // every training split
  std::set<int> folds_hit;
  for (int i = 0; i < d.n(); ++i) {
    if (d.provider[i] == 1) folds_hit.insert(fa.fold[i]);
  }
  CHECK(folds_hit.size() == 3);
}

TEST_CASE("single-fold debug mode assigns everything to fold zero") {
  const auto d = toy_counts({7, 4});
  const auto fa = make_folds(d, 1, 9);
  for (int f : fa.fold) CHECK(f == 0);
  CHECK(fa.training_rows()[0].size() == 11);  // J=1 trains on all rows
}

TEST_CASE("binary outcomes pass through scaling untouched") {
  const auto d = from_text("y,provider,w1\n0,A,1\n1,B,2\n1,A,3\n");
  const auto s = scale_outcomes(d, 0.005);
  CHECK(s.alpha == 0.0);
  CHECK(s.beta == 1.0);
  CHECK(apply_scale(d.y, s) == d.y);
}

TEST_CASE("continuous outcomes map onto the shrunken unit interval") {
  const auto d = from_text("y,provider,w1\n2,A,1\n4,B,2\n");
  const auto s = scale_outcomes(d, 0.005);
  CHECK(s.lo == 2.0);
  CHECK(s.hi == 4.0);
  CHECK(s.to_scaled(2.0) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(s.to_scaled(4.0) == doctest::Approx(0.995).epsilon(1e-12));
}

TEST_CASE("scaling round-trips to the original values") {
  const auto d = from_text("y,provider,w1\n-1,A,1\n0,B,2\n3,A,3\n");
  const auto s = scale_outcomes(d, 0.005);
  for (int i = 0; i < d.n(); ++i) {
    CHECK(s.to_original(s.to_scaled(d.y[i])) == doctest::Approx(d.y[i]).epsilon(1e-12));
  }
}

TEST_CASE("degenerate scales are rejected") {
  const auto d = from_text("y,provider,w1\n2.5,A,1\n2.5,B,2\n");
  CHECK_THROWS_WITH_AS(scale_outcomes(d, 0.005), doctest::Contains("constant"), ValidationError);
  const auto ok = from_text("y,provider,w1\n1,A,1\n2,B,2\n");
  CHECK_THROWS_AS(scale_outcomes(ok, 0.0), ValidationError);
  CHECK_THROWS_AS(scale_outcomes(ok, 0.5), ValidationError);
}

}  // TEST_SUITE
