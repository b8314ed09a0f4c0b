#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "sdvlm/metrics.hpp"
#include "sdvlm/vqa.hpp"

using namespace sdvlm;

namespace {

// Independent edit-distance oracle: plain recursion on suffixes, no shared
// structure with the production two-row DP.
int lev_oracle(const std::string& a, const std::string& b) {
  if (a.empty()) return int(b.size());
  if (b.empty()) return int(a.size());
  int cost = a[0] == b[0] ? 0 : 1;
  int del = lev_oracle(a.substr(1), b) + 1;
  int ins = lev_oracle(a, b.substr(1)) + 1;
  int sub = lev_oracle(a.substr(1), b.substr(1)) + cost;
  return std::min({del, ins, sub});
}

std::vector<std::string> all_strings_up_to(int max_len) {
  const char alpha[] = {'a', 'b', 'c'};
  std::vector<std::string> out = {""};
  std::vector<std::string> frontier = {""};
  for (int l = 0; l < max_len; ++l) {
    std::vector<std::string> next;
    for (const std::string& s : frontier)
      for (char c : alpha) next.push_back(s + c);
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

// ---- pixel-reading oracle -------------------------------------------------
// Classifies each grid cell straight from the rendered bytes: the colour is
// whatever non-black RGB appears, the shape is picked by how much of the
// cell the ink covers (full box ~ square, ~2/3 ~ triangle, ~1/2 ~ circle).

struct OracleCell {
  int color = -1;
  int shape = -1;
  bool empty() const { return color < 0; }
};

int classify_color(unsigned char r, unsigned char g, unsigned char b) {
  if (r == 255 && g == 0 && b == 0) return 0;
  if (r == 0 && g == 255 && b == 0) return 1;
  if (r == 0 && g == 0 && b == 255) return 2;
  if (r == 255 && g == 255 && b == 0) return 3;
  return -1;
}

std::vector<OracleCell> read_cells(const VQASample& s) {
  int g = s.grid;
  int cs = g == 4 ? 8 : 10;
  int off = g == 4 ? 0 : 1;
  int box = cs - 2;
  std::vector<OracleCell> out(size_t(g * g));
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      int filled = 0, color = -1;
      bool mixed = false;
      for (int y = 0; y < cs; ++y)
        for (int x = 0; x < cs; ++x) {
          size_t k = size_t((off + r * cs + y) * kImageSize + (off + c * cs + x)) * 3;
          if (s.image[k] == 0 && s.image[k + 1] == 0 && s.image[k + 2] == 0) continue;
          ++filled;
          int cc = classify_color(s.image[k], s.image[k + 1], s.image[k + 2]);
          if (color == -1) color = cc;
          else if (color != cc) mixed = true;
        }
      REQUIRE_FALSE(mixed);
      if (filled == 0) continue;
      REQUIRE(color >= 0);
      double ratio = double(filled) / double(box * box);
      const double refs[3] = {1.0, 0.47, 0.65};  // square, circle, triangle
      int best = 0;
      for (int i = 1; i < 3; ++i)
        if (std::abs(ratio - refs[i]) < std::abs(ratio - refs[best])) best = i;
      out[size_t(r * g + c)] = {color, best};
    }
  return out;
}

int word_index(const char* const* words, int n, const std::string& w) {
  for (int i = 0; i < n; ++i)
    if (w == words[i]) return i;
  return -1;
}

// Answers the sample's question using only the oracle's view of the image.
std::string oracle_answer(const VQASample& s, const std::vector<OracleCell>& cells) {
  std::stringstream ss(s.question);
  std::vector<std::string> q;
  std::string w;
  while (ss >> w) q.push_back(w);
  auto strip = [](std::string t) {
    while (!t.empty() && (t.back() == '?' || t.back() == '.')) t.pop_back();
    return t;
  };
  switch (s.family) {
    case TaskFamily::count_color: {
      int color = word_index(kColorWords.data(), 4, strip(q.at(2)));
      REQUIRE(color >= 0);
      int n = 0;
      for (const OracleCell& c : cells) n += (!c.empty() && c.color == color);
      return std::to_string(n);
    }
    case TaskFamily::count_shape: {
      int shape = word_index(kShapePlurals.data(), 3, strip(q.at(2)));
      REQUIRE(shape >= 0);
      int n = 0;
      for (const OracleCell& c : cells) n += (!c.empty() && c.shape == shape);
      return std::to_string(n);
    }
    case TaskFamily::color_at_cell: {
      // "what color is the shape at row R column C?"
      int row = std::stoi(q.at(7)), col = std::stoi(strip(q.at(9)));
      const OracleCell& c = cells.at(size_t((row - 1) * s.grid + (col - 1)));
      REQUIRE_FALSE(c.empty());
      return kColorWords[size_t(c.color)];
    }
    case TaskFamily::majority_color: {
      int hist[4] = {0, 0, 0, 0};
      for (const OracleCell& c : cells)
        if (!c.empty()) ++hist[c.color];
      int best = 0;
      for (int i = 1; i < 4; ++i)
        if (hist[i] > hist[best]) best = i;
      for (int i = 0; i < 4; ++i)
        if (i != best) REQUIRE(hist[i] < hist[best]);  // strict majority by construction
      return kColorWords[size_t(best)];
    }
    case TaskFamily::exists_shape: {
      int shape = word_index(kShapeWords.data(), 3, strip(q.at(3)));
      REQUIRE(shape >= 0);
      for (const OracleCell& c : cells)
        if (!c.empty() && c.shape == shape) return "yes";
      return "no";
    }
  }
  return "";
}

}  // namespace

TEST_CASE("levenshtein basics") {
  CHECK(levenshtein("abc", "abc") == 0);
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("abc", "") == 3);
  CHECK(levenshtein("", "") == 0);
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("flaw", "lawn") == 2);
}

TEST_CASE("levenshtein counts codepoints, not bytes") {
  CHECK(levenshtein("caf\xc3\xa9", "cafe") == 1);        // café vs cafe
  CHECK(levenshtein("\xe6\x97\xa5\xe6\x9c\xac", "") == 2);  // two CJK chars
  CHECK(levenshtein("\xe6\x97\xa5", "\xe6\x9c\xac") == 1);
}

TEST_CASE("levenshtein agrees with exhaustive recursive oracle") {
  std::vector<std::string> strs = all_strings_up_to(4);
  REQUIRE(strs.size() == 121);  // 1+3+9+27+81
  for (const std::string& a : strs)
    for (const std::string& b : strs) {
      CAPTURE(a);
      CAPTURE(b);
      REQUIRE(levenshtein(a, b) == lev_oracle(a, b));
    }
}

TEST_CASE("anls scoring") {
  CHECK(anls("red", {"red"}) == doctest::Approx(1.0));
  CHECK(anls("RED", {"red"}) == doctest::Approx(1.0));  // case-insensitive
  CHECK(anls("abc", {"xyz"}) == doctest::Approx(0.0));  // NL = 1 >= tau
  CHECK(anls("12", {"123"}) == doctest::Approx(2.0 / 3.0));
  CHECK(anls("red", {"blue", "red"}) == doctest::Approx(1.0));  // max over golds
  // NL just under tau survives; at tau it is clamped to zero
  CHECK(anls("abcd", {"abxy"}) == doctest::Approx(0.0));       // NL = 0.5 = tau
  CHECK(anls("abcde", {"abcxy"}) == doctest::Approx(0.6));     // NL = 0.4
  CHECK(anls("", {"x"}) == doctest::Approx(0.0));
  CHECK_THROWS_AS((void)anls("x", {}), std::invalid_argument);
}

TEST_CASE("answer extraction") {
  CHECK(extract_answer("3") == "3");
  CHECK(extract_answer("the answer is 3") == "3");
  CHECK(extract_answer("the answer is three.") == "3");
  CHECK(extract_answer("Red") == "red");
  CHECK(extract_answer("i see 2 red squares") == "2");  // first lexicon hit wins
  CHECK(extract_answer("it might be yes") == "yes");
  CHECK(extract_answer("lorem ipsum dolor") == "dolor");  // fallback: last token
  CHECK(extract_answer("") == "");
  CHECK(accuracy("the answer is 3", "3") == 1);
  CHECK(accuracy("the answer is three", "3") == 1);
  CHECK(accuracy("4", "3") == 0);
  CHECK(accuracy("no", "yes") == 0);
}

TEST_CASE("generator is deterministic and splits are disjoint") {
  auto [tr1, ev1] = generate_dataset(99, 25, 10);
  auto [tr2, ev2] = generate_dataset(99, 25, 10);
  REQUIRE(tr1.size() == 25);
  REQUIRE(ev1.size() == 10);
  for (size_t i = 0; i < tr1.size(); ++i) {
    CHECK(tr1[i].question == tr2[i].question);
    CHECK(tr1[i].gold == tr2[i].gold);
    REQUIRE(tr1[i].image == tr2[i].image);
  }
  std::set<int> ids;
  for (const auto& s : tr1) ids.insert(s.sample_id);
  for (const auto& s : ev1) ids.insert(s.sample_id);
  CHECK(ids.size() == tr1.size() + ev1.size());

  auto [tr3, ev3] = generate_dataset(100, 25, 10);
  bool any_diff = false;
  for (size_t i = 0; i < tr1.size(); ++i) any_diff |= tr1[i].image != tr3[i].image;
  CHECK(any_diff);  // different seed actually changes content
}

TEST_CASE("task families are balanced within one sample") {
  auto [train, eval] = generate_dataset(7, 123, 17);
  std::map<TaskFamily, int> hist;
  for (const auto& s : train) ++hist[s.family];
  int lo = 1 << 30, hi = 0;
  for (int f = 0; f < kNumFamilies; ++f) {
    lo = std::min(lo, hist[TaskFamily(f)]);
    hi = std::max(hi, hist[TaskFamily(f)]);
  }
  CHECK(hi - lo <= 1);
}

TEST_CASE("gold counts match brute force over the placement list") {
  auto [train, eval] = generate_dataset(21, 200, 1);
  int seen = 0;
  for (const auto& s : train) {
    if (s.family == TaskFamily::count_color) {
      std::stringstream ss(s.question);
      std::string how, many, colorw;
      ss >> how >> many >> colorw;
      int color = word_index(kColorWords.data(), 4, colorw);
      REQUIRE(color >= 0);
      int n = 0;
      for (const Cell& c : s.cells) n += (!c.empty() && c.color == color);
      REQUIRE(std::to_string(n) == s.gold);
      ++seen;
    } else if (s.family == TaskFamily::count_shape) {
      std::stringstream ss(s.question);
      std::string how, many, shapew;
      ss >> how >> many >> shapew;
      int shape = word_index(kShapePlurals.data(), 3, shapew);
      REQUIRE(shape >= 0);
      int n = 0;
      for (const Cell& c : s.cells) n += (!c.empty() && c.shape == shape);
      REQUIRE(std::to_string(n) == s.gold);
      ++seen;
    }
  }
  CHECK(seen == 80);  // two of five families over 200 samples
}

TEST_CASE("answers cover their ranges") {
  auto [train, eval] = generate_dataset(3, 700, 1);
  std::map<std::string, int> count_hist, color_hist, yesno_hist;
  for (const auto& s : train) {
    if (s.family == TaskFamily::count_color || s.family == TaskFamily::count_shape)
      ++count_hist[s.gold];
    if (s.family == TaskFamily::color_at_cell || s.family == TaskFamily::majority_color)
      ++color_hist[s.gold];
    if (s.family == TaskFamily::exists_shape) ++yesno_hist[s.gold];
  }
  for (int k = 0; k <= 6; ++k) {
    CAPTURE(k);
    CHECK(count_hist[std::to_string(k)] >= 10);  // 280 count samples over 7 buckets
  }
  for (const char* c : kColorWords) CHECK(color_hist[c] >= 20);
  CHECK(yesno_hist["yes"] >= 40);
  CHECK(yesno_hist["no"] >= 40);
}

TEST_CASE("rendered pixels are flat colors on black") {
  auto [train, eval] = generate_dataset(5, 40, 1);
  for (const auto& s : train) {
    REQUIRE(s.image.size() == size_t(kImageSize) * kImageSize * 3);
    for (unsigned char b : s.image) REQUIRE((b == 0 || b == 255));
    auto f = s.image_floats();
    REQUIRE(f.size() == s.image.size());
    for (double v : f) REQUIRE((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("pixel-reading oracle re-derives every gold answer") {
  auto [train, eval] = generate_dataset(11, 150, 50);
  int checked = 0;
  auto run = [&](const std::vector<VQASample>& split) {
    for (const VQASample& s : split) {
      CAPTURE(s.sample_id);
      CAPTURE(s.question);
      std::vector<OracleCell> cells = read_cells(s);
      // oracle cell view must match the generator's placement list exactly
      for (size_t i = 0; i < cells.size(); ++i) {
        REQUIRE(cells[i].empty() == s.cells[i].empty());
        if (!cells[i].empty()) {
          REQUIRE(cells[i].color == s.cells[i].color);
          REQUIRE(cells[i].shape == s.cells[i].shape);
        }
      }
      REQUIRE(oracle_answer(s, cells) == s.gold);
      ++checked;
    }
  };
  run(train);
  run(eval);
  CHECK(checked == 200);
}

TEST_CASE("render rejects malformed input") {
  CHECK_THROWS_AS((void)render_cells(4, std::vector<Cell>(9)), std::invalid_argument);
  CHECK_THROWS_AS((void)render_cells(5, std::vector<Cell>(25)), std::invalid_argument);
  CHECK_THROWS_AS((void)generate_dataset(1, 0, 5), std::invalid_argument);
}

TEST_CASE("dataset save/load round-trip") {
  auto [train, eval] = generate_dataset(13, 12, 3);
  std::string dir = "vqa_rt_dir";
  save_dataset(dir, "train", train);
  std::vector<VQASample> back = load_dataset(dir, "train");
  REQUIRE(back.size() == train.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].sample_id == train[i].sample_id);
    CHECK(back[i].family == train[i].family);
    CHECK(back[i].grid == train[i].grid);
    CHECK(back[i].question == train[i].question);
    CHECK(back[i].gold == train[i].gold);
    REQUIRE(back[i].image == train[i].image);
    REQUIRE(back[i].cells.size() == train[i].cells.size());
    for (size_t j = 0; j < back[i].cells.size(); ++j) {
      CHECK(back[i].cells[j].color == train[i].cells[j].color);
      CHECK(back[i].cells[j].shape == train[i].cells[j].shape);
    }
  }
  CHECK_THROWS_AS((void)load_dataset(dir, "nope"), std::runtime_error);
  std::remove((dir + "/train.csv").c_str());
  std::remove((dir + "/train.rgb").c_str());
}

TEST_CASE("evaluate: rigged always-correct decoder scores exactly 1.0") {
  auto [train, eval] = generate_dataset(17, 5, 30);
  auto echo = [](const VQASample& s) { return "the answer is " + s.gold; };
  EvalReport acc = evaluate(echo, eval, "accuracy", 17, "cfg");
  EvalReport an = evaluate(echo, eval, "anls", 17, "cfg");
  CHECK(acc.aggregate == 1.0);
  CHECK(an.aggregate == 1.0);
  CHECK(acc.n_samples == 30);
  CHECK(acc.rows.size() == 30);
  for (const EvalRow& r : acc.rows) CHECK(r.extracted == r.gold);
  CHECK_THROWS_AS((void)evaluate(echo, eval, "f1", 0, ""), std::invalid_argument);
}

TEST_CASE("evaluate: exact-match rate never exceeds ANLS aggregate") {
  auto [train, eval] = generate_dataset(19, 5, 60);
  auto noisy = [](const VQASample& s) -> std::string {
    switch (s.sample_id % 3) {
      case 0: return s.gold;
      case 1: return "zqx";                  // garbage, not in lexicon
      default: return s.gold + s.gold;       // near miss
    }
  };
  EvalReport acc = evaluate(noisy, eval, "accuracy");
  EvalReport an = evaluate(noisy, eval, "anls");
  CHECK(acc.aggregate > 0.0);
  CHECK(acc.aggregate < 1.0);
  CHECK(acc.aggregate <= an.aggregate + 1e-12);
  double mean = 0.0;
  for (const EvalRow& r : an.rows) mean += r.score;
  mean /= double(an.rows.size());
  CHECK(an.aggregate == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("report csv is written with one row per sample") {
  auto [train, eval] = generate_dataset(23, 5, 8);
  auto echo = [](const VQASample& s) { return s.gold; };
  EvalReport rep = evaluate(echo, eval, "accuracy", 23, "deadbeef");
  std::string path = "eval_report_test.csv";
  save_report_csv(rep, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line.find("metric=accuracy") != std::string::npos);
  CHECK(line.find("config=deadbeef") != std::string::npos);
  std::getline(in, line);
  CHECK(line == "sample_id,family,gold,raw,extracted,score");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 8);
  std::remove(path.c_str());
}
