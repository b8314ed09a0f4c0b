#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sdvlm {

// 32x32 RGB scenes: a g-by-g grid of colored shapes, questions from five
// task families, gold answers derivable from the placement list.

constexpr int kImageSize = 32;

inline constexpr std::array<const char*, 4> kColorWords = {"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 3> kShapeWords = {"square", "circle", "triangle"};
inline constexpr std::array<const char*, 3> kShapePlurals = {"squares", "circles", "triangles"};

enum class TaskFamily : int {
  count_color = 0,
  count_shape,
  color_at_cell,
  majority_color,
  exists_shape,
};
constexpr int kNumFamilies = 5;
const char* family_name(TaskFamily f);
TaskFamily family_from_name(const std::string& s);  // throws on unknown

struct Cell {
  int color = -1;  // index into kColorWords, -1 empty
  int shape = -1;  // index into kShapeWords
  bool empty() const { return color < 0; }
};

struct VQASample {
  int sample_id = 0;
  int grid = 4;  // g in {3, 4}
  std::vector<Cell> cells;            // g*g, row-major
  std::vector<unsigned char> image;   // 32*32*3, RGB
  std::string question;
  std::string gold;
  TaskFamily family = TaskFamily::count_color;

  std::vector<double> image_floats() const;  // u8/255 in [0,1]
};

// Deterministic rasterizer (also used by tests to re-render placements).
std::vector<unsigned char> render_cells(int grid, const std::vector<Cell>& cells);

// Round-robin task families, uniform answer targets, one deterministic
// stream: train takes the first n_train samples, eval the next n_eval.
std::pair<std::vector<VQASample>, std::vector<VQASample>> generate_dataset(uint64_t seed,
                                                                           int n_train,
                                                                           int n_eval);

// Every question phrasing the generator can produce, so vocabularies built
// from this list are closed over any dataset.
std::vector<std::string> question_space();

// <dir>/<name>.csv (index incl. placements) + <dir>/<name>.rgb (raw u8 blobs)
void save_dataset(const std::string& dir, const std::string& name,
                  const std::vector<VQASample>& samples);
std::vector<VQASample> load_dataset(const std::string& dir, const std::string& name);

}  // namespace sdvlm
