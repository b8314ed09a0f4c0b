#include "sdvlm/vqa.hpp"

#include "sdvlm/rng.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sdvlm {

namespace {

constexpr unsigned char kColorRgb[4][3] = {
    {255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {255, 255, 0}};

struct GridGeom {
  int cs;   // cell size in pixels
  int off;  // outer margin
};
GridGeom geom(int grid) {
  if (grid == 4) return {8, 0};
  if (grid == 3) return {10, 1};
  throw std::invalid_argument("render: grid must be 3 or 4, got " + std::to_string(grid));
}

void draw_cell(std::vector<unsigned char>& img, int grid, int r, int c, const Cell& cell) {
  auto [cs, off] = geom(grid);
  int ox = off + c * cs, oy = off + r * cs;
  int b = cs - 2;
  const unsigned char* rgb = kColorRgb[cell.color];
  auto plot = [&](int x, int y) {
    int px = ox + x, py = oy + y;
    size_t k = size_t(py * kImageSize + px) * 3;
    img[k] = rgb[0];
    img[k + 1] = rgb[1];
    img[k + 2] = rgb[2];
  };
  double cx = cs / 2.0, cy = cs / 2.0;
  switch (cell.shape) {
    case 0:  // square: the full inset box
      for (int y = 1; y <= b; ++y)
        for (int x = 1; x <= b; ++x) plot(x, y);
      break;
    case 1: {  // circle
      double rad = b / 2.0 - 0.5;
      for (int y = 0; y < cs; ++y)
        for (int x = 0; x < cs; ++x) {
          double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          if (dx * dx + dy * dy <= rad * rad) plot(x, y);
        }
      break;
    }
    case 2:  // triangle: apex up, base at the bottom of the box
      for (int i = 0; i < b; ++i) {
        double hw = (i + 1) / 2.0;
        for (int x = 0; x < cs; ++x)
          if (std::abs(x + 0.5 - cx) <= hw) plot(x, 1 + i);
      }
      break;
    default:
      throw std::invalid_argument("render: bad shape index " + std::to_string(cell.shape));
  }
}

std::string count_question(TaskFamily f, int idx) {
  if (f == TaskFamily::count_color)
    return std::string("how many ") + kColorWords[size_t(idx)] + " shapes are there?";
  return std::string("how many ") + kShapePlurals[size_t(idx)] + " are there?";
}

}  // namespace

const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::count_color: return "count-color";
    case TaskFamily::count_shape: return "count-shape";
    case TaskFamily::color_at_cell: return "color-at-cell";
    case TaskFamily::majority_color: return "majority-color";
    case TaskFamily::exists_shape: return "exists-shape";
  }
  throw std::invalid_argument("bad task family");
}

TaskFamily family_from_name(const std::string& s) {
  for (int i = 0; i < kNumFamilies; ++i)
    if (s == family_name(TaskFamily(i))) return TaskFamily(i);
  throw std::invalid_argument("unknown task family '" + s + "'");
}

std::vector<double> VQASample::image_floats() const {
  std::vector<double> out(image.size());
  for (size_t i = 0; i < image.size(); ++i) out[i] = image[i] / 255.0;
  return out;
}

std::vector<unsigned char> render_cells(int grid, const std::vector<Cell>& cells) {
  geom(grid);  // validates the grid size
  if (int(cells.size()) != grid * grid)
    throw std::invalid_argument("render: " + std::to_string(cells.size()) + " cells for a " +
                                std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  std::vector<unsigned char> img(size_t(kImageSize) * kImageSize * 3, 0);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      const Cell& cell = cells[size_t(r * grid + c)];
      if (!cell.empty()) draw_cell(img, grid, r, c, cell);
    }
  return img;
}

namespace {

VQASample make_sample(uint64_t seed, int index) {
  Rng rng(derive_seed(seed, "vqa-sample-" + std::to_string(index)));
  VQASample s;
  s.sample_id = index;
  s.grid = rng.uniform_int(2) == 0 ? 3 : 4;
  s.family = TaskFamily(index % kNumFamilies);
  int n = s.grid * s.grid;
  s.cells.assign(size_t(n), Cell{});

  // shuffled cell order: targets first, distractors after
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[size_t(i)] = i;
  rng.shuffle(order);

  auto rand_color = [&](int avoid = -1) {
    int c;
    do c = int(rng.uniform_int(4));
    while (c == avoid);
    return c;
  };
  auto rand_shape = [&](int avoid = -1) {
    int sh;
    do sh = int(rng.uniform_int(3));
    while (sh == avoid);
    return sh;
  };

  switch (s.family) {
    case TaskFamily::count_color: {
      int color = int(rng.uniform_int(4));
      int k = int(rng.uniform_int(7));  // uniform 0..6
      for (int i = 0; i < k; ++i) s.cells[size_t(order[size_t(i)])] = {color, rand_shape()};
      for (int i = k; i < n; ++i)
        if (rng.uniform_int(2) == 0)
          s.cells[size_t(order[size_t(i)])] = {rand_color(color), rand_shape()};
      s.question = count_question(s.family, color);
      s.gold = std::to_string(k);
      break;
    }
    case TaskFamily::count_shape: {
      int shape = int(rng.uniform_int(3));
      int k = int(rng.uniform_int(7));
      for (int i = 0; i < k; ++i) s.cells[size_t(order[size_t(i)])] = {rand_color(), shape};
      for (int i = k; i < n; ++i)
        if (rng.uniform_int(2) == 0)
          s.cells[size_t(order[size_t(i)])] = {rand_color(), rand_shape(shape)};
      s.question = count_question(s.family, shape);
      s.gold = std::to_string(k);
      break;
    }
    case TaskFamily::color_at_cell: {
      int row = int(rng.uniform_int(uint64_t(s.grid))), col = int(rng.uniform_int(uint64_t(s.grid)));
      int color = int(rng.uniform_int(4));
      s.cells[size_t(row * s.grid + col)] = {color, rand_shape()};
      for (int i = 0; i < n; ++i) {
        int ci = order[size_t(i)];
        if (ci == row * s.grid + col) continue;
        if (rng.uniform_int(2) == 0) s.cells[size_t(ci)] = {rand_color(), rand_shape()};
      }
      s.question = "what color is the shape at row " + std::to_string(row + 1) + " column " +
                   std::to_string(col + 1) + "?";
      s.gold = kColorWords[size_t(color)];
      break;
    }
    case TaskFamily::majority_color: {
      int color = int(rng.uniform_int(4));
      int m = 2 + int(rng.uniform_int(3));  // 2..4 majority cells
      int placed = 0;
      for (int i = 0; i < m; ++i) s.cells[size_t(order[size_t(i)])] = {color, rand_shape()};
      placed = m;
      for (int other = 0; other < 4 && placed < n; ++other) {
        if (other == color) continue;
        int cnt = int(rng.uniform_int(uint64_t(m)));  // strictly fewer than m
        for (int i = 0; i < cnt && placed < n; ++i)
          s.cells[size_t(order[size_t(placed++)])] = {other, rand_shape()};
      }
      s.question = "which color appears most often?";
      s.gold = kColorWords[size_t(color)];
      break;
    }
    case TaskFamily::exists_shape: {
      int shape = int(rng.uniform_int(3));
      bool yes = rng.uniform_int(2) == 0;
      int start = 0;
      if (yes) {
        int k = 1 + int(rng.uniform_int(3));
        for (int i = 0; i < k; ++i) s.cells[size_t(order[size_t(i)])] = {rand_color(), shape};
        start = k;
      }
      for (int i = start; i < n; ++i)
        if (rng.uniform_int(2) == 0)
          s.cells[size_t(order[size_t(i)])] = {rand_color(), rand_shape(shape)};
      s.question = std::string("is there a ") + kShapeWords[size_t(shape)] + "?";
      s.gold = yes ? "yes" : "no";
      break;
    }
  }
  s.image = render_cells(s.grid, s.cells);
  return s;
}

}  // namespace

std::pair<std::vector<VQASample>, std::vector<VQASample>> generate_dataset(uint64_t seed,
                                                                           int n_train,
                                                                           int n_eval) {
  if (n_train < 1 || n_eval < 1)
    throw std::invalid_argument("generate_dataset: splits must be non-empty");
  std::vector<VQASample> train, eval;
  train.reserve(size_t(n_train));
  eval.reserve(size_t(n_eval));
  for (int i = 0; i < n_train; ++i) train.push_back(make_sample(seed, i));
  for (int i = 0; i < n_eval; ++i) eval.push_back(make_sample(seed, n_train + i));
  return {std::move(train), std::move(eval)};
}

std::vector<std::string> question_space() {
  std::vector<std::string> qs;
  for (size_t c = 0; c < kColorWords.size(); ++c)
    qs.push_back(count_question(TaskFamily::count_color, int(c)));
  for (size_t s = 0; s < kShapeWords.size(); ++s)
    qs.push_back(count_question(TaskFamily::count_shape, int(s)));
  for (int row = 1; row <= 4; ++row)
    for (int col = 1; col <= 4; ++col)
      qs.push_back("what color is the shape at row " + std::to_string(row) + " column " +
                   std::to_string(col) + "?");
  qs.push_back("which color appears most often?");
  for (const char* sh : kShapeWords) qs.push_back(std::string("is there a ") + sh + "?");
  return qs;
}

void save_dataset(const std::string& dir, const std::string& name,
                  const std::vector<VQASample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir + "/" + name + ".csv", std::ios::trunc);
  std::ofstream rgb(dir + "/" + name + ".rgb", std::ios::binary | std::ios::trunc);
  if (!csv || !rgb) throw std::runtime_error(dir + ": cannot write dataset");
  csv << "sample_id,family,grid,cells,question,gold\n";
  for (const VQASample& s : samples) {
    std::string cells;
    for (const Cell& c : s.cells) {
      if (c.empty()) cells += "--";
      else {
        cells += char('0' + c.color);
        cells += char('0' + c.shape);
      }
    }
    csv << s.sample_id << ',' << family_name(s.family) << ',' << s.grid << ',' << cells << ','
        << s.question << ',' << s.gold << '\n';
    rgb.write(reinterpret_cast<const char*>(s.image.data()), std::streamsize(s.image.size()));
  }
  if (!csv || !rgb) throw std::runtime_error(dir + ": dataset write failed");
}

std::vector<VQASample> load_dataset(const std::string& dir, const std::string& name) {
  std::ifstream csv(dir + "/" + name + ".csv");
  std::ifstream rgb(dir + "/" + name + ".rgb", std::ios::binary);
  if (!csv || !rgb) throw std::runtime_error(dir + "/" + name + ": dataset files missing");
  std::vector<VQASample> out;
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string part;
    // question is the 5th field and contains no commas by construction
    while (std::getline(ss, part, ',')) f.push_back(part);
    if (f.size() != 6) throw std::runtime_error(dir + "/" + name + ": bad csv row");
    VQASample s;
    s.sample_id = std::stoi(f[0]);
    s.family = family_from_name(f[1]);
    s.grid = std::stoi(f[2]);
    int n = s.grid * s.grid;
    if (int(f[3].size()) != 2 * n) throw std::runtime_error(dir + "/" + name + ": bad cells");
    for (int i = 0; i < n; ++i) {
      char a = f[3][size_t(2 * i)], b = f[3][size_t(2 * i + 1)];
      if (a == '-') s.cells.push_back(Cell{});
      else s.cells.push_back(Cell{a - '0', b - '0'});
    }
    s.question = f[4];
    s.gold = f[5];
    s.image.resize(size_t(kImageSize) * kImageSize * 3);
    rgb.read(reinterpret_cast<char*>(s.image.data()), std::streamsize(s.image.size()));
    if (!rgb) throw std::runtime_error(dir + "/" + name + ": rgb blob truncated");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sdvlm
