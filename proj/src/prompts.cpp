#include "sdvlm/prompts.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "sdvlm/rng.hpp"

namespace sdvlm {

namespace {

// Placeholder scan: every {word} must be an allowed placeholder.
void check_placeholders(const std::string& text, const std::set<std::string>& allowed,
                        const std::set<std::string>& required, const std::string& where) {
  std::set<std::string> seen;
  for (size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '{') continue;
    size_t j = text.find('}', i);
    if (j == std::string::npos)
      throw std::invalid_argument(where + ": unbalanced '{'");
    std::string ph = text.substr(i + 1, j - i - 1);
    if (!allowed.count(ph))
      throw std::invalid_argument(where + ": unknown placeholder {" + ph + "}");
    seen.insert(ph);
    i = j;
  }
  for (const std::string& r : required)
    if (!seen.count(r))
      throw std::invalid_argument(where + ": missing placeholder {" + r + "}");
}

std::string substitute(std::string text, const std::string& key, const std::string& value) {
  std::string pat = "{" + key + "}";
  size_t pos = 0;
  while ((pos = text.find(pat, pos)) != std::string::npos) {
    text.replace(pos, pat.size(), value);
    pos += value.size();
  }
  return text;
}

std::string escape_field(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '|') out += "\\|";
    else if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

std::vector<std::string> split_record(const std::string& line, const std::string& where) {
  std::vector<std::string> fields(1);
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (c == '\\') {
      if (i + 1 >= line.size()) throw std::invalid_argument(where + ": dangling escape");
      char e = line[++i];
      if (e == 'n') fields.back() += '\n';
      else if (e == '|' || e == '\\') fields.back() += e;
      else throw std::invalid_argument(where + ": bad escape \\" + std::string(1, e));
    } else if (c == '|') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

}  // namespace

PromptLibrary::PromptLibrary(std::vector<PromptTemplate> templates)
    : templates_(std::move(templates)) {
  validate();
}

void PromptLibrary::validate() const {
  if (templates_.empty()) throw std::invalid_argument("prompt library: empty");
  std::set<int> ids;
  for (const PromptTemplate& t : templates_) {
    std::string where = "prompt " + std::to_string(t.id) + " (" + t.name + ")";
    if (!ids.insert(t.id).second)
      throw std::invalid_argument(where + ": duplicate id");
    check_placeholders(t.step1, {"images", "question"}, {"images", "question"},
                       where + " step1");
    check_placeholders(t.step2, {"images", "question", "query1_answer"},
                       {"images", "question", "query1_answer"}, where + " step2");
  }
  // dense 1..N
  for (int want = 1; want <= int(templates_.size()); ++want)
    if (!ids.count(want))
      throw std::invalid_argument("prompt library: ids not dense, missing " +
                                  std::to_string(want));
}

const PromptTemplate& PromptLibrary::by_id(int id) const {
  for (const PromptTemplate& t : templates_)
    if (t.id == id) return t;
  throw std::invalid_argument("prompt library: no template with id " + std::to_string(id));
}

uint64_t PromptLibrary::checksum() const {
  uint64_t h = fnv1a64("prompt-library-v1");
  for (const PromptTemplate& t : templates_) {
    h = fnv1a64(&t.id, sizeof(t.id), h);
    for (const std::string* s : {&t.name, &t.step1, &t.step2}) {
      uint64_t len = s->size();
      h = fnv1a64(&len, sizeof(len), h);
      h = fnv1a64(s->data(), s->size(), h);
    }
  }
  return h;
}

std::string render_step1(const PromptTemplate& t, const std::string& question) {
  if (question.empty()) throw std::invalid_argument("render_step1: empty question");
  std::string out = substitute(t.step1, "question", question);
  return substitute(out, "images", "<img>");
}

std::string render_step2(const PromptTemplate& t, const std::string& question,
                         const std::string& query1_answer) {
  if (question.empty()) throw std::invalid_argument("render_step2: empty question");
  std::string out = substitute(t.step2, "question", question);
  out = substitute(out, "query1_answer", query1_answer);
  return substitute(out, "images", "<img>");
}

std::string render_bare(const std::string& question) {
  if (question.empty()) throw std::invalid_argument("render_bare: empty question");
  return "<img> question : " + question + " answer :";
}

void PromptLibrary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << "# two-step prompt templates: id|name|step1|step2 (\\| \\n \\\\ escapes)\n";
  for (const PromptTemplate& t : templates_) {
    f << t.id << '|' << escape_field(t.name) << '|' << escape_field(t.step1) << '|'
      << escape_field(t.step2) << '\n';
  }
  if (!f) throw std::runtime_error(path + ": write failed");
}

PromptLibrary PromptLibrary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::vector<PromptTemplate> ts;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::string where = path + ":" + std::to_string(lineno);
    auto fields = split_record(line, where);
    if (fields.size() != 4)
      throw std::invalid_argument(where + ": expected 4 fields, got " +
                                  std::to_string(fields.size()));
    PromptTemplate t;
    try {
      t.id = std::stoi(fields[0]);
    } catch (const std::exception&) {
      throw std::invalid_argument(where + ": bad id '" + fields[0] + "'");
    }
    t.name = fields[1];
    t.step1 = fields[2];
    t.step2 = fields[3];
    ts.push_back(std::move(t));
  }
  return PromptLibrary(std::move(ts));
}

PromptLibrary PromptLibrary::defaults() {
  std::vector<PromptTemplate> ts;

  ts.push_back({1, "information-extraction",
                R"([INST] Look at the image:
1. What objects/regions are important?
2. Which parts relate to the question?
[/INST]
[INST] User:
{images}
Question: {question}
[/INST]
Analysis:)",
                R"([INST]Given your analysis above, provide the final answer to the question.[/INST]
[INST] USER: {images} [/INST]
[INST] Question: {question} [/INST]
[INST] {query1_answer} [/INST]
Answer:)"});

  ts.push_back({2, "reasoning-path-planning",
                R"([INST] USER: {images}
Based on the image, Question:
{question}
Please first plan a reasoning path without filling in the data. The reasoning path should reflect the path toward the final answer based on both the image and text questions. Please use the structural knowledge triplet to represent the analysis.
[/INST]
Reasoning path:)",
                R"([INST] USER: {images}
Based on the image and planned reasoning path from the image:
{query1_answer}
please answer the question briefly
{question}
[/INST]
[INST] Assistant: the answer is [/INST]
Answer:)"});

  ts.push_back({3, "text-layout-analysis",
                R"([INST] USER: {images}
Based on the image, please:
1. Extract all visible text from the image
2. Describe the layout and positioning of text/elements
3. Note any tables, lists, or structured content.
Do not answer the question yet.
Question: {question}
[/INST]
Layout Analysis:)",
                R"([INST] USER: {images}
Using the extracted text and layout information:
{query1_answer}
Please answer the question:
{question}
[/INST]
[INST] Assistant: The answer is [/INST]
Answer:)"});

  ts.push_back({4, "visualization-understanding",
                R"([INST] USER: {images}
Based on the image, please analyze:
1. What type of visualization is this (e.g., bar chart, line plot, scatter plot)?
2. What data types are represented (e.g., categorical, numerical, temporal)?
3. Identify key visual components (axes, legends, labels)'
Question: {question}
[/INST]
Analysis:)",
                R"([INST] USER: {images}
Using the visualization analysis:
{query1_answer}
Please answer the visualization-related question:
{question}
[/INST]
[INST] Assistant: The answer is [/INST]
Answer:)"});

  ts.push_back({5, "region-attention-analysis",
                R"([INST] USER: {images}
Based on the image and question: {question}
Please first:
1. Identify the specific regions of interest in the image
2. Explain why these regions are crucial for the question
3. Note any relationships between different regions
Do not answer the question yet, only identify relevant regions.
[/INST]
Region Analysis:)",
                R"([INST] USER: {images}
Using the identified regions of interest:
{query1_answer}
Now focus on these regions to answer:
{question}
[/INST]
[INST] Assistant: Based on the identified regions, the answer is [/INST]
Answer:)"});

  ts.push_back({6, "math-decomposition",
                R"([INST] USER: {images}
For this math question: {question}
Please analyze:
1. What mathematical elements are visible (numbers, equations, graphs)?
2. What mathematical operations/concepts are needed?
3. Break down the problem into calculation steps

Do not solve yet, only outline the mathematical approach.
[/INST]
Math Analysis:)",
                R"([INST] USER: {images}
Using the mathematical analysis:
{query1_answer}
Now solve step by step:
{question}
[/INST]
[INST] Assistant: Following the steps above, the answer is [/INST]
Answer:)"});

  ts.push_back({7, "scientific-reasoning",
                R"([INST] USER: {images}
For this science question: {question}
Please analyze:
1. What scientific elements/data are shown in the image?
2. What scientific concepts are involved?
3. What external scientific knowledge is needed to answer this?
   - Required theories/principles
   - Relevant formulas/relationships
   - Key scientific terminology
Do not answer yet, only analyze information and knowledge needs.
[/INST]
Science Analysis:)",
                R"([INST] USER: {images}
Based on:
1. Image information: {query1_answer}
2. Required scientific knowledge above
Please solve:
{question}
[/INST]
[INST] Assistant: Applying the scientific concepts, the answer is [/INST]
Answer:)"});

  ts.push_back({8, "concept-alignment",
                R"([INST] USER: {images}
Based on the image, Question:
{question}
Please analyze:
1. What are the key concepts present in both question and image?
2. Where exactly are these concepts shown in the image?
3. How does the overall scene context support these concepts?
Do not answer yet, only provide concept analysis.
[/INST]
Concept Analysis:)",
                R"([INST] USER: {images}
Based on the concept analysis:
{query1_answer}
Please answer concisely:
{question}
[/INST]
[INST] Assistant: Based on the identified concepts, the answer is [/INST]
Answer:)"});

  return PromptLibrary(std::move(ts));
}

}  // namespace sdvlm
