#pragma once

#include <string>
#include <vector>

namespace sdvlm {

// A two-step prompt: step 1 asks for an analysis of the image, step 2 feeds
// that analysis back and asks for the final answer.
struct PromptTemplate {
  int id = 0;            // 1-based, dense
  std::string name;
  std::string step1;     // placeholders {images},{question}
  std::string step2;     // placeholders {images},{question},{query1_answer}
};

class PromptLibrary {
 public:
  // the eight appendix prompts
  static PromptLibrary defaults();
  // text file, one record per line: id|name|step1|step2 with \| \n \\ escapes
  static PromptLibrary load(const std::string& path);
  void save(const std::string& path) const;

  explicit PromptLibrary(std::vector<PromptTemplate> templates);
  const PromptTemplate& by_id(int id) const;  // throws on unknown id
  const std::vector<PromptTemplate>& templates() const { return templates_; }
  int size() const { return int(templates_.size()); }
  // content hash; trace caches record it to pin the library they came from
  uint64_t checksum() const;

 private:
  std::vector<PromptTemplate> templates_;
  void validate() const;
};

// Pure text substitution; {images} becomes the tokenizer's <img> sentinel,
// expanded to the patch span when the text is tokenized.
std::string render_step1(const PromptTemplate& t, const std::string& question);
std::string render_step2(const PromptTemplate& t, const std::string& question,
                         const std::string& query1_answer);

// Single-step input form without any reasoning scaffold. Pretraining, the
// distilled student, and single-step evaluation all consume this rendering so
// their accuracies are comparable.
std::string render_bare(const std::string& question);

}  // namespace sdvlm
