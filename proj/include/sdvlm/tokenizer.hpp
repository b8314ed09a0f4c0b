#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace sdvlm {

// Word-level tokenizer over a fixed vocabulary: specials first, then the
// corpus words in sorted order. Punctuation .,?!:; splits off as its own
// token so question marks don't multiply the vocabulary.
class Tokenizer {
 public:
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kImg = "<img>";
  static constexpr const char* kSep = "<sep>";

  Tokenizer() = default;
  // words: any iteration order, deduplicated and sorted internally.
  explicit Tokenizer(const std::vector<std::string>& words);

  static Tokenizer from_corpus(const std::vector<std::string>& texts);
  static std::vector<std::string> split_words(const std::string& text);

  int id(const std::string& tok) const;  // throws std::invalid_argument on unknown
  bool contains(const std::string& tok) const { return ids_.count(tok) > 0; }
  const std::string& token(int id) const;

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids, bool skip_special = true) const;

  int bos() const { return 0; }
  int eos() const { return 1; }
  int pad() const { return 2; }
  int img() const { return 3; }
  int sep() const { return 4; }
  int vocab_size() const { return int(tokens_.size()); }
  const std::vector<std::string>& vocab() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace sdvlm
