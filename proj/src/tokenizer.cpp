#include "sdvlm/tokenizer.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace sdvlm {

namespace {
bool is_split_punct(char c) {
  return c == '.' || c == ',' || c == '?' || c == '!' || c == ':' || c == ';';
}
}  // namespace

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0, n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= n) break;
    size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    // peel punctuation off both ends of the whitespace-delimited chunk
    size_t a = i, b = j;
    while (a < b && is_split_punct(text[a])) out.push_back(std::string(1, text[a++]));
    std::vector<std::string> tail;
    while (b > a && is_split_punct(text[b - 1])) tail.push_back(std::string(1, text[--b]));
    if (b > a) out.push_back(text.substr(a, b - a));
    out.insert(out.end(), tail.rbegin(), tail.rend());
    i = j;
  }
  return out;
}

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  tokens_ = {kBos, kEos, kPad, kImg, kSep};
  std::set<std::string> uniq(words.begin(), words.end());
  for (const std::string& s : tokens_) uniq.erase(s);
  tokens_.insert(tokens_.end(), uniq.begin(), uniq.end());
  for (size_t k = 0; k < tokens_.size(); ++k) ids_[tokens_[k]] = int(k);
}

Tokenizer Tokenizer::from_corpus(const std::vector<std::string>& texts) {
  std::vector<std::string> words;
  for (const std::string& t : texts) {
    auto ws = split_words(t);
    words.insert(words.end(), ws.begin(), ws.end());
  }
  return Tokenizer(words);
}

int Tokenizer::id(const std::string& tok) const {
  auto it = ids_.find(tok);
  if (it == ids_.end()) throw std::invalid_argument("tokenizer: unknown token '" + tok + "'");
  return it->second;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= vocab_size())
    throw std::invalid_argument("tokenizer: id " + std::to_string(id) + " outside vocab of " +
                                std::to_string(vocab_size()));
  return tokens_[size_t(id)];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> out;
  for (const std::string& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids, bool skip_special) const {
  std::string out;
  for (int id : ids) {
    const std::string& t = token(id);
    if (skip_special && id < 5) continue;
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

}  // namespace sdvlm
