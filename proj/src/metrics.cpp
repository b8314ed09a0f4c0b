#include "sdvlm/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace sdvlm {

namespace {

// UTF-8 → scalar values; bytes that do not form a valid sequence are taken
// one-by-one so the distance is still defined on arbitrary input.
std::vector<uint32_t> codepoints(const std::string& s) {
  std::vector<uint32_t> out;
  size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    int extra = 0;
    uint32_t cp = c;
    if (c >= 0xF0) { extra = 3; cp = c & 0x07u; }
    else if (c >= 0xE0) { extra = 2; cp = c & 0x0Fu; }
    else if (c >= 0xC0) { extra = 1; cp = c & 0x1Fu; }
    if (extra > 0 && i + size_t(extra) >= s.size()) extra = 0;
    bool ok = true;
    for (int k = 1; k <= extra; ++k) {
      unsigned char cc = static_cast<unsigned char>(s[i + size_t(k)]);
      if ((cc & 0xC0u) != 0x80u) { ok = false; break; }
      cp = (cp << 6) | (cc & 0x3Fu);
    }
    if (extra && ok) i += size_t(extra) + 1;
    else { cp = c; ++i; }
    out.push_back(cp);
  }
  return out;
}

std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return out;
}

const std::unordered_map<std::string, std::string>& digit_words() {
  static const std::unordered_map<std::string, std::string> m = {
      {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"}, {"four", "4"},
      {"five", "5"}, {"six", "6"}, {"seven", "7"}, {"eight", "8"}, {"nine", "9"}};
  return m;
}

const std::unordered_set<std::string>& answer_lexicon() {
  static const std::unordered_set<std::string> lex = [] {
    std::unordered_set<std::string> s;
    for (int d = 0; d <= 9; ++d) s.insert(std::to_string(d));
    for (const char* w : kColorWords) s.insert(w);
    for (const char* w : kShapeWords) s.insert(w);
    s.insert("yes");
    s.insert("no");
    return s;
  }();
  return lex;
}

std::string normalize_token(const std::string& tok) {
  std::string t;
  for (char c : tok)
    if (!std::ispunct(static_cast<unsigned char>(c))) t += char(std::tolower(static_cast<unsigned char>(c)));
  auto it = digit_words().find(t);
  return it == digit_words().end() ? t : it->second;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

int levenshtein(const std::string& a, const std::string& b) {
  std::vector<uint32_t> x = codepoints(a), y = codepoints(b);
  size_t n = x.size(), m = y.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = int(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = int(i);
    for (size_t j = 1; j <= m; ++j) {
      int sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double anls(const std::string& pred, const std::vector<std::string>& gold_list) {
  if (gold_list.empty()) throw std::invalid_argument("anls: empty gold list");
  std::string p = lower(pred);
  size_t plen = codepoints(p).size();
  double best = 0.0;
  for (const std::string& g0 : gold_list) {
    std::string g = lower(g0);
    size_t glen = codepoints(g).size();
    double denom = double(std::max({plen, glen, size_t(1)}));
    double nl = levenshtein(p, g) / denom;
    double s = nl < kAnlsTau ? 1.0 - nl : 0.0;
    best = std::max(best, s);
  }
  return best;
}

std::string extract_answer(const std::string& decoded) {
  std::stringstream ss(decoded);
  std::string tok, last;
  while (ss >> tok) {
    std::string t = normalize_token(tok);
    if (t.empty()) continue;
    if (answer_lexicon().count(t)) return t;
    last = t;
  }
  return last;
}

int accuracy(const std::string& pred, const std::string& gold) {
  return extract_answer(pred) == normalize_token(gold) ? 1 : 0;
}

EvalReport evaluate(const std::function<std::string(const VQASample&)>& decode_fn,
                    const std::vector<VQASample>& dataset, const std::string& metric,
                    uint64_t seed, const std::string& config_hash) {
  if (metric != "anls" && metric != "accuracy")
    throw std::invalid_argument("evaluate: unknown metric '" + metric + "' (use anls or accuracy)");
  EvalReport rep;
  rep.metric = metric;
  rep.seed = seed;
  rep.config_hash = config_hash;
  rep.n_samples = int(dataset.size());
  double total = 0.0;
  for (const VQASample& s : dataset) {
    EvalRow row;
    row.sample_id = s.sample_id;
    row.family = family_name(s.family);
    row.gold = s.gold;
    row.raw = decode_fn(s);
    row.extracted = extract_answer(row.raw);
    if (metric == "accuracy") row.score = accuracy(row.raw, s.gold);
    else row.score = anls(row.extracted, {s.gold});
    total += row.score;
    rep.rows.push_back(std::move(row));
  }
  rep.aggregate = rep.rows.empty() ? 0.0 : total / double(rep.rows.size());
  return rep;
}

void save_report_csv(const EvalReport& rep, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot write report");
  out << "# metric=" << rep.metric << " aggregate=" << rep.aggregate
      << " n=" << rep.n_samples << " seed=" << rep.seed << " config=" << rep.config_hash << "\n";
  out << "sample_id,family,gold,raw,extracted,score\n";
  for (const EvalRow& r : rep.rows)
    out << r.sample_id << ',' << r.family << ',' << csv_quote(r.gold) << ',' << csv_quote(r.raw)
        << ',' << csv_quote(r.extracted) << ',' << r.score << '\n';
  if (!out) throw std::runtime_error(path + ": report write failed");
}

}  // namespace sdvlm
