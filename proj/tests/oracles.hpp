#pragma once

// Reference implementations written against the documented rules, kept apart
// from the runtime code they check.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace forgeloop::oracle {

struct Block {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string tag;
  std::string body;
};

struct Scan {
  std::vector<Block> blocks;
  bool marker = false;
};

inline std::string lower_ascii(std::string s) {
  for (auto &c : s) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return s;
}

inline std::string strip(const std::string &s) {
  const char *ws = " \t\r\n\f\v";
  const auto a = s.find_first_not_of(ws);
  if (a == std::string::npos) {
    return "";
  }
  return s.substr(a, s.find_last_not_of(ws) - a + 1);
}

// Walks lines with getline, tracking open/closed fence state.
inline Scan scan(const std::string &text, const std::string &marker = "[AWAIT_HUMAN]") {
  struct Line {
    std::size_t offset;
    std::string content;
  };
  std::vector<Line> lines;
  std::istringstream in(text);
  std::string raw;
  std::size_t offset = 0;
  while (offset < text.size() && std::getline(in, raw)) {
    Line l{offset, raw};
    offset += raw.size() + 1;
    if (!l.content.empty() && l.content.back() == '\r') {
      l.content.pop_back();
    }
    lines.push_back(std::move(l));
  }

  Scan out;
  std::vector<bool> fenced(lines.size(), false);
  std::size_t open_line = 0;
  bool open = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto &c = lines[i].content;
    const bool three = c.rfind("```", 0) == 0;
    if (!open) {
      if (three && c.find('`', 3) == std::string::npos) {
        open = true;
        open_line = i;
      }
      continue;
    }
    if (three && (c.size() == 3 || c[3] == ' ' || c[3] == '\t')) {
      Block b;
      b.start = lines[open_line].offset;
      b.end = lines[i].offset + 3;
      std::string rest = strip(lines[open_line].content.substr(3));
      b.tag = lower_ascii(rest.substr(0, rest.find_first_of(" \t")));
      const auto body_from = open_line + 1 < lines.size() ? lines[open_line + 1].offset : text.size();
      b.body = text.substr(body_from, lines[i].offset - body_from);
      out.blocks.push_back(b);
      for (std::size_t k = open_line; k <= i; ++k) {
        fenced[k] = true;
      }
      open = false;
    }
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (!fenced[i] && strip(lines[i].content) == marker) {
      out.marker = true;
    }
  }
  return out;
}

// Responses assembled from fence-like lines, prose, markers and awkward line endings.
inline std::string random_response(std::mt19937_64 &gen) {
  static const std::vector<std::string> pieces = {
      "```python",     "```",          "```cmd",         "```bash",       "``` ",          "````",
      "```PowerShell", "```sh -x",     "```py`thon",     "  ```",         "```\t",         "```shell",
      "print(1)",      "dir",          "echo a",         ":: note",       "# comment",     "REM x",
      "[AWAIT_HUMAN]", " [AWAIT_HUMAN] ", "prose with ``` inline ``` fences", "",            "x = \"```\"",
      "```unknown",    "``",           "`",              "caf\xc3\xa9 \xe2\x9c\x93", "\xff\xfe", "```  Python  ",
  };
  static const std::vector<std::string> eols = {"\n", "\n", "\n", "\r\n", "\r", ""};
  std::uniform_int_distribution<std::size_t> count(0, 24);
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  std::uniform_int_distribution<std::size_t> eol(0, eols.size() - 1);
  std::string text;
  const auto n = count(gen);
  for (std::size_t i = 0; i < n; ++i) {
    text += pieces[pick(gen)];
    text += eols[eol(gen)];
  }
  return text;
}

inline std::string random_bytes(std::mt19937_64 &gen, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_int_distribution<int> bias(0, 3);
  std::string s(len(gen), '\0');
  for (auto &c : s) {
    // Lean towards fence and newline characters so the state machine gets exercised.
    switch (bias(gen)) {
    case 0:
      c = '`';
      break;
    case 1:
      c = '\n';
      break;
    default:
      c = static_cast<char>(byte(gen));
    }
  }
  return s;
}

// BM25 over lines as documents; k1=1.2, b=0.75, idf = ln(1 + (N - df + 0.5) / (df + 0.5)).
inline std::vector<std::string> bm25_tokens(const std::string &text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur += c;
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) {
    out.push_back(cur);
  }
  return out;
}

inline std::vector<std::pair<std::size_t, double>> bm25_rank(const std::vector<std::string> &lines,
                                                             const std::string &query, double k1 = 1.2,
                                                             double b = 0.75) {
  std::vector<std::vector<std::string>> docs;
  double total = 0;
  for (const auto &l : lines) {
    docs.push_back(bm25_tokens(l));
    total += static_cast<double>(docs.back().size());
  }
  const double n = static_cast<double>(docs.size());
  const double avgdl = total / n;
  std::vector<std::pair<std::size_t, double>> scored;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    double score = 0;
    for (const auto &term : bm25_tokens(query)) {
      double df = 0;
      for (const auto &d : docs) {
        df += std::find(d.begin(), d.end(), term) != d.end() ? 1 : 0;
      }
      const double idf = std::log(1 + (n - df + 0.5) / (df + 0.5));
      const double tf = static_cast<double>(std::count(docs[i].begin(), docs[i].end(), term));
      const double dl = static_cast<double>(docs[i].size());
      score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl));
    }
    scored.emplace_back(i + 1, score);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto &x, const auto &y) { return x.second > y.second; });
  return scored;
}

} // namespace forgeloop::oracle
