#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "brivl/corpus.hpp"
#include "brivl/errors.hpp"

namespace brivl {

// Fixed word-level vocabulary built from the synthetic corpus word lists.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary() {
    words_ = {"<pad>", "<unk>"};
    auto add = [this](const auto& list) {
      for (auto w : list) words_.emplace_back(w);
    };
    add(corpus::kGlue);
    add(corpus::kSizes);
    add(corpus::kColors);
    add(corpus::kShapes);
    add(corpus::kFillers);
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], i);
  }

  static const Vocabulary& standard() {
    static const Vocabulary v;
    return v;
  }

  std::size_t size() const { return words_.size(); }

  std::size_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(std::size_t id) const {
    if (id >= words_.size()) throw InvalidArgument("Vocabulary: id " + std::to_string(id) + " out of range");
    return words_[id];
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

// One row of a token batch: ids padded with kPad up to max_len.
struct TokenRow {
  std::vector<std::size_t> ids;
  std::size_t length = 0;
};

// Lowercase, split on whitespace, map through the vocabulary, truncate.
inline TokenRow tokenize(const std::string& text, std::size_t max_len, const Vocabulary& vocab = Vocabulary::standard()) {
  std::string lowered = text;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream in(lowered);
  TokenRow row;
  row.ids.assign(max_len, Vocabulary::kPad);
  std::string word;
  while (row.length < max_len && in >> word) row.ids[row.length++] = vocab.id(word);
  return row;
}

inline std::string detokenize(const TokenRow& row, const Vocabulary& vocab = Vocabulary::standard()) {
  std::string out;
  for (std::size_t i = 0; i < row.length; ++i) {
    if (i) out += ' ';
    out += vocab.word(row.ids[i]);
  }
  return out;
}

}  // namespace brivl
