#include "advlab/charvocab.hpp"

#include "advlab/common.hpp"

namespace advlab {

CharVocab::CharVocab() {
  char_to_id_.fill(-1);
  id_to_char_.assign(2, '\0');  // pad, bos placeholders
  for (char c = ' '; c <= '~'; ++c) {
    char_to_id_[static_cast<unsigned char>(c)] = int(id_to_char_.size());
    id_to_char_.push_back(c);
  }
  size_ = int(id_to_char_.size());
}

bool CharVocab::encodes(char c) const {
  return char_to_id_[static_cast<unsigned char>(c)] >= 0;
}

int CharVocab::id_of(char c) const {
  const int id = char_to_id_[static_cast<unsigned char>(c)];
  if (id < 0)
    throw ConfigError("character not in vocabulary: code " +
                      std::to_string(int(static_cast<unsigned char>(c))));
  return id;
}

std::vector<int> CharVocab::encode(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(id_of(c));
  return out;
}

std::string CharVocab::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 2 || id >= size_)
      throw ConfigError("cannot decode reserved/unknown token id " +
                        std::to_string(id));
    out.push_back(id_to_char_[id]);
  }
  return out;
}

std::string CharVocab::display(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad)
      out += "<pad>";
    else if (id == kBos)
      out += "<bos>";
    else if (id >= 2 && id < size_)
      out.push_back(id_to_char_[id]);
    else
      out += "<" + std::to_string(id) + ">";
  }
  return out;
}

}  // namespace advlab
