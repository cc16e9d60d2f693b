#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace advlab {

// Character-level vocabulary over printable ASCII with two reserved ids.
// The ordering is fixed (not corpus-dependent), so token ids are stable
// across datasets and runs.
class CharVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;

  CharVocab();

  int size() const { return size_; }
  bool encodes(char c) const;
  int id_of(char c) const;               // throws ConfigError on unknown char
  std::vector<int> encode(std::string_view text) const;

  // Strict decode: printable ids only, throws on reserved/unknown ids.
  std::string decode(std::span<const int> ids) const;

  // Lossy decode for logs: reserved ids render as <pad> / <bos>.
  std::string display(std::span<const int> ids) const;

 private:
  int size_ = 0;
  std::array<int, 256> char_to_id_{};
  std::string id_to_char_;
};

}  // namespace advlab
