#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace advlab {

struct ToyDatasetConfig {
  int n_queries = 160;
  double flagged_fraction = 0.5;
  std::string refusal_text = "I cannot help.";
  std::string compliance_prefix = "Sure, here";
  std::uint64_t seed = 0;

  void validate() const;
};

struct ToyRecord {
  std::string query;       // "<verb> <noun>"
  std::string noun;
  std::string prompt;      // "Q: <verb> <noun> A:"
  std::string completion;  // includes its leading space
  bool flagged = false;
  bool heldout = false;
};

// Synthetic refusal/compliance corpus. Flagged queries complete with the
// refusal text, benign ones with the compliance echo; the flagged count is
// exact and train/held-out query strings are disjoint by construction.
struct ToyDataset {
  ToyDatasetConfig cfg;
  std::vector<ToyRecord> records;

  std::vector<const ToyRecord*> select(bool flagged, bool heldout) const;

  // The affirmative completion a benign query about this noun trains
  // toward; doubles as the attack target for flagged queries.
  std::string compliance_completion(const std::string& noun) const;
};

ToyDataset synthesize_dataset(const ToyDatasetConfig& cfg);

std::string dataset_to_jsonl(const ToyDataset& ds);

// Rebuilds a dataset from its line-delimited JSON emission. The query and
// noun come back out of the prompt template and the compliance prefix is
// recovered from any benign completion, so attack targets can be formed
// without the original generator config.
ToyDataset dataset_from_jsonl(const std::string& text);

}  // namespace advlab
