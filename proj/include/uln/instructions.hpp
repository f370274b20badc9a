#pragma once

#include "uln/navgraph.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace uln::text {

enum class Level { L0, L1, L2, L3, Unknown };

std::string to_string(Level level);
Level level_from_string(std::string_view s);

// Token <-> index table. Indices 0..8 are reserved and stable:
// PAD, UNK, then the direction words in kDirectionWords order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr std::string_view kDirectionWords[] = {"left", "right", "straight", "around",
                                                          "up",   "down",  "degrees"};

  Vocabulary();
  // Reserved tokens plus every word the synthetic speaker can emit.
  static Vocabulary standard(int room_labels = 8);
  // Reserved tokens plus corpus words with count >= min_count, sorted.
  static Vocabulary from_corpus(const std::vector<std::string>& texts, int min_count = 1);

  int add(const std::string& word);
  int index(std::string_view word) const;  // kUnk when absent
  bool contains(std::string_view word) const;
  const std::string& word(int index) const;
  int size() const { return static_cast<int>(words_.size()); }
  bool is_direction(int index) const;
  bool is_motion_verb(int index) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct Instruction {
  std::string text;
  std::vector<int> tokens;
  Level level = Level::Unknown;
  std::string path_id;
};

struct SubInstructionSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const SubInstructionSpan&) const = default;
};

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& tokens, const Vocabulary& vocab);
Instruction make_instruction(std::string_view text, const Vocabulary& vocab, Level level,
                             std::string path_id);

std::vector<SubInstructionSpan> chunk(const Instruction& instr, const Vocabulary& vocab);
Instruction drop_subinstructions(const Instruction& instr, const Vocabulary& vocab,
                                 double drop_rate, std::uint64_t seed);
Instruction last_sentence(const Instruction& instr, const Vocabulary& vocab);

// All four levels are derived from one seeded L0 draft, so they agree on
// every landmark choice.
struct LevelSet {
  Instruction l0, l1, l2, l3;
  int steps = 0;  // templated step clauses in L0
  const Instruction& at(Level level) const;
};

LevelSet synth_levels(const nav::NavigationGraph& graph, const std::vector<int>& path,
                      double initial_heading, std::uint64_t seed, const Vocabulary& vocab,
                      const std::string& path_id = "");
Instruction synth_speaker(const nav::NavigationGraph& graph, const std::vector<int>& path,
                          Level level, std::uint64_t seed, const Vocabulary& vocab,
                          double initial_heading = 0.0, const std::string& path_id = "");

struct R2RRecord {
  Instruction instruction;
  std::vector<std::string> path;
  std::string scan;
  double heading = 0.0;
};

std::vector<R2RRecord> parse_r2r(const nlohmann::json& j, const Vocabulary& vocab);
std::vector<R2RRecord> load_r2r(const std::filesystem::path& file_path, const Vocabulary& vocab);

// One episode with its instruction variants, as serialized in "uln-data/1" files.
struct EpisodeRecord {
  std::string path_id;
  std::string scan;
  double heading = 0.0;
  std::vector<std::string> path;
  std::vector<std::string> instructions;
  std::vector<Level> levels;
};

nlohmann::json dataset_to_json(const std::vector<EpisodeRecord>& episodes);
std::vector<EpisodeRecord> dataset_from_json(const nlohmann::json& j);

}  // namespace uln::text
