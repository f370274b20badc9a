#include "uln/instructions.hpp"

#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace uln::text {

namespace {

constexpr std::string_view kReserved[] = {"<pad>", "<unk>"};
constexpr std::string_view kPunctuation = ".,!?;:()\"";
constexpr std::string_view kSentenceEnd[] = {".", "!", ";"};
constexpr std::string_view kConjunctions[] = {"and", "then"};
constexpr std::string_view kMotionVerbs[] = {
    "walk", "go",     "turn",    "exit",   "enter",  "take",   "head",    "continue", "move",
    "stop", "wait",   "climb",   "descend", "pass",  "follow", "proceed", "leave",    "step"};
constexpr std::string_view kTemplateWords[] = {
    "the", "to", "into", "at", "in", "near", "with", "keeping", "on", "your", "stairs", "of",
    "you", "a",  "and",  "then", "room", "door", "until", "past", "by", "from", "is", "will"};
constexpr std::string_view kStepVerbs[] = {"walk", "head", "continue", "move"};

bool is_sentence_end(const std::string& w) {
  return std::find(std::begin(kSentenceEnd), std::end(kSentenceEnd), w) != std::end(kSentenceEnd);
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(lower(cur));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (kPunctuation.find(c) != std::string_view::npos) {
      flush();
      words.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return words;
}

}  // namespace

std::string to_string(Level level) {
  switch (level) {
    case Level::L0: return "L0";
    case Level::L1: return "L1";
    case Level::L2: return "L2";
    case Level::L3: return "L3";
    case Level::Unknown: return "UNKNOWN";
  }
  return "UNKNOWN";
}

Level level_from_string(std::string_view s) {
  if (s == "L0") return Level::L0;
  if (s == "L1") return Level::L1;
  if (s == "L2") return Level::L2;
  if (s == "L3") return Level::L3;
  if (s == "UNKNOWN") return Level::Unknown;
  throw ParseError("unknown level '" + std::string(s) + "'");
}

Vocabulary::Vocabulary() {
  for (auto w : kReserved) add(std::string(w));
  for (auto w : kDirectionWords) add(std::string(w));
}

Vocabulary Vocabulary::standard(int room_labels) {
  Vocabulary v;
  for (char c : kPunctuation) v.add(std::string(1, c));
  for (auto w : kMotionVerbs) v.add(std::string(w));
  for (auto w : kTemplateWords) v.add(std::string(w));
  v.add("slightly");
  for (int l = 0; l < nav::max_vocab_size(room_labels); ++l) v.add(nav::label_name(l, room_labels));
  for (int l = room_labels; l < 12; ++l) v.add(nav::label_name(l, 12));
  return v;
}

Vocabulary Vocabulary::from_corpus(const std::vector<std::string>& texts, int min_count) {
  std::map<std::string, int> counts;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) ++counts[w];
  Vocabulary v;
  for (const auto& [w, c] : counts)
    if (c >= min_count) v.add(w);
  return v;
}

int Vocabulary::add(const std::string& word) {
  if (auto it = index_.find(word); it != index_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  index_.emplace(word, id);
  return id;
}

int Vocabulary::index(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(int index) const {
  if (index < 0 || index >= size()) throw LookupError("token index " + std::to_string(index) + " out of vocabulary");
  return words_[static_cast<std::size_t>(index)];
}

bool Vocabulary::is_direction(int index) const {
  return index >= 2 && index < 2 + static_cast<int>(std::size(kDirectionWords));
}

bool Vocabulary::is_motion_verb(int index) const {
  if (index < 0 || index >= size()) return false;
  const auto& w = words_[static_cast<std::size_t>(index)];
  return std::find(std::begin(kMotionVerbs), std::end(kMotionVerbs), w) != std::end(kMotionVerbs);
}

nlohmann::json Vocabulary::to_json() const { return words_; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  const auto words = j.get<std::vector<std::string>>();
  Vocabulary v;
  if (words.size() < static_cast<std::size_t>(v.size()))
    throw ParseError("vocabulary: missing reserved entries");
  for (std::size_t i = 0; i < static_cast<std::size_t>(v.size()); ++i)
    if (words[i] != v.words_[i]) throw ParseError("vocabulary: reserved entry " + std::to_string(i) + " mismatch");
  for (std::size_t i = static_cast<std::size_t>(v.size()); i < words.size(); ++i) {
    if (v.contains(words[i])) throw ParseError("vocabulary: duplicate word '" + words[i] + "'");
    v.add(words[i]);
  }
  return v;
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
  auto words = split_words(text);
  if (words.empty()) throw ValidationError("tokenize: empty text");
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(vocab.index(w));
  return out;
}

std::string detokenize(const std::vector<int>& tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& w = vocab.word(tokens[i]);
    const bool punct = w.size() == 1 && kPunctuation.find(w[0]) != std::string_view::npos;
    if (i > 0 && !(punct && w != "(" && w != "\"")) out.push_back(' ');
    out += w;
  }
  return out;
}

Instruction make_instruction(std::string_view text, const Vocabulary& vocab, Level level,
                             std::string path_id) {
  Instruction ins;
  ins.tokens = tokenize(text, vocab);
  ins.text = detokenize(ins.tokens, vocab);
  ins.level = level;
  ins.path_id = std::move(path_id);
  return ins;
}

std::vector<SubInstructionSpan> chunk(const Instruction& instr, const Vocabulary& vocab) {
  const auto& tok = instr.tokens;
  std::vector<SubInstructionSpan> spans;
  if (tok.empty()) return spans;

  // Sentence segments first.
  std::vector<SubInstructionSpan> sentences;
  std::size_t start = 0;
  for (std::size_t i = 0; i < tok.size(); ++i) {
    if (is_sentence_end(vocab.word(tok[i]))) {
      sentences.push_back({start, i + 1});
      start = i + 1;
    }
  }
  if (start < tok.size()) sentences.push_back({start, tok.size()});

  auto has_verb = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i)
      if (vocab.is_motion_verb(tok[i])) return true;
    return false;
  };
  auto is_conj = [&](std::size_t i) {
    const auto& w = vocab.word(tok[i]);
    return std::find(std::begin(kConjunctions), std::end(kConjunctions), w) != std::end(kConjunctions);
  };

  for (const auto& s : sentences) {
    std::vector<std::size_t> conj;
    for (std::size_t i = s.start; i < s.end; ++i)
      if (is_conj(i)) conj.push_back(i);
    std::size_t span_start = s.start;
    for (std::size_t k = 0; k < conj.size(); ++k) {
      const std::size_t c = conj[k];
      const std::size_t right_end = k + 1 < conj.size() ? conj[k + 1] : s.end;
      if (has_verb(span_start, c) && has_verb(c + 1, right_end)) {
        spans.push_back({span_start, c});
        span_start = c;
      }
    }
    spans.push_back({span_start, s.end});
  }
  return spans;
}

Instruction drop_subinstructions(const Instruction& instr, const Vocabulary& vocab,
                                 double drop_rate, std::uint64_t seed) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0))
    throw ValidationError("drop_subinstructions: drop_rate must lie in [0, 1)");
  const auto spans = chunk(instr, vocab);
  Rng rng = make_rng(seed, "drop-subinstructions");
  Instruction out;
  out.level = Level::Unknown;
  out.path_id = instr.path_id;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const double u = uniform01(rng);
    const bool final_span = s + 1 == spans.size();
    if (!final_span && u < drop_rate) continue;
    out.tokens.insert(out.tokens.end(), instr.tokens.begin() + static_cast<std::ptrdiff_t>(spans[s].start),
                      instr.tokens.begin() + static_cast<std::ptrdiff_t>(spans[s].end));
  }
  out.text = detokenize(out.tokens, vocab);
  return out;
}

Instruction last_sentence(const Instruction& instr, const Vocabulary& vocab) {
  const auto& tok = instr.tokens;
  std::size_t end = tok.size();
  // Ignore trailing sentence punctuation when searching for the previous boundary.
  std::size_t i = end;
  while (i > 0 && is_sentence_end(vocab.word(tok[i - 1]))) --i;
  std::size_t start = 0;
  for (std::size_t k = i; k > 0; --k) {
    if (is_sentence_end(vocab.word(tok[k - 1]))) {
      start = k;
      break;
    }
  }
  Instruction out;
  out.tokens.assign(tok.begin() + static_cast<std::ptrdiff_t>(start), tok.end());
  if (out.tokens.empty()) out.tokens = tok;
  out.text = detokenize(out.tokens, vocab);
  out.level = Level::L3;
  out.path_id = instr.path_id;
  return out;
}

const Instruction& LevelSet::at(Level level) const {
  switch (level) {
    case Level::L0: return l0;
    case Level::L1: return l1;
    case Level::L2: return l2;
    case Level::L3: return l3;
    case Level::Unknown: break;
  }
  throw ValidationError("LevelSet: no instruction for UNKNOWN level");
}

namespace {

struct Clause {
  std::vector<std::string> words;  // without the trailing "."
  bool redundancy_at = false;
  std::vector<std::string> redundancy;
};

std::string direction_word(double rel) {
  const double a = std::abs(rel);
  if (a < std::numbers::pi / 6.0) return "straight";
  if (a > 5.0 * std::numbers::pi / 6.0) return "around";
  return rel > 0 ? "right" : "left";
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& items) {
  return items[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(items.size()) - 1))];
}

Instruction assemble(const std::vector<std::vector<std::string>>& sentences, const Vocabulary& vocab,
                     Level level, const std::string& path_id) {
  std::string text;
  for (const auto& s : sentences) {
    for (const auto& w : s) {
      if (!text.empty()) text.push_back(' ');
      text += w;
    }
  }
  return make_instruction(text, vocab, level, path_id);
}

bool is_direction_word(const std::string& w) {
  return std::find(std::begin(Vocabulary::kDirectionWords), std::end(Vocabulary::kDirectionWords), w) !=
         std::end(Vocabulary::kDirectionWords);
}

}  // namespace

LevelSet synth_levels(const nav::NavigationGraph& graph, const std::vector<int>& path,
                      double initial_heading, std::uint64_t seed, const Vocabulary& vocab,
                      const std::string& path_id) {
  if (path.empty()) throw ValidationError("synth_speaker: empty path");
  if (!graph.has_semantics()) throw ValidationError("synth_speaker: graph carries no semantic labels");
  for (std::size_t i = 0; i + 1 < path.size(); ++i)
    if (!graph.adjacent(path[i], path[i + 1]))
      throw ValidationError("synth_speaker: path is not a walk (step " + std::to_string(i) + ")");
  for (int v : path) graph.viewpoint(v);

  Rng rng = make_rng(seed, "speaker");
  const int rooms = graph.room_labels();
  auto name = [&](int label) { return nav::label_name(label, rooms); };

  const int goal = path.back();
  const auto& goal_vp = graph.viewpoint(goal);
  const int goal_object = pick(rng, goal_vp.object_labels);

  // Step clauses with direction words; L1 is a pure filter of these.
  std::vector<std::vector<std::string>> steps;
  double heading = initial_heading;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    const auto& a = graph.viewpoint(path[i]);
    const auto& b = graph.viewpoint(path[i + 1]);
    const double dz = b.position.z() - a.position.z();
    std::vector<std::string> clause;
    if (std::abs(dz) > 1.0) {
      clause = {"take", "the", "stairs", dz > 0 ? "up" : "down", "to", "the", name(pick(rng, b.object_labels))};
    } else {
      const double rel = nav::wrap_angle(nav::bearing(a.position, b.position) - heading);
      const std::string verb(kStepVerbs[static_cast<std::size_t>(uniform_int(rng, 0, std::size(kStepVerbs) - 1))]);
      if (b.room_label != a.room_label) {
        clause = {verb, direction_word(rel), "into", "the", name(b.room_label)};
      } else {
        clause = {verb, direction_word(rel), "to", "the", name(pick(rng, b.object_labels))};
      }
    }
    heading = nav::bearing(a.position, b.position);
    steps.push_back(std::move(clause));
  }

  // Redundant detail: an extra landmark with a side, attached to one step.
  std::size_t redundancy_step = steps.size();
  std::vector<std::string> redundancy;
  if (!steps.empty()) {
    redundancy_step = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(steps.size()) - 1));
    const auto& a = graph.viewpoint(path[redundancy_step]);
    const int dest = path[redundancy_step + 1];
    std::vector<int> others;
    for (const auto& nb : graph.neighbors(dest))
      if (nb.target != path[redundancy_step]) others.push_back(nb.target);
    const int seen = others.empty() ? dest : pick(rng, others);
    const auto& s = graph.viewpoint(seen);
    const double rel = nav::wrap_angle(nav::bearing(a.position, s.position) -
                                       nav::bearing(a.position, graph.viewpoint(dest).position));
    redundancy = {",", "keeping", "the", name(pick(rng, s.object_labels)), "on", "your", rel > 0 ? "right" : "left"};
  }

  const std::vector<std::string> stop = {"stop", "at", "the", name(goal_object), "in", "the", name(goal_vp.room_label), "."};

  LevelSet out;
  out.steps = static_cast<int>(steps.size());

  std::vector<std::vector<std::string>> l0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    auto s = steps[i];
    if (i == redundancy_step) s.insert(s.end(), redundancy.begin(), redundancy.end());
    s.push_back(".");
    l0.push_back(std::move(s));
  }
  l0.push_back(stop);
  out.l0 = assemble(l0, vocab, Level::L0, path_id);

  std::vector<std::vector<std::string>> l1;
  for (const auto& step : steps) {
    std::vector<std::string> s;
    for (const auto& w : step)
      if (!is_direction_word(w)) s.push_back(w);
    s.push_back(".");
    l1.push_back(std::move(s));
  }
  l1.push_back(stop);
  out.l1 = assemble(l1, vocab, Level::L1, path_id);

  // Remove 1-2 non-final clauses but keep at least one step clause.
  auto l2 = l1;
  const int non_final = static_cast<int>(steps.size());
  const int want = static_cast<int>(uniform_int(rng, 1, 2));
  const int remove = std::max(0, std::min(want, non_final - 1));
  for (int r = 0; r < remove; ++r) {
    const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(l2.size()) - 2));
    l2.erase(l2.begin() + static_cast<std::ptrdiff_t>(idx));
  }
  out.l2 = assemble(l2, vocab, Level::L2, path_id);

  std::vector<std::string> l3 = {"go", "to", "the", name(goal_object), "in", "the", name(goal_vp.room_label)};
  bool ambiguous = false;
  for (int v = 0; v < static_cast<int>(graph.size()); ++v) {
    if (v == goal) continue;
    const auto& vp = graph.viewpoint(v);
    if (vp.room_label == goal_vp.room_label &&
        std::find(vp.object_labels.begin(), vp.object_labels.end(), goal_object) != vp.object_labels.end())
      ambiguous = true;
  }
  if (ambiguous && path.size() >= 2) {
    const auto& near = graph.viewpoint(path[path.size() - 2]);
    l3.insert(l3.end(), {"near", "the", name(pick(rng, near.object_labels))});
  }
  l3.push_back(".");
  out.l3 = assemble({l3}, vocab, Level::L3, path_id);
  return out;
}

Instruction synth_speaker(const nav::NavigationGraph& graph, const std::vector<int>& path, Level level,
                          std::uint64_t seed, const Vocabulary& vocab, double initial_heading,
                          const std::string& path_id) {
  return synth_levels(graph, path, initial_heading, seed, vocab, path_id).at(level);
}

std::vector<R2RRecord> parse_r2r(const nlohmann::json& j, const Vocabulary& vocab) {
  if (!j.is_array()) throw ParseError("R2R file: expected a JSON array");
  std::vector<R2RRecord> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& r = j[i];
    for (const char* field : {"path_id", "scan", "heading", "path", "instructions"})
      if (!r.contains(field))
        throw ParseError("R2R record " + std::to_string(i) + ": missing field '" + field + "'");
    try {
      const auto pid = r["path_id"].is_string() ? r["path_id"].get<std::string>() : r["path_id"].dump();
      const auto path = r["path"].get<std::vector<std::string>>();
      const auto scan = r["scan"].get<std::string>();
      const auto heading = r["heading"].get<double>();
      const auto instrs = r["instructions"].get<std::vector<std::string>>();
      std::vector<std::string> levels;
      if (r.contains("levels")) levels = r["levels"].get<std::vector<std::string>>();
      for (std::size_t k = 0; k < instrs.size(); ++k) {
        R2RRecord rec;
        const Level lv = k < levels.size() ? level_from_string(levels[k]) : Level::Unknown;
        rec.instruction = make_instruction(instrs[k], vocab, lv, pid);
        rec.path = path;
        rec.scan = scan;
        rec.heading = heading;
        out.push_back(std::move(rec));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("R2R record " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::vector<R2RRecord> load_r2r(const std::filesystem::path& file_path, const Vocabulary& vocab) {
  std::ifstream in(file_path);
  if (!in) throw LookupError("cannot open R2R file " + file_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("R2R file " + file_path.string() + ": " + e.what());
  }
  return parse_r2r(j, vocab);
}

nlohmann::json dataset_to_json(const std::vector<EpisodeRecord>& episodes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : episodes) {
    std::vector<std::string> levels;
    for (auto l : e.levels) levels.push_back(to_string(l));
    arr.push_back({{"version", "uln-data/1"},
                   {"path_id", e.path_id},
                   {"scan", e.scan},
                   {"heading", e.heading},
                   {"path", e.path},
                   {"instructions", e.instructions},
                   {"levels", levels}});
  }
  return arr;
}

std::vector<EpisodeRecord> dataset_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParseError("dataset: expected a JSON array");
  std::vector<EpisodeRecord> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& r = j[i];
    try {
      if (r.value("version", std::string()) != "uln-data/1")
        throw ParseError("dataset record " + std::to_string(i) + ": unsupported version");
      EpisodeRecord e;
      e.path_id = r.at("path_id").get<std::string>();
      e.scan = r.at("scan").get<std::string>();
      e.heading = r.at("heading").get<double>();
      e.path = r.at("path").get<std::vector<std::string>>();
      e.instructions = r.at("instructions").get<std::vector<std::string>>();
      for (const auto& l : r.at("levels").get<std::vector<std::string>>()) e.levels.push_back(level_from_string(l));
      if (e.levels.size() != e.instructions.size())
        throw ParseError("dataset record " + std::to_string(i) + ": levels/instructions length mismatch");
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("dataset record " + std::to_string(i) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace uln::text
