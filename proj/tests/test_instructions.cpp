#include "uln/errors.hpp"
#include "uln/instructions.hpp"
#include "uln/navgraph.hpp"
#include "uln/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <sstream>

using namespace uln;
using namespace uln::text;

namespace {

std::vector<std::string> words(const std::vector<int>& tokens, const Vocabulary& v) {
  std::vector<std::string> out;
  for (int t : tokens) out.push_back(v.word(t));
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// Whitespace-separated words with punctuation split off, as an independent
// reference for the tokenizer.
std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(lower(cur));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (c == '.' || c == ',' || c == '!' || c == ';' || c == '?') {
      flush();
      out.emplace_back(1, c);
    } else {
      cur += c;
    }
  }
  flush();
  return out;
}

struct World {
  nav::NavigationGraph graph;
  Vocabulary vocab;
};

World world(std::uint64_t seed) {
  nav::WorldSpec s;
  s.seed = seed;
  return {nav::generate_world(s), Vocabulary::standard(s.room_labels)};
}

std::vector<int> random_walk_path(const nav::NavigationGraph& g, Rng& rng, int hops) {
  // Shortest path between a random pair with exactly `hops` edges, if any.
  for (int attempt = 0; attempt < 5000; ++attempt) {
    const int a = static_cast<int>(uniform_int(rng, 0, static_cast<std::int64_t>(g.size()) - 1));
    const int b = static_cast<int>(uniform_int(rng, 0, static_cast<std::int64_t>(g.size()) - 1));
    auto p = g.shortest_path(a, b);
    if (static_cast<int>(p.size()) == hops + 1) return p;
  }
  FAIL("no path with the requested hop count");
  return {};
}

int direction_tokens(const Instruction& in, const Vocabulary& v) {
  return static_cast<int>(std::count_if(in.tokens.begin(), in.tokens.end(), [&](int t) { return v.is_direction(t); }));
}

}  // namespace

TEST_CASE("vocabulary: reserved indices are stable") {
  const auto v = Vocabulary::standard();
  CHECK(v.index("<pad>") == Vocabulary::kPad);
  CHECK(v.word(Vocabulary::kPad) == "<pad>");
  CHECK(v.word(Vocabulary::kUnk) == "<unk>");
  for (std::size_t i = 0; i < std::size(Vocabulary::kDirectionWords); ++i) {
    CHECK(v.index(Vocabulary::kDirectionWords[i]) == static_cast<int>(i) + 2);
    CHECK(v.is_direction(static_cast<int>(i) + 2));
  }
  CHECK(Vocabulary::standard() == v);
  CHECK(Vocabulary::from_json(v.to_json()) == v);
  for (int i = 0; i < v.size(); ++i) CHECK(v.index(v.word(i)) == i);
}

TEST_CASE("tokenize: punctuation, case, unknown words") {
  const auto v = Vocabulary::standard();
  CHECK(words(tokenize("Stop.", v), v) == std::vector<std::string>{"stop", "."});
  const auto t = tokenize("Go to the TV.", v);
  REQUIRE(t.size() == 5);
  CHECK(t[3] == Vocabulary::kUnk);
  CHECK(t[0] == v.index("go"));
  CHECK_THROWS_AS(tokenize("   ", v), ValidationError);
  CHECK_THROWS_AS(tokenize("", v), ValidationError);
}

TEST_CASE("tokenize: generated sentences round-trip modulo case") {
  auto w = world(3);
  Rng rng = make_rng(5, "roundtrip");
  for (int k = 0; k < 100; ++k) {
    const auto path = random_walk_path(w.graph, rng, 1 + k % 5);
    const auto levels = synth_levels(w.graph, path, 0.0, static_cast<std::uint64_t>(k), w.vocab);
    for (Level l : {Level::L0, Level::L1, Level::L2, Level::L3}) {
      const auto& in = levels.at(l);
      std::string shouted = in.text;
      for (std::size_t i = 0; i < shouted.size(); i += 3)
        shouted[i] = static_cast<char>(std::toupper(static_cast<unsigned char>(shouted[i])));
      const auto toks = tokenize(shouted, w.vocab);
      CHECK(toks == in.tokens);
      CHECK(split_words(detokenize(toks, w.vocab)) == split_words(in.text));
    }
  }
}

TEST_CASE("chunk: sentences, motion-verb conjunctions, fallback") {
  const auto v = Vocabulary::from_corpus({"Exit the room. Wait near the lockers.", "go upstairs",
                                          "walk left and turn right", "the lamp and the sofa"});
  CHECK(chunk(make_instruction("Exit the room. Wait near the lockers.", v, Level::Unknown, ""), v).size() == 2);
  CHECK(chunk(make_instruction("go upstairs", v, Level::Unknown, ""), v).size() == 1);
  const auto sv = Vocabulary::standard();
  CHECK(chunk(make_instruction("walk left and turn right", sv, Level::Unknown, ""), sv).size() == 2);
  CHECK(chunk(make_instruction("walk to the lamp and the sofa", sv, Level::Unknown, ""), sv).size() == 1);
}

TEST_CASE("chunk: spans partition the tokens; synthetic L0 has steps + 1 spans") {
  auto w = world(4);
  Rng rng = make_rng(6, "chunk");
  for (int k = 0; k < 60; ++k) {
    const auto path = random_walk_path(w.graph, rng, 1 + k % 6);
    const auto levels = synth_levels(w.graph, path, 0.4, static_cast<std::uint64_t>(k), w.vocab);
    for (Level l : {Level::L0, Level::L1, Level::L2, Level::L3}) {
      const auto spans = chunk(levels.at(l), w.vocab);
      REQUIRE(!spans.empty());
      CHECK(spans.front().start == 0);
      CHECK(spans.back().end == levels.at(l).tokens.size());
      for (std::size_t i = 1; i < spans.size(); ++i) CHECK(spans[i].start == spans[i - 1].end);
      for (const auto& s : spans) CHECK(s.end > s.start);
    }
    CHECK(chunk(levels.l0, w.vocab).size() == static_cast<std::size_t>(levels.steps) + 1);
  }
}

TEST_CASE("drop_subinstructions: identity, final-span protection, determinism, validation") {
  const auto v = Vocabulary::standard();
  const auto in = make_instruction("walk left. turn right. stop at the sofa.", v, Level::L0, "p");
  const auto same = drop_subinstructions(in, v, 0.0, 9);
  CHECK(same.tokens == in.tokens);
  CHECK(same.level == Level::Unknown);
  const auto two = make_instruction("walk left. stop at the sofa.", v, Level::L0, "p");
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    CHECK(words(drop_subinstructions(two, v, 0.999999, seed).tokens, v) ==
          std::vector<std::string>{"stop", "at", "the", "sofa", "."});
  CHECK(drop_subinstructions(in, v, 0.5, 3).tokens == drop_subinstructions(in, v, 0.5, 3).tokens);
  CHECK_THROWS_AS(drop_subinstructions(in, v, 1.0, 0), ValidationError);
  CHECK_THROWS_AS(drop_subinstructions(in, v, -0.1, 0), ValidationError);
}

TEST_CASE("drop_subinstructions: per-span drop frequency and order preservation") {
  const auto v = Vocabulary::standard();
  const std::vector<std::string> spans = {"walk left .", "turn right .", "go up .", "go down .", "stop at the sofa ."};
  std::string text;
  for (const auto& s : spans) text += s + " ";
  const auto in = make_instruction(text, v, Level::L0, "p");
  std::vector<int> dropped(4, 0);
  const int n = 1000;
  for (int seed = 0; seed < n; ++seed) {
    const auto out = drop_subinstructions(in, v, 0.5, static_cast<std::uint64_t>(seed));
    const std::string got = detokenize(out.tokens, v);
    // Survivors keep their order, so a greedy scan matches each span once.
    std::size_t pos = 0;
    for (std::size_t k = 0; k < spans.size(); ++k) {
      const auto want = detokenize(tokenize(spans[k], v), v);
      const auto at = got.find(want, pos);
      const bool kept = at != std::string::npos;
      if (k + 1 == spans.size()) {
        CHECK(kept);
      } else if (!kept) {
        dropped[k]++;
      }
      if (kept) pos = at + want.size();
    }
  }
  for (int d : dropped) CHECK(std::abs(d / double(n) - 0.5) <= 0.05);
}

TEST_CASE("last_sentence") {
  const auto v = Vocabulary::from_corpus({"a. b. c."});
  const auto out = last_sentence(make_instruction("A. B. C.", v, Level::L0, "x"), v);
  CHECK(words(out.tokens, v) == std::vector<std::string>{"c", "."});
  CHECK(out.level == Level::L3);
  const auto one = make_instruction("go to the sofa in the kitchen.", Vocabulary::standard(), Level::L0, "x");
  CHECK(last_sentence(one, Vocabulary::standard()).tokens == one.tokens);

  auto w = world(8);
  Rng rng = make_rng(1, "last");
  for (int k = 0; k < 50; ++k) {
    const auto path = random_walk_path(w.graph, rng, 2 + k % 4);
    const auto l0 = synth_speaker(w.graph, path, Level::L0, static_cast<std::uint64_t>(k), w.vocab);
    const auto last = last_sentence(l0, w.vocab);
    bool has_goal_object = false;
    for (int o : w.graph.viewpoint(path.back()).object_labels)
      has_goal_object |= std::count(last.tokens.begin(), last.tokens.end(),
                                    w.vocab.index(nav::label_name(o, w.graph.room_labels()))) > 0;
    CHECK(has_goal_object);
  }
}

TEST_CASE("synth_speaker: degenerate path, level structure, determinism") {
  auto w = world(2);
  const auto solo = synth_levels(w.graph, {5}, 0.0, 1, w.vocab);
  CHECK(solo.steps == 0);
  CHECK(chunk(solo.l0, w.vocab).size() == 1);
  CHECK(w.vocab.word(solo.l0.tokens.front()) == "stop");

  Rng rng = make_rng(2, "speaker");
  for (int k = 0; k < 200; ++k) {
    const auto path = random_walk_path(w.graph, rng, 1 + k % 6);
    const auto a = synth_levels(w.graph, path, 1.0, static_cast<std::uint64_t>(k), w.vocab, "p");
    const auto b = synth_levels(w.graph, path, 1.0, static_cast<std::uint64_t>(k), w.vocab, "p");
    CHECK(a.l0.tokens == b.l0.tokens);
    CHECK(a.l2.tokens == b.l2.tokens);
    CHECK(a.l3.tokens.size() <= a.l2.tokens.size());
    CHECK(a.l2.tokens.size() <= a.l1.tokens.size());
    CHECK(a.l1.tokens.size() <= a.l0.tokens.size());
    CHECK(direction_tokens(a.l1, w.vocab) == 0);
    CHECK(direction_tokens(a.l3, w.vocab) == 0);
    CHECK(chunk(a.l3, w.vocab).size() == 1);
    CHECK(a.l0.level == Level::L0);
    CHECK(a.l3.level == Level::L3);
    CHECK(synth_speaker(w.graph, path, Level::L2, static_cast<std::uint64_t>(k), w.vocab, 1.0, "p").tokens ==
          a.l2.tokens);
  }
  const auto path = random_walk_path(w.graph, rng, 3);
  const auto three = synth_levels(w.graph, path, 0.0, 17, w.vocab);
  CHECK(three.l0.tokens.size() > three.l1.tokens.size());
  CHECK(three.l1.tokens.size() > three.l2.tokens.size());
  CHECK(three.l2.tokens.size() > three.l3.tokens.size());
  CHECK(direction_tokens(three.l0, w.vocab) > 0);

  CHECK_THROWS_AS(synth_speaker(w.graph, {}, Level::L0, 1, w.vocab), ValidationError);
  int a = 0, b = 1;
  while (w.graph.adjacent(a, b) || a == b) ++b;
  CHECK_THROWS_AS(synth_speaker(w.graph, {a, b}, Level::L0, 1, w.vocab), ValidationError);
}

TEST_CASE("load_r2r: fan-out, empty input, missing fields") {
  const auto v = Vocabulary::standard();
  CHECK(parse_r2r(nlohmann::json::array(), v).empty());
  const nlohmann::json rec = {{"path_id", 4},
                              {"scan", "s"},
                              {"heading", 0.5},
                              {"path", {"a", "b"}},
                              {"instructions", {"walk left.", "walk right.", "stop."}}};
  const auto out = parse_r2r(nlohmann::json::array({rec}), v);
  REQUIRE(out.size() == 3);
  for (const auto& r : out) {
    CHECK(r.instruction.path_id == "4");
    CHECK(r.instruction.level == Level::Unknown);
    CHECK(r.scan == "s");
  }
  nlohmann::json bad = rec;
  bad.erase("scan");
  try {
    parse_r2r(nlohmann::json::array({rec, bad}), v);
    FAIL("missing field accepted");
  } catch (const ParseError& e) {
    const std::string m = e.what();
    CHECK(m.find("scan") != std::string::npos);
    CHECK(m.find("1") != std::string::npos);
  }
}

TEST_CASE("dataset files round-trip with levels") {
  EpisodeRecord r{"p1", "world_1", 0.25, {"v000", "v001"}, {"walk left.", "go to the sofa."}, {Level::L0, Level::L3}};
  const auto back = dataset_from_json(dataset_to_json({r}));
  REQUIRE(back.size() == 1);
  CHECK(back[0].path_id == "p1");
  CHECK(back[0].heading == 0.25);
  CHECK(back[0].instructions == r.instructions);
  CHECK(back[0].levels == r.levels);
}
