// Emits the bundled training text: deterministic template prose, so the
// repo carries no external data dependency and any byte of it can be
// regenerated from a seed.
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "falcon/rng.hpp"

namespace {

const std::vector<std::string> kAdjectives = {
    "quiet", "old",   "grey",  "small", "bright", "slow",   "warm",
    "cold",  "tall",  "low",   "green", "dusty",  "steady", "pale",
    "deep",  "early", "late",  "round", "sharp",  "plain"};

const std::vector<std::string> kNouns = {
    "river",  "boat",   "bridge", "lamp",   "garden", "letter", "window",
    "road",   "tower",  "field",  "cloud",  "stone",  "door",   "market",
    "clock",  "forest", "harbor", "engine", "map",    "bell",   "house",
    "meadow", "path",   "wall",   "train"};

const std::vector<std::string> kVerbs = {
    "carries", "follows", "passes",  "holds",  "watches", "crosses",
    "finds",   "keeps",   "reaches", "leaves", "touches", "turns",
    "meets",   "fills",   "guards"};

const std::vector<std::string> kPreps = {"past", "over",    "under", "beside",
                                         "near", "through", "along", "behind"};

std::string pick(falcon::Rng& rng, const std::vector<std::string>& words) {
  return words[rng.next_index(words.size())];
}

std::string sentence(falcon::Rng& rng) {
  std::string s = "the " + pick(rng, kAdjectives) + " " + pick(rng, kNouns) +
                  " " + pick(rng, kVerbs) + " the " + pick(rng, kAdjectives) +
                  " " + pick(rng, kNouns);
  if (rng.next_unit() < 0.7) {
    s += " " + pick(rng, kPreps) + " the " + pick(rng, kNouns);
  }
  s += ".";
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  uint64_t seed = 7;
  size_t target_bytes = 1 << 20;
  std::string out_path = "corpus.txt";
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "error: usage: missing value for " << a << "\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--seed") seed = std::stoull(next());
    else if (a == "--bytes") target_bytes = std::stoull(next());
    else if (a == "--out") out_path = next();
    else {
      std::cerr << "error: usage: unknown flag " << a << "\n";
      return 2;
    }
  }

  falcon::Rng rng(seed);
  std::string text;
  text.reserve(target_bytes + 256);
  int in_paragraph = 0;
  while (text.size() < target_bytes) {
    text += sentence(rng);
    ++in_paragraph;
    if (in_paragraph >= 5 && rng.next_unit() < 0.35) {
      text += "\n\n";
      in_paragraph = 0;
    } else {
      text += " ";
    }
  }
  text.resize(target_bytes);

  std::ofstream os(out_path, std::ios::binary);
  if (!os) {
    std::cerr << "error: io: cannot write " << out_path << "\n";
    return 1;
  }
  os << text;
  std::cerr << "wrote " << text.size() << " bytes to " << out_path << "\n";
  return 0;
}
