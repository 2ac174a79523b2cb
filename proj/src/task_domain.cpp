#include "bicot/task_domain.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

namespace bicot {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::grammar: return "GrammarError";
    case Errc::unknown_key: return "UnknownKey";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::kind_error: return "KindError";
    case Errc::out_of_vocab: return "OutOfVocab";
    case Errc::context_too_long: return "ContextTooLong";
    case Errc::masked_token: return "MaskedToken";
    case Errc::all_masked: return "AllMasked";
    case Errc::non_finite_gradient: return "NonFiniteGradient";
    case Errc::non_finite_objective: return "NonFiniteObjective";
    case Errc::io_error: return "IoError";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::corrupt_checksum: return "CorruptChecksum";
    case Errc::misaligned_traces: return "MisalignedTraces";
    case Errc::group_too_small: return "GroupTooSmall";
    case Errc::no_expert_enabled: return "NoExpertEnabled";
    case Errc::dimension_mismatch: return "DimensionMismatch";
    case Errc::config_error: return "ConfigError";
    case Errc::invalid_argument: return "InvalidArgument";
  }
  return "Error";
}

namespace {

constexpr std::array<std::string_view, 13> kReservedWords = {
    "a", "an", "the", "and", "left", "right", "of", "above", "below", "one", "two", "three", "four"};
constexpr std::array<std::string_view, 4> kNumberWords = {"one", "two", "three", "four"};
constexpr int kMaxCount = 4;
constexpr std::size_t kMaxConjObjects = 3;
constexpr std::size_t kMaxCountObjects = 2;
constexpr std::size_t kMaxKnowledgeExtras = 2;

constexpr std::string_view kBuiltinWorld = R"(# default synthetic world
grid 8 8
shapes square circle triangle flower
colors red green blue yellow purple orange
words plan image scene place top bottom middle corner
instruction plan the image
knowledge K_amsterdam flower red
knowledge K_sky circle blue
knowledge K_grass square green
knowledge K_sun circle yellow
knowledge K_plum triangle purple
knowledge K_carrot triangle orange
)";

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

std::string plural(const std::string& shape) { return shape + "s"; }

bool starts_with_vowel(const std::string& s) {
  return !s.empty() && std::string_view("aeiou").find(s.front()) != std::string_view::npos;
}

int index_of(const std::vector<std::string>& names, std::string_view word) {
  auto it = std::find(names.begin(), names.end(), word);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

// ---------------------------------------------------------------- Vocab

Vocab::Vocab(std::vector<std::string> words, int num_cell_codes) : words_(std::move(words)) {
  if (num_cell_codes < 2) throw Error(Errc::invalid_argument, "image alphabet needs >= 2 codes");
  text_ = {kNumControl, kNumControl + static_cast<TokenId>(words_.size())};
  image_ = {text_.end, text_.end + num_cell_codes};
  for (std::size_t i = 0; i < words_.size(); ++i) {
    auto [_, inserted] = index_.emplace(words_[i], text_.begin + static_cast<TokenId>(i));
    if (!inserted) throw Error(Errc::invalid_argument, "duplicate vocabulary word '" + words_[i] + "'");
  }
  if (!(text_.begin == kNumControl && text_.end == image_.begin && image_.end == size()))
    throw Error(Errc::invalid_argument, "vocabulary ranges do not tile the id space");
}

TokenKind Vocab::kind(TokenId id) const {
  if (id < 0 || id >= size()) throw Error(Errc::out_of_vocab, "token id " + std::to_string(id));
  if (id < kNumControl) return TokenKind::control;
  if (text_.contains(id)) return TokenKind::text;
  return TokenKind::image;
}

std::optional<TokenId> Vocab::find_word(std::string_view word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::word_id(std::string_view word) const {
  auto id = find_word(word);
  if (!id) throw Error(Errc::unknown_key, "word '" + std::string(word) + "' not in vocabulary");
  return *id;
}

std::string Vocab::token_name(TokenId id) const {
  switch (kind(id)) {
    case TokenKind::control: {
      static constexpr std::array<std::string_view, 4> names = {"<bos>", "<eos>", "<img_start>", "<pad>"};
      return std::string(names[static_cast<std::size_t>(id)]);
    }
    case TokenKind::text: return words_[static_cast<std::size_t>(id - text_.begin)];
    case TokenKind::image: return "<img:" + std::to_string(id - image_.begin) + ">";
  }
  return {};
}

TokenId Vocab::image_token(int cell_code) const {
  if (cell_code < 0 || cell_code >= image_.size())
    throw Error(Errc::kind_error, "cell code " + std::to_string(cell_code) + " outside image alphabet");
  return image_.begin + cell_code;
}

int Vocab::cell_code(TokenId image_token) const {
  if (kind(image_token) != TokenKind::image)
    throw Error(Errc::kind_error, "token " + std::to_string(image_token) + " is not an image token");
  return image_token - image_.begin;
}

TokenKind token_kind(TokenId id, const Vocab& vocab) { return vocab.kind(id); }

// ---------------------------------------------------------- SceneSpec

void SceneSpec::validate(int num_shapes, int num_colors) const {
  auto bad = [](const std::string& msg) { throw Error(Errc::invalid_argument, "invalid scene: " + msg); };
  if (objects.empty() && !knowledge_key) bad("object list is empty");
  for (const auto& o : objects)
    if (o.shape < 0 || o.shape >= num_shapes || o.color < 0 || o.color >= num_colors) bad("object code out of range");
  if (relation) {
    if (objects.size() != 2 || counts || knowledge_key) bad("relation needs exactly two plain objects");
    if (relation->subject >= objects.size() || relation->object >= objects.size() ||
        relation->subject == relation->object)
      bad("relation indices out of range");
  }
  if (counts) {
    if (knowledge_key) bad("counts cannot combine with knowledge");
    if (counts->size() != objects.size()) bad("counts must cover every object");
    if (objects.size() > kMaxCountObjects) bad("too many counted objects");
    for (int c : *counts)
      if (c < 1 || c > kMaxCount) bad("count out of range");
  }
  if (knowledge_key && objects.size() > kMaxKnowledgeExtras) bad("too many objects beside knowledge reference");
  if (!relation && !counts && !knowledge_key && objects.size() > kMaxConjObjects) bad("too many objects");
}

// ----------------------------------------------------- KnowledgeTable

void KnowledgeTable::insert(std::string key, ObjectSpec value) {
  auto [it, inserted] = entries_.emplace(std::move(key), value);
  if (!inserted) throw Error(Errc::invalid_argument, "duplicate knowledge key '" + it->first + "'");
}

bool KnowledgeTable::contains(std::string_view key) const { return entries_.find(key) != entries_.end(); }

ObjectSpec knowledge_lookup(std::string_view key, const KnowledgeTable& table) {
  auto it = table.entries().find(key);
  if (it == table.entries().end()) throw Error(Errc::unknown_key, "knowledge key '" + std::string(key) + "'");
  return it->second;
}

// -------------------------------------------------------------- World

World World::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot open world asset " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str());
}

World World::builtin() { return from_string(kBuiltinWorld); }

World World::from_string(std::string_view text) {
  World world;
  std::vector<std::tuple<std::string, std::string, std::string>> knowledge;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto words = split_words(line);
    if (words.empty()) continue;
    const std::string directive = words.front();
    std::vector<std::string> args(words.begin() + 1, words.end());
    auto fail = [&](const std::string& msg) {
      throw Error(Errc::config_error, "world asset line " + std::to_string(line_no) + ": " + msg);
    };
    if (directive == "grid") {
      if (args.size() != 2) fail("grid expects <height> <width>");
      world.height_ = std::stoi(args[0]);
      world.width_ = std::stoi(args[1]);
      if (world.height_ < 1 || world.width_ < 1) fail("grid dimensions must be positive");
    } else if (directive == "shapes") {
      world.shapes_ = args;
    } else if (directive == "colors") {
      world.colors_ = args;
    } else if (directive == "words") {
      world.extra_words_.insert(world.extra_words_.end(), args.begin(), args.end());
    } else if (directive == "instruction") {
      world.instruction_words_ = args;
    } else if (directive == "knowledge") {
      if (args.size() != 3) fail("knowledge expects <key> <shape> <color>");
      knowledge.emplace_back(args[0], args[1], args[2]);
    } else {
      fail("unknown directive '" + directive + "'");
    }
  }
  if (world.shapes_.empty() || world.colors_.empty()) throw Error(Errc::config_error, "world asset needs shapes and colors");
  for (auto& [key, shape, color] : knowledge) {
    int s = index_of(world.shapes_, shape);
    int c = index_of(world.colors_, color);
    if (s < 0 || c < 0) throw Error(Errc::config_error, "knowledge entry '" + key + "' has unknown shape/color");
    world.knowledge_.insert(key, {s, c});
  }
  world.finalize();
  return world;
}

void World::finalize() {
  std::vector<std::string> words;
  std::set<std::string> seen;
  auto add = [&](const std::string& w) {
    if (seen.insert(w).second) words.push_back(w);
  };
  for (auto w : kReservedWords) add(std::string(w));
  for (const auto& c : colors_) add(c);
  for (const auto& s : shapes_) add(s);
  for (const auto& s : shapes_) add(plural(s));
  for (const auto& [key, _] : knowledge_.entries()) add(key);
  for (const auto& w : extra_words_) add(w);
  for (const auto& w : instruction_words_) add(w);
  vocab_ = Vocab(std::move(words), num_cell_codes());
  instruction_.clear();
  for (const auto& w : instruction_words_) instruction_.push_back(vocab_.word_id(w));
}

int World::cell_code(ObjectSpec object) const {
  return 1 + object.shape * static_cast<int>(colors_.size()) + object.color;
}

ObjectSpec World::cell_object(int code) const {
  if (code <= 0 || code >= num_cell_codes()) throw Error(Errc::kind_error, "not an object cell code");
  const int n_colors = static_cast<int>(colors_.size());
  return {(code - 1) / n_colors, (code - 1) % n_colors};
}

std::vector<TokenId> World::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  auto words = split_words(text);
  for (std::size_t i = 0; i < words.size(); ++i) {
    auto id = vocab_.find_word(words[i]);
    if (!id) throw GrammarError(i, "word '" + words[i] + "' not in vocabulary");
    out.push_back(*id);
  }
  return out;
}

std::string World::detokenize(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (!out.empty()) out += ' ';
    out += vocab_.token_name(t);
  }
  return out;
}

// ------------------------------------------------------------ grammar

namespace {

class PromptParser {
 public:
  PromptParser(std::vector<std::string> words, const World& world) : words_(std::move(words)), world_(world) {}

  SceneSpec parse() {
    if (words_.empty()) throw GrammarError(0, "empty prompt");
    SceneSpec spec;
    const std::string& head = words_[0];
    if (head == "the") {
      ++pos_;
      const std::string& key = expect_any("knowledge reference");
      if (!world_.knowledge().contains(key)) throw GrammarError(pos_ - 1, "unknown knowledge reference '" + key + "'");
      spec.knowledge_key = key;
      while (!done()) {
        expect("and");
        if (spec.objects.size() == kMaxKnowledgeExtras) throw GrammarError(pos_ - 1, "too many objects");
        spec.objects.push_back(article_object());
      }
    } else if (number_value(head) > 0) {
      std::vector<int> counts;
      auto [obj, n] = counted_object();
      spec.objects.push_back(obj);
      counts.push_back(n);
      while (!done()) {
        expect("and");
        if (spec.objects.size() == kMaxCountObjects) throw GrammarError(pos_ - 1, "too many counted objects");
        auto [o, c] = counted_object();
        spec.objects.push_back(o);
        counts.push_back(c);
      }
      spec.counts = std::move(counts);
    } else if (head == "a" || head == "an") {
      spec.objects.push_back(article_object());
      if (!done()) {
        const std::string& next = words_[pos_];
        if (next == "and") {
          while (!done()) {
            expect("and");
            if (spec.objects.size() == kMaxConjObjects) throw GrammarError(pos_ - 1, "too many objects");
            spec.objects.push_back(article_object());
          }
        } else if (next == "left" || next == "right") {
          ++pos_;
          expect("of");
          spec.objects.push_back(article_object());
          spec.relation = Relation{0, 1, next == "left" ? Direction::left_of : Direction::right_of};
        } else if (next == "above" || next == "below") {
          ++pos_;
          spec.objects.push_back(article_object());
          spec.relation = Relation{0, 1, next == "above" ? Direction::above : Direction::below};
        } else {
          throw GrammarError(pos_, "unexpected word '" + next + "'");
        }
        if (!done()) throw GrammarError(pos_, "trailing words after relation");
      }
    } else {
      throw GrammarError(0, "prompt cannot start with '" + head + "'");
    }
    return spec;
  }

 private:
  std::vector<std::string> words_;
  const World& world_;
  std::size_t pos_ = 0;

  bool done() const { return pos_ >= words_.size(); }

  const std::string& expect_any(const char* what) {
    if (done()) throw GrammarError(pos_, std::string("unexpected end, expected ") + what);
    return words_[pos_++];
  }

  void expect(std::string_view word) {
    const std::string& got = expect_any(std::string(word).c_str());
    if (got != word) throw GrammarError(pos_ - 1, "expected '" + std::string(word) + "', got '" + got + "'");
  }

  static int number_value(std::string_view w) {
    for (std::size_t i = 0; i < kNumberWords.size(); ++i)
      if (kNumberWords[i] == w) return static_cast<int>(i) + 1;
    return 0;
  }

  int color() {
    const std::string& w = expect_any("color");
    int c = index_of(world_.colors(), w);
    if (c < 0) throw GrammarError(pos_ - 1, "unknown color '" + w + "'");
    return c;
  }

  int shape(bool plural_form) {
    const std::string& w = expect_any("shape");
    for (std::size_t s = 0; s < world_.shapes().size(); ++s) {
      const auto& name = world_.shapes()[s];
      if (w == (plural_form ? plural(name) : name)) return static_cast<int>(s);
    }
    throw GrammarError(pos_ - 1, "unknown shape '" + w + "'");
  }

  ObjectSpec article_object() {
    const std::string& art = expect_any("article");
    if (art != "a" && art != "an") throw GrammarError(pos_ - 1, "expected article, got '" + art + "'");
    int c = color();
    int s = shape(false);
    return {s, c};
  }

  std::pair<ObjectSpec, int> counted_object() {
    const std::string& num = expect_any("number");
    int n = number_value(num);
    if (n == 0) throw GrammarError(pos_ - 1, "expected number word, got '" + num + "'");
    int c = color();
    int s = shape(n > 1);
    return {{s, c}, n};
  }
};

}  // namespace

SceneSpec parse_prompt(std::string_view text, const World& world) {
  SceneSpec spec = PromptParser(split_words(text), world).parse();
  spec.validate(static_cast<int>(world.shapes().size()), static_cast<int>(world.colors().size()));
  return spec;
}

std::string render_prompt(const SceneSpec& spec, const World& world) {
  spec.validate(static_cast<int>(world.shapes().size()), static_cast<int>(world.colors().size()));
  auto article = [&](ObjectSpec o) {
    const std::string& color = world.colors()[static_cast<std::size_t>(o.color)];
    return std::string(starts_with_vowel(color) ? "an " : "a ") + color + " " +
           world.shapes()[static_cast<std::size_t>(o.shape)];
  };
  std::string out;
  if (spec.knowledge_key) {
    out = "the " + *spec.knowledge_key;
    for (const auto& o : spec.objects) out += " and " + article(o);
    return out;
  }
  if (spec.counts) {
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      const auto& o = spec.objects[i];
      int n = (*spec.counts)[i];
      if (i) out += " and ";
      const std::string& shape = world.shapes()[static_cast<std::size_t>(o.shape)];
      out += std::string(kNumberWords[static_cast<std::size_t>(n - 1)]) + " " +
             world.colors()[static_cast<std::size_t>(o.color)] + " " + (n > 1 ? plural(shape) : shape);
    }
    return out;
  }
  if (spec.relation) {
    static constexpr std::array<std::string_view, 4> words = {"left of", "right of", "above", "below"};
    const auto& r = *spec.relation;
    // The grammar only produces subject 0 / object 1.
    return article(spec.objects[r.subject]) + " " +
           std::string(words[static_cast<std::size_t>(r.direction)]) + " " + article(spec.objects[r.object]);
  }
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    if (i) out += " and ";
    out += article(spec.objects[i]);
  }
  return out;
}

Category category_of(const SceneSpec& spec) {
  if (spec.knowledge_key) return Category::knowledge;
  if (spec.counts) return Category::counting;
  if (spec.relation) return Category::spatial;
  if (spec.objects.size() >= 3) return Category::complex;
  if (spec.objects.size() == 2 && spec.objects[0].color == spec.objects[1].color) return Category::shape;
  return Category::color;
}

namespace {
constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {"color",    "shape",   "spatial",
                                                                         "counting", "complex", "knowledge"};
}

std::string_view category_name(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

Category parse_category(std::string_view name) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i)
    if (kCategoryNames[i] == name) return static_cast<Category>(i);
  throw Error(Errc::config_error, "unknown category '" + std::string(name) + "'");
}

std::vector<SceneSpec> enumerate_specs(const World& world) {
  std::vector<ObjectSpec> objs;
  for (int s = 0; s < static_cast<int>(world.shapes().size()); ++s)
    for (int c = 0; c < static_cast<int>(world.colors().size()); ++c) objs.push_back({s, c});

  std::vector<SceneSpec> out;
  for (const auto& a : objs) {
    out.push_back({{a}, std::nullopt, std::nullopt, std::nullopt});
    for (int n = 1; n <= kMaxCount; ++n) out.push_back({{a}, std::nullopt, std::vector<int>{n}, std::nullopt});
  }
  for (const auto& a : objs)
    for (const auto& b : objs) {
      if (a == b) continue;
      out.push_back({{a, b}, std::nullopt, std::nullopt, std::nullopt});
      for (int d = 0; d < 4; ++d)
        out.push_back({{a, b}, Relation{0, 1, static_cast<Direction>(d)}, std::nullopt, std::nullopt});
      for (int n = 1; n <= kMaxCount; ++n)
        for (int m = 1; m <= kMaxCount; ++m)
          out.push_back({{a, b}, std::nullopt, std::vector<int>{n, m}, std::nullopt});
      for (const auto& c : objs)
        if (c != a && c != b) out.push_back({{a, b, c}, std::nullopt, std::nullopt, std::nullopt});
    }
  for (const auto& [key, _] : world.knowledge().entries()) {
    out.push_back({{}, std::nullopt, std::nullopt, key});
    for (const auto& a : objs) {
      out.push_back({{a}, std::nullopt, std::nullopt, key});
      for (const auto& b : objs)
        if (a != b) out.push_back({{a, b}, std::nullopt, std::nullopt, key});
    }
  }
  return out;
}

// --------------------------------------------------------- GridImage

int GridImage::num_foreground() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](int c) { return c != 0; }));
}

GridImage decode_image(std::span<const TokenId> tokens, const Vocab& vocab, int height, int width) {
  if (height < 1 || width < 1) throw Error(Errc::invalid_argument, "grid dimensions must be positive");
  const auto m = static_cast<std::size_t>(height * width);
  if (tokens.size() != m)
    throw Error(Errc::length_mismatch,
                "expected " + std::to_string(m) + " image tokens, got " + std::to_string(tokens.size()));
  GridImage grid(height, width);
  for (std::size_t i = 0; i < m; ++i) grid.cells[i] = vocab.cell_code(tokens[i]);
  return grid;
}

std::vector<TokenId> encode_image(const GridImage& grid, const Vocab& vocab) {
  std::vector<TokenId> out;
  out.reserve(grid.cells.size());
  for (int c : grid.cells) out.push_back(vocab.image_token(c));
  return out;
}

std::string grid_to_text(const GridImage& grid) {
  std::string out;
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      if (c) out += ' ';
      out += std::to_string(grid.at(r, c));
    }
    out += '\n';
  }
  return out;
}

GridImage grid_from_text(std::string_view text) {
  GridImage grid;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::vector<int> values;
    int v = 0;
    while (row >> v) values.push_back(v);
    if (!row.eof()) throw Error(Errc::invalid_argument, "malformed grid row '" + line + "'");
    if (values.empty()) continue;
    if (grid.width == 0) grid.width = static_cast<int>(values.size());
    if (static_cast<int>(values.size()) != grid.width) throw Error(Errc::dimension_mismatch, "ragged grid rows");
    grid.cells.insert(grid.cells.end(), values.begin(), values.end());
    ++grid.height;
  }
  return grid;
}

std::string grid_to_picture(const GridImage& grid, const World& world) {
  std::string out;
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      if (c) out += ' ';
      int code = grid.at(r, c);
      if (code == 0) {
        out += "..";
      } else {
        ObjectSpec o = world.cell_object(code);
        out += world.shapes()[static_cast<std::size_t>(o.shape)].front();
        out += world.colors()[static_cast<std::size_t>(o.color)].front();
      }
    }
    out += '\n';
  }
  return out;
}

GridImage paint_scene(const SceneSpec& spec, const World& world) {
  const int h = world.height();
  const int w = world.width();
  GridImage grid(h, w);
  std::vector<ObjectSpec> objects;
  if (spec.knowledge_key) objects.push_back(knowledge_lookup(*spec.knowledge_key, world.knowledge()));
  objects.insert(objects.end(), spec.objects.begin(), spec.objects.end());

  if (spec.relation) {
    const auto& r = *spec.relation;
    int subj_r = h / 2, subj_c = w / 2, obj_r = h / 2, obj_c = w / 2;
    switch (r.direction) {
      case Direction::left_of: subj_c = 1; obj_c = w - 2; break;
      case Direction::right_of: subj_c = w - 2; obj_c = 1; break;
      case Direction::above: subj_r = 1; obj_r = h - 2; break;
      case Direction::below: subj_r = h - 2; obj_r = 1; break;
    }
    grid.at(subj_r, subj_c) = world.cell_code(objects[r.subject]);
    grid.at(obj_r, obj_c) = world.cell_code(objects[r.object]);
    return grid;
  }
  if (spec.counts) {
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const int row = 1 + 3 * static_cast<int>(i);
      for (int k = 0; k < (*spec.counts)[i]; ++k) grid.at(row, 2 * k) = world.cell_code(objects[i]);
    }
    return grid;
  }
  const int k = static_cast<int>(objects.size());
  for (int i = 0; i < k; ++i) {
    const int col = ((i + 1) * w) / (k + 1);
    grid.at(h / 2, col) = world.cell_code(objects[static_cast<std::size_t>(i)]);
  }
  return grid;
}

std::string_view direction_name(Direction d) {
  switch (d) {
    case Direction::left_of: return "left_of";
    case Direction::right_of: return "right_of";
    case Direction::above: return "above";
    case Direction::below: return "below";
  }
  return "?";
}

}  // namespace bicot
