#pragma once

// Synthetic compositional world: vocabulary layout, prompt grammar, scene
// specifications, the knowledge table and the image-token decoder.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bicot/error.hpp"

namespace bicot {

using TokenId = std::int32_t;

enum class TokenKind { text, image, control };

struct TokenRange {
  TokenId begin = 0;
  TokenId end = 0;  // exclusive

  bool contains(TokenId id) const noexcept { return id >= begin && id < end; }
  TokenId size() const noexcept { return end - begin; }
  bool operator==(const TokenRange&) const = default;
};

// Layout: [control][text words][image codes]. Image token `image.begin + c`
// encodes cell code c, where code 0 is background.
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEosText = 1;
  static constexpr TokenId kImgStart = 2;
  static constexpr TokenId kPad = 3;
  static constexpr TokenId kNumControl = 4;

  Vocab() = default;
  Vocab(std::vector<std::string> words, int num_cell_codes);

  TokenRange text_range() const noexcept { return text_; }
  TokenRange image_range() const noexcept { return image_; }
  TokenId size() const noexcept { return image_.end; }

  TokenKind kind(TokenId id) const;
  std::optional<TokenId> find_word(std::string_view word) const;
  TokenId word_id(std::string_view word) const;  // throws unknown_key
  std::string token_name(TokenId id) const;

  TokenId image_token(int cell_code) const;
  int cell_code(TokenId image_token) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> index_;
  TokenRange text_;
  TokenRange image_;
};

TokenKind token_kind(TokenId id, const Vocab& vocab);

struct ObjectSpec {
  int shape = 0;
  int color = 0;
  auto operator<=>(const ObjectSpec&) const = default;
};

enum class Direction { left_of, right_of, above, below };

struct Relation {
  std::size_t subject = 0;
  std::size_t object = 1;
  Direction direction = Direction::left_of;
  bool operator==(const Relation&) const = default;
};

// Ground-truth parse of a prompt. A knowledge reference, when present, is
// the first object of the prompt and is not listed in `objects`.
struct SceneSpec {
  std::vector<ObjectSpec> objects;
  std::optional<Relation> relation;
  std::optional<std::vector<int>> counts;
  std::optional<std::string> knowledge_key;

  void validate(int num_shapes, int num_colors) const;
  bool operator==(const SceneSpec&) const = default;
};

class KnowledgeTable {
 public:
  void insert(std::string key, ObjectSpec value);
  bool contains(std::string_view key) const;
  const std::map<std::string, ObjectSpec, std::less<>>& entries() const noexcept { return entries_; }

 private:
  std::map<std::string, ObjectSpec, std::less<>> entries_;
};

ObjectSpec knowledge_lookup(std::string_view key, const KnowledgeTable& table);

// Everything loaded from the world asset file.
class World {
 public:
  static World from_file(const std::filesystem::path& path);
  static World from_string(std::string_view text);
  // Built-in world used by tests and when no asset is supplied.
  static World builtin();

  const Vocab& vocab() const noexcept { return vocab_; }
  const KnowledgeTable& knowledge() const noexcept { return knowledge_; }
  const std::vector<std::string>& shapes() const noexcept { return shapes_; }
  const std::vector<std::string>& colors() const noexcept { return colors_; }
  const std::vector<TokenId>& instruction() const noexcept { return instruction_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int num_cells() const noexcept { return height_ * width_; }
  int num_cell_codes() const noexcept {
    return 1 + static_cast<int>(shapes_.size() * colors_.size());
  }

  int cell_code(ObjectSpec object) const;
  ObjectSpec cell_object(int code) const;  // code must be non-background

  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> tokens) const;

 private:
  std::vector<std::string> shapes_;
  std::vector<std::string> colors_;
  std::vector<std::string> extra_words_;
  std::vector<std::string> instruction_words_;
  std::vector<TokenId> instruction_;
  KnowledgeTable knowledge_;
  Vocab vocab_;
  int height_ = 8;
  int width_ = 8;

  void finalize();
};

SceneSpec parse_prompt(std::string_view text, const World& world);
std::string render_prompt(const SceneSpec& spec, const World& world);

enum class Category { color, shape, spatial, counting, complex, knowledge };
inline constexpr int kNumCategories = 6;

// knowledge > counting > spatial > complex (3 objects) > shape (shared
// color) > color.
Category category_of(const SceneSpec& spec);
std::string_view category_name(Category c);
Category parse_category(std::string_view name);  // throws config_error

// Bounded enumeration of every spec the grammar can express, used for
// exhaustive round-trip checks and for building the training pool.
std::vector<SceneSpec> enumerate_specs(const World& world);

struct GridImage {
  int height = 0;
  int width = 0;
  std::vector<int> cells;  // row-major cell codes, 0 = background

  GridImage() = default;
  GridImage(int h, int w) : height(h), width(w), cells(static_cast<std::size_t>(h * w), 0) {}

  int at(int row, int col) const { return cells[static_cast<std::size_t>(row * width + col)]; }
  int& at(int row, int col) { return cells[static_cast<std::size_t>(row * width + col)]; }
  int num_foreground() const;
  bool operator==(const GridImage&) const = default;
};

GridImage decode_image(std::span<const TokenId> tokens, const Vocab& vocab, int height, int width);
std::vector<TokenId> encode_image(const GridImage& grid, const Vocab& vocab);

// One row per line, cell codes separated by single spaces.
std::string grid_to_text(const GridImage& grid);
GridImage grid_from_text(std::string_view text);
// Human-oriented rendering: '.' background, otherwise shape/color initials.
std::string grid_to_picture(const GridImage& grid, const World& world);

// Canonical exact rendering of a spec onto a grid (oracle painter).
GridImage paint_scene(const SceneSpec& spec, const World& world);

std::string_view direction_name(Direction d);

}  // namespace bicot
