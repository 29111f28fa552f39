#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace trinity {

enum class PretokenKind : uint8_t { digits, script_run, word, punct, whitespace, newline };

/// Byte span into the source text. Spans are non-overlapping, ordered, and
/// concatenate to the full input.
struct Pretoken {
  int64_t begin;
  int64_t end;
  PretokenKind kind;
  bool operator==(const Pretoken&) const = default;
};

const char* to_string(PretokenKind kind);

/// Half-open codepoint ranges for scripts that lack whitespace word
/// boundaries and are isolated before BPE. Codepoints outside every range
/// classify as script 0 ("other").
class ScriptTable {
 public:
  struct Range {
    uint32_t lo;  // inclusive
    uint32_t hi;  // exclusive
    int script;
  };

  ScriptTable(std::vector<Range> ranges, std::vector<std::string> names);
  static const ScriptTable& defaults();

  int classify(uint32_t cp) const;
  const std::string& name(int script) const { return names_[static_cast<size_t>(script)]; }
  int script_count() const { return static_cast<int>(names_.size()); }

 private:
  std::vector<Range> ranges_;  // sorted by lo
  std::vector<std::string> names_;
};

/// Segment boundary produced by script isolation; script == 0 marks a
/// stretch left for the word/punctuation stage.
struct ScriptSegment {
  int64_t begin;
  int64_t end;
  int script;
  bool operator==(const ScriptSegment&) const = default;
};

/// Splits a pure ASCII digit run into place-aligned groups: segments of at
/// most 510 digits, a leading group of 1-2 digits when the segment length is
/// not a multiple of three, then exact triples. Concatenation reproduces the
/// input. Throws on non-digit characters.
std::vector<std::string> chunk_digits(std::string_view run);

/// Maximal same-script runs for every listed script; unlisted stretches come
/// back with script 0.
std::vector<ScriptSegment> isolate_scripts(std::string_view text,
                                           const ScriptTable& table = ScriptTable::defaults());

/// Word/punctuation segmentation stage. Expects digit- and script-free text
/// (the pipeline guarantees this); stray digits degrade to symbol runs.
/// The exact rules live in docs/pretokenizer.md.
std::vector<Pretoken> split_words(std::string_view text);

/// Full pipeline: digit isolation and chunking, script isolation, word and
/// punctuation splitting. Lossless: spans tile the input.
std::vector<Pretoken> pretokenize(std::string_view text,
                                  const ScriptTable& table = ScriptTable::defaults());

/// Same, reusing the caller's output buffer (cleared first).
void pretokenize_into(std::string_view text, std::vector<Pretoken>& out,
                      const ScriptTable& table = ScriptTable::defaults());

/// Decodes one UTF-8 codepoint at byte offset pos. Invalid bytes yield a
/// sentinel above the Unicode range (0x110000 + byte) with length 1 so the
/// pipeline stays total on arbitrary byte strings.
struct DecodedChar {
  uint32_t cp;
  int len;
};
DecodedChar decode_utf8(std::string_view text, int64_t pos);

/// Codepoint count of a byte string under the same tolerant decoding.
int64_t count_codepoints(std::string_view text);

}  // namespace trinity
