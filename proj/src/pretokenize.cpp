#include "trinity/pretokenize.hpp"

#include <algorithm>
#include <stdexcept>

namespace trinity {

const char* to_string(PretokenKind kind) {
  switch (kind) {
    case PretokenKind::digits: return "digits";
    case PretokenKind::script_run: return "script_run";
    case PretokenKind::word: return "word";
    case PretokenKind::punct: return "punct";
    case PretokenKind::whitespace: return "whitespace";
    case PretokenKind::newline: return "newline";
  }
  return "?";
}

ScriptTable::ScriptTable(std::vector<Range> ranges, std::vector<std::string> names)
    : ranges_(std::move(ranges)), names_(std::move(names)) {
  std::sort(ranges_.begin(), ranges_.end(), [](const Range& a, const Range& b) { return a.lo < b.lo; });
  for (size_t i = 0; i < ranges_.size(); ++i) {
    const Range& r = ranges_[i];
    if (r.lo >= r.hi) throw std::invalid_argument("ScriptTable: empty range");
    if (r.script <= 0 || r.script >= static_cast<int>(names_.size())) {
      throw std::invalid_argument("ScriptTable: script id out of range");
    }
    if (i > 0 && ranges_[i - 1].hi > r.lo) throw std::invalid_argument("ScriptTable: overlapping ranges");
  }
}

const ScriptTable& ScriptTable::defaults() {
  enum { kOther, kCjk, kHiragana, kKatakana, kThai, kLao, kKhmer, kMyanmar, kHangulSyll, kHangulJamo };
  static const ScriptTable table(
      {
          {0x3400, 0x4DC0, kCjk},   // CJK unified ideographs extension A
          {0x4E00, 0xA000, kCjk},   // CJK unified ideographs
          {0x3040, 0x30A0, kHiragana},
          {0x30A0, 0x3100, kKatakana},
          {0x0E00, 0x0E80, kThai},
          {0x0E80, 0x0F00, kLao},
          {0x1780, 0x1800, kKhmer},
          {0x1000, 0x10A0, kMyanmar},
          {0xAC00, 0xD7A4, kHangulSyll},
          {0x1100, 0x1200, kHangulJamo},
      },
      {"other", "cjk", "hiragana", "katakana", "thai", "lao", "khmer", "myanmar", "hangul_syllables",
       "hangul_jamo"});
  return table;
}

int ScriptTable::classify(uint32_t cp) const {
  // ranges_ is small and sorted; linear probe is branch-predictable.
  for (const Range& r : ranges_) {
    if (cp < r.lo) return 0;
    if (cp < r.hi) return r.script;
  }
  return 0;
}

DecodedChar decode_utf8(std::string_view text, int64_t pos) {
  const auto* p = reinterpret_cast<const unsigned char*>(text.data()) + pos;
  const int64_t rest = static_cast<int64_t>(text.size()) - pos;
  const unsigned char b0 = p[0];
  auto invalid = [&]() { return DecodedChar{0x110000u + b0, 1}; };
  if (b0 < 0x80) return {b0, 1};
  if ((b0 & 0xE0) == 0xC0) {
    if (rest < 2 || (p[1] & 0xC0) != 0x80) return invalid();
    uint32_t cp = (static_cast<uint32_t>(b0 & 0x1F) << 6) | (p[1] & 0x3F);
    if (cp < 0x80) return invalid();
    return {cp, 2};
  }
  if ((b0 & 0xF0) == 0xE0) {
    if (rest < 3 || (p[1] & 0xC0) != 0x80 || (p[2] & 0xC0) != 0x80) return invalid();
    uint32_t cp = (static_cast<uint32_t>(b0 & 0x0F) << 12) | (static_cast<uint32_t>(p[1] & 0x3F) << 6) |
                  (p[2] & 0x3F);
    if (cp < 0x800 || (cp >= 0xD800 && cp < 0xE000)) return invalid();
    return {cp, 3};
  }
  if ((b0 & 0xF8) == 0xF0) {
    if (rest < 4 || (p[1] & 0xC0) != 0x80 || (p[2] & 0xC0) != 0x80 || (p[3] & 0xC0) != 0x80) return invalid();
    uint32_t cp = (static_cast<uint32_t>(b0 & 0x07) << 18) | (static_cast<uint32_t>(p[1] & 0x3F) << 12) |
                  (static_cast<uint32_t>(p[2] & 0x3F) << 6) | (p[3] & 0x3F);
    if (cp < 0x10000 || cp > 0x10FFFF) return invalid();
    return {cp, 4};
  }
  return invalid();
}

int64_t count_codepoints(std::string_view text) {
  int64_t n = 0, pos = 0;
  while (pos < static_cast<int64_t>(text.size())) {
    pos += decode_utf8(text, pos).len;
    ++n;
  }
  return n;
}

namespace {

constexpr int64_t kDigitRunCap = 510;

bool is_ascii_digit(unsigned char c) { return c >= '0' && c <= '9'; }

/// Emits (offset, length) digit groups for one run via the staged split:
/// cap at 510, peel a 1-2 digit lead per segment, then exact triples.
template <typename Emit>
void chunk_digit_spans(int64_t run_len, Emit&& emit) {
  for (int64_t seg = 0; seg < run_len; seg += kDigitRunCap) {
    const int64_t seg_len = std::min(kDigitRunCap, run_len - seg);
    int64_t off = seg;
    const int64_t lead = seg_len % 3;
    if (lead != 0) {
      emit(off, lead);
      off += lead;
    }
    for (; off < seg + seg_len; off += 3) emit(off, static_cast<int64_t>(3));
  }
}

// Character classes for the word/punct stage. Codepoints at or above 0x80
// count as letters unless listed as whitespace or punctuation below; the
// listed scripts never reach this stage.
bool is_unicode_space(uint32_t cp) {
  return cp == 0x00A0 || cp == 0x1680 || (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 ||
         cp == 0x202F || cp == 0x205F || cp == 0x3000;
}

bool is_unicode_punct(uint32_t cp) {
  return (cp >= 0x00A1 && cp <= 0x00BF) || cp == 0x00D7 || cp == 0x00F7 ||
         (cp >= 0x2000 && cp <= 0x206F) ||   // general punctuation
         (cp >= 0x2190 && cp <= 0x2BFF) ||   // arrows, math and misc symbols
         (cp >= 0x2E00 && cp <= 0x2E7F) ||   // supplemental punctuation
         (cp >= 0x3000 && cp <= 0x303F) ||   // CJK symbols and punctuation
         (cp >= 0xFE10 && cp <= 0xFE6F) ||   // vertical/compat/small forms
         (cp >= 0xFF01 && cp <= 0xFF0F) || (cp >= 0xFF1A && cp <= 0xFF20) ||
         (cp >= 0xFF3B && cp <= 0xFF40) || (cp >= 0xFF5B && cp <= 0xFF65) ||
         cp >= 0x110000;                      // invalid-byte sentinels
}

enum class CharClass : uint8_t { newline, space, other_ws, letter, digit, apostrophe, symbol };

CharClass classify_char(uint32_t cp) {
  if (cp == '\n' || cp == '\r') return CharClass::newline;
  if (cp == ' ') return CharClass::space;
  if (cp == '\t' || cp == '\v' || cp == '\f' || is_unicode_space(cp)) return CharClass::other_ws;
  if (cp < 0x80) {
    if (is_ascii_digit(static_cast<unsigned char>(cp))) return CharClass::digit;
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::letter;
    if (cp == '\'') return CharClass::apostrophe;
    return CharClass::symbol;
  }
  if (is_unicode_punct(cp)) return CharClass::symbol;
  return CharClass::letter;
}

struct Scanner {
  std::string_view text;
  int64_t pos, end;
  uint32_t cp = 0;
  int len = 0;
  CharClass cls = CharClass::symbol;

  Scanner(std::string_view t, int64_t b, int64_t e) : text(t), pos(b), end(e) { load(); }
  bool done() const { return pos >= end; }
  void load() {
    if (!done()) {
      DecodedChar d = decode_utf8(text, pos);
      cp = d.cp;
      len = d.len;
      cls = classify_char(cp);
    }
  }
  void advance() {
    pos += len;
    load();
  }
  /// Consumes consecutive chars of one class, returns end offset.
  int64_t run_of(CharClass c) {
    while (!done() && cls == c) advance();
    return pos;
  }
  int64_t letters_and_apostrophe_free_run() {
    while (!done() && cls == CharClass::letter) advance();
    return pos;
  }
};

/// Word/punct stage over [begin, end); appends pretokens.
void split_words_into(std::string_view text, int64_t begin, int64_t end, std::vector<Pretoken>& out) {
  Scanner sc(text, begin, end);
  while (!sc.done()) {
    const int64_t start = sc.pos;
    switch (sc.cls) {
      case CharClass::newline: {
        sc.advance();
        out.push_back({start, sc.run_of(CharClass::newline), PretokenKind::newline});
        break;
      }
      case CharClass::apostrophe: {
        sc.advance();
        if (!sc.done() && sc.cls == CharClass::letter) {
          out.push_back({start, sc.letters_and_apostrophe_free_run(), PretokenKind::word});
        } else {
          // plain symbol run starting with the apostrophe
          while (!sc.done() && (sc.cls == CharClass::symbol || sc.cls == CharClass::apostrophe)) sc.advance();
          out.push_back({start, sc.pos, PretokenKind::punct});
        }
        break;
      }
      case CharClass::letter: {
        out.push_back({start, sc.letters_and_apostrophe_free_run(), PretokenKind::word});
        break;
      }
      case CharClass::space: {
        // A single space may attach to a following word or symbol run.
        sc.advance();
        if (!sc.done() && sc.cls == CharClass::letter) {
          out.push_back({start, sc.letters_and_apostrophe_free_run(), PretokenKind::word});
          break;
        }
        if (!sc.done() && (sc.cls == CharClass::symbol || sc.cls == CharClass::digit ||
                           sc.cls == CharClass::apostrophe)) {
          while (!sc.done() && (sc.cls == CharClass::symbol || sc.cls == CharClass::digit ||
                                sc.cls == CharClass::apostrophe)) {
            sc.advance();
          }
          out.push_back({start, sc.pos, PretokenKind::punct});
          break;
        }
        // Whitespace run. Keep the final space available for attachment when
        // something attachable follows.
        while (!sc.done() && (sc.cls == CharClass::space || sc.cls == CharClass::other_ws)) sc.advance();
        int64_t ws_end = sc.pos;
        if (!sc.done() && sc.cls != CharClass::newline && text[static_cast<size_t>(ws_end - 1)] == ' ' &&
            ws_end - start > 1) {
          ws_end -= 1;
          sc.pos = ws_end;
          sc.load();
        }
        out.push_back({start, ws_end, PretokenKind::whitespace});
        break;
      }
      case CharClass::other_ws: {
        while (!sc.done() && (sc.cls == CharClass::space || sc.cls == CharClass::other_ws)) sc.advance();
        int64_t ws_end = sc.pos;
        if (!sc.done() && sc.cls != CharClass::newline && text[static_cast<size_t>(ws_end - 1)] == ' ') {
          ws_end -= 1;
          sc.pos = ws_end;
          sc.load();
        }
        out.push_back({start, ws_end, PretokenKind::whitespace});
        break;
      }
      case CharClass::digit:
      case CharClass::symbol: {
        while (!sc.done() && (sc.cls == CharClass::symbol || sc.cls == CharClass::digit ||
                              sc.cls == CharClass::apostrophe)) {
          sc.advance();
        }
        out.push_back({start, sc.pos, PretokenKind::punct});
        break;
      }
    }
  }
}

}  // namespace

std::vector<std::string> chunk_digits(std::string_view run) {
  for (char c : run) {
    if (!is_ascii_digit(static_cast<unsigned char>(c))) {
      throw std::invalid_argument("chunk_digits: non-digit character in input");
    }
  }
  std::vector<std::string> out;
  chunk_digit_spans(static_cast<int64_t>(run.size()), [&](int64_t off, int64_t len) {
    out.emplace_back(run.substr(static_cast<size_t>(off), static_cast<size_t>(len)));
  });
  return out;
}

std::vector<ScriptSegment> isolate_scripts(std::string_view text, const ScriptTable& table) {
  std::vector<ScriptSegment> out;
  int64_t pos = 0;
  const int64_t n = static_cast<int64_t>(text.size());
  while (pos < n) {
    DecodedChar d = decode_utf8(text, pos);
    const int script = table.classify(d.cp);
    int64_t end = pos + d.len;
    while (end < n) {
      DecodedChar e = decode_utf8(text, end);
      if (table.classify(e.cp) != script) break;
      end += e.len;
    }
    out.push_back({pos, end, script});
    pos = end;
  }
  return out;
}

std::vector<Pretoken> split_words(std::string_view text) {
  std::vector<Pretoken> out;
  split_words_into(text, 0, static_cast<int64_t>(text.size()), out);
  return out;
}

void pretokenize_into(std::string_view text, std::vector<Pretoken>& out, const ScriptTable& table) {
  out.clear();
  const int64_t n = static_cast<int64_t>(text.size());
  out.reserve(static_cast<size_t>(n / 3 + 4));
  int64_t pos = 0;
  while (pos < n) {
    // Stage 1: digit runs, chunked in place.
    if (is_ascii_digit(static_cast<unsigned char>(text[static_cast<size_t>(pos)]))) {
      int64_t end = pos + 1;
      while (end < n && is_ascii_digit(static_cast<unsigned char>(text[static_cast<size_t>(end)]))) ++end;
      chunk_digit_spans(end - pos, [&](int64_t off, int64_t len) {
        out.push_back({pos + off, pos + off + len, PretokenKind::digits});
      });
      pos = end;
      continue;
    }
    // Non-digit stretch.
    int64_t stretch_end = pos;
    while (stretch_end < n && !is_ascii_digit(static_cast<unsigned char>(text[static_cast<size_t>(stretch_end)]))) {
      ++stretch_end;
    }
    // Stage 2: script isolation inside the stretch; stage 3 on the rest.
    int64_t p = pos;
    while (p < stretch_end) {
      DecodedChar d = decode_utf8(text, p);
      const int script = table.classify(d.cp);
      int64_t run_end = p + d.len;
      while (run_end < stretch_end) {
        DecodedChar e = decode_utf8(text, run_end);
        if (table.classify(e.cp) != script) break;
        run_end += e.len;
      }
      if (script != 0) {
        out.push_back({p, run_end, PretokenKind::script_run});
      } else {
        split_words_into(text, p, run_end, out);
      }
      p = run_end;
    }
    pos = stretch_end;
  }
}

std::vector<Pretoken> pretokenize(std::string_view text, const ScriptTable& table) {
  std::vector<Pretoken> out;
  pretokenize_into(text, out, table);
  return out;
}

}  // namespace trinity
