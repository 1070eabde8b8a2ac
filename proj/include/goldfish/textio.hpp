#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace goldfish {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

inline constexpr Token kBos = 256;
inline constexpr Token kEos = 257;
inline constexpr int kVocabSize = 258;

/// UTF-8 text that has been through normalize_text(). Construct only via
/// normalize_text() or NormalizedText::trusted() for already-normalized data.
class NormalizedText {
 public:
  NormalizedText() = default;
  const std::string& str() const { return text_; }
  std::size_t size() const { return text_.size(); }
  bool empty() const { return text_.empty(); }
  bool operator==(const NormalizedText&) const = default;

  static NormalizedText trusted(std::string s) {
    NormalizedText t;
    t.text_ = std::move(s);
    return t;
  }

 private:
  std::string text_;
};

/// Canonical normalization applied once at ingestion:
///   U+00AD (soft hyphen)      -> removed
///   U+00A0 (no-break space)   -> ' '
///   "\r\n" and lone '\r'      -> '\n'
///   runs of ' '               -> single ' '
/// Everything else is copied through. Throws DecodeError on invalid UTF-8.
NormalizedText normalize_text(std::string_view raw);

/// Byte-level tokenization; BOS is prepended when `add_bos` is set.
TokenSeq tokenize(const NormalizedText& text, bool add_bos);

/// Inverse of tokenize(). BOS/EOS are skipped; each maximal run of bytes that
/// is not valid UTF-8 becomes a single U+FFFD.
std::string detokenize(std::span<const Token> seq);

/// Returns the byte offset of the first invalid UTF-8 sequence, or npos.
std::size_t find_invalid_utf8(std::string_view s);

struct Document {
  std::string id;
  NormalizedText text;
  TokenSeq tokens;  // BOS-prefixed
  std::string source;
};

struct Corpus {
  std::vector<Document> documents;

  std::size_t size() const { return documents.size(); }
  const Document& operator[](std::size_t i) const { return documents[i]; }
  /// Throws CorpusError on duplicate ids or empty documents.
  void validate() const;
};

enum class CorpusFormat { PlainDir, Jsonl };

CorpusFormat parse_corpus_format(std::string_view name);

/// Loads a corpus. `PlainDir` reads every *.txt file in the directory (sorted by
/// filename, id = file stem); `Jsonl` reads {"id","text"} objects per line.
Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format);

/// Picks the format from the path: directories are PlainDir, files are Jsonl.
Corpus load_corpus(const std::filesystem::path& path);

/// Builds a Document from raw text (normalize + tokenize with BOS).
Document make_document(std::string id, std::string_view raw, std::string source = {});

void write_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace goldfish
