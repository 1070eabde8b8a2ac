#include "goldfish/textio.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "goldfish/errors.hpp"

namespace goldfish {
namespace {

// Length of the valid UTF-8 sequence starting at s[i], or 0 if invalid.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) return 1;
  std::size_t len = 0;
  std::uint32_t cp = 0;
  if (b0 >= 0xC2 && b0 <= 0xDF) {
    len = 2;
    cp = b0 & 0x1F;
  } else if (b0 >= 0xE0 && b0 <= 0xEF) {
    len = 3;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xF0 && b0 <= 0xF4) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t j = 1; j < len; ++j) {
    const auto b = static_cast<unsigned char>(s[i + j]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  // overlong, surrogate and range checks
  if (len == 3 && (cp < 0x800 || (cp >= 0xD800 && cp <= 0xDFFF))) return 0;
  if (len == 4 && (cp < 0x10000 || cp > 0x10FFFF)) return 0;
  return len;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::size_t find_invalid_utf8(std::string_view s) {
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t n = utf8_sequence_length(s, i);
    if (n == 0) return i;
    i += n;
  }
  return std::string_view::npos;
}

NormalizedText normalize_text(std::string_view raw) {
  if (const auto bad = find_invalid_utf8(raw); bad != std::string_view::npos) {
    throw DecodeError("invalid UTF-8 at byte offset " + std::to_string(bad), bad);
  }
  std::string out;
  out.reserve(raw.size());
  auto push_space = [&out] {
    if (out.empty() || out.back() != ' ') out.push_back(' ');
  };
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto c = static_cast<unsigned char>(raw[i]);
    if (c == 0xC2 && i + 1 < raw.size()) {
      const auto next = static_cast<unsigned char>(raw[i + 1]);
      if (next == 0xAD) {  // soft hyphen
        ++i;
        continue;
      }
      if (next == 0xA0) {  // no-break space
        ++i;
        push_space();
        continue;
      }
    }
    if (c == '\r') {
      if (i + 1 < raw.size() && raw[i + 1] == '\n') ++i;
      out.push_back('\n');
      continue;
    }
    if (c == ' ') {
      push_space();
      continue;
    }
    out.push_back(static_cast<char>(c));
  }
  return NormalizedText::trusted(std::move(out));
}

TokenSeq tokenize(const NormalizedText& text, bool add_bos) {
  TokenSeq ids;
  ids.reserve(text.size() + 1);
  if (add_bos) ids.push_back(kBos);
  for (const char c : text.str()) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string detokenize(std::span<const Token> seq) {
  std::string bytes;
  bytes.reserve(seq.size());
  for (const Token t : seq) {
    if (t >= 0 && t < 256) bytes.push_back(static_cast<char>(t));
  }
  std::string out;
  out.reserve(bytes.size());
  bool in_bad_run = false;
  for (std::size_t i = 0; i < bytes.size();) {
    const std::size_t n = utf8_sequence_length(bytes, i);
    if (n == 0) {
      if (!in_bad_run) out += "\xEF\xBF\xBD";
      in_bad_run = true;
      ++i;
      continue;
    }
    in_bad_run = false;
    out.append(bytes, i, n);
    i += n;
  }
  return out;
}

void Corpus::validate() const {
  std::set<std::string> seen;
  for (const auto& d : documents) {
    if (!seen.insert(d.id).second) throw CorpusError("duplicate document id: " + d.id);
    if (d.text.empty()) {
      throw CorpusError("empty document: " + (d.source.empty() ? d.id : d.source));
    }
  }
}

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "plain-dir" || name == "dir") return CorpusFormat::PlainDir;
  if (name == "jsonl") return CorpusFormat::Jsonl;
  throw ConfigError("unknown corpus format: " + std::string(name));
}

Document make_document(std::string id, std::string_view raw, std::string source) {
  Document d;
  d.id = std::move(id);
  d.text = normalize_text(raw);
  d.tokens = tokenize(d.text, true);
  d.source = std::move(source);
  return d;
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw CorpusError("corpus path does not exist: " + path.string());
  Corpus corpus;
  if (format == CorpusFormat::PlainDir) {
    if (!fs::is_directory(path)) throw CorpusError("not a directory: " + path.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string raw = read_file(f);
      Document d;
      try {
        d = make_document(f.stem().string(), raw, f.string());
      } catch (const DecodeError& e) {
        throw DecodeError(f.string() + ": " + e.what(), e.offset());
      }
      if (d.text.empty()) throw CorpusError("empty document: " + f.string());
      corpus.documents.push_back(std::move(d));
    }
  } else {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = path.string() + ":" + std::to_string(lineno);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw CorpusError("malformed jsonl at line " + std::to_string(lineno) + " (" + where + "): " + e.what());
      }
      if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["id"].is_string() ||
          !j["text"].is_string()) {
        throw CorpusError("malformed jsonl at line " + std::to_string(lineno) +
                          ": expected {\"id\": string, \"text\": string}");
      }
      Document d;
      try {
        d = make_document(j["id"].get<std::string>(), j["text"].get<std::string>(), where);
      } catch (const DecodeError& e) {
        throw DecodeError(where + ": " + e.what(), e.offset());
      }
      corpus.documents.push_back(std::move(d));
    }
  }
  corpus.validate();
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
  return load_corpus(path, std::filesystem::is_directory(path) ? CorpusFormat::PlainDir : CorpusFormat::Jsonl);
}

void write_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& d : corpus.documents) {
    out << nlohmann::json{{"id", d.id}, {"text", d.text.str()}}.dump() << '\n';
  }
}

}  // namespace goldfish
