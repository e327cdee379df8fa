#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "calm/common.hpp"

namespace calm {

// Token inventory shared by every class corpus of a dataset. Character mode
// has no unk (filtering removes rare characters up front); word mode maps
// out-of-vocabulary words to a distinguished unk token.
struct Vocabulary {
    enum class Mode { Character, Word };

    Mode mode = Mode::Character;
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, TokenId> token_to_id;
    std::optional<TokenId> unk_id;

    int size() const { return static_cast<int>(id_to_token.size()); }
    std::optional<TokenId> lookup(const std::string& token) const;
    const std::string& token(TokenId id) const;
};

// One class's encoded corpus; class_id indexes the dataset's class list.
struct ClassCorpus {
    int class_id = 0;
    std::string class_name;
    std::vector<TokenId> tokens;
};

// Splits UTF-8 text into code points. Malformed bytes are kept as single
// one-byte tokens rather than rejected.
std::vector<std::string> utf8_codepoints(const std::string& text);

std::vector<std::string> split_whitespace(const std::string& text);

struct CharVocabResult {
    Vocabulary vocab;
    std::vector<std::string> lines; // surviving lines, input order preserved
    std::size_t dropped_lines = 0;
};

// Counts code points over all lines, removes every line containing a
// character seen fewer than min_count times, and builds the vocabulary from
// the survivors (ids in first-occurrence order). Throws IngestError if
// nothing survives.
CharVocabResult build_char_vocab(const std::vector<std::string>& lines, int min_count = 100);

// Per-corpus top_k words by frequency (ties broken by first occurrence),
// union across corpora in input order, plus "<unk>" appended last.
Vocabulary build_word_vocab(const std::vector<std::vector<std::string>>& corpora, int top_k = 25000);

// Character mode: unknown code point is a hard error (filtering should have
// removed it).
std::vector<TokenId> encode_chars(const std::string& text, const Vocabulary& vocab);

// Word mode: unknown words map to unk; *unk_count (when given) receives the
// number of substitutions.
std::vector<TokenId> encode_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                                  std::size_t* unk_count = nullptr);

// Joins tokens (no separator in character mode, single spaces in word mode).
std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab);

// Synthetic vocabulary for generated corpora: single printable characters
// when V fits in ASCII, "t<i>" word tokens otherwise.
Vocabulary synthetic_vocab(int vocab_size);

// Binary token file: one JSON header line {vocab_size, mode, class_name},
// then the ids as little-endian u32.
void save_token_bin(const std::string& path, const ClassCorpus& corpus, const Vocabulary& vocab);
ClassCorpus load_token_bin(const std::string& path, int class_id);

// The vocabulary file is a JSON array of tokens; word mode is recognized by
// the presence of "<unk>".
void save_vocab_json(const std::string& path, const Vocabulary& vocab);
Vocabulary load_vocab_json(const std::string& path);

std::vector<std::string> read_lines(const std::string& path);

} // namespace calm
