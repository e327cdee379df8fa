#include "calm/vocab.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>

namespace calm {

namespace {

using nlohmann::json;

int utf8_len(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1; // malformed byte: treat as its own token
}

void add_token(Vocabulary& v, const std::string& tok) {
    v.token_to_id.emplace(tok, TokenId(v.id_to_token.size()));
    v.id_to_token.push_back(tok);
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = {}) {
    std::ofstream f(path, mode);
    if (!f) throw IngestError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode = {}) {
    std::ifstream f(path, mode);
    if (!f) throw IngestError("cannot open for reading: " + path);
    return f;
}

} // namespace

std::optional<TokenId> Vocabulary::lookup(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    if (it == token_to_id.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id >= id_to_token.size())
        throw IngestError("token id " + std::to_string(id) + " out of range");
    return id_to_token[id];
}

std::vector<std::string> utf8_codepoints(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        int len = utf8_len(static_cast<unsigned char>(text[i]));
        if (i + len > text.size()) len = 1;
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

std::vector<std::string> split_whitespace(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.push_back(text.substr(start, i - start));
    }
    return out;
}

CharVocabResult build_char_vocab(const std::vector<std::string>& lines, int min_count) {
    if (min_count < 1) throw ConfigError("min_count must be >= 1");
    std::unordered_map<std::string, long> counts;
    std::vector<std::vector<std::string>> split;
    split.reserve(lines.size());
    for (const auto& line : lines) {
        split.push_back(utf8_codepoints(line));
        for (const auto& cp : split.back()) counts[cp]++;
    }

    CharVocabResult res;
    res.vocab.mode = Vocabulary::Mode::Character;
    for (std::size_t li = 0; li < lines.size(); ++li) {
        bool keep = true;
        for (const auto& cp : split[li])
            if (counts[cp] < min_count) {
                keep = false;
                break;
            }
        if (!keep) {
            res.dropped_lines++;
            continue;
        }
        res.lines.push_back(lines[li]);
        for (const auto& cp : split[li])
            if (!res.vocab.lookup(cp)) add_token(res.vocab, cp);
    }
    if (res.vocab.size() == 0) throw IngestError("character filtering removed the entire corpus");
    return res;
}

Vocabulary build_word_vocab(const std::vector<std::vector<std::string>>& corpora, int top_k) {
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    Vocabulary vocab;
    vocab.mode = Vocabulary::Mode::Word;
    for (const auto& corpus : corpora) {
        if (corpus.empty()) throw IngestError("empty corpus in word-vocabulary build");
        std::unordered_map<std::string, long> counts;
        std::vector<std::string> order; // first-occurrence order, the tie-breaker
        for (const auto& w : corpus) {
            auto [it, fresh] = counts.emplace(w, 0);
            it->second++;
            if (fresh) order.push_back(w);
        }
        std::vector<std::size_t> idx(order.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return counts[order[a]] > counts[order[b]];
        });
        const std::size_t keep = std::min<std::size_t>(idx.size(), std::size_t(top_k));
        for (std::size_t i = 0; i < keep; ++i) {
            const std::string& w = order[idx[i]];
            if (!vocab.lookup(w)) add_token(vocab, w);
        }
    }
    vocab.unk_id = TokenId(vocab.id_to_token.size());
    add_token(vocab, "<unk>");
    return vocab;
}

std::vector<TokenId> encode_chars(const std::string& text, const Vocabulary& vocab) {
    if (vocab.mode != Vocabulary::Mode::Character)
        throw ConfigError("encode_chars requires a character vocabulary");
    std::vector<TokenId> out;
    for (const auto& cp : utf8_codepoints(text)) {
        auto id = vocab.lookup(cp);
        if (!id) throw IngestError("character '" + cp + "' not in vocabulary");
        out.push_back(*id);
    }
    return out;
}

std::vector<TokenId> encode_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                                  std::size_t* unk_count) {
    if (vocab.mode != Vocabulary::Mode::Word)
        throw ConfigError("encode_words requires a word vocabulary");
    std::vector<TokenId> out;
    out.reserve(words.size());
    std::size_t unk = 0;
    for (const auto& w : words) {
        auto id = vocab.lookup(w);
        if (id) {
            out.push_back(*id);
        } else {
            out.push_back(*vocab.unk_id);
            unk++;
        }
    }
    if (unk_count) *unk_count = unk;
    return out;
}

std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
    std::string out;
    const bool spaces = vocab.mode == Vocabulary::Mode::Word;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (spaces && i > 0) out += ' ';
        out += vocab.token(ids[i]);
    }
    return out;
}

Vocabulary synthetic_vocab(int vocab_size) {
    if (vocab_size < 2) throw ConfigError("synthetic vocabulary needs V >= 2");
    Vocabulary v;
    // Printable single characters keep sampled output readable; beyond ASCII
    // fall back to word-style tokens.
    if (vocab_size <= 94) {
        v.mode = Vocabulary::Mode::Character;
        for (int i = 0; i < vocab_size; ++i) add_token(v, std::string(1, char('!' + i)));
    } else {
        v.mode = Vocabulary::Mode::Word;
        for (int i = 0; i < vocab_size - 1; ++i) add_token(v, "t" + std::to_string(i));
        v.unk_id = TokenId(vocab_size - 1);
        add_token(v, "<unk>");
    }
    return v;
}

void save_token_bin(const std::string& path, const ClassCorpus& corpus, const Vocabulary& vocab) {
    auto f = open_out(path, std::ios::binary);
    json header{{"vocab_size", vocab.size()},
                {"mode", vocab.mode == Vocabulary::Mode::Character ? "char" : "word"},
                {"class_name", corpus.class_name}};
    f << header.dump() << '\n';
    static_assert(sizeof(TokenId) == 4);
    for (TokenId id : corpus.tokens) {
        unsigned char bytes[4] = {static_cast<unsigned char>(id & 0xff),
                                  static_cast<unsigned char>((id >> 8) & 0xff),
                                  static_cast<unsigned char>((id >> 16) & 0xff),
                                  static_cast<unsigned char>((id >> 24) & 0xff)};
        f.write(reinterpret_cast<const char*>(bytes), 4);
    }
    if (!f) throw IngestError("failed writing token file: " + path);
}

ClassCorpus load_token_bin(const std::string& path, int class_id) {
    auto f = open_in(path, std::ios::binary);
    std::string header_line;
    if (!std::getline(f, header_line)) throw IngestError("missing header in " + path);
    json header = json::parse(header_line, nullptr, false);
    if (header.is_discarded() || !header.contains("vocab_size"))
        throw IngestError("malformed token-file header in " + path);
    const TokenId vocab_size = header["vocab_size"].get<TokenId>();

    ClassCorpus corpus;
    corpus.class_id = class_id;
    corpus.class_name = header.value("class_name", "");
    unsigned char bytes[4];
    while (f.read(reinterpret_cast<char*>(bytes), 4)) {
        TokenId id = TokenId(bytes[0]) | TokenId(bytes[1]) << 8 | TokenId(bytes[2]) << 16 |
                     TokenId(bytes[3]) << 24;
        if (id >= vocab_size)
            throw IngestError("token id " + std::to_string(id) + " exceeds vocab size in " + path);
        corpus.tokens.push_back(id);
    }
    if (f.gcount() != 0) throw IngestError("trailing partial token in " + path);
    return corpus;
}

void save_vocab_json(const std::string& path, const Vocabulary& vocab) {
    auto f = open_out(path);
    f << json(vocab.id_to_token).dump() << '\n';
    if (!f) throw IngestError("failed writing vocabulary: " + path);
}

Vocabulary load_vocab_json(const std::string& path) {
    auto f = open_in(path);
    json arr = json::parse(f, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) throw IngestError("malformed vocabulary: " + path);
    Vocabulary v;
    for (const auto& tok : arr) add_token(v, tok.get<std::string>());
    if (v.size() < 2) throw IngestError("vocabulary too small: " + path);
    // Word mode is recognized by its distinguished unk token.
    auto unk = v.lookup("<unk>");
    if (unk) {
        v.mode = Vocabulary::Mode::Word;
        v.unk_id = unk;
    } else {
        v.mode = Vocabulary::Mode::Character;
    }
    return v;
}

std::vector<std::string> read_lines(const std::string& path) {
    auto f = open_in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

} // namespace calm
