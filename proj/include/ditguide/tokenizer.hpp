#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ditguide/common.hpp"

// Two deliberately different toy text encodings. Encoder A maps one
// word to one token; encoder B splits a word into its character
// bigrams, so every word of three or more characters tokenizes to a
// different count under the two encoders.

namespace ditguide {

enum class EncoderId { A, B };

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream iss(text);
    std::string w;
    while (iss >> w) out.push_back(w);
    return out;
}

// Pieces of a word under encoder B: character bigrams, or the word
// itself when shorter than two characters.
inline std::vector<std::string> bigram_pieces(const std::string& word) {
    if (word.size() < 2) return {word};
    std::vector<std::string> out;
    for (size_t i = 0; i + 1 < word.size(); ++i) {
        out.push_back(word.substr(i, 2));
    }
    return out;
}

struct TokenizerTables {
    std::vector<std::string> vocab_a;  // token id -> word
    std::vector<std::string> vocab_b;  // token id -> bigram piece
    std::map<std::string, int> index_a;
    std::map<std::string, int> index_b;

    int vocab_size_a() const { return static_cast<int>(vocab_a.size()); }
    int vocab_size_b() const { return static_cast<int>(vocab_b.size()); }
};

// Vocabulary is closed over the caption words the dataset can emit.
// Words of exactly two characters are rejected: their bigram count
// would collide with encoder A's single token and break the
// dual-encoder contract.
inline TokenizerTables build_tokenizer_tables(const std::vector<std::string>& words) {
    std::set<std::string> wa;
    std::set<std::string> wb;
    for (const auto& w : words) {
        if (w.empty()) throw Error("tokenizer: empty word in vocabulary");
        if (w.size() == 2) {
            throw Error("tokenizer: two-character word '" + w +
                        "' would tokenize identically under both encoders");
        }
        wa.insert(w);
        for (const auto& p : bigram_pieces(w)) wb.insert(p);
    }
    TokenizerTables t;
    t.vocab_a.assign(wa.begin(), wa.end());
    t.vocab_b.assign(wb.begin(), wb.end());
    for (size_t i = 0; i < t.vocab_a.size(); ++i) t.index_a[t.vocab_a[i]] = static_cast<int>(i);
    for (size_t i = 0; i < t.vocab_b.size(); ++i) t.index_b[t.vocab_b[i]] = static_cast<int>(i);
    return t;
}

// Inclusive [first, last] token range of one word occurrence.
struct TokenSpan {
    int first = 0;
    int last = 0;
    int count() const { return last - first + 1; }
};

struct EncodedText {
    std::vector<int> tokens;
    std::vector<TokenSpan> word_spans;  // one per caption word, in order
};

inline EncodedText tokenize(const std::string& caption, EncoderId enc, const TokenizerTables& tables) {
    EncodedText out;
    for (const auto& w : split_words(caption)) {
        TokenSpan span;
        span.first = static_cast<int>(out.tokens.size());
        if (enc == EncoderId::A) {
            auto it = tables.index_a.find(w);
            if (it == tables.index_a.end()) {
                throw Error("tokenize: word '" + w + "' not in encoder A vocabulary");
            }
            out.tokens.push_back(it->second);
        } else {
            for (const auto& p : bigram_pieces(w)) {
                auto it = tables.index_b.find(p);
                if (it == tables.index_b.end()) {
                    throw Error("tokenize: word '" + w + "' not in encoder B vocabulary");
                }
                out.tokens.push_back(it->second);
            }
        }
        span.last = static_cast<int>(out.tokens.size()) - 1;
        out.word_spans.push_back(span);
    }
    return out;
}

// A caption tokenized under both encoders, with the subject words
// resolved to their spans. Subjects are distinct words of the caption.
struct TokenizedPrompt {
    std::string caption;
    std::vector<std::string> words;          // caption words in order
    std::vector<int> tokens_a;
    std::vector<int> tokens_b;
    std::vector<TokenSpan> word_spans_a;     // per caption word
    std::vector<TokenSpan> word_spans_b;
    std::vector<std::string> subject_words;  // ordered, distinct
    std::vector<int> subject_word_index;     // position of each subject in words[]

    int num_subjects() const { return static_cast<int>(subject_words.size()); }
    TokenSpan subject_span(int subject, EncoderId enc) const {
        const int wi = subject_word_index.at(static_cast<size_t>(subject));
        return enc == EncoderId::A ? word_spans_a[static_cast<size_t>(wi)]
                                   : word_spans_b[static_cast<size_t>(wi)];
    }
};

inline TokenizedPrompt tokenize_prompt(const std::string& caption,
                                       const std::vector<std::string>& subject_words,
                                       const TokenizerTables& tables) {
    TokenizedPrompt p;
    p.caption = caption;
    p.words = split_words(caption);
    EncodedText a = tokenize(caption, EncoderId::A, tables);
    EncodedText b = tokenize(caption, EncoderId::B, tables);
    p.tokens_a = std::move(a.tokens);
    p.tokens_b = std::move(b.tokens);
    p.word_spans_a = std::move(a.word_spans);
    p.word_spans_b = std::move(b.word_spans);
    p.subject_words = subject_words;
    for (const auto& s : subject_words) {
        auto it = std::find(p.words.begin(), p.words.end(), s);
        if (it == p.words.end()) {
            throw Error("tokenize_prompt: subject '" + s + "' does not appear in caption");
        }
        p.subject_word_index.push_back(static_cast<int>(it - p.words.begin()));
    }
    return p;
}

}  // namespace ditguide
