#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/tensor.hpp"
#include "damoe/tokenizer.hpp"

namespace damoe {

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

// ---------------------------------------------------------------------------
// Corpus: blank-line separated documents with a deterministic hash split.
// ---------------------------------------------------------------------------

struct Corpus {
    std::vector<std::string> documents;
    std::vector<bool> is_train; // parallel to documents

    std::string train_text() const { return joined(true); }
    std::string valid_text() const { return joined(false); }

    int train_count() const {
        int n = 0;
        for (bool t : is_train) n += t ? 1 : 0;
        return n;
    }

private:
    std::string joined(bool train) const {
        std::string out;
        for (std::size_t i = 0; i < documents.size(); ++i) {
            if (is_train[i] != train) continue;
            if (!out.empty()) out += "\n\n";
            out += documents[i];
        }
        return out;
    }
};

/// Splits a UTF-8 text file into blank-line-separated documents and assigns
/// each to train/valid by content hash (95/5).
inline Corpus ingest(const std::string& path) {
    const std::string text = read_text_file(path);
    utf8_decode(text); // validation only

    Corpus corpus;
    std::string current;
    std::istringstream in(text);
    std::string line;
    auto flush = [&]() {
        while (!current.empty() && current.back() == '\n') current.pop_back();
        if (!current.empty()) {
            corpus.documents.push_back(current);
            current.clear();
        }
    };
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        bool blank = true;
        for (char c : line)
            if (c != ' ' && c != '\t') blank = false;
        if (blank)
            flush();
        else
            current += line + "\n";
    }
    flush();
    if (corpus.documents.empty()) throw DataError("no documents in '" + path + "'");
    for (const std::string& doc : corpus.documents)
        corpus.is_train.push_back(fnv1a64(doc) % 100 < 95);
    return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic sentiment dataset. The bundled TSV is the output of
// generate_sentiment for a fixed seed; a test pins that equality.
// ---------------------------------------------------------------------------

struct LabeledExample {
    int label = 0; // 1 = positive
    std::string text;
};

inline std::vector<LabeledExample> generate_sentiment(int count, std::uint64_t seed) {
    static const std::vector<std::string> subjects = {
        "the movie", "this film", "the plot",   "the acting",  "her performance",
        "the script", "the show",  "that scene", "the pacing",  "his direction",
        "the soundtrack", "the ending", "the dialogue", "the cast", "the premiere"};
    static const std::vector<std::string> pos_adj = {
        "wonderful", "inspiring", "brilliant", "delightful", "moving",
        "superb",    "charming",  "excellent", "gripping",   "beautiful"};
    static const std::vector<std::string> neg_adj = {
        "dreadful", "boring",  "awful",     "tedious", "clumsy",
        "shallow",  "painful", "forgettable", "messy",  "lifeless"};
    static const std::vector<std::string> verbs = {"was", "felt", "seemed", "turned out", "proved"};
    static const std::vector<std::string> adverbs = {"", "really", "truly", "absolutely",
                                                     "quite", "utterly", "honestly"};
    static const std::vector<std::string> tails = {
        "", "from start to finish", "in every way", "beyond any doubt",
        "despite the hype", "against all odds", "for the whole audience"};

    Rng rng(seed);
    std::vector<LabeledExample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int label = static_cast<int>(rng.uniform_int(2));
        const auto& adj = label ? pos_adj : neg_adj;
        std::string s = subjects[rng.uniform_int(subjects.size())];
        s += " " + verbs[rng.uniform_int(verbs.size())];
        const std::string& adv = adverbs[rng.uniform_int(adverbs.size())];
        if (!adv.empty()) s += " " + adv;
        s += " " + adj[rng.uniform_int(adj.size())];
        const std::string& tail = tails[rng.uniform_int(tails.size())];
        if (!tail.empty()) s += " " + tail;
        out.push_back({label, s});
    }
    return out;
}

inline std::string sentiment_tsv(const std::vector<LabeledExample>& examples) {
    std::string out;
    for (const LabeledExample& ex : examples)
        out += std::to_string(ex.label) + "\t" + ex.text + "\n";
    return out;
}

inline std::vector<LabeledExample> load_sentiment_tsv(const std::string& path) {
    const std::string text = read_text_file(path);
    utf8_decode(text);
    std::vector<LabeledExample> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected 'label<TAB>text'");
        const std::string label = line.substr(0, tab);
        if (label != "0" && label != "1")
            throw DataError(path + ":" + std::to_string(lineno) + ": label must be 0 or 1");
        const std::string body = line.substr(tab + 1);
        if (body.empty()) throw DataError(path + ":" + std::to_string(lineno) + ": empty text");
        out.push_back({label == "1" ? 1 : 0, body});
    }
    if (out.empty()) throw DataError("no examples in '" + path + "'");
    return out;
}

/// Deterministic 80/20 split by text hash.
inline void split_examples(const std::vector<LabeledExample>& all, std::vector<LabeledExample>& train,
                           std::vector<LabeledExample>& eval) {
    for (const LabeledExample& ex : all) {
        if (fnv1a64(ex.text) % 5 < 4)
            train.push_back(ex);
        else
            eval.push_back(ex);
    }
    if (train.empty() || eval.empty()) throw DataError("degenerate sentiment split");
}

} // namespace damoe
