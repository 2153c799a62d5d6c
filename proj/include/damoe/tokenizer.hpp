#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "damoe/error.hpp"

namespace damoe {

// ---------------------------------------------------------------------------
// UTF-8. Strict decoding: overlong forms, surrogates and out-of-range
// codepoints are rejected, so corpus ingestion fails loudly on binary junk.
// ---------------------------------------------------------------------------

inline std::vector<std::uint32_t> utf8_decode(const std::string& s) {
    std::vector<std::uint32_t> cps;
    cps.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const std::uint8_t b0 = static_cast<std::uint8_t>(s[i]);
        std::uint32_t cp = 0;
        int extra = 0;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            cp = b0 & 0x1F;
            extra = 1;
        } else if ((b0 & 0xF0) == 0xE0) {
            cp = b0 & 0x0F;
            extra = 2;
        } else if ((b0 & 0xF8) == 0xF0) {
            cp = b0 & 0x07;
            extra = 3;
        } else {
            throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
        }
        if (i + static_cast<std::size_t>(extra) >= s.size())
            throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
        for (int j = 1; j <= extra; ++j) {
            const std::uint8_t b = static_cast<std::uint8_t>(s[i + static_cast<std::size_t>(j)]);
            if ((b & 0xC0) != 0x80)
                throw DataError("invalid UTF-8 continuation byte at offset " + std::to_string(i + j));
            cp = (cp << 6) | (b & 0x3F);
        }
        static constexpr std::uint32_t kMin[4] = {0x0, 0x80, 0x800, 0x10000};
        if (cp < kMin[extra]) throw DataError("overlong UTF-8 encoding at offset " + std::to_string(i));
        if (cp >= 0xD800 && cp <= 0xDFFF)
            throw DataError("UTF-8 encoded surrogate at offset " + std::to_string(i));
        if (cp > 0x10FFFF) throw DataError("UTF-8 codepoint out of range at offset " + std::to_string(i));
        cps.push_back(cp);
        i += static_cast<std::size_t>(1 + extra);
    }
    return cps;
}

inline std::string utf8_encode(std::uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

enum class TokenizerMode { chars, whitespace };

/// Codepoint- or whitespace-level tokenizer with three reserved ids. Encoding
/// never produces the pad id; unknown tokens map to unk.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kReserved = 3;

    Tokenizer() = default;

    static Tokenizer fit(TokenizerMode mode, const std::string& text) {
        Tokenizer tk;
        tk.mode_ = mode;
        std::set<std::string> seen;
        if (mode == TokenizerMode::chars) {
            for (std::uint32_t cp : utf8_decode(text)) seen.insert(utf8_encode(cp));
        } else {
            for (const std::string& w : split_whitespace(text)) seen.insert(w);
        }
        for (const std::string& tok : seen) {
            tk.ids_[tok] = static_cast<int>(tk.tokens_.size()) + kReserved;
            tk.tokens_.push_back(tok);
        }
        return tk;
    }

    TokenizerMode mode() const { return mode_; }
    int vocab_size() const { return static_cast<int>(tokens_.size()) + kReserved; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        if (mode_ == TokenizerMode::chars) {
            for (std::uint32_t cp : utf8_decode(text)) out.push_back(lookup(utf8_encode(cp)));
        } else {
            for (const std::string& w : split_whitespace(text)) out.push_back(lookup(w));
        }
        return out;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        bool first = true;
        for (int id : ids) {
            if (id == kPad || id == kCls) continue;
            std::string piece;
            if (id == kUnk)
                piece = "\xEF\xBF\xBD"; // U+FFFD
            else
                piece = token(id);
            if (mode_ == TokenizerMode::whitespace && !first) out += ' ';
            out += piece;
            first = false;
        }
        return out;
    }

    const std::string& token(int id) const {
        static const std::string reserved[kReserved] = {"<pad>", "<unk>", "<cls>"};
        if (id >= 0 && id < kReserved) return reserved[id];
        if (id < kReserved || id >= vocab_size())
            throw IndexError("token id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<std::size_t>(id - kReserved)];
    }

    std::string to_json() const {
        nlohmann::json j;
        j["mode"] = mode_ == TokenizerMode::chars ? "char" : "whitespace";
        j["tokens"] = tokens_;
        return j.dump();
    }

    static Tokenizer from_json(const std::string& text) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(std::string("bad tokenizer json: ") + e.what());
        }
        if (!j.contains("mode") || !j.contains("tokens")) throw LoadError("tokenizer json missing fields");
        Tokenizer tk;
        tk.mode_ = j["mode"] == "whitespace" ? TokenizerMode::whitespace : TokenizerMode::chars;
        for (const auto& t : j["tokens"]) {
            const std::string tok = t.get<std::string>();
            tk.ids_[tok] = static_cast<int>(tk.tokens_.size()) + kReserved;
            tk.tokens_.push_back(tok);
        }
        return tk;
    }

private:
    static std::vector<std::string> split_whitespace(const std::string& text) {
        std::vector<std::string> out;
        std::istringstream in(text);
        std::string w;
        while (in >> w) out.push_back(w);
        return out;
    }

    int lookup(const std::string& tok) const {
        auto it = ids_.find(tok);
        return it == ids_.end() ? kUnk : it->second;
    }

    TokenizerMode mode_ = TokenizerMode::chars;
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

} // namespace damoe
