#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace photondfa {

class tokenizer_error : public std::runtime_error {
public:
    explicit tokenizer_error(const std::string& what) : std::runtime_error(what) {}
};

// Splits UTF-8 text into code-point strings; bytes that do not form a valid
// sequence are kept as single-byte tokens.
inline std::vector<std::string> utf8_split(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if ((c & 0x80u) == 0x00u) len = 1;
        else if ((c & 0xE0u) == 0xC0u) len = 2;
        else if ((c & 0xF0u) == 0xE0u) len = 3;
        else if ((c & 0xF8u) == 0xF0u) len = 4;
        if (i + len > text.size()) len = 1;
        for (std::size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(text[i + k]) & 0xC0u) != 0x80u) {
                len = 1;
                break;
            }
        }
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

// Character-level tokenizer: the vocabulary is the sorted set of unique
// code points in the corpus, so encode/decode is the identity on corpus
// text and the mapping is deterministic.
class CharTokenizer {
public:
    CharTokenizer() = default;

    explicit CharTokenizer(std::vector<std::string> vocabulary)
        : vocab_(std::move(vocabulary)) {
        for (std::size_t i = 0; i < vocab_.size(); ++i) index_[vocab_[i]] = static_cast<int>(i);
        if (vocab_.empty()) throw tokenizer_error("empty vocabulary");
    }

    static CharTokenizer from_corpus(const std::string& corpus) {
        if (corpus.empty()) throw tokenizer_error("empty corpus");
        std::set<std::string> unique;
        for (auto& cp : utf8_split(corpus)) unique.insert(cp);
        return CharTokenizer(std::vector<std::string>(unique.begin(), unique.end()));
    }

    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        for (auto& cp : utf8_split(text)) {
            const auto it = index_.find(cp);
            if (it == index_.end()) {
                throw tokenizer_error("character not in vocabulary: '" + cp + "'");
            }
            out.push_back(it->second);
        }
        return out;
    }

    std::string decode(const std::vector<int>& tokens) const {
        std::string out;
        for (int t : tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab_.size()) {
                throw tokenizer_error("token id out of range: " + std::to_string(t));
            }
            out += vocab_[static_cast<std::size_t>(t)];
        }
        return out;
    }

    void save_manifest(const std::string& path) const {
        nlohmann::json j;
        j["type"] = "char";
        j["vocabulary"] = vocab_;
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw tokenizer_error("cannot write tokenizer manifest: " + path);
        f << j.dump(2) << "\n";
    }

    static CharTokenizer load_manifest(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw tokenizer_error("cannot open tokenizer manifest: " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw tokenizer_error("bad tokenizer manifest " + path + ": " + e.what());
        }
        return CharTokenizer(j.at("vocabulary").get<std::vector<std::string>>());
    }

private:
    std::vector<std::string> vocab_;
    std::map<std::string, int> index_;
};

// Greedy longest-match tokenizer over an externally supplied subword
// vocabulary (one JSON array of token strings). Training such a vocabulary
// is out of scope here; any WordPiece-style list can be dropped in.
class SubwordTokenizer {
public:
    explicit SubwordTokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
        if (vocab_.empty()) throw tokenizer_error("empty subword vocabulary");
        for (std::size_t i = 0; i < vocab_.size(); ++i) {
            if (vocab_[i].empty()) throw tokenizer_error("empty subword token at index " +
                                                         std::to_string(i));
            index_[vocab_[i]] = static_cast<int>(i);
            max_len_ = std::max(max_len_, vocab_[i].size());
        }
    }

    static SubwordTokenizer load_vocabulary(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw tokenizer_error("cannot open subword vocabulary: " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw tokenizer_error("bad subword vocabulary " + path + ": " + e.what());
        }
        if (j.is_object()) j = j.at("vocabulary");
        return SubwordTokenizer(j.get<std::vector<std::string>>());
    }

    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        std::size_t pos = 0;
        while (pos < text.size()) {
            const std::size_t longest = std::min(max_len_, text.size() - pos);
            int match = -1;
            std::size_t match_len = 0;
            for (std::size_t len = longest; len >= 1; --len) {
                const auto it = index_.find(text.substr(pos, len));
                if (it != index_.end()) {
                    match = it->second;
                    match_len = len;
                    break;
                }
            }
            if (match < 0) {
                throw tokenizer_error("no subword token matches text at byte " +
                                      std::to_string(pos));
            }
            out.push_back(match);
            pos += match_len;
        }
        return out;
    }

    std::string decode(const std::vector<int>& tokens) const {
        std::string out;
        for (int t : tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab_.size()) {
                throw tokenizer_error("token id out of range: " + std::to_string(t));
            }
            out += vocab_[static_cast<std::size_t>(t)];
        }
        return out;
    }

private:
    std::vector<std::string> vocab_;
    std::map<std::string, int> index_;
    std::size_t max_len_ = 0;
};

}  // namespace photondfa
