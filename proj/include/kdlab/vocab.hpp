#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/rng.hpp"

namespace kdlab {

// Reserved token IDs. Every vocabulary starts with these five entries.
enum ReservedToken : int {
    kPadId = 0,
    kClsId = 1,
    kSepId = 2,
    kMaskId = 3,
    kUnkId = 4,
};

inline constexpr int kNumReserved = 5;

inline const char* reserved_literal(int id) {
    switch (id) {
        case kPadId: return "[pad]";
        case kClsId: return "[cls]";
        case kSepId: return "[sep]";
        case kMaskId: return "[mask]";
        case kUnkId: return "[unk]";
        default: return nullptr;
    }
}

// Word-level vocabulary: a bijection between token strings and integer IDs,
// with the reserved tokens pinned at the front.
class Vocabulary {
  public:
    Vocabulary() {
        for (int i = 0; i < kNumReserved; ++i) push(reserved_literal(i));
    }

    static Vocabulary from_tokens(const std::set<std::string>& tokens) {
        Vocabulary v;
        for (const auto& t : tokens) {
            if (!v.contains(t)) v.push(t);
        }
        return v;
    }

    int id(std::string_view token) const {
        auto it = to_id_.find(std::string(token));
        return it == to_id_.end() ? kUnkId : it->second;
    }

    bool contains(std::string_view token) const { return to_id_.count(std::string(token)) > 0; }

    const std::string& token(int id) const {
        if (id < 0 || id >= static_cast<int>(to_token_.size())) {
            throw std::invalid_argument("vocabulary: id " + std::to_string(id) + " out of range");
        }
        return to_token_[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(to_token_.size()); }

    uint64_t hash() const {
        std::string joined;
        for (const auto& t : to_token_) {
            joined += t;
            joined += '\n';
        }
        return fnv1a64(joined);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write vocabulary file " + path);
        for (const auto& t : to_token_) out << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open vocabulary file " + path);
        Vocabulary v;
        std::string line;
        int idx = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (idx < kNumReserved) {
                if (line != reserved_literal(idx)) {
                    throw std::runtime_error("vocabulary file " + path + " has a bad reserved entry at id " +
                                             std::to_string(idx) + ": " + line);
                }
            } else {
                v.push(line);
            }
            ++idx;
        }
        if (idx < kNumReserved) throw std::runtime_error("vocabulary file " + path + " is truncated");
        return v;
    }

  private:
    void push(const std::string& t) {
        to_id_[t] = static_cast<int>(to_token_.size());
        to_token_.push_back(t);
    }

    std::map<std::string, int> to_id_;
    std::vector<std::string> to_token_;
};

// Lowercased word/punctuation split. Reserved literals like [sep] or [mask]
// stay atomic even when glued to punctuation, so detokenized text containing
// them re-tokenizes to the same IDs.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string chunk;
    auto reserved_at = [&](size_t pos) -> int {
        for (int i = 0; i < kNumReserved; ++i) {
            const std::string_view lit{reserved_literal(i)};
            if (chunk.compare(pos, lit.size(), lit) == 0) return i;
        }
        return -1;
    };
    auto flush_chunk = [&]() {
        if (chunk.empty()) return;
        std::string word;
        for (size_t i = 0; i < chunk.size();) {
            const char c = chunk[i];
            if (c == '[') {
                const int r = reserved_at(i);
                if (r >= 0) {
                    if (!word.empty()) words.push_back(word);
                    word.clear();
                    words.emplace_back(reserved_literal(r));
                    i += words.back().size();
                    continue;
                }
            }
            if (std::isalnum(static_cast<unsigned char>(c))) {
                word += c;
            } else {
                if (!word.empty()) words.push_back(word);
                word.clear();
                words.push_back(std::string(1, c));
            }
            ++i;
        }
        if (!word.empty()) words.push_back(word);
        chunk.clear();
    };
    for (char raw : text) {
        char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush_chunk();
        } else {
            chunk += c;
        }
    }
    flush_chunk();
    return words;
}

}  // namespace kdlab
