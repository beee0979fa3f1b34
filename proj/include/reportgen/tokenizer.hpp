// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenizer. Text is lower-cased and split on whitespace, with
// punctuation (. , : ; ? !) and newlines emitted as tokens of their own.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace reportgen {

using TokenId = std::int64_t;

class Tokenizer {
public:
    static constexpr std::string_view kPad = "<pad>";
    static constexpr std::string_view kBos = "<s>";
    static constexpr std::string_view kEos = "</s>";
    static constexpr std::string_view kImageOpen = "<img>";
    static constexpr std::string_view kImageClose = "</img>";
    static constexpr std::string_view kUnknown = "<unk>";

    Tokenizer() : Tokenizer(std::vector<std::string>{}) {}
    /// Specials take ids 0..5; duplicate or special-colliding words are dropped.
    explicit Tokenizer(const std::vector<std::string>& words);

    static std::vector<std::string> split(std::string_view text);

    std::vector<TokenId> encode(std::string_view text) const;
    /// Space-joined tokens, specials included.
    std::string decode(std::span<const TokenId> ids) const;

    TokenId id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t size() const { return vocab_.size(); }
    /// Content words only (no specials), in id order.
    std::vector<std::string> words() const;

    bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }
    TokenId pad_id() const { return 0; }
    TokenId bos_id() const { return 1; }
    TokenId eos_id() const { return 2; }
    TokenId image_open_id() const { return 3; }
    TokenId image_close_id() const { return 4; }
    TokenId unknown_id() const { return 5; }

    static constexpr TokenId kNumSpecials = 6;

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace reportgen
