// SPDX-License-Identifier: Apache-2.0

#include "reportgen/tokenizer.hpp"

#include <fmt/format.h>

#include <cctype>
#include <stdexcept>

namespace reportgen {

namespace {

bool is_split_punct(char c) {
    return c == '.' || c == ',' || c == ':' || c == ';' || c == '?' || c == '!';
}

}  // namespace

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
    for (auto s : {kPad, kBos, kEos, kImageOpen, kImageClose, kUnknown}) {
        index_.emplace(std::string(s), static_cast<TokenId>(vocab_.size()));
        vocab_.emplace_back(s);
    }
    for (const auto& w : words) {
        if (w.empty() || index_.contains(w)) {
            continue;
        }
        index_.emplace(w, static_cast<TokenId>(vocab_.size()));
        vocab_.push_back(w);
    }
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    const auto flush = [&] {
        if (!current.empty()) {
            out.push_back(std::move(current));
            current.clear();
        }
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '<') {
            // Specials such as <img> or </s> stay whole.
            const auto close = text.find('>', i);
            if (close != std::string_view::npos) {
                std::string candidate;
                for (auto ch : text.substr(i, close - i + 1)) {
                    candidate.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
                }
                if (candidate == kPad || candidate == kBos || candidate == kEos || candidate == kImageOpen ||
                    candidate == kImageClose || candidate == kUnknown) {
                    flush();
                    out.push_back(std::move(candidate));
                    i = close;
                    continue;
                }
            }
        }
        if (c == '\n') {
            flush();
            out.emplace_back("\n");
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (is_split_punct(c)) {
            flush();
            out.emplace_back(1, c);
        } else {
            current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    flush();
    return out;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& word : split(text)) {
        ids.push_back(id(word));
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) {
            out.push_back(' ');
        }
        out += token(ids[i]);
    }
    return out;
}

TokenId Tokenizer::id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? unknown_id() : it->second;
}

bool Tokenizer::contains(std::string_view token) const {
    return index_.contains(std::string(token));
}

const std::string& Tokenizer::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
        throw std::out_of_range(fmt::format("token id {} outside vocabulary of {}", id, vocab_.size()));
    }
    return vocab_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Tokenizer::words() const {
    return {vocab_.begin() + kNumSpecials, vocab_.end()};
}

}  // namespace reportgen
