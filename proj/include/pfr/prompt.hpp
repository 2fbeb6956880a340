#pragma once

#include <string>
#include <vector>

#include "pfr/common.hpp"

namespace pfr {

// Small fixed vocabulary. Prompts are token-id sequences; the learnable
// identity token (star) may appear at most once and every prompt ends in a
// single EOT token.
namespace tok {
inline constexpr int kA = 0;
inline constexpr int kPhoto = 1;
inline constexpr int kOf = 2;
inline constexpr int kFace = 3;
inline constexpr int kStar = 4;
inline constexpr int kMasterpiece = 5;
inline constexpr int kBest = 6;
inline constexpr int kQuality = 7;
inline constexpr int kRealistic = 8;
inline constexpr int kVery = 9;
inline constexpr int kClear = 10;
inline constexpr int kProfessional = 11;
inline constexpr int k3d = 12;
inline constexpr int kCartoon = 13;
inline constexpr int kAnime = 14;
inline constexpr int kSketches = 15;
inline constexpr int kWorst = 16;
inline constexpr int kLow = 17;
inline constexpr int kEot = 18;
inline constexpr int kVocabSize = 24;  // spare slots for experiments
}  // namespace tok

struct PromptTokens {
    std::vector<int> ids;

    void validate() const {
        check(!ids.empty(), "prompt must not be empty");
        int stars = 0;
        int eots = 0;
        for (int id : ids) {
            check(id >= 0 && id < tok::kVocabSize, "token id out of vocabulary");
            if (id == tok::kStar) stars++;
            if (id == tok::kEot) eots++;
        }
        if (eots != 1 || ids.back() != tok::kEot) {
            throw InvalidPrompt("prompt must contain exactly one EOT, at the end");
        }
        if (stars > 1) {
            throw InvalidPrompt("prompt may contain at most one star token");
        }
    }

    int star_index() const {
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] == tok::kStar) return static_cast<int>(i);
        }
        return -1;
    }

    int eot_index() const { return static_cast<int>(ids.size()) - 1; }

    size_t size() const { return ids.size(); }
};

// "a photo of * , masterpiece, best quality, realistic, very clear,
// professional"
inline PromptTokens positive_prompt() {
    return PromptTokens{{tok::kA, tok::kPhoto, tok::kOf, tok::kStar, tok::kMasterpiece,
                         tok::kBest, tok::kQuality, tok::kRealistic, tok::kVery,
                         tok::kClear, tok::kProfessional, tok::kEot}};
}

// "3d, cartoon, anime, sketches, worst quality, low quality"
inline PromptTokens negative_prompt() {
    return PromptTokens{{tok::k3d, tok::kCartoon, tok::kAnime, tok::kSketches, tok::kWorst,
                         tok::kQuality, tok::kLow, tok::kQuality, tok::kEot}};
}

// Base-model prompt: the positive prompt with the generic face token in the
// star slot (the star only has meaning once personalized).
inline PromptTokens base_prompt() {
    auto p = positive_prompt();
    for (auto& id : p.ids) {
        if (id == tok::kStar) id = tok::kFace;
    }
    return p;
}

}  // namespace pfr
