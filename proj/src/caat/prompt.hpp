#pragma once

#include <map>
#include <string>
#include <vector>

#include "caat/errors.hpp"

namespace caat {

// Learnable-embedding text side: a fixed word list with a subject
// placeholder token "s*" plus per-identity tokens for pretraining prompts.
// No pretrained encoder; the embedding table itself lives in the model
// parameter registry.
class Vocabulary {
public:
    static Vocabulary standard(int n_identities = 10);

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) throw VocabError("unknown token: '" + token + "'");
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<size_t>(id)];
    }

    // Whitespace tokenization; every word must be in the vocabulary.
    std::vector<int> encode(const std::string& prompt) const;

    int sstar_id() const { return sstar_id_; }

    // The fixed non-placeholder prompt words ("a photo of person").
    const std::vector<int>& filler_ids() const { return filler_ids_; }

    std::string identity_token(int identity) const;

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
    std::vector<int> filler_ids_;
    int sstar_id_ = -1;

    int add(const std::string& tok);
};

}  // namespace caat
