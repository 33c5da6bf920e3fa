#include "caat/prompt.hpp"

#include <cstdio>
#include <sstream>

namespace caat {

int Vocabulary::add(const std::string& tok) {
    const int id = size();
    tokens_.push_back(tok);
    index_[tok] = id;
    return id;
}

Vocabulary Vocabulary::standard(int n_identities) {
    Vocabulary v;
    for (const char* tok : {"a", "photo", "of", "person"}) v.filler_ids_.push_back(v.add(tok));
    v.sstar_id_ = v.add("s*");
    for (int i = 0; i < n_identities; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "id%02d", i);
        v.add(buf);
    }
    return v;
}

std::vector<int> Vocabulary::encode(const std::string& prompt) const {
    std::istringstream is(prompt);
    std::vector<int> ids;
    std::string word;
    while (is >> word) ids.push_back(id(word));
    if (ids.empty()) throw ConfigError("empty prompt");
    return ids;
}

std::string Vocabulary::identity_token(int identity) const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "id%02d", identity);
    if (!index_.count(buf)) throw VocabError("no identity token for id " + std::to_string(identity));
    return buf;
}

}  // namespace caat
