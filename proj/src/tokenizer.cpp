#include "transfo/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "transfo/errors.hpp"
#include "transfo/util.hpp"

namespace transfo {

namespace {

std::vector<std::string> split_words(std::string_view normalized) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < normalized.size()) {
        auto j = normalized.find(' ', i);
        if (j == std::string_view::npos) j = normalized.size();
        if (j > i) words.emplace_back(normalized.substr(i, j - i));
        i = j + 1;
    }
    return words;
}

std::size_t utf8_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;
}

std::vector<std::string> word_symbols(const std::string& word) {
    std::vector<std::string> symbols;
    for (std::size_t i = 0; i < word.size();) {
        std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
        symbols.push_back(word.substr(i, len));
        i += len;
    }
    if (!symbols.empty()) symbols.back() += BpeModel::kEndOfWord;
    return symbols;
}

std::string pair_key(const std::string& left, const std::string& right) {
    std::string key;
    key.reserve(left.size() + right.size() + 1);
    key += left;
    key += '\x1f';
    key += right;
    return key;
}

bool ends_with_marker(const std::string& s) {
    return s.size() >= BpeModel::kEndOfWord.size() &&
           std::string_view(s).substr(s.size() - BpeModel::kEndOfWord.size()) == BpeModel::kEndOfWord;
}

}  // namespace

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += c < 0x80 ? static_cast<char>(std::tolower(c)) : ch;
    }
    return out;
}

const std::vector<std::string>& BpeModel::special_names() {
    static const std::vector<std::string> names = {"BOS",     "EOS",      "CLS",      "SEP", "PAD",
                                                   "PERSONA", "SPEAKER1", "SPEAKER2", "UNK"};
    return names;
}

BpeModel BpeModel::train(std::span<const std::string> corpus, std::size_t num_merges) {
    if (corpus.empty()) throw ConfigError("train_bpe: corpus is empty");

    std::map<std::string, std::size_t> word_counts;
    for (const auto& line : corpus) {
        for (auto& w : split_words(normalize_text(line))) ++word_counts[w];
    }

    std::set<std::string> alphabet;
    struct Word {
        std::vector<std::string> symbols;
        std::size_t count;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    for (const auto& [w, count] : word_counts) {
        Word entry{word_symbols(w), count};
        for (const auto& s : entry.symbols) {
            alphabet.insert(ends_with_marker(s) ? s.substr(0, s.size() - kEndOfWord.size()) : s);
        }
        words.push_back(std::move(entry));
    }

    BpeModel model;
    int next_id = 0;
    std::set<std::string> base;
    for (const auto& c : alphabet) {
        base.insert(c);
        base.insert(c + std::string(kEndOfWord));
    }
    for (const auto& s : base) model.vocab_.emplace(s, next_id++);
    model.base_symbols_ = base.size();

    for (std::size_t step = 0; step < num_merges; ++step) {
        std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
                pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;
            }
        }
        if (pair_counts.empty()) break;
        // std::map iterates in lexicographic pair order, so the first maximum wins ties.
        auto best = pair_counts.begin();
        for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
            if (it->second > best->second) best = it;
        }
        const auto [left, right] = best->first;
        const std::string merged = left + right;
        model.merges_.emplace_back(left, right);
        if (!model.vocab_.count(merged)) model.vocab_.emplace(merged, next_id++);

        for (auto& w : words) {
            std::vector<std::string> out;
            out.reserve(w.symbols.size());
            for (std::size_t i = 0; i < w.symbols.size(); ++i) {
                if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
                    out.push_back(merged);
                    ++i;
                } else {
                    out.push_back(std::move(w.symbols[i]));
                }
            }
            w.symbols = std::move(out);
        }
    }

    for (const auto& name : special_names()) model.specials_.emplace(name, next_id++);
    model.finalize();
    return model;
}

void BpeModel::finalize() {
    std::size_t total = vocab_.size() + specials_.size();
    id_to_symbol_.assign(total, {});
    id_is_special_.assign(total, false);
    std::vector<bool> seen(total, false);
    auto claim = [&](int id, const std::string& what) {
        if (id < 0 || static_cast<std::size_t>(id) >= total || seen[static_cast<std::size_t>(id)]) {
            throw ConfigError("tokenizer: id " + std::to_string(id) + " for '" + what +
                              "' is out of range or not unique");
        }
        seen[static_cast<std::size_t>(id)] = true;
    };
    for (const auto& [sym, id] : vocab_) {
        claim(id, sym);
        id_to_symbol_[static_cast<std::size_t>(id)] = sym;
    }
    for (const auto& [name, id] : specials_) {
        claim(id, name);
        id_to_symbol_[static_cast<std::size_t>(id)] = name;
        id_is_special_[static_cast<std::size_t>(id)] = true;
    }
    merge_rank_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
        const auto& [l, rr] = merges_[r];
        if (!vocab_.count(l + rr)) throw ConfigError("tokenizer: merge output '" + l + rr + "' missing from vocab");
        merge_rank_.emplace(pair_key(l, rr), r);
    }
    for (const auto& name : special_names()) {
        if (!specials_.count(name)) throw ConfigError("tokenizer: missing special token " + name);
    }
    ids_ = SpecialIds{specials_.at("BOS"),      specials_.at("EOS"),      specials_.at("CLS"),
                      specials_.at("SEP"),      specials_.at("PAD"),      specials_.at("PERSONA"),
                      specials_.at("SPEAKER1"), specials_.at("SPEAKER2"), specials_.at("UNK")};
}

std::vector<std::string> BpeModel::apply_merges(std::vector<std::string> symbols) const {
    while (symbols.size() > 1) {
        std::size_t best_rank = merge_rank_.size();
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
            if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
        }
        if (best_rank == merge_rank_.size()) break;
        const auto& [left, right] = merges_[best_rank];
        std::vector<std::string> out;
        out.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size(); ++i) {
            if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
                out.push_back(left + right);
                ++i;
            } else {
                out.push_back(std::move(symbols[i]));
            }
        }
        symbols = std::move(out);
    }
    return symbols;
}

std::vector<int> BpeModel::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& word : split_words(normalize_text(text))) {
        for (const auto& sym : apply_merges(word_symbols(word))) {
            auto it = vocab_.find(sym);
            ids.push_back(it == vocab_.end() ? ids_.unk : it->second);
        }
    }
    return ids;
}

std::string BpeModel::decode(std::span<const int> ids, bool render_specials) const {
    std::vector<std::string> words;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) words.push_back(std::move(current));
        current.clear();
    };
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
        const int id = ids[pos];
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_symbol_.size()) {
            throw DecodeError("token id " + std::to_string(id) + " is not in the vocabulary", pos);
        }
        const auto& sym = id_to_symbol_[static_cast<std::size_t>(id)];
        if (id_is_special_[static_cast<std::size_t>(id)]) {
            if (render_specials) {
                flush();
                words.push_back("[" + sym + "]");
            }
            continue;
        }
        if (ends_with_marker(sym)) {
            current += sym.substr(0, sym.size() - kEndOfWord.size());
            flush();
        } else {
            current += sym;
        }
    }
    flush();
    return join(words, " ");
}

int BpeModel::special(const std::string& name) const {
    auto it = specials_.find(name);
    if (it == specials_.end()) throw ConfigError("unknown special token " + name);
    return it->second;
}

bool BpeModel::is_special(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < id_is_special_.size() && id_is_special_[static_cast<std::size_t>(id)];
}

nlohmann::json BpeModel::to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    return {{"merges", merges}, {"vocab", vocab_}, {"specials", specials_}};
}

BpeModel BpeModel::from_json(const nlohmann::json& j) {
    BpeModel model;
    try {
        for (const auto& m : j.at("merges")) {
            if (!m.is_array() || m.size() != 2) throw ConfigError("tokenizer: merge entries must be [left, right]");
            model.merges_.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
        }
        model.vocab_ = j.at("vocab").get<std::map<std::string, int>>();
        model.specials_ = j.at("specials").get<std::map<std::string, int>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("tokenizer: malformed model JSON: ") + e.what());
    }
    model.base_symbols_ = static_cast<std::size_t>(std::count_if(
        model.vocab_.begin(), model.vocab_.end(), [](const auto& kv) {
            const auto& s = kv.first;
            auto core = ends_with_marker(s) ? s.substr(0, s.size() - kEndOfWord.size()) : s;
            return !core.empty() && utf8_length(static_cast<unsigned char>(core[0])) == core.size();
        }));
    model.finalize();
    return model;
}

std::string BpeModel::serialize() const { return to_json().dump(); }

std::string BpeModel::content_hash() const { return to_hex(fnv1a64(serialize())); }

void BpeModel::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

BpeModel BpeModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open tokenizer file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("tokenizer file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

}  // namespace transfo
