#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace transfo {

/// Ids of the reserved tokens. UNK stands in for characters outside the
/// training alphabet.
struct SpecialIds {
    int bos = -1;
    int eos = -1;
    int cls = -1;
    int sep = -1;
    int pad = -1;
    int persona = -1;
    int speaker1 = -1;
    int speaker2 = -1;
    int unk = -1;
};

/// Lowercases ASCII and collapses whitespace runs to single spaces.
std::string normalize_text(std::string_view text);

/// Byte-pair-encoding model. Words are split on whitespace; the last symbol of
/// every word carries the "</w>" end-of-word marker. Immutable once built.
class BpeModel {
public:
    static constexpr std::string_view kEndOfWord = "</w>";
    static const std::vector<std::string>& special_names();

    BpeModel() = default;

    /// Learns up to num_merges merges; ties on pair frequency go to the
    /// lexicographically smallest pair. Throws ConfigError on an empty corpus.
    static BpeModel train(std::span<const std::string> corpus, std::size_t num_merges);

    std::vector<int> encode(std::string_view text) const;
    /// Throws DecodeError naming the first out-of-range id.
    std::string decode(std::span<const int> ids, bool render_specials = false) const;

    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    const std::map<std::string, int>& vocab() const { return vocab_; }
    const std::map<std::string, int>& specials() const { return specials_; }
    const SpecialIds& ids() const { return ids_; }
    int special(const std::string& name) const;
    bool is_special(int id) const;
    /// Total id space: BPE symbols plus specials.
    std::size_t size() const { return id_to_symbol_.size(); }
    std::size_t base_symbol_count() const { return base_symbols_; }

    nlohmann::json to_json() const;
    static BpeModel from_json(const nlohmann::json& j);
    /// Canonical serialization; identical models serialize to identical bytes.
    std::string serialize() const;
    /// FNV-1a 64 of serialize(), as 16 hex digits.
    std::string content_hash() const;

    void save(const std::filesystem::path& path) const;
    static BpeModel load(const std::filesystem::path& path);

private:
    void finalize();
    std::vector<std::string> apply_merges(std::vector<std::string> symbols) const;

    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::string, int> vocab_;
    std::map<std::string, int> specials_;
    std::size_t base_symbols_ = 0;

    // Derived lookups.
    SpecialIds ids_;
    std::vector<std::string> id_to_symbol_;
    std::vector<bool> id_is_special_;
    std::unordered_map<std::string, std::size_t> merge_rank_;
};

}  // namespace transfo
