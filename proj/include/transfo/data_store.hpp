#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "transfo/autodiff.hpp"
#include "transfo/input_builder.hpp"
#include "transfo/model.hpp"
#include "transfo/tokenizer.hpp"
#include "transfo/types.hpp"

namespace transfo {

/// The persona belongs to speaker 2; every speaker-2 turn is a training/eval reply.
inline constexpr int kAgentSpeaker = 2;
inline constexpr std::size_t kEvalCandidateCount = 20;

struct Dialog {
    std::vector<std::string> persona;
    std::vector<Turn> turns;
    /// One candidate set per agent turn, in turn order.
    std::optional<std::vector<std::vector<std::string>>> eval_candidates;
    std::optional<std::vector<int>> gold_index;

    bool operator==(const Dialog&) const = default;
};

struct Dataset {
    std::vector<Dialog> dialogs;
    bool operator==(const Dataset&) const = default;
};

nlohmann::json dialog_to_json(const Dialog& dialog);
/// Validates one dialog record; errors cite `line`.
Dialog dialog_from_json(const nlohmann::json& j, std::size_t line);

/// Reads JSONL, one dialog per line; blank lines are skipped. Throws
/// ParseError with the offending line number.
Dataset parse_dataset(std::istream& in, std::vector<std::string>* warnings = nullptr);
Dataset load_dataset(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

/// A reply-prediction example and the dialog it came from.
struct IndexedExample {
    DialogExample example;
    std::size_t dialog = 0;
};

/// One example per agent turn. Eval candidates, when present, become the
/// example's distractor list (gold removed).
std::vector<IndexedExample> dataset_examples(const Dataset& dataset);

/// All persona sentences and turn texts, for tokenizer training.
std::vector<std::string> corpus_lines(const Dataset& dataset);

/// Templated persona dialogs: replies mention the persona's item for the
/// theme the other speaker asks about. `n_themes` is clamped to the
/// built-in theme table.
Dataset gen_synthetic(std::uint64_t seed, std::size_t n_dialogs, std::size_t n_themes = 14);
std::size_t synthetic_theme_count();

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    ad::Shape shape;
    std::vector<float> data;
    bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
    std::uint32_t format_version = kCheckpointVersion;
    ModelConfig config;
    BpeModel tokenizer;
    std::string tokenizer_hash;
    std::uint64_t step = 0;
    std::vector<TensorRecord> tensors;
    std::vector<TensorRecord> optimizer_state;  // may be empty
    nlohmann::json meta = nlohmann::json::object();
};

Checkpoint make_checkpoint(const Transformer<float>& model, const BpeModel& tokenizer, std::uint64_t step,
                           nlohmann::json meta = nlohmann::json::object());

/// Layout: "TRANSFO\0" | u32 version | u64 header length | JSON header |
/// little-endian float32 tensor blob | u64 FNV-1a checksum of all preceding
/// bytes. Written atomically.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws CheckpointError on bad magic, unknown version, truncation or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint tensors into `model`; throws CheckpointError naming the
/// first missing or mismatched tensor.
void load_parameters(Transformer<float>& model, const Checkpoint& checkpoint);
Transformer<float> restore_model(const Checkpoint& checkpoint);

}  // namespace transfo
