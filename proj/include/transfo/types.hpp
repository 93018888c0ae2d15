#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace transfo {

/// Dialog-state embedding ids.
enum DialogState : int {
    kStatePersona = 0,
    kStateSpeaker1 = 1,
    kStateSpeaker2 = 2,
    kStateUnannotated = 3,  // plain-text pre-training
};

inline constexpr int kIgnoreIndex = -100;

inline int speaker_state(int speaker) { return speaker == 1 ? kStateSpeaker1 : kStateSpeaker2; }

/// One model input: parallel word/position/state ids plus LM targets.
struct TokenizedInput {
    std::vector<int> word_ids;
    std::vector<int> position_ids;
    std::vector<int> state_ids;
    std::vector<int> lm_target_ids;  // kIgnoreIndex outside the scored region
    std::size_t cls_index = 0;
    std::pair<std::size_t, std::size_t> reply_span{0, 0};  // [start, end)

    std::size_t size() const { return word_ids.size(); }
    bool operator==(const TokenizedInput&) const = default;
};

struct Turn {
    int speaker = 1;  // 1 or 2
    std::string text;
    bool operator==(const Turn&) const = default;
};

}  // namespace transfo
