#include "transfo/data_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "transfo/errors.hpp"
#include "transfo/util.hpp"

namespace transfo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset JSONL

json dialog_to_json(const Dialog& dialog) {
    json turns = json::array();
    for (const auto& t : dialog.turns) turns.push_back({{"speaker", t.speaker}, {"text", t.text}});
    json out = {{"persona", dialog.persona}, {"turns", turns}};
    out["eval_candidates"] = dialog.eval_candidates ? json(*dialog.eval_candidates) : json(nullptr);
    out["gold_index"] = dialog.gold_index ? json(*dialog.gold_index) : json(nullptr);
    return out;
}

Dialog dialog_from_json(const json& j, std::size_t line) {
    if (!j.is_object()) throw ParseError("dialog record must be a JSON object", line);
    Dialog d;
    auto persona = j.find("persona");
    if (persona == j.end() || !persona->is_array()) throw ParseError("field 'persona' must be an array of strings", line);
    for (const auto& s : *persona) {
        if (!s.is_string()) throw ParseError("field 'persona' must be an array of strings", line);
        d.persona.push_back(s.get<std::string>());
    }
    auto turns = j.find("turns");
    if (turns == j.end() || !turns->is_array()) throw ParseError("field 'turns' must be an array", line);
    if (turns->empty()) throw ParseError("field 'turns' must contain at least one turn", line);
    for (std::size_t i = 0; i < turns->size(); ++i) {
        const auto& t = (*turns)[i];
        if (!t.is_object() || !t.contains("speaker") || !t.contains("text") || !t["speaker"].is_number_integer() ||
            !t["text"].is_string()) {
            throw ParseError("turns[" + std::to_string(i) + "] must be {\"speaker\": 1|2, \"text\": string}", line);
        }
        Turn turn{t["speaker"].get<int>(), t["text"].get<std::string>()};
        if (turn.speaker != 1 && turn.speaker != 2) {
            throw ParseError("turns[" + std::to_string(i) + "].speaker must be 1 or 2", line);
        }
        if (!d.turns.empty() && d.turns.back().speaker == turn.speaker) {
            throw ParseError("turns[" + std::to_string(i - 1) + "] and turns[" + std::to_string(i) +
                                 "] have the same speaker; speakers must alternate",
                             line);
        }
        d.turns.push_back(std::move(turn));
    }

    const bool has_cands = j.contains("eval_candidates") && !j["eval_candidates"].is_null();
    const bool has_gold = j.contains("gold_index") && !j["gold_index"].is_null();
    if (has_cands != has_gold) {
        throw ParseError(has_cands ? "field 'eval_candidates' given without 'gold_index'"
                                   : "field 'gold_index' given without 'eval_candidates'",
                         line);
    }
    if (has_cands) {
        std::vector<std::string> agent_turns;
        for (const auto& t : d.turns)
            if (t.speaker == kAgentSpeaker) agent_turns.push_back(t.text);
        const auto& cands = j["eval_candidates"];
        const auto& gold = j["gold_index"];
        if (!cands.is_array() || !gold.is_array() || cands.size() != agent_turns.size() ||
            gold.size() != agent_turns.size()) {
            throw ParseError("'eval_candidates' and 'gold_index' need one entry per speaker-2 turn (" +
                                 std::to_string(agent_turns.size()) + ")",
                             line);
        }
        std::vector<std::vector<std::string>> sets;
        std::vector<int> golds;
        for (std::size_t k = 0; k < cands.size(); ++k) {
            if (!cands[k].is_array() || cands[k].size() != kEvalCandidateCount) {
                throw ParseError("eval_candidates[" + std::to_string(k) + "] must hold exactly " +
                                     std::to_string(kEvalCandidateCount) + " strings",
                                 line);
            }
            std::vector<std::string> set;
            for (const auto& c : cands[k]) {
                if (!c.is_string()) throw ParseError("eval_candidates entries must be strings", line);
                set.push_back(c.get<std::string>());
            }
            if (!gold[k].is_number_integer()) throw ParseError("gold_index entries must be integers", line);
            const int g = gold[k].get<int>();
            if (g < 0 || static_cast<std::size_t>(g) >= set.size()) {
                throw ParseError("gold_index[" + std::to_string(k) + "] is out of range", line);
            }
            if (set[static_cast<std::size_t>(g)] != agent_turns[k]) {
                throw ParseError("gold_index[" + std::to_string(k) + "] does not point at the gold reply", line);
            }
            sets.push_back(std::move(set));
            golds.push_back(g);
        }
        d.eval_candidates = std::move(sets);
        d.gold_index = std::move(golds);
    }
    return d;
}

Dataset parse_dataset(std::istream& in, std::vector<std::string>* warnings) {
    Dataset ds;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), line);
        }
        ds.dialogs.push_back(dialog_from_json(j, line));
    }
    if (ds.dialogs.empty() && warnings) warnings->push_back("dataset contains no dialogs");
    return ds;
}

Dataset load_dataset(const std::filesystem::path& path, std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset " + path.string());
    return parse_dataset(in, warnings);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    std::string out;
    for (const auto& d : dataset.dialogs) {
        out += dialog_to_json(d).dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

std::vector<IndexedExample> dataset_examples(const Dataset& dataset) {
    std::vector<IndexedExample> out;
    for (std::size_t di = 0; di < dataset.dialogs.size(); ++di) {
        const auto& d = dataset.dialogs[di];
        std::size_t agent_turn = 0;
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            if (d.turns[t].speaker != kAgentSpeaker) continue;
            IndexedExample ex;
            ex.dialog = di;
            ex.example.persona = d.persona;
            ex.example.history.assign(d.turns.begin(), d.turns.begin() + static_cast<long>(t));
            ex.example.reply = d.turns[t].text;
            ex.example.reply_speaker = kAgentSpeaker;
            if (d.eval_candidates) {
                const auto& set = (*d.eval_candidates)[agent_turn];
                const auto gold = static_cast<std::size_t>((*d.gold_index)[agent_turn]);
                for (std::size_t c = 0; c < set.size(); ++c)
                    if (c != gold) ex.example.candidates.push_back(set[c]);
            }
            out.push_back(std::move(ex));
            ++agent_turn;
        }
    }
    return out;
}

std::vector<std::string> corpus_lines(const Dataset& dataset) {
    std::vector<std::string> lines;
    for (const auto& d : dataset.dialogs) {
        lines.insert(lines.end(), d.persona.begin(), d.persona.end());
        for (const auto& t : d.turns) lines.push_back(t.text);
    }
    return lines;
}

// ---------------------------------------------------------------------------
// Synthetic persona dialogs

namespace {

struct Theme {
    const char* persona;
    std::vector<const char*> questions;
    std::vector<const char*> replies;
    std::vector<const char*> items;
};

// Replies never reuse the two words around {x} from the persona template, so
// gold replies survive trigram copy filtering.
const std::vector<Theme>& themes() {
    static const std::vector<Theme> table = {
        {"i have a {x} at home .",
         {"do you have any pets ?", "are you an animal person ?", "any animals in your house ?"},
         {"yes , my {x} keeps me company every day .", "i love my {x} so much !", "of course , my {x} is the cutest ."},
         {"dog", "cat", "parrot", "hamster", "rabbit", "turtle"}},
        {"i play {x} every weekend .",
         {"do you play any sports ?", "how do you stay active ?", "what do you do for exercise ?"},
         {"mostly {x} , it keeps me fit .", "i am really into {x} these days .", "{x} is my favorite way to move ."},
         {"tennis", "soccer", "basketball", "golf", "hockey", "volleyball"}},
        {"i listen to {x} music all day .",
         {"what music do you like ?", "do you listen to music ?", "any favorite kind of music ?"},
         {"i really enjoy {x} , it relaxes me .", "{x} for sure , always on my headphones .",
          "mostly {x} when i drive ."},
         {"jazz", "rock", "country", "blues", "techno", "opera"}},
        {"my favorite food is {x} .",
         {"what do you like to eat ?", "are you a good cook ?", "what is your favorite meal ?"},
         {"i could eat {x} every day .", "i love cooking {x} for dinner .", "definitely {x} , so tasty ."},
         {"pizza", "sushi", "tacos", "pasta", "curry", "burgers"}},
        {"i work as a {x} .",
         {"what do you do for a living ?", "where do you work ?", "do you like your job ?"},
         {"i am a {x} and i enjoy it .", "being a {x} is hard work .", "my {x} job pays the bills ."},
         {"teacher", "nurse", "chef", "pilot", "lawyer", "farmer"}},
        {"i have been to {x} twice .",
         {"do you like to travel ?", "where have you been ?", "any trips planned ?"},
         {"i loved my trip to {x} last year .", "{x} is the best place i have seen .", "i want to go back to {x} soon ."},
         {"mexico", "japan", "france", "italy", "canada", "egypt"}},
        {"i spend my free time {x} .",
         {"what do you do for fun ?", "any hobbies ?", "how do you relax ?"},
         {"i enjoy {x} on quiet evenings .", "mostly {x} , it calms me down .", "{x} is my favorite hobby ."},
         {"painting", "knitting", "gardening", "fishing", "baking", "hiking"}},
        {"i drive a {x} .",
         {"what do you drive ?", "do you have a car ?", "how do you get around ?"},
         {"i get around in my {x} .", "my {x} is old but reliable .", "i take the {x} everywhere ."},
         {"truck", "jeep", "van", "motorcycle", "minivan", "convertible"}},
        {"my favorite color is {x} .",
         {"what is your favorite color ?", "do you like bright colors ?", "what color is your room ?"},
         {"i love {x} , my room is all {x} .", "{x} makes me happy .", "anything {x} catches my eye ."},
         {"red", "blue", "green", "purple", "yellow", "orange"}},
        {"i read {x} novels before bed .",
         {"do you like to read ?", "what books do you enjoy ?", "read anything good lately ?"},
         {"i just finished a great {x} book .", "{x} stories are my favorite .", "i collect old {x} books ."},
         {"mystery", "fantasy", "romance", "horror", "scifi", "western"}},
        {"i have {x} brothers .",
         {"do you have a big family ?", "any siblings ?", "tell me about your family ."},
         {"there are {x} of us boys at home .", "{x} older brothers , it was loud growing up .",
          "yes , {x} older brothers ."},
         {"two", "three", "four", "five", "six", "seven"}},
        {"i drink {x} every morning .",
         {"coffee or tea ?", "what do you drink ?", "what is your morning drink ?"},
         {"always {x} , i need it to wake up .", "a big cup of {x} for me .", "i cannot live without {x} ."},
         {"coffee", "tea", "juice", "milk", "cocoa", "smoothies"}},
        {"i watch {x} movies on weekends .",
         {"do you watch movies ?", "seen any good films ?", "what do you watch on tv ?"},
         {"i am hooked on {x} films .", "mostly {x} , the more the better .", "{x} flicks are my guilty pleasure ."},
         {"action", "comedy", "thriller", "cartoon", "documentary", "zombie"}},
        {"i play the {x} in a band .",
         {"do you play an instrument ?", "are you musical ?", "any musical talents ?"},
         {"i practice my {x} every night .", "yes , i have played {x} for years .", "the {x} is my passion ."},
         {"guitar", "piano", "drums", "violin", "flute", "trumpet"}},
    };
    return table;
}

const std::vector<const char*>& fillers() {
    static const std::vector<const char*> f = {"nice .", "cool !", "oh really ?", "that sounds fun .", "i see .",
                                               "hello !", "hi there ."};
    return f;
}

std::string fill(const char* tmpl, const std::string& item) {
    std::string s = tmpl;
    for (auto pos = s.find("{x}"); pos != std::string::npos; pos = s.find("{x}", pos + item.size())) {
        s.replace(pos, 3, item);
    }
    return s;
}

template <typename Seq>
const auto& pick(const Seq& seq, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(0, seq.size() - 1);
    return seq[d(rng)];
}

}  // namespace

std::size_t synthetic_theme_count() { return themes().size(); }

Dataset gen_synthetic(std::uint64_t seed, std::size_t n_dialogs, std::size_t n_themes) {
    if (n_dialogs == 0) throw ConfigError("gen_synthetic: n_dialogs must be at least 1");
    const auto& table = themes();
    n_themes = std::clamp<std::size_t>(n_themes, 4, table.size());
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.3);

    Dataset ds;
    for (std::size_t n = 0; n < n_dialogs; ++n) {
        std::vector<std::size_t> order(n_themes);
        for (std::size_t i = 0; i < n_themes; ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::size_t> chosen(order.begin(), order.begin() + 4);
        std::vector<std::string> items;
        Dialog d;
        for (auto t : chosen) {
            items.emplace_back(pick(table[t].items, rng));
            d.persona.push_back(fill(table[t].persona, items.back()));
        }
        // Topics asked about: three of the four persona themes.
        std::vector<std::size_t> topics{0, 1, 2, 3};
        std::shuffle(topics.begin(), topics.end(), rng);
        for (std::size_t k = 0; k < 3; ++k) {
            const Theme& theme = table[chosen[topics[k]]];
            std::string question = pick(theme.questions, rng);
            if (coin(rng)) {
                const Theme& other = table[order[4 + (k % std::max<std::size_t>(1, n_themes - 4))] % n_themes];
                question = fill(other.persona, pick(other.items, rng)) + " " + question;
            } else if (k > 0 && coin(rng)) {
                question = std::string(pick(fillers(), rng)) + " " + question;
            }
            d.turns.push_back({1, question});
            d.turns.push_back({kAgentSpeaker, fill(pick(theme.replies, rng), items[topics[k]])});
        }
        std::shuffle(d.persona.begin(), d.persona.end(), rng);
        ds.dialogs.push_back(std::move(d));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'R', 'A', 'N', 'S', 'F', 'O', '\0'};

template <typename U>
void put_le(std::string& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t offset) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        value |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    }
    return value;
}

void append_floats(std::string& blob, const std::vector<float>& data) {
    for (float f : data) put_le(blob, std::bit_cast<std::uint32_t>(f));
}

json tensor_index(const std::vector<TensorRecord>& records, std::string& blob) {
    json index = json::array();
    for (const auto& r : records) {
        index.push_back({{"name", r.name}, {"shape", r.shape}, {"offset", blob.size()}, {"nbytes", r.data.size() * 4}});
        append_floats(blob, r.data);
    }
    return index;
}

std::vector<TensorRecord> read_tensors(const json& index, const std::string& file, std::size_t blob_start,
                                       std::size_t blob_size) {
    std::vector<TensorRecord> out;
    for (const auto& e : index) {
        TensorRecord r;
        r.name = e.at("name").get<std::string>();
        r.shape = e.at("shape").get<ad::Shape>();
        const auto offset = e.at("offset").get<std::size_t>();
        const auto nbytes = e.at("nbytes").get<std::size_t>();
        if (nbytes != ad::numel(r.shape) * 4 || offset + nbytes > blob_size) {
            throw CheckpointError("tensor '" + r.name + "' has an inconsistent extent");
        }
        r.data.resize(nbytes / 4);
        for (std::size_t i = 0; i < r.data.size(); ++i) {
            r.data[i] = std::bit_cast<float>(get_le<std::uint32_t>(file, blob_start + offset + i * 4));
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

Checkpoint make_checkpoint(const Transformer<float>& model, const BpeModel& tokenizer, std::uint64_t step,
                           json meta) {
    Checkpoint c;
    c.config = model.config();
    c.tokenizer = tokenizer;
    c.tokenizer_hash = tokenizer.content_hash();
    c.step = step;
    c.meta = std::move(meta);
    for (const auto& p : model.parameters()) {
        c.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
    }
    return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    std::string blob;
    json header;
    header["format_version"] = checkpoint.format_version;
    header["config"] = checkpoint.config.to_json();
    header["tokenizer"] = checkpoint.tokenizer.to_json();
    header["tokenizer_hash"] = checkpoint.tokenizer_hash;
    header["step"] = checkpoint.step;
    header["meta"] = checkpoint.meta;
    header["tensors"] = tensor_index(checkpoint.tensors, blob);
    header["optimizer"] = tensor_index(checkpoint.optimizer_state, blob);
    header["blob_bytes"] = blob.size();
    const std::string header_text = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(out, checkpoint.format_version);
    put_le<std::uint64_t>(out, header_text.size());
    out += header_text;
    out += blob;
    put_le<std::uint64_t>(out, fnv1a64(out));
    write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::string file;
    try {
        file = read_file(path);
    } catch (const Error& e) {
        throw CheckpointError(e.what());
    }
    constexpr std::size_t prefix = sizeof(kMagic) + 4 + 8;
    if (file.size() < prefix + 8 || std::memcmp(file.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint file");
    }
    const auto version = get_le<std::uint32_t>(file, sizeof(kMagic));
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const auto stored = get_le<std::uint64_t>(file, file.size() - 8);
    if (fnv1a64(std::string_view(file).substr(0, file.size() - 8)) != stored) {
        throw CheckpointError(path.string() + " failed its integrity check (truncated or corrupt)");
    }
    const auto header_len = get_le<std::uint64_t>(file, sizeof(kMagic) + 4);
    if (prefix + header_len + 8 > file.size()) throw CheckpointError("checkpoint header extends past end of file");

    Checkpoint c;
    try {
        const json header = json::parse(file.substr(prefix, header_len));
        const std::size_t blob_start = prefix + header_len;
        const auto blob_bytes = header.at("blob_bytes").get<std::size_t>();
        if (blob_start + blob_bytes + 8 != file.size()) throw CheckpointError("checkpoint blob size mismatch");
        c.format_version = header.at("format_version").get<std::uint32_t>();
        c.config = ModelConfig::from_json(header.at("config"));
        c.tokenizer = BpeModel::from_json(header.at("tokenizer"));
        c.tokenizer_hash = header.at("tokenizer_hash").get<std::string>();
        c.step = header.at("step").get<std::uint64_t>();
        c.meta = header.value("meta", json::object());
        c.tensors = read_tensors(header.at("tensors"), file, blob_start, blob_bytes);
        c.optimizer_state = read_tensors(header.at("optimizer"), file, blob_start, blob_bytes);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint header: ") + e.what());
    }
    if (c.tokenizer.content_hash() != c.tokenizer_hash) {
        throw CheckpointError("embedded tokenizer does not match its recorded hash");
    }
    return c;
}

void load_parameters(Transformer<float>& model, const Checkpoint& checkpoint) {
    auto params = model.parameters();
    std::vector<bool> used(checkpoint.tensors.size(), false);
    for (auto& p : params) {
        auto it = std::find_if(checkpoint.tensors.begin(), checkpoint.tensors.end(),
                               [&](const TensorRecord& r) { return r.name == p.name; });
        if (it == checkpoint.tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + p.name + "'");
        if (it->shape != p.tensor.shape()) {
            throw CheckpointError("tensor '" + p.name + "' has shape " + ad::to_string(it->shape) +
                                  " in the checkpoint but the model expects " + ad::to_string(p.tensor.shape()));
        }
        auto idx = static_cast<std::size_t>(it - checkpoint.tensors.begin());
        if (used[idx]) throw CheckpointError("tensor '" + p.name + "' appears more than once");
        used[idx] = true;
        std::copy(it->data.begin(), it->data.end(), p.tensor.mutable_data().begin());
    }
    for (std::size_t i = 0; i < used.size(); ++i) {
        if (!used[i]) throw CheckpointError("checkpoint has unexpected tensor '" + checkpoint.tensors[i].name + "'");
    }
}

Transformer<float> restore_model(const Checkpoint& checkpoint) {
    auto model = Transformer<float>::init(checkpoint.config, 0);
    load_parameters(model, checkpoint);
    return model;
}

}  // namespace transfo
