#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "transfo/data_store.hpp"
#include "transfo/decoder.hpp"
#include "transfo/errors.hpp"
#include "transfo/input_builder.hpp"
#include "transfo/scorer.hpp"
#include "transfo/tokenizer.hpp"

namespace httplib {
class Server;
}

namespace transfo {

/// Rejected request body; `field` is the JSON path of the offending value.
class RequestError : public Error {
public:
    RequestError(const std::string& field, const std::string& what) : Error(field + ": " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

struct ChatRequest {
    std::vector<std::string> persona;
    std::vector<Turn> history;
    std::string message;
    DecodeParams decode;
};

/// Validates a POST /v1/chat body; decode overrides are laid over `defaults`.
/// The user is speaker 1 and the persona owner speaker 2, so the history must
/// alternate and end with the agent (or be empty). Throws RequestError.
ChatRequest parse_chat_request(const nlohmann::json& body, const DecodeParams& defaults);

/// The reply example for a request: history plus the message as the user's turn.
DialogExample chat_example(const ChatRequest& request);

/// {reply, beams[{text, lm_norm_score, cls_score, rank_score}], usage{context_tokens, generated_tokens}}.
nlohmann::json chat_response(const GenerateResult& result);

/// A model ready to serve. Parameters are never mutated after construction.
struct ServedModel {
    std::shared_ptr<const Transformer<float>> model;
    BpeModel tokenizer;
    nlohmann::json info;  // ModelConfig plus checkpoint metadata

    static std::shared_ptr<const ServedModel> from_checkpoint(const Checkpoint& checkpoint,
                                                              const std::string& source = "");
};

struct ServiceOptions {
    std::string host = "127.0.0.1";
    int port = 8642;
    std::size_t workers = 0;  // concurrent generations; 0 = one per CPU core
    std::string cors_origin;  // empty disables CORS headers
    DecodeParams decode;      // defaults under per-request overrides
    std::size_t max_body_bytes = 1 << 20;
};

struct HttpResult {
    int status = 200;
    nlohmann::json body;
};

/// Stateless chat inference over HTTP. Routes: POST /v1/chat, GET /v1/health,
/// GET /v1/model. Generations run on a bounded set of worker slots; excess
/// requests wait for a slot while health checks stay responsive.
class ChatService {
public:
    explicit ChatService(ServiceOptions options);
    ~ChatService();
    ChatService(const ChatService&) = delete;
    ChatService& operator=(const ChatService&) = delete;

    void set_model(std::shared_ptr<const ServedModel> model);
    /// Loads a checkpoint on a background thread; the service answers
    /// health checks (model_loaded false) meanwhile.
    void load_async(std::filesystem::path checkpoint);
    /// Blocks until a pending background load finishes; true if a model is loaded.
    bool wait_loaded();
    bool model_loaded() const;

    // Route handlers, usable without a socket.
    HttpResult chat(const std::string& body) const;
    HttpResult health() const;
    HttpResult model_info() const;

    /// Binds the socket (port 0 picks a free one) and returns the bound port.
    int bind();
    /// Serves until stop(); bind() first.
    void serve();
    /// Returns once serve() is accepting connections.
    void wait_until_ready() const;
    void stop();

    const ServiceOptions& options() const { return options_; }

private:
    std::shared_ptr<const ServedModel> current() const;
    void install_routes();

    ServiceOptions options_;
    std::unique_ptr<httplib::Server> server_;
    mutable std::counting_semaphore<> slots_;
    mutable std::mutex mu_;
    std::condition_variable loaded_cv_;
    std::shared_ptr<const ServedModel> model_;
    bool loading_ = false;
    std::thread loader_;
};

}  // namespace transfo
