#include "transfo/service.hpp"

#include <algorithm>
#include <iostream>

#include <httplib.h>

#include "transfo/errors.hpp"

namespace transfo {

using nlohmann::json;

namespace {

// Service-side caps on decode overrides; a single request must not be able
// to monopolise a worker for minutes.
constexpr std::size_t kMaxBeamSize = 16;
constexpr std::size_t kMaxTopK = 1000;
constexpr std::size_t kMaxNewTokens = 128;

std::size_t default_workers(std::size_t requested) {
    if (requested > 0) return requested;
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

json error_body(const std::string& message, const std::string& field = "") {
    json j{{"error", message}};
    if (!field.empty()) j["field"] = field;
    return j;
}

std::string field_at(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

const json& require_string(const json& j, const std::string& field) {
    if (!j.is_string()) throw RequestError(field, "must be a string");
    return j;
}

// Holds one generation slot for the lifetime of a request.
class SlotGuard {
public:
    explicit SlotGuard(std::counting_semaphore<>& s) : s_(s) { s_.acquire(); }
    ~SlotGuard() { s_.release(); }
    SlotGuard(const SlotGuard&) = delete;
    SlotGuard& operator=(const SlotGuard&) = delete;

private:
    std::counting_semaphore<>& s_;
};

}  // namespace

ChatRequest parse_chat_request(const json& body, const DecodeParams& defaults) {
    if (!body.is_object()) throw RequestError("body", "must be a JSON object");
    ChatRequest req;
    req.decode = defaults;

    if (auto it = body.find("persona"); it != body.end()) {
        if (!it->is_array()) throw RequestError("persona", "must be an array of strings");
        for (std::size_t i = 0; i < it->size(); ++i)
            req.persona.push_back(require_string((*it)[i], field_at("persona", i)).get<std::string>());
    }

    if (auto it = body.find("history"); it != body.end()) {
        if (!it->is_array()) throw RequestError("history", "must be an array of {speaker, text}");
        for (std::size_t i = 0; i < it->size(); ++i) {
            const auto& t = (*it)[i];
            const auto at = field_at("history", i);
            if (!t.is_object()) throw RequestError(at, "must be an object with speaker and text");
            const auto sp = t.find("speaker");
            if (sp == t.end() || !sp->is_number_integer() || (*sp != 1 && *sp != 2))
                throw RequestError(at + ".speaker", "must be 1 (user) or 2 (agent)");
            const auto tx = t.find("text");
            if (tx == t.end()) throw RequestError(at + ".text", "is required");
            req.history.push_back({sp->get<int>(), require_string(*tx, at + ".text").get<std::string>()});
            if (i > 0 && req.history[i].speaker == req.history[i - 1].speaker)
                throw RequestError(at + ".speaker", "speakers must alternate; two consecutive turns by speaker " +
                                                        std::to_string(req.history[i].speaker));
        }
        if (!req.history.empty() && req.history.back().speaker != kAgentSpeaker)
            throw RequestError("history", "must end with an agent turn (speaker 2) before the user's message");
    }

    const auto msg = body.find("message");
    if (msg == body.end()) throw RequestError("message", "is required");
    req.message = require_string(*msg, "message").get<std::string>();
    if (normalize_text(req.message).empty()) throw RequestError("message", "must not be empty");

    if (auto it = body.find("decode"); it != body.end() && !it->is_null()) {
        if (!it->is_object()) throw RequestError("decode", "must be an object");
        try {
            req.decode = DecodeParams::from_json(*it, defaults);
            req.decode.validate();
        } catch (const ConfigError& e) {
            throw RequestError("decode", e.what());
        }
        if (req.decode.beam_size > kMaxBeamSize)
            throw RequestError("decode.beam_size", "at most " + std::to_string(kMaxBeamSize));
        if (req.decode.top_k > kMaxTopK) throw RequestError("decode.top_k", "at most " + std::to_string(kMaxTopK));
        if (req.decode.max_new_tokens > kMaxNewTokens)
            throw RequestError("decode.max_new_tokens", "at most " + std::to_string(kMaxNewTokens));
    }
    return req;
}

DialogExample chat_example(const ChatRequest& request) {
    DialogExample ex;
    ex.persona = request.persona;
    ex.history = request.history;
    ex.history.push_back({1, request.message});
    ex.reply_speaker = kAgentSpeaker;
    return ex;
}

json chat_response(const GenerateResult& result) {
    if (result.beams.empty()) throw ContractError("no beams to report");
    json beams = json::array();
    for (const auto& b : result.beams) beams.push_back(b.to_json());
    const auto& best = result.beams.front();
    return {{"reply", best.text},
            {"beams", std::move(beams)},
            {"usage", {{"context_tokens", result.context_tokens}, {"generated_tokens", best.tokens.size()}}}};
}

std::shared_ptr<const ServedModel> ServedModel::from_checkpoint(const Checkpoint& checkpoint, const std::string& source) {
    auto m = std::make_shared<ServedModel>();
    m->model = std::make_shared<const Transformer<float>>(restore_model(checkpoint));
    m->tokenizer = checkpoint.tokenizer;
    m->info = checkpoint.config.to_json();
    m->info["checkpoint"] = {{"format_version", checkpoint.format_version},
                             {"step", checkpoint.step},
                             {"tokenizer_hash", checkpoint.tokenizer_hash},
                             {"tokenizer_size", checkpoint.tokenizer.size()},
                             {"meta", checkpoint.meta},
                             {"path", source}};
    return m;
}

ChatService::ChatService(ServiceOptions options)
    : options_(std::move(options)),
      server_(std::make_unique<httplib::Server>()),
      slots_(static_cast<std::ptrdiff_t>(default_workers(options_.workers))) {
    options_.workers = default_workers(options_.workers);
    options_.decode.validate();
    install_routes();
}

ChatService::~ChatService() {
    stop();
    if (loader_.joinable()) loader_.join();
}

void ChatService::set_model(std::shared_ptr<const ServedModel> model) {
    {
        std::lock_guard lock(mu_);
        model_ = std::move(model);
    }
    loaded_cv_.notify_all();
}

void ChatService::load_async(std::filesystem::path checkpoint) {
    if (loader_.joinable()) loader_.join();
    {
        std::lock_guard lock(mu_);
        loading_ = true;
    }
    loader_ = std::thread([this, path = std::move(checkpoint)] {
        std::shared_ptr<const ServedModel> m;
        try {
            m = ServedModel::from_checkpoint(load_checkpoint(path), path.string());
            std::cerr << "model loaded from " << path.string() << "\n";
        } catch (const std::exception& e) {
            std::cerr << "model load failed: " << e.what() << "\n";
        }
        {
            std::lock_guard lock(mu_);
            if (m) model_ = std::move(m);
            loading_ = false;
        }
        loaded_cv_.notify_all();
    });
}

bool ChatService::wait_loaded() {
    std::unique_lock lock(mu_);
    loaded_cv_.wait(lock, [&] { return !loading_; });
    return model_ != nullptr;
}

bool ChatService::model_loaded() const { return current() != nullptr; }

std::shared_ptr<const ServedModel> ChatService::current() const {
    std::lock_guard lock(mu_);
    return model_;
}

HttpResult ChatService::chat(const std::string& body) const {
    ChatRequest req;
    try {
        req = parse_chat_request(json::parse(body), options_.decode);
    } catch (const json::parse_error& e) {
        return {400, error_body(std::string("malformed JSON: ") + e.what(), "body")};
    } catch (const RequestError& e) {
        return {400, error_body(e.what(), e.field())};
    }

    const auto served = current();
    if (!served) return {503, error_body("model not loaded yet")};

    BuildOptions build;
    build.max_len = served->model->config().n_positions;
    const ModelScorer scorer(*served->model);
    try {
        GenerateResult result;
        {
            SlotGuard slot(slots_);
            result = generate(scorer, served->tokenizer, chat_example(req), req.decode, build);
        }
        return {200, chat_response(result)};
    } catch (const InputTooLongError& e) {
        return {413, error_body(e.what())};
    } catch (const DecodeExhaustedError& e) {
        return {500, error_body(std::string("decode failed: ") + e.what())};
    } catch (const std::exception& e) {
        return {500, error_body(e.what())};
    }
}

HttpResult ChatService::health() const { return {200, {{"status", "ok"}, {"model_loaded", model_loaded()}}}; }

HttpResult ChatService::model_info() const {
    const auto served = current();
    if (!served) return {503, error_body("model not loaded yet")};
    return {200, served->info};
}

void ChatService::install_routes() {
    auto& s = *server_;
    auto reply = [](httplib::Response& res, const HttpResult& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    s.Post("/v1/chat", [this, reply](const httplib::Request& req, httplib::Response& res) { reply(res, chat(req.body)); });
    s.Get("/v1/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
    s.Get("/v1/model", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, model_info()); });

    if (!options_.cors_origin.empty()) {
        // Preflight for the browser client.
        s.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
            res.status = 204;
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.set_header("Access-Control-Max-Age", "600");
        });
        s.set_post_routing_handler([origin = options_.cors_origin](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", origin);
            res.set_header("Vary", "Origin");
        });
    }

    s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
        const std::string msg = res.status == 404 ? "no route for " + req.method + " " + req.path
                                                  : std::string(httplib::status_message(res.status));
        res.set_content(error_body(msg).dump(), "application/json");
        return httplib::Server::HandlerResponse::Handled;
    });
    s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            if (ep) std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(error_body(msg).dump(), "application/json");
    });
    s.set_payload_max_length(options_.max_body_bytes);
    // Enough connection threads that health checks never wait behind generations.
    const std::size_t threads = options_.workers + 4;
    s.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
}

int ChatService::bind() {
    const int port = options_.port == 0 ? server_->bind_to_any_port(options_.host)
                                        : (server_->bind_to_port(options_.host, options_.port) ? options_.port : -1);
    if (port < 0) throw Error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
    options_.port = port;
    return port;
}

void ChatService::serve() { server_->listen_after_bind(); }

void ChatService::wait_until_ready() const { server_->wait_until_ready(); }

void ChatService::stop() {
    if (server_ && server_->is_running()) server_->stop();
}

}  // namespace transfo
