#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <future>
#include <thread>

#include <httplib.h>

#include "transfo/data_store.hpp"
#include "transfo/errors.hpp"
#include "transfo/service.hpp"

using namespace transfo;
using nlohmann::json;

namespace {

std::shared_ptr<const ServedModel> tiny_model(std::size_t n_positions = 160) {
    static const Dataset data = gen_synthetic(5, 10);
    const auto tok = BpeModel::train(corpus_lines(data), 120);
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = tok.size();
    c.n_positions = n_positions;
    const auto model = Transformer<float>::init(c, 11);
    return ServedModel::from_checkpoint(make_checkpoint(model, tok, 7, {{"note", "tiny"}}), "memory");
}

json chat_body(const std::string& message, std::uint64_t seed) {
    return {{"persona", {"i like to ski .", "my dog is named rex ."}},
            {"history", json::array({{{"speaker", 1}, {"text", "hello"}}, {{"speaker", 2}, {"text", "hi there !"}}})},
            {"message", message},
            {"decode", {{"seed", seed}, {"max_new_tokens", 8}}}};
}

// Runs a ChatService on a free port for the lifetime of the fixture.
struct RunningService {
    ChatService service;
    std::thread thread;
    int port = 0;

    explicit RunningService(ServiceOptions o, std::shared_ptr<const ServedModel> m = tiny_model())
        : service([&] {
              o.port = 0;
              return o;
          }()) {
        if (m) service.set_model(std::move(m));
        port = service.bind();
        thread = std::thread([this] { service.serve(); });
        service.wait_until_ready();
    }
    ~RunningService() {
        service.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(120, 0);
        return c;
    }
};

std::string post_chat(const RunningService& s, const json& body, int expect = 200) {
    auto c = s.client();
    auto res = c.Post("/v1/chat", body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == expect);
    return res->body;
}

}  // namespace

TEST_SUITE("service") {
    TEST_CASE("request validation") {
        const DecodeParams d;
        auto ok = parse_chat_request(chat_body("what do you like ?", 3), d);
        CHECK(ok.persona.size() == 2);
        CHECK(ok.history.size() == 2);
        CHECK(ok.decode.seed == 3);
        CHECK(ok.decode.beam_size == d.beam_size);
        const auto ex = chat_example(ok);
        CHECK(ex.history.back() == Turn{1, "what do you like ?"});
        CHECK(ex.reply_speaker == 2);

        auto field_of = [&](const json& body) {
            try {
                parse_chat_request(body, d);
            } catch (const RequestError& e) {
                return e.field();
            }
            return std::string("<accepted>");
        };
        auto b = chat_body("x", 0);
        b["history"][1]["speaker"] = 1;
        CHECK(field_of(b) == "history[1].speaker");
        b = chat_body("x", 0);
        b["history"] = json::array({{{"speaker", 2}, {"text", "hi"}}, {{"speaker", 1}, {"text", "yo"}}});
        CHECK(field_of(b) == "history");
        b = chat_body("x", 0);
        b.erase("message");
        CHECK(field_of(b) == "message");
        CHECK(field_of(chat_body("   ", 0)) == "message");
        b = chat_body("x", 0);
        b["persona"] = json::array({"ok", 3});
        CHECK(field_of(b) == "persona[1]");
        b = chat_body("x", 0);
        b["decode"]["beam_size"] = "wide";
        CHECK(field_of(b) == "decode");
        b = chat_body("x", 0);
        b["decode"]["rank_lambda"] = 2.0;
        CHECK(field_of(b) == "decode");
        b = chat_body("x", 0);
        b["decode"]["beam_size"] = 64;
        CHECK(field_of(b) == "decode.beam_size");
        CHECK(field_of(json::array()) == "body");
        CHECK(field_of({{"message", "hi"}}) == "<accepted>");
    }

    TEST_CASE("handlers before a model is loaded") {
        ChatService s(ServiceOptions{});
        CHECK(s.health().body == json{{"status", "ok"}, {"model_loaded", false}});
        CHECK(s.chat(chat_body("hi", 0).dump()).status == 503);
        CHECK(s.model_info().status == 503);
        s.set_model(tiny_model());
        CHECK(s.health().body["model_loaded"] == true);
        const auto info = s.model_info();
        CHECK(info.status == 200);
        CHECK(info.body["n_layers"] == 2);
        CHECK(info.body["d_model"] == 16);
        CHECK(info.body["checkpoint"]["step"] == 7);
    }

    TEST_CASE("background checkpoint load") {
        const auto dir = std::filesystem::temp_directory_path() / "transfo_service_test";
        std::filesystem::create_directories(dir);
        const auto m = tiny_model();
        save_checkpoint(make_checkpoint(*m->model, m->tokenizer, 3), dir / "tiny.ckpt");

        ChatService s(ServiceOptions{});
        s.load_async(dir / "tiny.ckpt");
        CHECK(s.health().status == 200);
        CHECK(s.wait_loaded());
        CHECK(s.health().body["model_loaded"] == true);
        CHECK(s.model_info().body["checkpoint"]["step"] == 3);

        ChatService bad(ServiceOptions{});
        bad.load_async(dir / "missing.ckpt");
        CHECK_FALSE(bad.wait_loaded());
        CHECK(bad.health().body["model_loaded"] == false);
        std::filesystem::remove_all(dir);
    }

    TEST_CASE("chat over HTTP") {
        RunningService s(ServiceOptions{});
        auto c = s.client();

        auto health = c.Get("/v1/health");
        REQUIRE(health);
        CHECK(json::parse(health->body) == json{{"status", "ok"}, {"model_loaded", true}});
        auto model = c.Get("/v1/model");
        REQUIRE(model);
        CHECK(json::parse(model->body)["n_layers"] == 2);

        // Degenerate context: no persona, no history.
        const auto r = json::parse(post_chat(s, {{"persona", json::array()}, {"message", "hi"}}));
        REQUIRE(r["beams"].size() >= 1);
        CHECK_FALSE(r["reply"].get<std::string>().empty());
        CHECK(r["reply"] == r["beams"][0]["text"]);
        for (std::size_t i = 0; i < r["beams"].size(); ++i) {
            for (const char* k : {"text", "lm_norm_score", "cls_score", "rank_score"}) CHECK(r["beams"][i].contains(k));
            if (i > 0) CHECK(r["beams"][i - 1]["rank_score"].get<double>() >= r["beams"][i]["rank_score"].get<double>());
        }
        CHECK(r["usage"]["context_tokens"].get<int>() > 0);
        CHECK(r["usage"]["generated_tokens"].get<int>() >= 1);

        const auto a = post_chat(s, chat_body("do you have pets ?", 42));
        const auto b = post_chat(s, chat_body("do you have pets ?", 42));
        CHECK(a == b);

        auto bad = chat_body("x", 0);
        bad["history"][0]["speaker"] = 2;
        const auto err = json::parse(post_chat(s, bad, 400));
        CHECK(err["field"] == "history[1].speaker");
        CHECK(json::parse(post_chat(s, json("not an object"), 400))["field"] == "body");
        auto garbled = c.Post("/v1/chat", "{\"message\": ", "application/json");
        REQUIRE(garbled);
        CHECK(garbled->status == 400);
        CHECK(json::parse(garbled->body).contains("error"));

        auto missing = c.Get("/v1/nope");
        REQUIRE(missing);
        CHECK(missing->status == 404);
        CHECK(json::parse(missing->body).contains("error"));
        CHECK(missing->get_header_value("Access-Control-Allow-Origin").empty());
    }

    TEST_CASE("oversized context is 413") {
        RunningService s(ServiceOptions{}, tiny_model(24));
        json body{{"persona", {"i like to ski and swim and read books every single day ."}},
                  {"message", "tell me everything you know about the history of the whole world please"},
                  {"decode", {{"max_new_tokens", 16}}}};
        const auto r = json::parse(post_chat(s, body, 413));
        CHECK(r.contains("error"));
    }

    TEST_CASE("CORS flag") {
        ServiceOptions o;
        o.cors_origin = "http://localhost:5173";
        RunningService s(o);
        auto c = s.client();
        auto h = c.Get("/v1/health");
        REQUIRE(h);
        CHECK(h->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");
        auto pre = c.Options("/v1/chat");
        REQUIRE(pre);
        CHECK(pre->status == 204);
        CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
        CHECK(pre->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");
    }

    TEST_CASE("concurrent responses equal serial responses") {
        ServiceOptions o;
        o.workers = 2;
        RunningService s(o);
        std::vector<json> bodies;
        for (int i = 0; i < 6; ++i) bodies.push_back(chat_body(i % 2 ? "what do you do ?" : "any pets ?", 100 + i));
        std::vector<std::string> serial;
        for (const auto& b : bodies) serial.push_back(post_chat(s, b));

        std::vector<std::future<std::string>> futures;
        for (int round = 0; round < 2; ++round)
            for (const auto& b : bodies)
                futures.push_back(std::async(std::launch::async, [&s, b] {
                    auto c = s.client();
                    auto res = c.Post("/v1/chat", b.dump(), "application/json");
                    return res && res->status == 200 ? res->body : std::string("<failed>");
                }));
        for (std::size_t i = 0; i < futures.size(); ++i) CHECK(futures[i].get() == serial[i % bodies.size()]);
    }

    TEST_CASE("health stays fast during generation") {
        RunningService s(ServiceOptions{});
        auto heavy = chat_body("tell me about your weekend", 5);
        heavy["decode"]["beam_size"] = 16;
        heavy["decode"]["max_new_tokens"] = 64;
        heavy["decode"]["top_k"] = 100;
        auto busy = std::async(std::launch::async, [&] {
            auto c = s.client();
            return c.Post("/v1/chat", heavy.dump(), "application/json");
        });
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        auto c = s.client();
        double worst = 0.0;
        for (int i = 0; i < 10; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            auto h = c.Get("/v1/health");
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            REQUIRE(h);
            CHECK(h->status == 200);
            worst = std::max(worst, ms);
        }
        MESSAGE("worst health latency ms: " << worst);
        CHECK(worst < 100.0);
        auto done = busy.get();
        REQUIRE(done);
        CHECK(done->status == 200);
    }
}
