#pragma once

// Local chat-completions stand-in for exercising RemoteAgent.

#include "csb/agents.hpp"

#include <atomic>
#include <functional>
#include <thread>

namespace csb::fake {

class FakeEndpoint {
public:
    // Returns (status, body) for a request body; default answers with the
    // canonical action of the prompt's decisive field.
    using Handler = std::function<std::pair<int, std::string>(const json& request, std::size_t call_index)>;

    explicit FakeEndpoint(std::string expected_key, Handler handler = {})
        : key_(std::move(expected_key)), handler_(handler ? std::move(handler) : default_handler()) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const auto n = calls_++;
            if (req.get_header_value("Authorization") != "Bearer " + key_) {
                res.status = 401;
                res.set_content("{\"error\":\"bad key\"}", "application/json");
                return;
            }
            auto [status, body] = handler_(json::parse(req.body), n);
            res.status = status;
            res.set_content(body, "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~FakeEndpoint() {
        server_.stop();
        thread_.join();
    }

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    std::size_t calls() const { return calls_.load(); }

    static std::string envelope(const std::string& content, long long prompt = 40, long long completion = 6) {
        return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})},
                    {"usage", {{"prompt_tokens", prompt}, {"completion_tokens", completion}, {"total_tokens", prompt + completion}}}}
            .dump();
    }

    static Handler default_handler() {
        return [](const json& request, std::size_t) {
            const auto prompt = json::parse(request["messages"][1]["content"].get<std::string>());
            std::string action = "ACTION_A";
            if (prompt.contains("decisive_field")) {
                const auto code = canonicalize(prompt["decisive_field"]["text"].get<std::string>());
                if (code != ActionCode::InvalidOrUnmapped) action = std::string(to_string(code));
            }
            return std::make_pair(200, envelope(json{{"final_action", action}, {"rationale", "field"}}.dump()));
        };
    }

private:
    std::string key_;
    Handler handler_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<std::size_t> calls_{0};
};

}  // namespace csb::fake
