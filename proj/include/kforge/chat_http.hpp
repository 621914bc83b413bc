#pragma once

#include <cstdlib>
#include <string>

#include <httplib.h>

#include "common.hpp"
#include "promptgen.hpp"

namespace kforge {

// Chat-completion client. Sends {model, messages, temperature, top_p,
// max_tokens, seed}; accepts either {"text": ...} or the OpenAI-style
// choices[0].message.content shape.
class HttpChatBackend : public ChatBackend {
public:
    HttpChatBackend(std::string endpoint, std::string api_key_env = "", int timeout_s = 300)
        : endpoint_(std::move(endpoint)), timeout_s_(timeout_s) {
        if (!api_key_env.empty())
            if (const char* k = std::getenv(api_key_env.c_str())) key_ = k;
        const auto scheme = endpoint_.find("://");
        if (scheme == std::string::npos) throw Error(ErrorCode::InvalidConfig, "endpoint needs a scheme: " + endpoint_);
        const auto path = endpoint_.find('/', scheme + 3);
        base_ = endpoint_.substr(0, path);
        path_ = path == std::string::npos ? "/v1/chat/completions" : endpoint_.substr(path);
    }

    std::string complete(const ChatRequest& req) override {
        httplib::Client cli(base_);
        cli.set_connection_timeout(10);
        cli.set_read_timeout(timeout_s_);
        cli.set_write_timeout(60);
        httplib::Headers headers;
        if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
        auto res = cli.Post(path_, headers, json(req).dump(), "application/json");
        if (!res) throw Error(ErrorCode::BackendUnavailable, endpoint_ + ": " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw Error(ErrorCode::BackendUnavailable, endpoint_ + ": HTTP " + std::to_string(res->status));
        try {
            const json body = json::parse(res->body);
            if (body.contains("text")) return body["text"].get<std::string>();
            return body.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw Error(ErrorCode::BackendUnavailable, endpoint_ + ": unreadable response: " + e.what());
        }
    }

    std::string name() const override { return "http:" + endpoint_; }

private:
    std::string endpoint_, base_, path_, key_;
    int timeout_s_;
};

} // namespace kforge
