#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "lafn/paraphrase_client.hpp"

using namespace lafn;

namespace {

// A local chat-completion stand-in answering with a fixed status and body.
class MockServer {
public:
    MockServer(int status, std::string body) {
        server_.Post("/v1/chat/completions", [this, status, body](const httplib::Request& req, httplib::Response& res) {
            ++hits_;
            last_auth_ = req.get_header_value("Authorization");
            last_request_ = req.body;
            res.status = status;
            res.set_content(body, "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockServer() {
        server_.stop();
        thread_.join();
    }

    LlmClientConfig config() const {
        LlmClientConfig c;
        c.endpoint = "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
        c.max_retries = 2;
        c.retry_backoff_s = 0.01;
        c.timeout_s = 5;
        c.token_env = "LAFN_TEST_TOKEN";
        return c;
    }
    int hits() const { return hits_; }
    std::string last_auth() const { return last_auth_; }
    std::string last_request() const { return last_request_; }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> hits_{0};
    std::string last_auth_, last_request_;
};

std::string completion(const std::string& content) {
    return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

}  // namespace

TEST(ParaphraseClient, NumberedLinesBecomeSentences) {
    MockServer s(200, completion("1. Where was Ada born?\n2) Ada was born where?\n3. In which city was Ada born?\n"));
    ::setenv("LAFN_TEST_TOKEN", "sekrit", 1);
    const auto r = fetch_paraphrases_llm(s.config(), "Ada", "Where is Ada from?", 3);
    ::unsetenv("LAFN_TEST_TOKEN");
    EXPECT_EQ(r.sentences, (std::vector<std::string>{"Where was Ada born?", "Ada was born where?", "In which city was Ada born?"}));
    EXPECT_EQ(r.dropped, 0u);
    EXPECT_EQ(s.last_auth(), "Bearer sekrit");
    const auto req = nlohmann::json::parse(s.last_request());
    const auto msg = req.at("messages").at(0).at("content").get<std::string>();
    EXPECT_NE(msg.find("give me 3 questions"), std::string::npos) << msg;
    EXPECT_NE(msg.find("Subject: Ada."), std::string::npos);
}

TEST(ParaphraseClient, LinesWithoutSubjectAreDropped) {
    MockServer s(200, completion("1. Where was she born?\n2. Her birthplace?\n3. Origin?"));
    const auto r = fetch_paraphrases_llm(s.config(), "Ada", "Where is Ada from?", 3);
    EXPECT_TRUE(r.sentences.empty());
    EXPECT_EQ(r.dropped, 3u);
}

TEST(ParaphraseClient, AuthFailureIsTransportErrorAfterRetries) {
    MockServer s(401, "{}");
    try {
        fetch_paraphrases_llm(s.config(), "Ada", "Where is Ada from?", 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::transport);
        EXPECT_NE(std::string(e.what()).find("$LAFN_TEST_TOKEN"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("3 attempts"), std::string::npos) << e.what();
    }
    EXPECT_EQ(s.hits(), 3);
}

TEST(ParaphraseClient, UnparseableBodyKeepsRawText) {
    MockServer s(200, "<html>oops</html>");
    try {
        fetch_paraphrases_llm(s.config(), "Ada", "Where is Ada from?", 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
        EXPECT_NE(std::string(e.what()).find("<html>oops</html>"), std::string::npos);
    }
    EXPECT_EQ(s.hits(), 1);
}

TEST(ParaphraseClient, UnreachableEndpointIsTransportError) {
    LlmClientConfig c;
    c.endpoint = "http://127.0.0.1:1/v1/chat/completions";
    c.max_retries = 0;
    c.timeout_s = 1;
    try {
        chat_completion(c, "hi");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::transport);
    }
    c.endpoint = "not a url";
    EXPECT_THROW(chat_completion(c, "hi"), Error);
}

TEST(ParaphraseClient, LineParsing) {
    EXPECT_EQ(parse_completion_lines("Sure!\n1. a b\n2. c\n\n- d\n", 10), (std::vector<std::string>{"a b", "c", "d"}));
    EXPECT_EQ(parse_completion_lines("x\ny\nz", 2), (std::vector<std::string>{"x", "y"}));
    EXPECT_TRUE(parse_completion_lines("  \n\n", 3).empty());
    const auto r = filter_paraphrases({"Ada Lovelace wrote", "Ada wrote", "Lovelace Ada"}, "Ada Lovelace");
    EXPECT_EQ(r.sentences.size(), 1u);
    EXPECT_EQ(r.dropped, 2u);
    const auto instr = paraphrase_instruction("S", "Q?", 30, "Chinese");
    EXPECT_NE(instr.find("30 questions including this subject in Chinese"), std::string::npos);
}
