#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <thread>

#include "ctrlgen/guidelines.hpp"
#include "ctrlgen/llm.hpp"
#include "ctrlgen/mock_endpoint.hpp"
#include "ctrlgen/segmentation.hpp"

using namespace ctrlgen;
using namespace ctrlgen::llm;
using namespace std::chrono_literals;

namespace {

GatewayConfig config_for(const MockEndpoint& mock) {
  GatewayConfig cfg;
  cfg.endpoint_url = mock.url();
  cfg.model_id = "mock";
  cfg.request_timeout = 5s;
  cfg.retry.max_attempts = 3;
  cfg.retry.backoff_base = 1ms;
  return cfg;
}

MockReply text_reply(std::vector<std::string> chunks) {
  MockReply r;
  r.chunks = std::move(chunks);
  return r;
}

MockReply status_reply(int status) {
  MockReply r;
  r.status = status;
  r.chunks = {"nope"};
  return r;
}

ChatRequest ask(std::string user) {
  ChatRequest r;
  r.user = std::move(user);
  return r;
}

}  // namespace

TEST_CASE("blocking completion") {
  MockEndpoint mock(scripted({text_reply({"OK"})}));
  Gateway gw(config_for(mock));
  CHECK(gw.complete(ask("hi")) == "OK");
  const auto requests = mock.requests();
  REQUIRE(requests.size() == 1);
  const auto& body = requests[0].body;
  CHECK(body["temperature"] == 0.0);
  CHECK_FALSE(body.contains("top_p"));
  CHECK(body["stream"] == false);
  CHECK(body["messages"].size() == 1);
  CHECK(body["messages"][0]["content"] == "hi");
}

TEST_CASE("rate limiting is retried with recorded backoffs") {
  MockEndpoint mock(scripted({status_reply(429), status_reply(429), text_reply({"fine"})}));
  Gateway gw(config_for(mock));
  std::vector<Millis> backoffs;
  std::vector<GatewayError::Kind> causes;
  gw.set_retry_hook([&](int, Millis delay, const GatewayError& e) {
    backoffs.push_back(delay);
    causes.push_back(e.kind());
  });
  CHECK(gw.complete(ask("x")) == "fine");
  CHECK(mock.calls() == 3);
  CHECK(backoffs == std::vector<Millis>{1ms, 2ms});
  CHECK(causes == std::vector<GatewayError::Kind>(2, GatewayError::Kind::rate_limited));
}

TEST_CASE("retry-after header sets the delay") {
  auto limited = status_reply(429);
  limited.headers["Retry-After"] = "0.01";
  MockEndpoint mock(scripted({limited, text_reply({"ok"})}));
  Gateway gw(config_for(mock));
  std::vector<Millis> backoffs;
  gw.set_retry_hook([&](int, Millis d, const GatewayError&) { backoffs.push_back(d); });
  CHECK(gw.complete(ask("x")) == "ok");
  CHECK(backoffs == std::vector<Millis>{10ms});
}

TEST_CASE("error classification") {
  SUBCASE("server errors are retried then surfaced") {
    MockEndpoint mock(scripted({status_reply(503)}));
    Gateway gw(config_for(mock));
    try {
      gw.complete(ask("x"));
      FAIL("expected GatewayError");
    } catch (const GatewayError& e) {
      CHECK(e.kind() == GatewayError::Kind::http_status);
      CHECK(e.status() == 503);
    }
    CHECK(mock.calls() == 3);
  }
  SUBCASE("client errors are not retried") {
    MockEndpoint mock(scripted({status_reply(400)}));
    Gateway gw(config_for(mock));
    CHECK_THROWS_AS(gw.complete(ask("x")), GatewayError);
    CHECK(mock.calls() == 1);
  }
  SUBCASE("unreachable endpoint times out after every attempt") {
    std::string url;
    {
      MockEndpoint mock(scripted({text_reply({"x"})}));
      url = mock.url();
    }
    GatewayConfig cfg;
    cfg.endpoint_url = url;
    cfg.request_timeout = 1s;
    cfg.retry.max_attempts = 3;
    cfg.retry.backoff_base = 1ms;
    Gateway gw(cfg);
    int retries = 0;
    gw.set_retry_hook([&](int, Millis, const GatewayError&) { ++retries; });
    try {
      gw.complete(ask("x"));
      FAIL("expected GatewayError");
    } catch (const GatewayError& e) {
      CHECK(e.kind() == GatewayError::Kind::timeout);
    }
    CHECK(retries == 2);
  }
}

TEST_CASE("streaming delivers chunks in order") {
  MockEndpoint mock(scripted({text_reply({"A", "B", "C"})}));
  Gateway gw(config_for(mock));
  std::vector<std::string> seen;
  const auto summary = gw.stream(ask("x"), [&](std::string_view c) {
    seen.emplace_back(c);
    return true;
  });
  CHECK(seen == std::vector<std::string>{"A", "B", "C"});
  CHECK(summary.text == "ABC");
  CHECK_FALSE(summary.cancelled);
  CHECK(mock.requests()[0].body["stream"] == true);
}

TEST_CASE("consumer cancellation aborts the stream") {
  auto slow = text_reply({"A", "B", "C", "D"});
  slow.chunk_delay = 50ms;
  MockEndpoint mock(scripted({slow}));
  Gateway gw(config_for(mock));
  std::vector<std::string> seen;
  const auto start = std::chrono::steady_clock::now();
  const auto summary = gw.stream(ask("x"), [&](std::string_view c) {
    seen.emplace_back(c);
    return false;
  });
  CHECK(summary.cancelled);
  CHECK(summary.text == "A");
  CHECK(seen.size() == 1);
  CHECK(std::chrono::steady_clock::now() - start < 150ms);
  for (int i = 0; i < 100 && mock.in_flight() > 0; ++i) std::this_thread::sleep_for(10ms);
  CHECK(mock.in_flight() == 0);
}

TEST_CASE("mid-stream disconnect carries the partial text") {
  auto broken = text_reply({"A", "B"});
  broken.disconnect = true;
  MockEndpoint mock(scripted({broken}));
  Gateway gw(config_for(mock));
  try {
    gw.stream(ask("x"), [](std::string_view) { return true; });
    FAIL("expected StreamInterrupted");
  } catch (const GatewayError& e) {
    CHECK(e.kind() == GatewayError::Kind::stream_interrupted);
    CHECK(e.partial() == "AB");
  }
  CHECK(mock.calls() == 1);  // text reached the consumer: no retry
}

TEST_CASE("streams retry only before the first chunk") {
  MockEndpoint mock(scripted({status_reply(500), text_reply({"ok"})}));
  Gateway gw(config_for(mock));
  const auto summary = gw.stream(ask("x"), [](std::string_view) { return true; });
  CHECK(summary.text == "ok");
  CHECK(summary.attempts == 2);
}

TEST_CASE("malformed responses are retried then reported") {
  MockReply bad;
  bad.raw_body = R"({"id":"x"})";
  MockEndpoint mock(scripted({bad}));
  Gateway gw(config_for(mock));
  try {
    gw.complete(ask("x"));
    FAIL("expected MalformedResponse");
  } catch (const GatewayError& e) {
    CHECK(e.kind() == GatewayError::Kind::malformed_response);
  }
  CHECK(mock.calls() == 3);

  MockReply not_json;
  not_json.raw_body = "data: {oops\n\n";
  mock.set_responder(scripted({not_json, text_reply({"ok"})}));
  mock.reset_counters();
  CHECK(gw.stream(ask("x"), [](std::string_view) { return true; }).text == "ok");
  CHECK(mock.calls() == 2);
}

TEST_CASE("endpoint urls may carry a base path") {
  MockEndpoint mock(scripted({text_reply({"fine"})}));
  for (const std::string suffix : {"", "/", "/v1", "/v1/chat/completions"}) {
    GatewayConfig cfg = config_for(mock);
    cfg.endpoint_url = mock.url() + suffix;
    Gateway gw(cfg);
    CHECK(gw.complete(ask("x")) == "fine");
  }
}

TEST_CASE("stream and complete agree") {
  const std::vector<std::vector<std::string>> scripts = {
      {"<topic>", "A</to", "pic>"}, {"a", "", "b"}, {"é", "ü\n", "x"}, {std::string(5000, 'z')}};
  for (const auto& chunks : scripts) {
    MockEndpoint mock(scripted({text_reply(chunks)}));
    Gateway gw(config_for(mock));
    const auto blocking = gw.complete(ask("x"));
    std::string streamed;
    gw.stream(ask("x"), [&](std::string_view c) {
      streamed += c;
      return true;
    });
    CHECK(streamed == blocking);
  }
}

TEST_CASE("in-flight requests never exceed the bound") {
  auto slow = text_reply({"a", "b"});
  slow.delay = 15ms;
  MockEndpoint mock(scripted({slow}));
  auto cfg = config_for(mock);
  cfg.max_in_flight = 4;
  Gateway gw(cfg);
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int t = 0; t < 20; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 5; ++i) {
        if ((t + i) % 2 == 0) {
          if (gw.complete(ask("x")) == "ab") ++ok;
        } else {
          if (gw.stream(ask("x"), [](std::string_view) { return true; }).text == "ab") ++ok;
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK(ok == 100);
  CHECK(mock.calls() == 100);
  CHECK(mock.max_in_flight() <= 4);
  CHECK(mock.max_in_flight() >= 1);
}

TEST_CASE("assistant prefix replay") {
  ChatRequest req = ask("write");
  req.assistant_prefix = "<topic>A</topic>\n<question>";
  SUBCASE("prefill mode sends a trailing assistant message") {
    GatewayConfig cfg;
    Gateway gw(cfg);
    const auto body = gw.request_body(req, true);
    REQUIRE(body["messages"].size() == 2);
    CHECK(body["messages"][1]["role"] == "assistant");
    CHECK(body["messages"][1]["content"] == *req.assistant_prefix);
  }
  SUBCASE("fallback mode quotes the prefix in the user turn and strips an echo") {
    MockEndpoint mock([](const RecordedRequest& r, std::size_t) {
      // an endpoint that ignores the instruction and repeats the prefix
      const auto user = r.user();
      const auto prefix = user.substr(user.rfind("\n\n") + 2);
      return text_reply({prefix.substr(0, 5), prefix.substr(5) + "Q?</question>"});
    });
    auto cfg = config_for(mock);
    cfg.prefix_mode = PrefixMode::user_continuation;
    Gateway gw(cfg);
    const auto body = gw.request_body(req, false);
    REQUIRE(body["messages"].size() == 1);
    CHECK(body["messages"][0]["content"].get<std::string>().find(kContinueInstruction) !=
          std::string::npos);
    CHECK(gw.complete(req) == "Q?</question>");
    std::string streamed;
    gw.stream(req, [&](std::string_view c) {
      streamed += c;
      return true;
    });
    CHECK(streamed == "Q?</question>");
  }
}

TEST_CASE("prefix echo stripper") {
  PrefixEchoStripper s("abc");
  CHECK(s.push("a") == "");
  CHECK(s.push("bcd") == "d");
  CHECK(s.push("e") == "e");
  PrefixEchoStripper t("abc");
  CHECK(t.push("ax") == "ax");
  PrefixEchoStripper u("abc");
  CHECK(u.push("ab") == "");
  CHECK(u.finish() == "ab");
}

TEST_CASE("configuration") {
  GatewayConfig cfg;
  cfg.retry.max_attempts = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.temperature = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.endpoint_url = "ftp://x";
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = {};
  cfg.api_key = "secret";
  const auto j = to_json(cfg);
  CHECK(j["api_key"] == "***");
  const auto back = gateway_config_from_json(j, cfg);
  CHECK(back.api_key == "secret");
  CHECK(gateway_config_from_json({{"max_in_flight", 9}}).max_in_flight == 9);

  ::setenv("CTRLGEN_ENDPOINT", "http://example.invalid:1", 1);
  ::setenv("CTRLGEN_API_KEY", "k", 1);
  cfg.apply_environment();
  CHECK(cfg.endpoint_url == "http://example.invalid:1");
  CHECK(cfg.api_key == "k");
  ::unsetenv("CTRLGEN_ENDPOINT");
  ::unsetenv("CTRLGEN_API_KEY");
}

TEST_CASE("document responder continues from a structural prefix") {
  const std::string doc =
      "<topic>T1</topic>\n<question>Q1</question>\n<span>S1</span>\n\n"
      "<topic>T2</topic>\n<question>Q2</question>\n<span>S2</span>";
  MockEndpoint mock(document_responder(doc, 3));
  Gateway gw(config_for(mock));
  CHECK(gw.complete(ask("go")) == doc);
  ChatRequest req = ask("go");
  req.assistant_prefix = "<topic>Edited heading</topic>\n<question>";
  CHECK(gw.complete(req) == "Q1</question>\n<span>S1</span>\n\n" + doc.substr(doc.find("<topic>T2")));
  req.assistant_prefix = "<topic>X</topic>\n<question>Y</question>\n<span>Z</span>\n\n<topic>";
  CHECK(gw.complete(req) == "T2</topic>\n<question>Q2</question>\n<span>S2</span>");
}

TEST_CASE("augmentation responder answers the three prompts") {
  MockEndpoint mock(augmentation_responder());
  Gateway gw(config_for(mock));
  const std::string target = "Pt admitted. CT negative!\nDischarged home";
  const auto seg_out = gw.complete(ask(guidelines::build_segmentation_prompt(target)));
  auto raw = seg::parse_xml(seg_out, ParseMode::lenient);
  CHECK(raw.segments.size() == 3);
  const auto restored = seg::restore_spans(target, raw);
  CHECK(restored.status == seg::Status::restored);
  CHECK(gw.complete(ask(guidelines::build_style_prompt(target))) == kMockStyleText);
  CHECK(gw.complete(ask(guidelines::build_instructions_prompt(target))) == kMockInstructionsText);
  CHECK(gw.complete(ask("hello")) == "OK");
}
