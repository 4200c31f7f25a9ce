#include "ctrlgen/mock_endpoint.hpp"

#include <algorithm>
#include <httplib.h>

#include <atomic>
#include <thread>

#include "ctrlgen/common.hpp"
#include "ctrlgen/llm.hpp"
#include "ctrlgen/stream_parser.hpp"

namespace ctrlgen::llm {

namespace {

using json = nlohmann::json;

json stream_frame(const std::string& text) {
  return {{"object", "chat.completion.chunk"},
          {"choices", json::array({{{"index", 0}, {"delta", {{"content", text}}}}})}};
}

json blocking_body(const std::string& text) {
  return {{"object", "chat.completion"},
          {"choices", json::array({{{"index", 0},
                                    {"message", {{"role", "assistant"}, {"content", text}}},
                                    {"finish_reason", "stop"}}})}};
}

struct ElementLayout {
  std::size_t content_begin;  // first byte after the opening tag
  std::size_t close_end;      // first byte after the closing tag
};

std::vector<ElementLayout> layout_of(const std::string& document) {
  genstream::StreamParser parser(ParseMode::strict);
  auto events = parser.feed(document);
  auto tail = parser.finish();
  events.insert(events.end(), tail.begin(), tail.end());
  std::vector<ElementLayout> out;
  std::size_t index = 0;
  for (const auto& e : events) {
    if (!genstream::is_done_event(e.kind)) continue;
    const auto& el = parser.completed()[index++];
    out.push_back({el.offset + genstream::opening_tag(el.kind).size(),
                   e.offset + genstream::closing_tag(el.kind).size()});
  }
  return out;
}

// Where in `document` a continuation of `prefix` starts.
std::size_t continuation_offset(const std::vector<ElementLayout>& layout, std::size_t doc_size,
                                const std::string& prefix) {
  if (trim(prefix).empty()) return 0;
  genstream::StreamParser parser(ParseMode::lenient);
  parser.feed(prefix);
  const std::size_t k = parser.completed().size();
  const auto state = parser.state();
  const bool in_element = state == genstream::ParserState::InTopic ||
                          state == genstream::ParserState::InQuestion ||
                          state == genstream::ParserState::InSpan;
  if (in_element) {
    if (k >= layout.size()) return doc_size;
    return std::min(doc_size, layout[k].content_begin + parser.element_buffer().size() +
                                  parser.carry_buffer().size());
  }
  if (k == 0) return 0;
  if (k > layout.size()) return doc_size;
  return layout[k - 1].close_end;
}

std::string prefix_of(const RecordedRequest& req) {
  auto prefix = req.assistant_prefix();
  if (!prefix.empty()) return prefix;
  const auto user = req.user();
  const auto pos = user.rfind(kContinueInstruction);
  if (pos == std::string::npos) return {};
  return user.substr(pos + kContinueInstruction.size() + 2);
}

std::string between_text_tags(const std::string& user, std::string_view instruction_start) {
  const auto open = user.find("<text>");
  const auto close = user.rfind("</text>\n\n" + std::string(instruction_start));
  if (open == std::string::npos || close == std::string::npos || close < open) return {};
  return user.substr(open + 6, close - open - 6);
}

}  // namespace

std::string RecordedRequest::user() const {
  if (!body.contains("messages")) return {};
  for (auto it = body["messages"].rbegin(); it != body["messages"].rend(); ++it) {
    if ((*it).value("role", "") == "user") return (*it).value("content", "");
  }
  return {};
}

std::string RecordedRequest::assistant_prefix() const {
  if (!body.contains("messages") || body["messages"].empty()) return {};
  const auto& last = body["messages"].back();
  return last.value("role", "") == "assistant" ? last.value("content", "") : std::string();
}

struct MockEndpoint::Impl {
  httplib::Server server;
  std::thread thread;
};

MockEndpoint::MockEndpoint(Responder responder)
    : impl_(std::make_unique<Impl>()), responder_(std::move(responder)) {
  auto& server = impl_->server;
  server.new_task_queue = [] { return new httplib::ThreadPool(32); };
  server.Post(R"(.*/chat/completions)", [this](const httplib::Request& hreq,
                                               httplib::Response& hres) {
    RecordedRequest req;
    try {
      req.body = json::parse(hreq.body);
    } catch (const json::parse_error&) {
      hres.status = 400;
      hres.set_content(R"({"error":"invalid json"})", "application/json");
      return;
    }
    req.streaming = req.body.value("stream", false);
    enter();
    MockReply reply;
    try {
      reply = respond(req);
    } catch (const std::exception& e) {
      reply.status = 500;
      reply.chunks = {std::string("responder failed: ") + e.what()};
    }
    if (reply.delay.count() > 0) std::this_thread::sleep_for(reply.delay);
    for (const auto& [k, v] : reply.headers) hres.set_header(k, v);
    if (reply.raw_body) {
      hres.status = reply.status;
      hres.set_content(*reply.raw_body, req.streaming ? "text/event-stream" : "application/json");
      leave();
      return;
    }
    if (reply.status != 200) {
      hres.status = reply.status;
      std::string text;
      for (const auto& c : reply.chunks) text += c;
      hres.set_content(json{{"error", text}}.dump(), "application/json");
      leave();
      return;
    }
    if (!req.streaming) {
      std::string text;
      for (const auto& c : reply.chunks) text += c;
      hres.set_content(blocking_body(text).dump(), "application/json");
      leave();
      return;
    }
    // The request stops counting as in flight before its final bytes go out,
    // so a client that has seen the end never observes it still open.
    auto state = std::make_shared<std::size_t>(0);
    auto left = std::make_shared<std::atomic<bool>>(false);
    auto leave_once = [this, left] {
      if (!left->exchange(true)) leave();
    };
    hres.set_chunked_content_provider(
        "text/event-stream",
        [reply, state, leave_once](size_t, httplib::DataSink& sink) {
          if (*state > 0 && reply.chunk_delay.count() > 0) {
            std::this_thread::sleep_for(reply.chunk_delay);
          }
          if (!sink.is_writable()) return false;
          if (*state < reply.chunks.size()) {
            const auto frame = "data: " + stream_frame(reply.chunks[*state]).dump() + "\n\n";
            ++*state;
            return sink.write(frame.data(), frame.size());
          }
          leave_once();
          if (reply.disconnect) return false;
          const std::string done = "data: [DONE]\n\n";
          sink.write(done.data(), done.size());
          sink.done();
          return true;
        },
        [leave_once](bool) { leave_once(); });
  });

  port_ = server.bind_to_any_port("127.0.0.1");
  if (port_ <= 0) throw Error("mock endpoint: cannot bind a port");
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  server.wait_until_ready();
}

MockEndpoint::~MockEndpoint() { stop(); }

void MockEndpoint::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string MockEndpoint::url() const { return "http://127.0.0.1:" + std::to_string(port_); }

void MockEndpoint::set_responder(Responder responder) {
  std::lock_guard lock(mutex_);
  responder_ = std::move(responder);
}

MockReply MockEndpoint::respond(const RecordedRequest& req) {
  Responder responder;
  std::size_t index;
  {
    std::lock_guard lock(mutex_);
    index = calls_++;
    requests_.push_back(req);
    responder = responder_;
  }
  return responder(req, index);
}

void MockEndpoint::enter() {
  std::lock_guard lock(mutex_);
  ++in_flight_;
  max_in_flight_ = std::max(max_in_flight_, in_flight_);
}

void MockEndpoint::leave() {
  std::lock_guard lock(mutex_);
  --in_flight_;
}

std::size_t MockEndpoint::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

int MockEndpoint::in_flight() const {
  std::lock_guard lock(mutex_);
  return in_flight_;
}

int MockEndpoint::max_in_flight() const {
  std::lock_guard lock(mutex_);
  return max_in_flight_;
}

std::vector<RecordedRequest> MockEndpoint::requests() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

void MockEndpoint::reset_counters() {
  std::lock_guard lock(mutex_);
  calls_ = 0;
  max_in_flight_ = in_flight_;
  requests_.clear();
}

Responder scripted(std::vector<MockReply> replies) {
  if (replies.empty()) throw Error("scripted responder needs at least one reply");
  return [replies = std::move(replies)](const RecordedRequest&, std::size_t i) {
    return replies[std::min(i, replies.size() - 1)];
  };
}

std::vector<std::string> chunk_text(const std::string& text, std::size_t size) {
  std::vector<std::string> out;
  if (size == 0) size = 1;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t end = std::min(text.size(), i + size);
    // never cut inside a UTF-8 sequence: a streamed delta is a valid string
    while (end < text.size() && (static_cast<unsigned char>(text[end]) & 0xC0) == 0x80) ++end;
    out.push_back(text.substr(i, end - i));
    i = end;
  }
  return out;
}

Responder document_responder(std::string document, std::size_t chunk_size) {
  auto layout = layout_of(document);
  return [document = std::move(document), layout = std::move(layout), chunk_size](
             const RecordedRequest& req, std::size_t) {
    const auto from = continuation_offset(layout, document.size(), prefix_of(req));
    MockReply reply;
    reply.chunks = chunk_text(document.substr(from), chunk_size);
    return reply;
  };
}

std::string sentence_segmentation(const std::string& text) {
  const auto tokens = whitespace_tokens(text);
  std::vector<std::pair<std::size_t, std::size_t>> sentences;
  std::size_t start = std::string::npos;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (start == std::string::npos) start = tokens[i].begin;
    const char last = tokens[i].text.back();
    if (last == '.' || last == '!' || last == '?' || i + 1 == tokens.size()) {
      sentences.emplace_back(start, tokens[i].end);
      start = std::string::npos;
    }
  }
  std::string out;
  for (std::size_t k = 0; k < sentences.size(); ++k) {
    const auto n = std::to_string(k + 1);
    if (k > 0) out += "\n\n";
    out += "<topic>Part " + n + "</topic>\n<question>What does part " + n +
           " report?</question>\n<span>" +
           text.substr(sentences[k].first, sentences[k].second - sentences[k].first) + "</span>";
  }
  return out;
}

Responder augmentation_responder(DocumentSource documents, std::size_t chunk_size) {
  return [documents = std::move(documents), chunk_size](const RecordedRequest& req,
                                                        std::size_t) {
    const auto user = req.user();
    MockReply reply;
    std::string text;
    if (user.find("You are tasked with fine-grained topic segmentation.") != std::string::npos) {
      text = "<split-text>\n" +
             sentence_segmentation(between_text_tags(user, "You are tasked")) + "\n</split-text>";
    } else if (user.find("Describe the text's tone") != std::string::npos) {
      text = std::string(kMockStyleText);
    } else if (user.find("writing instructions for a non-specialist") != std::string::npos) {
      text = std::string(kMockInstructionsText);
    } else if (documents) {
      const auto document = documents(user);
      const auto layout = layout_of(document);
      text = document.substr(continuation_offset(layout, document.size(), prefix_of(req)));
    } else {
      text = "OK";
    }
    reply.chunks = chunk_text(text, chunk_size);
    return reply;
  };
}

}  // namespace ctrlgen::llm
