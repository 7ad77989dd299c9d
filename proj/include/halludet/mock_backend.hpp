#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"

namespace httplib {
class Server;
}

namespace halludet {

// Planted-label markers appended to synthetic hyp texts.
inline constexpr std::string_view kPlantedHallucination = "\xE2\x9F\xA6H\xE2\x9F\xA7";     // ⟦H⟧
inline constexpr std::string_view kPlantedNotHallucination = "\xE2\x9F\xA6N\xE2\x9F\xA7";  // ⟦N⟧

std::string_view planted_marker(Label l);
// Label of the last planted marker in `text` (the target block of a prompt).
std::optional<Label> find_planted_label(std::string_view text);
std::string strip_planted_markers(std::string_view text);

struct FixtureAnswer {
  std::string text;
  std::optional<double> lp_yes;
  std::optional<double> lp_no;
};

struct MockRule {
  enum class Mode { fixture, oracle };
  Mode mode = Mode::oracle;
  std::map<std::string, FixtureAnswer> fixtures;  // sha256 hex of the prompt -> answer
  double oracle_accuracy = 1.0;
  std::uint64_t oracle_seed = 0;

  void validate() const;
};

std::map<std::string, FixtureAnswer> parse_fixtures(const nlohmann::json& doc);
std::map<std::string, FixtureAnswer> load_fixtures(const std::filesystem::path& path);

// Key under which a prompt is stored in a fixture map.
std::string prompt_hash(std::string_view prompt);

// The answer the mock gives for one chat request body. Exposed for tests;
// returns the HTTP status and the JSON payload.
std::pair<int, nlohmann::json> mock_respond(const MockRule& rule, const nlohmann::json& request);

class MockServer {
 public:
  MockServer(MockRule rule, std::chrono::milliseconds delay = std::chrono::milliseconds(0));
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  // Port 0 picks a free port. Returns once the server accepts connections.
  void start(const std::string& host = "127.0.0.1", int port = 0);
  void stop();
  // Blocks until stop() is called from another thread or a signal handler.
  void wait();

  int port() const { return port_; }
  std::string base_url() const;
  std::size_t request_count() const { return requests_.load(); }

 private:
  MockRule rule_;
  std::chrono::milliseconds delay_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::string host_;
  int port_ = 0;
  std::atomic<std::size_t> requests_{0};
};

}  // namespace halludet
