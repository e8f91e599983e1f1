#include "forgeloop/console_api.hpp"

#include "forgeloop/loop_controller.hpp"
#include "forgeloop/util.hpp"

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <poll.h>
#include <sys/socket.h>
#include <sys/time.h>

#include <atomic>
#include <deque>
#include <iostream>
#include <regex>
#include <thread>

namespace forgeloop::console {

namespace fs = std::filesystem;
namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;
using transcript::EventKind;

SessionOverrides parse_overrides(const json &body) {
  if (body.is_null()) {
    return {};
  }
  if (!body.is_object()) {
    throw std::invalid_argument("request body must be a JSON object");
  }
  SessionOverrides o;
  for (const auto &[key, value] : body.items()) {
    if (key == "max_steps" || key == "history_window") {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw std::invalid_argument(key + " must be a non-negative integer");
      }
      const auto n = value.get<std::size_t>();
      if (key == "max_steps") {
        if (n == 0) {
          throw std::invalid_argument("max_steps must be positive");
        }
        o.max_steps = n;
      } else {
        o.history_window = n;
      }
    } else if (key == "model" || key == "script" || key == "session_id") {
      if (!value.is_string() || value.get<std::string>().empty()) {
        throw std::invalid_argument(key + " must be a non-empty string");
      }
      const auto s = value.get<std::string>();
      if (key == "model") {
        o.model_id = s;
      } else if (key == "script") {
        o.script = fs::path(s);
      } else {
        static const std::regex kId("[A-Za-z0-9_-]{1,64}");
        if (!std::regex_match(s, kId)) {
          throw std::invalid_argument("session_id may only use letters, digits, '-' and '_'");
        }
        o.session_id = s;
      }
    } else {
      throw std::invalid_argument("unknown override '" + key + "'");
    }
  }
  return o;
}

bool is_loopback(std::string_view address) {
  if (address == "localhost" || address == "::1") {
    return true;
  }
  boost::system::error_code ec;
  const auto addr = asio::ip::make_address(std::string(address), ec);
  return !ec && addr.is_loopback();
}

json summarize(const std::vector<transcript::TranscriptEvent> &events) {
  const auto state = transcript::reconstruct(events, {}, true);
  json j;
  j["session_id"] = state.session_id;
  j["status"] = to_string(state.status);
  j["pause_reason"] = state.pause_reason ? json(to_string(*state.pause_reason)) : json(nullptr);
  j["task"] = state.task ? json(*state.task) : json(nullptr);
  j["step_index"] = state.step_index;
  j["max_steps"] = state.max_steps;
  j["created_at"] = nullptr;
  j["last_seq"] = events.empty() ? json(nullptr) : json(events.back().seq);
  if (state.status == Status::Failed) {
    j["failure_cause"] = state.failure_cause;
  }
  std::map<std::string, std::string> open;
  std::string latest;
  for (const auto &e : events) {
    if (e.kind == EventKind::SessionCreated) {
      j["created_at"] = e.payload.value("created_at", std::string());
    } else if (e.kind == EventKind::ApprovalRequested) {
      latest = e.payload.value("exec_id", std::string());
      open[latest] = e.payload.value("command", std::string());
    } else if (e.kind == EventKind::ApprovalResolved) {
      open.erase(e.payload.value("exec_id", std::string()));
    }
  }
  const auto it = open.find(latest);
  j["pending_approval"] =
      it == open.end() ? json(nullptr) : json{{"exec_id", it->first}, {"command", it->second}};
  return j;
}

void ConsoleApproval::announce(const exec::CommandRequest &request) {
  std::lock_guard lock(mutex_);
  pending_[request.exec_id()] = std::nullopt;
}

exec::ApprovalDecision ConsoleApproval::decide(const exec::CommandRequest &request) {
  const auto id = request.exec_id();
  std::unique_lock lock(mutex_);
  pending_.try_emplace(id, std::nullopt);
  cv_.wait_for(lock, timeout_, [&] { return shutdown_ || pending_[id].has_value(); });
  const auto decision = pending_[id].value_or(exec::ApprovalDecision::TimedOut);
  pending_.erase(id);
  resolved_.insert(id);
  return decision;
}

ConsoleApproval::Resolution ConsoleApproval::resolve(const std::string &exec_id, exec::ApprovalDecision decision) {
  std::lock_guard lock(mutex_);
  if (resolved_.count(exec_id)) {
    return Resolution::AlreadyResolved;
  }
  const auto it = pending_.find(exec_id);
  if (it == pending_.end()) {
    return Resolution::NotFound;
  }
  if (it->second) {
    return Resolution::AlreadyResolved;
  }
  it->second = decision;
  cv_.notify_all();
  return Resolution::Delivered;
}

void ConsoleApproval::shutdown() {
  std::lock_guard lock(mutex_);
  shutdown_ = true;
  cv_.notify_all();
}

namespace {

struct Mail {
  enum class Kind { Input, Close } kind = Kind::Input;
  std::string text;
};

HttpReply json_reply(int status, const json &body) {
  return {status, body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json"};
}

HttpReply error_reply(int status, const std::string &message) { return json_reply(status, {{"error", message}}); }

std::vector<std::string> split_path(std::string_view path) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (pos < path.size()) {
    const auto next = path.find('/', pos);
    const auto end = next == std::string_view::npos ? path.size() : next;
    if (end > pos) {
      parts.emplace_back(path.substr(pos, end - pos));
    }
    pos = end + 1;
  }
  return parts;
}

std::map<std::string, std::string> parse_query(std::string_view query) {
  std::map<std::string, std::string> out;
  std::size_t pos = 0;
  while (pos <= query.size()) {
    const auto amp = query.find('&', pos);
    const auto item = query.substr(pos, amp == std::string_view::npos ? std::string_view::npos : amp - pos);
    if (!item.empty()) {
      const auto eq = item.find('=');
      out[std::string(item.substr(0, eq))] = eq == std::string_view::npos ? "" : std::string(item.substr(eq + 1));
    }
    if (amp == std::string_view::npos) {
      break;
    }
    pos = amp + 1;
  }
  return out;
}

std::string mime_type(const fs::path &path) {
  const auto ext = path.extension().string();
  if (ext == ".html" || ext == ".htm") {
    return "text/html";
  }
  if (ext == ".js" || ext == ".mjs") {
    return "application/javascript";
  }
  if (ext == ".css") {
    return "text/css";
  }
  if (ext == ".json") {
    return "application/json";
  }
  if (ext == ".svg") {
    return "image/svg+xml";
  }
  if (ext == ".png") {
    return "image/png";
  }
  return "application/octet-stream";
}

} // namespace

struct SessionHost {
  std::string id;
  fs::path dir;
  std::unique_ptr<llm::ModelBackend> backend;
  std::unique_ptr<exec::Executor> executor;
  std::unique_ptr<ConsoleApproval> approval;
  std::unique_ptr<loop::Session> session; // null: transcript only
  std::shared_ptr<transcript::Transcript> log;
  std::string read_only_reason;

  std::mutex mutex;
  std::condition_variable cv;
  std::deque<Mail> mailbox;
  bool busy = false;
  bool stopping = false;
  std::thread worker;

  void run() {
    for (;;) {
      std::unique_lock lock(mutex);
      cv.wait(lock, [&] { return stopping || !mailbox.empty(); });
      if (mailbox.empty()) {
        return;
      }
      const auto mail = std::move(mailbox.front());
      mailbox.pop_front();
      lock.unlock();
      try {
        if (mail.kind == Mail::Kind::Input) {
          session->submit_task(mail.text);
          session->run_until_pause();
        } else {
          session->close();
          approval->shutdown();
        }
      } catch (const std::exception &e) {
        std::cerr << "session " << id << ": " << e.what() << "\n";
      }
      lock.lock();
      busy = !mailbox.empty();
    }
  }

  void halt() {
    {
      std::lock_guard lock(mutex);
      stopping = true;
      if (session) {
        session->request_stop();
      }
    }
    if (approval) {
      approval->shutdown();
    }
    cv.notify_all();
    if (worker.joinable()) {
      worker.join();
    }
    if (session) {
      try {
        session->interrupt();
      } catch (const std::exception &e) {
        std::cerr << "session " << id << ": " << e.what() << "\n";
      }
    }
  }
};

struct ConsoleServer::Impl {
  ConsoleOptions options;
  asio::io_context io;
  std::unique_ptr<tcp::acceptor> acceptor;
  std::thread accept_thread;
  std::atomic<bool> running{false};
  std::atomic<bool> stopping{false};
  int bound_port = 0;

  mutable std::mutex sessions_mutex;
  std::map<std::string, std::shared_ptr<SessionHost>> sessions;
  std::size_t next_id = 1;

  std::mutex conn_mutex;
  std::condition_variable conn_cv;
  std::set<int> open_fds;
  std::size_t active_connections = 0;

  explicit Impl(ConsoleOptions o) : options(std::move(o)) {}

  std::shared_ptr<SessionHost> find(const std::string &id) const {
    std::lock_guard lock(sessions_mutex);
    const auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }

  loop::LoopDeps deps_for(SessionHost &host, const SessionOverrides &o) {
    loop::LoopDeps deps;
    deps.model = host.backend.get();
    deps.executor = host.executor.get();
    deps.approval = host.approval.get();
    deps.policy = exec::Policy(options.runtime.policy);
    deps.templates = options.templates;
    deps.env_facts = options.env_facts;
    deps.history_window = o.history_window.value_or(options.runtime.history_window);
    deps.model_id = o.model_id.value_or(options.runtime.model_id);
    deps.secrets = options.secrets;
    return deps;
  }

  std::shared_ptr<SessionHost> make_host(const std::string &id, const SessionOverrides &o) {
    auto host = std::make_shared<SessionHost>();
    host->id = id;
    host->dir = fs::absolute(options.session_root / id);
    host->backend = options.backend_factory(o);
    host->executor = std::make_unique<exec::Executor>(options.executor);
    host->approval = std::make_unique<ConsoleApproval>(options.approval_timeout);
    return host;
  }

  void start_worker(const std::shared_ptr<SessionHost> &host) {
    host->worker = std::thread([h = host.get()] { h->run(); });
  }

  void restore_existing() {
    std::error_code ec;
    if (!fs::is_directory(options.session_root, ec)) {
      return;
    }
    for (const auto &entry : fs::directory_iterator(options.session_root, ec)) {
      const auto file = entry.path() / loop::kTranscriptFile;
      if (!entry.is_directory() || !fs::is_regular_file(file)) {
        continue;
      }
      const auto id = entry.path().filename().string();
      std::shared_ptr<SessionHost> host;
      try {
        host = make_host(id, {});
        host->session = loop::Session::restore(host->dir, deps_for(*host, {}), options.durability);
        host->session->interrupt();
        host->log = host->session->log();
        start_worker(host);
      } catch (const std::exception &e) {
        host = std::make_shared<SessionHost>();
        host->id = id;
        host->dir = fs::absolute(entry.path());
        host->read_only_reason = e.what();
        try {
          host->log = transcript::Transcript::open(file, options.durability);
        } catch (const std::exception &) {
          continue;
        }
      }
      sessions[id] = host;
    }
  }

  std::string allocate_id() {
    for (;;) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "s%04zu", next_id++);
      if (!sessions.count(buf) && !fs::exists(options.session_root / buf)) {
        return buf;
      }
    }
  }

  HttpReply create_session(std::string_view body) {
    SessionOverrides o;
    try {
      o = parse_overrides(body.empty() ? json(nullptr) : json::parse(body));
    } catch (const json::parse_error &) {
      return error_reply(400, "request body is not JSON");
    } catch (const std::exception &e) {
      return error_reply(400, e.what());
    }
    std::lock_guard lock(sessions_mutex);
    std::string id;
    if (o.session_id) {
      if (sessions.count(*o.session_id) || fs::exists(options.session_root / *o.session_id)) {
        return error_reply(409, "session '" + *o.session_id + "' already exists");
      }
      id = *o.session_id;
    } else {
      id = allocate_id();
    }
    std::shared_ptr<SessionHost> host;
    try {
      host = make_host(id, o);
      loop::SessionOptions so;
      so.session_id = id;
      so.session_dir = host->dir;
      so.max_steps = o.max_steps.value_or(options.runtime.max_steps);
      so.durability = options.durability;
      host->session = loop::Session::create(so, deps_for(*host, o));
      host->log = host->session->log();
    } catch (const StorageFailure &e) {
      return error_reply(500, e.what());
    } catch (const std::exception &e) {
      return error_reply(400, e.what());
    }
    start_worker(host);
    sessions[id] = host;
    return json_reply(201, summarize(host->log->snapshot()));
  }

  HttpReply submit_input(SessionHost &host, std::string_view body) {
    std::string text;
    try {
      const auto j = json::parse(body);
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        return error_reply(400, "body must be {\"text\": string}");
      }
      text = j["text"].get<std::string>();
    } catch (const json::parse_error &) {
      return error_reply(400, "request body is not JSON");
    }
    if (util::is_blank(text)) {
      return error_reply(422, "input text must not be blank");
    }
    {
      std::lock_guard lock(host.mutex);
      if (!host.session) {
        return error_reply(409, "session is read-only: " + host.read_only_reason);
      }
      if (host.busy || host.stopping) {
        return error_reply(409, "session is busy");
      }
      if (!host.session->state().accepts_input()) {
        return error_reply(409, "session cannot take input while " +
                                    std::string(to_string(host.session->state().status)));
      }
      host.busy = true;
      host.mailbox.push_back({Mail::Kind::Input, std::move(text)});
    }
    host.cv.notify_all();
    return json_reply(202, summarize(host.log->snapshot()));
  }

  HttpReply resolve_approval(SessionHost &host, const std::string &exec_id, std::string_view body) {
    exec::ApprovalDecision decision;
    try {
      const auto j = json::parse(body);
      const auto name = j.is_object() ? j.value("decision", std::string()) : std::string();
      if (name == "approve") {
        decision = exec::ApprovalDecision::Approve;
      } else if (name == "deny") {
        decision = exec::ApprovalDecision::Deny;
      } else {
        return error_reply(400, "decision must be \"approve\" or \"deny\"");
      }
    } catch (const json::parse_error &) {
      return error_reply(400, "request body is not JSON");
    }
    if (!host.approval) {
      return error_reply(404, "no pending approval " + exec_id);
    }
    switch (host.approval->resolve(exec_id, decision)) {
    case ConsoleApproval::Resolution::Delivered:
      return {204, "", "application/json"};
    case ConsoleApproval::Resolution::AlreadyResolved:
      return error_reply(409, "approval " + exec_id + " was already resolved");
    case ConsoleApproval::Resolution::NotFound:
      break;
    }
    return error_reply(404, "no pending approval " + exec_id);
  }

  HttpReply close_session(SessionHost &host) {
    {
      std::lock_guard lock(host.mutex);
      if (!host.session) {
        return error_reply(409, "session is read-only: " + host.read_only_reason);
      }
      if (host.log->closed()) {
        return json_reply(200, summarize(host.log->snapshot()));
      }
      host.session->request_stop();
      host.busy = true;
      host.mailbox.push_back({Mail::Kind::Close, {}});
    }
    host.approval->shutdown();
    host.cv.notify_all();
    return json_reply(202, summarize(host.log->snapshot()));
  }

  HttpReply serve_static(std::string_view path) {
    if (!options.static_dir) {
      return error_reply(404, "not found");
    }
    fs::path rel = path == "/" ? fs::path("index.html") : fs::path(std::string(path.substr(1)));
    for (const auto &part : rel) {
      if (part == "..") {
        return error_reply(404, "not found");
      }
    }
    const auto file = *options.static_dir / rel;
    const auto text = util::read_file(file);
    if (!text || !fs::is_regular_file(file)) {
      return error_reply(404, "not found");
    }
    return {200, *text, mime_type(file)};
  }

  bool authorized(std::string_view authorization, const std::map<std::string, std::string> &query) const {
    if (!options.bearer_token) {
      return true;
    }
    if (authorization == "Bearer " + *options.bearer_token) {
      return true;
    }
    const auto it = query.find("token");
    return it != query.end() && it->second == *options.bearer_token;
  }

  HttpReply handle(std::string_view method, std::string_view target, std::string_view body,
                   std::string_view authorization) {
    const auto qpos = target.find('?');
    const auto path = target.substr(0, qpos);
    const auto query = parse_query(qpos == std::string_view::npos ? std::string_view() : target.substr(qpos + 1));
    if (!authorized(authorization, query)) {
      return error_reply(401, "missing or wrong bearer token");
    }
    const auto parts = split_path(path);
    if (parts.size() == 1 && parts[0] == "health") {
      if (method != "GET") {
        return error_reply(405, "method not allowed");
      }
      return json_reply(200, {{"status", "ok"}});
    }
    if (parts.empty() || parts[0] != "sessions") {
      if (method == "GET") {
        return serve_static(path);
      }
      return error_reply(404, "not found");
    }
    if (parts.size() == 1) {
      if (method == "GET") {
        std::vector<std::shared_ptr<SessionHost>> hosts;
        {
          std::lock_guard lock(sessions_mutex);
          for (const auto &[id, h] : sessions) {
            hosts.push_back(h);
          }
        }
        json list = json::array();
        for (const auto &h : hosts) {
          list.push_back(summarize(h->log->snapshot()));
        }
        return json_reply(200, list);
      }
      if (method == "POST") {
        return create_session(body);
      }
      return error_reply(405, "method not allowed");
    }
    const auto host = find(parts[1]);
    if (!host) {
      return error_reply(404, "unknown session " + parts[1]);
    }
    if (parts.size() == 2) {
      if (method != "GET") {
        return error_reply(405, "method not allowed");
      }
      return json_reply(200, summarize(host->log->snapshot()));
    }
    if (parts.size() == 3 && parts[2] == "input" && method == "POST") {
      return submit_input(*host, body);
    }
    if (parts.size() == 3 && parts[2] == "close" && method == "POST") {
      return close_session(*host);
    }
    if (parts.size() == 4 && parts[2] == "approvals" && method == "POST") {
      return resolve_approval(*host, parts[3], body);
    }
    if (parts.size() == 3 && parts[2] == "events") {
      return error_reply(426, "events are served over WebSocket");
    }
    return error_reply(404, "not found");
  }

  void stream_events(tcp::socket socket, const http::request<http::string_body> &req) {
    const auto target = std::string_view(req.target().data(), req.target().size());
    const auto qpos = target.find('?');
    const auto parts = split_path(target.substr(0, qpos));
    const auto query = parse_query(qpos == std::string_view::npos ? std::string_view() : target.substr(qpos + 1));
    const auto auth = req[http::field::authorization];

    beast::error_code ec;
    auto reject = [&](http::status status, const std::string &message) {
      http::response<http::string_body> res{status, req.version()};
      res.set(http::field::content_type, "application/json");
      res.body() = json{{"error", message}}.dump();
      res.prepare_payload();
      http::write(socket, res, ec);
    };
    if (!authorized(std::string_view(auth.data(), auth.size()), query)) {
      reject(http::status::unauthorized, "missing or wrong bearer token");
      return;
    }
    if (parts.size() != 3 || parts[0] != "sessions" || parts[2] != "events") {
      reject(http::status::not_found, "not found");
      return;
    }
    std::uint64_t next = 0;
    if (const auto it = query.find("from"); it != query.end()) {
      try {
        std::size_t used = 0;
        next = std::stoull(it->second, &used);
        if (used != it->second.size()) {
          throw std::invalid_argument("trailing characters");
        }
      } catch (const std::exception &) {
        reject(http::status::bad_request, "from must be a non-negative integer");
        return;
      }
    }

    websocket::stream<tcp::socket> ws(std::move(socket));
    ws.accept(req, ec);
    if (ec) {
      return;
    }
    ws.text(true);
    const auto host = find(parts[1]);
    if (!host) {
      ws.write(asio::buffer(json{{"error", "unknown session"}, {"session_id", parts[1]}}.dump()), ec);
      ws.close(websocket::close_reason(websocket::close_code::policy_error, "unknown session"), ec);
      return;
    }
    const int fd = ws.next_layer().native_handle();
    while (!stopping) {
      const auto events = host->log->snapshot(next);
      for (const auto &e : events) {
        ws.write(asio::buffer(transcript::to_line(e)), ec);
        if (ec) {
          return;
        }
        next = e.seq + 1;
      }
      if (events.empty()) {
        if (host->log->closed()) {
          ws.close(websocket::close_reason(websocket::close_code::normal, "session closed"), ec);
          return;
        }
        // Any frame from the client (usually its close) ends the stream.
        pollfd p{fd, POLLIN, 0};
        if (::poll(&p, 1, 0) > 0) {
          beast::flat_buffer scratch;
          ws.read(scratch, ec);
          if (ec) {
            return;
          }
        }
        host->log->wait_for(next, std::chrono::milliseconds(200));
      }
    }
    ws.close(websocket::close_reason(websocket::close_code::going_away, "server stopping"), ec);
  }

  void serve_connection(tcp::socket socket) {
    beast::error_code ec;
    beast::flat_buffer buffer;
    for (;;) {
      http::request<http::string_body> req;
      http::read(socket, buffer, req, ec);
      if (ec) {
        break;
      }
      if (websocket::is_upgrade(req)) {
        stream_events(std::move(socket), req);
        return;
      }
      const auto auth = req[http::field::authorization];
      const auto reply = handle(std::string_view(req.method_string().data(), req.method_string().size()),
                                std::string_view(req.target().data(), req.target().size()), req.body(),
                                std::string_view(auth.data(), auth.size()));
      http::response<http::string_body> res{static_cast<http::status>(reply.status), req.version()};
      res.set(http::field::server, "forgeloop");
      if (reply.status != 204) {
        res.set(http::field::content_type, reply.content_type);
        res.body() = reply.body;
      }
      res.keep_alive(req.keep_alive());
      res.prepare_payload();
      http::write(socket, res, ec);
      if (ec || !req.keep_alive()) {
        break;
      }
    }
    socket.shutdown(tcp::socket::shutdown_send, ec);
  }

  void accept_loop() {
    for (;;) {
      tcp::socket socket(io);
      beast::error_code ec;
      acceptor->accept(socket, ec);
      if (stopping) {
        return;
      }
      if (ec) {
        continue;
      }
      const int fd = socket.native_handle();
      timeval tv{};
      tv.tv_sec = options.stream_send_timeout.count() / 1000;
      tv.tv_usec = static_cast<suseconds_t>((options.stream_send_timeout.count() % 1000) * 1000);
      ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
      {
        std::lock_guard lock(conn_mutex);
        open_fds.insert(fd);
        ++active_connections;
      }
      std::thread([this, fd, s = std::move(socket)]() mutable {
        try {
          serve_connection(std::move(s));
        } catch (const std::exception &e) {
          std::cerr << "console connection: " << e.what() << "\n";
        }
        std::lock_guard lock(conn_mutex);
        open_fds.erase(fd);
        --active_connections;
        conn_cv.notify_all();
      }).detach();
    }
  }
};

ConsoleServer::ConsoleServer(ConsoleOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

ConsoleServer::~ConsoleServer() { stop(); }

void ConsoleServer::start() {
  auto &im = *impl_;
  if (im.running) {
    return;
  }
  if (!is_loopback(im.options.bind_address) && !im.options.bearer_token) {
    throw std::invalid_argument("binding " + im.options.bind_address + " requires a bearer token");
  }
  if (!im.options.backend_factory) {
    throw std::invalid_argument("console needs a backend factory");
  }
  {
    std::lock_guard lock(im.sessions_mutex);
    im.restore_existing();
  }
  boost::system::error_code ec;
  const auto address =
      asio::ip::make_address(im.options.bind_address == "localhost" ? "127.0.0.1" : im.options.bind_address, ec);
  if (ec) {
    throw std::invalid_argument("bad bind address " + im.options.bind_address);
  }
  auto acceptor = std::make_unique<tcp::acceptor>(im.io);
  const tcp::endpoint endpoint(address, static_cast<unsigned short>(im.options.port));
  acceptor->open(endpoint.protocol(), ec);
  if (!ec) {
    acceptor->set_option(asio::socket_base::reuse_address(true), ec);
    acceptor->bind(endpoint, ec);
  }
  if (ec) {
    throw PortInUse(im.options.port);
  }
  acceptor->listen(asio::socket_base::max_listen_connections, ec);
  if (ec) {
    throw PortInUse(im.options.port);
  }
  im.bound_port = acceptor->local_endpoint().port();
  im.acceptor = std::move(acceptor);
  im.stopping = false;
  im.running = true;
  im.accept_thread = std::thread([&im] { im.accept_loop(); });
}

void ConsoleServer::stop() {
  auto &im = *impl_;
  if (!im.running.exchange(false)) {
    // Restored sessions may have workers even if the server never bound.
    std::lock_guard lock(im.sessions_mutex);
    for (auto &[id, host] : im.sessions) {
      host->halt();
    }
    im.sessions.clear();
    return;
  }
  im.stopping = true;
  ::shutdown(im.acceptor->native_handle(), SHUT_RDWR);
  if (im.accept_thread.joinable()) {
    im.accept_thread.join();
  }
  boost::system::error_code ec;
  im.acceptor->close(ec);

  std::vector<std::shared_ptr<SessionHost>> hosts;
  {
    std::lock_guard lock(im.sessions_mutex);
    for (auto &[id, host] : im.sessions) {
      hosts.push_back(host);
    }
  }
  for (auto &host : hosts) {
    host->halt();
  }
  {
    std::unique_lock lock(im.conn_mutex);
    for (int fd : im.open_fds) {
      ::shutdown(fd, SHUT_RDWR);
    }
    im.conn_cv.wait(lock, [&] { return im.active_connections == 0; });
  }
  std::lock_guard lock(im.sessions_mutex);
  im.sessions.clear();
}

bool ConsoleServer::running() const { return impl_->running; }

int ConsoleServer::port() const { return impl_->bound_port; }

std::string ConsoleServer::url() const {
  const auto &addr = impl_->options.bind_address;
  const auto host = addr.find(':') != std::string::npos ? "[" + addr + "]" : addr;
  return "http://" + host + ":" + std::to_string(impl_->bound_port) + "/";
}

HttpReply ConsoleServer::handle(std::string_view method, std::string_view target, std::string_view body,
                                std::string_view authorization) {
  return impl_->handle(method, target, body, authorization);
}

std::vector<std::string> ConsoleServer::session_ids() const {
  std::lock_guard lock(impl_->sessions_mutex);
  std::vector<std::string> ids;
  for (const auto &[id, host] : impl_->sessions) {
    ids.push_back(id);
  }
  return ids;
}

std::shared_ptr<transcript::Transcript> ConsoleServer::transcript_of(const std::string &session_id) const {
  const auto host = impl_->find(session_id);
  return host ? host->log : nullptr;
}

} // namespace forgeloop::console
