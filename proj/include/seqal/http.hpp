// Copyright 2026 The seqal Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// HTTP/JSON routes for the annotation service.

#pragma once

#include <filesystem>
#include <optional>
#include <string>

// Eigen must come first: glibc's <resolv.h>, pulled in by httplib, defines a
// `_res` macro that collides with Eigen parameter names.
#include "seqal/service.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace seqal::service {

namespace detail {

inline void reply(httplib::Response& res, const ApiResponse& api) {
  res.status = api.status;
  if (api.text) res.set_content(*api.text, api.content_type);
  else res.set_content(api.body.dump(), "application/json");
}

inline std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
  try {
    return req.body.empty() ? json::object() : json::parse(req.body);
  } catch (const json::parse_error& e) {
    reply(res, error_response(400, std::string("malformed JSON: ") + e.what()));
    return std::nullopt;
  }
}

inline bool wants_csv(const httplib::Request& req) {
  if (req.has_param("format")) return req.get_param_value("format") == "csv";
  return req.get_header_value("Accept").find("text/csv") != std::string::npos;
}

inline constexpr const char* kNoUiPage =
    "<!doctype html><title>seqal</title><p>seqal annotation service. The annotator UI "
    "assets are not installed; start the server with --ui-dir to serve them. API: "
    "POST /sessions, POST /sessions/{id}/query, POST /sessions/{id}/annotations, "
    "GET /sessions/{id}/state, GET /sessions/{id}/curve.</p>";

}  // namespace detail

/// Registers the API on `server`. Static UI files are served from `ui_dir`
/// at "/" when given.
inline void mount_routes(httplib::Server& server, SessionManager& sessions,
                         const std::optional<std::filesystem::path>& ui_dir = std::nullopt) {
  using detail::reply;
  server.Post("/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    if (auto body = detail::parse_body(req, res)) reply(res, sessions.create_session(*body));
  });
  server.Get("/sessions", [&](const httplib::Request&, httplib::Response& res) {
    reply(res, {200, {{"sessions", sessions.session_ids()}}});
  });
  server.Post("/sessions/:id/query", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, sessions.query_batch(req.path_params.at("id")));
  });
  server.Post("/sessions/:id/annotations", [&](const httplib::Request& req, httplib::Response& res) {
    if (auto body = detail::parse_body(req, res))
      reply(res, sessions.submit_annotations(req.path_params.at("id"), *body));
  });
  server.Get("/sessions/:id/state", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, sessions.get_state(req.path_params.at("id")));
  });
  server.Get("/sessions/:id/curve", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, sessions.get_curve(req.path_params.at("id"), detail::wants_csv(req)));
  });

  if (ui_dir && std::filesystem::is_directory(*ui_dir)) {
    server.set_mount_point("/", ui_dir->string());
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(detail::kNoUiPage, "text/html");
    });
  }
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    reply(res, error_response(500, what));
  });
}

}  // namespace seqal::service
