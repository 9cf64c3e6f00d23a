#pragma once

#include <cstdlib>
#include <string>

// Eigen first: httplib pulls in <resolv.h>, whose `_res` macro breaks Eigen's product kernels.
#include "ras/service/cohort_service.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace ras::service {

inline constexpr int kDefaultPort = 8080;

/// Port from the flag when given, else RAS_PORT, else 8080.
inline int resolve_port(std::optional<int> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("RAS_PORT"); env && *env) {
    char* end = nullptr;
    const long p = std::strtol(env, &end, 10);
    if (*end != '\0' || p < 0 || p > 65535) throw std::invalid_argument(std::string("RAS_PORT is not a port: ") + env);
    return static_cast<int>(p);
  }
  return kDefaultPort;
}

namespace detail {

inline void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    send(res, 200, f());
  } catch (const ServiceError& e) {
    send(res, e.status, e.body());
  } catch (const json::exception& e) {
    send(res, 400, {{"code", "bad_request"}, {"message", e.what()}});
  } catch (const std::exception& e) {
    send(res, 500, {{"code", "internal"}, {"message", e.what()}});
  }
}

inline json parse_body(const httplib::Request& req) {
  json j;
  try {
    j = json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ServiceError(400, "bad_json", std::string("request body is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
  return j;
}

inline double number_field(const json& j, const char* key) {
  if (!j.contains(key)) throw ServiceError(400, "bad_request", std::string("missing field '") + key + "'");
  const auto& v = j.at(key);
  if (!v.is_number()) throw ServiceError(422, std::string("invalid_") + key, std::string("'") + key + "' must be a number");
  return v.get<double>();
}

inline double query_number(const httplib::Request& req, const std::string& key) {
  if (!req.has_param(key)) throw ServiceError(422, "invalid_" + key, "query parameter '" + key + "' is required");
  const std::string s = req.get_param_value(key);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ServiceError(422, "invalid_" + key, "'" + key + "' is not a number: " + s);
  return v;
}

}  // namespace detail

/// Registers every endpoint of `svc` on `server`. `origin` is sent as the
/// Access-Control-Allow-Origin value.
inline void install_routes(httplib::Server& server, CohortService& svc, const std::string& origin = "*") {
  using detail::guarded;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/patients", [&](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return svc.patients(); });
  });
  server.Get(R"(/patients/([^/]+)/trajectory)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return svc.trajectory(req.matches[1]); });
  });
  server.Get(R"(/patients/([^/]+)/recommendations)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const double hour = detail::query_number(req, "hour");
      std::optional<long long> top;
      if (req.has_param("top")) {
        const double t = detail::query_number(req, "top");
        if (t != std::floor(t)) throw ServiceError(422, "invalid_top", "top must be an integer");
        top = static_cast<long long>(t);
      }
      return svc.recommendations(req.matches[1], hour, top);
    });
  });
  server.Post(R"(/patients/([^/]+)/whatif)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = detail::parse_body(req);
      const double hour = detail::number_field(body, "hour");
      std::vector<std::string> selected;
      if (body.contains("selected")) {
        const auto& s = body.at("selected");
        if (!s.is_array()) throw ServiceError(422, "invalid_selected", "'selected' must be a list of variable names");
        for (const auto& v : s) {
          if (!v.is_string()) throw ServiceError(422, "invalid_selected", "'selected' must hold strings");
          selected.push_back(v.get<std::string>());
        }
      }
      return svc.whatif(req.matches[1], hour, selected);
    });
  });
  server.Post(R"(/patients/([^/]+)/observe)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = detail::parse_body(req);
      Observation o;
      o.patient = req.matches[1];
      o.hour = detail::number_field(body, "hour");
      if (!body.contains("variable") || !body.at("variable").is_string()) {
        throw ServiceError(400, "bad_request", "'variable' must be a string");
      }
      o.variable = body.at("variable").get<std::string>();
      // JSON has no NaN or infinity literals; accept them as strings so they can be rejected as values.
      if (body.contains("value") && body.at("value").is_string()) {
        const std::string v = body.at("value").get<std::string>();
        try {
          o.value = std::stod(v);
        } catch (const std::exception&) {
          throw ServiceError(422, "invalid_value", "value is not a number: " + v);
        }
      } else {
        o.value = detail::number_field(body, "value");
      }
      return svc.observe(o);
    });
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      detail::send(res, res.status, {{"code", res.status == 404 ? "not_found" : "http_error"},
                                     {"message", httplib::status_message(res.status)}});
    }
  });
}

}  // namespace ras::service
