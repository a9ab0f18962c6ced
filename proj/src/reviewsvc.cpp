#include "usersod/reviewsvc.hpp"

#include <chrono>
#include <ctime>

#include <spdlog/spdlog.h>

#include "httplib.h"

#include "usersod/image_io.hpp"

namespace usersod::review {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
}

json summary(const dig::ProposedSample& s) {
    const auto& b = s.detected.bbox;
    return {{"id", s.id},
            {"scene_id", s.scene_id},
            {"object_index", s.object_index},
            {"label", s.detected.label},
            {"confidence", s.detected.confidence},
            {"source_detector", s.detected.source_detector},
            {"bbox", {b.x_min, b.y_min, b.x_max, b.y_max}},
            {"commands", s.commands},
            {"status", dig::to_string(s.status)},
            {"provenance", to_string(s.provenance)},
            {"note", s.note}};
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

int int_param(const httplib::Request& req, const std::string& key, int fallback) {
    if (!req.has_param(key)) return fallback;
    const auto v = req.get_param_value(key);
    try {
        size_t used = 0;
        const int n = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw dig::ValidationError(key + " must be an integer");
    }
}

int path_id(const httplib::Request& req) {
    try {
        return std::stoi(req.matches[1].str());
    } catch (const std::exception&) {
        throw dig::NotFoundError("bad sample id");
    }
}

// Maps queue errors onto HTTP statuses.
template <class F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const dig::NotFoundError& e) {
        send_error(res, 404, e.what());
    } catch (const dig::ValidationError& e) {
        send_error(res, 400, e.what());
    } catch (const std::exception& e) {
        spdlog::error("review service: {}", e.what());
        send_error(res, 500, e.what());
    }
}

} // namespace

ReviewService::ReviewService(dig::CorrectionQueue& queue, std::optional<std::filesystem::path> static_dir)
    : queue_(queue), server_(std::make_unique<httplib::Server>()) {
    routes();
    if (static_dir) {
        if (!server_->set_mount_point("/", static_dir->string()))
            throw IoError("static directory " + static_dir->string() + " does not exist");
    }
}

ReviewService::~ReviewService() { stop(); }

void ReviewService::routes() {
    auto& s = *server_;
    s.Get("/api/queue", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto page = queue_.list_pending(int_param(req, "page", 1), int_param(req, "page_size", 20));
            json items = json::array();
            for (const auto& p : page.items) items.push_back(summary(p));
            send_json(res, 200,
                      {{"page", page.page}, {"page_size", page.page_size}, {"total", page.total}, {"items", items}});
        });
    });
    s.Get(R"(/api/samples/(-?\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto p = queue_.get(path_id(req));
            const auto img = queue_.image(p.scene_id);
            json j = summary(p);
            j["width"] = img->width;
            j["height"] = img->height;
            j["image_png_base64"] = base64_encode(encode_png(*img));
            j["mask_png_base64"] = base64_encode(encode_png(p.mask));
            if (auto d = queue_.decision_for(p.id)) {
                auto dj = dig::to_json(*d);
                dj.erase("edited_mask_png_base64");
                j["decision"] = dj;
            }
            send_json(res, 200, j);
        });
    });
    s.Get(R"(/api/samples/(-?\d+)/image\.png)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto p = queue_.get(path_id(req));
            const auto bytes = encode_png(*queue_.image(p.scene_id));
            res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
        });
    });
    s.Get(R"(/api/samples/(-?\d+)/mask\.png)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto bytes = encode_png(queue_.get(path_id(req)).mask);
            res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
        });
    });
    s.Post(R"(/api/samples/(-?\d+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const int id = path_id(req);
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::exception& e) {
                throw dig::ValidationError(std::string("invalid JSON: ") + e.what());
            }
            auto d = dig::decision_from_json(body);
            if (body.contains("proposed_ref") && d.proposed_ref != id)
                throw dig::ValidationError("proposed_ref does not match the URL");
            d.proposed_ref = id;
            if (d.reviewer.empty()) d.reviewer = "anonymous";
            if (d.timestamp.empty()) d.timestamp = utc_now();
            try {
                const auto updated = queue_.submit(d);
                send_json(res, 200, summary(updated));
            } catch (const dig::ConflictError& e) {
                json j{{"error", e.what()}, {"status", dig::to_string(queue_.get(id).status)}};
                if (auto w = queue_.decision_for(id)) {
                    auto wj = dig::to_json(*w);
                    wj.erase("edited_mask_png_base64");
                    j["decision"] = wj;
                }
                send_json(res, 409, j);
            }
        });
    });
    s.Get("/api/stats", [this](const httplib::Request&, httplib::Response& res) {
        const auto st = queue_.stats();
        send_json(res, 200,
                  {{"total", st.total},
                   {"pending", st.pending},
                   {"accepted", st.accepted},
                   {"edited", st.edited},
                   {"rejected", st.rejected}});
    });
}

int ReviewService::bind(const std::string& host, int port) {
    if (port == 0) {
        const int p = server_->bind_to_any_port(host);
        if (p < 0) throw IoError("cannot bind " + host);
        return p;
    }
    if (!server_->bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void ReviewService::serve() { server_->listen_after_bind(); }

void ReviewService::stop() {
    if (server_) server_->stop();
}

bool ReviewService::running() const { return server_->is_running(); }

} // namespace usersod::review
