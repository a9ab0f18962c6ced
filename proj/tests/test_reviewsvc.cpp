#include "doctest.h"

#include <atomic>
#include <fstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "support.hpp"
#include "usersod/image_io.hpp"
#include "usersod/reviewsvc.hpp"
#include "usersod/synthscenes.hpp"

using namespace usersod;
using nlohmann::json;

namespace {

struct Running {
    dig::CorrectionQueue queue;
    review::ReviewService service;
    int port;
    std::thread thread;

    Running(dig::CorrectionQueue q, std::optional<std::filesystem::path> static_dir = std::nullopt)
        : queue(std::move(q)), service(queue, static_dir), port(service.bind("127.0.0.1", 0)),
          thread([this] { service.serve(); }) {
        for (int i = 0; i < 200 && !service.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    ~Running() {
        service.stop();
        thread.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

dig::CorrectionQueue make_queue(int scenes, std::optional<std::filesystem::path> audit = std::nullopt) {
    auto data = synth::generate_dataset(support::small_generator(scenes, 3, 48));
    return dig::propose(data, dig::oracle_backends({}), dig::PromptTemplate{}, audit);
}

} // namespace

TEST_CASE("queue pages and sample details") {
    Running r(make_queue(4));
    auto c = r.client();
    const auto total = r.queue.stats().total;

    std::vector<int> ids;
    for (int page = 1;; ++page) {
        auto res = c.Get("/api/queue?page=" + std::to_string(page) + "&page_size=3");
        REQUIRE(res);
        REQUIRE(res->status == 200);
        auto j = json::parse(res->body);
        CHECK(j["total"] == total);
        if (j["items"].empty()) break;
        for (const auto& it : j["items"]) ids.push_back(it["id"]);
    }
    CHECK(ids.size() == total);

    auto res = c.Get("/api/samples/" + std::to_string(ids[0]));
    REQUIRE(res);
    CHECK(res->status == 200);
    auto j = json::parse(res->body);
    CHECK(j["width"] == 48);
    auto mask = decode_png_mask(base64_decode(j["mask_png_base64"].get<std::string>()));
    CHECK(mask == r.queue.get(ids[0]).mask);

    auto png = c.Get("/api/samples/" + std::to_string(ids[0]) + "/image.png");
    REQUIRE(png);
    CHECK(png->get_header_value("Content-Type") == "image/png");
    CHECK(decode_png_image(std::vector<uint8_t>(png->body.begin(), png->body.end())) ==
          *r.queue.image(r.queue.get(ids[0]).scene_id));

    CHECK(c.Get("/api/samples/999999")->status == 404);
    CHECK(c.Get("/api/queue?page=0")->status == 400);
    CHECK(c.Get("/api/queue?page=abc")->status == 400);
}

TEST_CASE("decisions: success, conflict with the winning decision, validation") {
    Running r(make_queue(2));
    auto c = r.client();
    const int id = r.queue.snapshot().front().id;
    const std::string url = "/api/samples/" + std::to_string(id) + "/decision";

    auto ok = c.Post(url, R"({"verdict":"reject","reviewer":"ann"})", "application/json");
    REQUIRE(ok);
    CHECK(ok->status == 200);
    CHECK(json::parse(ok->body)["status"] == "rejected");

    auto again = c.Post(url, R"({"verdict":"accept"})", "application/json");
    REQUIRE(again);
    CHECK(again->status == 409);
    auto body = json::parse(again->body);
    CHECK(body["decision"]["reviewer"] == "ann");
    CHECK(body["decision"]["verdict"] == "reject");

    const int other = r.queue.snapshot().back().id;
    const std::string url2 = "/api/samples/" + std::to_string(other) + "/decision";
    CHECK(c.Post(url2, "{not json", "application/json")->status == 400);
    CHECK(c.Post(url2, R"({"verdict":"edit"})", "application/json")->status == 400);
    CHECK(c.Post(url2, R"({"verdict":"accept","proposed_ref":-5})", "application/json")->status == 400);
    CHECK(c.Post("/api/samples/424242/decision", R"({"verdict":"accept"})", "application/json")->status == 404);

    auto ok2 = c.Post(url2, R"({"verdict":"accept"})", "application/json");
    CHECK(ok2->status == 200);
    auto d = r.queue.decision_for(other);
    REQUIRE(d);
    CHECK(d->reviewer == "anonymous");
    CHECK(d->timestamp.size() == 20);

    auto stats = json::parse(c.Get("/api/stats")->body);
    CHECK(stats["accepted"] == 1);
    CHECK(stats["rejected"] == 1);
}

TEST_CASE("an edited mask travels as base64 png") {
    Running r(make_queue(1));
    auto c = r.client();
    const auto s = r.queue.snapshot().front();
    BinaryMask m(s.mask.height, s.mask.width);
    m.at(2, 3) = 1;
    json body{{"verdict", "edit"},
              {"edited_mask_png_base64", base64_encode(encode_png(m))},
              {"edited_commands", {"I want to find the odd one."}}};
    auto res = c.Post("/api/samples/" + std::to_string(s.id) + "/decision", body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(r.queue.get(s.id).mask == m);
}

TEST_CASE("concurrent clients racing on one sample: one 200, the rest 409") {
    auto dir = support::temp_dir("svc_race");
    Running r(make_queue(2, dir / "audit.jsonl"));
    const int id = r.queue.snapshot().front().id;
    std::atomic<int> ok{0}, conflict{0}, other{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t)
        threads.emplace_back([&, t] {
            httplib::Client c("127.0.0.1", r.port);
            json body{{"verdict", "accept"}, {"reviewer", "r" + std::to_string(t)}};
            auto res = c.Post("/api/samples/" + std::to_string(id) + "/decision", body.dump(), "application/json");
            if (res && res->status == 200) ++ok;
            else if (res && res->status == 409) ++conflict;
            else ++other;
        });
    for (auto& t : threads) t.join();
    CHECK(ok == 1);
    CHECK(conflict == 7);
    CHECK(other == 0);
    std::ifstream f(dir / "audit.jsonl");
    int lines = 0;
    for (std::string l; std::getline(f, l);) ++lines;
    CHECK(lines == 1);
}

TEST_CASE("static directory is served") {
    auto dir = support::temp_dir("svc_static");
    std::ofstream(dir / "index.html") << "<html>review</html>";
    Running r(make_queue(1), dir);
    auto res = r.client().Get("/index.html");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->body == "<html>review</html>");
}
