#include "usersod/digger.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "httplib.h"

#include "usersod/image_io.hpp"
#include "usersod/rng.hpp"

namespace usersod::dig {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(SampleStatus s) {
    switch (s) {
    case SampleStatus::pending: return "pending";
    case SampleStatus::accepted: return "accepted";
    case SampleStatus::edited: return "edited";
    case SampleStatus::rejected: return "rejected";
    }
    return "?";
}

std::string to_string(Verdict v) {
    switch (v) {
    case Verdict::accept: return "accept";
    case Verdict::reject: return "reject";
    case Verdict::edit: return "edit";
    }
    return "?";
}

SampleStatus status_from_string(const std::string& s) {
    for (auto v : {SampleStatus::pending, SampleStatus::accepted, SampleStatus::edited, SampleStatus::rejected})
        if (to_string(v) == s) return v;
    throw ValidationError("unknown status '" + s + "'");
}

Verdict verdict_from_string(const std::string& s) {
    for (auto v : {Verdict::accept, Verdict::reject, Verdict::edit})
        if (to_string(v) == s) return v;
    throw ValidationError("unknown verdict '" + s + "'");
}

json to_json(const CorrectionDecision& d) {
    json j{{"proposed_ref", d.proposed_ref},
           {"verdict", to_string(d.verdict)},
           {"reviewer", d.reviewer},
           {"timestamp", d.timestamp}};
    if (d.edited_mask) j["edited_mask_png_base64"] = base64_encode(encode_png(*d.edited_mask));
    if (d.edited_commands) j["edited_commands"] = *d.edited_commands;
    return j;
}

CorrectionDecision decision_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("decision must be a JSON object");
    CorrectionDecision d;
    try {
        if (j.contains("proposed_ref")) d.proposed_ref = j.at("proposed_ref").get<int>();
        d.verdict = verdict_from_string(j.at("verdict").get<std::string>());
        if (j.contains("reviewer")) d.reviewer = j.at("reviewer").get<std::string>();
        if (j.contains("timestamp")) d.timestamp = j.at("timestamp").get<std::string>();
        if (j.contains("edited_mask_png_base64") && !j.at("edited_mask_png_base64").is_null())
            d.edited_mask = decode_png_mask(base64_decode(j.at("edited_mask_png_base64").get<std::string>()));
        if (j.contains("edited_commands") && !j.at("edited_commands").is_null())
            d.edited_commands = j.at("edited_commands").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed decision: ") + e.what());
    } catch (const InvariantError& e) {
        throw ValidationError(std::string("edited mask: ") + e.what());
    } catch (const IoError& e) {
        throw ValidationError(std::string("edited mask: ") + e.what());
    }
    return d;
}

PromptTemplate::PromptTemplate(std::string t) : text(std::move(t)) {
    if (text.empty()) throw std::invalid_argument("prompt template must not be empty");
}

std::string PromptTemplate::fill(const std::string& label) const {
    std::string out = text;
    const std::string key = "{label}";
    for (size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + label.size()))
        out.replace(pos, key.size(), label);
    return out;
}

std::vector<DetectedObject> merge_detections(std::vector<DetectedObject> all) {
    // Stable sort keeps detector order among equal confidences.
    std::stable_sort(all.begin(), all.end(),
                     [](const DetectedObject& a, const DetectedObject& b) { return a.confidence > b.confidence; });
    std::vector<DetectedObject> kept;
    for (auto& d : all) {
        const bool dup = std::any_of(kept.begin(), kept.end(), [&](const DetectedObject& k) {
            return k.label == d.label && box_iou(k.bbox, d.bbox) > kMergeIou;
        });
        if (!dup) kept.push_back(std::move(d));
    }
    return kept;
}

std::vector<DetectedObject> detect_objects(const ImageTensor& image, const std::vector<Detector*>& detectors) {
    if (detectors.empty()) throw std::invalid_argument("detect_objects needs at least one detector");
    std::vector<DetectedObject> all;
    size_t failures = 0;
    for (auto* det : detectors) {
        try {
            for (auto& d : det->detect(image)) {
                if (!(d.confidence >= 0.0 && d.confidence <= 1.0))
                    throw BackendError("confidence " + std::to_string(d.confidence) + " outside [0,1]");
                if (!d.bbox.valid_within(image.width, image.height)) throw BackendError("invalid box");
                if (d.source_detector.empty()) d.source_detector = det->name();
                all.push_back(std::move(d));
            }
        } catch (const std::exception& e) {
            ++failures;
            spdlog::warn("detector {} failed: {}", det->name(), e.what());
        }
    }
    if (failures == detectors.size()) throw BackendError("all detectors failed");
    return merge_detections(std::move(all));
}

BinaryMask segment_object(const ImageTensor& image, const BoundingBox& bbox, Segmenter& segmenter) {
    if (!bbox.valid_within(image.width, image.height)) throw std::invalid_argument("bbox outside image");
    if (bbox.width() < kMinBoxSide || bbox.height() < kMinBoxSide)
        throw std::invalid_argument("bbox below minimum size");
    BinaryMask m = segmenter.segment(image, bbox);
    if (m.height != image.height || m.width != image.width || !m.is_binary())
        throw BackendError("segmenter returned a mask that is not binary or not image-sized");
    return m;
}

ImageTensor masked_appearance(const ImageTensor& image, const BinaryMask& mask) {
    if (image.height != mask.height || image.width != mask.width)
        throw std::invalid_argument("masked_appearance: shape mismatch");
    ImageTensor out = image;
    const size_t plane = image.plane();
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i)
            if (!mask.data[i]) out.data[c * plane + i] = 0.0f;
    return out;
}

std::vector<std::string> generate_commands(const PromptTemplate& prompt, const std::string& label,
                                           const ImageTensor& appearance, CommandGenerator& generator) {
    return generator.generate(prompt.fill(label), label, appearance);
}

OracleDetector::OracleDetector(const SceneRecord& scene, std::string name, int jitter, double miss_rate,
                               uint64_t seed)
    : scene_(scene), name_(std::move(name)), jitter_(jitter), miss_rate_(miss_rate), seed_(seed) {
    if (jitter < 0) throw std::invalid_argument("jitter must be >= 0");
    if (!(miss_rate >= 0.0 && miss_rate <= 1.0)) throw std::invalid_argument("miss_rate must lie in [0,1]");
}

std::vector<DetectedObject> OracleDetector::detect(const ImageTensor& image) {
    Rng rng(splitmix64(seed_ ^ splitmix64(static_cast<uint64_t>(scene_.scene_id))));
    std::vector<DetectedObject> out;
    for (const auto& o : scene_.objects) {
        const bool miss = rng.uniform() < miss_rate_;
        auto shift = [&] { return jitter_ ? static_cast<int>(rng.index(2 * jitter_ + 1)) - jitter_ : 0; };
        BoundingBox b = o.bbox;
        b.x_min = std::clamp(b.x_min + shift(), 0, image.width - 1);
        b.y_min = std::clamp(b.y_min + shift(), 0, image.height - 1);
        b.x_max = std::clamp(b.x_max + shift(), b.x_min + 1, image.width);
        b.y_max = std::clamp(b.y_max + shift(), b.y_min + 1, image.height);
        const double confidence = 0.5 + 0.5 * rng.uniform();
        if (!miss) out.push_back({b, o.semantic_label, confidence, name_});
    }
    return out;
}

BinaryMask OracleSegmenter::segment(const ImageTensor& image, const BoundingBox& bbox) {
    const ObjectRecord* best = nullptr;
    double best_iou = 0.0;
    for (const auto& o : scene_.objects) {
        const double iou = box_iou(o.bbox, bbox);
        if (iou > best_iou) best = &o, best_iou = iou;
    }
    if (!best) return BinaryMask(image.height, image.width);
    return best->mask;
}

std::vector<std::string> OracleCommandGenerator::generate(const std::string&, const std::string&,
                                                          const ImageTensor& appearance) {
    BinaryMask support(appearance.height, appearance.width);
    const size_t plane = appearance.plane();
    for (size_t i = 0; i < plane; ++i)
        support.data[i] = (appearance.data[i] != 0.0f || appearance.data[plane + i] != 0.0f ||
                           appearance.data[2 * plane + i] != 0.0f)
                              ? 1
                              : 0;
    const ObjectRecord* best = nullptr;
    double best_iou = 0.0;
    for (const auto& o : scene_.objects) {
        const double iou = mask_iou(o.mask, support);
        if (iou > best_iou) best = &o, best_iou = iou;
    }
    std::vector<std::string> out;
    if (!best) return out;
    for (const auto& c : scene_.commands)
        if (c.target_object_id == best->object_id) out.push_back(c.text);
    return out;
}

json post_json(const std::string& base_url, const std::string& path, const json& body, int timeout_seconds,
               int retries) {
    httplib::Client cli(base_url);
    cli.set_connection_timeout(timeout_seconds, 0);
    cli.set_read_timeout(timeout_seconds, 0);
    cli.set_write_timeout(timeout_seconds, 0);
    std::string last_error;
    for (int attempt = 0; attempt <= retries; ++attempt) {
        auto res = cli.Post(path, body.dump(), "application/json");
        if (!res) {
            last_error = httplib::to_string(res.error());
        } else if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
        } else {
            try {
                return json::parse(res->body);
            } catch (const json::exception& e) {
                throw BackendError(base_url + path + ": invalid JSON response: " + e.what());
            }
        }
        spdlog::warn("{}{} attempt {} failed: {}", base_url, path, attempt + 1, last_error);
    }
    throw BackendError(base_url + path + ": " + last_error);
}

namespace {

json box_json(const BoundingBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

BoundingBox box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) throw BackendError("bbox must be [x_min, y_min, x_max, y_max]");
    return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

} // namespace

std::vector<DetectedObject> HttpDetector::detect(const ImageTensor& image) {
    const auto res = post_json(url_, "/detect", {{"image_png_base64", base64_encode(encode_png(image))}},
                               cfg_.timeout_seconds, cfg_.retries);
    std::vector<DetectedObject> out;
    try {
        for (const auto& d : res)
            out.push_back({box_from_json(d.at("bbox")), d.at("label").get<std::string>(),
                           d.at("confidence").get<double>(), url_});
    } catch (const json::exception& e) {
        throw BackendError(url_ + "/detect: malformed response: " + e.what());
    }
    return out;
}

BinaryMask HttpSegmenter::segment(const ImageTensor& image, const BoundingBox& bbox) {
    const auto res =
        post_json(url_, "/segment", {{"image_png_base64", base64_encode(encode_png(image))}, {"bbox", box_json(bbox)}},
                  cfg_.timeout_seconds, cfg_.retries);
    try {
        return decode_png_mask(base64_decode(res.at("mask_png_base64").get<std::string>()));
    } catch (const json::exception& e) {
        throw BackendError(url_ + "/segment: malformed response: " + e.what());
    }
}

std::vector<std::string> HttpCommandGenerator::generate(const std::string& prompt, const std::string& label,
                                                        const ImageTensor& appearance) {
    const auto res = post_json(url_, "/commands",
                               {{"prompt", prompt},
                                {"label", label},
                                {"appearance_png_base64", base64_encode(encode_png(appearance))}},
                               cfg_.timeout_seconds, cfg_.retries);
    try {
        return res.at("commands").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw BackendError(url_ + "/commands: malformed response: " + e.what());
    }
}

BackendFactory oracle_backends(const OracleConfig& cfg) {
    if (cfg.detectors < 1) throw std::invalid_argument("oracle ensemble needs at least one detector");
    return [cfg](const SceneRecord& scene) {
        Backends b;
        for (int k = 0; k < cfg.detectors; ++k)
            b.detectors.push_back(std::make_unique<OracleDetector>(scene, "oracle-" + std::to_string(k), cfg.jitter,
                                                                   cfg.miss_rate,
                                                                   splitmix64(cfg.seed + static_cast<uint64_t>(k))));
        b.segmenter = std::make_unique<OracleSegmenter>(scene);
        b.generator = std::make_unique<OracleCommandGenerator>(scene);
        b.provenance = Provenance::synthetic_oracle;
        return b;
    };
}

BackendFactory http_backends(const HttpConfig& cfg) {
    if (cfg.detector_urls.empty() || cfg.segmenter_url.empty() || cfg.generator_url.empty())
        throw std::invalid_argument("http backends need detector, segmenter and generator URLs");
    return [cfg](const SceneRecord&) {
        Backends b;
        for (const auto& url : cfg.detector_urls) b.detectors.push_back(std::make_unique<HttpDetector>(url, cfg));
        b.segmenter = std::make_unique<HttpSegmenter>(cfg.segmenter_url, cfg);
        b.generator = std::make_unique<HttpCommandGenerator>(cfg.generator_url, cfg);
        b.provenance = Provenance::external_service;
        return b;
    };
}

// ---- correction queue ----

CorrectionQueue::CorrectionQueue(std::vector<ProposedSample> proposals,
                                 std::map<int, std::shared_ptr<const ImageTensor>> images,
                                 std::optional<fs::path> audit_log)
    : samples_(std::move(proposals)), images_(std::move(images)), audit_log_(std::move(audit_log)) {
    std::stable_sort(samples_.begin(), samples_.end(), [](const ProposedSample& a, const ProposedSample& b) {
        return std::tie(a.scene_id, a.object_index) < std::tie(b.scene_id, b.object_index);
    });
    for (size_t i = 0; i < samples_.size(); ++i) {
        if (!index_.emplace(samples_[i].id, i).second)
            throw InvariantError("duplicate proposal id " + std::to_string(samples_[i].id));
        if (!images_.count(samples_[i].scene_id))
            throw InvariantError("proposal " + std::to_string(samples_[i].id) + " has no scene image");
    }
}

CorrectionQueue::CorrectionQueue(CorrectionQueue&& other) noexcept {
    std::unique_lock lock(other.mutex_);
    samples_ = std::move(other.samples_);
    index_ = std::move(other.index_);
    decisions_ = std::move(other.decisions_);
    images_ = std::move(other.images_);
    audit_log_ = std::move(other.audit_log_);
}

QueueStats CorrectionQueue::stats() const {
    std::shared_lock lock(mutex_);
    QueueStats s;
    s.total = samples_.size();
    for (const auto& p : samples_) {
        switch (p.status) {
        case SampleStatus::pending: ++s.pending; break;
        case SampleStatus::accepted: ++s.accepted; break;
        case SampleStatus::edited: ++s.edited; break;
        case SampleStatus::rejected: ++s.rejected; break;
        }
    }
    return s;
}

QueuePage CorrectionQueue::list_pending(int page, int page_size) const {
    if (page < 1) throw ValidationError("page must be >= 1");
    if (page_size < 1 || page_size > 1000) throw ValidationError("page_size must lie in [1,1000]");
    std::shared_lock lock(mutex_);
    QueuePage out;
    out.page = page;
    out.page_size = page_size;
    const size_t begin = static_cast<size_t>(page - 1) * page_size;
    for (const auto& p : samples_) {
        if (p.status != SampleStatus::pending) continue;
        if (out.total >= begin && out.items.size() < static_cast<size_t>(page_size)) out.items.push_back(p);
        ++out.total;
    }
    return out;
}

ProposedSample CorrectionQueue::get(int id) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(id);
    if (it == index_.end()) throw NotFoundError("no sample " + std::to_string(id));
    return samples_[it->second];
}

std::shared_ptr<const ImageTensor> CorrectionQueue::image(int scene_id) const {
    auto it = images_.find(scene_id);
    if (it == images_.end()) throw NotFoundError("no scene " + std::to_string(scene_id));
    return it->second;
}

std::vector<ProposedSample> CorrectionQueue::snapshot() const {
    std::shared_lock lock(mutex_);
    return samples_;
}

std::optional<CorrectionDecision> CorrectionQueue::decision_for(int id) const {
    std::shared_lock lock(mutex_);
    auto it = decisions_.find(id);
    if (it == decisions_.end()) return std::nullopt;
    return it->second;
}

ProposedSample CorrectionQueue::submit(const CorrectionDecision& decision) { return apply(decision, true); }

ProposedSample CorrectionQueue::apply(const CorrectionDecision& decision, bool log) {
    std::unique_lock lock(mutex_);
    auto it = index_.find(decision.proposed_ref);
    if (it == index_.end()) throw NotFoundError("no sample " + std::to_string(decision.proposed_ref));
    auto& s = samples_[it->second];
    if (s.status != SampleStatus::pending)
        throw ConflictError("sample " + std::to_string(s.id) + " is already " + to_string(s.status));

    if (decision.verdict == Verdict::edit) {
        if (!decision.edited_mask && !decision.edited_commands)
            throw ValidationError("an edit needs an edited mask or edited commands");
        if (decision.edited_mask) {
            const auto& m = *decision.edited_mask;
            const auto& img = *images_.at(s.scene_id);
            if (m.height != img.height || m.width != img.width)
                throw ValidationError("edited mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                                      ", image is " + std::to_string(img.height) + "x" + std::to_string(img.width));
            if (!m.is_binary()) throw ValidationError("edited mask is not binary");
            if (m.area() == 0) throw ValidationError("edited mask is empty");
        }
        if (decision.edited_commands)
            for (const auto& c : *decision.edited_commands)
                if (c.find_first_not_of(" \t\r\n") == std::string::npos)
                    throw ValidationError("edited commands must not be blank");
    } else if (decision.edited_mask || decision.edited_commands) {
        throw ValidationError("only an edit verdict may carry edits");
    }

    if (log && audit_log_) {
        std::ofstream f(*audit_log_, std::ios::app);
        if (!f) throw IoError("cannot append to audit log " + audit_log_->string());
        f << to_json(decision).dump() << "\n";
        f.flush();
        if (!f) throw IoError("cannot append to audit log " + audit_log_->string());
    }

    switch (decision.verdict) {
    case Verdict::accept: s.status = SampleStatus::accepted; break;
    case Verdict::reject: s.status = SampleStatus::rejected; break;
    case Verdict::edit:
        s.status = SampleStatus::edited;
        if (decision.edited_mask) s.mask = *decision.edited_mask;
        if (decision.edited_commands) s.commands = *decision.edited_commands;
        s.provenance = Provenance::human_edited;
        break;
    }
    decisions_[s.id] = decision;
    return s;
}

void CorrectionQueue::replay(const fs::path& log) {
    std::ifstream f(log);
    if (!f) throw IoError("cannot read decision log " + log.string());
    std::string line;
    for (int lineno = 1; std::getline(f, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            apply(decision_from_json(json::parse(line)), false);
        } catch (const std::exception& e) {
            throw InvariantError(log.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void CorrectionQueue::save(const fs::path& dir) const {
    std::shared_lock lock(mutex_);
    fs::create_directories(dir / "proposals");
    fs::create_directories(dir / "images");
    for (const auto& [sid, img] : images_) write_png(dir / "images" / (std::to_string(sid) + ".png"), *img);
    std::ofstream f(dir / "proposals.jsonl");
    if (!f) throw IoError("cannot write " + (dir / "proposals.jsonl").string());
    for (const auto& s : samples_) {
        const auto mask_rel = "proposals/" + std::to_string(s.id) + ".png";
        write_png(dir / mask_rel, s.mask);
        f << json{{"id", s.id},
                  {"scene_id", s.scene_id},
                  {"object_index", s.object_index},
                  {"bbox", box_json(s.detected.bbox)},
                  {"label", s.detected.label},
                  {"confidence", s.detected.confidence},
                  {"source_detector", s.detected.source_detector},
                  {"mask", mask_rel},
                  {"commands", s.commands},
                  {"provenance", to_string(s.provenance)},
                  {"status", to_string(s.status)},
                  {"note", s.note}}
                 .dump()
          << "\n";
    }
}

CorrectionQueue CorrectionQueue::load(const fs::path& dir, std::optional<fs::path> audit_log) {
    std::ifstream f(dir / "proposals.jsonl");
    if (!f) throw IoError("cannot read " + (dir / "proposals.jsonl").string());
    std::vector<ProposedSample> proposals;
    std::map<int, std::shared_ptr<const ImageTensor>> images;
    std::string line;
    for (int lineno = 1; std::getline(f, line); ++lineno) {
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            ProposedSample s;
            s.id = j.at("id").get<int>();
            s.scene_id = j.at("scene_id").get<int>();
            s.object_index = j.at("object_index").get<int>();
            s.detected = {box_from_json(j.at("bbox")), j.at("label").get<std::string>(),
                          j.at("confidence").get<double>(), j.at("source_detector").get<std::string>()};
            s.mask = read_png_mask(dir / j.at("mask").get<std::string>());
            s.commands = j.at("commands").get<std::vector<std::string>>();
            s.provenance = provenance_from_string(j.at("provenance").get<std::string>());
            // Status always restarts at pending; decisions come back through the audit log.
            s.note = j.value("note", "");
            if (!images.count(s.scene_id))
                images[s.scene_id] = std::make_shared<const ImageTensor>(
                    read_png_image(dir / "images" / (std::to_string(s.scene_id) + ".png")));
            proposals.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw IoError((dir / "proposals.jsonl").string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    CorrectionQueue q(std::move(proposals), std::move(images), audit_log);
    if (audit_log && fs::exists(*audit_log)) q.replay(*audit_log);
    return q;
}

CorrectionMode correction_from_string(const std::string& s) {
    if (s == "auto" || s == "auto_accept") return CorrectionMode::auto_accept;
    if (s == "file" || s == "file_queue") return CorrectionMode::file_queue;
    if (s == "serve" || s == "review_service") return CorrectionMode::review_service;
    throw std::invalid_argument("unknown correction mode '" + s + "'");
}

CorrectionQueue propose(const std::vector<SceneRecord>& scenes, const BackendFactory& backends,
                        const PromptTemplate& prompt, std::optional<fs::path> audit_log) {
    std::vector<ProposedSample> proposals;
    std::map<int, std::shared_ptr<const ImageTensor>> images;
    int next_id = 0;
    for (const auto& scene : scenes) {
        auto image = std::make_shared<const ImageTensor>(scene.image);
        images[scene.scene_id] = image;
        Backends b = backends(scene);
        std::vector<Detector*> dets;
        for (auto& d : b.detectors) dets.push_back(d.get());
        const auto detected = detect_objects(*image, dets);
        for (size_t i = 0; i < detected.size(); ++i) {
            ProposedSample s;
            s.id = next_id++;
            s.scene_id = scene.scene_id;
            s.object_index = static_cast<int>(i);
            s.detected = detected[i];
            s.provenance = b.provenance;
            try {
                s.mask = segment_object(*image, detected[i].bbox, *b.segmenter);
            } catch (const std::exception& e) {
                s.mask = BinaryMask(image->height, image->width);
                s.note = std::string("segmentation failed: ") + e.what();
                spdlog::warn("scene {} detection {}: {}", scene.scene_id, i, s.note);
                proposals.push_back(std::move(s));
                continue;
            }
            try {
                s.commands = generate_commands(prompt, detected[i].label, masked_appearance(*image, s.mask),
                                               *b.generator);
                if (s.commands.empty()) s.note = "empty generation";
            } catch (const std::exception& e) {
                s.note = std::string("command generation failed: ") + e.what();
                spdlog::warn("scene {} detection {}: {}", scene.scene_id, i, s.note);
            }
            proposals.push_back(std::move(s));
        }
    }
    return CorrectionQueue(std::move(proposals), std::move(images), std::move(audit_log));
}

size_t auto_accept(CorrectionQueue& queue) {
    size_t n = 0;
    for (const auto& s : queue.snapshot()) {
        if (s.status != SampleStatus::pending) continue;
        if (!s.note.empty() && s.note != "empty generation") {
            spdlog::warn("sample {} left pending: {}", s.id, s.note);
            continue;
        }
        // Fixed timestamp keeps auto runs byte-identical.
        queue.submit({s.id, Verdict::accept, std::nullopt, std::nullopt, "auto-accept", "1970-01-01T00:00:00Z"});
        ++n;
    }
    return n;
}

std::vector<SceneRecord> emit_dataset(const CorrectionQueue& queue, const std::vector<SceneRecord>& inputs) {
    std::map<int, std::vector<ProposedSample>> by_scene;
    for (auto& s : queue.snapshot()) {
        if (s.status == SampleStatus::rejected)
            spdlog::info("sample {} rejected{}", s.id,
                         queue.decision_for(s.id) ? " by " + queue.decision_for(s.id)->reviewer : std::string());
        if (s.status == SampleStatus::accepted || s.status == SampleStatus::edited)
            by_scene[s.scene_id].push_back(std::move(s));
    }
    std::vector<SceneRecord> out;
    for (const auto& in : inputs) {
        auto it = by_scene.find(in.scene_id);
        if (it == by_scene.end()) continue;
        SceneRecord r;
        r.scene_id = in.scene_id;
        r.image = in.image;
        r.gt_b = in.gt_b;
        r.rng_seed = in.rng_seed;
        for (const auto& s : it->second) {
            if (s.mask.area() == 0) {
                spdlog::warn("sample {} has an empty mask, skipped", s.id);
                continue;
            }
            ObjectRecord o;
            o.object_id = s.object_index;
            o.mask = s.mask;
            o.bbox = tight_bbox(s.mask);
            o.semantic_label = s.detected.label;
            for (const auto& text : s.commands)
                r.commands.push_back({static_cast<int>(r.commands.size()), text, o.object_id, s.provenance});
            r.objects.push_back(std::move(o));
        }
        if (!r.objects.empty()) out.push_back(std::move(r));
    }
    return out;
}

DigReport run_dig(const std::vector<SceneRecord>& scenes, const BackendFactory& backends, const DigConfig& config,
                  const fs::path& out_dir) {
    if (config.correction == CorrectionMode::review_service)
        throw std::invalid_argument("run_dig handles the auto and file modes; serve goes through reviewsvc");
    fs::create_directories(out_dir);
    const auto audit = out_dir / "audit.jsonl";
    fs::remove(audit);
    auto queue = propose(scenes, backends, config.prompt, audit);
    queue.save(out_dir / "queue");
    if (config.correction == CorrectionMode::auto_accept) {
        auto_accept(queue);
    } else if (config.decisions) {
        std::ifstream f(*config.decisions);
        if (!f) throw IoError("cannot read decisions " + config.decisions->string());
        std::string line;
        for (int lineno = 1; std::getline(f, line); ++lineno) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                queue.submit(decision_from_json(json::parse(line)));
            } catch (const std::exception& e) {
                throw InvariantError(config.decisions->string() + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }
    const auto emitted = emit_dataset(queue, scenes);
    serialize_dataset(emitted, out_dir, SceneCheck::relaxed);

    DigReport r;
    r.scenes_in = scenes.size();
    r.scenes_out = emitted.size();
    for (const auto& s : emitted) r.commands_out += s.commands.size();
    r.queue = queue.stats();
    json rep{{"scenes_in", r.scenes_in},
             {"scenes_out", r.scenes_out},
             {"commands_out", r.commands_out},
             {"total", r.queue.total},
             {"pending", r.queue.pending},
             {"accepted", r.queue.accepted},
             {"edited", r.queue.edited},
             {"rejected", r.queue.rejected}};
    std::ofstream(out_dir / "dig_report.json") << rep.dump(2) << "\n";
    spdlog::info("dig: {} scenes in, {} out, {} commands; {} accepted, {} edited, {} rejected, {} pending", r.scenes_in,
                 r.scenes_out, r.commands_out, r.queue.accepted, r.queue.edited, r.queue.rejected, r.queue.pending);
    return r;
}

} // namespace usersod::dig
