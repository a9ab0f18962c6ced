#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "usersod/core.hpp"

namespace usersod::dig {

class NotFoundError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class ConflictError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class BackendError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct DetectedObject {
    BoundingBox bbox;
    std::string label;
    double confidence = 0.0;
    std::string source_detector;

    bool operator==(const DetectedObject&) const = default;
};

enum class SampleStatus { pending, accepted, edited, rejected };
enum class Verdict { accept, reject, edit };
std::string to_string(SampleStatus s);
std::string to_string(Verdict v);
SampleStatus status_from_string(const std::string& s);
Verdict verdict_from_string(const std::string& s);

struct ProposedSample {
    int id = 0;
    int scene_id = 0;
    int object_index = 0; // position among the scene's merged detections
    DetectedObject detected;
    BinaryMask mask;
    std::vector<std::string> commands;
    Provenance provenance = Provenance::synthetic_oracle;
    SampleStatus status = SampleStatus::pending;
    std::string note; // backend failure or empty generation

    bool operator==(const ProposedSample&) const = default;
};

struct CorrectionDecision {
    int proposed_ref = 0;
    Verdict verdict = Verdict::accept;
    std::optional<BinaryMask> edited_mask;
    std::optional<std::vector<std::string>> edited_commands;
    std::string reviewer;
    std::string timestamp;
};

nlohmann::json to_json(const CorrectionDecision& d);
CorrectionDecision decision_from_json(const nlohmann::json& j);

inline const std::string kDefaultPrompt =
    "Describe a short first-person need command that would make a user look for this {label}.";

struct PromptTemplate {
    std::string text = kDefaultPrompt;

    PromptTemplate() = default;
    explicit PromptTemplate(std::string t);
    std::string fill(const std::string& label) const;
};

inline constexpr double kMergeIou = 0.5;
inline constexpr int kMinBoxSide = 2;

class Detector {
  public:
    virtual ~Detector() = default;
    virtual std::string name() const = 0;
    virtual std::vector<DetectedObject> detect(const ImageTensor& image) = 0;
};

class Segmenter {
  public:
    virtual ~Segmenter() = default;
    virtual BinaryMask segment(const ImageTensor& image, const BoundingBox& bbox) = 0;
};

class CommandGenerator {
  public:
    virtual ~CommandGenerator() = default;
    virtual std::vector<std::string> generate(const std::string& prompt, const std::string& label,
                                              const ImageTensor& appearance) = 0;
};

/// Ensemble union, then same-label boxes with IoU > 0.5 collapse onto the most confident one.
std::vector<DetectedObject> merge_detections(std::vector<DetectedObject> all);
std::vector<DetectedObject> detect_objects(const ImageTensor& image, const std::vector<Detector*>& detectors);
BinaryMask segment_object(const ImageTensor& image, const BoundingBox& bbox, Segmenter& segmenter);
/// M ⊙ I: pixels outside the mask set to 0.
ImageTensor masked_appearance(const ImageTensor& image, const BinaryMask& mask);
std::vector<std::string> generate_commands(const PromptTemplate& prompt, const std::string& label,
                                           const ImageTensor& appearance, CommandGenerator& generator);

// Synthetic oracles read the generator's scene record.

struct OracleConfig {
    int detectors = 2;
    int jitter = 0;          // max per-edge box shift in pixels
    double miss_rate = 0.0;  // probability an object is skipped by a detector
    uint64_t seed = 0;
};

class OracleDetector : public Detector {
  public:
    OracleDetector(const SceneRecord& scene, std::string name, int jitter, double miss_rate, uint64_t seed);
    std::string name() const override { return name_; }
    std::vector<DetectedObject> detect(const ImageTensor& image) override;

  private:
    const SceneRecord& scene_;
    std::string name_;
    int jitter_;
    double miss_rate_;
    uint64_t seed_;
};

/// Returns the mask of the object whose box best matches the prompt box.
class OracleSegmenter : public Segmenter {
  public:
    explicit OracleSegmenter(const SceneRecord& scene) : scene_(scene) {}
    BinaryMask segment(const ImageTensor& image, const BoundingBox& bbox) override;

  private:
    const SceneRecord& scene_;
};

/// Identifies the object from the appearance's support and returns the generator's commands resolving to it.
class OracleCommandGenerator : public CommandGenerator {
  public:
    explicit OracleCommandGenerator(const SceneRecord& scene) : scene_(scene) {}
    std::vector<std::string> generate(const std::string& prompt, const std::string& label,
                                      const ImageTensor& appearance) override;

  private:
    const SceneRecord& scene_;
};

struct HttpConfig {
    std::vector<std::string> detector_urls;
    std::string segmenter_url;
    std::string generator_url;
    int timeout_seconds = 30;
    int retries = 2;
};

/// JSON-over-HTTP client shared by the external backends.
nlohmann::json post_json(const std::string& base_url, const std::string& path, const nlohmann::json& body,
                         int timeout_seconds, int retries);

class HttpDetector : public Detector {
  public:
    HttpDetector(std::string url, const HttpConfig& cfg) : url_(std::move(url)), cfg_(cfg) {}
    std::string name() const override { return url_; }
    std::vector<DetectedObject> detect(const ImageTensor& image) override;

  private:
    std::string url_;
    HttpConfig cfg_;
};

class HttpSegmenter : public Segmenter {
  public:
    HttpSegmenter(std::string url, const HttpConfig& cfg) : url_(std::move(url)), cfg_(cfg) {}
    BinaryMask segment(const ImageTensor& image, const BoundingBox& bbox) override;

  private:
    std::string url_;
    HttpConfig cfg_;
};

class HttpCommandGenerator : public CommandGenerator {
  public:
    HttpCommandGenerator(std::string url, const HttpConfig& cfg) : url_(std::move(url)), cfg_(cfg) {}
    std::vector<std::string> generate(const std::string& prompt, const std::string& label,
                                      const ImageTensor& appearance) override;

  private:
    std::string url_;
    HttpConfig cfg_;
};

struct Backends {
    std::vector<std::unique_ptr<Detector>> detectors;
    std::unique_ptr<Segmenter> segmenter;
    std::unique_ptr<CommandGenerator> generator;
    Provenance provenance = Provenance::synthetic_oracle;
};

/// Backends are built per scene so oracles can bind to the scene record.
using BackendFactory = std::function<Backends(const SceneRecord&)>;
BackendFactory oracle_backends(const OracleConfig& cfg);
BackendFactory http_backends(const HttpConfig& cfg);

struct QueueStats {
    size_t total = 0, pending = 0, accepted = 0, edited = 0, rejected = 0;
};

struct QueuePage {
    int page = 1;
    int page_size = 20;
    size_t total = 0; // pending samples overall
    std::vector<ProposedSample> items;
};

/// The single serialized mutation point of the correction step.
class CorrectionQueue {
  public:
    CorrectionQueue(std::vector<ProposedSample> proposals, std::map<int, std::shared_ptr<const ImageTensor>> images,
                    std::optional<std::filesystem::path> audit_log = std::nullopt);
    CorrectionQueue(CorrectionQueue&& other) noexcept;

    QueueStats stats() const;
    /// Pending samples in (scene_id, object_index) order; pages start at 1.
    QueuePage list_pending(int page, int page_size) const;
    ProposedSample get(int id) const;
    std::shared_ptr<const ImageTensor> image(int scene_id) const;
    std::vector<ProposedSample> snapshot() const;
    std::optional<CorrectionDecision> decision_for(int id) const;

    /// Compare-and-set on pending; throws NotFoundError, ConflictError or ValidationError.
    ProposedSample submit(const CorrectionDecision& decision);
    /// Re-applies a decision log (same format as the audit log) without re-logging it.
    void replay(const std::filesystem::path& log);

    /// proposals.jsonl, proposals/{id}.png and images/{scene_id}.png
    void save(const std::filesystem::path& dir) const;
    static CorrectionQueue load(const std::filesystem::path& dir, std::optional<std::filesystem::path> audit_log);

  private:
    ProposedSample apply(const CorrectionDecision& decision, bool log);

    mutable std::shared_mutex mutex_;
    std::vector<ProposedSample> samples_; // sorted by (scene_id, object_index)
    std::map<int, size_t> index_;
    std::map<int, CorrectionDecision> decisions_;
    std::map<int, std::shared_ptr<const ImageTensor>> images_;
    std::optional<std::filesystem::path> audit_log_;
};

enum class CorrectionMode { auto_accept, file_queue, review_service };
CorrectionMode correction_from_string(const std::string& s);

struct DigConfig {
    PromptTemplate prompt;
    CorrectionMode correction = CorrectionMode::auto_accept;
    std::optional<std::filesystem::path> decisions; // file_queue input
};

/// Detection, segmentation and command generation for every scene.
CorrectionQueue propose(const std::vector<SceneRecord>& scenes, const BackendFactory& backends,
                        const PromptTemplate& prompt, std::optional<std::filesystem::path> audit_log = std::nullopt);

/// Accepts every pending sample that carries no backend error note.
size_t auto_accept(CorrectionQueue& queue);

/// Accepted and edited samples as scenes; scenes left without objects are dropped.
std::vector<SceneRecord> emit_dataset(const CorrectionQueue& queue, const std::vector<SceneRecord>& inputs);

struct DigReport {
    size_t scenes_in = 0;
    size_t scenes_out = 0;
    size_t commands_out = 0;
    QueueStats queue;
};

/// Full pipeline for the auto and file modes; the serve mode is driven from the CLI.
DigReport run_dig(const std::vector<SceneRecord>& scenes, const BackendFactory& backends, const DigConfig& config,
                  const std::filesystem::path& out_dir);

} // namespace usersod::dig
