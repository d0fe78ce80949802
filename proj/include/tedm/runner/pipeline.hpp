#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tedm/error.hpp"
#include "tedm/eval/metrics.hpp"
#include "tedm/runner/config.hpp"

namespace tedm::runner {

enum class Stage { kData, kPretrain, kExtract, kTrainHeads, kEvaluate, kReport };
inline constexpr Stage kAllStages[] = {Stage::kData, Stage::kPretrain, Stage::kExtract,
                                       Stage::kTrainHeads, Stage::kEvaluate, Stage::kReport};

const char* stage_name(Stage s);
// Output directory of a stage, relative to the run directory.
const char* stage_dir(Stage s);

// A failure inside a stage. what() starts with the stage name.
class StageFailure : public Error {
 public:
  StageFailure(Stage stage, ErrorCode cause, const std::string& message);
  Stage stage() const noexcept { return stage_; }
  ErrorCode cause() const noexcept { return cause_; }

 private:
  Stage stage_;
  ErrorCode cause_;
};

struct Artifact {
  std::string path;  // relative to the run directory
  std::string hash;
};

struct StageRecord {
  std::string name;
  std::string input_hash;
  std::string output_hash;
  double seconds = 0;
  bool skipped = false;
  std::vector<Artifact> artifacts;
};

struct RunManifest {
  std::string config_text;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;
  std::vector<std::string> results;  // report files, relative

  const StageRecord* find(const std::string& stage) const;
  bool complete_through(Stage s) const;

  std::string serialize() const;
  static RunManifest parse(const std::string& text);
  static RunManifest load(const std::filesystem::path& run_dir);
};

inline constexpr const char* kManifestFile = "manifest.txt";

struct PipelineOptions {
  Stage last = Stage::kReport;
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

// Runs every stage up to options.last. A stage is skipped when its input
// hash matches the previous manifest and its artifacts still hash-match.
// Each stage writes into a temp directory that is renamed into place on
// success and removed on failure.
RunManifest run_pipeline(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                         const PipelineOptions& options = {});

// Per-image metric rows as written by the evaluate stage.
std::vector<eval::MetricRecord> read_metric_records(const std::filesystem::path& csv);

enum class ReportFormat { kCsv, kText, kSvg };

// Writes report files for one format into `dir` and returns their names.
// Needs a manifest whose evaluate stage completed.
std::vector<std::string> emit_report(const RunManifest& manifest, const std::filesystem::path& run_dir,
                                     const std::filesystem::path& dir, ReportFormat format);

}  // namespace tedm::runner
