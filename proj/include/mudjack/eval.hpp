#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mudjack/bug_report.hpp"
#include "mudjack/dataset.hpp"
#include "mudjack/models.hpp"

namespace mudjack {

struct RateCount {
    int hits = 0;
    int total = 0;
    double percent() const { return total == 0 ? 0.0 : 100.0 * hits / total; }
};

struct EvalReport {
    std::string experiment_id;
    std::string stage;
    bool cp = false;
    double acc = 0.0;
    double asr = 0.0;
    double accb = 0.0;
    std::optional<double> asr_source;
    std::optional<double> asr_other;
    RateCount acc_count, asr_count, accb_count, asr_source_count, asr_other_count;
    uint64_t seed = 0;
    std::string model_hash;
};

bool compute_cp(const Classifier& f, const Encoder& h, const BugInstance& bug);

// Percentage of clean test inputs classified as their true label.
double compute_acc(const Classifier& f, const Encoder& h, const ImageDataset& test,
                   RateCount* count = nullptr);

// Percentage of backdoored test inputs (built by make_backdoored_testset)
// classified as the target class.
double compute_asr(const Classifier& f, const Encoder& h, const ImageDataset& backdoored,
                   int target_class, RateCount* count = nullptr);

// Percentage of backdoored test inputs classified as their true labels.
double compute_accb(const Classifier& f, const Encoder& h, const ImageDataset& backdoored,
                    RateCount* count = nullptr);

// ASR split by source class vs all other non-target classes. Absent when the
// corresponding partition is empty.
std::pair<std::optional<double>, std::optional<double>> compute_source_split_asr(
    const Classifier& f, const Encoder& h, const ImageDataset& test, const TriggerSpec& trigger,
    int source_class, int target_class, uint64_t seed, RateCount* source_count = nullptr,
    RateCount* other_count = nullptr);

// One full pre/post style evaluation of a pipeline stage.
EvalReport evaluate_stage(const std::string& experiment_id, const std::string& stage,
                          const Classifier& f, const Encoder& h, const ImageDataset& clean_test,
                          const ImageDataset& backdoored_test, int target_class,
                          const BugInstance* bug, uint64_t seed);

std::string report_csv_header();
std::string report_csv_row(const EvalReport& report);
void write_report_csv(const std::string& path, const std::vector<EvalReport>& reports);

}  // namespace mudjack
