#include "mudjack/eval.hpp"

#include <stdexcept>

#include "mudjack/artifact_io.hpp"

namespace mudjack {

bool compute_cp(const Classifier& f, const Encoder& h, const BugInstance& bug) {
    return classify(f, h, bug.x_b) == bug.true_label;
}

double compute_acc(const Classifier& f, const Encoder& h, const ImageDataset& test,
                   RateCount* count) {
    if (test.size() == 0) {
        throw std::invalid_argument("compute_acc: empty test set");
    }
    auto preds = classify_dataset(f, h, test);
    RateCount rc;
    rc.total = test.size();
    for (int i = 0; i < test.size(); ++i) {
        rc.hits += preds[static_cast<size_t>(i)] == test.labels[static_cast<size_t>(i)] ? 1 : 0;
    }
    if (count != nullptr) {
        *count = rc;
    }
    return rc.percent();
}

double compute_asr(const Classifier& f, const Encoder& h, const ImageDataset& backdoored,
                   int target_class, RateCount* count) {
    if (backdoored.size() == 0) {
        throw std::invalid_argument("compute_asr: empty backdoored test set");
    }
    auto preds = classify_dataset(f, h, backdoored);
    RateCount rc;
    rc.total = backdoored.size();
    for (int pred : preds) {
        rc.hits += pred == target_class ? 1 : 0;
    }
    if (count != nullptr) {
        *count = rc;
    }
    return rc.percent();
}

double compute_accb(const Classifier& f, const Encoder& h, const ImageDataset& backdoored,
                    RateCount* count) {
    if (backdoored.size() == 0) {
        throw std::invalid_argument("compute_accb: empty backdoored test set");
    }
    auto preds = classify_dataset(f, h, backdoored);
    RateCount rc;
    rc.total = backdoored.size();
    for (int i = 0; i < backdoored.size(); ++i) {
        rc.hits +=
            preds[static_cast<size_t>(i)] == backdoored.labels[static_cast<size_t>(i)] ? 1 : 0;
    }
    if (count != nullptr) {
        *count = rc;
    }
    return rc.percent();
}

std::pair<std::optional<double>, std::optional<double>> compute_source_split_asr(
    const Classifier& f, const Encoder& h, const ImageDataset& test, const TriggerSpec& trigger,
    int source_class, int target_class, uint64_t seed, RateCount* source_count,
    RateCount* other_count) {
    if (source_class == target_class) {
        throw std::invalid_argument("compute_source_split_asr: source equals target class");
    }
    ImageDataset backdoored = make_backdoored_testset(test, trigger, target_class, seed);
    auto preds = classify_dataset(f, h, backdoored);
    RateCount src, other;
    for (int i = 0; i < backdoored.size(); ++i) {
        bool hit = preds[static_cast<size_t>(i)] == target_class;
        if (backdoored.labels[static_cast<size_t>(i)] == source_class) {
            src.total += 1;
            src.hits += hit ? 1 : 0;
        } else {
            other.total += 1;
            other.hits += hit ? 1 : 0;
        }
    }
    if (source_count != nullptr) {
        *source_count = src;
    }
    if (other_count != nullptr) {
        *other_count = other;
    }
    std::optional<double> s =
        src.total > 0 ? std::optional<double>(src.percent()) : std::nullopt;
    std::optional<double> o =
        other.total > 0 ? std::optional<double>(other.percent()) : std::nullopt;
    return {s, o};
}

EvalReport evaluate_stage(const std::string& experiment_id, const std::string& stage,
                          const Classifier& f, const Encoder& h, const ImageDataset& clean_test,
                          const ImageDataset& backdoored_test, int target_class,
                          const BugInstance* bug, uint64_t seed) {
    EvalReport report;
    report.experiment_id = experiment_id;
    report.stage = stage;
    report.seed = seed;
    report.model_hash = hex64(encoder_hash(h));
    report.acc = compute_acc(f, h, clean_test, &report.acc_count);
    if (backdoored_test.size() > 0) {
        report.asr = compute_asr(f, h, backdoored_test, target_class, &report.asr_count);
        report.accb = compute_accb(f, h, backdoored_test, &report.accb_count);
    }
    if (bug != nullptr) {
        report.cp = compute_cp(f, h, *bug);
    }
    return report;
}

std::string report_csv_header() {
    return "experiment_id,stage,CP,Acc,ASR,AccB,ASR_source,ASR_other,seed,model_hash\n";
}

std::string report_csv_row(const EvalReport& r) {
    std::string row = r.experiment_id + "," + r.stage + ",";
    row += r.cp ? "1" : "0";
    row += "," + format_double(r.acc, 4) + "," + format_double(r.asr, 4) + "," +
           format_double(r.accb, 4) + ",";
    row += r.asr_source ? format_double(*r.asr_source, 4) : "";
    row += ",";
    row += r.asr_other ? format_double(*r.asr_other, 4) : "";
    row += "," + std::to_string(r.seed) + "," + r.model_hash + "\n";
    return row;
}

void write_report_csv(const std::string& path, const std::vector<EvalReport>& reports) {
    std::string text = report_csv_header();
    for (const auto& r : reports) {
        text += report_csv_row(r);
    }
    write_file_text(path, text);
}

}  // namespace mudjack
