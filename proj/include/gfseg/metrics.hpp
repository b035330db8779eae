#pragma once

// Evaluation: integer confusion counts, per-class IoU, mean IoU over the
// base/novel/overall partitions, and the harmonic mean hIoU. Classes absent
// from both prediction and truth are excluded from the means.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gfseg/tensor.hpp"

namespace gfseg {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::vector<int> class_ids) : ids_(std::move(class_ids)) {
        for (std::size_t i = 0; i < ids_.size(); ++i) index_[ids_[i]] = i;
        counts_.assign(ids_.size() * ids_.size(), 0);
    }

    const std::vector<int>& class_ids() const { return ids_; }

    std::int64_t count(int truth_id, int pred_id) const { return counts_[slot(truth_id) * ids_.size() + slot(pred_id)]; }

    void add(int truth_id, int pred_id, std::int64_t n = 1) { counts_[slot(truth_id) * ids_.size() + slot(pred_id)] += n; }

    // Merge of partial matrices built over the same class set.
    void merge(const ConfusionMatrix& other) {
        if (other.ids_ != ids_) throw DataError("merging confusion matrices over different class sets");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    }

    std::int64_t row_sum(int truth_id) const {
        const std::size_t t = slot(truth_id);
        std::int64_t acc = 0;
        for (std::size_t p = 0; p < ids_.size(); ++p) acc += counts_[t * ids_.size() + p];
        return acc;
    }
    std::int64_t col_sum(int pred_id) const {
        const std::size_t p = slot(pred_id);
        std::int64_t acc = 0;
        for (std::size_t t = 0; t < ids_.size(); ++t) acc += counts_[t * ids_.size() + p];
        return acc;
    }

private:
    std::size_t slot(int id) const {
        const auto it = index_.find(id);
        if (it == index_.end()) throw DataError("label " + std::to_string(id) + " outside the registered class set");
        return it->second;
    }

    std::vector<int> ids_;
    std::map<int, std::size_t> index_;
    std::vector<std::int64_t> counts_;
};

// Per-pixel accumulation of acc[truth][pred].
template <typename Scalar>
ConfusionMatrix confusion_accumulate(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, ConfusionMatrix acc) {
    if (!pred.same_dims(truth)) throw ShapeError("confusion_accumulate shape mismatch");
    for (Index i = 0; i < pred.size(); ++i)
        acc.add(static_cast<int>(truth[i]), static_cast<int>(pred[i]));
    return acc;
}

// IoU_c = TP / (TP + FP + FN); classes absent from both sides are left out.
inline std::map<int, double> iou_per_class(const ConfusionMatrix& acc) {
    std::map<int, double> out;
    for (const int id : acc.class_ids()) {
        const std::int64_t tp = acc.count(id, id);
        const std::int64_t rows = acc.row_sum(id);
        const std::int64_t cols = acc.col_sum(id);
        if (rows + cols == 0) continue;
        const std::int64_t denom = rows + cols - tp;  // TP + FP + FN
        out[id] = denom == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(denom);
    }
    return out;
}

// Harmonic mean 2ab / (a + b), zero when both inputs are zero.
inline double hiou(double miou_base, double miou_novel) {
    const double s = miou_base + miou_novel;
    if (s <= 0.0) return 0.0;
    return 2.0 * miou_base * miou_novel / s;
}

struct EvalReport {
    std::map<int, double> per_class_iou;
    double miou_base = 0.0;
    double miou_novel = 0.0;
    double miou_overall = 0.0;
    double hiou_value = 0.0;
    int base_classes = 0;   // present base classes contributing to miou_base
    int novel_classes = 0;  // present novel classes contributing to miou_novel
    std::int64_t pixels = 0;
    std::int64_t images = 0;
};

inline EvalReport make_report(const ConfusionMatrix& acc, const std::set<int>& base_ids, std::int64_t images = 0) {
    EvalReport rep;
    rep.per_class_iou = iou_per_class(acc);
    rep.images = images;
    double base_sum = 0.0, novel_sum = 0.0, all_sum = 0.0;
    for (const auto& [id, iou] : rep.per_class_iou) {
        all_sum += iou;
        if (base_ids.count(id)) {
            base_sum += iou;
            ++rep.base_classes;
        } else {
            novel_sum += iou;
            ++rep.novel_classes;
        }
    }
    for (const int id : acc.class_ids()) rep.pixels += acc.row_sum(id);
    rep.miou_base = rep.base_classes ? base_sum / rep.base_classes : 0.0;
    rep.miou_novel = rep.novel_classes ? novel_sum / rep.novel_classes : 0.0;
    const int present = rep.base_classes + rep.novel_classes;
    rep.miou_overall = present ? all_sum / present : 0.0;
    rep.hiou_value = hiou(rep.miou_base, rep.miou_novel);
    return rep;
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace detail

// Stable-order structured text dump.
inline void write_report_text(const std::filesystem::path& path, const EvalReport& rep) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write report: " + path.string());
    os << "images = " << rep.images << "\n";
    os << "pixels = " << rep.pixels << "\n";
    for (const auto& [id, iou] : rep.per_class_iou) os << "class_iou." << id << " = " << detail::fmt_double(iou) << "\n";
    os << "miou.base = " << detail::fmt_double(rep.miou_base) << "\n";
    os << "miou.novel = " << detail::fmt_double(rep.miou_novel) << "\n";
    os << "miou.overall = " << detail::fmt_double(rep.miou_overall) << "\n";
    os << "hiou = " << detail::fmt_double(rep.hiou_value) << "\n";
}

inline std::string report_csv_header() { return "tag,miou_base,miou_novel,miou_overall,hiou"; }

inline std::string report_csv_row(const std::string& tag, const EvalReport& rep) {
    std::ostringstream os;
    os << tag << ',' << detail::fmt_double(rep.miou_base) << ',' << detail::fmt_double(rep.miou_novel) << ','
       << detail::fmt_double(rep.miou_overall) << ',' << detail::fmt_double(rep.hiou_value);
    return os.str();
}

} // namespace gfseg
