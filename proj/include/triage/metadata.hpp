#pragma once

#include <map>
#include <optional>
#include <string>

#include "triage/synthcorpus.hpp"

namespace triage {

/// One row of the study metadata table.
struct StudyMeta {
    std::string study_id;
    synth::Label label = synth::Label::Normal;
    std::optional<synth::Laterality> cancer_laterality;
    std::optional<double> tumor_size_mm;
    std::map<std::string, std::string> tags;
};

inline StudyMeta metadata_of(const synth::StudyRecord& rec) {
    return StudyMeta{rec.study_id, rec.label, rec.cancer_laterality(), rec.tumor_size_mm, rec.tags};
}

}  // namespace triage
